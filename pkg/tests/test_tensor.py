import math
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import central_diff, conv2d_naive, gradcheck, rel_err

from metatransfer.tensor import (
    ContractError,
    DegenerateBatchError,
    DimensionError,
    Tape,
    Tensor,
    batch_norm,
    channel_affine,
    concat_rows,
    conv2d,
    dropout,
    exp,
    log,
    matmul,
    max_pool2d,
    mean_pool,
    no_record,
    relu,
    reshape,
    softmax,
    softmax_cross_entropy,
    sqrt,
    transpose,
    tsum,
)


def leaf(a):
    return Tensor(a, requires_grad=True)


# ---------------------------------------------------------------- examples


def test_matmul_identity_and_dot():
    out = matmul(Tensor([[1, 0], [0, 1]]), Tensor([[3, 4], [5, 6]]))
    np.testing.assert_array_equal(out.data, [[3, 4], [5, 6]])
    assert matmul(Tensor([[1, 2]]), Tensor([[3], [4]])).data.tolist() == [[11.0]]


def test_matmul_zeros_and_mismatch():
    a = Tensor(np.random.default_rng(0).normal(size=(3, 4)))
    assert not matmul(a, Tensor(np.zeros((4, 2)))).data.any()
    with pytest.raises(DimensionError, match=r"\(3, 4\).*\(3, 2\)"):
        matmul(a, Tensor(np.zeros((3, 2))))


def test_conv_sum_of_ones():
    out = conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), Tensor([0.0]))
    assert out.shape == (1, 1, 1, 1) and out.data.item() == 9.0


def test_conv_zero_weight_gives_bias():
    x = Tensor(np.random.default_rng(1).normal(size=(2, 3, 5, 5)))
    out = conv2d(x, Tensor(np.zeros((2, 3, 3, 3))), Tensor([0.7, -1.5]), padding=1)
    assert np.all(out.data[:, 0] == 0.7) and np.all(out.data[:, 1] == -1.5)


def test_conv_shape_and_errors():
    rng = np.random.default_rng(2)
    out = conv2d(Tensor(rng.normal(size=(2, 3, 8, 8))), Tensor(rng.normal(size=(4, 3, 3, 3))), Tensor(np.zeros(4)),
                 padding=1)
    assert out.shape == (2, 4, 8, 8)
    with pytest.raises(DimensionError):
        conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))
    with pytest.raises(DimensionError):
        conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))))


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 0), (2, 1), (3, 2)])
def test_conv_matches_naive(stride, padding):
    rng = np.random.default_rng(stride * 10 + padding)
    x, w, b = rng.normal(size=(2, 2, 7, 6)), rng.normal(size=(3, 2, 3, 2)), rng.normal(size=3)
    out = conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=padding)
    np.testing.assert_allclose(out.data, conv2d_naive(x, w, b, stride, padding), rtol=0, atol=1e-12)


def test_relu_pool_examples():
    assert relu(Tensor([-1.0, 0.0, 2.0])).data.tolist() == [0, 0, 2]
    assert max_pool2d(Tensor([[[[1.0, 2.0], [3.0, 4.0]]]])).data.tolist() == [[[[4.0]]]]
    x = Tensor(np.arange(16.0).reshape(1, 1, 4, 4))
    np.testing.assert_array_equal(mean_pool(x).data, [[7.5]])


def test_max_pool_tie_routes_to_first():
    x = leaf(np.ones((1, 1, 2, 2)))
    with Tape() as tape:
        y = tsum(max_pool2d(x))
    tape.backward(y)
    np.testing.assert_array_equal(x.grad, [[[[1, 0], [0, 0]]]])


def test_batch_norm_normalizes():
    rng = np.random.default_rng(3)
    x = Tensor(rng.normal(2.0, 3.0, size=(6, 4, 5, 5)))
    out = batch_norm(x, Tensor(np.ones(4)), Tensor(np.zeros(4)), eps=0.0).data
    np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0.0, atol=1e-9)
    np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1.0, atol=1e-9)


def test_batch_norm_degenerate_batch():
    with pytest.raises(DegenerateBatchError):
        batch_norm(Tensor(np.ones((1, 2, 3, 3))), Tensor(np.ones(2)), Tensor(np.zeros(2)))


def test_batch_norm_running_stats_updated():
    rng = np.random.default_rng(4)
    x = Tensor(rng.normal(1.0, 2.0, size=(8, 2, 3, 3)))
    rm, rv = np.zeros(2), np.ones(2)
    batch_norm(x, Tensor(np.ones(2)), Tensor(np.zeros(2)), rm, rv, momentum=0.5)
    np.testing.assert_allclose(rm, 0.5 * x.data.mean(axis=(0, 2, 3)))
    frozen = batch_norm(x, Tensor(np.ones(2)), Tensor(np.zeros(2)), rm, rv, training=False, eps=0.0)
    expect = (x.data - rm.reshape(1, 2, 1, 1)) / np.sqrt(rv.reshape(1, 2, 1, 1))
    np.testing.assert_allclose(frozen.data, expect, atol=1e-12)


def test_cross_entropy_values():
    assert softmax_cross_entropy(Tensor(np.zeros((3, 5))), [0, 1, 4]).item() == pytest.approx(math.log(5), abs=1e-12)
    assert softmax_cross_entropy(Tensor([[10.0, -10.0]]), [0]).item() == pytest.approx(2.06e-9, rel=1e-2)
    with pytest.raises(IndexError):
        softmax_cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])


def test_cross_entropy_gradient():
    rng = np.random.default_rng(5)
    z = leaf(rng.normal(size=(4, 5)))
    y = [0, 3, 2, 2]
    assert gradcheck(lambda: softmax_cross_entropy(z, y), [z]) < 1e-6


# ---------------------------------------------------------------- backward contract


def test_square_gradient():
    x = leaf([3.0])
    with Tape() as tape:
        y = tsum(x * x)
    tape.backward(y)
    assert x.grad.tolist() == [6.0]


def test_no_grad_leaf_stays_empty():
    x, c = leaf([1.0, 2.0]), Tensor([3.0, 4.0])
    with Tape() as tape:
        y = tsum(x * c)
    tape.backward(y)
    assert c.grad is None and x.grad.tolist() == [3.0, 4.0]


def test_nonscalar_loss_rejected():
    x = leaf([1.0, 2.0])
    with Tape() as tape:
        y = x * 2.0
    with pytest.raises(ContractError):
        tape.backward(y)


def test_loss_from_other_tape_rejected():
    x = leaf([1.0])
    with Tape():
        y = tsum(x * 2.0)
    with pytest.raises(ContractError):
        Tape().backward(y)


def test_no_record_blocks_tape():
    x = leaf([1.0])
    with Tape() as tape:
        with no_record():
            x * 2.0
    assert tape.nodes == []


def test_empty_shape_rejected():
    with pytest.raises(DimensionError):
        Tensor(np.zeros((0, 3)))


def test_backward_is_linear():
    rng = np.random.default_rng(6)
    w = leaf(rng.normal(size=(4, 3)))
    x = Tensor(rng.normal(size=(5, 4)))
    labels = rng.integers(0, 3, size=5)

    def grad_of(a, b):
        w.grad = None
        with Tape() as tape:
            logits = matmul(x, w)
            l1 = softmax_cross_entropy(logits, labels)
            l2 = tsum(relu(logits) * relu(logits))
            loss = l1 * a + l2 * b
        tape.backward(loss)
        return w.grad.copy()

    g1, g2 = grad_of(1.0, 0.0), grad_of(0.0, 1.0)
    np.testing.assert_allclose(grad_of(2.5, -0.75), 2.5 * g1 - 0.75 * g2, atol=1e-10)


def test_forward_bit_identical_across_runs():
    rng = np.random.default_rng(7)
    x, w, b = rng.normal(size=(2, 3, 8, 8)), rng.normal(size=(4, 3, 3, 3)), rng.normal(size=4)
    first = conv2d(Tensor(x), Tensor(w), Tensor(b), padding=1)
    for _ in range(3):
        again = conv2d(Tensor(x), Tensor(w), Tensor(b), padding=1)
        assert again.data.tobytes() == first.data.tobytes()


def test_second_order_of_cubic():
    # d/dx (d/dx x^3) = 6x
    x = leaf([2.0])
    with Tape() as tape:
        y = tsum(x * x * x)
        (g,) = tape.gradient(y, [x], create_graph=True)
        gg = tsum(g)
    (h,) = tape.gradient(gg, [x])
    assert g.data.tolist() == [12.0] and h.data.tolist() == [12.0]


def test_create_graph_rejects_first_order_only_ops():
    x = leaf(np.random.default_rng(8).normal(size=(1, 1, 4, 4)))
    with Tape() as tape:
        y = tsum(max_pool2d(x))
        with pytest.raises(ContractError):
            tape.gradient(y, [x], create_graph=True)


# ---------------------------------------------------------------- finite-difference checks per op


def _weighted(out, seed=99):
    r = np.random.default_rng(seed).normal(size=out.shape)
    return tsum(out * r)


OP_CASES = {
    "add": lambda r: ([leaf(r.normal(size=(3, 4))), leaf(r.normal(size=(4,)))], lambda a, b: a + b),
    "sub": lambda r: ([leaf(r.normal(size=(3, 4))), leaf(r.normal(size=(3, 1)))], lambda a, b: a - b),
    "mul": lambda r: ([leaf(r.normal(size=(3, 4))), leaf(r.normal(size=(3, 4)))], lambda a, b: a * b),
    "div": lambda r: ([leaf(r.normal(size=(3, 4))), leaf(r.uniform(1, 2, size=(4,)))], lambda a, b: a / b),
    "exp": lambda r: ([leaf(r.normal(size=(3, 4)))], exp),
    "log": lambda r: ([leaf(r.uniform(0.5, 2, size=(3, 4)))], log),
    "sqrt": lambda r: ([leaf(r.uniform(0.5, 2, size=(3, 4)))], sqrt),
    "relu": lambda r: ([leaf(r.normal(size=(3, 4)))], relu),
    "reshape": lambda r: ([leaf(r.normal(size=(3, 4)))], lambda a: reshape(a, (2, 6))),
    "transpose": lambda r: ([leaf(r.normal(size=(3, 4)))], transpose),
    "tsum": lambda r: ([leaf(r.normal(size=(3, 4, 2)))], lambda a: tsum(a, axis=(0, 2), keepdims=True)),
    "concat_rows": lambda r: ([leaf(r.normal(size=(2, 3))), leaf(r.normal(size=(1, 3)))],
                              lambda a, b: concat_rows([a, b])),
    "matmul": lambda r: ([leaf(r.normal(size=(3, 4))), leaf(r.normal(size=(4, 2)))], matmul),
    "conv2d": lambda r: ([leaf(r.normal(size=(2, 2, 5, 5))), leaf(r.normal(size=(3, 2, 3, 3))),
                          leaf(r.normal(size=3))], lambda x, w, b: conv2d(x, w, b, padding=1)),
    "conv2d_strided": lambda r: ([leaf(r.normal(size=(2, 2, 6, 5))), leaf(r.normal(size=(2, 2, 3, 2))),
                                  leaf(r.normal(size=2))], lambda x, w, b: conv2d(x, w, b, stride=2, padding=1)),
    "max_pool2d": lambda r: ([leaf(r.normal(size=(2, 2, 4, 5)))], max_pool2d),
    "mean_pool": lambda r: ([leaf(r.normal(size=(2, 3, 3, 3)))], mean_pool),
    "batch_norm_train": lambda r: ([leaf(r.normal(size=(3, 2, 3, 3))), leaf(r.uniform(0.5, 1.5, 2)),
                                    leaf(r.normal(size=2))], lambda x, g, b: batch_norm(x, g, b)),
    "batch_norm_frozen": lambda r: ([leaf(r.normal(size=(3, 2, 3, 3))), leaf(r.uniform(0.5, 1.5, 2)),
                                     leaf(r.normal(size=2))],
                                    lambda x, g, b: batch_norm(x, g, b, np.array([0.1, -0.2]), np.array([0.8, 1.3]),
                                                               training=False)),
    "channel_affine": lambda r: ([leaf(r.normal(size=(2, 3, 2, 2))), leaf(r.normal(size=3)),
                                  leaf(r.normal(size=3))], channel_affine),
    "softmax": lambda r: ([leaf(r.normal(size=(3, 4)))], softmax),
    "softmax_cross_entropy": lambda r: ([leaf(r.normal(size=(4, 3)))],
                                        lambda z: softmax_cross_entropy(z, [0, 2, 1, 2])),
    "dropout": lambda r: ([leaf(r.normal(size=(3, 4)))],
                          lambda a: dropout(a, 0.7, np.random.default_rng(5))),
}


@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_op_gradients(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    leaves, fn = OP_CASES[name](rng)
    assert gradcheck(lambda: _weighted(fn(*leaves)), leaves) < 1e-4


def test_central_diff_oracle_self_check():
    a = np.array([1.0, -2.0])
    (g,) = central_diff(lambda: float(np.sum(a**3)), [a])
    assert rel_err(g, 3 * a**2) < 1e-8


@settings(max_examples=25, deadline=None)
@given(
    b=st.integers(1, 2), c=st.integers(1, 3), k=st.integers(1, 3),
    h=st.integers(3, 8), w=st.integers(3, 8), kh=st.integers(1, 3), kw=st.integers(1, 3),
    stride=st.integers(1, 2), pad=st.integers(0, 1), seed=st.integers(0, 2**16),
)
def test_conv_matches_naive_property(b, c, k, h, w, kh, kw, stride, pad, seed):
    rng = np.random.default_rng(seed)
    x, wt, bias = rng.normal(size=(b, c, h, w)), rng.normal(size=(k, c, kh, kw)), rng.normal(size=k)
    out = conv2d(Tensor(x), Tensor(wt), Tensor(bias), stride=stride, padding=pad)
    np.testing.assert_allclose(out.data, conv2d_naive(x, wt, bias, stride, pad), rtol=0, atol=1e-12)
