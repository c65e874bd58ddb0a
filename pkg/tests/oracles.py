"""Independent reference implementations used to check the library."""

from __future__ import annotations

import numpy as np


def conv2d_naive(x, w, b, stride=1, padding=0):
    """Direct nested-loop cross-correlation, no vectorization."""
    B, C, H, W = x.shape
    K, _, kh, kw = w.shape
    xp = np.zeros((B, C, H + 2 * padding, W + 2 * padding))
    xp[:, :, padding:padding + H, padding:padding + W] = x
    Ho = (H + 2 * padding - kh) // stride + 1
    Wo = (W + 2 * padding - kw) // stride + 1
    out = np.zeros((B, K, Ho, Wo))
    for n in range(B):
        for k in range(K):
            for i in range(Ho):
                for j in range(Wo):
                    acc = 0.0 if b is None else float(b[k])
                    for c in range(C):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[n, c, i * stride + u, j * stride + v] * w[k, c, u, v]
                    out[n, k, i, j] = acc
    return out


def central_diff(f, arrays, h=1e-5):
    """Central finite differences of scalar ``f()`` w.r.t. each array, perturbed in place."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        flat, gflat = a.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up = f()
            flat[i] = old - h
            down = f()
            flat[i] = old
            gflat[i] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def rel_err(auto, numeric) -> float:
    """max |auto - numeric| / (|numeric| + 1e-8), elementwise."""
    auto, numeric = np.asarray(auto), np.asarray(numeric)
    return float(np.max(np.abs(auto - numeric) / (np.abs(numeric) + 1e-8)))


def quadratic_meta_grad(theta, a, c, b, d, beta):
    """d/dtheta of 0.5*b*(theta' - d)^2 where theta' = theta - beta*a*(theta - c)."""
    adapted = theta - beta * a * (theta - c)
    return b * (adapted - d) * (1.0 - beta * a)


def gradcheck(build, leaves, h=1e-5):
    """Max relative error between tape gradients and central differences.

    ``build()`` must return a scalar Tensor computed from ``leaves`` (Tensors
    with requires_grad). Leaf data is perturbed in place for the numeric side.
    """
    from metatransfer.tensor import Tape

    for t in leaves:
        t.grad = None
    with Tape() as tape:
        loss = build()
    tape.backward(loss)
    auto = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in leaves]
    numeric = central_diff(lambda: build().item(), [t.data for t in leaves], h=h)
    return max(rel_err(a, n) for a, n in zip(auto, numeric))
