"""End-to-end acceptance checks; each records one PASS/FAIL summary line."""

import glob
import json
import os
import re
import time
import zlib
from fractions import Fraction

import numpy as np
import pytest
from conftest import ACCEPTANCE
from oracles import central_diff, conv2d_naive, gradcheck, quadratic_meta_grad, rel_err
from test_models import randomized_extractor, single_block
from test_tensor import OP_CASES, _weighted

from metatransfer import config, harness
from metatransfer.cli import main
from metatransfer.curriculum import CurriculumConfig
from metatransfer.episodes import generate_synthetic, make_rng, sample_episode
from metatransfer.meta import MetaConfig, adapt, base_learn, meta_train
from metatransfer.models import (
    VARIANTS,
    FeatureExtractor,
    SSParams,
    build_extractor,
    forward_features,
    forward_head,
    init_head,
    ss_param_count,
)
from metatransfer.pretrain import PretrainConfig, load_checkpoint, pretrain, save_checkpoint
from metatransfer.tensor import Tape, Tensor, conv2d, softmax_cross_entropy


def record(num, ok, line):
    ACCEPTANCE[num] = (bool(ok), line)
    assert ok, line


# ---------------------------------------------------------------- 1. gradients


def _network_loss(x, y, ext, ss, head, bn_mode):
    return softmax_cross_entropy(forward_head(forward_features(x, ext, ss, bn_mode=bn_mode), head), y)


def _composite_frozen(seed):
    ext = randomized_extractor(seed)
    rng = np.random.default_rng(1000 + seed)
    ss = SSParams.fresh(ext)
    for s, b in zip(ss.scale, ss.shift):
        s.data[:] = rng.uniform(0.5, 1.5, s.shape)
        b.data[:] = rng.normal(0, 0.1, b.shape)
    head = init_head(rng, ext.embedding_dim, 5, std=0.5)
    x, y = Tensor(rng.normal(size=(4, 3, 8, 8))), rng.integers(0, 5, 4)
    leaves = ext.parameters() + ss.parameters() + head.parameters()
    for p in leaves:
        p.requires_grad = True
    return gradcheck(lambda: _network_loss(x, y, ext, ss, head, "frozen"), leaves)


def _composite_batch_stats(seed):
    """Error over entries that are not structurally zero under batch statistics."""
    ext = randomized_extractor(seed)
    rng = np.random.default_rng(2000 + seed)
    head = init_head(rng, ext.embedding_dim, 5, std=0.5)
    x, y = Tensor(rng.normal(size=(4, 3, 8, 8))), rng.integers(0, 5, 4)
    leaves = ext.parameters() + head.parameters()
    for p in leaves:
        p.requires_grad = True
        p.grad = None
    with Tape() as tape:
        loss = _network_loss(x, y, ext, None, head, "transductive")
    tape.backward(loss)
    numeric = central_diff(lambda: _network_loss(x, y, ext, None, head, "transductive").item(),
                           [p.data for p in leaves])
    worst = 0.0
    for p, fd in zip(leaves, numeric):
        live = ~((np.abs(p.grad) < 1e-12) & (np.abs(fd) < 1e-9))
        if live.any():
            worst = max(worst, rel_err(p.grad[live], fd[live]))
    return worst


def test_criterion_01_gradient_suite():
    t0 = time.perf_counter()
    op_worst = 0.0
    for name, make in OP_CASES.items():
        for seed in range(20):
            rng = np.random.default_rng([zlib.crc32(name.encode()), seed])
            leaves, fn = make(rng)
            op_worst = max(op_worst, gradcheck(lambda: _weighted(fn(*leaves), seed), leaves))
    net_worst = max(_composite_frozen(seed) for seed in range(20))
    seconds = time.perf_counter() - t0
    bs_worst = max(_composite_batch_stats(seed) for seed in range(3))
    ok = op_worst < 1e-4 and net_worst < 1e-4 and bs_worst < 1e-4 and seconds < 60
    record(1, ok, f"gradient suite: {len(OP_CASES)} ops x 20 seeds max rel err {op_worst:.2e}, "
                  f"4-block network with SS x 20 seeds {net_worst:.2e}, batch-stat network {bs_worst:.2e}, "
                  f"{seconds:.1f}s (limit 60s)")


# ---------------------------------------------------------------- 2. conv oracle


def test_criterion_02_conv_oracle():
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(50):
        B, C, K = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 4)
        H, W = rng.integers(1, 9), rng.integers(1, 9)
        pad, stride = int(rng.integers(0, 2)), int(rng.integers(1, 3))
        kh, kw = rng.integers(1, min(H + 2 * pad, 3) + 1), rng.integers(1, min(W + 2 * pad, 3) + 1)
        x, w, b = rng.normal(size=(B, C, H, W)), rng.normal(size=(K, C, kh, kw)), rng.normal(size=K)
        got = conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=pad).data
        want = conv2d_naive(x, w, b, stride, pad)
        assert got.shape == want.shape
        worst = max(worst, float(np.abs(got - want).max()))
    record(2, worst < 1e-12, f"conv2d vs nested-loop oracle on 50 random shapes: max abs diff {worst:.1e} (limit 1e-12)")


# ---------------------------------------------------------------- 3. SS identity


def test_criterion_03_fresh_ss_is_identity(small_ds):
    ext = randomized_extractor(31)
    ss = SSParams.fresh(ext)
    ep = sample_episode(small_ds, "train", 5, 1, 15, make_rng(3, "ss-identity"))
    x = Tensor(ep.train_x)
    fwd = max(float(np.abs(forward_features(x, ext, ss, bn_mode=m).data
                           - forward_features(x, ext, None, bn_mode=m).data).max())
              for m in ("frozen", "transductive"))
    head = init_head(np.random.default_rng(4), ext.embedding_dim, 5, std=0.1)
    with_ss, without = [], []
    base_learn(ep, ext, ss, head, 0.1, 5, trace=with_ss)
    base_learn(ep, ext, None, head, 0.1, 5, trace=without)
    traj = 0.0
    for (la, pa), (lb, pb) in zip(with_ss, without):
        traj = max(traj, abs(la - lb), *(float(np.abs(a - b).max()) for a, b in zip(pa, pb)))
    ok = len(with_ss) == len(without) == 5 and fwd <= 1e-12 and traj <= 1e-12
    record(3, ok, f"fresh SS: forward diff {fwd:.1e}, 5-step base-learning trajectory diff {traj:.1e} (limit 1e-12)")


# ---------------------------------------------------------------- 4. freeze invariance


def test_criterion_04_extractor_frozen(small_ds, tmp_path):
    path = str(tmp_path / "pre.mtlc")
    save_checkpoint(pretrain(small_ds, PretrainConfig(max_iterations=30, batch_size=16, filters=4), 0), path)
    ext = load_checkpoint(path).extractor
    stored = load_checkpoint(path).extractor.checksum()
    cfg = MetaConfig(variant=VARIANTS["ss_full"], inner_epochs=1, query=5, eval_query=5, base_lr=0.1)
    res = meta_train(small_ds, ext, cfg, CurriculumConfig(), seed=0, meta_batches=500, val_every=0)
    moved = sum(not np.array_equal(s.data, 1.0) for s in res.final.ss.scale)
    sums = {ext.checksum(), res.final.extractor.checksum(), res.best.extractor.checksum()}
    ok = sums == {stored} and moved > 0
    record(4, ok, f"500 SS meta-batches: extractor checksum {'unchanged' if sums == {stored} else 'CHANGED'}, "
                  f"{moved}/{len(res.final.ss.scale)} scale tensors moved")


# ---------------------------------------------------------------- 5. parameter counts


def test_criterion_05_parameter_counts():
    rng = np.random.default_rng(5)
    checked = 0
    ok = True
    for c_in in range(1, 9):
        for filters in range(1, 9):
            ss, ft, ratio = ss_param_count(single_block(np.zeros((filters, c_in, 3, 3)), np.zeros(filters)))
            ok &= ratio == Fraction(2, 9 * c_in + 1) and ratio < Fraction(2, 9)
            checked += 1
    for _ in range(30):
        chain = [int(c) for c in rng.integers(1, 33, size=rng.integers(2, 6))]
        ext = FeatureExtractor([single_block(np.zeros((k, c, 3, 3)), np.zeros(k)).blocks[0]
                                for c, k in zip(chain, chain[1:])])
        ok &= ss_param_count(ext)[2] < Fraction(2, 9)
        checked += 1
    ok &= ss_param_count(build_extractor(rng))[2] < Fraction(2, 9)
    _, _, big = ss_param_count(single_block(np.zeros((1, 1, 7, 7)), np.zeros(1)))
    ok &= big == Fraction(2, 50) and big < Fraction(2, 49)
    record(5, ok, f"SS/FT parameter ratio: {checked} 3x3 configurations < 2/9 with exact per-filter value; "
                  f"7x7 single channel gives {big} = 2/50 < 2/49")


# ---------------------------------------------------------------- 6. second-order oracle


def test_criterion_06_quadratic_meta_gradient():
    rng = np.random.default_rng(6)
    worst = 0.0
    for _ in range(50):
        theta0, c, d = rng.normal(size=3)
        a, b, beta = rng.uniform(0.1, 2.0, size=3)
        theta = Tensor([theta0], requires_grad=True)
        with Tape() as tape:
            (fast,) = adapt([theta], lambda ps: ((ps[0] - c) * (ps[0] - c) * (0.5 * a)).sum(), beta, 1,
                            second_order=True)
            outer = ((fast - d) * (fast - d) * (0.5 * b)).sum()
        (g,) = tape.gradient(outer, [theta])
        worst = max(worst, rel_err(g.data, quadratic_meta_grad(theta0, a, c, b, d, beta)))
    record(6, worst < 1e-6, f"unrolled quadratic meta-gradient vs closed form, 50 draws: max rel err {worst:.1e}")


# ---------------------------------------------------------------- 7. curriculum exactness


def test_criterion_07_curriculum(small_ds, small_extractor):
    cfg = MetaConfig(variant=VARIANTS["ss_full"], inner_epochs=1, query=5, eval_query=5, base_lr=0.1,
                     meta_batch=2)
    cur = CurriculumConfig(enabled=True, cadence=10, hard_tasks=4)
    res = meta_train(small_ds, small_extractor, cfg, cur, seed=7, meta_batches=100, val_every=0)
    ok = len(res.hard_phases) == 10 and len(res.run_log) == 10
    for phase, line in zip(res.hard_phases, res.run_log):
        padded = set(int(v) for v in re.findall(r"\d+", line.split("padded=")[1]))
        flushed = {e.class_id for e in phase["flushed"]}
        ok &= len(phase["flushed"]) == 20 and len(phase["episodes"]) == 4
        for ep in phase["episodes"]:
            ok &= set(ep.class_map.tolist()) <= flushed | padded
    hard_rows = sum(1 for m in res.metrics if m[1] == "hard")
    ok &= hard_rows == 40
    record(7, ok, f"curriculum over 100 meta-batches: {len(res.hard_phases)} hard phases, flush sizes "
                  f"{sorted({len(p['flushed']) for p in res.hard_phases})}, {hard_rows} hard tasks, "
                  f"classes within flushed + padding")


# ---------------------------------------------------------------- 8, 9. desk-scale benchmark


@pytest.fixture(scope="session")
def benchmark():
    """Five seeds of: data, pretrain, update_head, ft_full, ss_full and ss_full with HT."""
    run = config.resolve("quickstart")
    out = []
    for seed in range(5):
        t0 = time.perf_counter()
        ds = generate_synthetic(rng=make_rng(seed, "data"))
        ext = pretrain(ds, run.pretrain_config(), seed).extractor
        rec = {"seed": seed, "pretrain_sec": time.perf_counter() - t0}
        for v, ht in (("update_head", False), ("ft_full", False), ("ss_full", False), ("ss_full", True)):
            rec[v + ("+ht" if ht else "")] = harness.run_variant(ds, ext, run, v, ht, seed)
        out.append(rec)
    return out


@pytest.mark.slow
def test_criterion_08_ordering_benchmark(benchmark):
    mean = {k: 100 * np.mean([r[k].acc for r in benchmark]) for k in ("update_head", "ft_full", "ss_full")}
    seconds = sum(r["pretrain_sec"] + sum(r[k].seconds for k in mean) for r in benchmark)
    ok = (mean["ss_full"] >= mean["ft_full"] >= mean["update_head"]
          and mean["ss_full"] - mean["update_head"] >= 5.0 and seconds < 15 * 60)
    record(8, ok, f"5-seed 5-way 1-shot means: SS {mean['ss_full']:.2f} FT {mean['ft_full']:.2f} "
                  f"update-head {mean['update_head']:.2f} (SS-UH {mean['ss_full'] - mean['update_head']:+.2f} pts), "
                  f"runtime {seconds / 60:.1f} min (limit 15)")


@pytest.mark.slow
def test_criterion_09_hard_task_gain(benchmark):
    ht = [100 * r["ss_full+ht"].curve[-1][1] for r in benchmark]
    plain = [100 * r["ss_full"].curve[-1][1] for r in benchmark]
    gains = [a - b for a, b in zip(ht, plain)]
    mean_gain = float(np.mean(gains))
    ok = np.mean(ht) >= np.mean(plain) - 0.5 and mean_gain >= 0.0
    record(9, ok, f"final-checkpoint validation: SS+HT {np.mean(ht):.2f} vs SS {np.mean(plain):.2f}, "
                  f"mean gain {mean_gain:+.2f} pts "
                  f"(per seed {', '.join(f'{g:+.2f}' for g in gains)})")


# ---------------------------------------------------------------- 10. determinism


def test_criterion_10_replay(cli_runs, tmp_path):
    manifests = sorted(glob.glob(os.path.join(cli_runs["dir"], "*.manifest.json")))
    compared, mismatched = 0, []
    for i, path in enumerate(manifests):
        out_dir = str(tmp_path / f"replay{i}")
        assert main(["replay", path, "--out-dir", out_dir]) == 0
        with open(path, encoding="utf-8") as fh:
            outputs = json.load(fh)["outputs"]
        for old in outputs:
            if not old.endswith(".csv"):
                continue
            with open(old, "rb") as a, open(os.path.join(out_dir, os.path.basename(old)), "rb") as b:
                if a.read() != b.read():
                    mismatched.append(os.path.basename(old))
            compared += 1
    ok = len(manifests) == 6 and compared >= 6 and not mismatched
    record(10, ok, f"replayed {len(manifests)} manifests: {compared} metrics CSVs compared, "
                   f"{len(mismatched)} differ {mismatched or ''}".rstrip())
