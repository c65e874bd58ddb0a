import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from metatransfer.episodes import ClassGeometry, generate_synthetic, make_rng  # noqa: E402
from metatransfer.models import build_extractor  # noqa: E402

# acceptance results, printed in the terminal summary
ACCEPTANCE: dict = {}


@pytest.fixture(scope="session")
def small_ds():
    """30 classes of 8x8 images; splits 19/5/6."""
    return generate_synthetic(num_classes=30, samples_per_class=20, C=3, H=8, W=8, rng=make_rng(11, "data"))


@pytest.fixture(scope="session")
def noiseless_ds():
    return generate_synthetic(num_classes=30, samples_per_class=8, C=3, H=8, W=8,
                              class_geometry=ClassGeometry(noise=0.0), rng=make_rng(5, "data"))


@pytest.fixture
def small_extractor():
    return build_extractor(np.random.default_rng(0), in_channels=3, filters=4, num_blocks=4)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE):
        ok, line = ACCEPTANCE[num]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {num:>2}. {line}")


TINY_CONFIG = """\
data.classes = 40
data.samples_per_class = 20
data.height = 8
data.width = 8
pretrain.max_iterations = 20
pretrain.batch_size = 16
pretrain.filters = 4
meta.inner_epochs = 2
meta.query = 5
meta.eval_query = 5
curriculum.cadence = 2
curriculum.hard_tasks = 2
run.meta_train_tasks = 8
run.val_every = 2
run.val_tasks = 3
run.test_tasks = 3
"""


@pytest.fixture(scope="session")
def cli_runs(tmp_path_factory):
    """Every subcommand run once on a tiny configuration; returns the paths used."""
    from metatransfer.cli import main

    d = tmp_path_factory.mktemp("cli")
    cfg = d / "tiny.cfg"
    cfg.write_text(TINY_CONFIG, encoding="utf-8")
    p = {k: str(d / v) for k, v in {
        "cfg": "tiny.cfg", "data": "data.mtld", "pre": "pre.mtlc", "pre_png": "pre.png", "ss": "ss.mtlc",
        "test": "ss.test.csv", "bench": "bench.csv", "table": "bench.txt", "bench_png": "bench.png",
        "conv": "conv.csv", "conv_png": "conv.png", "ckdir": "ckpts"}.items()}
    p["dir"] = str(d)
    c = ["--config", p["cfg"]]
    steps = [
        ["gen-data", "--out", p["data"], "--seed", "3"] + c,
        ["pretrain", "--data", p["data"], "--out", p["pre"], "--figure", p["pre_png"], "--seed", "3"] + c,
        ["meta-train", "--data", p["data"], "--pretrained", p["pre"], "--variant", "ss_full", "--ht", "on",
         "--out", p["ss"], "--seed", "3"] + c,
        ["meta-test", "--ckpt", p["ss"], "--tasks", "4", "--out", p["test"], "--seed", "5"],
        ["bench", "--data", p["data"], "--pretrained", p["pre"], "--variants", "update_head,ss_full",
         "--out", p["bench"], "--table", p["table"], "--figure", p["bench_png"], "--seed", "3"] + c,
        ["eval-convergence", "--data", p["data"], "--pretrained", p["pre"], "--variants", "ft_full,ss_full",
         "--out", p["conv"], "--figure", p["conv_png"], "--checkpoint-dir", p["ckdir"], "--seed", "3"] + c,
    ]
    p["codes"] = [main(argv) for argv in steps]
    return p
