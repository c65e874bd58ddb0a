"""Experiment orchestration shared by the CLI and the benchmark tests."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

from .config import RunConfig
from .episodes import Dataset
from .meta import MetaConfig, MetaTrainResult, meta_test, meta_train, sample_tasks
from .models import VARIANTS, FeatureExtractor

log = logging.getLogger(__name__)

DEFAULT_BENCH = ("update_head", "ft_full", "ss_full")
DEFAULT_CONVERGENCE = ("ft_full", "ss_full")


@dataclass
class VariantRun:
    variant: str
    ht: bool
    acc: float
    ci: float
    curve: list  # (iteration, val_acc)
    best_iteration: int
    seconds: float
    train: Optional[MetaTrainResult] = field(default=None, repr=False)


def meta_batches_for(run: RunConfig, mcfg: MetaConfig) -> int:
    """Number of normal meta-batches covering the configured task budget."""
    return max(1, run["run.meta_train_tasks"] // mcfg.meta_batch)


def configs_for(run: RunConfig, variant: str, ht: bool) -> tuple:
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; choose from {sorted(VARIANTS)}")
    mcfg = replace(run.meta_config(), variant=VARIANTS[variant])
    ccfg = replace(run.curriculum_config(), enabled=bool(ht))
    return mcfg, ccfg


def validation_tasks(ds: Dataset, run: RunConfig, mcfg: MetaConfig, seed: int) -> list:
    # fixed per seed, so every variant is scored on the same tasks
    return sample_tasks(ds, "val", run["run.val_tasks"], mcfg, seed, "val")


def test_tasks(ds: Dataset, run: RunConfig, mcfg: MetaConfig, seed: int, count: Optional[int] = None) -> list:
    return sample_tasks(ds, "test", count or run["run.test_tasks"], mcfg, seed, "test")


def run_variant(
    ds: Dataset,
    extractor: FeatureExtractor,
    run: RunConfig,
    variant: str,
    ht: bool,
    seed: int,
    on_checkpoint: Optional[Callable] = None,
    evaluate: bool = True,
) -> VariantRun:
    """Meta-train one variant, then meta-test its best-validation learner."""
    mcfg, ccfg = configs_for(run, variant, ht)
    t0 = time.perf_counter()
    result = meta_train(
        ds,
        extractor,
        mcfg,
        ccfg,
        seed,
        meta_batches_for(run, mcfg),
        val_every=run["run.val_every"],
        val_tasks=validation_tasks(ds, run, mcfg, seed),
        on_checkpoint=on_checkpoint,
    )
    acc = ci = float("nan")
    if evaluate:
        summary = meta_test(test_tasks(ds, run, mcfg, seed), result.best, seed)
        acc, ci = summary["mean_acc"], summary["ci95"]
    seconds = time.perf_counter() - t0
    log.info("%s ht=%s acc=%.4f ci=%.4f (%.1fs)", variant, ht, acc, ci, seconds)
    return VariantRun(variant, bool(ht), acc, ci, result.curve, result.best_iteration, seconds, result)


def bench(
    ds: Dataset,
    extractor: FeatureExtractor,
    run: RunConfig,
    variants,
    ht_modes,
    seed: int,
) -> list[VariantRun]:
    """One row per (variant, ht) pair, in the order given."""
    return [run_variant(ds, extractor, run, v, ht, seed) for v in variants for ht in ht_modes]


def convergence(
    ds: Dataset,
    extractor: FeatureExtractor,
    run: RunConfig,
    variants,
    ht_modes,
    seed: int,
    on_checkpoint: Optional[Callable] = None,
) -> list[tuple]:
    """Validation curves as rows (iteration, variant, ht, val_acc)."""
    rows = []
    for v in variants:
        for ht in ht_modes:
            hook = None
            if on_checkpoint is not None:
                def hook(n, learner, acc, _v=v, _ht=ht):
                    on_checkpoint(_v, _ht, n, learner, acc)
            r = run_variant(ds, extractor, run, v, ht, seed, on_checkpoint=hook, evaluate=False)
            rows.extend((n, v, ht, acc) for n, acc in r.curve)
    return rows

