"""Large-scale pre-training of the feature extractor on all meta-train classes."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import checkpoint
from .episodes import CapacityError, Dataset, make_rng
from .models import FeatureExtractor, build_extractor, forward_features, forward_head, freeze, init_head
from .optim import Adam
from .tensor import Tape, Tensor, dropout, softmax_cross_entropy

log = logging.getLogger(__name__)


@dataclass
class PretrainConfig:
    lr: float = 1e-3
    lr_decay_every: int = 5000
    lr_floor: float = 1e-4
    batch_size: int = 64
    keep_prob: float = 0.9
    max_iterations: int = 10000
    filters: int = 16
    num_blocks: int = 4
    bn_eps: float = 1e-5

    def __post_init__(self):
        if self.lr_floor > self.lr:
            raise ValueError("lr_floor must not exceed the initial learning rate")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 for batch normalization")


@dataclass
class PretrainedModel:
    extractor: FeatureExtractor
    curve: list = field(default_factory=list)  # (iteration, lr, loss, acc)


def step_decay(iteration: int, init: float, every: int, floor: float) -> float:
    """Halve ``init`` every ``every`` iterations, clamped from below at ``floor``."""
    if iteration < 0:
        raise ValueError("iteration must be >= 0")
    return max(floor, init * 0.5 ** (iteration // every))


def lr_schedule(iteration: int, cfg: PretrainConfig) -> float:
    return step_decay(iteration, cfg.lr, cfg.lr_decay_every, cfg.lr_floor)


def holdout_split(ds: Dataset, holdout_per_class: int, seed: int, split: str = "train") -> tuple:
    """Per-class random holdout for hyperparameter selection.

    Returns (train_indices, holdout_indices), both sorted.
    """
    rng = make_rng(seed, "holdout")
    tr, ho = [], []
    for c in ds.meta_split[split]:
        idx = ds.class_index[c]
        if holdout_per_class >= len(idx):
            raise CapacityError(f"class {c} has {len(idx)} samples, cannot hold out {holdout_per_class}")
        perm = rng.permutation(idx)
        ho.append(perm[:holdout_per_class])
        tr.append(perm[holdout_per_class:])
    return np.sort(np.concatenate(tr)), np.sort(np.concatenate(ho))


def pretrain(
    ds: Dataset,
    cfg: PretrainConfig,
    seed: int,
    indices: Optional[np.ndarray] = None,
    progress=None,
) -> PretrainedModel:
    """Train extractor + a throwaway linear classifier on the merged meta-train classes.

    Returns the frozen extractor and the per-iteration training curve.
    """
    if indices is None:
        indices = ds.split_indices("train")
    if len(indices) == 0:
        raise CapacityError("meta-train split is empty")
    if cfg.batch_size > len(indices):
        raise CapacityError(f"batch_size {cfg.batch_size} exceeds the {len(indices)} available samples")
    classes = sorted(set(ds.labels[indices].tolist()))
    to_label = {c: i for i, c in enumerate(classes)}
    y_all = np.array([to_label[c] for c in ds.labels[indices].tolist()], dtype=np.int64)

    init_rng = make_rng(seed, "pretrain/init")
    batch_rng = make_rng(seed, "pretrain/batches")
    drop_rng = make_rng(seed, "pretrain/dropout")
    extractor = build_extractor(
        init_rng, in_channels=ds.image_shape[0], filters=cfg.filters, num_blocks=cfg.num_blocks, bn_eps=cfg.bn_eps
    )
    d = extractor.embedding_dim
    head = init_head(init_rng, d, len(classes), std=float(np.sqrt(1.0 / d)))
    params = extractor.parameters() + head.parameters()
    for p in params:
        p.requires_grad = True
    opt = Adam()

    curve = []
    order = np.zeros(0, dtype=np.int64)
    pos = 0
    for it in range(cfg.max_iterations):
        if pos + cfg.batch_size > len(order):
            order = batch_rng.permutation(len(indices))
            pos = 0
        sel = order[pos:pos + cfg.batch_size]
        pos += cfg.batch_size
        x = Tensor(ds.batch(indices[sel]))
        y = y_all[sel]
        lr = lr_schedule(it, cfg)
        with Tape() as tape:
            emb = forward_features(x, extractor, bn_mode="train")
            logits = forward_head(dropout(emb, cfg.keep_prob, drop_rng), head)
            loss = softmax_cross_entropy(logits, y)
        for p in params:
            p.grad = None
        tape.backward(loss)
        opt.step(params, [p.grad for p in params], lr)
        acc = float(np.mean(logits.data.argmax(axis=1) == y))
        curve.append((it, lr, loss.item(), acc))
        if progress is not None:
            progress(it, lr, loss.item(), acc)

    freeze(extractor)
    return PretrainedModel(extractor, curve)


def smoothed(values, window: int = 100) -> np.ndarray:
    """Means over consecutive non-overlapping windows."""
    v = np.asarray(values, dtype=np.float64)
    n = len(v) // window
    return v[: n * window].reshape(n, window).mean(axis=1)


def save_checkpoint(model: PretrainedModel, path: str) -> None:
    checkpoint.write(path, model.extractor.state_dict())


def load_checkpoint(path: str, bn_eps: float = 1e-5) -> PretrainedModel:
    state = checkpoint.read(path)
    if "block0.conv.weight" not in state:
        raise checkpoint.CheckpointFormatError(f"{path} holds no feature extractor tensors")
    ext = FeatureExtractor.from_state(state, bn_eps=bn_eps)
    freeze(ext)
    return PretrainedModel(ext, [])
