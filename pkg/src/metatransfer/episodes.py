"""Datasets, meta-splits and episodic (M-way, N-shot) task sampling."""

from __future__ import annotations

import logging
import struct
import zlib
from collections import Counter
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .fsutil import atomic_write

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
DATA_MAGIC = b"MTLD"
DATA_VERSION = 1


class CapacityError(ValueError):
    """Not enough classes or samples for the requested episode/batch."""


class DatasetFormatError(ValueError):
    pass


def make_rng(seed: int, stream: str = "") -> np.random.Generator:
    """PCG64 generator for a named stream of ``seed``.

    Streams are independent: ``make_rng(s, "a")`` never depends on how much
    of ``make_rng(s, "b")`` has been consumed.
    """
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, zlib.crc32(stream.encode("utf-8"))])
    return np.random.Generator(np.random.PCG64(ss))


@dataclass
class Dataset:
    images: np.ndarray  # (n, C, H, W) float32 in [0, 1]
    labels: np.ndarray  # (n,) int64 class ids
    meta_split: dict  # split name -> sorted list of class ids
    class_index: dict = field(init=False)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        idx: dict[int, list[int]] = {}
        for i, c in enumerate(self.labels.tolist()):
            idx.setdefault(c, []).append(i)
        self.class_index = {c: np.asarray(v, dtype=np.int64) for c, v in idx.items()}
        seen: dict[int, str] = {}
        for name in SPLITS:
            for c in self.meta_split.get(name, []):
                if c in seen:
                    raise ValueError(f"class {c} appears in both {seen[c]} and {name} splits")
                seen[c] = name

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> tuple:
        return tuple(self.images.shape[1:])

    def split_indices(self, split: str) -> np.ndarray:
        classes = self.meta_split[split]
        if not classes:
            return np.zeros(0, dtype=np.int64)
        return np.sort(np.concatenate([self.class_index[c] for c in classes]))

    def batch(self, indices) -> np.ndarray:
        return self.images[np.asarray(indices, dtype=np.int64)].astype(np.float64)


@dataclass
class Episode:
    way: int
    shot: int
    query: int
    class_map: np.ndarray  # episode label -> global class id
    train_idx: np.ndarray
    train_y: np.ndarray
    test_idx: np.ndarray
    test_y: np.ndarray
    train_x: np.ndarray
    test_x: np.ndarray
    padded: list = field(default_factory=list)

    def class_samples(self, label: int) -> np.ndarray:
        """All sample indices (train then test) used for one episode label."""
        return np.concatenate([self.train_idx[self.train_y == label], self.test_idx[self.test_y == label]])


def proportional_split(num_classes: int, ratios=(64, 16, 20)) -> tuple:
    total = sum(ratios)
    n_train = int(round(num_classes * ratios[0] / total))
    n_val = int(round(num_classes * ratios[1] / total))
    n_val = min(n_val, num_classes - n_train)
    return n_train, n_val, num_classes - n_train - n_val


def _build_episode(ds: Dataset, classes: Sequence[int], N: int, Q: int, rng, reuse: Optional[dict] = None) -> Episode:
    tr_idx, te_idx, tr_y, te_y = [], [], [], []
    for label, c in enumerate(classes):
        pool = ds.class_index.get(int(c))
        if reuse is not None and int(c) in reuse:
            pool = np.asarray(reuse[int(c)], dtype=np.int64)
        if pool is None or len(pool) < N + Q:
            have = 0 if pool is None else len(pool)
            raise CapacityError(f"class {c} has {have} samples, episode needs N+Q={N + Q}")
        pick = rng.choice(pool, size=N + Q, replace=False)
        tr_idx.append(pick[:N])
        te_idx.append(pick[N:])
        tr_y.append(np.full(N, label))
        te_y.append(np.full(Q, label))
    tr_idx = np.concatenate(tr_idx).astype(np.int64)
    te_idx = np.concatenate(te_idx).astype(np.int64)
    return Episode(
        way=len(classes),
        shot=N,
        query=Q,
        class_map=np.asarray(classes, dtype=np.int64),
        train_idx=tr_idx,
        train_y=np.concatenate(tr_y).astype(np.int64),
        test_idx=te_idx,
        test_y=np.concatenate(te_y).astype(np.int64),
        train_x=ds.batch(tr_idx),
        test_x=ds.batch(te_idx),
    )


def sample_episode(ds: Dataset, split: str, M: int, N: int, Q: int, rng: np.random.Generator) -> Episode:
    """Draw M classes uniformly without replacement, then N+Q samples per class."""
    classes = ds.meta_split[split]
    if len(classes) < M:
        raise CapacityError(f"split {split!r} has {len(classes)} classes, episode needs M={M}")
    chosen = rng.choice(np.asarray(classes, dtype=np.int64), size=M, replace=False)
    return _build_episode(ds, chosen.tolist(), N, Q, rng)


def draw_weighted_classes(pool: Sequence[int], M: int, rng: np.random.Generator) -> list[int]:
    """Up to M distinct classes from a multiset, each draw proportional to remaining multiplicity."""
    counts = Counter(int(c) for c in pool)
    keys = sorted(counts)
    weights = np.array([counts[k] for k in keys], dtype=np.float64)
    chosen = []
    for _ in range(min(M, len(keys))):
        j = int(rng.choice(len(keys), p=weights / weights.sum()))
        chosen.append(keys.pop(j))
        weights = np.delete(weights, j)
    return chosen


def sample_episode_from_classes(
    ds: Dataset,
    class_ids: Sequence[int],
    M: int,
    N: int,
    Q: int,
    rng: np.random.Generator,
    split: str = "train",
    reuse: Optional[dict] = None,
) -> Episode:
    """Episode whose classes come from a (multi)set of class ids.

    Classes are drawn weighted by multiplicity. When fewer than M distinct
    classes are available the episode is padded with uniformly drawn classes
    from ``split``; those are listed in ``Episode.padded``. ``reuse`` maps a
    class id to the sample indices to draw from instead of the whole class.
    """
    chosen = draw_weighted_classes(class_ids, M, rng)
    padded: list[int] = []
    if len(chosen) < M:
        rest = np.asarray([c for c in ds.meta_split[split] if c not in set(chosen)], dtype=np.int64)
        need = M - len(chosen)
        if len(rest) < need:
            raise CapacityError(f"cannot pad hard episode: need {need} extra classes, {len(rest)} available")
        padded = rng.choice(rest, size=need, replace=False).tolist()
        log.warning("hard class pool has %d distinct classes < M=%d; padded with %s", len(chosen), M, padded)
        chosen = chosen + padded
    ep = _build_episode(ds, chosen, N, Q, rng, reuse=reuse)
    ep.padded = [int(c) for c in padded]
    return ep


# ---------------------------------------------------------------- synthetic data


@dataclass
class ClassGeometry:
    """Knobs of the procedural image families.

    Each class template is a sum of coloured Gaussian blobs plus an oriented
    grating. ``noise`` scales every per-sample perturbation: pixel noise std,
    blob position jitter (``noise * position_jitter`` pixels) and amplitude
    jitter; ``noise=0`` makes all samples of a class identical.
    """

    blobs: int = 3
    blob_width: tuple = (1.5, 3.5)
    grating_amp: float = 0.25
    noise: float = 0.25
    position_jitter: float = 6.0
    amplitude_jitter: float = 0.8


def _render(params: dict, H: int, W: int) -> np.ndarray:
    """Render (S, C, H, W) images from per-sample blob/grating parameters."""
    yy, xx = np.meshgrid(np.arange(H, dtype=np.float64), np.arange(W, dtype=np.float64), indexing="ij")
    cy, cx, width, color = params["cy"], params["cx"], params["width"], params["color"]  # (S,B), (S,B,C)
    d2 = (yy[None, None] - cy[..., None, None]) ** 2 + (xx[None, None] - cx[..., None, None]) ** 2
    bumps = np.exp(-d2 / (2.0 * width[..., None, None] ** 2))  # S,B,H,W
    img = np.einsum("sbhw,sbc->schw", bumps, color)
    theta, freq, phase, gcol = params["theta"], params["freq"], params["phase"], params["gcolor"]
    proj = np.cos(theta)[:, None, None] * xx[None] + np.sin(theta)[:, None, None] * yy[None]
    grating = np.cos(2 * np.pi * freq[:, None, None] * proj + phase[:, None, None])
    img += gcol[:, :, None, None] * grating[:, None]
    return img


def generate_synthetic(
    num_classes: int = 100,
    samples_per_class: int = 60,
    C: int = 3,
    H: int = 16,
    W: int = 16,
    class_geometry: Optional[ClassGeometry] = None,
    rng: Optional[np.random.Generator] = None,
) -> Dataset:
    """Procedural few-shot dataset with a 64:16:20 class meta-split."""
    g = class_geometry or ClassGeometry()
    rng = rng if rng is not None else make_rng(0, "synthetic")
    B, S = g.blobs, samples_per_class
    images = np.empty((num_classes * S, C, H, W), dtype=np.float32)
    for c in range(num_classes):
        tpl = {
            "cy": rng.uniform(2, H - 3, size=B),
            "cx": rng.uniform(2, W - 3, size=B),
            "width": rng.uniform(*g.blob_width, size=B),
            "color": rng.uniform(-1, 1, size=(B, C)),
            "theta": rng.uniform(0, np.pi),
            "freq": rng.uniform(0.05, 0.25),
            "phase": rng.uniform(0, 2 * np.pi),
            "gcolor": rng.uniform(-g.grating_amp, g.grating_amp, size=C),
        }
        n = g.noise
        params = {
            "cy": tpl["cy"] + n * g.position_jitter * rng.uniform(-0.5, 0.5, size=(S, B)),
            "cx": tpl["cx"] + n * g.position_jitter * rng.uniform(-0.5, 0.5, size=(S, B)),
            "width": np.broadcast_to(tpl["width"], (S, B)),
            "color": tpl["color"][None] * (1.0 + n * g.amplitude_jitter * rng.uniform(-0.5, 0.5, size=(S, B, 1))),
            "theta": np.full(S, tpl["theta"]),
            "freq": np.full(S, tpl["freq"]),
            "phase": tpl["phase"] + n * rng.uniform(-np.pi, np.pi, size=S),
            "gcolor": np.broadcast_to(tpl["gcolor"], (S, C)),
        }
        img = _render(params, H, W) + n * rng.normal(size=(S, C, H, W))
        images[c * S:(c + 1) * S] = np.clip(0.5 + 0.35 * img, 0.0, 1.0)
    labels = np.repeat(np.arange(num_classes), S)
    n_tr, n_va, _ = proportional_split(num_classes)
    classes = list(range(num_classes))
    split = {"train": classes[:n_tr], "val": classes[n_tr:n_tr + n_va], "test": classes[n_tr + n_va:]}
    return Dataset(images, labels, split)


# ---------------------------------------------------------------- file format


def splits_path(path: str) -> str:
    return path + ".splits"


def encode_dataset(ds: Dataset) -> bytes:
    n, C, H, W = ds.images.shape
    parts = [DATA_MAGIC, struct.pack("<IIIII", DATA_VERSION, n, C, H, W)]
    pix = np.ascontiguousarray(ds.images, dtype="<f4").reshape(n, -1)
    for i in range(n):
        parts.append(struct.pack("<I", int(ds.labels[i])))
        parts.append(pix[i].tobytes())
    return b"".join(parts)


def encode_splits(ds: Dataset) -> bytes:
    lines = [f"{name}:{','.join(str(c) for c in ds.meta_split.get(name, []))}" for name in SPLITS]
    return ("\n".join(lines) + "\n").encode("utf-8")


def save_dataset(ds: Dataset, path: str) -> None:
    atomic_write(path, encode_dataset(ds))
    atomic_write(splits_path(path), encode_splits(ds))


def parse_splits(text: str) -> dict:
    out = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        name, _, rest = line.partition(":")
        name = name.strip()
        if name not in SPLITS:
            raise DatasetFormatError(f"unknown split line {line!r}")
        out[name] = [int(v) for v in rest.split(",") if v.strip()]
    missing = [s for s in SPLITS if s not in out]
    if missing:
        raise DatasetFormatError(f"split manifest missing {missing}")
    return out


def decode_dataset(blob: bytes, splits: dict) -> Dataset:
    if len(blob) < 24 or blob[:4] != DATA_MAGIC:
        raise DatasetFormatError("not an MTLD dataset (bad magic)")
    version, n, C, H, W = struct.unpack_from("<IIIII", blob, 4)
    if version != DATA_VERSION:
        raise DatasetFormatError(f"unsupported dataset version {version}")
    rec = np.dtype([("cls", "<u4"), ("pix", "<f4", (C * H * W,))])
    if len(blob) != 24 + n * rec.itemsize:
        raise DatasetFormatError(f"dataset payload size {len(blob) - 24} != expected {n * rec.itemsize}")
    arr = np.frombuffer(blob, dtype=rec, count=n, offset=24)
    images = arr["pix"].reshape(n, C, H, W).astype(np.float32)
    return Dataset(images, arr["cls"].astype(np.int64), splits)


def load_dataset(path: str) -> Dataset:
    with open(path, "rb") as fh:
        blob = fh.read()
    with open(splits_path(path), "r", encoding="utf-8") as fh:
        splits = parse_splits(fh.read())
    return decode_dataset(blob, splits)
