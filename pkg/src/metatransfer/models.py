"""Feature extractor, scaling/shifting parameters and classifier heads."""

from __future__ import annotations

import copy
from dataclasses import dataclass
from fractions import Fraction
from typing import Optional

import numpy as np

from .tensor import (
    DimensionError,
    Tensor,
    batch_norm,
    conv2d,
    matmul,
    max_pool2d,
    mean_pool,
    relu,
    reshape,
    sqrt,
    tsum,
)

BN_MODES = ("train", "frozen", "transductive")
SCOPES = ("full", "last_block", "last_two_blocks", "head_only")
COSINE_EPS = 1e-8


class BindingError(ValueError):
    """SS parameters do not belong to the extractor they are used with."""


@dataclass
class ConvBlock:
    weight: Tensor
    bias: Tensor
    bn_gamma: Tensor
    bn_beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    pool: bool = True

    @property
    def filters(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias, self.bn_gamma, self.bn_beta]


class FeatureExtractor:
    """Stack of conv -> BN -> ReLU -> 2x2 max-pool blocks followed by a spatial mean."""

    def __init__(self, blocks: list[ConvBlock], bn_eps: float = 1e-5):
        for prev, nxt in zip(blocks, blocks[1:]):
            if prev.filters != nxt.in_channels:
                raise DimensionError(
                    f"block output channels {prev.filters} != next block input channels {nxt.in_channels}"
                )
        self.blocks = blocks
        self.bn_eps = bn_eps

    @property
    def embedding_dim(self) -> int:
        return self.blocks[-1].filters

    @property
    def filter_counts(self) -> tuple:
        return tuple(b.filters for b in self.blocks)

    def parameters(self) -> list[Tensor]:
        return [p for b in self.blocks for p in b.parameters()]

    def named_parameters(self) -> dict[str, Tensor]:
        out = {}
        for i, b in enumerate(self.blocks):
            out[f"block{i}.conv.weight"] = b.weight
            out[f"block{i}.conv.bias"] = b.bias
            out[f"block{i}.bn.gamma"] = b.bn_gamma
            out[f"block{i}.bn.beta"] = b.bn_beta
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {k: v.data for k, v in self.named_parameters().items()}
        for i, b in enumerate(self.blocks):
            state[f"block{i}.bn.running_mean"] = b.running_mean
            state[f"block{i}.bn.running_var"] = b.running_var
            state[f"block{i}.pool"] = np.array([1.0 if b.pool else 0.0])
        return state

    @classmethod
    def from_state(cls, state: dict, bn_eps: float = 1e-5) -> "FeatureExtractor":
        blocks = []
        i = 0
        while f"block{i}.conv.weight" in state:
            p = f"block{i}."
            blocks.append(
                ConvBlock(
                    weight=Tensor(state[p + "conv.weight"]),
                    bias=Tensor(state[p + "conv.bias"]),
                    bn_gamma=Tensor(state[p + "bn.gamma"]),
                    bn_beta=Tensor(state[p + "bn.beta"]),
                    running_mean=np.array(state[p + "bn.running_mean"], dtype=np.float64),
                    running_var=np.array(state[p + "bn.running_var"], dtype=np.float64),
                    pool=bool(np.asarray(state.get(p + "pool", [1.0])).reshape(-1)[0]),
                )
            )
            i += 1
        return cls(blocks, bn_eps=bn_eps)

    def copy(self) -> "FeatureExtractor":
        return copy.deepcopy(self)

    def checksum(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for name, arr in sorted(self.state_dict().items()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return h.hexdigest()


def build_extractor(
    rng: np.random.Generator,
    in_channels: int = 3,
    filters: int = 16,
    num_blocks: int = 4,
    kernel: int = 3,
    bn_eps: float = 1e-5,
) -> FeatureExtractor:
    """He-initialized 4CONV-style extractor (conv weights ~ N(0, 2/fan_in), zero bias)."""
    blocks = []
    c = in_channels
    for _ in range(num_blocks):
        fan_in = c * kernel * kernel
        blocks.append(
            ConvBlock(
                weight=Tensor(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(filters, c, kernel, kernel))),
                bias=Tensor(np.zeros(filters)),
                bn_gamma=Tensor(np.ones(filters)),
                bn_beta=Tensor(np.zeros(filters)),
                running_mean=np.zeros(filters),
                running_var=np.ones(filters),
            )
        )
        c = filters
    return FeatureExtractor(blocks, bn_eps=bn_eps)


def freeze(extractor: FeatureExtractor) -> None:
    for p in extractor.parameters():
        p.requires_grad = False
        p.grad = None


def scoped_blocks(num_blocks: int, scope: str) -> list[int]:
    """Indices of the conv blocks a variant scope touches."""
    if scope == "full":
        return list(range(num_blocks))
    if scope == "last_block":
        return [num_blocks - 1]
    if scope == "last_two_blocks":
        return list(range(max(num_blocks - 2, 0), num_blocks))
    if scope == "head_only":
        return []
    raise ValueError(f"unknown scope {scope!r}; expected one of {SCOPES}")


class SSParams:
    """Per-filter scale and shift for the conv blocks of one extractor.

    ``scale[i]`` / ``shift[i]`` are None for blocks outside the active scope,
    which then run with their plain weights.
    """

    def __init__(self, filter_counts: tuple, scale: list, shift: list):
        self.filter_counts = tuple(filter_counts)
        self.scale = scale
        self.shift = shift

    @classmethod
    def fresh(cls, extractor: FeatureExtractor, blocks: Optional[list[int]] = None) -> "SSParams":
        counts = extractor.filter_counts
        active = set(range(len(counts)) if blocks is None else blocks)
        scale = [Tensor(np.ones(k), requires_grad=True) if i in active else None for i, k in enumerate(counts)]
        shift = [Tensor(np.zeros(k), requires_grad=True) if i in active else None for i, k in enumerate(counts)]
        return cls(counts, scale, shift)

    def parameters(self) -> list[Tensor]:
        return [t for pair in zip(self.scale, self.shift) for t in pair if t is not None]

    def named_parameters(self) -> dict[str, Tensor]:
        out = {}
        for i, (s, b) in enumerate(zip(self.scale, self.shift)):
            if s is not None:
                out[f"ss.block{i}.scale"] = s
                out[f"ss.block{i}.shift"] = b
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.named_parameters().items()}

    @classmethod
    def from_state(cls, state: dict, extractor: FeatureExtractor) -> "SSParams":
        counts = extractor.filter_counts
        scale, shift = [], []
        for i in range(len(counts)):
            s = state.get(f"ss.block{i}.scale")
            b = state.get(f"ss.block{i}.shift")
            scale.append(Tensor(s, requires_grad=True) if s is not None else None)
            shift.append(Tensor(b, requires_grad=True) if b is not None else None)
        ss = cls(counts, scale, shift)
        ss.check_bound(extractor)
        return ss

    def check_bound(self, extractor: FeatureExtractor) -> None:
        if self.filter_counts != extractor.filter_counts:
            raise BindingError(
                f"SS parameters built for filter counts {self.filter_counts}, "
                f"extractor has {extractor.filter_counts}"
            )
        for i, (s, k) in enumerate(zip(self.scale, self.filter_counts)):
            if s is not None and (s.shape != (k,) or self.shift[i].shape != (k,)):
                raise BindingError(f"SS block {i} shape mismatch with {k} filters")

    def copy(self) -> "SSParams":
        return copy.deepcopy(self)


def forward_features(
    x: Tensor,
    extractor: FeatureExtractor,
    ss: Optional[SSParams] = None,
    bn_mode: str = "frozen",
) -> Tensor:
    """Embed a (B,C,H,W) batch; returns (B, embedding_dim).

    With SS, block ``i`` convolves with ``W * scale[i][k]`` per filter ``k``
    and adds ``b + shift[i]``. ``bn_mode`` is "train" (batch statistics,
    running buffers updated), "transductive" (batch statistics, buffers left
    alone) or "frozen" (running statistics).
    """
    if bn_mode not in BN_MODES:
        raise ValueError(f"bn_mode must be one of {BN_MODES}")
    if ss is not None:
        ss.check_bound(extractor)
    h = x
    for i, blk in enumerate(extractor.blocks):
        w, b = blk.weight, blk.bias
        if ss is not None and ss.scale[i] is not None:
            w = w * reshape(ss.scale[i], (blk.filters, 1, 1, 1))
            b = b + ss.shift[i]
        pad = blk.weight.shape[2] // 2
        if bn_mode == "frozen":
            # fixed statistics make BN a per-filter affine map; fold it into the conv
            a = blk.bn_gamma * (1.0 / np.sqrt(blk.running_var + extractor.bn_eps))
            w = w * reshape(a, (blk.filters, 1, 1, 1))
            b = (b - blk.running_mean) * a + blk.bn_beta
            h = conv2d(h, w, b, stride=1, padding=pad)
        else:
            h = conv2d(h, w, b, stride=1, padding=pad)
            stats = (blk.running_mean, blk.running_var) if bn_mode == "train" else (None, None)
            h = batch_norm(h, blk.bn_gamma, blk.bn_beta, *stats, training=True, eps=extractor.bn_eps)
        # max-pool commutes with ReLU; pooling first shrinks the ReLU input 4x
        if blk.pool and h.shape[2] >= 2 and h.shape[3] >= 2:
            h = max_pool2d(h, 2)
        h = relu(h)
    if h.data.ndim == 4:
        h = mean_pool(h)
    return h


def ss_param_count(extractor: FeatureExtractor) -> tuple:
    """(ss_count, ft_count, ss_count / ft_count) over all conv blocks."""
    if not extractor.blocks:
        raise ValueError("ss_param_count is undefined for an extractor with no conv blocks")
    ss = 2 * sum(b.filters for b in extractor.blocks)
    ft = sum(b.weight.size + b.bias.size for b in extractor.blocks)
    return ss, ft, Fraction(ss, ft)


# ---------------------------------------------------------------- heads


class ClassifierHead:
    """Few-shot classifier; ``params`` is an ordered name -> Tensor mapping.

    fc_softmax: ``depth`` affine layers (ReLU between them).
    cosine: ``temperature * cos(embedding, weight column)``.
    """

    def __init__(self, kind: str, params: dict, depth: int = 1):
        if kind not in ("fc_softmax", "cosine"):
            raise ValueError(f"unknown head kind {kind!r}")
        self.kind = kind
        self.params = params
        self.depth = depth

    @property
    def way(self) -> int:
        if self.kind == "cosine":
            return self.params["cosine.weight"].shape[1]
        return self.params[f"fc{self.depth - 1}.weight"].shape[1]

    @property
    def in_dim(self) -> int:
        first = "cosine.weight" if self.kind == "cosine" else "fc0.weight"
        return self.params[first].shape[0]

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def with_params(self, tensors: list) -> "ClassifierHead":
        return ClassifierHead(self.kind, dict(zip(self.params.keys(), tensors)), self.depth)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {f"head.{k}": v.data for k, v in self.params.items()}

    @classmethod
    def from_state(cls, state: dict) -> "ClassifierHead":
        params = {k[len("head."):]: Tensor(v, requires_grad=True) for k, v in state.items() if k.startswith("head.")}
        kind = "cosine" if "cosine.weight" in params else "fc_softmax"
        depth = 1 if kind == "cosine" else sum(1 for k in params if k.endswith(".weight"))
        return cls(kind, params, depth)


def init_head(
    rng: np.random.Generator,
    embedding_dim: int,
    way: int,
    kind: str = "fc_softmax",
    depth: int = 1,
    std: float = 0.01,
    temperature: float = 10.0,
) -> ClassifierHead:
    params = {}
    if kind == "cosine":
        params["cosine.weight"] = Tensor(rng.normal(0.0, std, size=(embedding_dim, way)), requires_grad=True)
        params["cosine.temperature"] = Tensor(np.array([temperature]), requires_grad=True)
        return ClassifierHead(kind, params, 1)
    if depth < 1:
        raise ValueError("head depth must be >= 1")
    d = embedding_dim
    for j in range(depth):
        out = way if j == depth - 1 else embedding_dim
        params[f"fc{j}.weight"] = Tensor(rng.normal(0.0, std, size=(d, out)), requires_grad=True)
        params[f"fc{j}.bias"] = Tensor(np.zeros(out), requires_grad=True)
        d = out
    return ClassifierHead(kind, params, depth)


def _l2_normalize(x: Tensor, axis: int) -> Tensor:
    # sqrt(|x|^2 + eps^2) keeps zero vectors finite and differentiable
    norm = sqrt(tsum(x * x, axis=axis, keepdims=True) + COSINE_EPS**2)
    return x / norm


def forward_head(emb: Tensor, head: ClassifierHead) -> Tensor:
    if emb.data.ndim != 2 or emb.shape[1] != head.in_dim:
        raise DimensionError(f"embedding shape {emb.shape} does not match head input dim {head.in_dim}")
    if head.kind == "cosine":
        e = _l2_normalize(emb, axis=1)
        w = _l2_normalize(head.params["cosine.weight"], axis=0)
        return matmul(e, w) * head.params["cosine.temperature"]
    h = emb
    for j in range(head.depth):
        h = matmul(h, head.params[f"fc{j}.weight"]) + head.params[f"fc{j}.bias"]
        if j < head.depth - 1:
            h = relu(h)
    return h


def clone_head(head: ClassifierHead) -> ClassifierHead:
    return ClassifierHead(
        head.kind,
        {k: Tensor(v.data, requires_grad=True) for k, v in head.params.items()},
        head.depth,
    )


@dataclass(frozen=True)
class VariantSpec:
    """Which parameters meta-learning touches.

    meta_op: "SS" (scale/shift), "FT" (raw weights) or "none" (plain
    per-task baseline without meta-training). ``scope`` is ignored when
    meta_op is "none".
    """

    meta_op: str = "SS"
    scope: str = "full"
    baseline: str = "none"

    def __post_init__(self):
        if self.meta_op not in ("SS", "FT", "none"):
            raise ValueError(f"unknown meta_op {self.meta_op!r}")
        if self.scope not in SCOPES:
            raise ValueError(f"unknown scope {self.scope!r}")
        if self.baseline not in ("none", "update_all", "update_head"):
            raise ValueError(f"unknown baseline {self.baseline!r}")
        if (self.meta_op == "none") != (self.baseline != "none"):
            raise ValueError("baseline variants must have meta_op 'none' and vice versa")
        if self.meta_op == "SS" and self.scope == "head_only":
            raise ValueError("SS needs at least one conv block in scope")


VARIANTS = {
    "ss_full": VariantSpec("SS", "full"),
    "ss_b4": VariantSpec("SS", "last_block"),
    "ss_b34": VariantSpec("SS", "last_two_blocks"),
    "ft_full": VariantSpec("FT", "full"),
    "ft_b4": VariantSpec("FT", "last_block"),
    "ft_b34": VariantSpec("FT", "last_two_blocks"),
    "ft_head": VariantSpec("FT", "head_only"),
    "update_all": VariantSpec("none", "full", "update_all"),
    "update_head": VariantSpec("none", "full", "update_head"),
}
