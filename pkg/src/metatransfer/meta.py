"""Meta-transfer training: base-learning, SS/FT meta updates, baselines and meta-test."""

from __future__ import annotations

import copy
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import checkpoint
from .curriculum import (
    CurriculumConfig,
    HardClassSet,
    hard_phase_line,
    make_hard_tasks,
    record_failure,
    schedule,
)
from .episodes import Dataset, Episode, make_rng, sample_episode
from .models import (
    VARIANTS,
    ClassifierHead,
    FeatureExtractor,
    SSParams,
    VariantSpec,
    clone_head,
    forward_features,
    forward_head,
    freeze,
    init_head,
    scoped_blocks,
)
from .optim import make_optimizer
from .pretrain import step_decay
from .tensor import Tape, Tensor, current_tape, no_record, softmax_cross_entropy

log = logging.getLogger(__name__)


@dataclass
class MetaConfig:
    base_lr: float = 0.01
    inner_epochs: int = 5
    meta_lr: float = 1e-3
    meta_lr_decay_every: int = 1000
    meta_lr_floor: float = 1e-4
    meta_batch: int = 2
    second_order: bool = False
    optimizer: str = "adam"
    way: int = 5
    shot: int = 1
    query: int = 15
    eval_query: int = 15
    head_kind: str = "fc_softmax"
    head_depth: int = 1
    head_init_std: float = 0.01
    cosine_temperature: float = 10.0
    bn_mode: str = "frozen"
    variant: VariantSpec = field(default_factory=lambda: VARIANTS["ss_full"])

    def __post_init__(self):
        if self.inner_epochs < 1:
            raise ValueError("inner_epochs must be >= 1")
        if self.meta_batch < 1:
            raise ValueError("meta_batch must be >= 1")


@dataclass
class TaskResult:
    test_loss: float
    per_class_acc: np.ndarray
    mean_acc: float
    hardest: int  # episode label m*
    hardest_class: int  # global class id of m*
    hardest_samples: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))


def gamma_schedule(iteration: int, cfg: MetaConfig) -> float:
    return step_decay(iteration, cfg.meta_lr, cfg.meta_lr_decay_every, cfg.meta_lr_floor)


def per_class_accuracy(logits: np.ndarray, labels: np.ndarray, way: int) -> np.ndarray:
    pred = logits.argmax(axis=1)
    acc = np.zeros(way)
    for m in range(way):
        sel = labels == m
        acc[m] = float(np.mean(pred[sel] == m)) if sel.any() else 0.0
    return acc


def hardest_class(per_class_acc) -> int:
    """Index of the lowest accuracy; ties go to the lowest index."""
    return int(np.argmin(np.asarray(per_class_acc)))


def make_result(episode: Episode, logits: np.ndarray, loss: float) -> TaskResult:
    acc = per_class_accuracy(logits, episode.test_y, episode.way)
    m = hardest_class(acc)
    return TaskResult(
        test_loss=float(loss),
        per_class_acc=acc,
        mean_acc=float(acc.mean()),
        hardest=m,
        hardest_class=int(episode.class_map[m]),
        hardest_samples=episode.class_samples(m),
    )


# ---------------------------------------------------------------- inner loop


def adapt(
    params: list,
    loss_fn: Callable,
    beta: float,
    steps: int,
    second_order: bool = False,
    trace: Optional[list] = None,
) -> list:
    """Run ``steps`` gradient-descent steps ``p <- p - beta * dL/dp``.

    With ``second_order`` the steps are recorded on the active tape, so the
    returned tensors stay differentiable w.r.t. whatever ``params`` and
    ``loss_fn`` depend on. Otherwise each step runs on its own tape and the
    result is detached (fresh leaves).
    """
    if second_order:
        tape = current_tape()
        if tape is None:
            raise RuntimeError("second-order adaptation needs an active tape")
        fast = list(params)
        for _ in range(steps):
            loss = loss_fn(fast)
            grads = tape.gradient(loss, fast, create_graph=True)
            if trace is not None:
                trace.append((loss.item(), [p.data.copy() for p in fast]))
            fast = [p if g is None else p - g * beta for p, g in zip(fast, grads)]
        return fast
    fast = [Tensor(p.data, requires_grad=True) for p in params]
    for _ in range(steps):
        with Tape() as tape:
            loss = loss_fn(fast)
        grads = tape.gradient(loss, fast)
        if trace is not None:
            trace.append((loss.item(), [p.data.copy() for p in fast]))
        fast = [
            Tensor(p.data if g is None else p.data - beta * g.data, requires_grad=True) for p, g in zip(fast, grads)
        ]
    return fast


def embed(x: np.ndarray, extractor: FeatureExtractor, ss: Optional[SSParams], bn_mode: str, record: bool) -> Tensor:
    if record:
        return forward_features(Tensor._wrap(x), extractor, ss, bn_mode)
    with no_record():
        return forward_features(Tensor._wrap(x), extractor, ss, bn_mode)


def base_learn(
    episode: Episode,
    extractor: FeatureExtractor,
    ss: Optional[SSParams],
    head: ClassifierHead,
    beta: float,
    inner_epochs: int,
    bn_mode: str = "frozen",
    second_order: bool = False,
    trace: Optional[list] = None,
) -> ClassifierHead:
    """Adapt a copy of the head on the episode's train split; Theta and SS stay fixed.

    Full-batch gradient descent for ``inner_epochs`` steps. In second-order
    mode (call inside a Tape) the adapted head keeps its dependence on the
    head and SS tensors.
    """
    emb = embed(episode.train_x, extractor, ss, bn_mode, record=second_order)
    y = episode.train_y

    def loss_fn(ps):
        return softmax_cross_entropy(forward_head(emb, head.with_params(ps)), y)

    if second_order:
        fast = adapt(head.parameters(), loss_fn, beta, inner_epochs, second_order=True, trace=trace)
        return head.with_params(fast)
    if inner_epochs == 0:
        return clone_head(head)
    return head.with_params(adapt(head.parameters(), loss_fn, beta, inner_epochs, trace=trace))


def evaluate_head(episode, extractor, ss, head, bn_mode="frozen") -> TaskResult:
    with no_record():
        emb = forward_features(Tensor._wrap(episode.test_x), extractor, ss, bn_mode)
        logits = forward_head(emb, head)
        loss = softmax_cross_entropy(logits, episode.test_y)
    return make_result(episode, logits.data, loss.item())


# ---------------------------------------------------------------- learner state


class MetaLearner:
    """Meta-parameters for one variant: extractor copy, optional SS, head init."""

    def __init__(self, extractor: FeatureExtractor, head: ClassifierHead, cfg: MetaConfig,
                 ss: Optional[SSParams] = None):
        self.cfg = cfg
        self.variant = cfg.variant
        self.extractor = extractor
        self.head = head
        self.ss = ss
        self.optimizer = make_optimizer(cfg.optimizer)
        freeze(self.extractor)
        if self.variant.meta_op == "FT":
            for p in self.ft_parameters():
                p.requires_grad = True

    @classmethod
    def create(cls, extractor: FeatureExtractor, cfg: MetaConfig, rng: np.random.Generator) -> "MetaLearner":
        ext = extractor.copy()
        head = init_head(rng, ext.embedding_dim, cfg.way, kind=cfg.head_kind, depth=cfg.head_depth,
                         std=cfg.head_init_std, temperature=cfg.cosine_temperature)
        ss = None
        if cfg.variant.meta_op == "SS":
            ss = SSParams.fresh(ext, scoped_blocks(len(ext.blocks), cfg.variant.scope))
        return cls(ext, head, cfg, ss)

    def ft_parameters(self) -> list[Tensor]:
        if self.variant.meta_op != "FT":
            return []
        blocks = scoped_blocks(len(self.extractor.blocks), self.variant.scope)
        return [p for i in blocks for p in self.extractor.blocks[i].parameters()]

    def meta_parameters(self) -> list[Tensor]:
        outer = self.ss.parameters() if self.ss is not None else self.ft_parameters()
        return outer + self.head.parameters()

    def snapshot(self) -> "MetaLearner":
        clone = copy.copy(self)
        clone.extractor = self.extractor.copy()
        clone.ss = self.ss.copy() if self.ss is not None else None
        clone.head = clone_head(self.head)
        clone.optimizer = copy.deepcopy(self.optimizer)
        return clone

    def state_dict(self) -> dict:
        state = dict(self.extractor.state_dict())
        if self.ss is not None:
            state.update(self.ss.state_dict())
        state.update(self.head.state_dict())
        return state

    @classmethod
    def from_state(cls, state: dict, cfg: MetaConfig) -> "MetaLearner":
        ext = FeatureExtractor.from_state(state)
        ss = SSParams.from_state(state, ext) if any(k.startswith("ss.") for k in state) else None
        return cls(ext, ClassifierHead.from_state(state), cfg, ss)


def task_gradients(learner: MetaLearner, episode: Episode) -> tuple:
    """Outer gradients (aligned with ``learner.meta_parameters()``) and the TaskResult.

    First-order mode takes the head gradient at the adapted head and applies
    it to the initialization; second-order mode differentiates through the
    unrolled inner loop.
    """
    cfg = learner.cfg
    outer = learner.ss.parameters() if learner.ss is not None else learner.ft_parameters()
    head_params = learner.head.parameters()
    with Tape() as tape:
        fast = base_learn(episode, learner.extractor, learner.ss, learner.head, cfg.base_lr, cfg.inner_epochs,
                          cfg.bn_mode, second_order=cfg.second_order)
        emb = embed(episode.test_x, learner.extractor, learner.ss, cfg.bn_mode, record=True)
        logits = forward_head(emb, fast)
        loss = softmax_cross_entropy(logits, episode.test_y)
    result = make_result(episode, logits.data, loss.item())
    if not loss.requires_grad:
        return [None] * (len(outer) + len(head_params)), result
    if cfg.second_order:
        grads = tape.gradient(loss, outer + head_params)
    else:
        grads = tape.gradient(loss, outer + fast.parameters())
    return [None if g is None else g.data for g in grads], result


def apply_update(learner: MetaLearner, grads: list, lr: float) -> None:
    learner.optimizer.step(learner.meta_parameters(), grads, lr)


def meta_step(episode: Episode, learner: MetaLearner, lr: float) -> TaskResult:
    """One task: base-learn, then one meta update of SS (or FT scope) and the head init."""
    if learner.variant.meta_op == "none":
        raise ValueError("meta_step needs an SS or FT variant")
    grads, result = task_gradients(learner, episode)
    apply_update(learner, grads, lr)
    return result


def meta_step_ft(episode: Episode, learner: MetaLearner, lr: float) -> TaskResult:
    """FT variant of :func:`meta_step`: the outer step moves the scoped raw weights."""
    if learner.variant.meta_op != "FT":
        raise ValueError("meta_step_ft needs an FT variant")
    return meta_step(episode, learner, lr)


def _sum_grads(all_grads: list) -> list:
    out = list(all_grads[0])
    for grads in all_grads[1:]:
        out = [a if b is None else (b if a is None else a + b) for a, b in zip(out, grads)]
    return out


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("MTL_THREADS", "1")))
    except ValueError:
        return 1


def meta_batch_step(learner: MetaLearner, episodes: list, lr: float, workers: int = 1) -> list:
    """Gradients of a meta-batch against one snapshot, summed in task order, one update."""
    if workers > 1 and len(episodes) > 1:
        with ThreadPoolExecutor(max_workers=min(workers, len(episodes))) as pool:
            outs = list(pool.map(lambda ep: task_gradients(learner, ep), episodes))
    else:
        outs = [task_gradients(learner, ep) for ep in episodes]
    apply_update(learner, _sum_grads([g for g, _ in outs]), lr)
    return [r for _, r in outs]


# ---------------------------------------------------------------- baselines and evaluation


def run_baseline(episode: Episode, extractor: FeatureExtractor, head: ClassifierHead, variant: VariantSpec,
                 cfg: MetaConfig) -> TaskResult:
    """Per-task training without meta-learning (update head, or update extractor + head)."""
    if variant.baseline == "none":
        raise ValueError("run_baseline needs a baseline variant")
    if variant.baseline == "update_head":
        fast = base_learn(episode, extractor, None, head, cfg.base_lr, cfg.inner_epochs, cfg.bn_mode)
        return evaluate_head(episode, extractor, None, fast, cfg.bn_mode)
    ext = extractor.copy()
    theta = ext.parameters()
    for p in theta:
        p.requires_grad = True
    fast_head = clone_head(head)
    params = theta + fast_head.parameters()
    x = Tensor._wrap(episode.train_x)
    for _ in range(cfg.inner_epochs):
        with Tape() as tape:
            logits = forward_head(forward_features(x, ext, None, cfg.bn_mode), fast_head)
            loss = softmax_cross_entropy(logits, episode.train_y)
        grads = tape.gradient(loss, params)
        for p, g in zip(params, grads):
            if g is not None:
                p.data = p.data - cfg.base_lr * g.data
    freeze(ext)
    return evaluate_head(episode, ext, None, fast_head, cfg.bn_mode)


def evaluate_task(learner: MetaLearner, episode: Episode, rng: np.random.Generator) -> TaskResult:
    """Adapt on the train split and score the test split; meta-parameters untouched."""
    cfg = learner.cfg
    if learner.variant.meta_op == "none":
        head = init_head(rng, learner.extractor.embedding_dim, episode.way, kind=cfg.head_kind,
                         depth=cfg.head_depth, std=cfg.head_init_std, temperature=cfg.cosine_temperature)
        return run_baseline(episode, learner.extractor, head, learner.variant, cfg)
    fast = base_learn(episode, learner.extractor, learner.ss, learner.head, cfg.base_lr, cfg.inner_epochs,
                      cfg.bn_mode)
    return evaluate_head(episode, learner.extractor, learner.ss, fast, cfg.bn_mode)


def confidence_interval(values) -> float:
    """Half-width of the normal-approximation 95% interval of the mean."""
    v = np.asarray(values, dtype=np.float64)
    # identical values: report exactly 0 rather than rounding noise from the mean
    if len(v) < 2 or np.all(v == v[0]):
        return 0.0
    return float(1.96 * v.std(ddof=1) / np.sqrt(len(v)))


def meta_test(tasks: list, learner: MetaLearner, seed: int = 0) -> dict:
    """Mean accuracy and 95% CI over unseen tasks."""
    rng = make_rng(seed, "meta-test/heads")
    accs = [evaluate_task(learner, ep, rng).mean_acc for ep in tasks]
    return {"mean_acc": float(np.mean(accs)), "ci95": confidence_interval(accs), "per_task": accs}


def sample_tasks(ds: Dataset, split: str, count: int, cfg: MetaConfig, seed: int, stream: str) -> list:
    rng = make_rng(seed, stream)
    return [sample_episode(ds, split, cfg.way, cfg.shot, cfg.eval_query, rng) for _ in range(count)]


def select_best(curve: list) -> int:
    """Position of the highest validation accuracy in ``curve`` [(iteration, acc), ...]; first wins ties."""
    if not curve:
        raise ValueError("empty validation curve")
    return int(np.argmax([acc for _, acc in curve]))


# ---------------------------------------------------------------- training driver


@dataclass
class MetaTrainResult:
    best: MetaLearner
    final: MetaLearner
    curve: list  # (normal meta-batch count, val acc)
    best_iteration: int
    metrics: list  # rows: iteration, phase, task_idx, test_loss, mean_acc, hardest_class
    hard_phases: list  # dicts with iteration, flushed, episodes
    run_log: list


def meta_train(
    ds: Dataset,
    extractor: FeatureExtractor,
    cfg: MetaConfig,
    curriculum: CurriculumConfig,
    seed: int,
    meta_batches: int,
    val_every: int = 500,
    val_tasks: Optional[list] = None,
    on_checkpoint: Optional[Callable] = None,
) -> MetaTrainResult:
    """Meta-train for ``meta_batches`` normal meta-batches (hard phases are extra).

    Validation runs at batch 0, every ``val_every`` normal meta-batches and at
    the end; the best-validation learner is kept for meta-test.
    """
    learner = MetaLearner.create(extractor, cfg, make_rng(seed, "meta/head-init"))
    val_rng_seed = seed
    normal_rng = make_rng(seed, "meta/normal")
    hard_rng = make_rng(seed, "meta/hard")
    hset = HardClassSet()
    workers = worker_count()
    metrics, hard_phases, run_log, curve = [], [], [], []
    step = 0
    task_idx = 0
    best, best_acc, best_iter = learner.snapshot(), -1.0, 0

    def validate(n):
        nonlocal best, best_acc, best_iter
        if val_tasks is None:
            return
        acc = meta_test(val_tasks, learner, seed=val_rng_seed)["mean_acc"]
        curve.append((n, acc))
        if on_checkpoint is not None:
            on_checkpoint(n, learner, acc)
        if acc > best_acc:
            best, best_acc, best_iter = learner.snapshot(), acc, n

    def run_batch(episodes, phase):
        nonlocal step, task_idx
        lr = gamma_schedule(step, cfg)
        results = meta_batch_step(learner, episodes, lr, workers)
        step += 1
        for r in results:
            metrics.append((step, phase, task_idx, r.test_loss, r.mean_acc, r.hardest_class))
            task_idx += 1
        return results

    validate(0)
    if cfg.variant.meta_op == "none":
        # per-task baselines have nothing to meta-train
        return MetaTrainResult(learner.snapshot(), learner, curve, 0, metrics, hard_phases, run_log)
    for n in range(1, meta_batches + 1):
        episodes = [sample_episode(ds, "train", cfg.way, cfg.shot, cfg.query, normal_rng)
                    for _ in range(cfg.meta_batch)]
        first = task_idx
        for i, r in enumerate(run_batch(episodes, "normal")):
            if curriculum.enabled:
                record_failure(hset, r, first + i)
        if schedule(n, curriculum) == "hard":
            flushed = list(hset.entries)
            method = curriculum.resample_method
            hard = make_hard_tasks(hset, ds, cfg.way, cfg.shot, cfg.query,
                                   curriculum.hard_task_count(cfg.shot), method, hard_rng)
            line = hard_phase_line(n, [e.class_id for e in flushed], hard, method)
            log.info(line)
            run_log.append(line)
            hard_phases.append({"iteration": n, "flushed": flushed, "episodes": hard})
            for j in range(0, len(hard), cfg.meta_batch):
                run_batch(hard[j:j + cfg.meta_batch], "hard")
        if val_every and n % val_every == 0 and n != meta_batches:
            validate(n)
    if not curve or curve[-1][0] != meta_batches:
        validate(meta_batches)
    if val_tasks is None:
        best = learner.snapshot()
        best_iter = meta_batches
    return MetaTrainResult(best, learner, curve, best_iter, metrics, hard_phases, run_log)


def save_learner(learner: MetaLearner, path: str) -> None:
    checkpoint.write(path, learner.state_dict())
