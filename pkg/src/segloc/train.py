"""Contrastive pre-training with class-exclusive negative queues.

One optimizer step:

1. gather ``accum`` micro-batches of ``batch`` pairs
2. query = encode(query params, view 1, box 1)
3. key = encode(key params, view 2, box 2), no gradient
4. InfoNCE of (query, key, negatives of the query's class), averaged
5. backprop through the query encoder only
6. SGD with momentum and weight decay
7. momentum update of the key encoder
8. enqueue this step's keys
"""
from __future__ import annotations

import dataclasses
import json
import logging
from collections.abc import Callable, Iterator
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bank import ClassQueueBank, init_bank
from .checkpoint import config_hash, read_checkpoint, write_checkpoint
from .encoder import (
    PARAM_NAMES,
    EncoderParams,
    backprop,
    embed,
    encode,
    freeze_stages,
    init_params,
    momentum_update,
    params_from_tensors,
)
from .errors import (
    CheckpointError,
    ContractViolation,
    EmptyNegativesError,
    InvalidArgumentError,
    InvalidDatasetError,
)
from .raster import BBox, read_rgb
from .synth import SynthConfig, derive_seed, read_manifest, resized_pair, synthesize_pair

log = logging.getLogger(__name__)

METRICS_FILE = "metrics.jsonl"
PAPER_DATASET_PAIRS = 200_000


@dataclass(frozen=True)
class TrainConfig:
    tau: float = 0.2
    m: float = 0.999
    lr: float = 0.03
    sgd_momentum: float = 0.9
    weight_decay: float = 1e-4
    batch: int = 64
    accum: int = 1
    epochs: int = 30
    queue_size: int = 2**14
    queue_init: str = "model"
    freeze_stages: int = 0
    symmetric: bool = False
    pairs_per_epoch: int = PAPER_DATASET_PAIRS
    max_steps: int | None = None
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.tau <= 0:
            raise InvalidArgumentError(f"tau must be > 0, got {self.tau}")
        if not 0.0 <= self.m <= 1.0:
            raise InvalidArgumentError(f"m must lie in [0, 1], got {self.m}")
        if self.batch < 1 or self.accum < 1 or self.epochs < 1:
            raise InvalidArgumentError("batch, accum and epochs must be >= 1")
        if self.queue_size < 1:
            raise InvalidArgumentError("queue_size must be >= 1")
        if self.queue_init not in ("model", "random"):
            raise InvalidArgumentError(f"queue_init must be 'model' or 'random', got {self.queue_init!r}")
        if not 0 <= self.freeze_stages <= 3:
            raise InvalidArgumentError("freeze_stages must lie in [0, 3]")
        if self.lr < 0 or self.weight_decay < 0 or not 0 <= self.sgd_momentum < 1:
            raise InvalidArgumentError("lr, weight_decay must be >= 0 and sgd_momentum in [0, 1)")
        if self.seed < 0 or self.workers < 1:
            raise InvalidArgumentError("seed must be >= 0 and workers >= 1")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class StepMetrics:
    step: int
    loss: float
    pos_logit: float
    accuracy: float
    queue_fill: list[int]

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)


# --- objective and optimizer ---------------------------------------------------


def info_nce(q: np.ndarray, k_pos: np.ndarray, negs: np.ndarray, tau: float) -> tuple[float, np.ndarray]:
    """``-log softmax([q.k, q.n_1, ..., q.n_N] / tau)[0]`` and its gradient wrt q."""
    negs = np.asarray(negs)
    if negs.ndim != 2 or len(negs) == 0:
        raise ContractViolation("InfoNCE needs a non-empty (N, d) array of negatives")
    if tau <= 0:
        raise InvalidArgumentError("tau must be > 0")
    keys = np.vstack([k_pos[None, :], negs])
    logits = keys @ q / tau
    top = logits.max()
    e = np.exp(logits - top)
    total = e.sum()
    loss = float(top + np.log(total) - logits[0])
    p = e / total
    grad = (p @ keys - k_pos) / tau
    return loss, grad


def init_velocity(params: EncoderParams) -> dict[str, np.ndarray]:
    return {n: np.zeros_like(params[n]) for n in PARAM_NAMES}


def sgd_step(
    params: EncoderParams,
    grads: dict[str, np.ndarray],
    state: dict[str, np.ndarray],
    cfg: TrainConfig,
    trainable: dict[str, bool] | None = None,
) -> EncoderParams:
    """In place: ``v <- mu v + (g + wd theta)``; ``theta <- theta - lr v``. Frozen tensors untouched."""
    for name in PARAM_NAMES:
        if trainable is not None and not trainable[name]:
            continue
        theta, g, v = params.tensors[name], grads[name], state[name]
        if g.shape != theta.shape or v.shape != theta.shape:
            raise ContractViolation(f"{name}: gradient/state shape does not match parameter {theta.shape}")
        v *= cfg.sgd_momentum
        v += g + cfg.weight_decay * theta
        theta -= cfg.lr * v
    params.version += 1
    return params


# --- pair sources -------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class TrainPair:
    class_id: int
    views: tuple[tuple[np.ndarray, BBox], tuple[np.ndarray, BBox]]


class SynthPairs:
    """Pairs synthesized on demand; pair ``i`` of stream ``s`` has its own sub-seed."""

    def __init__(self, fores, backs, synth_cfg: SynthConfig):
        self.fores, self.backs, self.cfg = fores, backs, synth_cfg
        self.num_classes = fores.registry.C

    def get(self, index: int, stream: int = 0) -> TrainPair:
        key = (index,) if stream == 0 else (index, stream)
        rng = np.random.default_rng(derive_seed(self.cfg.seed, *key))
        pair = synthesize_pair(self.fores, self.backs, self.cfg, rng)
        v1, v2 = resized_pair(pair, self.cfg.target_width)
        return TrainPair(pair.class_id, (v1, v2))

    def init_indices(self) -> Iterator[tuple[int, int]]:
        i = 0
        while True:
            yield i, 1
            i += 1


class DatasetPairs:
    """Pairs read from a synthesized dataset directory (``pairs.jsonl`` + images)."""

    def __init__(self, root, num_classes: int | None = None):
        self.root = Path(root)
        self.records = read_manifest(self.root)
        if not self.records:
            raise InvalidArgumentError(f"dataset {root} has no pairs")
        seen = max(r["class_id"] for r in self.records) + 1
        self.num_classes = num_classes if num_classes is not None else seen

    def __len__(self) -> int:
        return len(self.records)

    def get(self, index: int, stream: int = 0) -> TrainPair:
        rec = self.records[index % len(self.records)]
        views = tuple((read_rgb(self.root / v["image"]), BBox.from_list(v["bbox"])) for v in rec["views"])
        return TrainPair(rec["class_id"], views)

    def init_indices(self) -> Iterator[tuple[int, int]]:
        for i in range(len(self.records)):
            yield i, 0


# --- training state -------------------------------------------------------------


@dataclass
class TrainState:
    query: EncoderParams
    key: EncoderParams
    velocity: dict[str, np.ndarray]
    bank: ClassQueueBank
    trainable: dict[str, bool]
    step: int = 0

    def tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for prefix, params in (("query/", self.query), ("key/", self.key)):
            for n in PARAM_NAMES:
                out[prefix + n] = params[n]
        for n in PARAM_NAMES:
            out["velocity/" + n] = self.velocity[n]
        out.update(self.bank.state_tensors())
        return out


def new_state(cfg: TrainConfig, num_classes: int) -> TrainState:
    query = init_params(derive_seed(cfg.seed, 0, 0))
    return TrainState(
        query=query,
        key=query.copy(),
        velocity=init_velocity(query),
        bank=ClassQueueBank(num_classes, cfg.queue_size),
        trainable=freeze_stages(query, cfg.freeze_stages),
    )


def model_key_source(state: TrainState, source, workers: int = 1):
    """Keys of the current key encoder on both views of freshly drawn pairs."""

    def keys_of(item):
        index, stream = item
        pair = source.get(index, stream)
        return [(embed(state.key, img, box), pair.class_id) for img, box in pair.views]

    indices = source.init_indices()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            while True:
                chunk = [x for _, x in zip(range(64), indices)]
                if not chunk:
                    return
                for keys in pool.map(keys_of, chunk):
                    yield from keys
    else:
        for item in indices:
            yield from keys_of(item)


def initialize_bank(state: TrainState, cfg: TrainConfig, source) -> None:
    if cfg.queue_init == "model":
        init_bank(state.bank, "model", model_key_source(state, source, cfg.workers))
    else:
        init_bank(state.bank, "random", rng=np.random.default_rng(derive_seed(cfg.seed, 0, 2)))


Observer = Callable[[int, list[int], list[np.ndarray]], None]


@dataclass
class _StepAccumulator:
    """Gradient sum and per-pair statistics gathered across micro-batches."""

    grad_sum: dict[str, np.ndarray]
    new_keys: list = field(default_factory=list)
    losses: list = field(default_factory=list)
    pos: list = field(default_factory=list)
    hits: list = field(default_factory=list)
    query_classes: list = field(default_factory=list)
    neg_classes: list = field(default_factory=list)
    pairs: int = 0


def accumulate_micro_batch(state: TrainState, micro: list[TrainPair], cfg: TrainConfig, acc: _StepAccumulator) -> None:
    """Forward/backward one micro-batch, adding per-pair gradients into ``acc``.

    Activations of the micro-batch are released on return; only the running
    gradient sum is kept.
    """
    directions = ((0, 1), (1, 0)) if cfg.symmetric else ((0, 1),)
    weight = 1.0 / len(directions)
    for item in micro:
        c = item.class_id
        try:
            negs = state.bank.negatives(c)
        except EmptyNegativesError:
            raise EmptyNegativesError(f"step {state.step}: queue of class {c} is empty") from None
        acc.query_classes.append(c)
        acc.neg_classes.append(state.bank.contents(c)[1])
        pair_loss = 0.0
        for qi, ki in directions:
            q, cache = encode(state.query, *item.views[qi])
            k = embed(state.key, *item.views[ki])
            loss, gq = info_nce(q, k, negs, cfg.tau)
            g = backprop(state.query, cache, gq * weight if cfg.symmetric else gq)
            for n in PARAM_NAMES:
                acc.grad_sum[n] += g[n]
            pair_loss += loss * weight
            if qi == 0:
                pos_logit = float(q @ k) / cfg.tau
                acc.pos.append(pos_logit)
                acc.hits.append(pos_logit >= float((negs @ q).max()) / cfg.tau)
            acc.new_keys.append((k, c))
        acc.losses.append(pair_loss)
        acc.pairs += 1


def train_step(state: TrainState, items: list[TrainPair], cfg: TrainConfig, observer: Observer | None = None) -> StepMetrics:
    """One optimizer step over ``accum`` micro-batches of ``batch`` pairs.

    Per-pair gradients are summed in pair order across micro-batches and
    scaled once by ``1 / (accum * batch)``: the mean of the micro-batch
    means, computed without an intermediate rounding, so an accumulated
    step reproduces the full-batch step bit for bit. The bank is read by
    every micro-batch and updated only after the optimizer step.
    """
    if len(items) != cfg.batch * cfg.accum:
        raise ContractViolation(f"expected {cfg.batch * cfg.accum} pairs per step, got {len(items)}")
    acc = _StepAccumulator({n: np.zeros_like(state.query[n]) for n in PARAM_NAMES})
    for a in range(cfg.accum):
        accumulate_micro_batch(state, items[a * cfg.batch : (a + 1) * cfg.batch], cfg, acc)

    if observer is not None:
        observer(state.step, acc.query_classes, acc.neg_classes)

    scale = 1.0 / acc.pairs
    grads = {n: g * scale for n, g in acc.grad_sum.items()}
    for n in PARAM_NAMES:
        if not state.trainable[n]:
            grads[n] = np.zeros_like(grads[n])
    sgd_step(state.query, grads, state.velocity, cfg, state.trainable)
    momentum_update(state.key, state.query, cfg.m)
    state.bank.enqueue(acc.new_keys)
    state.step += 1
    return StepMetrics(
        step=state.step,
        loss=float(np.mean(acc.losses)),
        pos_logit=float(np.mean(acc.pos)),
        accuracy=float(np.mean(acc.hits)),
        queue_fill=state.bank.fill_levels(),
    )


# --- checkpoints -----------------------------------------------------------------


def save_state(path, state: TrainState, cfg: TrainConfig, epoch: int) -> Path:
    meta = {
        "epoch": epoch,
        "num_classes": state.bank.C,
        "queue_size": state.bank.K,
        "dim": state.bank.dim,
        "next_seq": state.bank.next_seq,
        "config": cfg.to_dict(),
    }
    return write_checkpoint(path, state.tensors(), state.step, config_hash(cfg.to_dict()), meta)


def load_state(path, cfg: TrainConfig | None = None) -> tuple[TrainState, dict]:
    tensors, header = read_checkpoint(path)
    meta = header["meta"]
    if cfg is not None and header["config_hash"] != config_hash(cfg.to_dict()):
        raise CheckpointError(f"checkpoint {path} was written with a different configuration")
    try:
        C, K, dim = meta["num_classes"], meta["queue_size"], meta["dim"]
    except KeyError as exc:
        raise CheckpointError(f"checkpoint {path} lacks training metadata {exc}") from None
    query = params_from_tensors(tensors, "query/")
    key = params_from_tensors(tensors, "key/")
    velocity = params_from_tensors(tensors, "velocity/").tensors
    bank = ClassQueueBank.from_state(C, K, dim, meta["next_seq"], tensors)
    frozen = meta["config"]["freeze_stages"]
    state = TrainState(query, key, velocity, bank, freeze_stages(query, frozen), header["step"])
    return state, header


def load_encoder(path, which: str = "query") -> EncoderParams:
    tensors, _ = read_checkpoint(path)
    return params_from_tensors(tensors, f"{which}/")


# --- loop -----------------------------------------------------------------------


@dataclass
class PretrainResult:
    state: TrainState
    metrics: list[StepMetrics] = field(repr=False)
    checkpoints: list[Path]


def steps_per_epoch(cfg: TrainConfig, source) -> int:
    n = len(source) if isinstance(source, DatasetPairs) else cfg.pairs_per_epoch
    return max(1, n // (cfg.batch * cfg.accum))


def pretrain(
    source,
    cfg: TrainConfig,
    out=None,
    resume=None,
    observer: Observer | None = None,
) -> PretrainResult:
    """Run pre-training over ``source`` (``SynthPairs`` or ``DatasetPairs``).

    With ``out`` set, metrics stream to ``metrics.jsonl`` and a checkpoint
    ``ckpt_epoch_{n}`` is written after every epoch (and at ``max_steps``).
    ``resume`` continues exactly from such a checkpoint.
    """
    per_step = cfg.batch * cfg.accum
    n_epoch = steps_per_epoch(cfg, source)
    total = cfg.epochs * n_epoch
    if cfg.max_steps is not None:
        total = min(total, cfg.max_steps)

    if resume is not None:
        state, _ = load_state(resume, cfg)
    else:
        state = new_state(cfg, source.num_classes)
        initialize_bank(state, cfg, source)

    out_dir = Path(out) if out is not None else None
    metrics_f = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        metrics_f = open(out_dir / METRICS_FILE, "a" if resume is not None else "w")

    order_cache: dict[int, np.ndarray] = {}

    def pair_index(flat: int) -> int:
        if not isinstance(source, DatasetPairs):
            return flat
        epoch, pos = divmod(flat, n_epoch * per_step)
        if epoch not in order_cache:
            rng = np.random.default_rng(derive_seed(cfg.seed, 0, 3, epoch))
            order_cache[epoch] = rng.permutation(len(source))
        return int(order_cache[epoch][pos % len(source)])

    pool = ThreadPoolExecutor(max_workers=cfg.workers) if cfg.workers > 1 else None
    metrics, checkpoints = [], []
    try:
        while state.step < total:
            start = state.step * per_step
            indices = [pair_index(start + j) for j in range(per_step)]
            items = list(pool.map(source.get, indices)) if pool else [source.get(i) for i in indices]
            m = train_step(state, items, cfg, observer)
            metrics.append(m)
            if metrics_f is not None:
                metrics_f.write(m.to_json() + "\n")
                metrics_f.flush()
            if m.step % 20 == 0:
                log.info("step %d loss %.4f acc %.3f", m.step, m.loss, m.accuracy)
            if out_dir is not None and (state.step % n_epoch == 0 or state.step == total):
                epoch = -(-state.step // n_epoch)
                checkpoints.append(save_state(out_dir / f"ckpt_epoch_{epoch}", state, cfg, epoch))
    finally:
        if pool is not None:
            pool.shutdown()
        if metrics_f is not None:
            metrics_f.close()
    return PretrainResult(state, metrics, checkpoints)


def moving_average(values, window: int = 20) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if len(v) < window:
        raise InvalidArgumentError(f"need at least {window} values")
    c = np.cumsum(np.concatenate([[0.0], v]))
    return (c[window:] - c[:-window]) / window


def steps_to_threshold(losses, factor: float = 0.8, window: int = 20) -> int | None:
    """First step whose trailing ``window`` mean is <= factor x the first window's mean."""
    ma = moving_average(losses, window)
    hit = np.flatnonzero(ma <= factor * ma[0])
    return int(hit[0]) + window if hit.size else None


# --- linear probe -----------------------------------------------------------------

PROBE_ITERATIONS = 500
PROBE_LR = 0.5
PROBE_TRAIN_FRACTION = 0.8


def probe_features(encoder: EncoderParams, dataset: DatasetPairs) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Embedding of every view's paste box, its class and its pair index."""
    feats, labels, groups = [], [], []
    for i in range(len(dataset)):
        pair = dataset.get(i)
        for img, box in pair.views:
            feats.append(embed(encoder, img, box))
            labels.append(pair.class_id)
            groups.append(i)
    return np.array(feats), np.array(labels), np.array(groups)


def fit_softmax_regression(x: np.ndarray, y: np.ndarray, num_classes: int, iterations: int = PROBE_ITERATIONS, lr: float = PROBE_LR):
    """Multinomial logistic regression by full-batch gradient descent from zero weights."""
    xb = np.hstack([x, np.ones((len(x), 1))])
    w = np.zeros((xb.shape[1], num_classes))
    onehot = np.eye(num_classes)[y]
    for _ in range(iterations):
        z = xb @ w
        z -= z.max(axis=1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        w -= lr * xb.T @ (p - onehot) / len(xb)
    return w


def probe_accuracy(x: np.ndarray, y: np.ndarray, groups: np.ndarray, seed: int) -> float:
    """Held-out accuracy of a softmax probe on an 80/20 split of pairs (both views stay together).

    Features are standardized with statistics of the training split only.
    """
    classes = np.unique(y)
    if len(classes) < 2:
        raise InvalidDatasetError(f"a probe needs at least 2 classes, found {len(classes)}")
    uniq = np.unique(groups)
    order = np.random.default_rng(seed).permutation(len(uniq))
    n_train = int(round(PROBE_TRAIN_FRACTION * len(uniq)))
    if n_train < 1 or n_train >= len(uniq):
        raise InvalidDatasetError(f"{len(uniq)} pairs cannot be split 80/20")
    train_groups = set(uniq[order[:n_train]].tolist())
    is_train = np.array([g in train_groups for g in groups])
    label_of = {c: i for i, c in enumerate(classes)}
    yi = np.array([label_of[c] for c in y])
    # unit-norm embeddings share a large common direction; standardizing with
    # train-split statistics keeps plain gradient descent well conditioned
    mean = x[is_train].mean(axis=0)
    std = x[is_train].std(axis=0) + 1e-12
    x = (x - mean) / std
    w = fit_softmax_regression(x[is_train], yi[is_train], len(classes))
    xt = np.hstack([x[~is_train], np.ones((int((~is_train).sum()), 1))])
    return float(np.mean((xt @ w).argmax(axis=1) == yi[~is_train]))


def linear_probe(encoder, dataset, seed: int = 0) -> float:
    """Held-out accuracy of a linear classifier on frozen embeddings.

    ``encoder`` is a checkpoint path (its query encoder is used) or
    ``EncoderParams``; ``dataset`` is a synthesized dataset directory or
    a ``DatasetPairs``.
    """
    if not isinstance(encoder, EncoderParams):
        encoder = load_encoder(encoder)
    if not isinstance(dataset, DatasetPairs):
        dataset = DatasetPairs(dataset)
    x, y, groups = probe_features(encoder, dataset)
    return probe_accuracy(x, y, groups, seed)
