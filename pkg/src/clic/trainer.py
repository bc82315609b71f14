"""Momentum-contrast training with the complexity-aware auxiliary loss.

One step encodes query views with gradients and key views without, scores
each query against its own key (positive) and the queue (negatives), adds
``lam`` times the squared gap between activation energy and the image
prior, takes an SGD step on the query encoder, blends the key encoder
toward it and pushes the batch's keys into the queue.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import checkpoint
from . import numeric as nx
from .config import TrainConfig, parse_config
from .encoder import (
    EncoderState,
    forward,
    init_encoder,
    key_copy,
    momentum_update,
    state_from_tensors,
    state_tensors,
    to_input,
)
from .errors import ContractError, NormalizationError, NumericFailure
from .metrics import edge_density, global_entropy, raw_compression_ratio
from .numeric import GradTape, Tensor
from .views import ViewPair, derive_seed, make_pair

log = logging.getLogger(__name__)

UNIT_TOL = 1e-4


class NegativeQueue:
    """Fixed-capacity FIFO of unit-length key embeddings.

    Entries live in a ring buffer; ``head`` is the next slot to overwrite.
    """

    def __init__(self, capacity: int = 4096, dim: int = 128):
        if capacity < 1:
            raise ContractError("queue capacity must be positive")
        self.capacity = capacity
        self.dim = dim
        self.buffer = np.zeros((capacity, dim), dtype=np.float32)
        self.head = 0
        self.size = 0

    def __len__(self) -> int:
        return self.size

    def enqueue(self, keys: np.ndarray) -> None:
        keys = np.asarray(keys, dtype=np.float32)
        if keys.ndim != 2 or keys.shape[1] != self.dim:
            raise ContractError(f"queue expects (B, {self.dim}) keys, got {keys.shape}")
        norms = np.linalg.norm(keys.astype(np.float64), axis=1)
        if np.any(np.abs(norms - 1.0) > UNIT_TOL):
            raise ContractError("queue entries must be unit length")
        if len(keys) > self.capacity:
            keys = keys[-self.capacity:]
        for row in keys:
            self.buffer[self.head] = row
            self.head = (self.head + 1) % self.capacity
        self.size = min(self.size + len(keys), self.capacity)

    def negatives(self) -> np.ndarray:
        """Current entries in storage order (order does not affect the loss)."""
        return self.buffer[:self.size]

    def entries(self) -> np.ndarray:
        """Current entries oldest first."""
        if self.size < self.capacity:
            return self.buffer[:self.size].copy()
        return np.concatenate([self.buffer[self.head:], self.buffer[:self.head]])

    def copy(self) -> "NegativeQueue":
        q = NegativeQueue(self.capacity, self.dim)
        q.buffer = self.buffer.copy()
        q.head, q.size = self.head, self.size
        return q


def _check_unit(arr: np.ndarray, what: str) -> None:
    norms = np.linalg.norm(np.asarray(arr, dtype=np.float64), axis=-1)
    if np.any(np.abs(norms - 1.0) > UNIT_TOL):
        raise ContractError(f"{what} must be unit length (tolerance {UNIT_TOL})")


def info_nce(q: Tensor, k_pos, negatives, tau: float) -> Tensor:
    """Batch-mean InfoNCE with dot-product logits scaled by ``1 / tau``.

    ``q`` is (B, d) or (d,); ``k_pos`` matches it; ``negatives`` is a
    NegativeQueue or a (K, d) array.  Keys are treated as constants.
    """
    negs = negatives.negatives() if isinstance(negatives, NegativeQueue) else np.asarray(negatives)
    if negs.ndim != 2 or len(negs) == 0:
        raise ContractError("InfoNCE needs at least one negative")
    if q.ndim == 1:
        q = nx.reshape(q, (1, q.shape[0]))
    k_pos = np.asarray(k_pos, dtype=q.data.dtype).reshape(q.shape)
    _check_unit(q.data, "query embeddings")
    _check_unit(k_pos, "positive keys")
    _check_unit(negs, "negative keys")
    b = q.shape[0]
    inv_tau = 1.0 / tau
    dt = q.data.dtype
    pos = nx.sum(nx.mul(q, Tensor(k_pos, dtype=dt)), axis=1)
    neg = nx.matmul(q, Tensor(np.ascontiguousarray(negs.T), dtype=dt))
    logits = nx.mul(nx.concat([nx.reshape(pos, (b, 1)), neg], axis=1), inv_tau)
    return nx.mean(nx.sub(nx.logsumexp(logits, axis=1), nx.mul(pos, inv_tau)))


def cal_loss(fae: Tensor, prior) -> Tensor:
    """Mean squared gap between activation energy and a detached prior."""
    prior = np.asarray(prior, dtype=fae.data.dtype)
    if fae.ndim != 1 or prior.shape != fae.shape:
        raise ContractError(f"fae batch {fae.shape} and prior batch {prior.shape} differ in length")
    if fae.shape[0] < 1:
        raise ContractError("CAL needs at least one sample")
    return nx.mean(nx.square(nx.sub(fae, Tensor(prior, dtype=fae.data.dtype))))


def total_loss(l_in: Tensor, l_cal: Tensor | None, lam: float) -> Tensor:
    if lam == 0 or l_cal is None:
        return l_in
    return nx.add(l_in, nx.mul(l_cal, lam))


def sgd_update(
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    velocity: Sequence[np.ndarray],
    lr: float,
    momentum: float,
    weight_decay: float,
) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """SGD with heavy-ball momentum and decoupled weight decay.

    ``v <- momentum * v + g``; ``p <- p * (1 - lr * wd) - lr * v``.
    """
    new_p, new_v = [], []
    for p, g, v in zip(params, grads, velocity):
        dt = p.dtype.type
        v2 = dt(momentum) * v + g.astype(p.dtype)
        p2 = p * dt(1.0 - lr * weight_decay) - dt(lr) * v2
        new_p.append(p2.astype(p.dtype))
        new_v.append(v2.astype(p.dtype))
    return new_p, new_v


@dataclass
class TrainState:
    query: EncoderState
    key: EncoderState
    queue: NegativeQueue
    velocity: list[np.ndarray]
    step: int = 0

    @classmethod
    def fresh(cls, cfg: TrainConfig) -> "TrainState":
        query = init_encoder(cfg.seed, channels=cfg.channels, embed_dim=cfg.embed_dim)
        return cls(
            query=query,
            key=key_copy(query),
            queue=NegativeQueue(cfg.queue_capacity, cfg.embed_dim),
            velocity=[np.zeros_like(a) for a in query.arrays()],
        )


@dataclass(frozen=True)
class LossRecord:
    step: int
    loss_total: float
    loss_infonce: float
    loss_cal: float
    lr: float


def _batch_input(views: Sequence[np.ndarray], state: EncoderState) -> Tensor:
    return Tensor(to_input(list(views), state.in_channels))


def train_step(
    batch: Sequence[ViewPair],
    state: TrainState,
    cfg: TrainConfig,
    lr: float,
    prior: Sequence[float] | None = None,
) -> LossRecord:
    """One optimization step; updates ``state`` in place.

    ``prior`` overrides the per-sample CAL target (defaults to each pair's
    source GE).  Raises NumericFailure before touching the state if the loss
    is not finite.
    """
    if len(state.queue) == 0:
        raise ContractError("negative queue is empty; warm-start it before training")
    xq = _batch_input([p.query_view for p in batch], state.query)
    xk = _batch_input([p.key_view for p in batch], state.key)
    prior = np.array([p.source_ge for p in batch] if prior is None else prior, dtype=np.float64)
    use_cal = cfg.lam > 0 and cfg.prior != "none"

    try:
        keys = forward(state.key, xk, cfg.fae_stages).embedding.data
        with GradTape() as tape:
            rq = forward(state.query, xq, cfg.fae_stages)
    except NormalizationError as exc:
        raise NumericFailure(f"zero-norm embedding at step {state.step}", {"step": state.step}) from exc
    with tape:
        l_in = info_nce(rq.embedding, keys, state.queue, cfg.tau)
        l_cal = cal_loss(rq.fae, prior) if use_cal else None
        loss = total_loss(l_in, l_cal, cfg.lam)
    if l_cal is not None:
        cal_value = l_cal.item()
    elif cfg.prior != "none":
        # logged for comparison only; never enters the gradient
        cal_value = float(np.mean((rq.fae.data.astype(np.float64) - prior) ** 2))
    else:
        cal_value = 0.0
    record = LossRecord(
        step=state.step,
        loss_total=loss.item(),
        loss_infonce=l_in.item(),
        loss_cal=cal_value,
        lr=lr,
    )
    if not math.isfinite(record.loss_total):
        raise NumericFailure(f"non-finite loss at step {state.step}", record.__dict__)

    grads = tape.gradient(loss, state.query.params())
    new_p, state.velocity = sgd_update(
        state.query.arrays(), grads, state.velocity, lr, cfg.sgd_momentum, cfg.weight_decay
    )
    if not all(np.all(np.isfinite(p)) for p in new_p):
        raise NumericFailure(f"non-finite parameters after step {state.step}", record.__dict__)
    state.query = state.query.with_params(new_p)
    state.key = momentum_update(state.key, state.query, cfg.m)
    state.queue.enqueue(keys)
    state.step += 1
    return record


# -- the training loop ---------------------------------------------------


def compute_priors(images: Sequence[np.ndarray], prior: str) -> np.ndarray:
    """Per-image CAL targets.  ``cr`` is the raw ratio ``8 / H`` (unbounded)."""
    if prior in ("ge", "none"):
        return np.array([global_entropy(im) for im in images])
    if prior == "ed":
        return np.array([edge_density(im) for im in images])
    if prior == "cr":
        return np.array([raw_compression_ratio(im) for im in images])
    raise ContractError(f"unknown prior {prior!r}")


def steps_per_epoch(n: int, batch_size: int) -> int:
    return max(1, n // batch_size)


def _epoch_order(cfg: TrainConfig, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng(derive_seed(cfg.seed, epoch, 7)).permutation(n)


def _pairs(images, idx, cfg: TrainConfig, epoch: int, priors_ge) -> list[ViewPair]:
    return [make_pair(images[i], cfg, derive_seed(cfg.seed, epoch, int(i)), source_ge=priors_ge[i]) for i in idx]


def warm_start_queue(state: TrainState, images, cfg: TrainConfig, ge) -> None:
    """Seed the queue with key embeddings before the first step.

    ``full`` fills it to capacity by cycling through the corpus in the first
    epoch's order (views drawn with a separate seed); ``batch`` enqueues a
    single batch from the tail of that order and lets the queue grow during
    training.
    """
    n = len(images)
    order = _epoch_order(cfg, 0, n)
    if cfg.queue_warm_start == "batch":
        idx = order[-min(cfg.batch_size, n):]
    else:
        idx = np.resize(order[::-1], state.queue.capacity)
    for start in range(0, len(idx), 256):
        chunk = idx[start:start + 256]
        pairs = [
            make_pair(images[i], cfg, derive_seed(cfg.seed, 10**6, start + j, int(i)), source_ge=ge[i])
            for j, i in enumerate(chunk)
        ]
        keys = forward(state.key, _batch_input([p.key_view for p in pairs], state.key), cfg.fae_stages)
        state.queue.enqueue(keys.embedding.data)


@dataclass
class TrainResult:
    state: TrainState
    records: list[LossRecord] = field(default_factory=list)
    aborted: str | None = None


def train(
    images: Sequence[np.ndarray],
    cfg: TrainConfig,
    state: TrainState | None = None,
    priors: np.ndarray | None = None,
    max_steps: int | None = None,
    on_epoch_end: Callable[[int, TrainState], None] | None = None,
) -> TrainResult:
    """Run (or resume) contrastive pretraining over ``images``.

    Batches, views and the queue warm start are derived from ``cfg.seed`` and
    the step counter, so a run resumed from a checkpoint repeats the
    uninterrupted run exactly.  ``max_steps`` stops early (used to cut a run
    for checkpoint tests).  A non-finite loss ends the run with ``aborted`` set.
    """
    n = len(images)
    if n == 0:
        raise ContractError("cannot train on an empty corpus")
    state = state or TrainState.fresh(cfg)
    ge = compute_priors(images, "ge")
    if priors is None:
        priors = ge if cfg.prior in ("ge", "none") else compute_priors(images, cfg.prior)
    priors = np.asarray(priors, dtype=np.float64)
    spe = steps_per_epoch(n, cfg.batch_size)
    bs = min(cfg.batch_size, n)
    result = TrainResult(state)
    if state.step == 0 and len(state.queue) == 0:
        try:
            warm_start_queue(state, images, cfg, ge)
        except NormalizationError as exc:
            log.warning("training aborted: zero-norm key embedding during warm start")
            result.aborted = f"zero-norm key embedding during warm start: {exc}"
            return result
    total_steps = spe * cfg.epochs
    while state.step < total_steps:
        if max_steps is not None and len(result.records) >= max_steps:
            break
        epoch, b = divmod(state.step, spe)
        order = _epoch_order(cfg, epoch, n)
        idx = order[b * bs:(b + 1) * bs]
        batch = _pairs(images, idx, cfg, epoch, ge)
        lr = cfg.lr_at(epoch)
        try:
            rec = train_step(batch, state, cfg, lr, prior=priors[idx])
        except NumericFailure as exc:
            log.warning("training aborted: %s", exc)
            result.aborted = str(exc)
            break
        result.records.append(rec)
        if state.step % spe == 0 and on_epoch_end is not None:
            on_epoch_end(state.step // spe, state)
    return result


def format_log(records: Sequence[LossRecord]) -> str:
    lines = ["step,loss_total,loss_infonce,loss_cal,lr"]
    for r in records:
        lines.append(f"{r.step},{r.loss_total:.8g},{r.loss_infonce:.8g},{r.loss_cal:.8g},{r.lr:.8g}")
    return "\n".join(lines) + "\n"


# -- checkpoints ---------------------------------------------------------


def state_to_checkpoint(state: TrainState, cfg: TrainConfig, head: "FineTuneHead | None" = None):
    tensors = {}
    tensors.update(state_tensors(state.query, "query"))
    tensors.update(state_tensors(state.key, "key"))
    for (name, _), v in zip(state.query.named_params(), state.velocity):
        tensors[f"velocity/{name}"] = v
    tensors["queue/buffer"] = state.queue.buffer
    if head is not None:
        tensors["head/weight"] = head.weight
        tensors["head/bias"] = head.bias
    meta = {
        "config": cfg.to_text(),
        "step": state.step,
        "queue_head": state.queue.head,
        "queue_size": state.queue.size,
    }
    return tensors, meta


def save_training_checkpoint(path, state: TrainState, cfg: TrainConfig, head: "FineTuneHead | None" = None) -> None:
    tensors, meta = state_to_checkpoint(state, cfg, head)
    checkpoint.save(path, tensors, meta)


def load_training_checkpoint(path) -> tuple[TrainState, TrainConfig, "FineTuneHead | None"]:
    meta, tensors = checkpoint.load(path)
    return state_from_checkpoint(meta, tensors)


def state_from_checkpoint(meta: dict, tensors: dict):
    cfg = parse_config(meta.get("config", ""))
    query = state_from_tensors(tensors, "query", "query")
    key = state_from_tensors(tensors, "key", "key") if "key/proj.weight" in tensors else key_copy(query)
    velocity = [
        tensors.get(f"velocity/{name}", np.zeros(p.shape, dtype=np.float32)).copy()
        for name, p in query.named_params()
    ]
    buf = tensors.get("queue/buffer")
    queue = NegativeQueue(cfg.queue_capacity, cfg.embed_dim)
    if buf is not None:
        queue.buffer = buf.copy()
        queue.capacity = buf.shape[0]
        queue.head = int(meta.get("queue_head", 0))
        queue.size = int(meta.get("queue_size", 0))
    head = None
    if "head/weight" in tensors:
        head = FineTuneHead(tensors["head/weight"].copy(), tensors["head/bias"].copy())
    state = TrainState(query, key, queue, velocity, int(meta.get("step", 0)))
    return state, cfg, head


# -- fine-tuning ---------------------------------------------------------


@dataclass
class FineTuneHead:
    """Linear map from pooled last-stage features to one score."""

    weight: np.ndarray
    bias: np.ndarray

    @classmethod
    def zeros(cls, dim: int = 64) -> "FineTuneHead":
        return cls(np.zeros((dim, 1), dtype=np.float32), np.zeros(1, dtype=np.float32))

    def predict(self, features: np.ndarray) -> np.ndarray:
        f = np.asarray(features, dtype=np.float32)
        return (f @ self.weight + self.bias).reshape(-1).astype(np.float64)


def pooled_features(encoder: EncoderState, images, batch_size: int = 256) -> np.ndarray:
    from .encoder import encode_batch

    return encode_batch(encoder, images, batch_size=batch_size).pooled.data.astype(np.float32)


def fine_tune(
    head: FineTuneHead,
    frozen: EncoderState,
    labeled: Sequence[tuple[np.ndarray, float]],
    lr: float = 0.001,
    epochs: int = 100,
    batch_size: int = 32,
    momentum: float = 0.9,
    weight_decay: float = 1e-4,
    seed: int = 0,
    features: np.ndarray | None = None,
) -> FineTuneHead:
    """Train only the head by SGD on MSE against the labels.

    The encoder is read, never written.  ``features`` may carry precomputed
    pooled features for ``labeled`` (the images are then ignored).
    """
    if len(labeled) == 0:
        raise ContractError("fine-tuning needs at least one labeled image")
    labels = np.array([y for _, y in labeled], dtype=np.float32)
    if np.any(labels < 0) or np.any(labels > 1):
        raise ContractError("labels must lie in [0, 1]")
    feats = pooled_features(frozen, [im for im, _ in labeled]) if features is None else np.asarray(features, np.float32)
    w = Tensor(head.weight, requires_grad=True)
    b = Tensor(head.bias, requires_grad=True)
    vel = [np.zeros_like(w.data), np.zeros_like(b.data)]
    rng = np.random.default_rng(seed)
    n = len(labels)
    bs = min(batch_size, n)
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            with GradTape() as tape:
                pred = nx.reshape(nx.add_bias(nx.matmul(Tensor(feats[idx]), w), b), (len(idx),))
                loss = nx.mean(nx.square(nx.sub(pred, Tensor(labels[idx]))))
            grads = tape.gradient(loss, [w, b])
            (wn, bn), vel = sgd_update([w.data, b.data], grads, vel, lr, momentum, weight_decay)
            w = Tensor(wn, requires_grad=True)
            b = Tensor(bn, requires_grad=True)
    return FineTuneHead(w.numpy(), b.numpy())
