"""Batch-softmax metric losses over composed queries and a plain SGD trainer.

The loss scores each anchor query against candidate sets of image embeddings
with a similarity kernel, then averages per-set softmax cross-entropy terms.
Set size k tunes how many candidates compete at once: k=2 enumerates every
(positive, negative) pair, k=batch_size is one softmax over the whole batch,
and intermediate k draws m random candidate sets per anchor.
"""

import math
import random
from dataclasses import dataclass, field
from functools import reduce
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from .autodiff import (
    DimensionError,
    Tensor,
    concat,
    gather_rows,
    logsumexp,
    matmul,
    mean,
    reshape,
    softplus,
    tensor_sum,
    transpose,
)
from .css import DatasetManifest, QueryRecord, render_2d
from .encoders import build_vocabulary, tokenize
from .model import ModelConfig, RetrievalModel

KERNELS = ("dot", "neg_l2")

DIVERGENCE_NORM_LIMIT = 1e3


def _check_kernel(kernel: str) -> None:
    if kernel not in KERNELS:
        raise ValueError(f"unknown kernel {kernel!r}; choose one of {', '.join(KERNELS)}")


def _similarity_matrix(psi: Tensor, phi: Tensor, kernel: str) -> Tensor:
    """All-pairs kernel values: out[i, j] = kernel(psi[i], phi[j])."""
    cross = matmul(psi, transpose(phi))
    if kernel == "dot":
        return cross
    b = psi.shape[0]
    psi_sq = reshape(tensor_sum(psi * psi, axis=1), (b, 1))
    phi_sq = reshape(tensor_sum(phi * phi, axis=1), (1, phi.shape[0]))
    return cross * 2.0 - psi_sq - phi_sq


def similarity(a: Tensor, b: Tensor, kernel: str) -> Tensor:
    """Kernel value between two vectors as a differentiable scalar."""
    _check_kernel(kernel)
    if a.data.ndim != 1 or b.data.ndim != 1 or a.shape != b.shape:
        raise DimensionError(
            f"similarity: need two equal-length vectors, got {a.shape} and {b.shape}")
    d = a.shape[0]
    matrix = _similarity_matrix(reshape(a, (1, d)), reshape(b, (1, d)), kernel)
    return reshape(matrix, ())


def build_negative_sets(b: int, k: int, m: int, seed=0) -> List[List[List[int]]]:
    """Per-anchor candidate sets: m index lists of size k, each containing the anchor.

    k=2 enumerates all pairs (anchor, other) in ascending order of the other
    index, k=b is the single full-batch set, and intermediate k samples m
    distinct sets per anchor from a seeded stream.
    """
    if b < 1:
        raise ValueError(f"batch size must be at least 1, got {b}")
    if not (k == b == 1 or 2 <= k <= b):
        raise ValueError(f"set size k={k} is not valid for batch size {b}")
    if m < 1:
        raise ValueError(f"set count m must be at least 1, got {m}")
    if k == b:
        if m != 1:
            raise ValueError(f"k equal to the batch size admits exactly one set, got m={m}")
        return [[list(range(b))] for _ in range(b)]
    if k == 2:
        if m != b - 1:
            raise ValueError(f"k=2 enumerates all {b - 1} pairs per anchor, got m={m}")
        return [[[i, j] for j in range(b) if j != i] for i in range(b)]
    cap = math.comb(b - 1, k - 1)
    if m > cap:
        raise ValueError(
            f"cannot draw {m} distinct sets of size {k} per anchor from a batch of {b} "
            f"(only {cap} exist)")
    rng = random.Random(seed)
    sets: List[List[List[int]]] = []
    for i in range(b):
        others = [j for j in range(b) if j != i]
        chosen = set()
        anchor_sets: List[List[int]] = []
        while len(anchor_sets) < m:
            members = sorted(rng.sample(others, k - 1))
            key = tuple(members)
            if key in chosen:
                continue
            chosen.add(key)
            anchor_sets.append([i] + members)
        sets.append(anchor_sets)
    return sets


@dataclass(frozen=True)
class LossConfig:
    """Shape of the softmax metric loss; m is derived from k when omitted."""

    batch_size: int
    k: int = 2
    kernel: str = "dot"
    m: Optional[int] = None

    def __post_init__(self):
        _check_kernel(self.kernel)
        if self.batch_size < 1:
            raise ValueError(f"batch size must be at least 1, got {self.batch_size}")
        if not (self.k == self.batch_size == 1 or 2 <= self.k <= self.batch_size):
            raise ValueError(
                f"set size k={self.k} is not valid for batch size {self.batch_size}")
        if self.m is None:
            if self.k == self.batch_size:
                derived = 1
            elif self.k == 2:
                derived = self.batch_size - 1
            else:
                derived = self.batch_size
            object.__setattr__(self, "m", derived)
        if self.k == self.batch_size and self.m != 1:
            raise ValueError(
                f"k equal to the batch size admits exactly one set, got m={self.m}")
        if self.k == 2 and self.m != self.batch_size - 1:
            raise ValueError(
                f"k=2 enumerates all {self.batch_size - 1} pairs per anchor, got m={self.m}")
        if 2 < self.k < self.batch_size:
            cap = math.comb(self.batch_size - 1, self.k - 1)
            if self.m > cap:
                raise ValueError(
                    f"m={self.m} exceeds the {cap} distinct sets of size {self.k} "
                    f"available per anchor in a batch of {self.batch_size}")


Embeddings = Union[Tensor, Sequence[Tensor]]


def _as_matrix(x: Embeddings, name: str) -> Tensor:
    if isinstance(x, Tensor):
        if x.data.ndim != 2:
            raise DimensionError(f"{name}: need a [batch, dim] tensor, got {x.shape}")
        return x
    rows = list(x)
    if not rows:
        raise ValueError(f"{name}: need at least one embedding")
    d = rows[0].shape[0] if rows[0].data.ndim == 1 else None
    for row in rows:
        if row.data.ndim != 1 or row.shape[0] != d:
            raise DimensionError(f"{name}: every embedding must be a vector of length {d}")
    columns = [reshape(row, (d, 1)) for row in rows]
    return transpose(reduce(concat, columns))


def _validate_sets(sets: Sequence[Sequence[Sequence[int]]], b: int,
                   m: int, k: int) -> np.ndarray:
    if len(sets) != b:
        raise ValueError(f"need one set list per anchor: got {len(sets)} for batch {b}")
    for i, anchor_sets in enumerate(sets):
        if len(anchor_sets) != m:
            raise ValueError(f"anchor {i}: expected {m} sets, got {len(anchor_sets)}")
        for members in anchor_sets:
            if len(members) != k:
                raise ValueError(f"anchor {i}: expected sets of size {k}, got {len(members)}")
            if i not in members:
                raise ValueError(f"anchor {i}: every candidate set must contain the anchor")
            if any(not (0 <= j < b) for j in members):
                raise ValueError(f"anchor {i}: set member out of range for batch {b}")
    return np.asarray(sets, dtype=np.int64)


def loss(psi: Embeddings, phi: Embeddings,
         sets: Sequence[Sequence[Sequence[int]]], config: LossConfig) -> Tensor:
    """Mean softmax cross-entropy of each anchor's positive against its sets.

    psi holds composed query embeddings, phi target image embeddings; row i of
    each is a matched pair. Scores inside every set are max-shifted before
    exponentiation, so extreme kernel values stay finite.
    """
    psi = _as_matrix(psi, "psi")
    phi = _as_matrix(phi, "phi")
    if psi.shape != phi.shape:
        raise DimensionError(f"psi {psi.shape} and phi {phi.shape} must match")
    b = psi.shape[0]
    if b != config.batch_size:
        raise DimensionError(
            f"embeddings have batch {b} but the loss is configured for {config.batch_size}")
    index = _validate_sets(sets, b, config.m, config.k)
    sim = _similarity_matrix(psi, phi, config.kernel)
    lse = logsumexp(gather_rows(sim, index))
    pos = gather_rows(sim, np.arange(b).reshape(b, 1))
    return mean(lse - pos)


def loss_soft_triplet_form(psi: Embeddings, phi: Embeddings,
                           sets: Sequence[Sequence[Sequence[int]]],
                           kernel: str = "dot") -> Tensor:
    """k=2 loss rewritten as mean softplus(negative - positive) score gaps.

    Algebraically identical to loss() on the exhaustive pair sets; exists so
    the two derivations can be checked against each other.
    """
    _check_kernel(kernel)
    psi = _as_matrix(psi, "psi")
    phi = _as_matrix(phi, "phi")
    if psi.shape != phi.shape:
        raise DimensionError(f"psi {psi.shape} and phi {phi.shape} must match")
    b = psi.shape[0]
    if b < 2:
        raise ValueError("the pair form needs a batch of at least 2")
    index = _validate_sets(sets, b, b - 1, 2)
    negatives = np.empty((b, b - 1), dtype=np.int64)
    for i in range(b):
        others = [j for members in sets[i] for j in members if j != i]
        if sorted(others) != [j for j in range(b) if j != i]:
            raise ValueError(
                "the pair form needs the exhaustive k=2 sets (every other index once)")
        negatives[i] = others
    sim = _similarity_matrix(psi, phi, kernel)
    pos = gather_rows(sim, np.arange(b).reshape(b, 1))
    neg = gather_rows(sim, negatives)
    return mean(softplus(neg - pos))


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


class TrainingDiverged(RuntimeError):
    """Raised when the loss goes non-finite or embeddings blow up."""

    def __init__(self, iteration: int, batch_ids: List[str], reason: str):
        super().__init__(
            f"training diverged at iteration {iteration} ({reason}); "
            f"batch: {', '.join(batch_ids)}")
        self.iteration = iteration
        self.batch_ids = batch_ids
        self.reason = reason


@dataclass(frozen=True)
class TrainConfig:
    """Everything one training run depends on, model shape included."""

    iterations: int
    model: ModelConfig
    learning_rate: float = 0.01
    momentum: float = 0.0
    batch_size: int = 16
    k: int = 2
    kernel: str = "dot"
    m: Optional[int] = None
    seed: int = 0
    eval_every: int = 100
    eval_queries: int = 200

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError(f"iterations must be non-negative, got {self.iterations}")
        if self.batch_size < 2:
            raise ValueError(f"training needs a batch of at least 2, got {self.batch_size}")
        LossConfig(self.batch_size, self.k, self.kernel, self.m)  # validates k/kernel/m
        if self.learning_rate < 0:
            raise ValueError(f"learning rate must be non-negative, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.eval_every < 1:
            raise ValueError(f"eval_every must be at least 1, got {self.eval_every}")
        if self.eval_queries < 1:
            raise ValueError(f"eval_queries must be at least 1, got {self.eval_queries}")


@dataclass
class TrainResult:
    model: RetrievalModel
    log: List[Dict[str, object]] = field(default_factory=list)


def _row_norms(matrix: np.ndarray) -> np.ndarray:
    return np.sqrt((matrix.astype(np.float64) ** 2).sum(axis=1))


def train(config: TrainConfig, manifest: DatasetManifest) -> TrainResult:
    """SGD on composed-query vs target-image embeddings from one manifest.

    The last eval_queries queries are held out: retrieval hit rate (r1, in
    percent, over a database of exactly the held-out bases and targets), a
    reference loss at iteration 0, and the gating contribution diagnostic are
    all measured there. Logged loss at later points is the mean training loss
    since the previous point. Raises TrainingDiverged when the loss goes
    non-finite or any embedding norm reaches the divergence limit.
    """
    loss_config = LossConfig(config.batch_size, config.k, config.kernel, config.m)
    if manifest.canvas_px != config.model.canvas_px:
        raise ValueError(
            f"manifest renders {manifest.canvas_px}px images but the model expects "
            f"{config.model.canvas_px}px")
    queries = list(manifest.queries)
    if config.eval_queries >= len(queries):
        raise ValueError(
            f"cannot hold out {config.eval_queries} of {len(queries)} queries")
    if config.eval_queries < config.batch_size:
        raise ValueError(
            f"held-out slice ({config.eval_queries}) must cover one batch "
            f"({config.batch_size})")
    train_pool = queries[:-config.eval_queries]
    eval_pool = queries[-config.eval_queries:]
    if len(train_pool) < config.batch_size:
        raise ValueError(
            f"only {len(train_pool)} training queries for batches of {config.batch_size}")

    vocab = build_vocabulary()
    model = RetrievalModel(config.model, vocab, seed=config.seed)
    images = {scene.scene_id: render_2d(scene, manifest.canvas_px)
              for scene in manifest.scenes}
    token_rows = {id(q): tokenize(" ".join(q.text), vocab) for q in queries}

    def batch_arrays(batch: Sequence[QueryRecord]):
        bases = np.stack([images[q.base_scene_id] for q in batch])
        targets = np.stack([images[q.target_scene_id] for q in batch])
        rows = [token_rows[id(q)] for q in batch]
        return bases, targets, rows

    static_sets = None
    if config.k in (2, config.batch_size):
        static_sets = build_negative_sets(
            config.batch_size, config.k, loss_config.m, seed=0)

    def sets_for(tag) -> List[List[List[int]]]:
        if static_sets is not None:
            return static_sets
        return build_negative_sets(config.batch_size, config.k, loss_config.m,
                                   seed=f"{config.seed}:sets:{tag}")

    eval_db_ids = sorted({q.base_scene_id for q in eval_pool}
                         | {q.target_scene_id for q in eval_pool})
    eval_db_images = np.stack([images[i] for i in eval_db_ids])
    eval_batch = eval_pool[:config.batch_size]
    eval_bases, eval_targets, eval_rows = batch_arrays(eval_batch)

    def held_out_r1() -> float:
        db = model.embed_images(eval_db_images).data
        bases, _, rows = batch_arrays(eval_pool)
        composed = model.compose_queries(bases, rows).data
        if config.kernel == "dot":
            scores = composed @ db.T
        else:
            scores = (2.0 * composed @ db.T
                      - (composed ** 2).sum(axis=1, keepdims=True)
                      - (db ** 2).sum(axis=1))
        top = np.argmax(scores, axis=1)  # first max wins: ids are in ascending order
        hits = sum(1 for q, j in zip(eval_pool, top)
                   if eval_db_ids[j] == q.target_scene_id)
        return 100.0 * hits / len(eval_pool)

    def gating_contribution() -> Optional[float]:
        if model.strategy.name != "tirg":
            return None
        value, _ = model.identity_contribution(eval_bases, eval_rows)
        return float(value)

    log: List[Dict[str, object]] = []

    def record(iteration: int, loss_value: float) -> None:
        log.append({"iter": iteration, "loss": float(loss_value),
                    "r1": held_out_r1(),
                    "identity_contribution": gating_contribution()})

    psi0 = model.compose_queries(eval_bases, eval_rows)
    phi0 = model.embed_images(eval_targets)
    record(0, loss(psi0, phi0, sets_for("eval"), loss_config).data.item())

    batch_rng = random.Random(f"{config.seed}:batches")
    dropout_rng = (np.random.default_rng(config.seed + 104729)
                   if config.model.dropout > 0 else None)
    velocity: Dict[str, np.ndarray] = {}
    window: List[float] = []

    for iteration in range(1, config.iterations + 1):
        batch = batch_rng.sample(train_pool, config.batch_size)
        bases, targets, rows = batch_arrays(batch)
        psi = model.compose_queries(bases, rows, rng=dropout_rng)
        phi = model.embed_images(targets)
        objective = loss(psi, phi, sets_for(iteration), loss_config)
        value = objective.data.item()

        worst_norm = max(_row_norms(psi.data).max(), _row_norms(phi.data).max())
        if not math.isfinite(value) or worst_norm >= DIVERGENCE_NORM_LIMIT:
            reason = (f"loss {value!r}" if not math.isfinite(value)
                      else f"embedding norm {worst_norm:.3g}")
            ids = [f"{q.base_scene_id}->{q.target_scene_id}" for q in batch]
            raise TrainingDiverged(iteration, ids, reason)

        objective.backward()
        for name, param in model.parameters().items():
            grad = param.grad
            if grad is None:
                continue
            if config.momentum > 0.0:
                previous = velocity.get(name)
                step = (config.momentum * previous + grad
                        if previous is not None else grad.copy())
                velocity[name] = step
            else:
                step = grad
            param.data -= config.learning_rate * step
            param.grad = None

        window.append(value)
        if iteration % config.eval_every == 0 or iteration == config.iterations:
            record(iteration, float(np.mean(window)))
            window = []

    return TrainResult(model=model, log=log)
