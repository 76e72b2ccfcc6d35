"""Retrieval evaluation: embed an image database, rank candidates against
composed queries, and report recall with per-modification-kind breakdowns.

Ranking is exact brute force; desk-scale databases make O(N*D) per query
trivial, and exactness keeps the metrics sharp. Scores sort descending with
ties broken by ascending image id, so every ordering is deterministic.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .css import DatasetManifest, render_2d
from .encoders import tokenize
from .metric_learning import KERNELS
from .model import RetrievalModel

QueryText = Union[str, Sequence[str]]


def _join_text(text: QueryText) -> str:
    if isinstance(text, str):
        return text
    return " ".join(text)


@dataclass
class EmbeddedDatabase:
    """One embedding row per image id, scored with the training kernel."""

    ids: List[str]
    matrix: np.ndarray
    kernel: str

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix)
        if self.kernel not in KERNELS:
            raise ValueError(f"kernel must be one of {KERNELS}, got {self.kernel!r}")
        if self.matrix.ndim != 2:
            raise ValueError(f"embedding matrix must be 2-D, got shape {self.matrix.shape}")
        if len(self.ids) != self.matrix.shape[0]:
            raise ValueError(
                f"{len(self.ids)} ids but {self.matrix.shape[0]} embedding rows")
        if not self.ids:
            raise ValueError("database must hold at least one image")
        seen = set()
        for ident in self.ids:
            if ident in seen:
                raise ValueError(f"duplicate image id {ident!r}")
            seen.add(ident)

    def __len__(self) -> int:
        return len(self.ids)


@dataclass
class EvalQuery:
    """One retrieval test case: compose image+text, look for target_id."""

    image: np.ndarray
    text: QueryText
    target_id: str
    kind: Optional[str] = None


@dataclass
class EvalReport:
    """Recall table for one evaluation run."""

    recall: Dict[int, float]
    by_kind: Dict[str, float]
    query_count: int
    fingerprint: str = ""

    def __post_init__(self):
        values = list(self.recall.values()) + list(self.by_kind.values())
        for v in values:
            if not 0.0 <= v <= 100.0:
                raise ValueError(f"recall values live in [0, 100], got {v}")
        ks = sorted(self.recall)
        ordered = [self.recall[k] for k in ks]
        if ordered != sorted(ordered):
            raise ValueError(f"recall must be monotone in K, got {self.recall}")

    def to_json(self) -> str:
        return json.dumps({
            "recall": {str(k): v for k, v in sorted(self.recall.items())},
            "by_kind": dict(sorted(self.by_kind.items())),
            "query_count": self.query_count,
            "fingerprint": self.fingerprint,
        }, indent=2)

    @classmethod
    def from_json(cls, payload: str) -> "EvalReport":
        raw = json.loads(payload)
        return cls(recall={int(k): v for k, v in raw["recall"].items()},
                   by_kind=dict(raw["by_kind"]),
                   query_count=raw["query_count"],
                   fingerprint=raw.get("fingerprint", ""))

    def table(self) -> str:
        rows: List[Tuple[str, str]] = [("queries", str(self.query_count))]
        for k in sorted(self.recall):
            rows.append((f"R@{k}", f"{self.recall[k]:.2f}"))
        for kind in sorted(self.by_kind):
            rows.append((f"{kind} R@1", f"{self.by_kind[kind]:.2f}"))
        if self.fingerprint:
            rows.append(("fingerprint", self.fingerprint))
        label_w = max(len(label) for label, _ in rows)
        value_w = max(len(value) for _, value in rows)
        lines = [f"{label:<{label_w}}  {value:>{value_w}}" for label, value in rows]
        lines.insert(0, "-" * (label_w + value_w + 2))
        lines.append("-" * (label_w + value_w + 2))
        return "\n".join(lines)


# ---------------------------------------------------------------------------
# embedding and ranking
# ---------------------------------------------------------------------------


ImageItems = Union[Mapping[str, np.ndarray], Sequence[Tuple[str, np.ndarray]]]


def embed_database(images: ImageItems, model: RetrievalModel,
                   kernel: str = "dot", batch_size: int = 256) -> EmbeddedDatabase:
    """Embed (id, raster) pairs (or an id->raster mapping) database-side."""
    if isinstance(images, Mapping):
        items = list(images.items())
    else:
        items = list(images)
    if kernel not in KERNELS:
        raise ValueError(f"kernel must be one of {KERNELS}, got {kernel!r}")
    ids = [ident for ident, _ in items]
    seen = set()
    for ident in ids:
        if ident in seen:
            raise ValueError(f"duplicate image id {ident!r}")
        seen.add(ident)
    if not items:
        raise ValueError("database must hold at least one image")
    chunks = []
    for lo in range(0, len(items), batch_size):
        batch = np.stack([raster for _, raster in items[lo:lo + batch_size]])
        chunks.append(model.embed_images(batch).data)
    return EmbeddedDatabase(ids=ids, matrix=np.concatenate(chunks), kernel=kernel)


def _scores(psis: np.ndarray, db: EmbeddedDatabase) -> np.ndarray:
    """[Q, N] similarity of each query embedding against every database row."""
    cross = psis @ db.matrix.T
    if db.kernel == "dot":
        return cross
    sq_q = np.sum(psis * psis, axis=1, keepdims=True)
    sq_db = np.sum(db.matrix * db.matrix, axis=1)[None, :]
    return 2.0 * cross - sq_q - sq_db


def rank_embedding(psi: np.ndarray, db: EmbeddedDatabase) -> List[str]:
    """Database ids, best match first; exact ties fall back to ascending id."""
    scores = _scores(np.asarray(psi)[None, :], db)[0]
    order = sorted(range(len(db)), key=lambda i: (-scores[i], db.ids[i]))
    return [db.ids[i] for i in order]


def _compose(model: RetrievalModel, queries: Sequence[EvalQuery],
             batch_size: int = 200) -> np.ndarray:
    chunks = []
    for lo in range(0, len(queries), batch_size):
        part = queries[lo:lo + batch_size]
        images = np.stack([q.image for q in part])
        rows = [tokenize(_join_text(q.text), model.vocab) for q in part]
        chunks.append(model.compose_queries(images, rows).data)
    return np.concatenate(chunks)


def rank(query: Tuple[np.ndarray, QueryText], db: EmbeddedDatabase,
         model: RetrievalModel) -> List[str]:
    """Compose one (image, text) query and rank the whole database for it."""
    image, text = query
    psi = _compose(model, [EvalQuery(image=image, text=text, target_id="")])
    return rank_embedding(psi[0], db)


def target_ranks(psis: np.ndarray, db: EmbeddedDatabase,
                 target_ids: Sequence[str]) -> np.ndarray:
    """1-based rank of each query's target under the deterministic ordering."""
    row_of = {ident: i for i, ident in enumerate(db.ids)}
    for qi, target in enumerate(target_ids):
        if target not in row_of:
            raise ValueError(f"query {qi}: target {target!r} not in the database")
    psis = np.asarray(psis)
    scores = _scores(psis, db)
    ids_arr = np.asarray(db.ids)
    ranks = np.empty(len(target_ids), dtype=np.int64)
    for qi, target in enumerate(target_ids):
        row = row_of[target]
        s = scores[qi]
        st = s[row]
        ahead = int(np.sum(s > st)) + int(np.sum((s == st) & (ids_arr < target)))
        ranks[qi] = ahead + 1
    return ranks


def recall_from_embeddings(psis: np.ndarray, target_ids: Sequence[str],
                           db: EmbeddedDatabase, k: int) -> float:
    """100 * fraction of queries whose target ranks within the top k."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    ranks = target_ranks(psis, db, target_ids)
    return 100.0 * float(np.mean(ranks <= k))


def recall_at_k(queries: Sequence[EvalQuery], db: EmbeddedDatabase,
                model: RetrievalModel, k: int) -> float:
    """Compose every query, then score R@k against the database."""
    psis = _compose(model, queries)
    return recall_from_embeddings(psis, [q.target_id for q in queries], db, k)


def breakdown_by_modification(queries: Sequence[EvalQuery], db: EmbeddedDatabase,
                              model: RetrievalModel) -> Dict[str, float]:
    """R@1 per modification kind; kinds with no queries stay absent."""
    psis = _compose(model, queries)
    ranks = target_ranks(psis, db, [q.target_id for q in queries])
    hits: Dict[str, List[bool]] = {}
    for q, r in zip(queries, ranks):
        kind = q.kind if q.kind is not None else "unknown"
        hits.setdefault(kind, []).append(r == 1)
    return {kind: 100.0 * float(np.mean(flags)) for kind, flags in hits.items()}


def evaluate(queries: Sequence[EvalQuery], db: EmbeddedDatabase,
             model: RetrievalModel, ks: Sequence[int] = (1, 5, 10, 50),
             fingerprint: str = "") -> EvalReport:
    """One pass over the queries producing the full recall report."""
    if not queries:
        raise ValueError("need at least one query to evaluate")
    psis = _compose(model, queries)
    ranks = target_ranks(psis, db, [q.target_id for q in queries])
    recall = {int(k): 100.0 * float(np.mean(ranks <= k)) for k in ks}
    by_kind: Dict[str, List[bool]] = {}
    for q, r in zip(queries, ranks):
        kind = q.kind if q.kind is not None else "unknown"
        by_kind.setdefault(kind, []).append(r == 1)
    return EvalReport(
        recall=recall,
        by_kind={kind: 100.0 * float(np.mean(flags))
                 for kind, flags in by_kind.items()},
        query_count=len(queries),
        fingerprint=fingerprint)


# ---------------------------------------------------------------------------
# manifest plumbing
# ---------------------------------------------------------------------------


def build_eval_queries(manifest: DatasetManifest, canvas_px: Optional[int] = None
                       ) -> Tuple[List[EvalQuery], List[Tuple[str, np.ndarray]]]:
    """Render a split into (eval queries, database images).

    The database covers every scene in the split (query bases and targets
    alike), sorted by id so downstream orderings are reproducible.
    """
    px = canvas_px if canvas_px is not None else manifest.canvas_px
    images = [(s.scene_id, render_2d(s, px))
              for s in sorted(manifest.scenes, key=lambda s: s.scene_id)]
    rasters = dict(images)
    queries = [EvalQuery(image=rasters[q.base_scene_id], text=q.text,
                         target_id=q.target_scene_id, kind=q.kind)
               for q in manifest.queries]
    return queries, images
