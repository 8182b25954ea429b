"""Embedding extraction, cosine ranking and MIREX-style metrics (mAP, P@10, MR1)."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .model import MIN_FRAMES, ResNetIbnModel

EMB_MAGIC = b"EMB1"
EMB_VERSION = 1


class EmbeddingFormatError(ValueError):
    pass


@dataclass
class EmbeddingStore:
    ids: list[str]
    vectors: np.ndarray  # (n, d), unit rows

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float32)
        if self.vectors.ndim != 2 or self.vectors.shape[0] != len(self.ids):
            raise ValueError("need one vector per id")
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("embedding ids must be unique")
        norms = np.linalg.norm(self.vectors.astype(np.float64), axis=1)
        if norms.size and np.abs(norms - 1.0).max() > 1e-6:
            raise ValueError("embedding vectors must have unit norm")

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def vector(self, id_: str) -> np.ndarray:
        return self.vectors[self.ids.index(id_)]

    def subset(self, ids: Sequence[str]) -> "EmbeddingStore":
        pos = {k: i for i, k in enumerate(self.ids)}
        return EmbeddingStore(list(ids), self.vectors[[pos[k] for k in ids]])

    def save(self, path) -> None:
        parts = [EMB_MAGIC, struct.pack("<IIQ", EMB_VERSION, self.dim, len(self))]
        for id_, v in zip(self.ids, self.vectors):
            raw = id_.encode("utf-8")
            parts += [struct.pack("<I", len(raw)), raw, v.astype("<f4").tobytes()]
        Path(path).write_bytes(b"".join(parts))

    @classmethod
    def load(cls, path) -> "EmbeddingStore":
        raw = Path(path).read_bytes()
        if raw[:4] != EMB_MAGIC:
            raise EmbeddingFormatError(f"{path}: bad magic")
        try:
            version, dim, count = struct.unpack_from("<IIQ", raw, 4)
            if version != EMB_VERSION:
                raise EmbeddingFormatError(f"{path}: unsupported version {version}")
            pos, ids, vecs = 20, [], []
            for _ in range(count):
                (n,) = struct.unpack_from("<I", raw, pos)
                ids.append(raw[pos + 4 : pos + 4 + n].decode("utf-8"))
                pos += 4 + n
                vecs.append(np.frombuffer(raw, dtype="<f4", count=dim, offset=pos))
                pos += 4 * dim
        except (struct.error, ValueError) as e:
            if isinstance(e, EmbeddingFormatError):
                raise
            raise EmbeddingFormatError(f"{path}: truncated or corrupt ({e})") from e
        if pos != len(raw):
            raise EmbeddingFormatError(f"{path}: {len(raw) - pos} trailing bytes")
        return cls(ids, np.array(vecs).reshape(count, dim))


# --------------------------------------------------------------------------
# embedding


def _unit(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v)
    if n < 1e-12:
        raise ValueError("degenerate (zero) embedding")
    return v / n


def extract_embedding(model: ResNetIbnModel, cqt, use_projection: bool | None = None) -> np.ndarray:
    """Eval-mode f_c (or its projection) for one full-length (84, T) spectrogram, L2-normalized.

    Inputs shorter than 8 frames are zero-padded on the right to 8.
    """
    values = np.asarray(getattr(cqt, "values", cqt))
    if values.shape[1] < MIN_FRAMES:
        values = np.pad(values, ((0, 0), (0, MIN_FRAMES - values.shape[1])))
    if use_projection is None:
        use_projection = bool(model.config.embed_dim)
    out = model.forward(values[None, None], training=False)
    if use_projection:
        if out.projected is None:
            raise ValueError("model has no projection head")
        vec = out.projected.data[0]
    else:
        vec = out.f_c.data[0]
    return _unit(vec).astype(np.float32)


def embed_all(model: ResNetIbnModel, items: Sequence[tuple[str, np.ndarray]], use_projection=None) -> EmbeddingStore:
    ids = [i for i, _ in items]
    vecs = [extract_embedding(model, v, use_projection) for _, v in items]
    dim = model.config.output_dim if use_projection is not False else model.config.pooled_dim
    return EmbeddingStore(ids, np.array(vecs).reshape(len(ids), -1) if vecs else np.zeros((0, dim)))


# --------------------------------------------------------------------------
# ranking and metrics


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine similarity is undefined for zero vectors")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def similarity_matrix(queries: EmbeddingStore, refs: EmbeddingStore) -> np.ndarray:
    if queries.dim != refs.dim:
        raise ValueError(f"dimension mismatch: {queries.dim} vs {refs.dim}")
    return queries.vectors.astype(np.float64) @ refs.vectors.astype(np.float64).T


def rank_indices(sims: np.ndarray, query_ids: Sequence[str], ref_ids: Sequence[str], exclude_self: bool) -> list[np.ndarray]:
    """Per query, reference indices by descending similarity, ties by ascending id."""
    id_rank = np.empty(len(ref_ids), dtype=np.int64)
    id_rank[np.argsort(np.array(ref_ids, dtype=object), kind="stable")] = np.arange(len(ref_ids))
    pos = {k: i for i, k in enumerate(ref_ids)}
    out = []
    for qi, qid in enumerate(query_ids):
        order = np.lexsort((id_rank, -sims[qi]))
        if exclude_self and qid in pos:
            order = order[order != pos[qid]]
        out.append(order)
    return out


def rank_all(queries: EmbeddingStore, refs: EmbeddingStore, exclude_self: bool = False) -> dict[str, list[str]]:
    sims = similarity_matrix(queries, refs)
    ranked = rank_indices(sims, queries.ids, refs.ids, exclude_self)
    return {q: [refs.ids[j] for j in r] for q, r in zip(queries.ids, ranked)}


def average_precision(relevant: Sequence[bool]) -> float:
    """(1/R) * sum of precision@k over the ranks k holding a relevant item."""
    rel = np.asarray(relevant, dtype=bool)
    hits = np.flatnonzero(rel)
    if hits.size == 0:
        raise ValueError("average precision needs at least one relevant item")
    return float(np.mean(np.arange(1, hits.size + 1) / (hits + 1)))


@dataclass
class QueryResult:
    id: str
    ap: float
    first_hit_rank: int
    n_relevant: int


@dataclass
class EvalReport:
    map: float
    p_at_10: float
    mr1: float
    n_queries_scored: int
    per_query: list[QueryResult] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "map": self.map,
            "p_at_10": self.p_at_10,
            "mr1": self.mr1,
            "n_queries_scored": self.n_queries_scored,
            "per_query": [vars(q) for q in self.per_query],
        }

    def table(self) -> str:
        lines = [f"{'query':<24} {'AP':>7} {'rank1':>6} {'n_rel':>6}"]
        for q in self.per_query:
            lines.append(f"{q.id:<24} {q.ap:7.4f} {q.first_hit_rank:6d} {q.n_relevant:6d}")
        lines.append(
            f"mAP {self.map:.4f}  P@10 {self.p_at_10:.4f}  MR1 {self.mr1:.2f}  "
            f"({self.n_queries_scored} queries)"
        )
        return "\n".join(lines)


def evaluate_similarities(
    sims: np.ndarray,
    query_ids: Sequence[str],
    ref_ids: Sequence[str],
    labels: Mapping[str, str],
    exclude_self: bool = False,
) -> EvalReport:
    missing = [i for i in list(query_ids) + list(ref_ids) if i not in labels]
    if missing:
        raise KeyError(f"no clique label for ids: {missing[:5]}")
    ref_labels = np.array([labels[r] for r in ref_ids], dtype=object)
    per_query, p10 = [], []
    for qid, order in zip(query_ids, rank_indices(sims, query_ids, ref_ids, exclude_self)):
        rel = ref_labels[order] == labels[qid]
        if not rel.any():
            continue
        per_query.append(QueryResult(qid, average_precision(rel), int(np.argmax(rel)) + 1, int(rel.sum())))
        p10.append(rel[:10].sum() / 10.0)
    if not per_query:
        raise ValueError("no query has a relevant reference")
    return EvalReport(
        map=float(np.mean([q.ap for q in per_query])),
        p_at_10=float(np.mean(p10)),
        mr1=float(np.mean([q.first_hit_rank for q in per_query])),
        n_queries_scored=len(per_query),
        per_query=per_query,
    )


def evaluate(
    queries: EmbeddingStore,
    refs: EmbeddingStore,
    labels: Mapping[str, str],
    exclude_self: bool = False,
) -> EvalReport:
    return evaluate_similarities(similarity_matrix(queries, refs), queries.ids, refs.ids, labels, exclude_self)


def permutation_baseline(
    queries: EmbeddingStore,
    refs: EmbeddingStore,
    labels: Mapping[str, str],
    exclude_self: bool = False,
    n_permutations: int = 100,
    seed: int = 0,
) -> float:
    """Mean mAP after shuffling clique labels across ids."""
    rng = np.random.default_rng(seed)
    sims = similarity_matrix(queries, refs)
    keys = sorted(set(queries.ids) | set(refs.ids))
    values = [labels[k] for k in keys]
    maps = []
    for _ in range(n_permutations):
        shuffled = dict(zip(keys, rng.permutation(np.array(values, dtype=object))))
        try:
            maps.append(evaluate_similarities(sims, queries.ids, refs.ids, shuffled, exclude_self).map)
        except ValueError:
            continue
    return float(np.mean(maps))


# --------------------------------------------------------------------------
# transposition search


def transposition_search(model: ResNetIbnModel, query, reference, shift_range: int = 6) -> tuple[float, int]:
    """max over i in [-r, r] of cos(f(Q), f(R shifted by i bins)); returns (similarity, best i)."""
    from .synth import shift_cqt_bins

    q = extract_embedding(model, query)
    ref = np.asarray(getattr(reference, "values", reference))
    best, best_i = -np.inf, 0
    for i in sorted(range(-shift_range, shift_range + 1), key=abs):
        s = cosine_similarity(q, extract_embedding(model, shift_cqt_bins(ref, i)))
        if s > best:
            best, best_i = s, i
    return best, best_i


def transposed_max_similarity(model: ResNetIbnModel, query, reference, shift_range: int = 6) -> float:
    return transposition_search(model, query, reference, shift_range)[0]
