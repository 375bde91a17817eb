"""Late-interaction and single-vector retrieval over a token-level index.

Late interaction scores a passage by SumMaxSim: every query token vector
takes its best similarity against the passage's token vectors and the
maxima are summed. Retrieval fetches candidate passages through the
token index (an optional IVF layer over k-means centroids) and reranks
them exactly. Without IVF the index is in exact mode and every passage
is reranked, which makes it the brute-force reference.

Index file layout (little-endian)::

    b"LIRI-TVIX-v1"
    u64 built_from_version, u32 dim, u32 n_passages, u32 n_entries,
    u8 similarity (0 neg_l2, 1 dot), u8 has_ivf, u32 ivf_clusters (0 = exact), i64 seed
    u8 tokenizer flags, u32 n_stopwords, n_stopwords strings
    n_passages strings                                  # passage ids
    (n_passages + 1) x u64 entry offsets                # entries of passage i are [off[i], off[i+1])
    n_entries x dim float32 vectors, n_entries x u64 bucket ids
    if has_ivf: u32 n_centroids, n_centroids x dim float64, n_entries x u32 assignments
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from liri import kernels
from liri._io import Reader, atomic_write_bytes, pack_string
from liri.base import DataError, Passage, RankedResult, StaleIndexError
from liri.encoder import SIMILARITIES, EncoderParams, TokenMatrix, bucket_ids
from liri.text import DENSE_TOKENIZER, TokenizerConfig, tokenize

MAGIC = b"LIRI-TVIX-v1"
KMEANS_MAX_ITER = 25
KMEANS_TOL = 1e-6


def sim(u, v, mode: str = "neg_l2") -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise ValueError(f"dimension mismatch: {u.shape} vs {v.shape}")
    if mode == "neg_l2":
        d = u - v
        return -float(d @ d)
    if mode == "dot":
        return float(u @ v)
    raise ValueError(f"unknown similarity mode {mode!r}")


def single_vector_score(qv, pv) -> float:
    return sim(qv, pv, "dot")


def _rows(m) -> np.ndarray:
    rows = m.rows if isinstance(m, TokenMatrix) else np.asarray(m)
    if rows.ndim != 2:
        rows = rows.reshape(-1, rows.shape[-1] if rows.size else 0)
    return rows


def summaxsim(q, p, mode: str = "neg_l2") -> float:
    """Sum over query rows of the best similarity to any passage row."""
    q_rows, p_rows = _rows(q), _rows(p)
    if len(p_rows) == 0:
        raise ValueError("empty passage")
    if len(q_rows) and q_rows.shape[1] != p_rows.shape[1]:
        raise ValueError(f"dimension mismatch: {q_rows.shape[1]} vs {p_rows.shape[1]}")
    dtype = np.result_type(q_rows.dtype, p_rows.dtype, np.float32)
    q_rows = np.ascontiguousarray(q_rows, dtype=dtype)
    p_rows = np.ascontiguousarray(p_rows, dtype=dtype)
    offsets = np.array([0, len(p_rows)], dtype=np.int64)
    cand = np.zeros(1, dtype=np.int64)
    if len(q_rows) == 0:
        return 0.0
    return float(kernels.maxsim_scores(q_rows, p_rows, offsets, cand, kernels.SIM_MODES[mode])[0])


def token_sims(q_rows: np.ndarray, entries: np.ndarray, mode: str) -> np.ndarray:
    """Query-row by entry similarity matrix.

    Each cell is reduced independently along the vector axis, so a cell's
    value does not depend on which other entries are in ``entries``.
    """
    q = np.asarray(q_rows, dtype=np.float64)
    e = np.asarray(entries, dtype=np.float64)
    out = np.empty((len(q), len(e)))
    for i, row in enumerate(q):
        if mode == "neg_l2":
            d = e - row
            out[i] = -(d * d).sum(axis=1)
        else:
            out[i] = (e * row).sum(axis=1)
    return out


@dataclass
class IvfState:
    centroids: np.ndarray
    assignments: np.ndarray

    def __post_init__(self):
        order = np.argsort(self.assignments, kind="stable")
        bounds = np.searchsorted(self.assignments[order], np.arange(len(self.centroids) + 1))
        self.lists = [order[bounds[c] : bounds[c + 1]] for c in range(len(self.centroids))]


def kmeans(x: np.ndarray, k: int, seed: int = 0, max_iter: int = KMEANS_MAX_ITER, tol: float = KMEANS_TOL):
    """Lloyd's k-means under squared L2.

    Initial centroids are ``k`` distinct entries drawn by the seeded
    generator. A cluster that goes empty is reseeded with the entry
    farthest from its current centroid. Stops after ``max_iter`` rounds or
    when no centroid moves more than ``tol``. Returns (centroids, assignments).
    """
    x = np.asarray(x, dtype=np.float64)
    n = len(x)
    if not 1 <= k <= n:
        raise ValueError(f"cannot fit {k} clusters to {n} vectors")
    rng = np.random.default_rng(seed)
    centroids = x[rng.choice(n, size=k, replace=False)].copy()
    x_sq = (x * x).sum(axis=1)

    def assign(c):
        d = x_sq[:, None] - 2.0 * x @ c.T + (c * c).sum(axis=1)[None, :]
        a = d.argmin(axis=1)
        return a, d[np.arange(n), a]

    for _ in range(max_iter):
        labels, dist = assign(centroids)
        counts = np.bincount(labels, minlength=k)
        sums = np.zeros_like(centroids)
        np.add.at(sums, labels, x)
        new = centroids.copy()
        filled = counts > 0
        new[filled] = sums[filled] / counts[filled, None]
        taken = set()
        for c in np.flatnonzero(~filled):
            far = np.argsort(-dist, kind="stable")
            pick = next(i for i in far if i not in taken)
            taken.add(pick)
            new[c] = x[pick]
        shift = np.sqrt(((new - centroids) ** 2).sum(axis=1)).max()
        centroids = new
        if shift < tol:
            break
    labels, _ = assign(centroids)
    return centroids, labels


@dataclass(eq=False)
class TokenVectorIndex:
    built_from_version: int
    similarity: str
    passage_ids: list[str]
    offsets: np.ndarray  # int64, len n_passages + 1
    vectors: np.ndarray  # float32, (n_entries, dim)
    bucket_ids: np.ndarray  # int64, (n_entries,)
    ivf: IvfState | None = None
    ivf_clusters: int | None = None
    seed: int = 0
    tokenizer: TokenizerConfig = DENSE_TOKENIZER
    _pooled: np.ndarray | None = field(default=None, repr=False)

    @property
    def n_entries(self) -> int:
        return len(self.bucket_ids)

    @property
    def entry_passage(self) -> np.ndarray:
        return np.repeat(np.arange(len(self.passage_ids)), np.diff(self.offsets))

    @property
    def entry_offset(self) -> np.ndarray:
        return np.arange(self.n_entries) - np.repeat(self.offsets[:-1], np.diff(self.offsets))

    @property
    def passage_matrices(self) -> dict[str, TokenMatrix]:
        return {
            pid: TokenMatrix(self.vectors[s:e], self.bucket_ids[s:e])
            for pid, s, e in zip(self.passage_ids, self.offsets[:-1], self.offsets[1:])
        }

    def nonempty(self) -> np.ndarray:
        return np.flatnonzero(np.diff(self.offsets) > 0)

    def pooled(self) -> np.ndarray:
        """Mean token vector per passage (NaN rows for empty passages)."""
        if self._pooled is None:
            sums = np.zeros((len(self.passage_ids), self.vectors.shape[1]))
            np.add.at(sums, self.entry_passage, self.vectors.astype(np.float64))
            counts = np.diff(self.offsets).astype(np.float64)
            with np.errstate(invalid="ignore", divide="ignore"):
                pooled = sums / counts[:, None]
            pooled[counts == 0] = np.nan
            self._pooled = pooled
        return self._pooled


def _resolve_clusters(ivf_clusters, n_entries: int) -> int | None:
    if ivf_clusters is None:
        return None
    if ivf_clusters == "auto":
        return max(1, round(math.sqrt(n_entries)))
    return int(ivf_clusters)


def build_token_index(
    params: EncoderParams,
    passages: list[Passage],
    ivf_clusters: int | str | None = None,
    seed: int = 0,
    tokenizer: TokenizerConfig = DENSE_TOKENIZER,
) -> TokenVectorIndex:
    """Encode every passage and index its token vectors.

    ``ivf_clusters`` may be an int, ``"auto"`` (the rounded square root of
    the token count) or None for an exact index.
    """
    if not passages:
        raise DataError("no passages to index")
    seen = set()
    ids_per_passage = []
    for p in passages:
        if p.id in seen:
            raise DataError(f"duplicate passage id: {p.id}")
        seen.add(p.id)
        ids_per_passage.append(bucket_ids(params.config, tokenize(tokenizer, p.text), "doc"))
    lengths = np.array([len(ids) for ids in ids_per_passage], dtype=np.int64)
    if lengths.sum() == 0:
        raise DataError("no passage has any token")
    offsets = np.concatenate([[0], np.cumsum(lengths)]).astype(np.int64)
    all_ids = np.concatenate(ids_per_passage).astype(np.int64)
    vectors = np.ascontiguousarray(params.table[all_ids])
    requested = ivf_clusters
    n_clusters = _resolve_clusters(ivf_clusters, len(all_ids))
    ivf = None
    if n_clusters is not None:
        if n_clusters > len(all_ids):
            raise ValueError(f"ivf_clusters={n_clusters} exceeds token count {len(all_ids)}")
        centroids, labels = kmeans(vectors, n_clusters, seed)
        ivf = IvfState(centroids, labels.astype(np.int64))
    return TokenVectorIndex(
        built_from_version=params.version,
        similarity=params.config.similarity,
        passage_ids=[p.id for p in passages],
        offsets=offsets,
        vectors=vectors,
        bucket_ids=all_ids,
        ivf=ivf,
        ivf_clusters=requested if requested != "auto" else n_clusters,
        seed=seed,
        tokenizer=tokenizer,
    )


def refresh_index(params: EncoderParams, passages: list[Passage], prev: TokenVectorIndex) -> TokenVectorIndex:
    """Rebuild ``prev`` from new parameters, keeping its IVF settings."""
    return build_token_index(params, passages, prev.ivf_clusters, prev.seed, prev.tokenizer)


def _nearest_entries(index: TokenVectorIndex, q_rows: np.ndarray, k_tok: int, nprobe: int) -> np.ndarray:
    hits = []
    for row in np.asarray(q_rows, dtype=np.float64):
        if index.ivf is None:
            pool = np.arange(index.n_entries)
        else:
            csims = token_sims(row[None, :], index.ivf.centroids, index.similarity)[0]
            probe = np.argsort(-csims, kind="stable")[:nprobe]
            pool = np.sort(np.concatenate([index.ivf.lists[c] for c in probe]))
        if len(pool) == 0:
            continue
        sims = token_sims(row[None, :], index.vectors[pool], index.similarity)[0]
        hits.append(pool[np.argsort(-sims, kind="stable")[:k_tok]])
    return np.concatenate(hits) if hits else np.zeros(0, dtype=np.int64)


def score_matrix(index: TokenVectorIndex, queries: list[np.ndarray], chunk_rows: int = 4096) -> np.ndarray:
    """Exact SumMaxSim of many queries against every passage, batched.

    Returns an ``(n_queries, n_passages)`` float64 array; empty passages
    score -inf and empty queries 0. Similarities come from one matrix
    product, so values agree with :func:`summaxsim` up to float rounding
    rather than bit for bit. Used for training-time ranking, where all
    training queries are scored against the whole corpus at once.

    For neg_l2 the product is taken against ``[2p, -|p|^2]`` with query
    rows ``[q, 1]``; ``|q|^2`` is constant per row and is subtracted after
    the max.
    """
    n_p = len(index.passage_ids)
    out = np.zeros((len(queries), n_p))
    out[:, np.diff(index.offsets) == 0] = -np.inf
    nonempty = index.nonempty()
    if len(nonempty) == 0 or not queries:
        return out
    neg_l2 = index.similarity == "neg_l2"
    entries = index.vectors.astype(np.float64)
    dim = entries.shape[1]
    if neg_l2:
        entries = np.hstack([2.0 * entries, -np.einsum("ij,ij->i", entries, entries)[:, None]])
    entries_t = np.ascontiguousarray(entries.T)
    starts = index.offsets[nonempty]
    lengths = np.array([len(q) for q in queries])
    q_off = np.concatenate([[0], np.cumsum(lengths)])
    i = 0
    while i < len(queries):
        # Take whole queries until the chunk holds about chunk_rows rows.
        j = max(int(np.searchsorted(q_off, q_off[i] + chunk_rows, side="right")) - 1, i + 1)
        block = np.concatenate([np.asarray(q, dtype=np.float64).reshape(-1, dim) for q in queries[i:j]])
        if len(block):
            if neg_l2:
                block = np.hstack([block, np.ones((len(block), 1))])
            best = np.maximum.reduceat(block @ entries_t, starts, axis=1)
            if neg_l2:
                best -= np.einsum("ij,ij->i", block[:, :dim], block[:, :dim])[:, None]
            has_rows = lengths[i:j] > 0
            sums = np.add.reduceat(best, (q_off[i:j] - q_off[i])[has_rows], axis=0)
            out[np.arange(i, j)[has_rows][:, None], nonempty[None, :]] = sums
        i = j
    return out


def ann_candidates(index: TokenVectorIndex, q: TokenMatrix, k_tok: int = 8, nprobe: int = 4) -> set[str]:
    """Passages owning any of the ``k_tok`` nearest entries of some query row."""
    if k_tok < 1:
        raise ValueError("k_tok must be >= 1")
    if index.ivf is not None and nprobe < 1:
        raise ValueError("nprobe must be >= 1")
    rows = _rows(q)
    if index.n_entries == 0 or len(rows) == 0:
        return set()
    entries = _nearest_entries(index, rows, k_tok, nprobe)
    owners = np.unique(index.entry_passage[entries])
    return {index.passage_ids[i] for i in owners}


def check_version(index: TokenVectorIndex, params: EncoderParams) -> None:
    if index.built_from_version != params.version:
        raise StaleIndexError(
            f"stale index: built from checkpoint {index.built_from_version}, "
            f"searching with checkpoint {params.version}; refresh the index"
        )


def search_encoded(
    index: TokenVectorIndex,
    q: TokenMatrix,
    k: int,
    k_tok: int = 8,
    nprobe: int = 4,
    mode: str = "late_interaction",
) -> RankedResult:
    """Rank passages for an already encoded query."""
    if k < 1:
        raise ValueError("k must be >= 1")
    rows = np.ascontiguousarray(_rows(q), dtype=index.vectors.dtype)
    if mode == "single_vector":
        if len(rows) == 0:
            raise ValueError("cannot pool empty sequence")
        qv = rows.astype(np.float64).mean(axis=0)
        pooled = index.pooled()
        cand = index.nonempty()
        scores = pooled[cand] @ qv
    elif mode == "late_interaction":
        if index.ivf is None:
            cand = index.nonempty()
        else:
            entries = _nearest_entries(index, rows, k_tok, nprobe) if len(rows) else np.zeros(0, np.int64)
            cand = np.unique(index.entry_passage[entries]).astype(np.int64)
        scores = kernels.maxsim_scores(rows, index.vectors, index.offsets, cand, kernels.SIM_MODES[index.similarity])
    else:
        raise ValueError(f"unknown search mode {mode!r}")
    return RankedResult.from_scores(((index.passage_ids[c], s) for c, s in zip(cand, scores)), k)


def dense_search(
    index: TokenVectorIndex,
    params: EncoderParams,
    query_text: str,
    k: int,
    k_tok: int = 8,
    nprobe: int = 4,
    mode: str = "late_interaction",
) -> RankedResult:
    check_version(index, params)
    ids = bucket_ids(params.config, tokenize(index.tokenizer, query_text), "query")
    return search_encoded(index, TokenMatrix(params.table[ids], ids), k, k_tok, nprobe, mode)


def dense_score_all(index: TokenVectorIndex, params: EncoderParams, query_text: str) -> dict[str, float]:
    """Exact SumMaxSim for every passage; empty passages score -inf."""
    check_version(index, params)
    ids = bucket_ids(params.config, tokenize(index.tokenizer, query_text), "query")
    rows = np.ascontiguousarray(params.table[ids], dtype=index.vectors.dtype)
    cand = np.arange(len(index.passage_ids), dtype=np.int64)
    scores = kernels.maxsim_scores(rows, index.vectors, index.offsets, cand, kernels.SIM_MODES[index.similarity])
    return {pid: float(s) for pid, s in zip(index.passage_ids, scores)}


def _pack_tokenizer(cfg: TokenizerConfig) -> bytes:
    flags = int(cfg.lowercase) | int(cfg.strip_punctuation) << 1 | int(cfg.stem) << 2
    return struct.pack("<BI", flags, len(cfg.stopwords)) + b"".join(pack_string(w) for w in sorted(cfg.stopwords))


def dumps_index(index: TokenVectorIndex) -> bytes:
    dim = index.vectors.shape[1]
    parts = [
        MAGIC,
        struct.pack(
            "<QIIIBBIq",
            index.built_from_version,
            dim,
            len(index.passage_ids),
            index.n_entries,
            SIMILARITIES.index(index.similarity),
            int(index.ivf is not None),
            index.ivf_clusters or 0,
            index.seed,
        ),
        _pack_tokenizer(index.tokenizer),
    ]
    parts.extend(pack_string(pid) for pid in index.passage_ids)
    parts.append(index.offsets.astype("<u8").tobytes())
    parts.append(np.ascontiguousarray(index.vectors, dtype="<f4").tobytes())
    parts.append(index.bucket_ids.astype("<u8").tobytes())
    if index.ivf is not None:
        parts.append(struct.pack("<I", len(index.ivf.centroids)))
        parts.append(np.ascontiguousarray(index.ivf.centroids, dtype="<f8").tobytes())
        parts.append(index.ivf.assignments.astype("<u4").tobytes())
    return b"".join(parts)


def loads_index(data: bytes) -> TokenVectorIndex:
    r = Reader(data)
    r.magic(MAGIC)
    version, dim, n_pass, n_ent, sim_tag, has_ivf, clusters, seed = r.unpack("QIIIBBIq")
    flags, n_stop = r.unpack("BI")
    stop = frozenset(r.string() for _ in range(n_stop))
    tokenizer = TokenizerConfig(bool(flags & 1), bool(flags & 2), stop, bool(flags & 4))
    pids = [r.string() for _ in range(n_pass)]
    offsets = np.frombuffer(r.take(8 * (n_pass + 1)), dtype="<u8").astype(np.int64)
    vectors = np.frombuffer(r.take(4 * n_ent * dim), dtype="<f4").astype(np.float32).reshape(n_ent, dim)
    bids = np.frombuffer(r.take(8 * n_ent), dtype="<u8").astype(np.int64)
    ivf = None
    if has_ivf:
        (n_c,) = r.unpack("I")
        centroids = np.frombuffer(r.take(8 * n_c * dim), dtype="<f8").astype(np.float64).reshape(n_c, dim)
        assignments = np.frombuffer(r.take(4 * n_ent), dtype="<u4").astype(np.int64)
        ivf = IvfState(centroids, assignments)
    r.finish()
    return TokenVectorIndex(
        version, SIMILARITIES[sim_tag], pids, offsets, vectors, bids, ivf, clusters or None, seed, tokenizer
    )


def save_index(index: TokenVectorIndex, path: str | Path) -> None:
    atomic_write_bytes(path, dumps_index(index))


def load_index(path: str | Path) -> TokenVectorIndex:
    return loads_index(Path(path).read_bytes())
