"""BM25 inverted index.

Scoring uses the Lucene/ElasticSearch form::

    idf(t)   = ln(1 + (N - df + 0.5) / (df + 0.5))
    score    = sum_t idf(t) * tf * (k1 + 1) / (tf + k1 * (1 - b + b * dl / avgdl))

A query term repeated ``n`` times contributes ``n`` times.

On-disk layout (all integers little-endian)::

    b"LIRI-BM25-v1"
    f64 k1, f64 b, u32 n_docs, f64 avgdl
    u8 flags (bit0 lowercase, bit1 strip_punctuation, bit2 stem)
    u32 n_stopwords, then n_stopwords strings (sorted)
    n_docs x (string passage_id, u32 doc_len)      # sorted by id
    u32 n_terms, then per term (sorted):
        string term, u32 n_postings, n_postings x (u32 doc_index, u32 tf)

A string is ``u32 byte_length`` followed by UTF-8 bytes.
"""

from __future__ import annotations

import math
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

from liri._io import Reader, atomic_write_bytes, pack_string
from liri.base import DataError, Passage, RankedResult
from liri.text import SPARSE_TOKENIZER, TokenizerConfig, tokenize

MAGIC = b"LIRI-BM25-v1"


@dataclass(frozen=True)
class Bm25Params:
    k1: float = 1.2
    b: float = 0.75

    def __post_init__(self):
        if not self.k1 >= 0:
            raise ValueError(f"k1 must be >= 0, got {self.k1}")
        if not 0.0 <= self.b <= 1.0:
            raise ValueError(f"b must be in [0, 1], got {self.b}")


@dataclass
class Bm25Index:
    postings: dict[str, list[tuple[str, int]]]
    doc_len: dict[str, int]
    avgdl: float
    n_docs: int
    params: Bm25Params = field(default_factory=Bm25Params)
    tokenizer: TokenizerConfig = SPARSE_TOKENIZER

    def __post_init__(self):
        self._norm = {
            pid: self.params.k1 * (1.0 - self.params.b + self.params.b * dl / self.avgdl)
            for pid, dl in self.doc_len.items()
        }
        self._tf = {term: dict(plist) for term, plist in self.postings.items()}

    def idf(self, term: str) -> float:
        df = len(self.postings.get(term, ()))
        return math.log(1.0 + (self.n_docs - df + 0.5) / (df + 0.5))

    def _term_weight(self, tf: int, pid: str) -> float:
        return tf * (self.params.k1 + 1.0) / (tf + self._norm[pid])


def build_bm25(
    passages: list[Passage],
    config: TokenizerConfig = SPARSE_TOKENIZER,
    params: Bm25Params | None = None,
) -> Bm25Index:
    params = params or Bm25Params()
    if not passages:
        raise DataError("empty corpus")
    doc_len: dict[str, int] = {}
    postings: dict[str, list[tuple[str, int]]] = {}
    for passage in sorted(passages, key=lambda p: p.id):
        if passage.id in doc_len:
            raise DataError(f"duplicate passage id: {passage.id}")
        tokens = tokenize(config, passage.text)
        doc_len[passage.id] = len(tokens)
        for term, tf in Counter(tokens).items():
            postings.setdefault(term, []).append((passage.id, tf))
    avgdl = sum(doc_len.values()) / len(doc_len)
    if avgdl == 0:
        raise DataError("corpus has no tokens after preprocessing")
    return Bm25Index(postings, doc_len, avgdl, len(doc_len), params, config)


def bm25_score(index: Bm25Index, query: list[str], passage_id: str) -> float:
    if passage_id not in index.doc_len:
        raise KeyError(f"unknown passage id: {passage_id}")
    score = 0.0
    for term, qtf in Counter(query).items():
        tf = index._tf.get(term, {}).get(passage_id)
        if tf:
            score += qtf * index.idf(term) * index._term_weight(tf, passage_id)
    return score


def bm25_score_all(index: Bm25Index, query_text: str) -> dict[str, float]:
    """Scores for every passage in the index, zeros included."""
    scores = dict.fromkeys(index.doc_len, 0.0)
    for term, qtf in Counter(tokenize(index.tokenizer, query_text)).items():
        plist = index.postings.get(term)
        if not plist:
            continue
        w = qtf * index.idf(term)
        for pid, tf in plist:
            scores[pid] += w * index._term_weight(tf, pid)
    return scores


def bm25_search(index: Bm25Index, query_text: str, k: int) -> RankedResult:
    if k < 1:
        raise ValueError("k must be >= 1")
    scores = bm25_score_all(index, query_text)
    return RankedResult.from_scores(((pid, s) for pid, s in scores.items() if s > 0.0), k)


def dumps_bm25(index: Bm25Index) -> bytes:
    cfg = index.tokenizer
    flags = int(cfg.lowercase) | int(cfg.strip_punctuation) << 1 | int(cfg.stem) << 2
    doc_ids = sorted(index.doc_len)
    doc_pos = {pid: i for i, pid in enumerate(doc_ids)}
    parts = [
        MAGIC,
        struct.pack("<ddId", index.params.k1, index.params.b, index.n_docs, index.avgdl),
        struct.pack("<BI", flags, len(cfg.stopwords)),
    ]
    parts.extend(pack_string(w) for w in sorted(cfg.stopwords))
    for pid in doc_ids:
        parts.append(pack_string(pid) + struct.pack("<I", index.doc_len[pid]))
    parts.append(struct.pack("<I", len(index.postings)))
    for term in sorted(index.postings):
        plist = sorted(index.postings[term], key=lambda e: doc_pos[e[0]])
        parts.append(pack_string(term) + struct.pack("<I", len(plist)))
        parts.append(b"".join(struct.pack("<II", doc_pos[pid], tf) for pid, tf in plist))
    return b"".join(parts)


def loads_bm25(data: bytes) -> Bm25Index:
    r = Reader(data)
    r.magic(MAGIC)
    k1, b, n_docs, avgdl = r.unpack("ddId")
    flags, n_stop = r.unpack("BI")
    stopwords = frozenset(r.string() for _ in range(n_stop))
    tokenizer = TokenizerConfig(bool(flags & 1), bool(flags & 2), stopwords, bool(flags & 4))
    doc_ids = []
    doc_len = {}
    for _ in range(n_docs):
        pid = r.string()
        (doc_len[pid],) = r.unpack("I")
        doc_ids.append(pid)
    (n_terms,) = r.unpack("I")
    postings = {}
    for _ in range(n_terms):
        term = r.string()
        (n_post,) = r.unpack("I")
        raw = r.take(8 * n_post)
        postings[term] = [(doc_ids[i], tf) for i, tf in struct.iter_unpack("<II", raw)]
    r.finish()
    return Bm25Index(postings, doc_len, avgdl, n_docs, Bm25Params(k1, b), tokenizer)


def save_bm25(index: Bm25Index, path: str | Path) -> None:
    atomic_write_bytes(path, dumps_bm25(index))


def load_bm25(path: str | Path) -> Bm25Index:
    return loads_bm25(Path(path).read_bytes())
