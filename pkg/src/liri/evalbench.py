"""Match@k metrics, score ensembling, the k-examples-per-doc protocol and latency benchmarks."""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Protocol

import numpy as np

from liri.base import DataError, Query, RankedResult
from liri.data import Dataset
from liri.dense import TokenVectorIndex, build_token_index, dense_score_all, dense_search, dumps_index
from liri.encoder import EncoderConfig, EncoderParams, dumps_checkpoint, init_params
from liri.sparse import Bm25Index, bm25_score_all, bm25_search, build_bm25, dumps_bm25


def match_at_k(rankings: dict[str, RankedResult], qrels: dict[str, str], k: int) -> float:
    """Fraction of queries whose gold passage is ranked within the top ``k``."""
    if not qrels:
        return 0.0
    hits = 0
    for qid, gold in qrels.items():
        if qid not in rankings:
            raise DataError(f"no ranking for query {qid}")
        if gold in rankings[qid].ids[:k]:
            hits += 1
    return hits / len(qrels)


# --- ensembling --------------------------------------------------------------


@dataclass(frozen=True)
class EnsembleWeights:
    w_a: float
    w_b: float

    def __post_init__(self):
        if not (self.w_a >= 0 and self.w_b >= 0):
            raise ValueError(f"weights must be >= 0, got {self.w_a}:{self.w_b}")
        if self.w_a == 0 and self.w_b == 0:
            raise ValueError("weights must not both be zero")
        if not (math.isfinite(self.w_a) and math.isfinite(self.w_b)):
            raise ValueError("weights must be finite")

    @classmethod
    def parse(cls, text: str) -> "EnsembleWeights":
        """Parse ``"A:B"``, e.g. ``"0.3:1"``."""
        parts = text.split(":")
        if len(parts) != 2:
            raise ValueError(f"expected weights as A:B, got {text!r}")
        try:
            return cls(float(parts[0]), float(parts[1]))
        except ValueError as exc:
            raise ValueError(f"bad weights {text!r}: {exc}") from None

    def scaled(self, factor: float) -> "EnsembleWeights":
        return EnsembleWeights(self.w_a * factor, self.w_b * factor)

    def __str__(self) -> str:
        return f"{self.w_a:g}:{self.w_b:g}"


DEFAULT_WEIGHTS = EnsembleWeights(0.3, 1.0)


def ensemble_scores(a: dict[str, float], b: dict[str, float], w: EnsembleWeights) -> RankedResult:
    """Rank by ``w_a * a(p) + w_b * b(p)``; a zero weight drops its term entirely."""
    if a.keys() != b.keys():
        diff = sorted(a.keys() ^ b.keys())
        raise DataError(f"score maps cover different passages; symmetric difference: {diff}")
    combined = {}
    for pid, sa in a.items():
        s = 0.0
        if w.w_a:
            s += w.w_a * sa
        if w.w_b:
            s += w.w_b * b[pid]
        combined[pid] = s
    return RankedResult.from_scores(combined.items())


# --- systems -------------------------------------------------------------------


class Retriever(Protocol):
    name: str

    def search(self, text: str, k: int) -> RankedResult: ...

    def score_all(self, text: str) -> dict[str, float]: ...

    def index_bytes(self) -> int: ...


@dataclass
class Bm25System:
    index: Bm25Index
    name: str = "bm25"

    def search(self, text: str, k: int) -> RankedResult:
        return bm25_search(self.index, text, k)

    def score_all(self, text: str) -> dict[str, float]:
        return bm25_score_all(self.index, text)

    def index_bytes(self) -> int:
        return len(dumps_bm25(self.index))


@dataclass
class DenseSystem:
    """Late-interaction (or single-vector) retrieval over a token index.

    ``index_bytes`` counts the token index plus the checkpoint, since both
    are needed to answer a query.
    """

    index: TokenVectorIndex
    params: EncoderParams
    k_tok: int = 8
    nprobe: int = 4
    mode: str = "late_interaction"
    name: str = "dense"

    def search(self, text: str, k: int) -> RankedResult:
        return dense_search(self.index, self.params, text, k, self.k_tok, self.nprobe, self.mode)

    def score_all(self, text: str) -> dict[str, float]:
        return dense_score_all(self.index, self.params, text)

    def index_bytes(self) -> int:
        return len(dumps_index(self.index)) + len(dumps_checkpoint(self.params))


@dataclass
class EnsembleSystem:
    a: Retriever
    b: Retriever
    weights: EnsembleWeights = DEFAULT_WEIGHTS
    name: str = "ensemble"

    def search(self, text: str, k: int) -> RankedResult:
        ranked = ensemble_scores(self.a.score_all(text), self.b.score_all(text), self.weights)
        return RankedResult(ranked.items[:k])

    def score_all(self, text: str) -> dict[str, float]:
        return dict(ensemble_scores(self.a.score_all(text), self.b.score_all(text), self.weights).items)

    def index_bytes(self) -> int:
        return self.a.index_bytes() + self.b.index_bytes()


SystemFactory = Callable[[Dataset, int], Retriever]
"""Builds a system from a dataset whose train split was already sampled, and a seed."""


def bm25_factory() -> SystemFactory:
    def make(dataset: Dataset, seed: int) -> Retriever:
        return Bm25System(build_bm25(dataset.passages))

    return make


def dense_factory(enc=None, cfg=None, strategy: str = "iterative", k_tok: int = 8, nprobe: int = 4) -> SystemFactory:
    """Train an encoder with ``strategy`` (no training when the train split is empty)."""
    from liri.learn import TrainConfig, train  # learn imports this module

    enc = enc or EncoderConfig()
    cfg = cfg or TrainConfig()

    def make(dataset: Dataset, seed: int) -> Retriever:
        run_cfg = replace(cfg, seed=seed)
        if dataset.train_queries:
            params, _ = train(strategy, dataset, enc, run_cfg)
        else:
            params = init_params(enc, seed)
        index = build_token_index(params, dataset.passages, run_cfg.ivf_clusters, seed)
        return DenseSystem(index, params, k_tok, nprobe)

    return make


def ensemble_factory(fa: SystemFactory, fb: SystemFactory, weights: EnsembleWeights = DEFAULT_WEIGHTS) -> SystemFactory:
    def make(dataset: Dataset, seed: int) -> Retriever:
        return EnsembleSystem(fa(dataset, seed), fb(dataset, seed), weights)

    return make


# --- protocol ------------------------------------------------------------------


@dataclass(frozen=True)
class LatencyStats:
    mean_ms: float
    p50_ms: float
    p95_ms: float
    n: int


@dataclass(frozen=True)
class SeedResult:
    seed: int
    match1: float
    match3: float


def _mean_std(values: list[float]) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    std = float(arr.std(ddof=1)) if len(arr) > 1 else 0.0
    return float(arr.mean()), std


@dataclass
class EvalReport:
    system: str
    k_ex_per_doc: int
    per_seed: list[SeedResult] = field(default_factory=list)
    latency: LatencyStats | None = None
    index_bytes: int | None = None

    @property
    def match1(self) -> float:
        return _mean_std([r.match1 for r in self.per_seed])[0]

    @property
    def match3(self) -> float:
        return _mean_std([r.match3 for r in self.per_seed])[0]

    @property
    def match1_std(self) -> float:
        return _mean_std([r.match1 for r in self.per_seed])[1]

    @property
    def match3_std(self) -> float:
        return _mean_std([r.match3 for r in self.per_seed])[1]

    def to_text(self) -> str:
        """One JSON record per seed, then one aggregate record."""
        lines = [
            json.dumps({"type": "seed", "system": self.system, "k_ex_per_doc": self.k_ex_per_doc, "seed": r.seed, "match1": r.match1, "match3": r.match3})
            for r in self.per_seed
        ]
        agg = {
            "type": "aggregate",
            "system": self.system,
            "k_ex_per_doc": self.k_ex_per_doc,
            "n_seeds": len(self.per_seed),
            "match1": self.match1,
            "match1_std": self.match1_std,
            "match3": self.match3,
            "match3_std": self.match3_std,
            "latency_ms": None if self.latency is None else {"mean": self.latency.mean_ms, "p50": self.latency.p50_ms, "p95": self.latency.p95_ms, "n": self.latency.n},
            "index_bytes": self.index_bytes,
        }
        lines.append(json.dumps(agg))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "EvalReport":
        report = None
        seeds = []
        for line in text.splitlines():
            if not line.strip():
                continue
            rec = json.loads(line)
            if rec["type"] == "seed":
                seeds.append(SeedResult(rec["seed"], rec["match1"], rec["match3"]))
            elif rec["type"] == "aggregate":
                lat = rec.get("latency_ms")
                report = cls(
                    rec["system"],
                    rec["k_ex_per_doc"],
                    latency=None if lat is None else LatencyStats(lat["mean"], lat["p50"], lat["p95"], lat["n"]),
                    index_bytes=rec.get("index_bytes"),
                )
        if report is None:
            raise DataError("report has no aggregate record")
        report.per_seed = seeds
        return report

    def cell(self) -> str:
        """Match@1 as ``mean(std)`` in percent, the shape of a results-table cell."""
        if self.k_ex_per_doc == 0:
            return f"{100 * self.match1:.1f}"
        return f"{100 * self.match1:.1f}({100 * self.match1_std:.1f})"


TSV_HEADER = "system\t0-shot\t1 ex/doc\t3 ex/doc"


def tsv_row(system: str, reports: dict[int, EvalReport]) -> str:
    """``system, 0-shot, 1 ex/doc mean(std), 3 ex/doc mean(std)``; missing cells are ``-``."""
    return "\t".join([system] + [reports[k].cell() if k in reports else "-" for k in (0, 1, 3)])


def sample_train_queries(dataset: Dataset, k: int, rng: np.random.Generator) -> list[Query]:
    """``k`` training queries per passage, without replacement."""
    by_gold: dict[str, list[Query]] = {pid: [] for pid in dataset.passage_ids}
    for q in dataset.train_queries:
        by_gold[q.gold].append(q)
    out = []
    for pid in dataset.passage_ids:
        pool = by_gold[pid]
        if len(pool) < k:
            raise DataError(f"passage {pid} has {len(pool)} training queries, {k} requested")
        out.extend(pool[i] for i in sorted(rng.choice(len(pool), size=k, replace=False)))
    return out


def evaluate(system: Retriever, queries: list[Query], k: int = 3) -> tuple[float, float]:
    """(Match@1, Match@3) of ``system`` on ``queries``."""
    rankings = {q.id: system.search(q.text, k) for q in queries}
    qrels = {q.id: q.gold for q in queries}
    return match_at_k(rankings, qrels, 1), match_at_k(rankings, qrels, 3)


def run_protocol(
    dataset: Dataset,
    k_ex_per_doc: int,
    system_factory: SystemFactory,
    n_seeds: int = 10,
    *,
    seeds: list[int] | None = None,
    system_name: str = "system",
    latency_reps: int = 0,
) -> EvalReport:
    """Sample ``k_ex_per_doc`` training queries per passage, build, evaluate; once per seed.

    ``k_ex_per_doc == 0`` is zero-shot: no sampling and no training.
    With ``latency_reps > 0`` the first seed's system is also benchmarked
    on the test queries.
    """
    if k_ex_per_doc < 0:
        raise ValueError("k_ex_per_doc must be >= 0")
    seeds = list(range(n_seeds)) if seeds is None else list(seeds)
    if not seeds:
        raise ValueError("need at least one seed")
    if not dataset.test_queries:
        raise DataError("dataset has no test queries")
    report = EvalReport(system_name, k_ex_per_doc)
    for i, seed in enumerate(seeds):
        if k_ex_per_doc == 0:
            train_split = []
        else:
            train_split = sample_train_queries(dataset, k_ex_per_doc, np.random.default_rng(seed))
        system = system_factory(dataset.with_train(train_split), seed)
        m1, m3 = evaluate(system, dataset.test_queries)
        report.per_seed.append(SeedResult(seed, m1, m3))
        if i == 0:
            report.index_bytes = system.index_bytes()
            if latency_reps > 0:
                report.latency = benchmark_latency(system, [q.text for q in dataset.test_queries], warmup=1, reps=latency_reps).latency
    return report


# --- latency -------------------------------------------------------------------


@dataclass(frozen=True)
class BenchmarkResult:
    system: str
    latency: LatencyStats
    index_bytes: int


def latency_stats(samples_s: list[float]) -> LatencyStats:
    ms = np.asarray(samples_s, dtype=np.float64) * 1000.0
    return LatencyStats(float(ms.mean()), float(np.percentile(ms, 50)), float(np.percentile(ms, 95)), len(ms))


def benchmark_latency(system: Retriever, queries: list[str], warmup: int = 1, reps: int = 5, k: int = 10) -> BenchmarkResult:
    """Per-query end-to-end search time, preprocessing included, on a warm index.

    ``warmup`` full passes over ``queries`` are discarded, then ``reps``
    passes are timed one query at a time with a monotonic clock.
    """
    if reps < 1:
        raise ValueError("reps must be >= 1")
    if not queries:
        raise ValueError("need at least one query")
    for _ in range(warmup):
        for text in queries:
            system.search(text, k)
    samples = []
    for _ in range(reps):
        for text in queries:
            t0 = time.perf_counter()
            system.search(text, k)
            samples.append(time.perf_counter() - t0)
    return BenchmarkResult(system.name, latency_stats(samples), system.index_bytes())
