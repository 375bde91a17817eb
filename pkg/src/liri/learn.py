"""Training the encoder from ⟨query, positive, negative⟩ triples.

The objective is the pairwise softmax cross-entropy
``ln(1 + exp(s_neg - s_pos))`` over SumMaxSim scores. Strategies differ in
where negatives come from:

* ``allneg``: every non-gold passage, one pass.
* ``bm25guided``: passages BM25 ranks above the gold, one pass.
* ``iterative``: passages the previous checkpoint ranks above the gold,
  re-curated after every round until the training queries are answered.
* ``async``: as iterative, but the sampler and trainer run concurrently
  and the trainer keeps training on its current batch until a fresher
  one arrives.
"""

from __future__ import annotations

import json
import logging
import threading
import time
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from liri import kernels
from liri.base import DataError, OrchestrationError, Passage, Query, RankedResult
from liri.data import Dataset
from liri.dense import TokenVectorIndex, build_token_index, refresh_index, score_matrix, search_encoded
from liri.encoder import EncoderConfig, EncoderParams, TokenMatrix, bucket_ids, init_params
from liri.evalbench import match_at_k
from liri.sparse import Bm25Index, bm25_score_all, build_bm25
from liri.text import DENSE_TOKENIZER, TokenizerConfig, tokenize

log = logging.getLogger(__name__)

STRATEGIES = ("allneg", "bm25guided", "iterative", "async")


@dataclass(frozen=True)
class TrainingTriple:
    query_id: str
    pos_id: str
    neg_id: str

    def __post_init__(self):
        if self.pos_id == self.neg_id:
            raise ValueError(f"triple for {self.query_id} has pos == neg == {self.pos_id}")


@dataclass
class TripleBatch:
    triples: list[TrainingTriple]
    curated_by_version: int
    train_match1: float | None = None
    source: EncoderParams | None = field(default=None, repr=False, compare=False)

    def __len__(self) -> int:
        return len(self.triples)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.2
    epochs_per_round: int = 6
    max_rounds: int = 5
    m: int = 20
    r_rand: int = 3
    target_train_match1: float = 0.95
    minibatch_size: int = 32
    seed: int = 0
    one_pass_epochs: int = 10
    k_tok: int = 8
    nprobe: int = 4
    ivf_clusters: int | str | None = None

    def __post_init__(self):
        for name in ("epochs_per_round", "max_rounds", "m", "minibatch_size", "one_pass_epochs"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.r_rand < 0:
            raise ValueError("r_rand must be >= 0")
        if not 0.0 <= self.target_train_match1 <= 1.0:
            raise ValueError("target_train_match1 must be in [0, 1]")


@dataclass
class RoundRecord:
    round: int
    triples_trained_on: int
    loss_mean: float
    train_match1: float
    wall_time: float
    checkpoint_version: int


@dataclass
class TrainHistory:
    strategy: str
    records: list[RoundRecord] = field(default_factory=list)
    status: str = "running"
    epoch_seconds: list[float] = field(default_factory=list)
    epoch_cpu_seconds: list[float] = field(default_factory=list)
    adopted_batches: int = 0
    final_train_match1: float | None = None
    total_seconds: float = 0.0

    @property
    def triple_updates(self) -> int:
        return sum(r.triples_trained_on for r in self.records)

    def add(self, record: RoundRecord) -> None:
        if self.records and record.round <= self.records[-1].round:
            raise ValueError("rounds must strictly increase")
        if self.records and record.checkpoint_version < self.records[-1].checkpoint_version:
            raise ValueError("checkpoint versions must not decrease")
        self.records.append(record)

    def to_jsonl(self) -> str:
        lines = [json.dumps({"type": "round", "strategy": self.strategy, **asdict(r)}) for r in self.records]
        summary = {
            "type": "summary",
            "strategy": self.strategy,
            "status": self.status,
            "rounds": len(self.records),
            "triple_updates": self.triple_updates,
            "adopted_batches": self.adopted_batches,
            "final_train_match1": self.final_train_match1,
            "total_seconds": self.total_seconds,
            "epoch_seconds": self.epoch_seconds,
            "epoch_cpu_seconds": self.epoch_cpu_seconds,
        }
        return "\n".join(lines + [json.dumps(summary)]) + "\n"


def write_triples(triples: list[TrainingTriple]) -> str:
    return "".join(f"{t.query_id}\t{t.pos_id}\t{t.neg_id}\n" for t in triples)


# --- objective -------------------------------------------------------------


def pairwise_loss(s_pos: float, s_neg: float) -> float:
    if not (np.isfinite(s_pos) and np.isfinite(s_neg)):
        raise ValueError(f"non-finite score: s_pos={s_pos}, s_neg={s_neg}")
    return float(np.logaddexp(0.0, s_neg - s_pos))


class EncodedCorpus:
    """Bucket ids for passages and queries under one encoder config.

    Resolves the ids used in triples without re-tokenizing.
    """

    def __init__(
        self,
        passages: list[Passage],
        queries: list[Query],
        config: EncoderConfig,
        tokenizer: TokenizerConfig = DENSE_TOKENIZER,
    ):
        self.config = config
        self.passages = passages
        self.passage_ids = [p.id for p in passages]
        self.passage_buckets = {p.id: bucket_ids(config, tokenize(tokenizer, p.text), "doc") for p in passages}
        self.query_buckets = {q.id: bucket_ids(config, tokenize(tokenizer, q.text), "query") for q in queries}
        self.qrels = {q.id: q.gold for q in queries}
        empty = [pid for pid, ids in self.passage_buckets.items() if len(ids) == 0]
        if empty:
            raise DataError(f"passages without tokens cannot be trained on: {empty[:5]}")

    @classmethod
    def from_dataset(cls, dataset: Dataset, config: EncoderConfig, split: str = "train") -> "EncodedCorpus":
        return cls(dataset.passages, dataset.queries(split), config)

    def query(self, qid: str) -> np.ndarray:
        try:
            return self.query_buckets[qid]
        except KeyError:
            raise KeyError(f"unknown query id: {qid}") from None

    def passage(self, pid: str) -> np.ndarray:
        try:
            return self.passage_buckets[pid]
        except KeyError:
            raise KeyError(f"unknown passage id: {pid}") from None

    def pack(self, triples: list[TrainingTriple]):
        """Flattened bucket ids with offsets, in the layout the kernels expect."""
        qs = [self.query(t.query_id) for t in triples]
        ps = [self.passage(t.pos_id) for t in triples]
        ns = [self.passage(t.neg_id) for t in triples]
        return (*_flatten(qs), *_flatten(ps), *_flatten(ns))


def _flatten(arrays: list[np.ndarray]):
    lengths = np.fromiter((len(a) for a in arrays), dtype=np.int64, count=len(arrays))
    offsets = np.zeros(len(arrays) + 1, dtype=np.int64)
    np.cumsum(lengths, out=offsets[1:])
    flat = np.concatenate(arrays).astype(np.int64) if arrays else np.zeros(0, np.int64)
    return flat, offsets


def _resolve(corpus: EncodedCorpus | Dataset, config: EncoderConfig) -> EncodedCorpus:
    if isinstance(corpus, EncodedCorpus):
        return corpus
    return EncodedCorpus.from_dataset(corpus, config)


def loss_and_grad(table: np.ndarray, triples: list[TrainingTriple], corpus: EncodedCorpus, similarity: str):
    """Mean pairwise loss over ``triples`` and its gradient w.r.t. ``table``.

    Works on float32 or float64 tables; the gradient is float64 and dense.
    Through SumMaxSim each query row's gradient flows only to its first
    maximizing passage row, and rows shared by several tokens accumulate.
    """
    table = np.ascontiguousarray(table)
    grad = np.zeros(table.shape, dtype=np.float64)
    packed = corpus.pack(triples)
    loss_sum = kernels.triple_grad(table, *packed, kernels.SIM_MODES[similarity], 1.0 / len(triples), grad)
    return loss_sum / len(triples), grad


def _apply_step(table: np.ndarray, grad: np.ndarray, packed, lr: float, similarity: str, n: int) -> float:
    """One in-place gradient-descent step on ``table``; ``grad`` is a zeroed scratch buffer."""
    loss_sum = kernels.triple_grad(table, *packed, kernels.SIM_MODES[similarity], 1.0 / n, grad)
    touched = np.unique(np.concatenate([packed[0], packed[2], packed[4]]))
    rows = table[touched].astype(np.float64) - lr * grad[touched]
    table[touched] = rows.astype(table.dtype)
    grad[touched] = 0.0
    return loss_sum / n


def grad_step(
    params: EncoderParams, minibatch: list[TrainingTriple], corpus: EncodedCorpus | Dataset, lr: float
) -> tuple[EncoderParams, float]:
    """Return a new checkpoint one gradient step from ``params`` and the pre-step mean loss."""
    if not minibatch:
        raise ValueError("empty minibatch")
    corpus = _resolve(corpus, params.config)
    table = params.table.copy()
    grad = np.zeros(table.shape, dtype=np.float64)
    loss = _apply_step(table, grad, corpus.pack(minibatch), lr, params.config.similarity, len(minibatch))
    return params.with_table(table), loss


class _Worker:
    """Mutable training state. Publishes immutable snapshots."""

    def __init__(self, params: EncoderParams, corpus: EncodedCorpus, cfg: TrainConfig, rng: np.random.Generator):
        self.config = params.config
        self.table = params.table.copy()
        self.version = params.version
        self.grad = np.zeros(self.table.shape, dtype=np.float64)
        self.corpus = corpus
        self.cfg = cfg
        self.rng = rng

    def epoch(self, triples: list[TrainingTriple]) -> float:
        """One shuffled pass in minibatches; returns the mean loss."""
        if not triples:
            return float("nan")
        order = self.rng.permutation(len(triples))
        bs = self.cfg.minibatch_size
        total = 0.0
        for start in range(0, len(order), bs):
            mb = [triples[i] for i in order[start : start + bs]]
            loss = _apply_step(self.table, self.grad, self.corpus.pack(mb), self.cfg.learning_rate, self.config.similarity, len(mb))
            total += loss * len(mb)
            self.version += 1
        return total / len(triples)

    def snapshot(self) -> EncoderParams:
        return EncoderParams(self.version, self.config, self.table.copy())


# --- triple curation -------------------------------------------------------


def _random_negatives(query_id: str, gold: str, corpus_ids: list[str], r_rand: int, rng) -> list[TrainingTriple]:
    pool = [pid for pid in corpus_ids if pid != gold]
    if r_rand == 0 or not pool:
        return []
    picks = rng.choice(len(pool), size=min(r_rand, len(pool)), replace=False)
    return [TrainingTriple(query_id, gold, pool[i]) for i in picks]


def curate_triples(
    rankings: dict[str, RankedResult],
    qrels: dict[str, str],
    m: int,
    r_rand: int,
    rng: np.random.Generator,
    corpus_ids: list[str],
    version: int = 0,
) -> TripleBatch:
    """Hard negatives: every passage ranked above the gold within the top ``m``.

    Gold at rank 1 yields ``r_rand`` random negatives instead; gold outside
    the top ``m`` uses all of the top ``m`` as negatives.
    """
    triples = []
    for qid in sorted(qrels):
        if qid not in rankings:
            raise KeyError(f"no ranking for query {qid}")
        gold = qrels[qid]
        top = rankings[qid].ids[:m]
        if gold in top:
            i = top.index(gold)
            if i == 0:
                triples.extend(_random_negatives(qid, gold, corpus_ids, r_rand, rng))
            else:
                triples.extend(TrainingTriple(qid, gold, neg) for neg in top[:i])
        else:
            triples.extend(TrainingTriple(qid, gold, neg) for neg in top)
    return TripleBatch(triples, version)


def all_negatives_triples(queries: list[str], qrels: dict[str, str], corpus_ids: list[str]) -> TripleBatch:
    triples = [TrainingTriple(qid, qrels[qid], pid) for qid in queries for pid in corpus_ids if pid != qrels[qid]]
    return TripleBatch(triples, 0)


def bm25_guided_triples(
    index: Bm25Index,
    queries: list[Query],
    qrels: dict[str, str],
    m: int,
    r_rand: int,
    rng: np.random.Generator,
) -> TripleBatch:
    """:func:`curate_triples` over BM25 rankings of the full corpus (zeros ranked by id)."""
    rankings = {q.id: RankedResult.from_scores(bm25_score_all(index, q.text).items()) for q in queries}
    return curate_triples(rankings, qrels, m, r_rand, rng, sorted(index.doc_len))


# --- sampler ---------------------------------------------------------------


def _rank_exact(index: TokenVectorIndex, params: EncoderParams, corpus: EncodedCorpus, k: int) -> dict[str, RankedResult]:
    qids = list(corpus.query_buckets)
    scores = score_matrix(index, [params.table[corpus.query_buckets[q]] for q in qids])
    ids = index.passage_ids
    id_rank = np.argsort(np.argsort(np.array(ids, dtype=object), kind="stable"), kind="stable")
    keep = np.diff(index.offsets) > 0
    out = {}
    for qid, row in zip(qids, scores):
        order = np.lexsort((id_rank, -row))
        order = order[keep[order]][:k]
        out[qid] = RankedResult([(ids[c], float(row[c])) for c in order])
    return out


def rank_queries(
    index: TokenVectorIndex,
    params: EncoderParams,
    corpus: EncodedCorpus,
    k: int,
    k_tok: int = 8,
    nprobe: int = 4,
    cancel: threading.Event | None = None,
) -> dict[str, RankedResult] | None:
    """Rank every query in ``corpus``; returns None once ``cancel`` is set.

    Exact indexes are scored in one batch with :func:`score_matrix`.
    """
    if index.ivf is None:
        return _rank_exact(index, params, corpus, k)
    out = {}
    for qid, ids in corpus.query_buckets.items():
        if cancel is not None and cancel.is_set():
            return None
        out[qid] = search_encoded(index, TokenMatrix(params.table[ids], ids), k, k_tok, nprobe)
    return out


class Sampler:
    """Refreshes the index from a checkpoint and curates the next batch."""

    def __init__(self, dataset: Dataset, corpus: EncodedCorpus, cfg: TrainConfig, rng: np.random.Generator):
        self.dataset = dataset
        self.corpus = corpus
        self.cfg = cfg
        self.rng = rng
        self.index: TokenVectorIndex | None = None
        self.exact: TokenVectorIndex | None = None

    def refresh(self, params: EncoderParams) -> None:
        if self.index is None:
            self.index = build_token_index(params, self.dataset.passages, self.cfg.ivf_clusters, self.cfg.seed)
        else:
            self.index = refresh_index(params, self.dataset.passages, self.index)
        if self.index.ivf is None:
            self.exact = self.index
        else:
            self.exact = build_token_index(params, self.dataset.passages)

    def train_match1(self, params: EncoderParams, cancel: threading.Event | None = None):
        """Exact-mode Match@1 on the training queries and the rankings behind it.

        Refreshes the index first. Returns None if ``cancel`` fires midway.
        """
        self.refresh(params)
        rankings = rank_queries(self.exact, params, self.corpus, self.cfg.m, cancel=cancel)
        if rankings is None:
            return None
        return match_at_k(rankings, self.corpus.qrels, 1), rankings

    def curate(
        self,
        params: EncoderParams,
        exact_rankings: dict[str, RankedResult] | None = None,
        cancel: threading.Event | None = None,
    ) -> TripleBatch | None:
        if exact_rankings is None:
            measured = self.train_match1(params, cancel)
            if measured is None:
                return None
            m1, exact_rankings = measured
        else:
            m1 = match_at_k(exact_rankings, self.corpus.qrels, 1)
        if self.index is self.exact:
            rankings = exact_rankings
        else:
            rankings = rank_queries(self.index, params, self.corpus, self.cfg.m, self.cfg.k_tok, self.cfg.nprobe, cancel)
            if rankings is None:
                return None
        batch = curate_triples(rankings, self.corpus.qrels, self.cfg.m, self.cfg.r_rand, self.rng, self.corpus.passage_ids, params.version)
        batch.train_match1 = m1
        batch.source = params
        return batch


# --- strategies ------------------------------------------------------------


def _train_one_pass(
    strategy: str, dataset: Dataset, enc: EncoderConfig, cfg: TrainConfig, make_batch: Callable[[np.random.Generator], TripleBatch]
) -> tuple[EncoderParams, TrainHistory]:
    t0 = time.perf_counter()
    rng = np.random.default_rng(cfg.seed)
    corpus = EncodedCorpus.from_dataset(dataset, enc)
    worker = _Worker(init_params(enc, cfg.seed), corpus, cfg, rng)
    batch = make_batch(rng)
    history = TrainHistory(strategy)
    losses = []
    for _ in range(cfg.one_pass_epochs):
        e0, c0 = time.perf_counter(), time.thread_time()
        losses.append(worker.epoch(batch.triples))
        history.epoch_seconds.append(time.perf_counter() - e0)
        history.epoch_cpu_seconds.append(time.thread_time() - c0)
    params = worker.snapshot()
    m1, _ = Sampler(dataset, corpus, cfg, rng).train_match1(params)
    history.add(RoundRecord(1, len(batch) * cfg.one_pass_epochs, float(np.mean(losses)) if batch.triples else float("nan"), m1, time.perf_counter() - t0, params.version))
    history.status = "one_pass"
    history.adopted_batches = 1 if batch.triples else 0
    history.final_train_match1 = m1
    history.total_seconds = time.perf_counter() - t0
    return params, history


def train_all_negatives(dataset: Dataset, enc: EncoderConfig, cfg: TrainConfig) -> tuple[EncoderParams, TrainHistory]:
    qrels = dataset.qrels("train")
    return _train_one_pass(
        "allneg", dataset, enc, cfg, lambda rng: all_negatives_triples(sorted(qrels), qrels, dataset.passage_ids)
    )


def train_bm25_guided(dataset: Dataset, enc: EncoderConfig, cfg: TrainConfig) -> tuple[EncoderParams, TrainHistory]:
    index = build_bm25(dataset.passages)
    queries = dataset.queries("train")
    return _train_one_pass(
        "bm25guided", dataset, enc, cfg, lambda rng: bm25_guided_triples(index, queries, dataset.qrels("train"), cfg.m, cfg.r_rand, rng)
    )


def iterative_train(dataset: Dataset, enc: EncoderConfig, cfg: TrainConfig) -> tuple[EncoderParams, TrainHistory]:
    """Alternate curation and training rounds until the target train Match@1.

    Round k curates from the rankings of checkpoint k-1 (round 1 uses the
    freshly initialized model), trains ``epochs_per_round`` epochs, then
    scores the new checkpoint on the training queries. Those rankings seed
    the next round's curation.
    """
    t0 = time.perf_counter()
    rng = np.random.default_rng(cfg.seed)
    corpus = EncodedCorpus.from_dataset(dataset, enc)
    sampler = Sampler(dataset, corpus, cfg, rng)
    worker = _Worker(init_params(enc, cfg.seed), corpus, cfg, rng)
    history = TrainHistory("iterative")
    params = worker.snapshot()
    _, rankings = sampler.train_match1(params)
    for k in range(1, cfg.max_rounds + 1):
        r0 = time.perf_counter()
        batch = sampler.curate(params, rankings)
        if not batch.triples:
            history.status = "empty_batch"
            history.final_train_match1 = batch.train_match1
            break
        history.adopted_batches += 1
        losses = []
        for _ in range(cfg.epochs_per_round):
            e0, c0 = time.perf_counter(), time.thread_time()
            losses.append(worker.epoch(batch.triples))
            history.epoch_seconds.append(time.perf_counter() - e0)
            history.epoch_cpu_seconds.append(time.thread_time() - c0)
        params = worker.snapshot()
        m1, rankings = sampler.train_match1(params)
        history.add(RoundRecord(k, len(batch) * cfg.epochs_per_round, float(np.mean(losses)), m1, time.perf_counter() - r0, params.version))
        history.final_train_match1 = m1
        log.info("iterative round %d: %d triples, loss %.4f, train M@1 %.3f", k, len(batch), np.mean(losses), m1)
        if m1 >= cfg.target_train_match1:
            history.status = "target_reached"
            break
    else:
        history.status = "max_rounds"
    history.total_seconds = time.perf_counter() - t0
    return params, history


# --- asynchronous pipeline -------------------------------------------------


class CheckpointStore:
    """Latest-checkpoint register; publishing an older version is ignored."""

    def __init__(self, params: EncoderParams):
        self._cond = threading.Condition()
        self._latest = params

    def publish(self, params: EncoderParams) -> None:
        with self._cond:
            if params.version > self._latest.version:
                self._latest = params
                self._cond.notify_all()

    def latest(self) -> EncoderParams:
        with self._cond:
            return self._latest

    def wait_newer(self, version: int, stop: threading.Event, poll: float = 0.05) -> EncoderParams | None:
        """Block until a checkpoint newer than ``version`` exists, or ``stop`` is set."""
        with self._cond:
            while self._latest.version <= version:
                if stop.is_set():
                    return None
                self._cond.wait(poll)
            return self._latest


class BatchMailbox:
    """Single-slot mailbox: a new batch replaces an unconsumed one.

    Also keeps the sampler's latest exact train Match@1 measurement and the
    checkpoint it was taken on.
    """

    def __init__(self):
        self._cond = threading.Condition()
        self._batch: TripleBatch | None = None
        self._report: TripleBatch | None = None

    def put(self, batch: TripleBatch) -> None:
        with self._cond:
            self._batch = batch
            if batch.train_match1 is not None:
                self._report = batch
            self._cond.notify_all()

    def take(self) -> TripleBatch | None:
        with self._cond:
            batch, self._batch = self._batch, None
            return batch

    def wait(self, stop: threading.Event, poll: float = 0.05) -> TripleBatch | None:
        with self._cond:
            while self._batch is None:
                if stop.is_set():
                    return None
                self._cond.wait(poll)
            batch, self._batch = self._batch, None
            return batch

    def latest_report(self) -> tuple[int, float, EncoderParams | None] | None:
        """(version, train Match@1, checkpoint) of the most recent measurement."""
        with self._cond:
            r = self._report
            return None if r is None else (r.curated_by_version, r.train_match1, r.source)


def async_train(
    dataset: Dataset,
    enc: EncoderConfig,
    cfg: TrainConfig,
    *,
    sampler_delay: float = 0.0,
) -> tuple[EncoderParams, TrainHistory]:
    """Sampler and trainer on two threads sharing a checkpoint store and a mailbox.

    The sampler waits for a checkpoint newer than the one it last used,
    fetches the latest, measures its exact train Match@1, and deposits a
    batch curated from it. The trainer waits only for the very first batch;
    after that it adopts a fresher batch at epoch boundaries when one is
    waiting and otherwise keeps training on the batch it has. It publishes
    a checkpoint after every epoch.

    Training stops when the sampler reports a checkpoint at or above the
    target (that checkpoint is returned), after
    ``max_rounds * epochs_per_round`` epochs, or on an empty batch.
    ``sampler_delay`` injects latency before each sampler pass.

    Not bit-reproducible: batch adoption depends on thread timing.
    """
    t0 = time.perf_counter()
    corpus = EncodedCorpus.from_dataset(dataset, enc)
    seeds = np.random.SeedSequence(cfg.seed).spawn(2)
    sampler = Sampler(dataset, corpus, cfg, np.random.default_rng(seeds[0]))
    worker = _Worker(init_params(enc, cfg.seed), corpus, cfg, np.random.default_rng(seeds[1]))
    store = CheckpointStore(worker.snapshot())
    mailbox = BatchMailbox()
    stop = threading.Event()
    failure: list[BaseException] = []

    def sampler_loop():
        last = -1
        try:
            while not stop.is_set():
                params = store.wait_newer(last, stop)
                if params is None:
                    break
                if sampler_delay and stop.wait(sampler_delay):
                    break
                params = store.latest()
                batch = sampler.curate(params, cancel=stop)
                if batch is None:
                    break
                mailbox.put(batch)
                last = params.version
        except BaseException as exc:  # noqa: BLE001
            failure.append(exc)
            stop.set()

    thread = threading.Thread(target=sampler_loop, name="liri-sampler", daemon=True)
    thread.start()
    history = TrainHistory("async")
    final: tuple[EncoderParams, float] | None = None
    try:
        batch = mailbox.wait(stop)
        if batch is None:
            raise failure[0] if failure else RuntimeError("sampler stopped before the first batch")
        history.adopted_batches = 1 if batch.triples else 0
        total_epochs = cfg.max_rounds * cfg.epochs_per_round
        round_start, round_triples, round_losses = time.perf_counter(), 0, []
        epoch = 0
        history.status = "max_rounds"
        while epoch < total_epochs and not failure:
            if not batch.triples:
                # Nothing to learn from: close with a no-op step so the
                # returned checkpoint is still a trainer product.
                worker.version += 1
                store.publish(worker.snapshot())
                history.status = "empty_batch"
                break
            report = mailbox.latest_report()
            if report is not None and report[1] >= cfg.target_train_match1:
                final = report[2], report[1]
                history.status = "target_reached"
                break
            e0, c0 = time.perf_counter(), time.thread_time()
            round_losses.append(worker.epoch(batch.triples))
            round_triples += len(batch)
            store.publish(worker.snapshot())
            history.epoch_seconds.append(time.perf_counter() - e0)
            history.epoch_cpu_seconds.append(time.thread_time() - c0)
            epoch += 1
            fresh = mailbox.take()
            if fresh is not None and fresh.curated_by_version > batch.curated_by_version:
                batch = fresh
                if batch.triples:
                    history.adopted_batches += 1
            if epoch % cfg.epochs_per_round == 0:
                _close_round(history, worker, mailbox, round_start, round_triples, round_losses)
                round_start, round_triples, round_losses = time.perf_counter(), 0, []
        if round_triples:
            _close_round(history, worker, mailbox, round_start, round_triples, round_losses)
    except BaseException as exc:
        stop.set()
        thread.join()
        role = "sampler" if failure and exc is failure[0] else "trainer"
        raise OrchestrationError(role, exc) from exc
    stop.set()
    thread.join()
    if failure:
        raise OrchestrationError("sampler", failure[0]) from failure[0]
    if final is None:
        params = worker.snapshot()
        m1, _ = Sampler(dataset, corpus, cfg, np.random.default_rng(0)).train_match1(params)
        final = params, m1
    params, history.final_train_match1 = final
    history.total_seconds = time.perf_counter() - t0
    return params, history


def _close_round(history: TrainHistory, worker: _Worker, mailbox: BatchMailbox, start, triples, losses) -> None:
    report = mailbox.latest_report()
    history.add(
        RoundRecord(
            len(history.records) + 1,
            triples,
            float(np.mean(losses)),
            report[1] if report else float("nan"),
            time.perf_counter() - start,
            worker.version,
        )
    )


def train(strategy: str, dataset: Dataset, enc: EncoderConfig, cfg: TrainConfig, **kwargs) -> tuple[EncoderParams, TrainHistory]:
    fns = {
        "allneg": train_all_negatives,
        "bm25guided": train_bm25_guided,
        "iterative": iterative_train,
        "async": async_train,
    }
    if strategy not in fns:
        raise ValueError(f"unknown strategy {strategy!r}; choose from {STRATEGIES}")
    return fns[strategy](dataset, enc, cfg, **kwargs)
