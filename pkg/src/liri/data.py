"""Dataset files and the synthetic FAQ generator.

A dataset directory holds::

    corpus.jsonl        {"id": ..., "text": ...} per line
    train_queries.tsv   query_id <TAB> text
    train_qrels.tsv     query_id <TAB> gold passage_id
    test_queries.tsv
    test_qrels.tsv
    meta.json           {"name": ...}
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from liri._io import atomic_write_text
from liri.base import (
    DanglingGoldError,
    DataError,
    DuplicateIdError,
    EmptyCorpusError,
    MalformedLineError,
    Passage,
    Query,
)
from liri.text import DEFAULT_STOPWORDS, SPARSE_TOKENIZER, tokenize


@dataclass
class Dataset:
    passages: list[Passage]
    train_queries: list[Query]
    test_queries: list[Query] = field(default_factory=list)
    name: str = "dataset"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not self.passages:
            raise EmptyCorpusError("empty corpus")
        ids = set()
        for p in self.passages:
            if p.id in ids:
                raise DuplicateIdError(f"duplicate passage id: {p.id}")
            ids.add(p.id)
        for split in (self.train_queries, self.test_queries):
            qids = set()
            for q in split:
                if q.id in qids:
                    raise DuplicateIdError(f"duplicate query id: {q.id}")
                qids.add(q.id)
                if q.gold not in ids:
                    raise DanglingGoldError(f"dangling gold passage {q.gold!r} for query {q.id!r}")

    @property
    def passage_ids(self) -> list[str]:
        return [p.id for p in self.passages]

    def qrels(self, split: str = "train") -> dict[str, str]:
        return {q.id: q.gold for q in self.queries(split)}

    def queries(self, split: str = "train") -> list[Query]:
        return self.train_queries if split == "train" else self.test_queries

    def metadata(self) -> dict:
        def words(texts):
            texts = list(texts)
            return sum(len(t.split()) for t in texts) / max(len(texts), 1)

        return {
            "name": self.name,
            "docs": len(self.passages),
            "train_queries": len(self.train_queries),
            "test_queries": len(self.test_queries),
            "words_per_doc": words(p.text for p in self.passages),
            "words_per_query": words(q.text for q in self.train_queries + self.test_queries),
        }

    def with_train(self, train_queries: list[Query]) -> "Dataset":
        return Dataset(self.passages, train_queries, self.test_queries, self.name)


def _check_field(value: str, what: str) -> str:
    if "\t" in value or "\n" in value or "\r" in value:
        raise DataError(f"{what} contains a tab or newline: {value!r}")
    return value


def save_dataset(dataset: Dataset, directory: str | Path) -> None:
    d = Path(directory)
    corpus = "".join(json.dumps({"id": p.id, "text": p.text}, ensure_ascii=False) + "\n" for p in dataset.passages)
    atomic_write_text(d / "corpus.jsonl", corpus)
    for split in ("train", "test"):
        qs = dataset.queries(split)
        atomic_write_text(
            d / f"{split}_queries.tsv",
            "".join(f"{_check_field(q.id, 'query id')}\t{_check_field(q.text, 'query text')}\n" for q in qs),
        )
        atomic_write_text(d / f"{split}_qrels.tsv", "".join(f"{q.id}\t{_check_field(q.gold, 'gold id')}\n" for q in qs))
    atomic_write_text(d / "meta.json", json.dumps({"name": dataset.name}) + "\n")


def _read_lines(path: Path):
    if not path.exists():
        return
    for lineno, line in enumerate(path.read_text(encoding="utf-8").split("\n"), start=1):
        if line.strip():
            yield lineno, line


def _read_tsv(path: Path) -> list[tuple[int, str, str]]:
    rows = []
    for lineno, line in _read_lines(path):
        parts = line.split("\t")
        if len(parts) != 2:
            raise MalformedLineError(f"{path.name}:{lineno}: expected 2 tab-separated fields, got {len(parts)}")
        rows.append((lineno, parts[0], parts[1]))
    return rows


def load_dataset(directory: str | Path) -> Dataset:
    d = Path(directory)
    if not (d / "corpus.jsonl").is_file():
        raise DataError(f"no corpus.jsonl in {d}")
    passages = []
    seen = set()
    for lineno, line in _read_lines(d / "corpus.jsonl"):
        try:
            rec = json.loads(line)
            pid, text = str(rec["id"]), str(rec["text"])
        except (ValueError, KeyError, TypeError) as exc:
            raise MalformedLineError(f"corpus.jsonl:{lineno}: {exc}") from None
        if pid in seen:
            raise DuplicateIdError(f"corpus.jsonl:{lineno}: duplicate passage id {pid}")
        seen.add(pid)
        passages.append(Passage(pid, text))
    if not passages:
        raise EmptyCorpusError("empty corpus")
    splits = {}
    for split in ("train", "test"):
        texts = {}
        for lineno, qid, text in _read_tsv(d / f"{split}_queries.tsv"):
            if qid in texts:
                raise DuplicateIdError(f"{split}_queries.tsv:{lineno}: duplicate query id {qid}")
            texts[qid] = text
        gold = {}
        for lineno, qid, pid in _read_tsv(d / f"{split}_qrels.tsv"):
            if pid not in seen:
                raise DanglingGoldError(f"{split}_qrels.tsv:{lineno}: dangling gold passage {pid!r} for query {qid!r}")
            if qid not in texts:
                raise MalformedLineError(f"{split}_qrels.tsv:{lineno}: unknown query id {qid!r}")
            if qid in gold:
                raise DuplicateIdError(f"{split}_qrels.tsv:{lineno}: second gold passage for {qid!r}")
            gold[qid] = pid
        missing = [qid for qid in texts if qid not in gold]
        if missing:
            raise DataError(f"{split} queries without qrels: {missing[:5]}")
        splits[split] = [Query(qid, text, gold[qid]) for qid, text in texts.items()]
    meta_path = d / "meta.json"
    name = json.loads(meta_path.read_text())["name"] if meta_path.exists() else d.name
    return Dataset(passages, splits["train"], splits["test"], name)


# --- synthetic data -------------------------------------------------------

_CONSONANTS = "bdfgklmnprstvz"
_VOWELS = "aiou"
_TEMPLATES = (
    "how do i",
    "what is the",
    "where can i find",
    "tell me about",
    "can you explain",
    "i need help with",
    "question about",
)


@dataclass(frozen=True)
class SynthConfig:
    n_passages: int = 50
    family_size: int = 5
    keywords_per_passage: int = 6
    family_keywords: int = 3
    shared_vocab_size: int = 80
    queries_per_passage: int = 3
    test_queries_per_passage: int = 3
    paraphrase_noise: float = 0.2
    keywords_per_query: int = 1
    family_words_per_query: int = 2
    filler_min: int = 2
    filler_max: int = 30
    function_words_max: int = 30
    seed: int = 0

    def __post_init__(self):
        if self.n_passages < 2:
            raise ValueError("n_passages must be >= 2")
        if self.family_size < 1:
            raise ValueError("family_size must be >= 1")
        if not 0.0 <= self.paraphrase_noise <= 1.0:
            raise ValueError("paraphrase_noise must be in [0, 1]")
        if not 1 <= self.keywords_per_query <= self.keywords_per_passage:
            raise ValueError("keywords_per_query must be in [1, keywords_per_passage]")
        if not 0 <= self.family_words_per_query <= self.family_keywords:
            raise ValueError("family_words_per_query must be in [0, family_keywords]")
        if not 0 <= self.filler_min <= self.filler_max:
            raise ValueError("need 0 <= filler_min <= filler_max")
        if self.function_words_max < 0:
            raise ValueError("function_words_max must be >= 0")

    @property
    def n_families(self) -> int:
        return -(-self.n_passages // self.family_size)


def _vocabulary(n: int, rng: np.random.Generator) -> list[str]:
    """``n`` distinct pseudo-words that survive the sparse tokenizer with distinct stems."""
    capacity = (len(_CONSONANTS) * len(_VOWELS)) ** 3
    if n > capacity // 4:
        raise DataError(f"keyword demand {n} exceeds synthetic vocabulary capacity {capacity // 4}")
    words, stems = [], set()
    while len(words) < n:
        syll = rng.integers(0, len(_CONSONANTS), 3), rng.integers(0, len(_VOWELS), 3)
        word = "".join(_CONSONANTS[c] + _VOWELS[v] for c, v in zip(*syll))
        toks = tokenize(SPARSE_TOKENIZER, word)
        if len(toks) != 1 or toks[0] in stems or word in DEFAULT_STOPWORDS:
            continue
        stems.add(toks[0])
        words.append(word)
    return words


def generate_synthetic(config: SynthConfig = SynthConfig()) -> Dataset:
    """Generate a separable FAQ corpus with topic families.

    Passages come in families of ``family_size``. A passage contains its
    family's shared keywords, ``keywords_per_passage`` keywords of its own,
    filler from a shared vocabulary and a few function words. Every keyword
    has an alias that appears in no passage, and every passage has a fixed
    question style (one of a few opening phrases).

    A query is the passage's question style followed by some of its own
    keywords and some family keywords. Each keyword is replaced by its alias
    with probability ``paraphrase_noise`` (at least one own keyword is kept
    literal), and a filler word is appended with the same probability per
    keyword. Siblings in a family are the hard negatives; other families
    are easy ones. The gold passage is the unique maximizer of keyword
    overlap, which is audited before returning.
    """
    cfg = config
    rng = np.random.default_rng(cfg.seed)
    n_own = cfg.n_passages * cfg.keywords_per_passage
    n_fam = cfg.n_families * cfg.family_keywords
    n_kw = n_own + n_fam
    vocab = _vocabulary(2 * n_kw + cfg.shared_vocab_size, rng)
    k = cfg.keywords_per_passage
    own = [vocab[i * k : (i + 1) * k] for i in range(cfg.n_passages)]
    f = cfg.family_keywords
    family = [vocab[n_own + j * f : n_own + (j + 1) * f] for j in range(cfg.n_families)]
    alias = dict(zip(vocab[:n_kw], vocab[n_kw : 2 * n_kw]))
    filler = vocab[2 * n_kw :]
    function_words = sorted(w for w in DEFAULT_STOPWORDS if len(w) > 1)

    passages, style = [], []
    for i, kws in enumerate(own):
        n_fill = int(rng.integers(cfg.filler_min, cfg.filler_max + 1))
        n_func = int(rng.integers(0, cfg.function_words_max + 1))
        words = list(kws) + list(family[i // cfg.family_size])
        words += [filler[j] for j in rng.integers(0, len(filler), n_fill)]
        words += [function_words[j] for j in rng.integers(0, len(function_words), n_func)]
        rng.shuffle(words)
        passages.append(Passage(f"p{i:04d}", " ".join(words)))
        style.append(_TEMPLATES[rng.integers(len(_TEMPLATES))])

    def make_query(i: int) -> str:
        kws, fam = own[i], family[i // cfg.family_size]
        chosen = [kws[j] for j in rng.choice(len(kws), cfg.keywords_per_query, replace=False)]
        chosen_fam = [fam[j] for j in rng.choice(len(fam), cfg.family_words_per_query, replace=False)]
        swap = rng.random(len(chosen)) < cfg.paraphrase_noise
        if swap.all():
            swap[rng.integers(len(swap))] = False
        swap_fam = rng.random(len(chosen_fam)) < cfg.paraphrase_noise
        words = [alias[w] if s else w for w, s in zip(chosen + chosen_fam, np.concatenate([swap, swap_fam]))]
        for _ in range(len(chosen) + len(chosen_fam)):
            if rng.random() < cfg.paraphrase_noise:
                words.append(filler[rng.integers(len(filler))])
        rng.shuffle(words)
        return style[i] + " " + " ".join(words)

    train, test = [], []
    for i in range(cfg.n_passages):
        pid = passages[i].id
        for j in range(cfg.queries_per_passage):
            train.append(Query(f"tr{i:04d}_{j}", make_query(i), pid))
        for j in range(cfg.test_queries_per_passage):
            test.append(Query(f"te{i:04d}_{j}", make_query(i), pid))

    dataset = Dataset(passages, train, test, name=f"synth-{cfg.seed}")
    keywords = [list(own[i]) + list(family[i // cfg.family_size]) for i in range(cfg.n_passages)]
    _audit_separable(dataset, keywords)
    return dataset


def _audit_separable(dataset: Dataset, keywords: list[list[str]]) -> None:
    """Each query's keyword overlap must be strictly largest with its gold passage."""
    stems = [set(tokenize(SPARSE_TOKENIZER, " ".join(kws))) for kws in keywords]
    index = {p.id: i for i, p in enumerate(dataset.passages)}
    for q in dataset.train_queries + dataset.test_queries:
        toks = set(tokenize(SPARSE_TOKENIZER, q.text))
        overlap = [len(toks & s) for s in stems]
        gold = overlap[index[q.gold]]
        if gold == 0 or sum(o == gold for o in overlap) != 1 or max(overlap) != gold:
            raise RuntimeError(f"synthetic query {q.id} is not separable: {overlap}")
