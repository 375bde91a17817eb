"""Tokenization shared by the sparse and dense retrieval paths."""

from __future__ import annotations

import unicodedata
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

from nltk.stem.porter import PorterStemmer

# Common English function words. Loaded verbatim; callers can replace the
# set with load_stopwords().
DEFAULT_STOPWORDS = frozenset(
    """
    a about above after again against all am an and any are as at be because
    been before being below between both but by can could did do does doing
    down during each few for from further had has have having he her here hers
    herself him himself his how i if in into is it its itself just me more most
    my myself no nor not now of off on once only or other our ours ourselves out
    over own same she should so some such than that the their theirs them
    themselves then there these they this those through to too under until up
    very was we were what when where which while who whom why will with would
    you your yours yourself yourselves
    """.split()
)

_stemmer = PorterStemmer(mode=PorterStemmer.ORIGINAL_ALGORITHM)


@dataclass(frozen=True)
class TokenizerConfig:
    lowercase: bool = True
    strip_punctuation: bool = True
    stopwords: frozenset[str] = field(default_factory=frozenset)
    stem: bool = False


#: Full pipeline for BM25: lowercase, strip, stopwords, Porter stemming.
SPARSE_TOKENIZER = TokenizerConfig(stopwords=DEFAULT_STOPWORDS, stem=True)
#: Raw word tokens for the dense encoder.
DENSE_TOKENIZER = TokenizerConfig()


def _is_punct(ch: str) -> bool:
    return unicodedata.category(ch)[0] in ("P", "S")


def _strip_edges(token: str) -> str:
    start, stop = 0, len(token)
    while start < stop and _is_punct(token[start]):
        start += 1
    while stop > start and _is_punct(token[stop - 1]):
        stop -= 1
    return token[start:stop]


@lru_cache(maxsize=65536)
def _stem(token: str) -> str:
    return _stemmer.stem(token, to_lowercase=False)


def tokenize(config: TokenizerConfig, text: str) -> list[str]:
    """Split ``text`` on whitespace and apply the configured filters in order.

    Punctuation is stripped from token edges only, so ``"e-mail"`` stays one
    token while ``"(cat)."`` becomes ``"cat"``. Tokens that end up empty are
    dropped, which removes punctuation-only tokens.
    """
    tokens = []
    for raw in text.split():
        tok = raw.lower() if config.lowercase else raw
        if config.strip_punctuation:
            tok = _strip_edges(tok)
        if not tok:
            continue
        if tok in config.stopwords:
            continue
        if config.stem:
            tok = _stem(tok)
            if not tok:
                continue
        tokens.append(tok)
    return tokens


def load_stopwords(path: str | Path) -> frozenset[str]:
    """Read a stopword file: one token per line, ``#`` starts a comment."""
    words = set()
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        word = line.split("#", 1)[0].strip()
        if word:
            words.add(word)
    return frozenset(words)
