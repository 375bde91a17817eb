"""Hashed-token embedding encoder.

Each token is hashed into one of ``buckets`` rows of an embedding table;
a text is encoded as the stack of its tokens' rows. The table is the only
trainable state, so gradients are exact and cheap to route.

Checkpoint layout (little-endian)::

    b"LIRI-CKPT-v1"
    u64 version, u32 dim, u32 buckets, u32 query_maxlen, u32 doc_maxlen,
    u8 similarity (0 = neg_l2, 1 = dot), i64 hash_seed
    buckets x dim float32, row-major
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, replace
from functools import lru_cache
from pathlib import Path
from typing import Literal

import numpy as np

from liri._io import Reader, atomic_write_bytes
from liri.base import FormatError, NonFiniteError

MAGIC = b"LIRI-CKPT-v1"
_HEADER = "QIIIIBq"
SIMILARITIES = ("neg_l2", "dot")

Role = Literal["query", "doc"]


@dataclass(frozen=True)
class EncoderConfig:
    dim: int = 32
    buckets: int = 2**15
    query_maxlen: int = 32
    doc_maxlen: int = 128
    similarity: str = "neg_l2"
    hash_seed: int = 0

    def __post_init__(self):
        if self.dim < 2:
            raise ValueError(f"dim must be >= 2, got {self.dim}")
        if self.buckets < 1:
            raise ValueError(f"buckets must be >= 1, got {self.buckets}")
        if self.query_maxlen < 1 or self.doc_maxlen < 1:
            raise ValueError("maxlens must be >= 1")
        if self.similarity not in SIMILARITIES:
            raise ValueError(f"similarity must be one of {SIMILARITIES}, got {self.similarity!r}")

    def maxlen(self, role: Role) -> int:
        return self.query_maxlen if role == "query" else self.doc_maxlen


@dataclass(frozen=True, eq=False)
class EncoderParams:
    """A versioned checkpoint. Treat ``table`` as read-only."""

    version: int
    config: EncoderConfig
    table: np.ndarray

    def __post_init__(self):
        if self.version < 0:
            raise ValueError("version must be >= 0")
        if self.table.dtype != np.float32:
            object.__setattr__(self, "table", np.ascontiguousarray(self.table, dtype=np.float32))
        shape = (self.config.buckets, self.config.dim)
        if self.table.shape != shape:
            raise ValueError(f"table shape {self.table.shape} != {shape}")

    def with_table(self, table: np.ndarray, version: int | None = None) -> "EncoderParams":
        return replace(self, table=table, version=self.version + 1 if version is None else version)


@dataclass
class TokenMatrix:
    rows: np.ndarray
    bucket_ids: np.ndarray

    def __len__(self) -> int:
        return len(self.bucket_ids)


def init_params(config: EncoderConfig, seed: int = 0) -> EncoderParams:
    rng = np.random.default_rng(seed)
    table = rng.uniform(-0.1, 0.1, size=(config.buckets, config.dim)).astype(np.float32)
    return EncoderParams(0, config, table)


@lru_cache(maxsize=1 << 18)
def _hash64(seed: int, token: str) -> int:
    key = seed.to_bytes(8, "little", signed=True)
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8, key=key).digest()
    return int.from_bytes(digest, "little")


def hash_token(config: EncoderConfig, token: str) -> int:
    if not token:
        raise ValueError("cannot hash an empty token")
    return _hash64(config.hash_seed, token) % config.buckets


def bucket_ids(config: EncoderConfig, tokens: list[str], role: Role) -> np.ndarray:
    kept = tokens[: config.maxlen(role)]
    return np.fromiter((hash_token(config, t) for t in kept), dtype=np.int64, count=len(kept))


def encode(params: EncoderParams, tokens: list[str], role: Role) -> TokenMatrix:
    ids = bucket_ids(params.config, tokens, role)
    return TokenMatrix(params.table[ids], ids)


def encode_single(params: EncoderParams, tokens: list[str], role: Role) -> np.ndarray:
    """Mean-pooled single vector (float64)."""
    mat = encode(params, tokens, role)
    if len(mat) == 0:
        raise ValueError("cannot pool empty sequence")
    return mat.rows.astype(np.float64).mean(axis=0)


def dumps_checkpoint(params: EncoderParams) -> bytes:
    cfg = params.config
    table = np.ascontiguousarray(params.table, dtype="<f4")
    header = struct.pack(
        "<" + _HEADER,
        params.version,
        cfg.dim,
        cfg.buckets,
        cfg.query_maxlen,
        cfg.doc_maxlen,
        SIMILARITIES.index(cfg.similarity),
        cfg.hash_seed,
    )
    return MAGIC + header + table.tobytes()


def loads_checkpoint(data: bytes) -> EncoderParams:
    r = Reader(data)
    r.magic(MAGIC)
    version, dim, buckets, qmax, dmax, sim, seed = r.unpack(_HEADER)
    if sim >= len(SIMILARITIES):
        raise FormatError(f"unknown similarity tag {sim}")
    config = EncoderConfig(dim, buckets, qmax, dmax, SIMILARITIES[sim], seed)
    raw = r.take(4 * dim * buckets)
    r.finish()
    table = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(buckets, dim)
    if not np.isfinite(table).all():
        raise NonFiniteError("checkpoint table contains non-finite entries")
    return EncoderParams(version, config, table)


def save_checkpoint(params: EncoderParams, path: str | Path) -> None:
    if not np.isfinite(params.table).all():
        raise NonFiniteError("refusing to save a table with non-finite entries")
    atomic_write_bytes(path, dumps_checkpoint(params))


def load_checkpoint(path: str | Path) -> EncoderParams:
    return loads_checkpoint(Path(path).read_bytes())
