from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from liri.base import BadMagicError, NonFiniteError, TruncatedFileError
from liri.encoder import (
    EncoderConfig,
    EncoderParams,
    dumps_checkpoint,
    encode,
    encode_single,
    hash_token,
    init_params,
    load_checkpoint,
    loads_checkpoint,
    save_checkpoint,
)

SMALL = EncoderConfig(dim=4, buckets=64)


class TestConfig:
    @pytest.mark.parametrize(
        "kwargs", [{"dim": 1}, {"buckets": 0}, {"query_maxlen": 0}, {"doc_maxlen": 0}, {"similarity": "cos"}]
    )
    def test_rejects(self, kwargs):
        with pytest.raises(ValueError):
            EncoderConfig(**kwargs)

    def test_defaults(self):
        cfg = EncoderConfig()
        assert (cfg.dim, cfg.buckets, cfg.query_maxlen, cfg.doc_maxlen, cfg.similarity) == (32, 2**15, 32, 128, "neg_l2")


class TestInit:
    def test_deterministic(self):
        np.testing.assert_array_equal(init_params(SMALL, 3).table, init_params(SMALL, 3).table)

    def test_shape_and_range(self):
        p = init_params(EncoderConfig(dim=2, buckets=4), 0)
        assert p.table.shape == (4, 2) and p.version == 0
        big = init_params(EncoderConfig(dim=8, buckets=4096), 1).table
        assert big.min() >= -0.1 and big.max() <= 0.1 and big.dtype == np.float32

    def test_seeds_differ(self):
        assert not np.array_equal(init_params(SMALL, 0).table, init_params(SMALL, 1).table)

    def test_negative_version_rejected(self):
        with pytest.raises(ValueError):
            EncoderParams(-1, SMALL, np.zeros((64, 4), np.float32))


class TestHash:
    def test_stable(self):
        assert hash_token(SMALL, "cat") == hash_token(SMALL, "cat")

    def test_single_bucket(self):
        cfg = EncoderConfig(buckets=1)
        assert {hash_token(cfg, f"t{i}") for i in range(50)} == {0}

    def test_two_buckets_both_used(self):
        cfg = EncoderConfig(buckets=2)
        assert {hash_token(cfg, f"t{i}") for i in range(100)} == {0, 1}

    def test_seed_changes_mapping(self):
        a = [hash_token(EncoderConfig(hash_seed=0), f"t{i}") for i in range(20)]
        b = [hash_token(EncoderConfig(hash_seed=1), f"t{i}") for i in range(20)]
        assert a != b

    def test_load_balance(self):
        cfg = EncoderConfig(buckets=256)
        rng = np.random.default_rng(0)
        tokens = {"".join(rng.choice(list("abcdefghijklmnop"), size=8)) for _ in range(10_000)}
        load = np.bincount([hash_token(cfg, t) for t in tokens], minlength=256)
        assert load.max() < 3 * load.mean()

    def test_empty_token(self):
        with pytest.raises(ValueError):
            hash_token(SMALL, "")


class TestEncode:
    def test_query_truncation(self):
        p = init_params(EncoderConfig(dim=4, buckets=64, query_maxlen=32), 0)
        assert len(encode(p, [f"w{i}" for i in range(40)], "query")) == 32
        assert len(encode(p, [f"w{i}" for i in range(40)], "doc")) == 40

    def test_empty(self):
        m = encode(init_params(SMALL, 0), [], "query")
        assert m.rows.shape == (0, 4)

    def test_repeated_token(self):
        m = encode(init_params(SMALL, 0), ["cat", "cat"], "doc")
        assert m.bucket_ids[0] == m.bucket_ids[1]
        np.testing.assert_array_equal(m.rows[0], m.rows[1])

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.text(alphabet="abcxyz", min_size=1, max_size=4), max_size=50), st.integers(1, 20))
    def test_rows_are_table_rows(self, tokens, maxlen):
        p = init_params(EncoderConfig(dim=3, buckets=16, doc_maxlen=maxlen), 0)
        m = encode(p, tokens, "doc")
        assert len(m) == min(len(tokens), maxlen)
        np.testing.assert_array_equal(m.rows, p.table[m.bucket_ids])

    def test_single_one_token(self):
        p = init_params(SMALL, 0)
        np.testing.assert_array_equal(encode_single(p, ["cat"], "query"), p.table[hash_token(SMALL, "cat")])

    def test_single_mean(self):
        cfg = EncoderConfig(dim=2, buckets=2)
        p = EncoderParams(0, cfg, np.array([[1, 0], [0, 1]], np.float32))
        a = next(t for t in (f"t{i}" for i in range(100)) if hash_token(cfg, t) == 0)
        b = next(t for t in (f"t{i}" for i in range(100)) if hash_token(cfg, t) == 1)
        np.testing.assert_array_equal(encode_single(p, [a, b], "doc"), [0.5, 0.5])
        np.testing.assert_array_equal(encode_single(p, [a, a], "doc"), [1.0, 0.0])

    def test_single_empty(self):
        with pytest.raises(ValueError, match="cannot pool empty sequence"):
            encode_single(init_params(SMALL, 0), [], "query")


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        p = init_params(EncoderConfig(dim=5, buckets=33, query_maxlen=7, doc_maxlen=9, similarity="dot", hash_seed=-4), 2)
        p = p.with_table(p.table, version=7)
        save_checkpoint(p, tmp_path / "m.ckpt")
        back = load_checkpoint(tmp_path / "m.ckpt")
        assert back.version == 7 and back.config == p.config
        assert back.table.tobytes() == p.table.tobytes()

    def test_bad_magic(self):
        raw = bytearray(dumps_checkpoint(init_params(SMALL, 0)))
        raw[:4] = b"XXXX"
        with pytest.raises(BadMagicError, match="bad magic"):
            loads_checkpoint(bytes(raw))

    def test_truncated(self):
        raw = dumps_checkpoint(init_params(SMALL, 0))
        with pytest.raises(TruncatedFileError):
            loads_checkpoint(raw[:-1])

    def test_non_finite(self):
        raw = bytearray(dumps_checkpoint(init_params(SMALL, 0)))
        raw[-4:] = np.array([np.nan], "<f4").tobytes()
        with pytest.raises(NonFiniteError):
            loads_checkpoint(bytes(raw))

    def test_distinct_errors(self):
        assert len({BadMagicError, TruncatedFileError, NonFiniteError}) == 3
        assert not issubclass(BadMagicError, TruncatedFileError)

    def test_refuses_to_save_non_finite(self, tmp_path):
        p = init_params(SMALL, 0)
        t = p.table.copy()
        t[0, 0] = np.inf
        with pytest.raises(NonFiniteError):
            save_checkpoint(p.with_table(t), tmp_path / "x.ckpt")
        assert not (tmp_path / "x.ckpt").exists()
