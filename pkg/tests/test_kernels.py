from __future__ import annotations

import subprocess
import sys

import numpy as np
import pytest

from liri import kernels
from liri._pykernels import maxsim_scores as py_maxsim, triple_grad as py_grad

BACKENDS = kernels.backends()


def _packed(rng, n_pass, dim, dtype):
    lengths = rng.integers(0, 6, size=n_pass)
    offsets = np.concatenate([[0], np.cumsum(lengths)]).astype(np.int64)
    packed = rng.normal(size=(offsets[-1], dim)).astype(dtype)
    return packed, offsets


class TestSelection:
    def test_backend_name(self):
        assert kernels.BACKEND in BACKENDS
        assert "python" in BACKENDS

    def test_fallback_without_extension(self):
        code = (
            "import sys; sys.modules['liri._ckernels'] = None\n"
            "from liri import kernels; print(kernels.BACKEND)"
        )
        out = subprocess.run([sys.executable, "-c", code], capture_output=True, text=True, check=True)
        assert out.stdout.strip() == "python"


@pytest.mark.parametrize("name", sorted(BACKENDS))
class TestParity:
    @pytest.mark.parametrize("dtype", [np.float32, np.float64])
    @pytest.mark.parametrize("mode", [0, 1])
    def test_maxsim(self, name, dtype, mode):
        impl = BACKENDS[name]
        rng = np.random.default_rng(mode)
        for dim in (1, 3, 4, 7, 16, 33):
            packed, offsets = _packed(rng, 20, dim, dtype)
            q = rng.normal(size=(int(rng.integers(0, 5)), dim)).astype(dtype)
            cand = rng.permutation(20)[:12].astype(np.int64)
            got = impl.maxsim_scores(q, packed, offsets, cand, mode)
            ref = py_maxsim(q, packed, offsets, cand, mode)
            np.testing.assert_allclose(got, ref, rtol=1e-12, atol=1e-12)
            empty = np.diff(offsets)[cand] == 0
            assert np.all(np.isneginf(got[empty]))

    @pytest.mark.parametrize("dtype", [np.float32, np.float64])
    @pytest.mark.parametrize("mode", [0, 1])
    def test_triple_grad(self, name, dtype, mode):
        impl = BACKENDS[name]
        rng = np.random.default_rng(10 + mode)
        buckets, dim = 30, 5
        table = rng.normal(size=(buckets, dim)).astype(dtype)

        def seqs(n, lo):
            lens = rng.integers(lo, 5, size=n)
            return rng.integers(0, buckets, size=lens.sum()).astype(np.int64), np.concatenate([[0], np.cumsum(lens)]).astype(np.int64)

        args = (*seqs(8, 0), *seqs(8, 1), *seqs(8, 1))
        g1 = np.zeros((buckets, dim))
        g2 = np.zeros((buckets, dim))
        l1 = impl.triple_grad(table, *args, mode, 0.125, g1)
        l2 = py_grad(table, *args, mode, 0.125, g2)
        assert l1 == pytest.approx(l2, rel=1e-12)
        np.testing.assert_allclose(g1, g2, rtol=1e-10, atol=1e-12)
