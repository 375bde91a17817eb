"""Kernel backend selection.

The compiled extension is used when it imports; otherwise the numpy
versions in :mod:`liri._pykernels` are used. Both expose
``maxsim_scores`` and ``triple_grad`` with identical signatures.
"""

from __future__ import annotations

from liri import _pykernels

try:
    from liri import _ckernels
except ImportError:  # extension not built
    _ckernels = None

BACKEND = "cython" if _ckernels is not None else "python"
_impl = _ckernels if _ckernels is not None else _pykernels

SIM_MODES = {"neg_l2": 0, "dot": 1}

maxsim_scores = _impl.maxsim_scores
triple_grad = _impl.triple_grad


def backends() -> dict:
    """Available backends by name, for benchmarks and parity tests."""
    found = {"python": _pykernels}
    if _ckernels is not None:
        found["cython"] = _ckernels
    return found
