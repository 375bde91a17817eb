"""Late-interaction FAQ retrieval with self-guided negative sampling.

Modules: ``text`` (tokenization), ``sparse`` (BM25), ``encoder`` (hashed
token embeddings and checkpoints), ``dense`` (SumMaxSim search with an
optional IVF candidate stage), ``learn`` (training strategies),
``evalbench`` (metrics, protocol, ensembling, latency) and ``cli``.
"""

from liri.kernels import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "__version__"]
