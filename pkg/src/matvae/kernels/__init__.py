"""Hot loops: Hamming neighbour counting and pairwise distances.

The compiled Cython module is used when it was built; otherwise the numpy
fallback in :mod:`matvae.kernels._fallback` is selected.  Set
``MATVAE_PURE_PYTHON=1`` to force the fallback.  Both backends return
identical results.
"""
import os

from matvae.kernels import _fallback

BACKEND = "python"

if os.environ.get("MATVAE_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from matvae.kernels import _ckernels as _impl

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _fallback
else:
    _impl = _fallback

neighbor_counts = _impl.neighbor_counts
pairwise_distances = _impl.pairwise_distances

__all__ = ["BACKEND", "neighbor_counts", "pairwise_distances"]
