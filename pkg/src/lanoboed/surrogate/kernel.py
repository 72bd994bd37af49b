"""Import-time choice between the compiled LANO kernel and the numpy path.

Set ``LANOBOED_FORCE_NUMPY=1`` to skip the extension even when it is built.
"""

from __future__ import annotations

import os

import numpy as np

from .core import NUMPY, lano_rollout

try:
    from . import _lano_ext
except ImportError:  # extension not built
    _lano_ext = None

BACKEND = "cython" if _lano_ext is not None and os.environ.get("LANOBOED_FORCE_NUMPY") != "1" else "numpy"


def available_backends():
    return ["numpy"] + (["cython"] if _lano_ext is not None else [])


def lano_eval(arrays, beta_m, beta_f0, tangents=True, backend=None):
    """LANO rollout (+ forward-mode Jacobians) on float64 numpy inputs."""
    backend = backend or BACKEND
    beta_m = np.ascontiguousarray(np.atleast_2d(beta_m), dtype=np.float64)
    beta_f0 = np.ascontiguousarray(beta_f0, dtype=np.float64)
    if backend == "cython":
        if _lano_ext is None:
            raise RuntimeError("compiled kernel is not available")
        out = _lano_ext.rollout(arrays, beta_m, beta_f0, tangents)
        if all(np.all(np.isfinite(v)) for v in out.values()):
            return out
        # rerun on the reference path so the error names the failing layer
        backend = "numpy"
    if backend != "numpy":
        raise ValueError(f"unknown backend {backend!r}")
    return lano_rollout(arrays, beta_m, beta_f0, NUMPY, tangents=tangents)
