"""Select the batched network kernels.

The compiled extension ``gradprop._core`` is used for small workloads when it
was built; above ``COMPILED_MAX_WORK`` (batch rows times parameter count)
NumPy's own BLAS calls win, see ``benchmarks/bench_kernels.py``. Set
``GRADPROP_PURE_PYTHON=1`` to force the NumPy fallback everywhere.
"""
import os

from . import _fallback

COMPILED_MAX_WORK = 250_000

_core = None
if os.environ.get("GRADPROP_PURE_PYTHON", "") != "1":
    try:
        from . import _core
    except ImportError:
        _core = None

BACKEND = _core.BACKEND if _core is not None else _fallback.BACKEND


def _pick(X, params):
    if _core is not None and X.shape[0] * params.shape[0] <= COMPILED_MAX_WORK:
        return _core
    return _fallback


def forward_batch(params, sizes, relu, X):
    return _pick(X, params).forward_batch(params, sizes, relu, X)


def backward_batch(params, sizes, relu, X, pre, G):
    return _pick(X, params).backward_batch(params, sizes, relu, X, pre, G)
