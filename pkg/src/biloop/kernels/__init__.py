"""Hot-kernel dispatch: compiled extension when available, numpy fallback otherwise.

Set BILOOP_PURE_PYTHON=1 to force the fallback. Both backends implement the
same float64 arithmetic; see benchmarks/bench_kernels.py for a comparison.
"""

from __future__ import annotations

import os

from . import numpy_backend

if os.environ.get("BILOOP_PURE_PYTHON", "") not in ("", "0"):
    _impl = numpy_backend
    BACKEND = "python"
else:
    try:
        from . import _core as _impl  # type: ignore[no-redef]

        BACKEND = "compiled"
    except ImportError:
        _impl = numpy_backend
        BACKEND = "python"


def backend_name() -> str:
    return BACKEND


def _as_c_f64(arr):
    import numpy as np

    return np.ascontiguousarray(arr, dtype=np.float64)


def vlad_aggregate_soft(x, centers, weights, biases):
    return _impl.vlad_aggregate_soft(
        _as_c_f64(x), _as_c_f64(centers), _as_c_f64(weights), _as_c_f64(biases)
    )


def vlad_aggregate_soft_backward(x, centers, weights, a, g_v):
    return _impl.vlad_aggregate_soft_backward(
        _as_c_f64(x), _as_c_f64(centers), _as_c_f64(weights), _as_c_f64(a), _as_c_f64(g_v)
    )


def vlad_aggregate_hard(x, centers):
    return _impl.vlad_aggregate_hard(_as_c_f64(x), _as_c_f64(centers))


def pairwise_sqdist(a, b):
    return _impl.pairwise_sqdist(_as_c_f64(a), _as_c_f64(b))
