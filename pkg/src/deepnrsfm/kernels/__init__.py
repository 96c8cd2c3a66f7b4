"""Hot kernels with a compiled backend and a numpy fallback.

The compiled extension is used when it imports; set ``NRSFM_PURE_PYTHON=1``
to force the fallback. ``BACKEND`` names the active implementation and
``get_backend(name)`` returns a specific one (used by tests and benchmarks).
"""

import os

import numpy as np

from . import _pykernels

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None

_BACKENDS = {"python": _pykernels}
if _ckernels is not None:
    _BACKENDS["compiled"] = _ckernels

if _ckernels is not None and os.environ.get("NRSFM_PURE_PYTHON", "") in ("", "0"):
    BACKEND = "compiled"
else:
    BACKEND = "python"

_impl = _BACKENDS[BACKEND]


def available_backends():
    return list(_BACKENDS)


def get_backend(name):
    return _BACKENDS[name]


def _c(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def bst_forward(x, lam, backend=None):
    impl = _BACKENDS[backend] if backend else _impl
    return impl.bst_forward(_c(x), _c(lam))


def bst_backward(x, lam, norms, g, backend=None):
    impl = _BACKENDS[backend] if backend else _impl
    return impl.bst_backward(_c(x), _c(lam), _c(norms), _c(g))


def persp_dtilde_forward(dsharp, u, v, m, backend=None):
    impl = _BACKENDS[backend] if backend else _impl
    return impl.persp_dtilde_forward(_c(dsharp), _c(u), _c(v), _c(m))


def persp_dtilde_backward(g, u, v, m, backend=None):
    impl = _BACKENDS[backend] if backend else _impl
    return impl.persp_dtilde_backward(_c(g), _c(u), _c(v), _c(m))
