"""Hot numerical kernels with a compiled backend and a numpy fallback.

The compiled extension ``_ckernels`` is used when it was built at install
time; otherwise the pure numpy module ``_pykernels`` is selected. Callers go
through the module-level names below, which are rebound by
:func:`set_backend`.
"""
import numpy as np

from . import _pykernels

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None

_BACKENDS = {"python": _pykernels}
if _ckernels is not None:
    _BACKENDS["compiled"] = _ckernels

_NAMES = (
    "softmax_masked_fwd",
    "softmax_masked_bwd",
    "layer_norm_fwd",
    "layer_norm_bwd",
    "causal_time_grid",
    "midrank",
)

BACKEND = None


def available_backends():
    return sorted(_BACKENDS)


def set_backend(name):
    """Select the kernel implementation ("compiled" or "python")."""
    global BACKEND
    if name not in _BACKENDS:
        raise ValueError(f"kernel backend {name!r} unavailable; have {available_backends()}")
    mod = _BACKENDS[name]
    g = globals()
    for fn in _NAMES:
        g[fn] = getattr(mod, fn)
    BACKEND = name


def get_backend():
    return BACKEND


def as_rows(a):
    """View ``a`` as a C-contiguous float64 2-D array over its last axis."""
    a = np.ascontiguousarray(a, dtype=np.float64)
    return a.reshape(-1, a.shape[-1]) if a.ndim else a.reshape(1, 1)


set_backend("compiled" if _ckernels is not None else "python")
