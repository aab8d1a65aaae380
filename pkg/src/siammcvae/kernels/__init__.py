"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The numba path is used when numba imports cleanly, unless the environment
variable ``SIAMMCVAE_NUMBA`` is set to ``0``. The choice is made once at
import; :func:`use_backend` swaps it at runtime (benchmarks and tests).
"""

import os

from . import _numpy_impl

try:
    from . import _numba_impl
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    _numba_impl = None
    HAVE_NUMBA = False

_NAMES = (
    "gelu_forward",
    "gelu_backward",
    "layernorm_forward",
    "layernorm_backward",
    "chunked_attention_forward",
    "chunked_attention_backward",
    "filter_valid",
)

BACKEND = "numpy"


def use_backend(name):
    """Bind the module-level kernel names to ``"numba"`` or ``"numpy"``."""
    global BACKEND
    if name == "numba" and not HAVE_NUMBA:
        raise RuntimeError("numba backend requested but numba is not importable")
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown kernel backend {name!r}")
    impl = _numba_impl if name == "numba" else _numpy_impl
    g = globals()
    for n in _NAMES:
        g[n] = getattr(impl, n)
    BACKEND = name


def _default_backend():
    flag = os.environ.get("SIAMMCVAE_NUMBA", "1").strip().lower()
    if flag in ("0", "false", "no", "off"):
        return "numpy"
    return "numba" if HAVE_NUMBA else "numpy"


use_backend(_default_backend())
