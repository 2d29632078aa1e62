"""Backend selection for the hot kernels.

Set ``MBCD_BACKEND=numpy`` to force the pure-numpy path; ``numba`` (the
default when importable) selects the jitted kernels. The choice is fixed at
import time so a whole process runs one backend end to end.
"""

from __future__ import annotations

import importlib
import os

_VALID = ("numba", "numpy")


def _select() -> str:
    name = os.environ.get("MBCD_BACKEND", "").strip().lower()
    if name and name not in _VALID:
        raise ValueError(f"MBCD_BACKEND must be one of {_VALID}, got {name!r}")
    if name == "numpy":
        return "numpy"
    if name == "numba":
        return "numba"
    try:
        importlib.import_module("numba")
        return "numba"
    except ImportError:
        return "numpy"


def get_backend(name: str):
    """Import and return a kernel module by name (for benchmarks/tests)."""
    if name == "numpy":
        return importlib.import_module("mbcdlab.kernels.reference")
    if name == "numba":
        return importlib.import_module("mbcdlab.kernels.jit")
    raise ValueError(f"unknown backend {name!r}")


BACKEND_NAME = _select()
_impl = get_backend(BACKEND_NAME)

KL_TINY = _impl.KL_TINY
relu_fwd = _impl.relu_fwd
relu_bwd = _impl.relu_bwd
softmax_fwd = _impl.softmax_fwd
softmax_bwd = _impl.softmax_bwd
log_softmax_fwd = _impl.log_softmax_fwd
log_softmax_bwd = _impl.log_softmax_bwd
layer_norm_fwd = _impl.layer_norm_fwd
layer_norm_bwd = _impl.layer_norm_bwd
cross_entropy_fwd = _impl.cross_entropy_fwd
cross_entropy_bwd = _impl.cross_entropy_bwd
kl_fwd = _impl.kl_fwd
kl_bwd_p = _impl.kl_bwd_p
kl_bwd_q = _impl.kl_bwd_q
max_last_fwd = _impl.max_last_fwd
max_last_bwd = _impl.max_last_bwd
adam_update = _impl.adam_update
