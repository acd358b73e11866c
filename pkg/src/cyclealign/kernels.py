"""Backend selection for the dense-network kernels.

The compiled extension is preferred; set ``CYCLEALIGN_KERNELS=python`` to
force the numpy fallback.
"""

import importlib
import os

from cyclealign import _pykernels

LINEAR, RELU, TANH, SIGMOID = 0, 1, 2, 3


def load_backend(name):
    """Return the kernel module for ``name`` ("cython" or "python")."""
    if name == "python":
        return _pykernels
    if name == "cython":
        return importlib.import_module("cyclealign._ckernels")
    raise ValueError(f"unknown kernel backend {name!r}")


def _select():
    wanted = os.environ.get("CYCLEALIGN_KERNELS", "").strip().lower()
    if wanted == "python":
        return "python", _pykernels
    try:
        return "cython", load_backend("cython")
    except ImportError:
        if wanted == "cython":
            raise
        return "python", _pykernels


BACKEND, _impl = _select()

mlp_forward = _impl.mlp_forward
mlp_backward = _impl.mlp_backward


def adam_update(param, grad, m, v, lr, beta1, beta2, eps, step):
    for a in (param, grad, m, v):
        if not a.flags.c_contiguous or a.dtype != "float64":
            raise ValueError("adam_update needs C-contiguous float64 arrays")
    _impl.adam_update(param.reshape(-1), grad.reshape(-1), m.reshape(-1), v.reshape(-1),
                      lr, beta1, beta2, eps, step)
