"""Kernel backend selection.

The frequency-axis correlation kernels exist twice: a compiled Cython
extension (``_conv_ext``) and a numpy fallback (``py_kernels``). The compiled
module is used when it imported successfully; ``HYBRIDSE_KERNELS`` overrides
the choice (``auto`` | ``python`` | ``compiled``). Both implementations share
one contract, see ``py_kernels``.
"""

import os
from contextlib import contextmanager

from . import py_kernels

try:
    from . import _conv_ext
except ImportError:
    _conv_ext = None

_BY_NAME = {"python": py_kernels}
if _conv_ext is not None:
    _BY_NAME["compiled"] = _conv_ext


def _initial():
    choice = os.environ.get("HYBRIDSE_KERNELS", "auto").lower()
    if choice == "auto":
        return _BY_NAME.get("compiled", py_kernels)
    if choice not in _BY_NAME:
        if choice == "compiled":
            raise ImportError(
                "HYBRIDSE_KERNELS=compiled but the extension is not built; "
                "run `pip install -e . --no-build-isolation`"
            )
        raise ValueError(f"HYBRIDSE_KERNELS must be auto|python|compiled, got {choice!r}")
    return _BY_NAME[choice]


_active = _initial()


def active_name() -> str:
    return "compiled" if _conv_ext is not None and _active is _conv_ext else "python"


def available() -> tuple:
    return tuple(sorted(_BY_NAME))


@contextmanager
def use(name: str):
    """Temporarily switch the kernel backend (tests and benchmarks)."""
    global _active
    if name not in _BY_NAME:
        raise ValueError(f"backend {name!r} not available; have {available()}")
    prev = _active
    _active = _BY_NAME[name]
    try:
        yield
    finally:
        _active = prev


def corr_fwd(xp, w, stride):
    return _active.corr_fwd(xp, w, stride)


def corr_grad_input(gy, w, stride, fp):
    return _active.corr_grad_input(gy, w, stride, fp)


def corr_grad_weight(xp, gy, stride):
    return _active.corr_grad_weight(xp, gy, stride)
