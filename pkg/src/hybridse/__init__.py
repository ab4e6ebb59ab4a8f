"""hybridse: real-, complex-, and hybrid-domain neural speech enhancement.

The package is organised around a small autodiff tensor core (``tensor``),
layer and activation definitions (``layers``), domain conversions
(``convert``), declarative model specs and builders (``models``), the STFT
masking pipeline (``audio``, ``pipeline``), quality metrics (``metrics``),
parameter/MAC accounting (``complexity``), and training (``training``).
Hot convolution kernels live in ``backend`` with a compiled fast path and a
numpy fallback selected at import.
"""

__version__ = "0.1.0"

from .tensor import ComplexTensor, Tape, Tensor  # noqa: F401
