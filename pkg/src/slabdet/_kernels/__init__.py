"""Kernel backend selection.

The hot training kernels (2D convolution, bilinear sampling) exist twice:
a compiled Cython core and a pure-numpy fallback with identical contracts.
Selection is per kernel. Convolution stays on the numpy path even when the
core is importable, because im2col plus a BLAS matmul beats the compiled
loops on every shape we run (see benchmarks/bench_kernels.py); the gather/
scatter-bound bilinear sampler is where compilation pays and uses the core.
Set ``SLABDET_PURE=1`` to force the fallback everywhere (used by the parity
tests and the benchmark).
"""

import os

from . import reference

COMPILED = False
_sampler = reference

if os.environ.get("SLABDET_PURE") != "1":
    try:
        from . import _core as _compiled

        _sampler = _compiled
        COMPILED = True
    except ImportError:
        pass

conv2d_forward = reference.conv2d_forward
conv2d_backward = reference.conv2d_backward
bilinear_forward = _sampler.bilinear_forward
bilinear_backward = _sampler.bilinear_backward


def backend_name() -> str:
    return "compiled" if COMPILED else "numpy"
