"""Convolution kernel backend selection.

Two interchangeable implementations exist: a numpy one built on
einsum (which lowers to BLAS matrix multiplies) and a compiled Cython
extension with direct loops. On numpy installs with an optimized BLAS
the einsum path wins at training shapes (see benchmarks/), so it is
the default; the extension is kept for installs without one and can be
forced for comparison. Set INTRINSIC_KERNELS to ``numpy`` or
``compiled`` to pick explicitly. Forcing ``compiled`` on an
installation without the extension is a configuration error.
"""

import os

from intrinsic.errors import ConfigError

from . import numpy_backend

_requested = os.environ.get("INTRINSIC_KERNELS", "").strip().lower()
if _requested not in ("", "numpy", "compiled"):
    raise ConfigError(
        f"INTRINSIC_KERNELS must be 'numpy' or 'compiled', got {_requested!r}"
    )

BACKEND = "numpy"
conv2d_forward = numpy_backend.conv2d_forward
conv2d_grad_weight = numpy_backend.conv2d_grad_weight
conv2d_grad_input_padded = numpy_backend.conv2d_grad_input_padded

if _requested == "compiled":
    try:
        from . import conv_cy
    except ImportError:
        raise ConfigError(
            "INTRINSIC_KERNELS=compiled but the compiled extension is "
            "not available; reinstall with a C compiler present"
        ) from None
    BACKEND = "compiled"
    conv2d_forward = conv_cy.conv2d_forward
    conv2d_grad_weight = conv_cy.conv2d_grad_weight
    conv2d_grad_input_padded = conv_cy.conv2d_grad_input_padded


def compiled_available() -> bool:
    try:
        from . import conv_cy  # noqa: F401
    except ImportError:
        return False
    return True
