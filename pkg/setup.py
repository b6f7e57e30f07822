"""Build script.

The compiled convolution kernels are optional: if Cython or a C compiler
is unavailable the package installs anyway and falls back to the numpy
backend at import time. Set INTRINSIC_PORTABLE=1 to build for the
baseline architecture instead of the build host's.
"""

import os

from setuptools import setup

compile_args = [
    "-O3",
    "-funroll-loops",
    "-fassociative-math",
    "-fno-signed-zeros",
    "-fno-trapping-math",
]
if not os.environ.get("INTRINSIC_PORTABLE"):
    compile_args.append("-march=native")

ext_modules = []
try:
    import numpy as np
    from Cython.Build import cythonize
    from setuptools import Extension

    ext_modules = cythonize(
        [
            Extension(
                "intrinsic._kernels.conv_cy",
                ["src/intrinsic/_kernels/conv_cy.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=compile_args,
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        compiler_directives={"language_level": "3"},
    )
except Exception as exc:  # pragma: no cover - depends on build host
    print(f"skipping compiled kernels ({exc}); numpy backend will be used")

setup(ext_modules=ext_modules)
