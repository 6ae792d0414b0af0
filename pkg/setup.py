"""Builds the optional compiled kernel extension.

The package works without it: if the extension is absent or fails to
build, `lbcrb.kernels` falls back to the NumPy reference backend at
import time.  Build in place with

    python setup.py build_ext --inplace
"""

from pathlib import Path

from setuptools import Extension, setup

_PYX = Path("src/lbcrb/kernels/_native.pyx")

extensions = []
if _PYX.exists():
    try:
        import numpy as np
        from Cython.Build import cythonize

        extensions = cythonize(
            [
                Extension(
                    "lbcrb.kernels._native",
                    [str(_PYX)],
                    include_dirs=[np.get_include()],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                    extra_compile_args=["-O3"],
                )
            ],
            compiler_directives={"language_level": "3"},
        )
    except ImportError:
        extensions = []

setup(ext_modules=extensions)
