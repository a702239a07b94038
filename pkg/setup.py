"""Build the optional compiled kernel core.

The Cython extension is optional: if it cannot be compiled the package
still installs and falls back to the pure numpy kernels at import time.
"""
import os

from setuptools import setup

ext_modules = []
if os.environ.get("RETSEG_NO_EXT") != "1":
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [
                Extension(
                    "retseg._ckernels",
                    ["src/retseg/_ckernels.pyx"],
                    include_dirs=[np.get_include()],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                    extra_compile_args=["-O3"],
                )
            ],
            compiler_directives={
                "language_level": "3",
                "boundscheck": False,
                "wraparound": False,
                "cdivision": True,
                "initializedcheck": False,
            },
        )
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
