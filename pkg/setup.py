"""Build the optional Cython kernels.

The package works without them: ``protoshape.kernels`` falls back to the
numpy implementations when the extension cannot be imported.

    python setup.py build_ext --inplace
"""

import os

from setuptools import setup

ext_modules = []
if os.environ.get("PROTOSHAPE_NO_EXT") != "1":
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [
                Extension(
                    "protoshape.kernels._ckernels",
                    ["src/protoshape/kernels/_ckernels.pyx"],
                    include_dirs=[np.get_include()],
                    extra_compile_args=["-O3"],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                )
            ],
            compiler_directives={
                "language_level": "3",
                "boundscheck": False,
                "wraparound": False,
                "initializedcheck": False,
                "cdivision": True,
            },
        )
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
