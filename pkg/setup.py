"""Build script for the optional compiled kernel extension.

The package works without the extension (a numpy fallback is selected at
import time); set FEWDET_SKIP_EXT=1 to skip compiling it entirely.
"""

import os

from setuptools import setup

ext_modules = []
if not os.environ.get("FEWDET_SKIP_EXT"):
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension

        ext = Extension(
            "fewdet._kernels._core",
            ["src/fewdet/_kernels/_core.pyx"],
            include_dirs=[np.get_include()],
            define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
        )
        ext_modules = cythonize([ext], language_level=3)
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
