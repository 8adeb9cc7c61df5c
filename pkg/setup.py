"""Build script for the optional compiled kernel extension.

The package is fully functional without the extension: equiboost.kernels
falls back to the numpy implementations at import time if _fastcore is
missing. Building is attempted whenever Cython is available.
"""

import numpy
from setuptools import setup

try:
    from Cython.Build import cythonize

    ext_modules = cythonize(
        "src/equiboost/kernels/_fastcore.pyx",
        compiler_directives={"language_level": "3"},
    )
except ImportError:
    ext_modules = []

setup(
    ext_modules=ext_modules,
    include_dirs=[numpy.get_include()],
)
