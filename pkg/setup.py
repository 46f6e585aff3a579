"""Build script for the compiled grid core.

The extension is optional at runtime: semvox falls back to the pure-numpy
backend when the import fails.  Set SEMVOX_NO_OPENMP=1 to build the extension
without OpenMP on toolchains that lack it.
"""

import os

import numpy as np
from Cython.Build import cythonize
from setuptools import Extension, setup

extra_compile = ["-O3", "-std=c++17", "-ffp-contract=off"]
extra_link = []
if os.environ.get("SEMVOX_NO_OPENMP") != "1":
    extra_compile.append("-fopenmp")
    extra_link.append("-fopenmp")

extensions = [
    Extension(
        "semvox._core",
        ["src/semvox/_core.pyx"],
        include_dirs=[np.get_include()],
        language="c++",
        extra_compile_args=extra_compile,
        extra_link_args=extra_link,
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
    )
]

setup(ext_modules=cythonize(extensions, language_level=3))
