#!/usr/bin/env python
"""Build the optional Cython kernel; the package falls back to numpy without it."""
import os

from setuptools import setup

exts = []
if not os.environ.get("FEDMESH_NO_EXT"):
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension

        exts = cythonize(
            [
                Extension(
                    "fedmesh.kernels._ckernels",
                    ["src/fedmesh/kernels/_ckernels.pyx"],
                    include_dirs=[np.get_include()],
                    # no FMA contraction: keeps the Adam update bit-equal to the numpy path
                    extra_compile_args=["-O3", "-ffp-contract=off"],
                )
            ],
            compiler_directives={"language_level": "3"},
        )
    except ImportError:
        exts = []

setup(ext_modules=exts)
