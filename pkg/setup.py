"""Build the optional Cython kernel module.

The package works without it; ``scatternet.kernels`` falls back to the numpy
implementation when the extension is missing.
"""
from setuptools import setup

ext_modules = []
try:
    import numpy as np
    from Cython.Build import cythonize
    from setuptools import Extension

    ext_modules = cythonize(
        [
            Extension(
                "scatternet._kernels",
                ["src/scatternet/_kernels.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=["-O3"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )
except ImportError:  # pragma: no cover - build without Cython
    pass

setup(ext_modules=ext_modules)
