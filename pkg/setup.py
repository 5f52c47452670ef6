"""Build script for the optional compiled kernel extension.

The package works without the extension (a pure-numpy backend is selected
at import time), so any failure to cythonize simply yields a slower build.
"""

from setuptools import Extension, setup

ext_modules = []
try:
    import numpy
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "metaloss.kernels._native",
                ["src/metaloss/kernels/_native.pyx"],
                include_dirs=[numpy.get_include()],
            )
        ],
        compiler_directives={"language_level": "3"},
    )
except ImportError:
    pass

setup(ext_modules=ext_modules)
