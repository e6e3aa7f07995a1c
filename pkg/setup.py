"""Build script: compiles the optional Cython dispatch kernels.

The package works without the extension (a numpy fallback is selected at
import time), so a failed compile only disables the fast backend.
"""

from setuptools import setup

ext_modules = []
try:
    import numpy
    from Cython.Build import cythonize
    from setuptools.extension import Extension

    ext_modules = cythonize(
        [
            Extension(
                "beamoe.dispatch._kernels",
                ["src/beamoe/dispatch/_kernels.pyx"],
                include_dirs=[numpy.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        language_level=3,
    )
except ImportError:
    pass

setup(ext_modules=ext_modules)
