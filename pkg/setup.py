"""Build script: compiles the optional Cython kernel extension.

The package is fully functional without the extension (pure-numpy fallback
is selected at import time); a failed extension build is downgraded to a
warning so that source installs never hard-fail on a missing toolchain.
"""
import warnings

from setuptools import setup

try:
    import numpy
    from Cython.Build import cythonize
    from setuptools import Extension

    extensions = cythonize(
        [
            Extension(
                "stochaccel._kernels",
                ["src/stochaccel/_kernels.pyx"],
                include_dirs=[numpy.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        language_level=3,
    )
except Exception as exc:  # pragma: no cover
    warnings.warn(f"building without compiled kernels: {exc}")
    extensions = []

try:
    setup(ext_modules=extensions)
except Exception as exc:  # pragma: no cover
    warnings.warn(f"extension build failed, installing pure-python package: {exc}")
    setup(ext_modules=[])
