"""Build hook for the optional compiled DP kernels.

The package works without the extension (a pure-numpy fallback is selected
at import time); building it just makes decoding and Baum-Welch much faster.
"""

from setuptools import Extension, setup


def _extensions():
    try:
        import numpy
        from Cython.Build import cythonize
    except ImportError:
        return []
    ext = Extension(
        "tokadapt._kernels._dp",
        ["src/tokadapt/_kernels/_dp.pyx"],
        include_dirs=[numpy.get_include()],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
    )
    return cythonize([ext], language_level=3)


setup(ext_modules=_extensions())
