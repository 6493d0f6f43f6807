"""Build script for the optional compiled kernel extension.

The package is fully functional without the extension; a numpy fallback is
selected at import time.  A failed compile therefore downgrades to a warning
instead of aborting the install.
"""

import warnings

from setuptools import Extension, setup
from setuptools.command.build_ext import build_ext as _build_ext


class optional_build_ext(_build_ext):
    """Build the extension if possible, warn and continue otherwise."""

    def run(self):
        try:
            super().run()
        except Exception as exc:
            warnings.warn("compiled kernels skipped: %s" % exc)

    def build_extension(self, ext):
        try:
            super().build_extension(ext)
        except Exception as exc:
            warnings.warn("compiled kernels skipped (%s): %s" % (ext.name, exc))


def extensions():
    try:
        import numpy
        from Cython.Build import cythonize
    except ImportError as exc:
        warnings.warn("compiled kernels skipped: %s" % exc)
        return []
    import os
    if not os.path.exists("src/pdunfold/_kernels/_fused.pyx"):
        warnings.warn("compiled kernels skipped: source not present")
        return []
    ext = Extension(
        "pdunfold._kernels._fused",
        ["src/pdunfold/_kernels/_fused.pyx"],
        include_dirs=[numpy.get_include()],
        extra_compile_args=["-O3"],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
    )
    return cythonize([ext], language_level=3)


setup(ext_modules=extensions(), cmdclass={"build_ext": optional_build_ext})
