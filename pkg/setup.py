# Builds the optional compiled kernel core. The package works without it
# (numpy fallback selected at import); set FESTA_SKIP_EXT=1 to skip the build.
import os

from setuptools import Extension, setup

ext_modules = []
if not os.environ.get("FESTA_SKIP_EXT"):
    try:
        from Cython.Build import cythonize

        ext_modules = cythonize(
            [
                Extension(
                    "festa._kernels",
                    ["src/festa/_kernels.pyx"],
                    extra_compile_args=["-O3"],
                )
            ],
            language_level=3,
        )
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
