"""Build script for the optional compiled kernel core.

The package works without the extension (a NumPy fallback is selected at
import time), so a failed compile only costs speed, not correctness.
"""

import numpy as np
from setuptools import Extension, setup
from setuptools.command.build_ext import build_ext


class optional_build_ext(build_ext):
    """Build the Cython core if possible; warn and continue otherwise."""

    def run(self):
        try:
            super().run()
        except Exception as exc:  # toolchain missing, etc.
            print(f"WARNING: compiled kernels not built ({exc}); "
                  "falling back to the pure-NumPy kernels")

    def build_extension(self, ext):
        try:
            super().build_extension(ext)
        except Exception as exc:
            print(f"WARNING: failed to compile {ext.name} ({exc}); "
                  "falling back to the pure-NumPy kernels")


extensions = [
    Extension(
        "refield._kernels._core",
        ["src/refield/_kernels/_core.pyx"],
        include_dirs=[np.get_include()],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
        extra_compile_args=["-O3"],
    )
]

try:
    from Cython.Build import cythonize

    ext_modules = cythonize(
        extensions,
        compiler_directives={
            "language_level": "3",
            "boundscheck": False,
            "wraparound": False,
            "cdivision": True,
            "initializedcheck": False,
        },
    )
except ImportError:
    ext_modules = []

setup(ext_modules=ext_modules, cmdclass={"build_ext": optional_build_ext})
