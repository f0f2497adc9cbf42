"""Builds the optional compiled graph kernel.

The package works without it (a pure-numpy kernel is selected at import
time), so the extension is treated as best effort: if Cython is missing
the sdist still installs.
"""
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize

    extensions = cythonize(
        [
            Extension(
                "advdefense._core._graphkernel",
                ["src/advdefense/_core/_graphkernel.pyx"],
                extra_compile_args=["-O3"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )
except ImportError:
    extensions = []

setup(ext_modules=extensions)
