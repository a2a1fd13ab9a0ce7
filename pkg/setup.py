import os

from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:
    cythonize = None

extensions = []
if cythonize is not None and not os.environ.get("CAPATTACK_SKIP_EXT"):
    extensions = cythonize(
        [
            Extension(
                "capattack.numerics._kernels",
                ["src/capattack/numerics/_kernels.pyx"],
                extra_compile_args=["-O2"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=extensions)
