import os

from setuptools import Extension, setup

try:
    import numpy as np
    from Cython.Build import cythonize
except ImportError:  # no compiler toolchain: pure-Python kernels only
    ext_modules = []
else:
    extensions = [
        Extension(
            "unlearn_forge._ckernels",
            ["src/unlearn_forge/_ckernels.pyx"],
            include_dirs=[np.get_include()],
            extra_compile_args=["-O3"],
            optional=True,
        )
    ]
    ext_modules = cythonize(
        extensions,
        compiler_directives={"language_level": "3", "boundscheck": False, "wraparound": False},
        quiet=True,
    )

if os.environ.get("UNLEARN_FORGE_NO_EXT"):
    ext_modules = []

setup(ext_modules=ext_modules)
