"""Build the optional compiled kernels.

The package works without the extension (a pure-numpy fallback with the
same operation order is selected at import), so a failed build is not
fatal: `pip install -e . --no-build-isolation` with Cython available
compiles `adadecode._kernels`; without Cython the install is pure Python.

-ffp-contract=off keeps mul+add as two IEEE operations so the compiled
kernels stay bitwise-identical to the numpy fallback.
"""

from setuptools import Extension, setup

extensions = []
try:
    from Cython.Build import cythonize
    import numpy as np

    extensions = cythonize(
        [
            Extension(
                "adadecode._kernels",
                sources=["src/adadecode/_kernels.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=["-O3", "-ffp-contract=off"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        compiler_directives={
            "language_level": "3",
            "boundscheck": False,
            "wraparound": False,
            "cdivision": True,
        },
    )
except ImportError:
    extensions = []

setup(ext_modules=extensions)
