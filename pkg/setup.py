import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:  # pure-Python install; margex.kernels falls back to numpy
    cythonize = None

ext_modules = []
if cythonize is not None:
    ext_modules = cythonize(
        [
            Extension(
                "margex._ckernels",
                ["src/margex/_ckernels.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=["-O3"],
                optional=True,
            ),
            Extension(
                "margex._mckernel",
                ["src/margex/_mckernel.pyx"],
                include_dirs=["src/margex"],
                extra_compile_args=["-O3", "-ffast-math"],
                libraries=["mvec", "m"],
                optional=True,
            ),
        ],
        compiler_directives={
            "language_level": "3",
            "boundscheck": False,
            "wraparound": False,
            "cdivision": True,
            "initializedcheck": False,
        },
    )

setup(ext_modules=ext_modules)
