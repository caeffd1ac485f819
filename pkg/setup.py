import os

import numpy as np
from Cython.Build import cythonize
from setuptools import Extension, setup

# LLE_NO_OPENMP=1 builds the extension single-threaded (e.g. compilers without libgomp).
openmp = [] if os.environ.get("LLE_NO_OPENMP") else ["-fopenmp"]
# LLE_PORTABLE=1 drops host-specific instruction selection (for redistributable wheels).
arch = [] if os.environ.get("LLE_PORTABLE") else ["-march=native"]

extensions = [
    Extension(
        "lle.isp._bilateral",
        ["src/lle/isp/_bilateral.pyx"],
        include_dirs=[np.get_include()],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
        # -ffast-math only at compile time: linking with it pulls in crtfastmath,
        # which flips flush-to-zero for the whole process. libmvec provides the
        # vectorized exp the compiler emits.
        extra_compile_args=["-O3", "-ffast-math"] + arch + openmp,
        libraries=["mvec", "m"],
        extra_link_args=openmp,
    )
]

setup(ext_modules=cythonize(extensions, compiler_directives={"language_level": "3"}))
