from setuptools import Extension, setup

import numpy as np
from Cython.Build import cythonize

# -ffp-contract=off: the numpy fallback in voxelformer._reference promises
# bit-identical float64 results, which FMA contraction would break.
ext = Extension(
    "voxelformer._native",
    sources=["src/voxelformer/_native.pyx"],
    include_dirs=[np.get_include()],
    extra_compile_args=["-O3", "-ffp-contract=off", "-fopenmp"],
    extra_link_args=["-fopenmp"],
    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
)

setup(ext_modules=cythonize([ext], language_level=3))
