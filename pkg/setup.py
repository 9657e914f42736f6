import numpy as np
from Cython.Build import cythonize
from setuptools import Extension, setup

extensions = [
    Extension(
        "haris._ckernels",
        ["src/haris/_ckernels.pyx"],
        include_dirs=[np.get_include()],
        # no fast-math / fp contraction: the fallback must stay bit-identical
        extra_compile_args=["-O3", "-ffp-contract=off"],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
    )
]

setup(ext_modules=cythonize(extensions, compiler_directives={"language_level": "3"}))
