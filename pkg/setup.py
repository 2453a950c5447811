import numpy as np
from Cython.Build import cythonize
from setuptools import Extension, setup

extensions = [
    Extension(
        "ssmheight._kernels._scan",
        ["src/ssmheight/_kernels/_scan.pyx"],
        include_dirs=[np.get_include()],
        extra_compile_args=["-O3"],
        libraries=["m"],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
    )
]

setup(ext_modules=cythonize(extensions, compiler_directives={"language_level": "3"}))
