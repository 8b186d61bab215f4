import numpy as np
from Cython.Build import cythonize
from setuptools import Extension, setup

extensions = [
    Extension(
        "tokbeam._ckernels",
        ["src/tokbeam/_ckernels.pyx"],
        include_dirs=[np.get_include()],
        extra_compile_args=["-O3"],
        optional=True,  # the numpy fallback takes over if this fails to build
    )
]

setup(ext_modules=cythonize(extensions, compiler_directives={"language_level": "3"}))
