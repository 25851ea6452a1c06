import os

from setuptools import setup

ext_modules = []
if os.environ.get("LOCALDROP_NO_EXTENSION") != "1":
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [
                Extension(
                    "localdrop._kernels",
                    sources=["src/localdrop/_kernels.pyx"],
                    include_dirs=[np.get_include()],
                    extra_compile_args=["-O3"],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                )
            ],
            compiler_directives={"language_level": "3"},
        )
    except ImportError:
        # numpy fallback in localdrop._pykernels is used at import time
        ext_modules = []

setup(ext_modules=ext_modules)
