import os

import numpy as np
from setuptools import Extension, setup

ext_modules = []
if os.environ.get("CALIB_PROBE_NO_EXT", "") != "1":
    try:
        from Cython.Build import cythonize
    except ImportError:
        print("Cython not available; installing the pure-Python kernels only")
    else:
        ext_modules = cythonize(
            [
                Extension(
                    "calib_probe._kernels",
                    ["src/calib_probe/_kernels.pyx"],
                    include_dirs=[np.get_include()],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                )
            ],
            compiler_directives={"language_level": 3},
        )

setup(ext_modules=ext_modules)
