import os

import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:
    cythonize = None

ext_modules = []
if cythonize is not None and not os.environ.get("AFEM_PBE_NO_EXT"):
    ext_modules = cythonize(
        [
            Extension(
                "afem_pbe._bisect_ext",
                ["src/afem_pbe/_bisect_ext.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=["-O3"],
                language="c++",
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
