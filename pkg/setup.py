import os

import numpy as np
from setuptools import Extension, setup

# OT_ADAPT_NO_EXT=1 skips compilation; the package then runs on the numpy fallback.
ext_modules = []
if not os.environ.get("OT_ADAPT_NO_EXT"):
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "ot_adapt._sinkhorn_ext",
                ["src/ot_adapt/_sinkhorn_ext.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=["-O3"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
