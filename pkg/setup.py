import os

import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:  # pure-Python install; kernels fall back at import
    cythonize = None


def _have_libdeflate():
    if os.environ.get("DIRECT_STORE_NO_LIBDEFLATE"):
        return False
    return any(os.path.exists(os.path.join(d, "libdeflate.h")) for d in ("/usr/include", "/usr/local/include"))


ext_modules = []
if cythonize is not None and not os.environ.get("DIRECT_STORE_NO_EXT"):
    ext_modules = cythonize(
        [
            Extension(
                "direct_store._ckernels",
                ["src/direct_store/_ckernels.pyx"],
                include_dirs=[np.get_include(), "src/direct_store"],
                libraries=["z", "m"] + (["deflate"] if _have_libdeflate() else []),
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")]
                + ([("DS_HAVE_LIBDEFLATE", "1")] if _have_libdeflate() else []),
                extra_compile_args=["-O3"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
