"""Build script for the optional compiled derivative-bundle kernels.

The package is pure Python plus one optional Cython extension
(enrichfem.neural._bundle_ops).  If Cython or a C compiler is missing the
install proceeds without it and the numpy fallback is used at runtime.
"""

import os
import sys

from setuptools import setup

PYX = "src/enrichfem/neural/_bundle_ops.pyx"

ext_modules = []
try:
    if not os.path.exists(PYX):
        raise ImportError(f"{PYX} not present")
    import numpy as np
    from Cython.Build import cythonize
    from setuptools import Extension

    ext_modules = cythonize(
        [
            Extension(
                "enrichfem.neural._bundle_ops",
                [PYX],
                include_dirs=[np.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                extra_compile_args=["-O3"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )
except ImportError as exc:
    print(f"warning: building without compiled kernels ({exc})", file=sys.stderr)

setup(ext_modules=ext_modules)
