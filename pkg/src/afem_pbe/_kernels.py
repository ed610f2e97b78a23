"""Select the bisection kernel backend at import time.

The compiled extension is used when it was built; set ``AFEM_PBE_PURE_PYTHON=1``
to force the pure-Python kernel.
"""
import os

from . import _bisect_py

ClosureError = _bisect_py.ClosureError

if os.environ.get("AFEM_PBE_PURE_PYTHON"):
    bisect_kernel = _bisect_py.bisect_kernel
    BACKEND = "python"
else:
    try:
        from ._bisect_ext import bisect_kernel
    except ImportError:  # extension not built
        bisect_kernel = _bisect_py.bisect_kernel
        BACKEND = "python"
    else:
        BACKEND = "cython"

KERNELS = {"python": _bisect_py.bisect_kernel}
try:
    from ._bisect_ext import bisect_kernel as _ext_kernel

    KERNELS["cython"] = _ext_kernel
except ImportError:
    pass
