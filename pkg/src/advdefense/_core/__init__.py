"""Numeric core: picks the compiled kernel when available.

Set ``ADVDEFENSE_PURE_PY=1`` to force the pure-numpy fallback.  The two
kernels agree to floating rounding; bit-level reproducibility is
guaranteed within one kernel, not across them.
"""

import os

from . import program
from . import pykernel

if os.environ.get("ADVDEFENSE_PURE_PY", "") not in ("", "0"):
    kernel = pykernel
else:
    try:
        from . import _graphkernel as kernel  # type: ignore[no-redef]
    except ImportError:
        kernel = pykernel

KERNEL_NAME = kernel.KERNEL_NAME
run_forward = kernel.run_forward
run_backward = kernel.run_backward
matvec = kernel.matvec
