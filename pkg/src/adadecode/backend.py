"""Kernel backend selection.

Prefers the compiled extension; falls back to the pure-numpy kernels when
the extension is missing or ADADECODE_PURE_PYTHON is set. Both backends
produce bitwise-identical results (see _kernels_py), so the choice only
affects speed.
"""

import os

from . import _kernels_py

if os.environ.get("ADADECODE_PURE_PYTHON"):
    _impl = _kernels_py
    BACKEND = "python"
else:
    try:
        from . import _kernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        _impl = _kernels_py
        BACKEND = "python"

# Raw kernels: no validation, caller guarantees float64 2-D inputs with
# compatible shapes. Public contracts live in linalg.
matmul = _impl.matmul
row_sums = _impl.row_sums
