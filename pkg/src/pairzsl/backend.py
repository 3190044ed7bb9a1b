"""Kernel backend selection.

The hot reductions (matrix product, row/column sums) exist twice: a Cython
extension (``pairzsl._kernels``) and a NumPy fallback (``pairzsl._kernels_py``)
with an identical, documented accumulation order. The compiled backend is
picked when the extension is importable; set ``PAIRZSL_BACKEND`` to ``python``
or ``compiled`` to force one (``auto`` is the default).
"""

import os

from .errors import ConfigError

_CHOICE = os.environ.get("PAIRZSL_BACKEND", "auto")
if _CHOICE not in ("auto", "compiled", "python"):
    raise ConfigError(
        f"PAIRZSL_BACKEND must be 'auto', 'compiled' or 'python', got {_CHOICE!r}"
    )

if _CHOICE == "python":
    from . import _kernels_py as _impl

    BACKEND = "python"
else:
    try:
        from . import _kernels as _impl  # type: ignore[no-redef]

        BACKEND = "compiled"
    except ImportError:
        if _CHOICE == "compiled":
            raise
        from . import _kernels_py as _impl  # type: ignore[no-redef]

        BACKEND = "python"

matmul = _impl.matmul
colsum = _impl.colsum
rowsum = _impl.rowsum


def active_backend() -> str:
    """Name of the kernel backend in use: 'compiled' or 'python'."""
    return BACKEND
