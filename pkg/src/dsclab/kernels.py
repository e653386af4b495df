"""Backend selection for the hot kernels.

The compiled extension is used when it imported cleanly; otherwise the numpy
fallback is used. Set ``DSCLAB_PURE_PYTHON=1`` to force the fallback.
"""

from __future__ import annotations

import os
from types import ModuleType

from . import _fallback

_compiled: ModuleType | None
try:
    from . import _kernels as _compiled  # type: ignore[attr-defined]
except ImportError:  # extension not built
    _compiled = None


def _pick() -> ModuleType:
    if os.environ.get("DSCLAB_PURE_PYTHON", "") not in ("", "0") or _compiled is None:
        return _fallback
    return _compiled


_active = _pick()
BACKEND = "compiled" if _active is _compiled else "python"


def available_backends() -> list[str]:
    return ["compiled", "python"] if _compiled is not None else ["python"]


def get_backend(name: str | None = None) -> ModuleType:
    if name is None:
        return _active
    if name == "python":
        return _fallback
    if name == "compiled":
        if _compiled is None:
            raise RuntimeError("compiled kernels are not built")
        return _compiled
    raise ValueError(f"unknown backend {name!r}")


def set_backend(name: str) -> None:
    """Switch the process-wide backend (used by tests and the benchmark)."""
    global _active, BACKEND
    _active = get_backend(name)
    BACKEND = name


def jacobi_eigh(m, rel_tol, max_sweeps):
    return _active.jacobi_eigh(m, rel_tol, max_sweeps)


def knn_kth_distance(store, queries, k):
    return _active.knn_kth_distance(store, queries, k)
