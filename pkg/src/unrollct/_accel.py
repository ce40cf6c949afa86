"""Backend selection for the hot loops.

The ray tracer and the voxel-driven backprojector each have a numba kernel
and a vectorized numpy path. ``UNROLLCT_BACKEND=numpy`` forces the numpy path;
the default is numba when it imports.
"""
import os

os.environ.setdefault("NUMBA_THREADING_LAYER", "workqueue")

try:
    import numba
    from numba import njit, prange
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]
        return lambda f: f

    prange = range


def backend() -> str:
    """Return the active kernel backend, ``"numba"`` or ``"numpy"``."""
    want = os.environ.get("UNROLLCT_BACKEND", "numba").strip().lower()
    if want not in ("numba", "numpy"):
        raise ValueError(f"UNROLLCT_BACKEND must be 'numba' or 'numpy', got {want!r}")
    if want == "numba" and not HAVE_NUMBA:
        return "numpy"
    return want


def num_threads() -> int:
    if HAVE_NUMBA:
        return numba.get_num_threads()
    return 1
