"""Backend selection for the hot loops.

The compiled Cython module is used when it was built; otherwise the
pure-Python implementation is loaded. Set ``TRENDBIAS_BACKEND=python`` to
force the fallback.
"""

import logging
import os

_log = logging.getLogger(__name__)


def load(name=None):
    """Return the kernel module for backend ``name`` ("cython" or "python")."""
    if name is None:
        name = os.environ.get("TRENDBIAS_BACKEND", "auto")
    if name in ("auto", "cython"):
        try:
            from trendbias import _ckernels

            return _ckernels
        except ImportError:
            if name == "cython":
                raise
            _log.debug("compiled kernels unavailable, using pure Python")
    elif name != "python":
        raise ValueError(f"unknown kernel backend {name!r}")
    from trendbias import _pykernels

    return _pykernels


impl = load()
BACKEND = "cython" if impl.__name__.endswith("_ckernels") else "python"

ACC = 0
MAP = 1
NDCG = 2
