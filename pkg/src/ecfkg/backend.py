"""Pick the training kernel at import: compiled if built, numpy otherwise.

Set ``ECFKG_PURE_PYTHON=1`` to force the numpy kernel.
"""
import os

from . import _pykernels

try:
    from . import _kernels as _compiled
except ImportError:  # extension not built
    _compiled = None

_BACKENDS = {"python": _pykernels}
if _compiled is not None:
    _BACKENDS["cython"] = _compiled

if os.environ.get("ECFKG_PURE_PYTHON", "") not in ("", "0") or _compiled is None:
    DEFAULT = "python"
else:
    DEFAULT = "cython"


def available() -> list[str]:
    return sorted(_BACKENDS)


def get(name=None):
    name = name or DEFAULT
    try:
        return _BACKENDS[name]
    except KeyError:
        raise ValueError(f"backend {name!r} unavailable; have {available()}") from None
