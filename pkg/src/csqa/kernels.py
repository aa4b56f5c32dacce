"""Backend selection for the hot kernels.

The compiled ``_ckernels`` extension is used when it was built; otherwise the
numpy implementations in ``_kernels_py`` are used. Set ``CSQA_PURE_PYTHON=1``
to force the fallback.
"""

import os

from . import _kernels_py

BACKENDS = {"python": _kernels_py}

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None
else:
    BACKENDS["compiled"] = _ckernels

if _ckernels is not None and os.environ.get("CSQA_PURE_PYTHON", "") in ("", "0"):
    BACKEND = "compiled"
else:
    BACKEND = "python"

_impl = BACKENDS[BACKEND]


def use_backend(name):
    """Switch the active kernel backend (``"compiled"`` or ``"python"``)."""
    global BACKEND, _impl
    if name not in BACKENDS:
        raise ValueError(f"kernel backend {name!r} is not available; have {sorted(BACKENDS)}")
    BACKEND, _impl = name, BACKENDS[name]


def im2col(xp, kh, kw, sh, sw):
    return _impl.im2col(xp, kh, kw, sh, sw)


def col2im(cols, hp, wp, sh, sw):
    return _impl.col2im(cols, hp, wp, sh, sw)


def nms(boxes, scores, thresh, limit=-1):
    return _impl.nms(boxes, scores, thresh, limit)
