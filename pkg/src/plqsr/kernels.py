"""Backend selection for the fake-quantization kernels.

The compiled extension is used when it imports; otherwise the NumPy
implementation.  Set ``PLQSR_KERNELS=python`` to force the fallback.
"""

import os

from plqsr import _pykernels

if os.environ.get("PLQSR_KERNELS", "").lower() == "python":
    _impl = _pykernels
    BACKEND = "python"
else:
    try:
        from plqsr import _ckernels as _impl
        BACKEND = "cython"
    except ImportError:
        _impl = _pykernels
        BACKEND = "python"

uniform_fq = _impl.uniform_fq
uniform_codes = _impl.uniform_codes
uniform_bwd = _impl.uniform_bwd
sym_fq = _impl.sym_fq
sym_bwd = _impl.sym_bwd
piecewise_fq = _impl.piecewise_fq
piecewise_codes = _impl.piecewise_codes
piecewise_bwd = _impl.piecewise_bwd
im2col = _impl.im2col
col2im = _impl.col2im


def backends():
    """Map of every importable backend name to its module."""
    out = {"python": _pykernels}
    try:
        from plqsr import _ckernels
    except ImportError:
        pass
    else:
        out["cython"] = _ckernels
    return out
