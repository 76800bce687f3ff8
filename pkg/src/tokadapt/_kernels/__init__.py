"""Kernel backend selection.

Prefers the compiled extension; falls back to the pure-numpy implementation
when the extension was not built.  Set ``TOKADAPT_KERNELS=python`` to force
the fallback (used by the benchmark and the backend-equivalence tests).
"""

import os

from . import _dp_py

if os.environ.get("TOKADAPT_KERNELS", "").lower() == "python":
    _impl = _dp_py
    BACKEND = "python"
else:
    try:
        from . import _dp as _impl

        BACKEND = "cython"
    except ImportError:
        _impl = _dp_py
        BACKEND = "python"

chain_forward = _impl.chain_forward
chain_viterbi = _impl.chain_viterbi
chain_forward_backward = _impl.chain_forward_backward
loop_viterbi = _impl.loop_viterbi

__all__ = [
    "BACKEND",
    "chain_forward",
    "chain_forward_backward",
    "chain_viterbi",
    "loop_viterbi",
]
