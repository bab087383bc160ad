"""Backend selection for the strided-correlation kernels.

At import time the compiled extension is preferred; the pure-numpy fallback
is used when the extension is unavailable (source checkout without a build)
or when FLUCTOSCOPE_FORCE_FALLBACK is set. Both backends implement the same
contract, documented in _corr_ext.pyx.
"""

from __future__ import annotations

import os

from . import fallback

if os.environ.get("FLUCTOSCOPE_FORCE_FALLBACK"):
    _impl = fallback
    BACKEND = "fallback"
else:
    try:
        from . import _corr_ext as _impl  # type: ignore[no-redef]

        BACKEND = "compiled"
    except ImportError:
        _impl = fallback
        BACKEND = "fallback"


def _default_threads() -> int:
    env = os.environ.get("FLUCTOSCOPE_THREADS")
    if env:
        return max(1, int(env))
    return max(1, min(os.cpu_count() or 1, 8))


_num_threads = _default_threads()


def set_num_threads(n: int) -> None:
    global _num_threads
    cap = os.environ.get("FLUCTOSCOPE_THREADS")
    if cap:
        n = min(n, int(cap))
    _num_threads = max(1, n)


def get_num_threads() -> int:
    return _num_threads


def corr_forward(xpad, q, M, kern, ky, kx, base1, base2):
    return _impl.corr_forward(xpad, q, M, kern, ky, kx, base1, base2,
                              _num_threads)


def corr_adjoint(bands, q, L, pad1, pad2, kern, ky, kx, base1, base2):
    return _impl.corr_adjoint(bands, q, L, pad1, pad2, kern, ky, kx,
                              base1, base2, _num_threads)
