"""Pure-numpy implementation of the strided-correlation kernel contract.

Same semantics as the compiled extension (see _corr_ext.pyx). The forward
pass gathers all stride-q patches once and reduces the channel stack to a
single BLAS matmul; the adjoint scatters patch columns back with strided
slice adds. Slower than the compiled core (see benchmarks/) but dependency
free and exact up to float reassociation.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _common_window(kern, ky, kx, base1, base2):
    """Bounding window covering every channel's kernel placement.

    Returns (b1, b2, H, W): the window starts at (b1, b2) in padded-image
    coordinates and has extent H x W.
    """
    b1 = int(min(base1))
    b2 = int(min(base2))
    h = int(max(base1 + ky)) - b1
    w = int(max(base2 + kx)) - b2
    return b1, b2, h, w


def _kernel_matrix(kern, ky, kx, base1, base2):
    b1, b2, h, w = _common_window(kern, ky, kx, base1, base2)
    C = kern.shape[0]
    kmat = np.zeros((h * w, C))
    for c in range(C):
        block = np.zeros((h, w))
        r0 = base1[c] - b1
        c0 = base2[c] - b2
        block[r0:r0 + ky[c], c0:c0 + kx[c]] = kern[c, :ky[c], :kx[c]]
        kmat[:, c] = block.ravel()
    return kmat, (b1, b2, h, w)


def corr_forward(xpad, q, M, kern, ky, kx, base1, base2, num_threads=1):
    kmat, (b1, b2, h, w) = _kernel_matrix(kern, ky, kx, base1, base2)
    win = sliding_window_view(xpad, (h, w))[b1::q, b2::q]
    patches = win[:M, :M].reshape(M * M, h * w)
    out = patches @ kmat
    return np.ascontiguousarray(out.T.reshape(-1, M, M))


def corr_adjoint(bands, q, L, pad1, pad2, kern, ky, kx, base1, base2,
                 num_threads=1):
    kmat, (b1, b2, h, w) = _kernel_matrix(kern, ky, kx, base1, base2)
    M = bands.shape[1]
    C = bands.shape[0]
    cols = (bands.reshape(C, M * M).T @ kmat.T).reshape(M, M, h, w)

    hp = q * (M - 1) + b1 + h
    wp = q * (M - 1) + b2 + w
    outpad = np.zeros((max(hp, L + pad1), max(wp, L + pad2)))
    for u1 in range(h):
        r = b1 + u1
        for u2 in range(w):
            s = b2 + u2
            outpad[r:r + q * M:q, s:s + q * M:q] += cols[:, :, u1, u2]
    return np.ascontiguousarray(outpad[pad1:pad1 + L, pad2:pad2 + L])
