# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled strided-correlation kernels.

Both routines realize the same primitive: a stack of C cross-correlations
evaluated on a stride-q output lattice, each channel with its own kernel
window and base offset into a zero-padded input image. The forward map and
its exact transpose are the hot inner loops of every solver in the package
(the blur+bin camera operator uses C = 1; the covariance-domain operator
uses one channel per coarse displacement band).

Contract (shared with the pure-numpy fallback):

    forward:  out[c, k1, k2] = sum_{u1 < ky[c], u2 < kx[c]}
                  kern[c, u1, u2] * xpad[q*k1 + base1[c] + u1,
                                         q*k2 + base2[c] + u2]

    adjoint:  exact transpose of forward with respect to the unpadded
              image x, where xpad[p1, p2] = x[p1 - pad1, p2 - pad2]
              (zero outside).

The caller guarantees every forward index lands inside xpad. The adjoint
splits the fine grid into its q x q output phases; on each phase the
transpose is an ordinary correlation of the band stack with a phase
subsampling of the kernel, which keeps the inner loops contiguous.

Determinism: every output element is produced by exactly one thread with a
fixed summation order, so results are bit-identical for any thread count.
"""

import numpy as np

from cython.parallel import prange


def corr_forward(double[:, ::1] xpad, int q, int M,
                 double[:, :, ::1] kern, int[::1] ky, int[::1] kx,
                 int[::1] base1, int[::1] base2, int num_threads):
    cdef Py_ssize_t C = kern.shape[0]
    out_arr = np.empty((C, M, M), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    cdef Py_ssize_t t, c, k1, k2, u1, u2, i1, i2, b1, b2, kyc, kxc
    cdef double acc

    for t in prange(C * M, nogil=True, num_threads=num_threads,
                    schedule='static'):
        c = t // M
        k1 = t - c * M
        b1 = q * k1 + base1[c]
        b2 = base2[c]
        kyc = ky[c]
        kxc = kx[c]
        for k2 in range(M):
            acc = 0.0
            for u1 in range(kyc):
                i1 = b1 + u1
                i2 = q * k2 + b2
                for u2 in range(kxc):
                    acc = acc + kern[c, u1, u2] * xpad[i1, i2 + u2]
            out[c, k1, k2] = acc
    return out_arr


def corr_adjoint(double[:, :, ::1] bands, int q, int L, int pad1, int pad2,
                 double[:, :, ::1] kern, int[::1] ky, int[::1] kx,
                 int[::1] base1, int[::1] base2, int num_threads):
    cdef Py_ssize_t C = bands.shape[0]
    cdef Py_ssize_t M = bands.shape[1]
    cdef Py_ssize_t KP = kern.shape[1]
    cdef Py_ssize_t NJ = (KP + q - 1) // q
    if L > M * q:
        raise ValueError("adjoint output side must not exceed q*M")

    # Phase-packed kernels: pk[c, s1, s2, j1, j2] = kern[c, q*j1+s1, q*j2+s2]
    kern_np = np.asarray(kern)
    pk_arr = np.zeros((C, q, q, NJ, NJ), dtype=np.float64)
    for s1 in range(q):
        for s2 in range(q):
            sub = kern_np[:, s1::q, s2::q]
            pk_arr[:, s1, s2, :sub.shape[1], :sub.shape[2]] = sub
    cdef double[:, :, :, :, ::1] pk = pk_arr

    # Output pixel i = q*m + p reads band position k = m - A - j with
    # A = floor((o + q - 1 - p ... ) handled via per-(c, phase) tables:
    #   u = i + pad - base - q*k; write o = base - pad, o = q*a + b
    #   u = q*(m - a - k) + (p - b); fold p - b into [0, q) with carry.
    o1 = np.asarray(base1) - pad1
    o2 = np.asarray(base2) - pad2
    a1 = np.floor_divide(o1, q)
    b1 = o1 - q * a1
    a2 = np.floor_divide(o2, q)
    b2 = o2 - q * a2
    ph = np.arange(q)
    carry1 = (ph[None, :] < b1[:, None]).astype(np.int32)
    carry2 = (ph[None, :] < b2[:, None]).astype(np.int32)
    s1_tab_arr = (ph[None, :] - b1[:, None] + q * carry1).astype(np.int32)
    s2_tab_arr = (ph[None, :] - b2[:, None] + q * carry2).astype(np.int32)
    A1_tab_arr = (a1[:, None] + carry1).astype(np.int32)
    A2_tab_arr = (a2[:, None] + carry2).astype(np.int32)
    n1_tab_arr = np.maximum(
        0, -(-(np.asarray(ky)[:, None] - s1_tab_arr) // q)).astype(np.int32)
    n2_tab_arr = np.maximum(
        0, -(-(np.asarray(kx)[:, None] - s2_tab_arr) // q)).astype(np.int32)
    cdef int[:, ::1] s1_tab = s1_tab_arr
    cdef int[:, ::1] s2_tab = s2_tab_arr
    cdef int[:, ::1] A1_tab = A1_tab_arr
    cdef int[:, ::1] A2_tab = A2_tab_arr
    cdef int[:, ::1] n1_tab = n1_tab_arr
    cdef int[:, ::1] n2_tab = n2_tab_arr

    cdef Py_ssize_t NB = NJ + max(int(np.abs(A1_tab_arr).max(initial=0)),
                                  int(np.abs(A2_tab_arr).max(initial=0))) + 1
    cdef Py_ssize_t MP = M + 2 * NB
    bp_arr = np.zeros((C, MP, MP), dtype=np.float64)
    bp_arr[:, NB:NB + M, NB:NB + M] = bands
    cdef double[:, :, ::1] bp = bp_arr

    # Phase-planar output, re-interleaved at the end.
    op_arr = np.zeros((q, q, M, M), dtype=np.float64)
    cdef double[:, :, :, ::1] op = op_arr

    cdef Py_ssize_t Mq = M * q
    cdef Py_ssize_t t, p1, p2, m1, m2, c, j1, j2, k1, k2
    cdef double kv

    for t in prange(q * q * M, nogil=True, num_threads=num_threads,
                    schedule='static'):
        p1 = t // (q * M)
        p2 = (t // M) - p1 * q
        m1 = t - (t // M) * M
        for c in range(C):
            k1 = m1 - A1_tab[c, p1] + NB
            for j1 in range(n1_tab[c, p1]):
                for j2 in range(n2_tab[c, p2]):
                    kv = pk[c, s1_tab[c, p1], s2_tab[c, p2], j1, j2]
                    k2 = NB - A2_tab[c, p2] - j2
                    for m2 in range(M):
                        op[p1, p2, m1, m2] = op[p1, p2, m1, m2] + \
                            kv * bp[c, k1 - j1, k2 + m2]
    out = op_arr.transpose(2, 0, 3, 1).reshape(Mq, Mq)
    if Mq == L:
        return np.ascontiguousarray(out)
    return np.ascontiguousarray(out[:L, :L])
