"""Matrix-free imaging operators.

The acquisition model maps a fine grid of L x L = (qM) x (qM) emitter
intensities to an M x M camera image by Gaussian blurring followed by q x q
block summation. This module realizes that map Psi, its adjoint, and the
covariance-domain operator A whose columns are the elementwise squares
(Kronecker self-products) of Psi's columns, all without materializing any
matrix.

Key identity: because every q x q camera bin lies fully inside the fine
grid, Psi is exactly a stride-q cross-correlation with the box-summed PSF

    w(d) = sum_{u in [0,q)^2} h(u - d),

so Psi x[k] = sum_d w(d) x(qk + d). Consequently A r reshaped to an
M^2 x M^2 matrix is Psi diag(r) Psi^T, whose (k, k+delta) band is a
stride-q correlation of r with the product kernel

    g_delta(d) = w(d) w(d - q*delta).

The symmetric half set of displacement bands (delta = 0 plus one of each
+/- pair) suffices for every product used by the solvers; the mirrored
bands share values. All heavy lifting runs through the kernel backend in
fluctoscope._kernels.
"""

from __future__ import annotations

import math
from typing import Callable, NamedTuple

import numpy as np

from . import _kernels
from .errors import DimensionError

FWHM_TO_SIGMA = 1.0 / (2.0 * math.sqrt(2.0 * math.log(2.0)))


def gaussian_psf(fwhm_nm: float, fine_pixel_nm: float) -> np.ndarray:
    """Isotropic Gaussian kernel sampled on the fine grid.

    Truncated at +/- 4 sigma (radius ceil(4 sigma) pixels) and renormalized
    to unit sum.
    """
    if fwhm_nm <= 0 or fine_pixel_nm <= 0:
        raise ValueError("fwhm_nm and fine_pixel_nm must be positive")
    sigma = fwhm_nm * FWHM_TO_SIGMA / fine_pixel_nm
    radius = max(1, int(math.ceil(4.0 * sigma)))
    u = np.arange(-radius, radius + 1)
    prof = np.exp(-0.5 * (u / sigma) ** 2)
    kern = np.outer(prof, prof)
    return kern / kern.sum()


def img_to_vec(img: np.ndarray) -> np.ndarray:
    """Column-major vectorization of a 2D image."""
    return np.asarray(img).reshape(-1, order="F")


def vec_to_img(vec: np.ndarray, n: int) -> np.ndarray:
    """Inverse of img_to_vec for an n x n image."""
    return np.asarray(vec).reshape(n, n, order="F")


class ForwardModel:
    """Geometry and kernels of the blur + bin acquisition operator.

    Immutable after construction; all derived kernels and index tables are
    precomputed here, so instances are safe for concurrent read-only use
    and every operation below is a pure function of its inputs.

    Parameters
    ----------
    coarse_size : camera pixels per side (M).
    grid_factor : integer zoom q >= 1; the fine grid has L = q*M pixels.
    fwhm_nm : PSF full width at half maximum.
    pixel_size_nm : size of one camera pixel.
    psf : optional explicit kernel overriding the Gaussian (must be square,
        odd-sized, nonnegative; it is renormalized to unit sum).
    """

    def __init__(self, coarse_size: int, grid_factor: int, fwhm_nm: float,
                 pixel_size_nm: float, psf: np.ndarray | None = None):
        if coarse_size < 1 or grid_factor < 1:
            raise ValueError("coarse_size and grid_factor must be >= 1")
        if fwhm_nm <= 0 or pixel_size_nm <= 0:
            raise ValueError("fwhm_nm and pixel_size_nm must be positive")
        self.M = int(coarse_size)
        self.q = int(grid_factor)
        self.L = self.M * self.q
        self.fwhm_nm = float(fwhm_nm)
        self.pixel_size_nm = float(pixel_size_nm)
        self.fine_pixel_nm = self.pixel_size_nm / self.q

        if psf is None:
            psf = gaussian_psf(self.fwhm_nm, self.fine_pixel_nm)
        else:
            psf = np.array(psf, dtype=np.float64)
            if psf.ndim != 2 or psf.shape[0] != psf.shape[1] \
                    or psf.shape[0] % 2 == 0:
                raise ValueError("psf must be square with odd side")
            if np.any(psf < 0):
                raise ValueError("psf entries must be nonnegative")
            psf = psf / psf.sum()
        self.psf = psf
        if abs(self.psf.sum() - 1.0) > 1e-12:
            raise ValueError("psf normalization failed")

        self._build_kernels()

    # ------------------------------------------------------------------
    # kernel construction
    # ------------------------------------------------------------------

    def _build_kernels(self) -> None:
        q, M, L = self.q, self.M, self.L
        R = self.psf.shape[0] // 2

        # Box-summed PSF: w[d] = sum_{u in [0,q)^2} h(u - d) supported on
        # d in [-R, R + q - 1]^2.
        Kw = 2 * R + q
        w = np.zeros((Kw, Kw))
        for u1 in range(q):
            for u2 in range(q):
                # h(u - d) for d in [-R, R+q-1]: reversed psf placed at u
                w[u1:u1 + 2 * R + 1, u2:u2 + 2 * R + 1] += self.psf[::-1, ::-1]
        self._w = w
        self._d_lo = -R
        self._Kw = Kw

        # Displacement bands delta with q*|delta| < Kw, half set only:
        # (0,0) first, then delta1 > 0, then delta1 == 0, delta2 > 0.
        dmax = (Kw - 1) // q
        deltas = [(0, 0)]
        for d1 in range(0, dmax + 1):
            for d2 in range(-dmax, dmax + 1):
                if d1 == 0 and d2 <= 0:
                    continue
                deltas.append((d1, d2))

        kerns, sizes, offs, keep = [], [], [], []
        for (d1, d2) in deltas:
            if abs(d1) >= M or abs(d2) >= M:
                continue  # band has no valid coarse positions
            # g_delta(d) = w(d) * w(d - q*delta) on the overlap window
            lo1 = max(0, q * d1)
            hi1 = min(Kw, Kw + q * d1)
            lo2 = max(0, q * d2)
            hi2 = min(Kw, Kw + q * d2)
            if lo1 >= hi1 or lo2 >= hi2:
                continue
            g = w[lo1:hi1, lo2:hi2] * w[lo1 - q * d1:hi1 - q * d1,
                                        lo2 - q * d2:hi2 - q * d2]
            if not np.any(g):
                continue
            kerns.append(g)
            sizes.append((g.shape[0], g.shape[1]))
            offs.append((self._d_lo + lo1, self._d_lo + lo2))
            keep.append((d1, d2))

        self._deltas = keep
        C = len(keep)
        KP = max(s[0] for s in sizes)
        KQ = max(s[1] for s in sizes)
        kern = np.zeros((C, max(KP, KQ), max(KP, KQ)))
        ky = np.zeros(C, dtype=np.int32)
        kx = np.zeros(C, dtype=np.int32)
        o1 = np.zeros(C, dtype=np.int32)
        o2 = np.zeros(C, dtype=np.int32)
        for c, g in enumerate(kerns):
            kern[c, :g.shape[0], :g.shape[1]] = g
            ky[c], kx[c] = g.shape
            o1[c], o2[c] = offs[c]
        self._band_kern = kern
        self._band_ky, self._band_kx = ky, kx

        # Shared zero padding: base offsets must be nonnegative and the
        # largest forward read must stay inside the padded image.
        pad = max(0, -int(min(o1.min(), o2.min(), self._d_lo)))
        self._pad = pad
        self._base1 = (o1 + pad).astype(np.int32)
        self._base2 = (o2 + pad).astype(np.int32)
        hi1 = int((q * (M - 1) + self._base1 + ky).max())
        hi2 = int((q * (M - 1) + self._base2 + kx).max())
        hi_w = q * (M - 1) + pad + self._d_lo + Kw
        self._pad_shape = (max(hi1, hi_w, L + pad), max(hi2, hi_w, L + pad))

        # Single-channel stack for Psi itself.
        self._w_kern = w[None, :, :].copy()
        self._w_ky = np.array([Kw], dtype=np.int32)
        self._w_kx = np.array([Kw], dtype=np.int32)
        self._w_base1 = np.array([pad + self._d_lo], dtype=np.int32)
        self._w_base2 = np.array([pad + self._d_lo], dtype=np.int32)

        # Per-band weights for symmetric products: mirrored bands double.
        self._band_weight = np.ones(C)
        self._band_weight[1:] = 2.0

        self._flat_idx_cache: dict[str, list[np.ndarray]] | None = None
        self._psi_norm: float | None = None
        self._colnorm_sq = self._compute_colnorm_sq()

    def _pad_image(self, x: np.ndarray) -> np.ndarray:
        xp = np.zeros(self._pad_shape)
        xp[self._pad:self._pad + self.L, self._pad:self._pad + self.L] = x
        return xp

    def _compute_colnorm_sq(self) -> np.ndarray:
        # ||a_i||^2 = diag(A^T A) = sum over all bands (mirrors doubled)
        # of the squared kernels correlated with the band validity mask.
        ones = np.zeros((len(self._deltas), self.M, self.M))
        for c, (d1, d2) in enumerate(self._deltas):
            ones[c, max(0, -d1):self.M - max(0, d1),
                 max(0, -d2):self.M - max(0, d2)] = self._band_weight[c]
        sq = np.ascontiguousarray(self._band_kern ** 2)
        out = _kernels.corr_adjoint(
            ones, self.q, self.L, self._pad, self._pad, sq,
            self._band_ky, self._band_kx, self._base1, self._base2)
        return img_to_vec(out)

    def _band_flat_indices(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """Flat (column-major) index pairs (band, mirror) into the M^4
        covariance vector for every half-set band."""
        if self._flat_idx_cache is None:
            M = self.M
            idx = []
            for (d1, d2) in self._deltas:
                k1 = np.arange(max(0, -d1), M - max(0, d1))
                k2 = np.arange(max(0, -d2), M - max(0, d2))
                K1, K2 = np.meshgrid(k1, k2, indexing="ij")
                row = K1 + M * K2
                col = (K1 + d1) + M * (K2 + d2)
                fwd = (row + M * M * col).ravel()
                bwd = (col + M * M * row).ravel()
                idx.append((fwd, bwd))
            self._flat_idx_cache = idx  # type: ignore[assignment]
        return self._flat_idx_cache  # type: ignore[return-value]

    # ------------------------------------------------------------------
    # Psi and its adjoint
    # ------------------------------------------------------------------

    def apply_forward(self, x: np.ndarray) -> np.ndarray:
        """Blur + q x q bin: fine L x L image -> coarse M x M image."""
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (self.L, self.L):
            raise DimensionError(
                f"expected fine image of shape {(self.L, self.L)}, "
                f"got {x.shape}")
        out = _kernels.corr_forward(
            self._pad_image(x), self.q, self.M, self._w_kern,
            self._w_ky, self._w_kx, self._w_base1, self._w_base2)
        return out[0]

    def apply_adjoint(self, y: np.ndarray) -> np.ndarray:
        """Exact transpose of apply_forward: coarse image -> fine image."""
        y = np.asarray(y, dtype=np.float64)
        if y.shape != (self.M, self.M):
            raise DimensionError(
                f"expected coarse image of shape {(self.M, self.M)}, "
                f"got {y.shape}")
        return _kernels.corr_adjoint(
            np.ascontiguousarray(y[None, :, :]), self.q, self.L,
            self._pad, self._pad, self._w_kern, self._w_ky, self._w_kx,
            self._w_base1, self._w_base2)

    # ------------------------------------------------------------------
    # covariance-domain operator A and friends
    # ------------------------------------------------------------------

    def _check_rx(self, r_x: np.ndarray) -> np.ndarray:
        r_x = np.asarray(r_x, dtype=np.float64)
        if r_x.shape != (self.L * self.L,):
            raise DimensionError(
                f"expected fine vector of length {self.L * self.L}, "
                f"got shape {r_x.shape}")
        return r_x

    def apply_A_bands(self, r_x_img: np.ndarray) -> np.ndarray:
        """Half-set displacement bands of mat(A r_x) = Psi diag(r_x) Psi^T.

        Returns an array of shape (C, M, M); entry [c, k1, k2] is the
        (k, k + delta_c) matrix element. Positions whose partner k + delta
        falls off the coarse grid are not matrix entries and are zeroed.
        """
        bands = _kernels.corr_forward(
            self._pad_image(r_x_img), self.q, self.M, self._band_kern,
            self._band_ky, self._band_kx, self._base1, self._base2)
        M = self.M
        for c, (d1, d2) in enumerate(self._deltas):
            if d1 > 0:
                bands[c, M - d1:, :] = 0.0
            if d2 > 0:
                bands[c, :, M - d2:] = 0.0
            elif d2 < 0:
                bands[c, :, :-d2] = 0.0
        return bands

    def apply_A_adjoint_bands(self, bands: np.ndarray,
                              mirrored: bool = True) -> np.ndarray:
        """Transpose of apply_A_bands, as a fine-grid image.

        With mirrored=True the off-diagonal bands are weighted twice,
        which makes the result equal A^T applied to the full symmetric
        matrix whose half bands are given.
        """
        if mirrored:
            bands = bands * self._band_weight[:, None, None]
        bands = np.ascontiguousarray(bands)
        return _kernels.corr_adjoint(
            bands, self.q, self.L, self._pad, self._pad, self._band_kern,
            self._band_ky, self._band_kx, self._base1, self._base2)

    def apply_A(self, r_x: np.ndarray) -> np.ndarray:
        """Covariance-domain forward map: fine vector L^2 -> vector M^4.

        Computed matrix-free through the band decomposition of
        Psi diag(r_x) Psi^T; the full matrix A is never materialized.
        """
        r_x = self._check_rx(r_x)
        bands = self.apply_A_bands(vec_to_img(r_x, self.L))
        out = np.zeros(self.M ** 4)
        for c, (fwd, bwd) in enumerate(self._band_flat_indices()):
            d1, d2 = self._deltas[c]
            M = self.M
            vals = bands[c, max(0, -d1):M - max(0, d1),
                         max(0, -d2):M - max(0, d2)].ravel()
            out[fwd] = vals
            if c > 0:
                out[bwd] = vals
        return out

    def apply_A_adjoint(self, r: np.ndarray) -> np.ndarray:
        """Transpose of apply_A: component i is psi_i^T mat(r) psi_i.

        Only the symmetric part of mat(r) contributes (the quadratic form
        is blind to the antisymmetric part), so the bands of sym(mat(r))
        are gathered and pushed through the band-stack transpose.
        """
        r = np.asarray(r, dtype=np.float64)
        if r.shape != (self.M ** 4,):
            raise DimensionError(
                f"expected covariance vector of length {self.M ** 4}, "
                f"got shape {r.shape}")
        M = self.M
        bands = np.zeros((len(self._deltas), M, M))
        for c, (fwd, bwd) in enumerate(self._band_flat_indices()):
            d1, d2 = self._deltas[c]
            vals = 0.5 * (r[fwd] + r[bwd])
            bands[c, max(0, -d1):M - max(0, d1),
                  max(0, -d2):M - max(0, d2)] = vals.reshape(
                      M - abs(d1), M - abs(d2))
        return img_to_vec(self.apply_A_adjoint_bands(bands))

    def gram_apply(self, r_x: np.ndarray) -> np.ndarray:
        """A^T A r_x as a fine vector, via forward bands then weighted
        transpose. Exactly PSD and symmetric by construction."""
        r_x = self._check_rx(r_x)
        bands = self.apply_A_bands(vec_to_img(r_x, self.L))
        return img_to_vec(self.apply_A_adjoint_bands(bands))

    def trace_A(self, r_x: np.ndarray) -> float:
        """v_I^T A r_x = trace of mat(A r_x): only the diagonal band."""
        r_x = self._check_rx(r_x)
        out = _kernels.corr_forward(
            self._pad_image(vec_to_img(r_x, self.L)), self.q, self.M,
            np.ascontiguousarray(self._band_kern[:1]), self._band_ky[:1],
            self._band_kx[:1], self._base1[:1], self._base2[:1])
        return float(out.sum())

    @property
    def psi_norm(self) -> float:
        """||Psi||_2, cached after the first power iteration. The compute
        is deterministic and idempotent, so the unguarded lazy set is a
        benign race under concurrent readers."""
        if self._psi_norm is None:
            res = operator_norm(self.apply_forward, self.apply_adjoint,
                                (self.L, self.L), iters=200, seed=0)
            self._psi_norm = res.value
        return self._psi_norm

    def column_norms(self) -> np.ndarray:
        """||a_i||_2 for every fine pixel i (equals ||psi_i||_2^2)."""
        return np.sqrt(self._colnorm_sq)

    def column_norms_sq(self) -> np.ndarray:
        return self._colnorm_sq.copy()

    def __repr__(self) -> str:  # pragma: no cover
        return (f"ForwardModel(M={self.M}, q={self.q}, "
                f"fwhm_nm={self.fwhm_nm}, pixel_size_nm={self.pixel_size_nm})")


def grad2d(img: np.ndarray) -> np.ndarray:
    """Forward-difference gradient with Neumann boundary, shape (2, n, n):
    channel 0 differences down rows, channel 1 across columns, with zero
    at the trailing edge."""
    g = np.zeros((2,) + img.shape)
    g[0, :-1, :] = img[1:, :] - img[:-1, :]
    g[1, :, :-1] = img[:, 1:] - img[:, :-1]
    return g


def grad2d_adj(g: np.ndarray) -> np.ndarray:
    """Exact adjoint of grad2d: <grad2d(x), g> = <x, grad2d_adj(g)>."""
    out = np.zeros(g.shape[1:])
    out[1:, :] += g[0, :-1, :]
    out[:-1, :] -= g[0, :-1, :]
    out[:, 1:] += g[1, :, :-1]
    out[:, :-1] -= g[1, :, :-1]
    return out


def grad_norm_sq(n: int) -> float:
    """||grad2d||^2 on an n x n grid, in closed form.

    The Neumann forward-difference Laplacian's spectrum is known exactly
    (top eigenvalue 8 sin^2(pi (n-1) / (2n))); power iteration stalls on
    its clustered top, so the closed form is used for step sizes.
    """
    if n < 2:
        return 0.0
    return 8.0 * math.sin(math.pi * (n - 1) / (2 * n)) ** 2


class OperatorNormResult(NamedTuple):
    value: float
    converged: bool


def operator_norm(forward: Callable[[np.ndarray], np.ndarray],
                  adjoint: Callable[[np.ndarray], np.ndarray],
                  domain_shape: tuple[int, ...],
                  iters: int = 100,
                  tol: float = 1e-8,
                  seed: int = 0) -> OperatorNormResult:
    """Largest singular value of a linear map by power iteration.

    Iterates v <- A^T A v on a seeded random start vector and returns the
    square root of the dominant eigenvalue estimate. If the estimate has
    not stabilized to `tol` relative change within `iters` iterations the
    last iterate is returned with converged=False (callers that need a
    safe step size should add their own safety factor).
    """
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(domain_shape)
    v /= np.linalg.norm(v)
    lam = 0.0
    converged = False
    for _ in range(iters):
        w = adjoint(forward(v))
        lam_new = float(np.linalg.norm(w))
        if lam_new == 0.0:
            return OperatorNormResult(0.0, True)
        v = w / lam_new
        if abs(lam_new - lam) <= tol * max(lam_new, 1e-300):
            lam = lam_new
            converged = True
            break
        lam = lam_new
    if not converged:
        import warnings

        warnings.warn("operator_norm: power iteration did not converge",
                      RuntimeWarning, stacklevel=2)
    return OperatorNormResult(math.sqrt(lam), converged)
