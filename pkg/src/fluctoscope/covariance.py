"""Empirical temporal statistics of an acquired image stack.

The temporal mean and the unbiased sample covariance of the vectorized
frames are the inputs of the two estimation steps: the covariance feeds
support estimation, the mean feeds intensity estimation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import CapacityError, DimensionError, PreconditionError

# Dense M^2 x M^2 covariance storage is capped; beyond this the matrix
# alone would exceed 2 GiB and a different algorithm would be needed.
MAX_COARSE_SIZE = 64


@dataclass(frozen=True)
class ImageStack:
    """T coarse frames with acquisition metadata.

    frames: array of shape (T, M, M), nonnegative camera units.
    """

    frames: np.ndarray
    pixel_size_nm: float = 100.0
    frame_rate_hz: float = 100.0

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float64)
        if frames.ndim != 3 or frames.shape[1] != frames.shape[2]:
            raise DimensionError(
                f"frames must have shape (T, M, M), got {frames.shape}")
        object.__setattr__(self, "frames", frames)

    @property
    def T(self) -> int:
        return self.frames.shape[0]

    @property
    def M(self) -> int:
        return self.frames.shape[1]


@dataclass(frozen=True)
class CovarianceData:
    """Temporal mean and covariance of a stack, in vectorized form.

    mean: length M^2 (column-major vectorization of the mean image).
    cov: symmetric M^2 x M^2 sample covariance.
    r_y: vec(cov), column-major, length M^4.
    """

    mean: np.ndarray
    cov: np.ndarray
    r_y: np.ndarray = field(repr=False)

    def __post_init__(self):
        n = self.mean.shape[0]
        if self.cov.shape != (n, n):
            raise DimensionError("cov shape inconsistent with mean length")
        if not np.allclose(self.cov, self.cov.T,
                           rtol=1e-10, atol=1e-10 * max(1.0, float(np.abs(self.cov).max()))):
            raise ValueError("covariance matrix must be symmetric")
        if np.any(np.diag(self.cov) < -1e-12 * max(1.0, float(np.abs(self.cov).max()))):
            raise ValueError("covariance diagonal must be nonnegative")

    @property
    def M(self) -> int:
        return int(round(self.mean.shape[0] ** 0.5))

    @staticmethod
    def identity_vec(m_sq: int) -> np.ndarray:
        """vec of the m_sq x m_sq identity, the noise direction in the
        vectorized covariance model."""
        return np.eye(m_sq).reshape(-1, order="F")


def empirical_mean(stack: ImageStack) -> np.ndarray:
    """Temporal mean of the stack, vectorized column-major (length M^2)."""
    if stack.T < 1:
        raise PreconditionError("empirical_mean needs at least one frame")
    mean_img = stack.frames.mean(axis=0)
    return mean_img.reshape(-1, order="F")


def empirical_covariance(stack: ImageStack) -> CovarianceData:
    """Unbiased sample covariance of the vectorized frames.

    Two-pass computation (mean first, then centered outer products) for
    stability under large constant offsets. The deviation matrix product
    runs as a single deterministic GEMM, so results do not depend on any
    parallel reduction order.
    """
    if stack.T < 2:
        raise PreconditionError(
            "empirical_covariance needs at least two frames")
    if stack.M > MAX_COARSE_SIZE:
        raise CapacityError(
            f"dense covariance supports M <= {MAX_COARSE_SIZE}, "
            f"got M = {stack.M}")
    T, M = stack.T, stack.M
    # column-major pixel order to match the vectorization convention
    flat = stack.frames.transpose(0, 2, 1).reshape(T, M * M)
    mean = flat.mean(axis=0)
    dev = flat - mean
    cov = (dev.T @ dev) / (T - 1)
    cov = 0.5 * (cov + cov.T)
    return CovarianceData(mean=mean, cov=cov,
                          r_y=cov.reshape(-1, order="F"))
