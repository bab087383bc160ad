"""Quantitative evaluation of reconstructions.

Localization quality uses the Jaccard index under a distance tolerance,
with estimated and ground-truth pixels paired by the Gale-Shapley stable
matching (estimated side proposing, preferences by Euclidean pixel-center
distance). Intensity quality uses PSNR against the ground-truth image,
stack fidelity uses SNR against the clean reference sequence, and the
noise-variance estimate is scored by its relative error.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .covariance import ImageStack
from .errors import DimensionError


@dataclass(frozen=True)
class EvalReport:
    jaccard: float
    correct_detections: int
    false_positives: int
    false_negatives: int
    tolerance_nm: float
    psnr_db: float
    snr_db: float
    noise_var_rel_err: float

    def __post_init__(self):
        cd, fp, fn = (self.correct_detections, self.false_positives,
                      self.false_negatives)
        denom = cd + fp + fn
        expect = 1.0 if denom == 0 else cd / denom
        if abs(self.jaccard - expect) > 1e-12:
            raise ValueError("jaccard inconsistent with stored counts")

    def to_dict(self) -> dict:
        return {
            "jaccard": self.jaccard,
            "correct_detections": self.correct_detections,
            "false_positives": self.false_positives,
            "false_negatives": self.false_negatives,
            "tolerance_nm": self.tolerance_nm,
            "psnr_db": self.psnr_db,
            "snr_db": self.snr_db,
            "noise_var_rel_err": self.noise_var_rel_err,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def stable_match(est_pts: np.ndarray, gt_pts: np.ndarray
                 ) -> dict[int, int]:
    """Gale-Shapley deferred acceptance, estimated points proposing.

    Preferences on both sides are by increasing Euclidean distance, ties
    broken by the smaller index (points are expected in column-major pixel
    order, so the tie winner is the smaller column-major index). Returns
    {est_index: gt_index} for the matched pairs.
    """
    n_est, n_gt = len(est_pts), len(gt_pts)
    if n_est == 0 or n_gt == 0:
        return {}
    diff = est_pts[:, None, :] - gt_pts[None, :, :]
    d2 = (diff ** 2).sum(axis=2)
    # stable argsort keeps smaller gt index first among ties
    pref = np.argsort(d2, axis=1, kind="stable")

    next_choice = np.zeros(n_est, dtype=np.int64)
    engaged_to = np.full(n_gt, -1, dtype=np.int64)  # gt -> est
    free = list(range(n_est - 1, -1, -1))  # pop() proposes smallest first
    while free:
        e = free.pop()
        while next_choice[e] < n_gt:
            g = int(pref[e, next_choice[e]])
            next_choice[e] += 1
            holder = engaged_to[g]
            if holder < 0:
                engaged_to[g] = e
                break
            # gt prefers the closer proposer; ties keep the smaller index
            if (d2[e, g], e) < (d2[holder, g], holder):
                engaged_to[g] = e
                free.append(holder)
                break
        # exhausted preferences: e stays unmatched
    return {int(engaged_to[g]): g for g in range(n_gt)
            if engaged_to[g] >= 0}


def _pixel_points(indices: np.ndarray, grid: int) -> np.ndarray:
    idx = np.asarray(indices, dtype=np.int64)
    return np.stack([idx % grid, idx // grid], axis=1).astype(np.float64)


def jaccard_index(est: np.ndarray, gt: np.ndarray, tol_nm: float,
                  fine_pixel_nm: float, grid: int
                  ) -> tuple[float, int, int, int]:
    """Jaccard index CD / (CD + FN + FP) under a distance tolerance.

    est and gt are flat column-major pixel indices on the same grid.
    Matches farther than tol_nm are discarded before counting. Both sets
    empty counts as perfect vacuous agreement (JI = 1, zero counts).
    """
    if tol_nm < 0:
        raise ValueError("tol_nm must be nonnegative")
    est = np.unique(np.asarray(est, dtype=np.int64))
    gt = np.unique(np.asarray(gt, dtype=np.int64))
    if est.size == 0 and gt.size == 0:
        return 1.0, 0, 0, 0
    ep = _pixel_points(est, grid)
    gp = _pixel_points(gt, grid)
    matches = stable_match(ep, gp)
    tol_px_sq = (tol_nm / fine_pixel_nm) ** 2
    cd = 0
    for e, g in matches.items():
        if ((ep[e] - gp[g]) ** 2).sum() <= tol_px_sq + 1e-12:
            cd += 1
    fp = est.size - cd
    fn = gt.size - cd
    return cd / (cd + fp + fn), cd, fp, fn


def psnr(x: np.ndarray, ref: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB, peak taken from the reference.

    Returns +inf when the images coincide; an all-zero reference has no
    peak and raises.
    """
    x = np.asarray(x, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if x.shape != ref.shape:
        raise DimensionError("psnr inputs must share a shape")
    peak = float(np.abs(ref).max())
    if peak == 0.0:
        raise ValueError("psnr reference has no peak (all zero)")
    mse = float(((x - ref) ** 2).mean())
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def snr(stack: ImageStack, ref_stack: ImageStack) -> float:
    """Stack signal-to-noise ratio in dB against a clean reference
    sequence, over all frames and pixels."""
    a = np.asarray(stack.frames, dtype=np.float64).ravel()
    r = np.asarray(ref_stack.frames, dtype=np.float64).ravel()
    if a.shape != r.shape:
        raise DimensionError("snr stacks must share a shape")
    resid = r - a
    energy = float(resid @ resid)
    if energy == 0.0:
        return math.inf
    return 10.0 * math.log10(float(r @ r) / energy)


def noise_variance_error(s_est: float, sigma2_true: float) -> float:
    """Relative error |s - sigma^2| / |sigma^2| of the noise-variance
    estimate."""
    if sigma2_true == 0:
        raise ZeroDivisionError(
            "noise_variance_error undefined for sigma2_true = 0")
    return abs(s_est - sigma2_true) / abs(sigma2_true)


def is_stable_matching(est_pts: np.ndarray, gt_pts: np.ndarray,
                       matches: dict[int, int]) -> bool:
    """Exhaustive stability check: no unmatched-together pair prefers
    each other over their assigned partners."""
    d2 = ((est_pts[:, None, :] - gt_pts[None, :, :]) ** 2).sum(axis=2)
    gt_of = dict(matches)
    est_of = {g: e for e, g in matches.items()}
    for e in range(len(est_pts)):
        for g in range(len(gt_pts)):
            if gt_of.get(e) == g:
                continue
            # e prefers g over current partner (or has none)
            cur_g = gt_of.get(e)
            e_prefers = cur_g is None or \
                (d2[e, g], g) < (d2[e, cur_g], cur_g)
            cur_e = est_of.get(g)
            g_prefers = cur_e is None or \
                (d2[e, g], e) < (d2[cur_e, g], cur_e)
            if e_prefers and g_prefers:
                return False
    return True
