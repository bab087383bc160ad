"""Sparse support estimation in the covariance domain.

Solves, by alternating minimization, the joint problem over the fine-grid
variance vector r_x >= 0 and the scalar noise variance s >= 0:

    min  1/2 || r_y - A r_x - s v_I ||^2  +  penalty(r_x)

where A maps fine-grid variances to the vectorized coarse covariance and
v_I = vec(I). The s update is closed form; the r_x update dispatches on
the penalty: accelerated proximal gradient for l1, iteratively reweighted
l1 for the continuous exact l0 relaxation (cel0), and a primal-dual
splitting for isotropic total variation (tv).

Everything is expressed through scalar summaries of r_y plus Gram products
A^T A r_x, so the M^4-sized residual is never materialized inside loops:

    || r_y - A r - s v_I ||^2 = ||r_y||^2 - 2 s tr(R_y) + s^2 M^2
                                - 2 r^T (A^T r_y - s cn2) + r^T A^T A r

with cn2 the squared column norms of A.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .covariance import CovarianceData
from .errors import (PreconditionError, SolverFailureError,
                     UnsupportedRegularizerError)
from .operators import (ForwardModel, grad2d, grad2d_adj, grad_norm_sq,
                        operator_norm)

REGULARIZER_KINDS = ("cel0", "l1", "tv")

# Membership threshold for the recovered support: floating-point iterates
# are never exactly zero, so "nonzero" means above this fraction of max.
SUPPORT_RTOL = 1e-8


@dataclass(frozen=True)
class Regularizer:
    kind: str
    lam: float

    def __post_init__(self):
        if self.kind not in REGULARIZER_KINDS:
            raise UnsupportedRegularizerError(
                f"unknown regularizer kind {self.kind!r}")
        if self.lam < 0:
            raise ValueError("lam must be nonnegative")


@dataclass(frozen=True)
class SolverOptions:
    outer_max: int = 50
    inner_max: int = 500
    rel_tol: float = 1e-5
    irl1_rounds: int = 10
    seed: int = 0
    # Optional quadratic proximal weight on the r_x subproblem (the
    # theory-compliant variant of the alternation; 0 reproduces the plain
    # scheme, which converges empirically).
    prox_weight: float = 0.0

    def __post_init__(self):
        if min(self.outer_max, self.inner_max, self.irl1_rounds) < 1:
            raise ValueError("iteration counts must be >= 1")
        if self.rel_tol <= 0:
            raise ValueError("rel_tol must be positive")
        if self.prox_weight < 0:
            raise ValueError("prox_weight must be nonnegative")


@dataclass(frozen=True)
class SupportResult:
    r_x: np.ndarray
    support: np.ndarray
    s: float
    trace: list[float] = field(default_factory=list)
    restarts: int = 0


def support_from_rx(r_x: np.ndarray) -> np.ndarray:
    """Indices of the hard-nonzero entries of a variance vector."""
    top = float(r_x.max(initial=0.0))
    if top <= 0.0:
        return np.empty(0, dtype=np.int64)
    return np.flatnonzero(r_x > SUPPORT_RTOL * top)


class SupportWorkspace:
    """Per-(model, r_y) precomputations shared by all solvers.

    The only expensive pieces are one full A^T application and the power
    iteration for ||A||^2 (cached on first use, seeded, deterministic).
    """

    def __init__(self, model: ForwardModel, r_y: np.ndarray,
                 seed: int = 0):
        self.model = model
        self.r_y = np.asarray(r_y, dtype=np.float64)
        M = model.M
        if self.r_y.shape != (M ** 4,):
            raise PreconditionError(
                f"r_y must have length M^4 = {M ** 4}")
        self.g_ry = model.apply_A_adjoint(self.r_y)
        self.cn2 = model.column_norms_sq()
        diag_idx = np.arange(M * M) * (M * M + 1)
        self.tr_ry = float(self.r_y[diag_idx].sum())
        self.ry_sq = float(self.r_y @ self.r_y)
        self.m_sq = M * M
        self._lip = None
        self._seed = seed

    @property
    def lip(self) -> float:
        """||A||^2, the Lipschitz constant of the quadratic's gradient.

        Power iteration runs on the PSD Gram operator directly, whose
        spectral radius is ||A||^2; operator_norm returns its square root.
        """
        if self._lip is None:
            n = operator_norm(
                lambda v: v, self.model.gram_apply,
                (self.model.L * self.model.L,), iters=300, tol=1e-7,
                seed=self._seed)
            self._lip = n.value ** 2
        return self._lip

    def noise_update(self, r_x: np.ndarray) -> float:
        """Closed-form minimizer over s, clipped at zero."""
        s = (self.tr_ry - self.model.trace_A(r_x)) / self.m_sq
        return max(0.0, s)

    def weight(self, s: float) -> np.ndarray:
        """A^T (r_y - s v_I)."""
        return self.g_ry - s * self.cn2

    def const_sq(self, s: float) -> float:
        """|| r_y - s v_I ||^2."""
        return self.ry_sq - 2.0 * s * self.tr_ry + s * s * self.m_sq

    def fidelity(self, r_x: np.ndarray, s: float,
                 gram_rx: np.ndarray | None = None) -> float:
        if gram_rx is None:
            gram_rx = self.model.gram_apply(r_x)
        return 0.5 * (self.const_sq(s) - 2.0 * float(r_x @ self.weight(s))
                      + float(r_x @ gram_rx))


def update_noise_variance(model: ForwardModel, r_y: np.ndarray,
                          r_x: np.ndarray) -> float:
    """Closed-form noise-variance update (1/M^2) v_I^T (r_y - A r_x),
    clipped at zero to honor the s >= 0 constraint."""
    M = model.M
    r_y = np.asarray(r_y, dtype=np.float64)
    if r_y.shape != (M ** 4,):
        raise PreconditionError(f"r_y must have length {M ** 4}")
    diag_idx = np.arange(M * M) * (M * M + 1)
    s = (float(r_y[diag_idx].sum()) - model.trace_A(r_x)) / (M * M)
    return max(0.0, s)


def lambda_max(model: ForwardModel, r_y: np.ndarray, kind: str) -> float:
    """Smallest penalty strength that makes the zero vector a solution.

    For l1 this is the sup norm of A^T r_y; for cel0 it is the largest
    per-column ratio <a_i, r_y>^2 / (2 ||a_i||^2). No such closed form
    exists for tv.
    """
    if kind == "tv":
        raise UnsupportedRegularizerError("no lambda_max formula for tv")
    if kind not in ("cel0", "l1"):
        raise UnsupportedRegularizerError(f"unknown kind {kind!r}")
    g = model.apply_A_adjoint(np.asarray(r_y, dtype=np.float64))
    if kind == "l1":
        return float(np.abs(g).max())
    cn2 = model.column_norms_sq()
    return float((g * g / (2.0 * cn2)).max())


# ----------------------------------------------------------------------
# inner solvers
# ----------------------------------------------------------------------

def _fista_weighted_l1(ws: SupportWorkspace, s: float,
                       lam_vec: np.ndarray, opts: SolverOptions,
                       r0: np.ndarray | None = None,
                       r_anchor: np.ndarray | None = None) -> np.ndarray:
    """Accelerated proximal gradient for the nonnegative weighted-l1
    subproblem at fixed s.

    One Gram product per iteration: the extrapolated point's Gram value
    follows by linearity from the two previous proximal iterates, so the
    exact objective is tracked at no extra cost. Momentum restarts on
    objective increase; sustained increase raises SolverFailureError.
    """
    n = ws.model.L * ws.model.L
    w = ws.weight(s)
    const = ws.const_sq(s)
    rho = opts.prox_weight
    lip = 1.01 * (ws.lip + rho)
    tau = 1.0 / lip
    if r_anchor is None:
        r_anchor = np.zeros(n)

    r = np.zeros(n) if r0 is None else np.maximum(r0, 0.0)
    gram_r = ws.model.gram_apply(r)

    def objective(v, gram_v):
        fid = 0.5 * (const - 2.0 * float(v @ w) + float(v @ gram_v))
        pen = float(lam_vec @ v) + 0.5 * rho * float(
            (v - r_anchor) @ (v - r_anchor))
        return fid + pen

    obj = objective(r, gram_r)
    r_prev, gram_prev = r, gram_r
    t = 1.0
    bad_streak = 0
    for _ in range(opts.inner_max):
        t_next = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t * t))
        beta = (t - 1.0) / t_next
        z = r + beta * (r - r_prev)
        gram_z = gram_r + beta * (gram_r - gram_prev)
        grad = gram_z - w
        if rho > 0.0:
            grad = grad + rho * (z - r_anchor)
        r_new = np.maximum(0.0, z - tau * (grad + lam_vec))
        gram_new = ws.model.gram_apply(r_new)
        obj_new = objective(r_new, gram_new)

        if obj_new > obj * (1.0 + 1e-12) + 1e-300:
            bad_streak += 1
            if bad_streak >= 10:
                raise SolverFailureError(
                    "proximal gradient iteration diverged "
                    "(objective increased 10 times in a row)")
            # restart momentum and retake the step from r
            t_next = 1.0
            z = r
            grad = gram_r - w
            if rho > 0.0:
                grad = grad + rho * (z - r_anchor)
            r_new = np.maximum(0.0, z - tau * (grad + lam_vec))
            gram_new = ws.model.gram_apply(r_new)
            obj_new = objective(r_new, gram_new)
        else:
            bad_streak = 0

        done = abs(obj_new - obj) <= opts.rel_tol * max(abs(obj_new), 1e-300)
        r_prev, gram_prev = r, gram_r
        r, gram_r, obj, t = r_new, gram_new, obj_new, t_next
        if done:
            break
    return r


def solve_rx_l1(model: ForwardModel, r_y: np.ndarray, s: float, lam: float,
                opts: SolverOptions, r0: np.ndarray | None = None,
                workspace: SupportWorkspace | None = None) -> np.ndarray:
    """Nonnegative l1-penalized least squares in the covariance domain."""
    if lam < 0 or s < 0:
        raise PreconditionError("lam and s must be nonnegative")
    ws = workspace or SupportWorkspace(model, r_y, seed=opts.seed)
    lam_vec = np.full(model.L * model.L, lam)
    return _fista_weighted_l1(ws, s, lam_vec, opts, r0=r0)


def solve_rx_cel0(model: ForwardModel, r_y: np.ndarray, s: float,
                  lam: float, opts: SolverOptions,
                  r0: np.ndarray | None = None,
                  workspace: SupportWorkspace | None = None) -> np.ndarray:
    """Iteratively reweighted l1 for the continuous exact l0 relaxation.

    Round weights are the penalty's slopes at the current iterate,
    w_i = max(0, ||a_i|| (sqrt(2 lam) - ||a_i|| r_i)), zero outside the
    capped region; each round is one weighted FISTA solve warm-started
    from the previous one. Stops early once the support stabilizes.
    """
    if lam < 0 or s < 0:
        raise PreconditionError("lam and s must be nonnegative")
    ws = workspace or SupportWorkspace(model, r_y, seed=opts.seed)
    cn = np.sqrt(ws.cn2)
    root = math.sqrt(2.0 * lam)
    r = np.zeros(model.L * model.L) if r0 is None else np.maximum(r0, 0.0)
    prev_support: np.ndarray | None = None
    for _ in range(opts.irl1_rounds):
        lam_vec = np.maximum(0.0, cn * (root - cn * np.abs(r)))
        r = _fista_weighted_l1(ws, s, lam_vec, opts, r0=r)
        cur = support_from_rx(r)
        if prev_support is not None and np.array_equal(cur, prev_support):
            break
        prev_support = cur
    return r


def tv_value(r_x: np.ndarray, n: int) -> float:
    """Isotropic total variation with one-sided neighbors and Neumann
    boundary, evaluated on the column-major vector of an n x n image."""
    img = r_x.reshape(n, n, order="F")
    g = grad2d(img)
    return float(np.sqrt(g[0] ** 2 + g[1] ** 2).sum())


def solve_rx_tv(model: ForwardModel, r_y: np.ndarray, s: float, lam: float,
                opts: SolverOptions, r0: np.ndarray | None = None,
                workspace: SupportWorkspace | None = None) -> np.ndarray:
    """Primal-dual splitting for the tv-penalized subproblem.

    The smooth quadratic enters through its gradient, nonnegativity
    through projection, and the isotropic tv term through its dual-ball
    projection. Steps satisfy 1/tau - sigma ||grad_op||^2 >= L/2.
    """
    if lam < 0 or s < 0:
        raise PreconditionError("lam and s must be nonnegative")
    ws = workspace or SupportWorkspace(model, r_y, seed=opts.seed)
    L = model.L
    w = ws.weight(s)
    const = ws.const_sq(s)

    norm_k = operator_norm(_grad2d, _grad2d_adj, (L, L),
                           iters=200, seed=opts.seed)
    k_sq = 1.01 * max(norm_k.value ** 2, 1e-12)
    lip = 1.01 * ws.lip
    tau = 1.0 / lip
    sigma = 0.99 * (1.0 / tau - 0.5 * lip) / k_sq

    r = np.zeros(L * L) if r0 is None else np.maximum(r0, 0.0)
    gram_r = ws.model.gram_apply(r)
    p = np.zeros((2, L, L))

    def objective(v, gram_v):
        return 0.5 * (const - 2.0 * float(v @ w) + float(v @ gram_v)) \
            + lam * tv_value(v, L)

    obj = objective(r, gram_r)
    best = obj
    bad_streak = 0
    for _ in range(opts.inner_max):
        grad = gram_r - w
        step = grad + grad2d_adj(p).reshape(-1, order="F")
        r_new = np.maximum(0.0, r - tau * step)
        bar = 2.0 * r_new - r
        p = p + sigma * grad2d(bar.reshape(L, L, order="F"))
        if lam > 0:
            mag = np.sqrt(p[0] ** 2 + p[1] ** 2)
            p = p * (lam / np.maximum(lam, mag))
        else:
            p[:] = 0.0

        gram_new = ws.model.gram_apply(r_new)
        obj_new = objective(r_new, gram_new)
        # Saddle-point iterations oscillate; only a sustained rise above
        # the running best signals divergence.
        if obj_new > best * (1.0 + 1e-3) + 1e-300:
            bad_streak += 1
            if bad_streak >= 10:
                raise SolverFailureError(
                    "primal-dual iteration diverged "
                    "(objective increased 10 times in a row)")
        else:
            bad_streak = 0
        best = min(best, obj_new)
        done = abs(obj_new - obj) <= opts.rel_tol * max(abs(obj_new), 1e-300)
        r, gram_r, obj = r_new, gram_new, obj_new
        if done:
            break
    return r


def regularizer_value(model: ForwardModel, reg: Regularizer,
                      r_x: np.ndarray) -> float:
    """Penalty value at r_x for the given regularizer."""
    if reg.kind == "l1":
        return reg.lam * float(np.abs(r_x).sum())
    if reg.kind == "tv":
        return reg.lam * tv_value(r_x, model.L)
    cn = model.column_norms()
    cap = math.sqrt(2.0 * reg.lam) / cn
    inside = np.abs(r_x) <= cap
    terms = reg.lam - 0.5 * cn ** 2 * (np.abs(r_x) - cap) ** 2
    return float(np.where(inside, terms, reg.lam).sum())


_SOLVERS = {
    "l1": solve_rx_l1,
    "cel0": solve_rx_cel0,
    "tv": solve_rx_tv,
}


def estimate_support(model: ForwardModel, cov: CovarianceData,
                     reg: Regularizer, opts: SolverOptions | None = None,
                     r0: np.ndarray | None = None,
                     workspace: SupportWorkspace | None = None
                     ) -> SupportResult:
    """Alternate the closed-form s update with the penalized r_x solve
    until both stabilize.

    Starts from r_x = 0 (or the supplied initialization), updates s first,
    warm-starts every inner solve, and records the joint objective after
    each outer iteration.
    """
    opts = opts or SolverOptions()
    ws = workspace or SupportWorkspace(model, cov.r_y, seed=opts.seed)
    solver = _SOLVERS[reg.kind]
    n = model.L * model.L
    r = np.zeros(n) if r0 is None else np.maximum(
        np.asarray(r0, dtype=np.float64), 0.0)
    s_prev = None
    trace: list[float] = []
    for _ in range(opts.outer_max):
        s = ws.noise_update(r)
        r_new = solver(model, cov.r_y, s, reg.lam, opts, r0=r, workspace=ws)
        trace.append(ws.fidelity(r_new, s) +
                     regularizer_value(model, reg, r_new))
        dr = np.linalg.norm(r_new - r)
        r_scale = max(np.linalg.norm(r), 1e-300)
        s_ok = s_prev is not None and \
            abs(s - s_prev) <= opts.rel_tol * max(s, 1.0)
        r = r_new
        s_prev = s
        if dr <= opts.rel_tol * r_scale and s_ok:
            break
    return SupportResult(r_x=r, support=support_from_rx(r), s=float(s_prev),
                         trace=trace)


def restart_initialization(prev_support: np.ndarray, grid: int
                           ) -> np.ndarray:
    """Midpoint seeding for an algorithmic restart.

    For each support pixel, finds its nearest distinct support pixel
    (Euclidean distance on the fine grid, ties broken by the smallest
    column-major index), rounds the midpoint half-up per coordinate, and
    returns a vector that is 1 at the midpoints and 0 elsewhere. A
    singleton support has no pair and yields the zero vector.
    """
    idx = np.unique(np.asarray(prev_support, dtype=np.int64))
    if idx.size == 0:
        raise PreconditionError("prev_support must be nonempty")
    out = np.zeros(grid * grid)
    if idx.size == 1:
        return out
    rows = idx % grid
    cols = idx // grid
    pts = np.stack([rows, cols], axis=1).astype(np.float64)
    d2 = ((pts[:, None, :] - pts[None, :, :]) ** 2).sum(axis=2)
    np.fill_diagonal(d2, np.inf)
    nearest = np.argmin(d2, axis=1)  # first minimum = smallest index
    mid_r = np.floor((rows + rows[nearest]) / 2.0 + 0.5).astype(np.int64)
    mid_c = np.floor((cols + cols[nearest]) / 2.0 + 0.5).astype(np.int64)
    out[mid_r + grid * mid_c] = 1.0
    return out


def estimate_support_with_restarts(model: ForwardModel, cov: CovarianceData,
                                   reg: Regularizer,
                                   opts: SolverOptions | None = None,
                                   max_restarts: int = 10) -> SupportResult:
    """Support estimation with midpoint-seeded restarts (cel0 only).

    Reruns the alternation from a midpoint initialization of the support
    accumulated so far; the result's support is the union over runs,
    the variance map the elementwise max, and s comes from the final run.
    Stops when a restart adds no pixel or after max_restarts reruns.
    """
    if reg.kind != "cel0":
        raise UnsupportedRegularizerError(
            "restarting applies to the cel0 regularizer only")
    opts = opts or SolverOptions()
    ws = SupportWorkspace(model, cov.r_y, seed=opts.seed)
    res = estimate_support(model, cov, reg, opts, workspace=ws)
    union = set(res.support.tolist())
    r_acc = res.r_x.copy()
    s = res.s
    trace = list(res.trace)
    restarts = 0
    for _ in range(max_restarts):
        if len(union) < 2:
            break
        init = restart_initialization(
            np.fromiter(sorted(union), dtype=np.int64), model.L)
        if not init.any():
            break
        res = estimate_support(model, cov, reg, opts, r0=init, workspace=ws)
        restarts += 1
        s = res.s
        trace.extend(res.trace)
        new_union = union | set(res.support.tolist())
        r_acc = np.maximum(r_acc, res.r_x)
        if new_union == union:
            break
        union = new_union
    support = np.fromiter(sorted(union), dtype=np.int64)
    r_out = np.zeros_like(r_acc)
    r_out[support] = r_acc[support]
    return SupportResult(r_x=r_out, support=support, s=s, trace=trace,
                         restarts=restarts)
