"""Intensity and background estimation on a recovered support.

Given the temporal mean of the stack, the support from the covariance
step, and its noise-variance estimate, this module solves the penalized
joint problem

    min_{x, b}  1/2 ||Psi x - (ybar - b)||^2 + mu/2 ||grad x||^2
                + beta/2 ||grad b||^2
                + alpha/2 ( ||off-support x||^2 + sum phi(x_i)^2
                            + sum phi(b_i)^2 )

by alternating proximal-gradient solves in x and b, where phi clips
positive parts (so the alpha terms softly enforce nonnegativity and
support restriction). The smoothing weight mu is selected automatically
by Newton root finding on the discrepancy function, whose derivative
needs the sensitivity of the solution with respect to mu; that
sensitivity solves a companion quadratic problem with the same structure.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import (FlatDerivativeError, PreconditionError,
                     SolverFailureError)
from .operators import ForwardModel, grad2d, grad2d_adj, grad_norm_sq
from .support import SolverOptions


@dataclass(frozen=True)
class IntensityProblem:
    """Inputs and weights of the joint intensity/background problem.

    mean is the column-major vectorized temporal mean (length M^2);
    support holds fine-grid flat indices (column-major). alpha is the
    constraint-enforcement weight (large), beta the background smoothness
    weight, mu the intensity smoothness weight, nu_dp the discrepancy
    safety factor, s and T the noise variance and frame count from which
    the discrepancy target M^2 s / T derives.
    """

    model: ForwardModel
    mean: np.ndarray
    support: np.ndarray
    s: float
    T: int
    mu: float = 1.0
    beta: float = 20.0
    alpha: float = 1e6
    nu_dp: float = 1.0

    def __post_init__(self):
        if self.mu <= 0 or self.beta <= 0:
            raise ValueError("mu and beta must be positive")
        if self.alpha < 1e4:
            raise ValueError("alpha must be at least 1e4")
        if not 1.0 <= self.nu_dp <= 2.0:
            raise ValueError("nu_dp must lie in [1, 2]")
        if self.T < 2:
            raise ValueError("T must be at least 2")
        if self.s < 0:
            raise ValueError("s must be nonnegative")
        mean = np.asarray(self.mean, dtype=np.float64)
        if mean.shape != (self.model.M ** 2,):
            raise PreconditionError(
                f"mean must have length M^2 = {self.model.M ** 2}")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(
            self, "support",
            np.unique(np.asarray(self.support, dtype=np.int64)))

    def off_support_indicator(self) -> np.ndarray:
        """Diagonal of the off-support indicator (1 off support, 0 on)."""
        ind = np.ones(self.model.L ** 2)
        ind[self.support] = 0.0
        return ind

    def with_mu(self, mu: float) -> "IntensityProblem":
        return IntensityProblem(self.model, self.mean, self.support,
                                self.s, self.T, mu, self.beta, self.alpha,
                                self.nu_dp)

    def discrepancy_target(self) -> float:
        """nu^2/2 * M^2 * s / T, the half squared noise level of the
        temporal mean."""
        return 0.5 * self.nu_dp ** 2 * self.model.M ** 2 * self.s / self.T


@dataclass(frozen=True)
class IntensityResult:
    x: np.ndarray
    b: np.ndarray
    mu_hat: float
    f_residual: float
    iterations: dict = field(default_factory=dict)
    mu_converged: bool = True


# ----------------------------------------------------------------------
# proximal maps (separable, closed form)
# ----------------------------------------------------------------------

def prox_h(w: np.ndarray, tau: float, alpha: float,
           off_indicator: np.ndarray) -> np.ndarray:
    """Prox of the x-penalty: support restriction plus negativity
    clipping, both quadratic with weight alpha.

    Elementwise w / (1 + alpha tau d) with d = off_indicator for w >= 0
    and d = off_indicator + 1 for w < 0.
    """
    if tau <= 0 or alpha <= 0:
        raise ValueError("tau and alpha must be positive")
    denom = 1.0 + alpha * tau * (off_indicator + (w < 0))
    return w / denom


def prox_q(d: np.ndarray, delta_step: float, alpha: float) -> np.ndarray:
    """Prox of the background negativity penalty: negative entries shrink
    by 1/(1 + alpha delta), nonnegative entries pass through."""
    if delta_step <= 0:
        raise ValueError("delta_step must be positive")
    return np.where(d >= 0, d, d / (1.0 + alpha * delta_step))


def prox_h_bar(z: np.ndarray, tau: float, alpha: float,
               off_indicator: np.ndarray,
               neg_indicator: np.ndarray) -> np.ndarray:
    """Prox for the sensitivity problem: both indicator penalties are
    plain quadratics, so the map is a single elementwise shrinkage."""
    if tau <= 0 or alpha <= 0:
        raise ValueError("tau and alpha must be positive")
    return z / (1.0 + alpha * tau * (off_indicator + neg_indicator))


def _phi_sq_sum(v: np.ndarray) -> float:
    neg = np.minimum(v, 0.0)
    return float(neg @ neg)


# ----------------------------------------------------------------------
# gradients of the smooth pieces (all checked against finite differences)
# ----------------------------------------------------------------------

def grad_g(p: IntensityProblem, x: np.ndarray, b: np.ndarray,
           psi_x: np.ndarray | None = None) -> np.ndarray:
    """Gradient of 1/2 ||Psi x - (ybar - b)||^2 + mu/2 ||grad x||^2."""
    model = p.model
    L = model.L
    x_img = x.reshape(L, L, order="F")
    if psi_x is None:
        psi_x = model.apply_forward(x_img).reshape(-1, order="F")
    resid = psi_x - (p.mean - b)
    back = model.apply_adjoint(resid.reshape(model.M, model.M, order="F"))
    lap = grad2d_adj(grad2d(x_img))
    return back.reshape(-1, order="F") + p.mu * lap.reshape(-1, order="F")


def grad_r(p: IntensityProblem, b: np.ndarray,
           target: np.ndarray) -> np.ndarray:
    """Gradient of 1/2 ||b - target||^2 + beta/2 ||grad b||^2."""
    M = p.model.M
    b_img = b.reshape(M, M, order="F")
    lap = grad2d_adj(grad2d(b_img))
    return b - target + p.beta * lap.reshape(-1, order="F")


def grad_g_bar(p: IntensityProblem, xp: np.ndarray,
               source: np.ndarray) -> np.ndarray:
    """Gradient of the sensitivity quadratic:
    (Psi^T Psi + mu grad^T grad) x' + grad^T grad x_hat, with the last
    term precomputed as `source`."""
    model = p.model
    L = model.L
    xp_img = xp.reshape(L, L, order="F")
    psi = model.apply_forward(xp_img)
    back = model.apply_adjoint(psi).reshape(-1, order="F")
    lap = grad2d_adj(grad2d(xp_img)).reshape(-1, order="F")
    return back + p.mu * lap + source


# ----------------------------------------------------------------------
# subproblem solvers
# ----------------------------------------------------------------------

def _objective(p: IntensityProblem, x: np.ndarray, b: np.ndarray,
               off_ind: np.ndarray) -> float:
    model = p.model
    L, M = model.L, model.M
    psi_x = model.apply_forward(x.reshape(L, L, order="F"))
    resid = psi_x.reshape(-1, order="F") - (p.mean - b)
    gx = grad2d(x.reshape(L, L, order="F"))
    gb = grad2d(b.reshape(M, M, order="F"))
    pen = float((off_ind * x) @ x) + _phi_sq_sum(x) + _phi_sq_sum(b)
    return (0.5 * float(resid @ resid)
            + 0.5 * p.mu * float((gx * gx).sum())
            + 0.5 * p.beta * float((gb * gb).sum())
            + 0.5 * p.alpha * pen)


def solve_x_subproblem(p: IntensityProblem, b_fixed: np.ndarray,
                       x_init: np.ndarray,
                       opts: SolverOptions | None = None) -> np.ndarray:
    """Proximal-gradient solve of the x block at fixed background."""
    opts = opts or SolverOptions()
    model = p.model
    off_ind = p.off_support_indicator()
    lip = 1.01 * (model.psi_norm ** 2 + p.mu * grad_norm_sq(model.L))
    tau = 1.0 / lip
    x = np.asarray(x_init, dtype=np.float64).copy()
    target = p.mean - b_fixed

    def smooth_value(v):
        L = model.L
        psi = model.apply_forward(v.reshape(L, L, order="F"))
        resid = psi.reshape(-1, order="F") - target
        g = grad2d(v.reshape(L, L, order="F"))
        return 0.5 * float(resid @ resid) + 0.5 * p.mu * float((g * g).sum())

    def total_value(v):
        return smooth_value(v) + 0.5 * p.alpha * (
            float((off_ind * v) @ v) + _phi_sq_sum(v))

    obj = total_value(x)
    bad = 0
    for _ in range(opts.inner_max):
        x_new = prox_h(x - tau * grad_g(p, x, b_fixed), tau, p.alpha,
                       off_ind)
        obj_new = total_value(x_new)
        if obj_new > obj * (1.0 + 1e-12) + 1e-300:
            bad += 1
            if bad >= 10:
                raise SolverFailureError("x subproblem diverged")
        else:
            bad = 0
        done = abs(obj_new - obj) <= opts.rel_tol * max(abs(obj_new), 1e-300)
        x, obj = x_new, obj_new
        if done:
            break
    return x


def solve_b_subproblem(p: IntensityProblem, x_fixed: np.ndarray,
                       b_init: np.ndarray,
                       opts: SolverOptions | None = None) -> np.ndarray:
    """Proximal-gradient solve of the background block at fixed x."""
    opts = opts or SolverOptions()
    model = p.model
    lip = 1.01 * (1.0 + p.beta * grad_norm_sq(model.M))
    delta = 1.0 / lip
    psi_x = model.apply_forward(
        x_fixed.reshape(model.L, model.L, order="F")).reshape(-1, order="F")
    target = p.mean - psi_x
    b = np.asarray(b_init, dtype=np.float64).copy()

    def total_value(v):
        M = model.M
        g = grad2d(v.reshape(M, M, order="F"))
        return (0.5 * float((v - target) @ (v - target))
                + 0.5 * p.beta * float((g * g).sum())
                + 0.5 * p.alpha * _phi_sq_sum(v))

    obj = total_value(b)
    bad = 0
    for _ in range(opts.inner_max):
        b_new = prox_q(b - delta * grad_r(p, b, target), delta, p.alpha)
        obj_new = total_value(b_new)
        if obj_new > obj * (1.0 + 1e-12) + 1e-300:
            bad += 1
            if bad >= 10:
                raise SolverFailureError("background subproblem diverged")
        else:
            bad = 0
        done = abs(obj_new - obj) <= opts.rel_tol * max(abs(obj_new), 1e-300)
        b, obj = b_new, obj_new
        if done:
            break
    return b


def estimate_intensity(p: IntensityProblem,
                       opts: SolverOptions | None = None,
                       x_init: np.ndarray | None = None,
                       b_init: np.ndarray | None = None,
                       ) -> tuple[np.ndarray, np.ndarray, list[float]]:
    """Alternate the x and b solves until both stabilize.

    Returns (x, b, objective_trace); the joint objective is nonincreasing
    across outer iterations up to the subproblem tolerances.
    """
    if p.support.size == 0:
        raise PreconditionError("no support to estimate on")
    opts = opts or SolverOptions()
    model = p.model
    n, m = model.L ** 2, model.M ** 2
    off_ind = p.off_support_indicator()
    x = np.zeros(n) if x_init is None else np.asarray(x_init, float).copy()
    b = np.zeros(m) if b_init is None else np.asarray(b_init, float).copy()
    trace: list[float] = []
    for _ in range(opts.outer_max):
        x_new = solve_x_subproblem(p, b, x, opts)
        b_new = solve_b_subproblem(p, x_new, b, opts)
        trace.append(_objective(p, x_new, b_new, off_ind))
        dx = np.linalg.norm(x_new - x) / max(np.linalg.norm(x), 1e-300)
        db = np.linalg.norm(b_new - b) / max(np.linalg.norm(b), 1e-300)
        x, b = x_new, b_new
        if max(dx, db) <= opts.rel_tol:
            break
    return x, b, trace


def solve_x_prime(p: IntensityProblem, x_hat: np.ndarray,
                  opts: SolverOptions | None = None) -> np.ndarray:
    """Sensitivity of the x solution with respect to mu.

    Solves the companion quadratic problem whose optimality condition is
    the mu-derivative of the x block's: same curvature, source term
    grad^T grad x_hat, and indicator penalties frozen at x_hat's signs.
    """
    opts = opts or SolverOptions()
    model = p.model
    L = model.L
    off_ind = p.off_support_indicator()
    neg_ind = (np.asarray(x_hat) < 0).astype(np.float64)
    x_img = np.asarray(x_hat, dtype=np.float64).reshape(L, L, order="F")
    grad_xhat = grad2d(x_img)
    source = grad2d_adj(grad_xhat).reshape(-1, order="F")

    lip = 1.01 * (model.psi_norm ** 2 + p.mu * grad_norm_sq(L))
    tau = 1.0 / lip
    xp = np.zeros(L * L)

    # c = grad(x_hat)/mu enters the objective only through the source;
    # track the full value for the stopping rule.
    c = grad_xhat / p.mu

    def total_value(v):
        v_img = v.reshape(L, L, order="F")
        psi = model.apply_forward(v_img).reshape(-1, order="F")
        g = grad2d(v_img) + c
        pen = float((off_ind * v) @ v) + float((neg_ind * v) @ v)
        return (0.5 * float(psi @ psi) + 0.5 * p.mu * float((g * g).sum())
                + 0.5 * p.alpha * pen)

    obj = total_value(xp)
    bad = 0
    for _ in range(opts.inner_max):
        step = xp - tau * grad_g_bar(p, xp, source)
        xp_new = prox_h_bar(step, tau, p.alpha, off_ind, neg_ind)
        obj_new = total_value(xp_new)
        if obj_new > obj * (1.0 + 1e-12) + 1e-300:
            bad += 1
            if bad >= 10:
                raise SolverFailureError("sensitivity solve diverged")
        else:
            bad = 0
        done = abs(obj_new - obj) <= opts.rel_tol * max(abs(obj_new), 1e-300)
        xp, obj = xp_new, obj_new
        if done:
            break
    return xp


# ----------------------------------------------------------------------
# discrepancy-principle selection of mu
# ----------------------------------------------------------------------

def discrepancy_f(p: IntensityProblem, x_hat: np.ndarray,
                  b_hat: np.ndarray) -> float:
    """Half squared residual of the mean fit minus the noise target."""
    model = p.model
    psi_x = model.apply_forward(
        np.asarray(x_hat, float).reshape(model.L, model.L, order="F"))
    resid = p.mean - psi_x.reshape(-1, order="F") - b_hat
    return 0.5 * float(resid @ resid) - p.discrepancy_target()


def _f_prime(p: IntensityProblem, x_hat: np.ndarray, b_hat: np.ndarray,
             x_prime: np.ndarray) -> float:
    model = p.model
    L, M = model.L, model.M
    psi_x = model.apply_forward(
        x_hat.reshape(L, L, order="F")).reshape(-1, order="F")
    resid = p.mean - psi_x - b_hat
    back = model.apply_adjoint(
        resid.reshape(M, M, order="F")).reshape(-1, order="F")
    return float(x_prime @ back)


@dataclass(frozen=True)
class MuSelection:
    mu_hat: float
    x: np.ndarray
    b: np.ndarray
    f_value: float
    converged: bool
    iterations: int


def select_mu(p: IntensityProblem, mu0: float | None = None,
              opts: SolverOptions | None = None,
              dp_tol: float = 1e-3, newton_max: int = 20) -> MuSelection:
    """Newton iteration driving the discrepancy function to zero.

    Each step re-solves the joint problem at the current mu (warm started
    from the previous solution), computes the sensitivity, and updates
    mu <- mu - f/f' with mu clamped to [1e-8 mu0, 1e8 mu0]. Stops when
    |f| <= dp_tol * target; a numerically flat derivative raises, and
    hitting newton_max returns the best-|f| iterate with a warning.
    """
    opts = opts or SolverOptions()
    if mu0 is None:
        mu0 = float(p.mean @ p.mean) / grad_norm_sq(p.model.L)
    if mu0 <= 0:
        raise PreconditionError("mu0 must be positive")
    lo, hi = 1e-8 * mu0, 1e8 * mu0
    target = p.discrepancy_target()
    tol_abs = dp_tol * max(target, 1e-300)

    mu = float(mu0)
    x = b = None
    best: tuple[float, float, np.ndarray, np.ndarray] | None = None
    for it in range(1, newton_max + 1):
        prob = p.with_mu(mu)
        x, b, _ = estimate_intensity(prob, opts, x_init=x, b_init=b)
        f_val = discrepancy_f(prob, x, b)
        if best is None or abs(f_val) < abs(best[0]):
            best = (f_val, mu, x.copy(), b.copy())
        if abs(f_val) <= tol_abs:
            return MuSelection(mu, x, b, f_val, True, it)
        x_prime = solve_x_prime(prob, x, opts)
        fp = _f_prime(prob, x, b, x_prime)
        if abs(fp) < 1e-30:
            raise FlatDerivativeError(
                "discrepancy derivative is numerically zero; "
                "try a different mu0")
        mu = float(np.clip(mu - f_val / fp, lo, hi))

    f_val, mu_best, x_best, b_best = best
    warnings.warn(
        "discrepancy selection did not converge; returning best iterate",
        RuntimeWarning, stacklevel=2)
    return MuSelection(mu_best, x_best, b_best, f_val, False, newton_max)


def support_gradient_energy(x: np.ndarray, support: np.ndarray,
                            grid: int) -> float:
    """Diagnostic: squared gradient energy restricted to the support,
    using the redundant 8-neighborhood differences."""
    x = np.asarray(x, dtype=np.float64)
    on = np.zeros(grid * grid, dtype=bool)
    on[np.asarray(support, dtype=np.int64)] = True
    img = x.reshape(grid, grid, order="F")
    mask = on.reshape(grid, grid, order="F")
    total = 0.0
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            if dr == 0 and dc == 0:
                continue
            r0, r1 = max(0, -dr), min(grid, grid - dr)
            c0, c1 = max(0, -dc), min(grid, grid - dc)
            a = img[r0:r1, c0:c1]
            bN = img[r0 + dr:r1 + dr, c0 + dc:c1 + dc]
            both = mask[r0:r1, c0:c1] & mask[r0 + dr:r1 + dr, c0 + dc:c1 + dc]
            diff = (a - bN)[both]
            total += float(diff @ diff)
    return total
