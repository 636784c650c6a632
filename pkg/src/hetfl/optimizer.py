"""Sampling probabilities that trade round count against round duration.

The convergence bound says reaching precision ``eps`` takes about

    R(q) = (alpha * sum_i a_i / q_i + beta) / eps,   a_i = (p_i G_i)**2

rounds, and a round lasts about ``M = sum_i q_i t_i``. Only the ratio
``alpha / beta`` matters for the argmin, so everything here works with
``ratio = alpha / beta`` and the scaled objective

    g(q, M) = M * (sum_i a_i / q_i + 1 / ratio).

For a fixed ``M`` the problem is convex; its KKT conditions give
``q_i = sqrt(a_i / (lam + mu * t_i))`` and the two multipliers are found by
nested one-dimensional root finding. ``M`` itself is line-searched.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from .timing import SystemProfile

# floor for clients whose a_i is zero (probabilities must stay positive)
FLOOR_SCALE = 1e-6
RESIDUAL_TOL = 1e-10


class OptimizerError(ValueError):
    pass


class InfeasibleError(OptimizerError):
    pass


class EstimationError(OptimizerError):
    """Round counts are inconsistent with the bound; more loss checkpoints are needed."""


@dataclass
class BoundParams:
    """Inputs of the round-count bound.

    ``ratio`` is alpha/beta, the weight of the sampling-variance term
    relative to the constant term (``math.inf`` drops the constant term).
    """

    ratio: float
    G: np.ndarray
    p: np.ndarray
    K: int = 1
    E: int = 1
    analytic: tuple[float, float] | None = None  # (alpha, beta) when known exactly

    def __post_init__(self):
        self.G = np.asarray(self.G, dtype=np.float64)
        self.p = np.asarray(self.p, dtype=np.float64)
        if not self.ratio > 0:
            raise OptimizerError(f"ratio must be positive, got {self.ratio!r}")
        if np.any(self.G < 0) or np.any(self.p < 0):
            raise OptimizerError("G and p must be non-negative")
        if self.G.shape != self.p.shape:
            raise OptimizerError("G and p must have the same length")

    @property
    def N(self) -> int:
        return self.p.size

    @property
    def a(self) -> np.ndarray:
        return (self.p * self.G) ** 2

    @property
    def offset(self) -> float:
        """beta/alpha, the constant added to the variance term."""
        return 0.0 if math.isinf(self.ratio) else 1.0 / self.ratio


@dataclass
class SamplingSolution:
    q: np.ndarray
    M: float
    objective_value: float
    solver_diagnostics: dict = field(default_factory=dict)


def _times(profile) -> np.ndarray:
    if isinstance(profile, SystemProfile):
        return profile.t_by_client
    t = np.asarray(profile, dtype=np.float64)
    if t.ndim != 1 or np.any(t <= 0):
        raise OptimizerError("round times must be a positive vector")
    return t


def variance_term(q, a) -> float:
    q = np.asarray(q, dtype=np.float64)
    if np.any(q <= 0):
        raise OptimizerError("every q_i must be positive")
    return float(np.sum(np.asarray(a) / q))


def bound_rounds(q, bp: BoundParams, epsilon: float) -> float:
    """Round bound divided by alpha: ``(sum_i a_i/q_i + beta/alpha) / eps``."""
    if epsilon <= 0:
        raise OptimizerError("epsilon must be positive")
    return (variance_term(q, bp.a) + bp.offset) / epsilon


def time_objective(q, bp: BoundParams, profile) -> float:
    """``(sum_i q_i t_i) * (sum_i a_i/q_i + beta/alpha)``."""
    t = _times(profile)
    return float(np.dot(q, t)) * (variance_term(q, bp.a) + bp.offset)


# -- estimation of alpha/beta -------------------------------------------------


def estimate_bound_ratio(R1: float, R2: float, p, G, N: int | None = None) -> float:
    """Invert the round ratio of uniform (``R1``) and weighted (``R2``) sampling.

    With ``A = sum p_i^2 G_i^2`` and ``B = sum p_i G_i^2`` the bound predicts
    ``R1 / R2 = (x N A + 1) / (x B + 1)``; this returns ``x = alpha/beta``.
    """
    if not (R1 > 0 and R2 > 0):
        raise EstimationError(f"round counts must be positive, got R1={R1}, R2={R2}")
    p = np.asarray(p, dtype=np.float64)
    G = np.asarray(G, dtype=np.float64)
    N = p.size if N is None else N
    A = float(np.sum(p**2 * G**2))
    B = float(np.sum(p * G**2))
    rho = R1 / R2
    denom = N * A - rho * B
    if rho == 1.0 or denom == 0.0:
        raise EstimationError(f"round ratio {rho:.6g} carries no information about the ratio")
    x = (rho - 1.0) / denom
    if not (x > 0 and math.isfinite(x)):
        raise EstimationError(
            f"round ratio {rho:.6g} is inconsistent with the bound (N*A={N * A:.6g}, B={B:.6g}); "
            "use more loss checkpoints"
        )
    return x


def round_ratio(x: float, p, G, N: int | None = None) -> float:
    """Forward map of :func:`estimate_bound_ratio`: predicted ``R1 / R2``."""
    p = np.asarray(p, dtype=np.float64)
    G = np.asarray(G, dtype=np.float64)
    N = p.size if N is None else N
    return (x * N * np.sum(p**2 * G**2) + 1.0) / (x * np.sum(p * G**2) + 1.0)


def average_bound_ratio(R1s, R2s, p, G, N: int | None = None) -> tuple[float, list]:
    """Mean of the per-checkpoint estimates; inconsistent checkpoints are skipped.

    Returns ``(mean, per_level)`` where failed levels appear as ``None``.
    """
    per_level = []
    for r1, r2 in zip(R1s, R2s):
        try:
            per_level.append(estimate_bound_ratio(r1, r2, p, G, N))
        except EstimationError:
            per_level.append(None)
    good = [x for x in per_level if x is not None]
    if not good:
        raise EstimationError(f"no loss checkpoint gave a usable ratio (R1={list(R1s)}, R2={list(R2s)})")
    return float(np.mean(good)), per_level


# -- fixed-M convex subproblem ------------------------------------------------


_EPS = float(np.finfo(float).eps)


def _inner(mu: float, a: np.ndarray, tau: np.ndarray, qmin: float, pos: np.ndarray, lam0: float | None = None):
    """Solve ``sum_i q_i = 1`` with ``q_i = max(qmin, sqrt(a_i / (lam + mu tau_i)))``.

    ``tau`` are round times measured from a reference client so that
    ``mu * tau >= 0`` and the reference denominator is ``lam`` itself, which
    avoids cancellation when mass piles onto one client. Returns
    ``(q, lam, iterations)``.

    ``S(lam)**-2`` is concave in ``lam`` (a power mean with exponent -1/2),
    so a Newton step on it never overshoots past the root from the left and
    lands left of it from the right. A bracket keeps the iterate in the domain.
    """
    ap, tp = a[pos], tau[pos]
    target = 1.0 - (a.size - ap.size) * qmin
    lo = float(np.max(ap - mu * tp))  # one term alone already reaches 1
    hi = float(np.max(a.size**2 * ap - mu * tp))  # every term at most 1/N
    lam = lam0 if lam0 is not None and lo < lam0 < hi else lo
    it = 0
    for it in range(1, 200):
        qp = np.sqrt(ap / (lam + mu * tp))
        floored = qp < qmin
        if floored.any():
            qp[floored] = qmin
        s = qp.sum()
        if abs(s - target) <= 2 * _EPS * a.size:
            break
        if s > target:
            lo = lam
        else:
            hi = lam
        # dS/dlam = -1/2 sum over unfloored q^3/a
        dS = -0.5 * float(((qp**3 / ap)[~floored]).sum())
        h = s**-2 - target**-2
        dh = -2.0 * dS / s**3
        new = lam - h / dh if dh > 0 else lo
        if not lo < new < hi:
            new = 0.5 * (lo + hi)
        if new == lam or hi - lo <= 4 * _EPS * max(abs(lo), abs(hi)):
            break
        lam = new
    q = np.full(a.size, qmin)
    q[pos] = qp
    return q, lam, it


def _time_slope(q, a, t, qmin) -> float:
    """``d(sum q t)/d mu`` along the inner solution (implicit differentiation)."""
    free = (q > qmin) & (a > 0)
    w = q[free] ** 3 / a[free]
    tf = t[free]
    if w.sum() <= 0:
        return 0.0
    tbar = (w @ tf) / w.sum()
    return -0.5 * float(w @ (tf - tbar) ** 2)


def _extreme_solution(a, t, qmin, fastest: bool):
    """Mass on the fastest (or slowest) time group, floor elsewhere."""
    edge = t.min() if fastest else t.max()
    group = t == edge
    q = np.full(a.size, qmin)
    share = np.sqrt(a[group])
    mass = 1.0 - (a.size - group.sum()) * qmin
    q[group] = mass * (share / share.sum() if share.sum() > 0 else np.full(group.sum(), 1.0 / group.sum()))
    return np.maximum(q, qmin)


def solve_fixed_M(
    M: float, bp: BoundParams, profile, mu_hint: float | None = None, lam_hint: float | None = None
) -> SamplingSolution:
    """Minimize ``sum a_i/q_i`` subject to ``sum q = 1``, ``sum q t = M``, ``q > 0``.

    Returns the solution with ``objective_value = M * (sum a_i/q_i + beta/alpha)``.
    Clients with ``a_i = 0`` sit at the floor ``1e-6 / N``. ``mu_hint`` and
    ``lam_hint`` are optional warm starts for the two multipliers.
    """
    t = _times(profile)
    a = bp.a
    N = a.size
    if t.size != N:
        raise OptimizerError(f"{t.size} round times for {N} clients")
    t1, tN = float(t.min()), float(t.max())
    span = tN - t1
    tol = RESIDUAL_TOL * max(1.0, tN)
    if not (t1 - tol <= M <= tN + tol):
        raise InfeasibleError(f"M={M!r} outside [{t1!r}, {tN!r}]")
    pos = a > 0
    if not pos.any():
        raise OptimizerError("all p_i * G_i are zero")
    qmin = FLOOR_SCALE / N
    diag = {"outer_iterations": 0, "inner_iterations": 0}
    lam: float
    mu: float

    if span <= 1e-12 * tN:
        q, lam, it = _inner(0.0, a, t - t1, qmin, pos)
        mu = 0.0
        diag["inner_iterations"] = it
    else:
        M_lo = qmin * t.sum() + (1 - N * qmin) * t1
        M_hi = qmin * t.sum() + (1 - N * qmin) * tN
        if M <= M_lo + 1e-12 * span or M >= M_hi - 1e-12 * span:
            q = _extreme_solution(a, t, qmin, fastest=M <= M_lo + 1e-12 * span)
            q /= q.sum()
            lam = mu = math.nan
            diag["boundary"] = True
        else:
            q, lam, mu, diag = _solve_time_multiplier(M, a, t, qmin, pos, span, tN, mu_hint, lam_hint)
    q = q / q.sum()
    M_actual = float(q @ t)
    diag.update(
        lam=lam,
        mu=mu,
        sum_residual=abs(float(q.sum()) - 1.0),
        time_residual=abs(M_actual - M),
        stationarity=_stationarity(q, a, lam, mu, t, qmin, diag.pop("shifted", None)),
    )
    value = M_actual * (variance_term(q, a) + bp.offset)
    return SamplingSolution(q, M_actual, value, diag)


def _solve_time_multiplier(M, a, t, qmin, pos, span, tN, mu_hint, lam_hint):
    """Find ``mu`` with ``sum q(mu) t = M``; ``sum q t`` is decreasing in ``mu``.

    Safeguarded Newton: the bracket is grown from the hint until the
    residual changes sign, then Newton steps that leave it are replaced by
    bisection.
    """
    tol = 1e-13 * max(1.0, tN)
    t1 = float(t.min())
    state = {"lam": lam_hint, "outer": 0, "inner": 0}

    def evaluate(mu):
        ref = t1 if mu >= 0 else tN
        tau = t - ref
        lam0 = None if state["lam"] is None else state["lam"] + mu * ref
        q, lam_shift, it = _inner(mu, a, tau, qmin, pos, lam0)
        state["lam"] = lam_shift - mu * ref
        state["shift"] = (lam_shift, ref)
        state["outer"] += 1
        state["inner"] += it
        return q, float(q @ tau) - (M - ref)

    mu = 0.0 if mu_hint is None or not math.isfinite(mu_hint) else float(mu_hint)
    q, f = evaluate(mu)
    scale = float(np.sum(np.sqrt(a))) ** 2 / span
    lo, hi = -math.inf, math.inf  # f(lo) > 0 > f(hi)
    step = max(0.25 * abs(mu), scale)
    for _ in range(2000):
        if abs(f) <= tol:
            break
        if f > 0:
            lo = mu
        else:
            hi = mu
        slope = _time_slope(q, a, t, qmin)
        new = mu - f / slope if slope < 0 else math.nan
        if math.isinf(lo) or math.isinf(hi):
            # still bracketing: Newton capped by a geometrically growing step
            if not math.isfinite(new):
                new = mu + (step if f > 0 else -step)
            new = min(max(new, mu - step), mu + step)
            step *= 4.0
        elif not lo < new < hi:
            new = 0.5 * (lo + hi)
        if new == mu or (math.isfinite(lo) and math.isfinite(hi) and hi - lo <= 4 * _EPS * max(abs(lo), abs(hi))):
            break
        if abs(new) > 1e300:
            raise OptimizerError(f"could not bracket the time multiplier for M={M!r}")
        mu = new
        q, f = evaluate(mu)
    diag = {"outer_iterations": state["outer"], "inner_iterations": state["inner"], "shifted": state["shift"]}
    return q, state["lam"], mu, diag


def _stationarity(q, a, lam, mu, t, qmin, shifted=None) -> float:
    """Largest relative KKT violation over the clients above the floor."""
    if not (math.isfinite(lam) and math.isfinite(mu)):
        return math.nan
    free = q > qmin * (1 + 1e-9)
    if not free.any():
        return 0.0
    if shifted is not None:
        lam, ref = shifted
        t = t - ref
    grad = -a[free] / q[free] ** 2 + lam + mu * t[free]
    return float(np.max(np.abs(grad) / (a[free] / q[free] ** 2)))


# -- line search over M -------------------------------------------------------


def optimize_sampling(bp: BoundParams, profile, epsilon0: float | None = None, refine: bool = True) -> SamplingSolution:
    """Grid search of ``g(q*(M), M)`` over ``M = t_1, t_1 + eps0, ..., t_N``.

    With ``refine`` the best grid cell is polished by a root search on
    ``dg/dM = sum a_i/q_i + beta/alpha - M * mu`` (the envelope theorem
    gives ``d/dM sum a_i/q_i*(M) = -mu``). The refined point is kept only
    when it improves on the grid minimum.
    """
    t = _times(profile)
    t1, tN = float(t.min()), float(t.max())
    span = tN - t1
    if span <= 1e-12 * tN:
        sol = solve_fixed_M(t1, bp, t)
        sol.solver_diagnostics.update(grid_points=1, refined=False)
        return sol
    if epsilon0 is None:
        epsilon0 = span / 200.0
    if epsilon0 <= 0:
        raise OptimizerError("epsilon0 must be positive")
    n_steps = int(math.floor(span / epsilon0 + 1e-9))
    grid = t1 + epsilon0 * np.arange(n_steps + 1)
    if grid[-1] < tN - 1e-12 * span:
        grid = np.append(grid, tN)
    sols = []
    mu = lam = None
    for m in grid:
        sol = solve_fixed_M(float(m), bp, t, mu_hint=mu, lam_hint=lam)
        sols.append(sol)
        if math.isfinite(sol.solver_diagnostics["mu"]):
            mu, lam = sol.solver_diagnostics["mu"], sol.solver_diagnostics["lam"]
            # mu is non-increasing in M, and once mu <= 0 the slope dg/dM is
            # positive for every larger M: no later grid point can win
            if mu <= 0:
                break
    values = np.array([s.objective_value for s in sols])
    evaluated = len(sols)
    k = int(np.argmin(values))
    best = sols[k]
    refined = False
    if refine and 0 < k < evaluated - 1:
        hint = sols[k].solver_diagnostics

        def slope(m):
            s = solve_fixed_M(m, bp, t, mu_hint=hint["mu"], lam_hint=hint["lam"])
            return variance_term(s.q, bp.a) + bp.offset - s.M * s.solver_diagnostics["mu"]

        lo, hi = float(grid[k - 1]), float(grid[k + 1])
        try:
            s_lo, s_hi = slope(lo), slope(hi)
        except OptimizerError:
            s_lo = s_hi = math.nan
        if s_lo < 0 < s_hi:
            m_star = brentq(slope, lo, hi, xtol=1e-15 * max(1.0, tN), rtol=4 * np.finfo(float).eps)
            cand = solve_fixed_M(m_star, bp, t, mu_hint=hint["mu"], lam_hint=hint["lam"])
            if cand.objective_value <= best.objective_value:
                best, refined = cand, True
    best.solver_diagnostics.update(
        grid_points=len(grid),
        grid_evaluated=evaluated,
        grid_index=k,
        grid_M=float(grid[k]),
        grid_objective=float(values[k]),
        epsilon0=epsilon0,
        refined=refined,
    )
    return best


# -- closed forms -------------------------------------------------------------


def closed_form_delay_aware(p, G, profile) -> np.ndarray:
    """Optimum when beta/alpha -> 0: ``q_i ∝ p_i G_i / sqrt(t_i)``."""
    t = _times(profile)
    w = np.asarray(p, dtype=np.float64) * np.asarray(G, dtype=np.float64) / np.sqrt(t)
    if np.any(w < 0) or w.sum() <= 0:
        raise OptimizerError("all p_i * G_i are zero")
    return w / w.sum()


def cauchy_schwarz_minimum(p, G, profile) -> float:
    """Lower bound ``(sum_i sqrt(t_i) p_i G_i)^2`` of ``(sum q t)(sum a/q)``."""
    t = _times(profile)
    return float(np.sum(np.sqrt(t) * np.asarray(p) * np.asarray(G)) ** 2)


# -- non-convexity ------------------------------------------------------------


@dataclass
class NonconvexityCertificate:
    point: tuple[float, float]
    hessian: np.ndarray
    determinant: float
    closed_form_determinant: float

    @property
    def is_certificate(self) -> bool:
        return self.determinant < 0


def two_client_objective(q1, q2, a, t, alpha=1.0, beta=0.0) -> float:
    return (q1 * t[0] + q2 * t[1]) * (alpha * (a[0] / q1 + a[1] / q2) + beta)


def verify_nonconvexity_certificate(a, t, q, alpha: float = 1.0, beta: float = 0.0) -> NonconvexityCertificate:
    """Hessian of ``(q1 t1 + q2 t2)(alpha (a1/q1 + a2/q2) + beta)`` at ``q``.

    The determinant equals ``-alpha^2 (t1 a2/q2^2 - t2 a1/q1^2)^2``, so it is
    negative wherever the two terms differ and the objective is not convex.
    """
    if alpha <= 0:
        raise OptimizerError("alpha must be positive")
    a1, a2 = map(float, a)
    t1, t2 = map(float, t)
    q1, q2 = map(float, q)
    if q1 <= 0 or q2 <= 0:
        raise OptimizerError("point must be interior")
    h11 = 2 * alpha * q2 * t2 * a1 / q1**3
    h22 = 2 * alpha * q1 * t1 * a2 / q2**3
    h12 = -alpha * (t1 * a2 / q2**2 + t2 * a1 / q1**2)
    H = np.array([[h11, h12], [h12, h22]])
    det = h11 * h22 - h12**2
    closed = -(alpha**2) * (t1 * a2 / q2**2 - t2 * a1 / q1**2) ** 2
    return NonconvexityCertificate((q1, q2), H, float(det), float(closed))
