"""Built-in oracle and property checks run by ``hetfl verify``.

Each check compares a library routine against an independent computation
(exhaustive enumeration, Monte Carlo, grid search or finite differences) and
reports pass/fail with the observed error.
"""

from __future__ import annotations

import itertools
import time
from dataclasses import dataclass

import numpy as np

from .engine import aggregate, aggregate_full, statistical_sampling_probs
from .model import ModelParams, batch_gradient, cross_entropy
from .optimizer import (
    BoundParams,
    closed_form_delay_aware,
    cauchy_schwarz_minimum,
    estimate_bound_ratio,
    optimize_sampling,
    solve_fixed_M,
    verify_nonconvexity_certificate,
)
from .timing import SystemProfile, expected_round_time, expected_round_time_approx


@dataclass
class CheckResult:
    number: int
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"[{status}] {self.number:2d} {self.name}: {self.detail} ({self.seconds:.2f}s)"


# -- unbiased aggregation ------------------------------------------------------


def _random_updates(rng, N, num_classes=3, dim=2):
    server = ModelParams(rng.normal(size=(num_classes, dim)), rng.normal(size=num_classes))
    updates = {i: ModelParams(rng.normal(size=(num_classes, dim)), rng.normal(size=num_classes)) for i in range(N)}
    return server, updates


def check_unbiased_aggregation(seed: int = 0) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    # every ordered K-tuple of draws, weighted by its probability
    N, K = 3, 2
    worst = 0.0
    for _ in range(5):
        server, updates = _random_updates(rng, N)
        q = rng.dirichlet(np.ones(N))
        p = rng.dirichlet(np.ones(N))
        expected = np.zeros_like(server.flat())
        for draw in itertools.product(range(N), repeat=K):
            expected += np.prod(q[list(draw)]) * aggregate(server, updates, draw, q, K, p).flat()
        full = aggregate_full(server, updates, p).flat()
        worst = max(worst, float(np.max(np.abs(expected - full))))
    exact_ok = worst <= 1e-12

    # Monte Carlo: sampled aggregate is linear in the multiplicities, so draw
    # multiplicity vectors directly and reuse the per-client weighted deltas
    N, K, draws = 20, 5, 100_000
    server, updates = _random_updates(rng, N)
    q = rng.dirichlet(np.ones(N))
    p = rng.dirichlet(np.ones(N))
    full = aggregate_full(server, updates, p).flat()
    counts = rng.multinomial(K, q, size=draws)
    deltas = np.array([updates[i].flat() - server.flat() for i in range(N)])
    samples = server.flat() + (counts * (p / (K * q))) @ deltas
    # spot-check the vectorized form against the library on a few draws
    for row in counts[:20]:
        multiset = np.repeat(np.arange(N), row)
        lib = aggregate(server, updates, multiset, q, K, p).flat()
        if not np.allclose(lib, server.flat() + (row * p / (K * q)) @ deltas, atol=1e-12, rtol=0):
            return False, "vectorized aggregate disagrees with library"
    se = samples.std(axis=0, ddof=1) / np.sqrt(draws)
    z = float(np.max(np.abs(samples.mean(axis=0) - full) / se))
    return exact_ok and z <= 3.0, f"enumeration max err {worst:.2e}, Monte Carlo max |z| {z:.2f}"


# -- expected round time ----------------------------------------------------------


def enumerate_round_time(q, t, K) -> float:
    """Expected max of ``K`` draws by summing over every ordered K-tuple."""
    total = 0.0
    for draw in itertools.product(range(len(q)), repeat=K):
        total += np.prod([q[i] for i in draw]) * max(t[i] for i in draw)
    return total


def check_expected_round_time(seed: int = 1) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    hand = expected_round_time([0.2, 0.3, 0.5], SystemProfile.from_times([1.0, 2.0, 3.0]), 2)
    hand_ok = abs(hand - 2.71) <= 1e-12
    worst = 0.0
    for N in range(1, 6):
        for K in range(1, 4):
            for _ in range(5):
                q = rng.dirichlet(np.ones(N))
                t = rng.uniform(0.1, 5.0, size=N)
                closed = expected_round_time(q, SystemProfile.from_times(t), K)
                worst = max(worst, abs(closed - enumerate_round_time(q, t, K)))
    exact_ok = worst <= 1e-12

    N, K, draws = 100, 10, 1_000_000
    q = rng.dirichlet(np.ones(N))
    t = rng.exponential(1.0, size=N)
    closed = expected_round_time(q, SystemProfile.from_times(t), K)
    cdf = np.cumsum(q)
    cdf[-1] = 1.0
    acc = 0.0
    for chunk in np.array_split(np.arange(draws), 10):
        idx = np.searchsorted(cdf, rng.random((chunk.size, K)), side="right")
        acc += t[idx].max(axis=1).sum()
    rel = abs(acc / draws - closed) / closed
    ok = hand_ok and exact_ok and rel <= 0.005
    return ok, f"hand value {hand:.12g}, enumeration max err {worst:.2e}, Monte Carlo rel err {rel:.2e}"


def check_approximation_cases(seed: int = 2) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(50):
        N = int(rng.integers(1, 30))
        q = rng.dirichlet(np.ones(N))
        prof = SystemProfile.from_times(rng.uniform(0.1, 5.0, size=N))
        worst = max(worst, abs(expected_round_time(q, prof, 1) - expected_round_time_approx(q, prof)))
        flat = SystemProfile.from_times(np.full(N, rng.uniform(0.1, 5.0)))
        K = int(rng.integers(1, 20))
        worst = max(worst, abs(expected_round_time(q, flat, K) - expected_round_time_approx(q, flat)))
    return worst <= 1e-12, f"max gap {worst:.2e}"


# -- sampling optimizer -----------------------------------------------------------


def check_solver_reductions(seed: int = 3) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    err_homog = err_limit = err_obj = 0.0
    for _ in range(10):
        N = int(rng.integers(2, 40))
        p = rng.dirichlet(np.ones(N))
        G = rng.uniform(0.1, 3.0, size=N)
        for ratio in (1e-3, 1.0, 1e3):
            sol = optimize_sampling(BoundParams(ratio, G, p), np.full(N, rng.uniform(0.5, 2.0)))
            err_homog = max(err_homog, float(np.max(np.abs(sol.q - statistical_sampling_probs(p, G)))))
        t = rng.uniform(0.2, 8.0, size=N)
        sol = optimize_sampling(BoundParams(1e12, G, p), t)
        err_limit = max(err_limit, float(np.max(np.abs(sol.q - closed_form_delay_aware(p, G, t)))))
        q = closed_form_delay_aware(p, G, t)
        value = float(q @ t) * float(np.sum((p * G) ** 2 / q))
        bound = cauchy_schwarz_minimum(p, G, t)
        err_obj = max(err_obj, abs(value - bound) / bound)
    ok = err_homog <= 1e-6 and err_limit <= 1e-6 and err_obj <= 1e-9
    return ok, (
        f"homogeneous L-inf {err_homog:.2e}, small-offset L-inf {err_limit:.2e}, "
        f"closed-form objective rel err {err_obj:.2e}"
    )


def fixed_M_line_oracle(a, t, M, step: float = 1e-3, zoom_levels: int = 3) -> float:
    """Minimum of ``sum a/q`` over a grid of the feasible segment for N=3.

    With ``sum q = 1`` and ``sum q t = M`` fixed, ``q1`` determines the other
    two coordinates. ``q1`` is scanned at ``step``, then the scan is repeated
    on a 1000x finer grid around the best point ``zoom_levels - 1`` times,
    since the other coordinates can move much faster than ``q1``.
    """
    t1, t2, t3 = t
    lo, hi, h = step, 1.0 - step, step
    best = np.inf
    for _ in range(zoom_levels):
        q1 = np.arange(lo, hi + 0.5 * h, h)
        # q2 (t2 - t3) = M - t3 - q1 (t1 - t3)
        q2 = (M - t3 - q1 * (t1 - t3)) / (t2 - t3)
        q3 = 1.0 - q1 - q2
        ok = (q1 > 0) & (q2 > 0) & (q3 > 0)
        if not ok.any():
            break
        vals = np.full(q1.size, np.inf)
        vals[ok] = a[0] / q1[ok] + a[1] / q2[ok] + a[2] / q3[ok]
        k = int(np.argmin(vals))
        best = min(best, float(vals[k]))
        lo, hi = q1[k] - h, q1[k] + h
        h /= 1000.0
    return best


def check_fixed_M_vs_grid(seed: int = 4, instances: int = 20) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    worst = -np.inf
    for _ in range(instances):
        t = np.sort(rng.uniform(0.2, 5.0, size=3))
        while np.min(np.diff(t)) < 0.05:
            t = np.sort(rng.uniform(0.2, 5.0, size=3))
        p = rng.dirichlet(np.ones(3))
        G = rng.uniform(0.1, 3.0, size=3)
        bp = BoundParams(1.0, G, p)
        M = float(rng.uniform(t[0] + 0.2 * (t[2] - t[0]), t[2] - 0.2 * (t[2] - t[0])))
        sol = solve_fixed_M(M, bp, t)
        solver = float(np.sum(bp.a / sol.q))
        oracle = fixed_M_line_oracle(bp.a, t, M)
        worst = max(worst, (solver - oracle) / oracle)
    return worst <= 1e-4, f"worst relative gap (solver - grid) / grid {worst:.2e}"


def monotonicity_violation(q, p, G, t) -> float:
    """Largest ``q_j - q_i`` over pairs where client ``i`` dominates ``j``."""
    pg = p * G
    dom = (t[:, None] <= t[None, :]) & (pg[:, None] >= pg[None, :])
    np.fill_diagonal(dom, False)
    gaps = q[None, :] - q[:, None]
    if not dom.any():
        return -np.inf
    return float(np.max(np.where(dom, gaps, -np.inf)))


def check_monotonicity(seed: int = 5, instances: int = 1000) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    worst = -np.inf
    for _ in range(instances):
        N = int(rng.integers(2, 16))
        p = rng.dirichlet(np.ones(N))
        G = rng.uniform(0.1, 3.0, size=N)
        t = rng.exponential(1.0, size=N) + 0.05
        ratio = float(10 ** rng.uniform(-3, 3))
        sol = optimize_sampling(BoundParams(ratio, G, p), t)
        worst = max(worst, monotonicity_violation(sol.q, p, G, t))
    return worst <= 1e-9, f"worst violation {worst:.2e} over {instances} instances"


# -- model --------------------------------------------------------------------------


def _regularized_loss(vec, features, labels, num_classes, l2):
    params = ModelParams.from_flat(vec, num_classes, features.shape[1])
    return cross_entropy(params, features, labels) + 0.5 * l2 * params.sq_norm()


def gradient_relative_error(analytic, numeric) -> float:
    """Entrywise relative error, with the denominator floored at 1e-3 of the
    largest entry so near-zero coordinates do not dominate."""
    scale = max(float(np.max(np.abs(numeric))), 1e-12)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-3 * scale)
    return float(np.max(np.abs(analytic - numeric) / denom))


def check_gradient(seed: int = 6, shapes: int = 10, h: float = 1e-6) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(shapes):
        n = int(rng.integers(1, 40))
        dim = int(rng.integers(1, 12))
        classes = int(rng.integers(2, 8))
        X = rng.normal(size=(n, dim))
        y = rng.integers(0, classes, size=n)
        vec = rng.normal(scale=0.5, size=classes * (dim + 1))
        l2 = float(rng.choice([0.0, 1e-4, 0.1]))
        analytic = batch_gradient(ModelParams.from_flat(vec, classes, dim), X, y, l2).flat()
        numeric = np.empty_like(vec)
        for k in range(vec.size):
            e = np.zeros_like(vec)
            e[k] = h
            numeric[k] = (
                _regularized_loss(vec + e, X, y, classes, l2) - _regularized_loss(vec - e, X, y, classes, l2)
            ) / (2 * h)
        worst = max(worst, gradient_relative_error(analytic, numeric))
    return worst < 1e-5, f"max relative error {worst:.2e}"


# -- ratio estimation and non-convexity ----------------------------------------------


def check_ratio_inversion(seed: int = 7, instances: int = 100) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        N = int(rng.integers(2, 200))
        p = rng.dirichlet(np.ones(N))
        G = rng.uniform(0.1, 5.0, size=N)
        x = float(10 ** rng.uniform(-3, 3))
        A = float(np.sum((p * G) ** 2))
        B = float(np.sum(p * G**2))
        rho = (x * N * A + 1) / (x * B + 1)
        got = estimate_bound_ratio(rho, 1.0, p, G)
        worst = max(worst, abs(got - x) / x)
    return worst <= 1e-10, f"max relative error {worst:.2e}"


def check_nonconvexity(seed: int = 8, points: int = 1000) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    cert = verify_nonconvexity_certificate((1.0, 1.0), (1.0, 2.0), (0.5, 0.5))
    point_ok = abs(cert.determinant + 16.0) <= 1e-12 and cert.is_certificate
    worst = -np.inf
    for _ in range(points):
        a = rng.uniform(0.01, 5.0, size=2)
        t = rng.uniform(0.1, 5.0, size=2)
        q = rng.uniform(0.01, 1.0, size=2)
        alpha = float(rng.uniform(0.1, 3.0))
        worst = max(worst, verify_nonconvexity_certificate(a, t, q, alpha).determinant)
    return point_ok and worst <= 0.0, f"determinant at reference point {cert.determinant:.12g}, max over samples {worst:.3g}"


CHECKS = [
    (1, "unbiased aggregation", check_unbiased_aggregation),
    (2, "expected round time", check_expected_round_time),
    (3, "approximation exact cases", check_approximation_cases),
    (4, "optimizer limiting cases", check_solver_reductions),
    (5, "fixed-M solver vs grid", check_fixed_M_vs_grid),
    (6, "monotone allocation", check_monotonicity),
    (7, "gradient vs finite differences", check_gradient),
    (8, "ratio inversion round trip", check_ratio_inversion),
    (9, "non-convexity certificate", check_nonconvexity),
]


def run_checks(only=None) -> list[CheckResult]:
    results = []
    for number, name, fn in CHECKS:
        if only and number not in only:
            continue
        start = time.perf_counter()
        try:
            passed, detail = fn()
        except Exception as exc:  # a crashing check is a failed check
            passed, detail = False, f"raised {type(exc).__name__}: {exc}"
        results.append(CheckResult(number, name, bool(passed), detail, time.perf_counter() - start))
    return results
