"""Synchronous FL rounds with arbitrary client sampling probabilities.

Each round the server draws ``K`` clients with replacement from ``q``,
every distinct sampled client runs local SGD from the current global
model, and the server adds the client deltas back with weights
``m_i * p_i / (K q_i)`` (``m_i`` = multiplicity). That weighting makes the
expected new model equal the full-participation average ``sum_i p_i w_i``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .data import ClientPartition, Dataset
from .model import (
    DEFAULT_L2,
    DivergenceError,
    ModelParams,
    accuracy,
    cross_entropy,
    local_sgd_many,
)
from .timing import SystemProfile

logger = logging.getLogger(__name__)

SCHEME_KINDS = ("proposed", "uniform", "weighted", "statistical", "full")

# rng stream tags; rounds and clients are mixed in as further seed words
_SAMPLING_STREAM = 1
_LOCAL_STREAM = 2


class SchemeError(ValueError):
    pass


class ProtocolError(RuntimeError):
    """An aggregation was asked to combine updates that do not match the round."""


class DegenerateError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class SamplingScheme:
    q: np.ndarray
    kind: str

    def __post_init__(self):
        if self.kind not in SCHEME_KINDS:
            raise SchemeError(f"unknown scheme kind {self.kind!r}")
        q = np.asarray(self.q, dtype=np.float64)
        if self.kind != "full":
            validate_probs(q, tol=1e-12, strict=True)
        object.__setattr__(self, "q", q)

    @property
    def N(self) -> int:
        return self.q.size


def validate_probs(q, tol: float = 1e-9, strict: bool = False) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    if q.ndim != 1 or q.size < 1 or not np.all(np.isfinite(q)):
        raise SchemeError("q must be a finite 1-D vector")
    if np.any(q < 0) or (strict and np.any(q <= 0)):
        raise SchemeError("q must be positive" if strict else "q must be non-negative")
    if abs(q.sum() - 1.0) > tol:
        raise SchemeError(f"q sums to {q.sum()!r}, not 1 (tol {tol:g})")
    return q


def uniform_scheme(N: int) -> SamplingScheme:
    return SamplingScheme(np.full(N, 1.0 / N), "uniform")


def weighted_scheme(p) -> SamplingScheme:
    return SamplingScheme(np.asarray(p, dtype=np.float64), "weighted")


def full_scheme(N: int) -> SamplingScheme:
    return SamplingScheme(np.full(N, 1.0 / N), "full")


def statistical_sampling_probs(p, G) -> np.ndarray:
    """Variance-optimal probabilities for equal round times: ``q_i ∝ p_i G_i``."""
    pg = np.asarray(p, dtype=np.float64) * np.asarray(G, dtype=np.float64)
    if np.any(pg < 0):
        raise DegenerateError("p and G must be non-negative")
    total = pg.sum()
    if total <= 0:
        raise DegenerateError("all p_i * G_i are zero; no informative client")
    return pg / total


def statistical_scheme(p, G) -> SamplingScheme:
    return SamplingScheme(statistical_sampling_probs(p, G), "statistical")


@dataclass(frozen=True)
class RoundRecord:
    round: int
    sampled_multiset: tuple[int, ...]
    round_time: float
    global_loss: float
    cumulative_time: float
    test_accuracy: float | None = None


@dataclass
class GEstimates:
    """Per-client gradient-norm bounds, kept as the root of a running mean of
    reported mean squared norms."""

    G: np.ndarray
    observation_counts: np.ndarray
    mean_sq: np.ndarray = field(default=None)

    @classmethod
    def empty(cls, N: int, init: float = 0.0) -> "GEstimates":
        return cls(np.full(N, float(init)), np.zeros(N, dtype=np.int64), np.zeros(N))

    def __post_init__(self):
        self.G = np.asarray(self.G, dtype=np.float64)
        self.observation_counts = np.asarray(self.observation_counts, dtype=np.int64)
        if self.mean_sq is None:
            self.mean_sq = self.G**2
        if np.any(self.G < 0):
            raise ValueError("G must be non-negative")

    def update(self, client: int, sq_norm_mean: float) -> None:
        c = self.observation_counts[client] + 1
        self.mean_sq[client] += (sq_norm_mean - self.mean_sq[client]) / c
        self.observation_counts[client] = c
        self.G[client] = np.sqrt(self.mean_sq[client])

    def filled(self) -> np.ndarray:
        """G with never-observed clients set to the mean of the observed ones."""
        seen = self.observation_counts > 0
        if not seen.any():
            raise DegenerateError("no client has reported a gradient norm yet")
        out = self.G.copy()
        out[~seen] = self.G[seen].mean()
        return out

    def copy(self) -> "GEstimates":
        return GEstimates(self.G.copy(), self.observation_counts.copy(), self.mean_sq.copy())


@dataclass(frozen=True)
class StopRule:
    """Stop at a target training loss, a round count, or a simulated-time budget.

    ``max_rounds`` also acts as the safety cap for the other two modes.
    """

    max_rounds: int
    target_loss: float | None = None
    time_budget: float | None = None

    def __post_init__(self):
        if self.max_rounds < 0:
            raise ValueError("max_rounds must be >= 0")


@dataclass(frozen=True)
class SimConfig:
    K: int = 10
    E: int = 50
    batch_size: int = 24
    lr0: float = 0.1
    lr_schedule: str = "inverse"  # "inverse": lr0/(1+r); "theory": 2/(mu*(gamma+r)); "constant"
    mu: float = DEFAULT_L2
    gamma: float = 1.0
    l2: float = DEFAULT_L2
    seed: int = 0

    def lr(self, r: int) -> float:
        if self.lr_schedule == "inverse":
            return self.lr0 / (1.0 + r)
        if self.lr_schedule == "theory":
            return 2.0 / (self.mu * (self.gamma + r))
        if self.lr_schedule == "constant":
            return self.lr0
        raise ValueError(f"unknown learning-rate schedule {self.lr_schedule!r}")


@dataclass(eq=False)
class Federation:
    """Everything the schemes of one seed share: data, split and round times."""

    train: Dataset
    partition: ClientPartition
    profile: SystemProfile
    test: Dataset | None = None

    def __post_init__(self):
        if self.profile.N != self.partition.n_clients:
            raise ValueError("profile and partition disagree on the number of clients")
        self._clients = [self.partition.client_data(self.train, i) for i in range(self.N)]
        idx = np.concatenate(self.partition.assignments)
        self._all = self.train.subset(idx)

    @property
    def N(self) -> int:
        return self.partition.n_clients

    @property
    def p(self) -> np.ndarray:
        return self.partition.p

    def client(self, i: int) -> Dataset:
        return self._clients[i]

    def loss(self, params: ModelParams, l2: float) -> float:
        # sum_i p_i F_i(w) with p_i = n_i / n equals the pooled mean over all client samples
        return cross_entropy(params, self._all.features, self._all.labels) + 0.5 * l2 * params.sq_norm()

    def test_accuracy(self, params: ModelParams) -> float | None:
        if self.test is None:
            return None
        return accuracy(params, self.test.features, self.test.labels)


def sample_multiset(q, K: int, rng: np.random.Generator) -> np.ndarray:
    """``K`` i.i.d. categorical draws from ``q`` (sorted client ids, repeats kept)."""
    q = validate_probs(q)
    if K < 1:
        raise SchemeError("K must be >= 1")
    cdf = np.cumsum(q)
    cdf /= cdf[-1]
    draws = np.searchsorted(cdf, rng.random(K), side="right")
    return np.sort(np.minimum(draws, q.size - 1))


def multiplicities(multiset, N: int) -> np.ndarray:
    return np.bincount(np.asarray(multiset, dtype=np.int64), minlength=N)


def aggregate(server_params: ModelParams, updates: dict, multiset, q, K: int, p) -> ModelParams:
    """``w + sum_i m_i p_i / (K q_i) (w_i - w)`` over the distinct sampled clients."""
    q = np.asarray(q, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    counts = multiplicities(multiset, q.size)
    if counts.sum() != K:
        raise ProtocolError(f"multiset has {counts.sum()} draws, expected K={K}")
    w0 = server_params.flat()
    out = w0.copy()
    for i in np.flatnonzero(counts):
        if i not in updates:
            raise ProtocolError(f"no update from sampled client {i}")
        out += counts[i] * p[i] / (K * q[i]) * (updates[i].flat() - w0)
    return ModelParams.from_flat(out, server_params.num_classes, server_params.dim)


def aggregate_full(server_params: ModelParams, updates: dict, p) -> ModelParams:
    """Full-participation average ``sum_i p_i w_i``."""
    p = np.asarray(p, dtype=np.float64)
    missing = [i for i in range(p.size) if i not in updates]
    if missing:
        raise ProtocolError(f"full aggregation is missing clients {missing[:10]}")
    out = sum(p[i] * updates[i].flat() for i in range(p.size))
    return ModelParams.from_flat(out, server_params.num_classes, server_params.dim)


@dataclass
class RunResult:
    scheme: str
    trace: list[RoundRecord]
    g_estimates: GEstimates
    params: ModelParams
    initial_loss: float
    reached_target: bool = False
    timed_out: bool = False
    diverged: bool = False

    @property
    def rounds(self) -> int:
        return len(self.trace)

    @property
    def total_time(self) -> float:
        return self.trace[-1].cumulative_time if self.trace else 0.0

    def time_to_loss(self, level: float) -> float | None:
        for rec in self.trace:
            if rec.global_loss <= level:
                return rec.cumulative_time
        return None

    def rounds_to_loss(self, level: float) -> int | None:
        for k, rec in enumerate(self.trace, 1):
            if rec.global_loss <= level:
                return k
        return None


def _round_rng(seed: int, r: int) -> np.random.Generator:
    return np.random.default_rng([seed, _SAMPLING_STREAM, r])


def _client_rng(seed: int, r: int, client: int) -> np.random.Generator:
    return np.random.default_rng([seed, _LOCAL_STREAM, r, client])


def run_rounds(
    federation: Federation,
    scheme: SamplingScheme,
    stop: StopRule,
    config: SimConfig,
    params: ModelParams | None = None,
    g_estimates: GEstimates | None = None,
    round_offset: int = 0,
    evaluate_accuracy: bool = True,
) -> RunResult:
    """Run FL rounds until ``stop`` fires.

    Round ``r`` (counted from ``round_offset``, which also drives the
    learning-rate schedule) samples with a generator seeded by
    ``(seed, r)`` and trains client ``i`` with one seeded by
    ``(seed, r, i)``, so different schemes run under the same seed see
    common random numbers. Reaching the cap without hitting the target is
    reported through ``timed_out``; divergence raises
    :class:`DivergenceError` with the partial trace attached.
    """
    N = federation.N
    if scheme.N != N:
        raise SchemeError(f"scheme has {scheme.N} clients, federation has {N}")
    K = N if scheme.kind == "full" else config.K
    if K < 1:
        raise SchemeError("K must be >= 1")
    p = federation.p
    t_by_client = federation.profile.t_by_client
    params = params.copy() if params is not None else ModelParams.zeros(federation.train.num_classes, federation.train.dim)
    g_est = g_estimates.copy() if g_estimates is not None else GEstimates.empty(N)

    loss = federation.loss(params, config.l2)
    result = RunResult(scheme.kind, [], g_est, params, loss)
    if stop.target_loss is not None and loss <= stop.target_loss:
        result.reached_target = True
        return result

    cumulative = 0.0
    for k in range(stop.max_rounds):
        r = round_offset + k
        if scheme.kind == "full":
            multiset = np.arange(N)
        else:
            multiset = sample_multiset(scheme.q, K, _round_rng(config.seed, r))
        distinct = np.unique(multiset)
        try:
            updates = local_sgd_many(
                params,
                [federation.client(i) for i in distinct],
                config.E,
                config.lr(r),
                config.batch_size,
                [_client_rng(config.seed, r, int(i)) for i in distinct],
                config.l2,
                round_index=r,
            )
        except DivergenceError as exc:
            exc.trace = result.trace
            result.diverged = True
            raise
        new_models = {}
        for i, upd in zip(distinct, updates):
            new_models[int(i)] = upd.updated_params
            g_est.update(int(i), upd.grad_norm_stats)
        if scheme.kind == "full":
            params = aggregate_full(params, new_models, p)
        else:
            params = aggregate(params, new_models, multiset, scheme.q, K, p)
        loss = federation.loss(params, config.l2)
        if not np.isfinite(loss):
            exc = DivergenceError("non-finite global loss", r)
            exc.trace = result.trace
            result.diverged = True
            raise exc
        dt = float(t_by_client[distinct].max())
        cumulative += dt
        result.trace.append(
            RoundRecord(
                round=r,
                sampled_multiset=tuple(int(i) for i in multiset),
                round_time=dt,
                global_loss=loss,
                cumulative_time=cumulative,
                test_accuracy=federation.test_accuracy(params) if evaluate_accuracy else None,
            )
        )
        if stop.target_loss is not None and loss <= stop.target_loss:
            result.reached_target = True
            break
        if stop.time_budget is not None and cumulative >= stop.time_budget:
            break
    else:
        if stop.target_loss is not None:
            result.timed_out = True
            logger.info("%s: target loss %.4f not reached in %d rounds", scheme.kind, stop.target_loss, stop.max_rounds)
    result.params = params
    return result
