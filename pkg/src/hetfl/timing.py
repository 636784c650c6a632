"""Per-client round times and the straggler-bound round duration.

A synchronous round lasts as long as its slowest sampled client. With
``K`` draws with replacement from ``q`` and clients sorted by round time,
client ``i`` is the slowest with probability
``(q_1 + ... + q_i)**K - (q_1 + ... + q_{i-1})**K``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DISTRIBUTIONS = ("uniform_range", "exponential", "fixed", "explicit")


class ProfileError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class SystemProfile:
    """Round times sorted ascending.

    ``client_ids[k]`` is the client whose time is ``t[k]``.
    """

    t: np.ndarray
    client_ids: np.ndarray
    distribution_tag: str = "explicit"
    rng_seed: int | None = None
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        t = np.asarray(self.t, dtype=np.float64)
        ids = np.asarray(self.client_ids, dtype=np.int64)
        if t.ndim != 1 or t.size < 1:
            raise ProfileError("profile needs at least one round time")
        if ids.shape != t.shape or not np.array_equal(np.sort(ids), np.arange(t.size)):
            raise ProfileError("client_ids must be a permutation of range(N)")
        if not np.all(np.isfinite(t)) or np.any(t <= 0):
            raise ProfileError("round times must be positive and finite")
        if self.distribution_tag not in DISTRIBUTIONS:
            raise ProfileError(f"unknown distribution tag {self.distribution_tag!r}")
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "client_ids", ids)

    @property
    def N(self) -> int:
        return self.t.size

    @property
    def is_sorted(self) -> bool:
        return bool(np.all(np.diff(self.t) >= 0))

    @property
    def t_by_client(self) -> np.ndarray:
        out = np.empty_like(self.t)
        out[self.client_ids] = self.t
        return out

    def to_sorted(self, values) -> np.ndarray:
        """Reorder a per-client vector into ascending-time order."""
        return np.asarray(values)[self.client_ids]

    @classmethod
    def from_times(cls, times, distribution_tag: str = "explicit", rng_seed=None, params=None) -> "SystemProfile":
        """Build a profile from per-client times (client ``i`` has ``times[i]``)."""
        times = np.asarray(times, dtype=np.float64)
        order = np.argsort(times, kind="stable")  # ties keep lower client id first
        return cls(times[order], order, distribution_tag, rng_seed, dict(params or {}))


def draw_profile(dist: str, params: dict | None, N: int, seed: int) -> SystemProfile:
    """Draw i.i.d. round times for ``N`` clients.

    ``dist`` is one of ``uniform_range`` (params ``low``, ``high``),
    ``exponential`` (``scale``, default 1), ``fixed`` (``value``) or
    ``explicit`` (``times``, a length-N sequence).
    """
    params = dict(params or {})
    if N < 1:
        raise ProfileError("N must be >= 1")
    rng = np.random.default_rng(seed)
    if dist == "uniform_range":
        low, high = float(params.get("low", 0.187)), float(params.get("high", 7.159))
        if not 0 < low <= high:
            raise ProfileError(f"uniform_range needs 0 < low <= high, got ({low}, {high})")
        times = rng.uniform(low, high, N)
    elif dist == "exponential":
        scale = float(params.get("scale", 1.0))
        if scale <= 0:
            raise ProfileError("exponential scale must be positive")
        times = rng.exponential(scale, N)
        # measure-zero event, but a zero time would break the positivity contract
        times = np.maximum(times, np.finfo(float).tiny)
    elif dist == "fixed":
        value = float(params.get("value", 1.0))
        if value <= 0:
            raise ProfileError("fixed round time must be positive")
        times = np.full(N, value)
    elif dist == "explicit":
        times = np.asarray(params.get("times"), dtype=np.float64)
        if times.shape != (N,):
            raise ProfileError(f"explicit profile needs {N} times")
    else:
        raise ProfileError(f"unknown delay distribution {dist!r}")
    return SystemProfile.from_times(times, dist, seed, params)


def round_time(multiset, profile: SystemProfile) -> float:
    """Duration of a round: the largest round time among the sampled clients."""
    ids = np.asarray(multiset, dtype=np.int64)
    if ids.size == 0:
        raise ValueError("empty multiset")
    return float(profile.t_by_client[ids].max())


def _as_probs(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    if q.ndim != 1 or q.size < 1 or np.any(q < 0) or not np.all(np.isfinite(q)):
        raise ValueError("q must be a non-negative probability vector")
    if abs(q.sum() - 1.0) > 1e-9:
        raise ValueError(f"q sums to {q.sum()!r}, not 1")
    return q / q.sum()


def straggler_pmf(q, K: int) -> np.ndarray:
    """Probability that each (time-sorted) client is the slowest of ``K`` draws."""
    if K < 1:
        raise ValueError("K must be >= 1")
    cdf = np.cumsum(_as_probs(q))
    cdf[-1] = 1.0
    powered = cdf**K
    return np.diff(powered, prepend=0.0)


def expected_round_time(q, profile: SystemProfile, K: int) -> float:
    """Exact expected round duration; ``q`` is indexed by client id."""
    if not profile.is_sorted:
        raise ProfileError("profile round times must be sorted ascending")
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (profile.N,):
        raise ValueError(f"q has length {q.size}, profile has {profile.N} clients")
    return float(straggler_pmf(profile.to_sorted(q), K) @ profile.t)


def expected_round_time_approx(q, profile: SystemProfile) -> float:
    """Linear surrogate ``sum_i q_i t_i`` of the expected round duration."""
    q = _as_probs(q)
    return float(q @ profile.t_by_client)
