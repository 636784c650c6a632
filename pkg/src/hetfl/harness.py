"""Experiment orchestration: configuration, the estimate-optimize-train
pipeline, baseline comparisons over seeds and CSV output."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .data import ClientPartition, Dataset, generate_synthetic, load_csv, partition_power_law
from .engine import (
    SCHEME_KINDS,
    DegenerateError,
    Federation,
    GEstimates,
    RoundRecord,
    RunResult,
    SamplingScheme,
    SimConfig,
    StopRule,
    full_scheme,
    run_rounds,
    statistical_scheme,
    uniform_scheme,
    weighted_scheme,
)
from .model import DEFAULT_L2, DivergenceError, ModelParams
from .optimizer import BoundParams, EstimationError, OptimizerError, average_bound_ratio, optimize_sampling
from .timing import draw_profile

logger = logging.getLogger(__name__)

ROUNDS_COLUMNS = (
    "seed",
    "scheme",
    "round",
    "sampled_ids",
    "round_time_s",
    "cumulative_time_s",
    "global_loss",
    "test_accuracy",
)
REPORT_COLUMNS = (
    "scheme",
    "seeds",
    "reached",
    "time_to_target_mean_s",
    "time_to_target_std_s",
    "rounds_to_target_mean",
    "rounds_to_target_std",
    "final_accuracy_mean",
    "estimation_time_mean_s",
    "time_ratio_vs_proposed",
    "proposed_faster_fraction",
)
NA = "NA"

# streams of the master seed; each seed's data, split, delays and training draw
# from their own child sequence
_DATA_STREAM, _SPLIT_STREAM, _DELAY_STREAM, _SIM_STREAM = range(4)


class ConfigError(ValueError):
    pass


class HarnessError(RuntimeError):
    pass


@dataclass
class ExperimentConfig:
    """All knobs of an experiment; ``load_config`` documents the file format."""

    dataset: str = "synthetic"  # "synthetic" or a path to a CSV file
    synthetic_alpha: float = 1.0
    synthetic_beta: float = 1.0
    dim: int = 60
    num_classes: int = 10
    total_samples: int = 20509
    power_exponent: float = 1.5
    classes_per_client: tuple = ()  # (lo, hi) label-skew range for CSV data; empty means no limit
    holdout_fraction: float = 0.25
    data_seed: int = -1  # >= 0 pins data and split across run seeds; -1 derives them from each run seed
    N: int = 100
    K: int = 10
    E: int = 50
    batch_size: int = 24
    lr0: float = 0.1
    lr_schedule: str = "inverse"
    l2: float = DEFAULT_L2
    delay_dist: str = "exponential"
    delay_scale: float = 1.0
    delay_low: float = 0.187
    delay_high: float = 7.159
    delay_value: float = 1.0
    schemes: tuple = ("proposed", "uniform", "weighted", "full")
    checkpoint_fractions: tuple = (0.85, 0.70)
    extra_checkpoints: int = 2  # deeper checkpoints tried when no level gives a usable ratio
    checkpoint_decay: float = 0.6  # each extra checkpoint sits at this fraction of the previous one
    target_loss: float = 0.78
    epsilon0: float = 0.0  # 0 selects (t_N - t_1) / 200
    seeds: tuple = tuple(range(10))
    max_rounds: int = 2000
    cold_restart: bool = False
    workers: int = 1  # seeds run in this many processes; results do not depend on it
    out_dir: str = "results"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.N < 1:
            raise ConfigError("N must be >= 1")
        if not 1 <= self.K <= self.N:
            raise ConfigError(f"K must satisfy 1 <= K <= N, got K={self.K}, N={self.N}")
        if self.E < 1 or self.batch_size < 1 or self.max_rounds < 1:
            raise ConfigError("E, batch_size and max_rounds must be >= 1")
        if not self.target_loss > 0:
            raise ConfigError("target_loss must be positive")
        if len(self.checkpoint_fractions) < 1:
            raise ConfigError("at least one loss checkpoint is required")
        if any(not 0 < f < 1 for f in self.checkpoint_fractions):
            raise ConfigError("checkpoint fractions must lie strictly between 0 and 1")
        if self.extra_checkpoints < 0 or not 0 < self.checkpoint_decay < 1:
            raise ConfigError("extra_checkpoints must be >= 0 and checkpoint_decay in (0, 1)")
        unknown = [s for s in self.schemes if s not in SCHEME_KINDS]
        if unknown or not self.schemes:
            raise ConfigError(f"unknown schemes {unknown}; choose from {', '.join(SCHEME_KINDS)}")
        if len(set(self.schemes)) != len(self.schemes):
            raise ConfigError("schemes are listed more than once")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if not 0 <= self.holdout_fraction < 1:
            raise ConfigError("holdout_fraction must be in [0, 1)")
        if self.epsilon0 < 0:
            raise ConfigError("epsilon0 must be >= 0")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.classes_per_client and len(self.classes_per_client) != 2:
            raise ConfigError("classes_per_client takes two values: lo,hi")

    def sim_config(self, seed: int) -> SimConfig:
        return SimConfig(
            K=self.K,
            E=self.E,
            batch_size=self.batch_size,
            lr0=self.lr0,
            lr_schedule=self.lr_schedule,
            l2=self.l2,
            seed=derive_seed(seed, _SIM_STREAM),
        )

    def delay_params(self) -> dict:
        return {
            "uniform_range": {"low": self.delay_low, "high": self.delay_high},
            "exponential": {"scale": self.delay_scale},
            "fixed": {"value": self.delay_value},
        }.get(self.delay_dist, {})


def _parse_value(text: str, template):
    text = text.strip()
    if isinstance(template, bool):
        lowered = text.lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if isinstance(template, int):
        return int(text)
    if isinstance(template, float):
        return float(text)
    if isinstance(template, tuple):
        items = [s.strip() for s in text.split(",") if s.strip()]
        kind = type(template[0]) if template else (int if all(s.lstrip("-").isdigit() for s in items) else float)
        return tuple(kind(s) for s in items)
    return text


def apply_overrides(config: ExperimentConfig, values: dict) -> ExperimentConfig:
    """Return a copy of ``config`` with string ``values`` parsed into its fields."""
    defaults = ExperimentConfig()
    known = {f.name for f in dataclasses.fields(ExperimentConfig)}
    changes = {}
    for key, raw in values.items():
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}")
        try:
            changes[key] = _parse_value(raw, getattr(defaults, key))
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {exc}") from None
    return dataclasses.replace(config, **changes)


def load_config(path=None, overrides: dict | None = None) -> ExperimentConfig:
    """Read a flat ``key = value`` file; ``#`` starts a comment.

    List values are comma separated (``seeds = 0,1,2``). Keys are the field
    names of :class:`ExperimentConfig`. ``overrides`` (also strings) win
    over the file.
    """
    values = {}
    if path is not None:
        path = Path(path)
        try:
            lines = path.read_text(encoding="utf-8").splitlines()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        for lineno, line in enumerate(lines, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key = value")
            key, value = line.split("=", 1)
            values[key.strip()] = value
    values.update(overrides or {})
    return apply_overrides(ExperimentConfig(), values)


def format_config(config: ExperimentConfig) -> str:
    lines = []
    for f in dataclasses.fields(config):
        value = getattr(config, f.name)
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        elif isinstance(value, bool):
            value = str(value).lower()
        elif isinstance(value, float):
            value = repr(value)
        lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"


def derive_seed(seed: int, stream: int) -> int:
    """Independent 32-bit seed for one purpose of one master seed."""
    return int(np.random.SeedSequence([seed, stream]).generate_state(1)[0])


# -- federation construction -------------------------------------------------


def holdout_split(partition: ClientPartition, fraction: float, seed: int) -> tuple[ClientPartition, np.ndarray]:
    """Hold out ``fraction`` of each client's samples for testing.

    Every client keeps at least one training sample.
    """
    rng = np.random.default_rng(seed)
    train, test = [], []
    for idx in partition.assignments:
        idx = rng.permutation(idx)
        keep = max(1, int(round((1.0 - fraction) * idx.size)))
        train.append(np.sort(idx[:keep]))
        test.append(idx[keep:])
    return ClientPartition(tuple(train)), np.sort(np.concatenate(test))


def build_federation(config: ExperimentConfig, seed: int) -> Federation:
    """Data, split and round times for one seed; every scheme of the seed shares it."""
    data_seed = seed if config.data_seed < 0 else config.data_seed
    if config.dataset == "synthetic":
        dataset, partition = generate_synthetic(
            config.synthetic_alpha,
            config.synthetic_beta,
            n_clients=config.N,
            dim=config.dim,
            num_classes=config.num_classes,
            seed=derive_seed(data_seed, _DATA_STREAM),
            total_samples=config.total_samples,
            power_exponent=config.power_exponent,
        )
    else:
        dataset = load_csv(config.dataset)
        partition = partition_power_law(
            dataset,
            config.N,
            config.power_exponent,
            tuple(config.classes_per_client) or None,
            seed=derive_seed(data_seed, _DATA_STREAM),
        )
    test: Dataset | None = None
    if config.holdout_fraction > 0:
        partition, test_idx = holdout_split(partition, config.holdout_fraction, derive_seed(data_seed, _SPLIT_STREAM))
        test = dataset.subset(test_idx) if test_idx.size else None
    profile = draw_profile(config.delay_dist, config.delay_params(), config.N, derive_seed(seed, _DELAY_STREAM))
    return Federation(dataset, partition, profile, test)


def federation_fingerprint(federation: Federation) -> str:
    """Hash of the data, split and round times, for cross-scheme fairness checks."""
    h = hashlib.sha256()
    for arr in (federation.train.features, federation.train.labels, federation.profile.t, federation.profile.client_ids):
        h.update(np.ascontiguousarray(arr).tobytes())
    for idx in federation.partition.assignments:
        h.update(np.asarray(idx, dtype=np.int64).tobytes())
        h.update(b"|")
    return h.hexdigest()


# -- estimation phase ----------------------------------------------------------


def rounds_to_level(initial_loss: float, trace: list[RoundRecord], level: float) -> float | None:
    """Continuous round count at which the loss curve first crosses ``level``.

    The loss is interpolated linearly between consecutive rounds; ``None``
    means the curve never gets there.
    """
    prev = initial_loss
    if prev <= level:
        return 0.0
    for k, rec in enumerate(trace):
        cur = rec.global_loss
        if cur <= level:
            return k + (prev - level) / (prev - cur)
        prev = cur
    return None


@dataclass
class EstimationResult:
    ratio: float
    per_level: list
    levels: list
    rounds_uniform: list
    rounds_weighted: list
    g_estimates: GEstimates
    warm_params: ModelParams
    warm_round: int
    probe_run: RunResult
    uniform_run: RunResult
    weighted_run: RunResult

    @property
    def runs(self) -> tuple[RunResult, RunResult, RunResult]:
        return self.probe_run, self.uniform_run, self.weighted_run

    @property
    def simulated_time(self) -> float:
        return sum(run.total_time for run in self.runs)

    @property
    def rounds(self) -> int:
        return sum(run.rounds for run in self.runs)

    def __iter__(self):
        # lets callers unpack (ratio, G, warm params)
        return iter((self.ratio, self.g_estimates, self.warm_params))


def checkpoint_levels(initial_loss: float, target: float, fractions) -> list[float]:
    """Loss checkpoints at the given fractions of the gap between the start and the target."""
    if initial_loss <= target:
        raise HarnessError(f"initial loss {initial_loss:.6g} is already below the target {target:.6g}")
    return sorted((target + f * (initial_loss - target) for f in fractions), reverse=True)


def _advance(federation, scheme, previous: RunResult | None, level, sim, g_estimates, cap, init) -> RunResult:
    """Run ``scheme`` until the loss reaches ``level``, resuming ``previous`` if given."""
    stop_rounds = cap if previous is None else cap - previous.rounds
    if previous is not None and rounds_to_level(previous.initial_loss, previous.trace, level) is not None:
        return previous
    if stop_rounds < 1:
        return dataclasses.replace(previous, reached_target=False, timed_out=True)
    more = run_rounds(
        federation,
        scheme,
        StopRule(max_rounds=stop_rounds, target_loss=level),
        sim,
        params=init if previous is None else previous.params,
        g_estimates=g_estimates,
        round_offset=0 if previous is None else previous.rounds,
        evaluate_accuracy=False,
    )
    if previous is None:
        return more
    offset = previous.total_time
    shifted = [dataclasses.replace(rec, cumulative_time=rec.cumulative_time + offset) for rec in more.trace]
    return dataclasses.replace(more, trace=previous.trace + shifted, initial_loss=previous.initial_loss)


def run_estimation_phase(federation: Federation, config: ExperimentConfig, seed: int) -> EstimationResult:
    """Estimate the bound ratio and per-client gradient norms.

    A probe round of full participation at ``w0`` gives every client a
    first gradient-norm report. Uniform and data-weighted sampling then
    each train from scratch until the lowest checkpoint; the round counts
    at every checkpoint are inverted into a ratio estimate and averaged.
    When no checkpoint yields a usable estimate, both runs continue to a
    deeper checkpoint (up to ``extra_checkpoints`` times). Gradient norms
    from all runs feed the G estimates. The weighted run's final model is
    returned for warm continuation.
    """
    N = federation.N
    p = federation.p
    q_uniform, q_weighted = uniform_scheme(N), weighted_scheme(p)
    if np.allclose(q_uniform.q, q_weighted.q, rtol=0, atol=1e-12):
        raise DegenerateError("uniform and weighted sampling coincide (equal data sizes); the ratio is not identifiable")
    sim = config.sim_config(seed)
    init = ModelParams.zeros(federation.train.num_classes, federation.train.dim)
    initial_loss = federation.loss(init, config.l2)
    levels = checkpoint_levels(initial_loss, config.target_loss, config.checkpoint_fractions)
    fraction = min(config.checkpoint_fractions)

    # one full-participation probe at w0 gives every client a first gradient-norm report
    probe_run = run_rounds(federation, full_scheme(N), StopRule(max_rounds=1), sim, params=init, evaluate_accuracy=False)
    uniform_run = weighted_run = None
    g_est = probe_run.g_estimates
    extra = 0
    while True:
        uniform_run = _advance(federation, q_uniform, uniform_run, levels[-1], sim, g_est, config.max_rounds, init)
        weighted_run = _advance(
            federation, q_weighted, weighted_run, levels[-1], sim, uniform_run.g_estimates, config.max_rounds, init
        )
        g_est = weighted_run.g_estimates
        for run in (uniform_run, weighted_run):
            if rounds_to_level(run.initial_loss, run.trace, levels[-1]) is None:
                raise EstimationError(
                    f"{run.scheme} sampling did not reach the checkpoint {levels[-1]:.6g} "
                    f"within {config.max_rounds} rounds (best loss "
                    f"{min((r.global_loss for r in run.trace), default=run.initial_loss):.6g})"
                )
        R1 = [rounds_to_level(uniform_run.initial_loss, uniform_run.trace, lv) for lv in levels]
        R2 = [rounds_to_level(weighted_run.initial_loss, weighted_run.trace, lv) for lv in levels]
        G = g_est.filled()
        try:
            ratio, per_level = average_bound_ratio(R1, R2, p, G, N)
            break
        except EstimationError:
            if extra >= config.extra_checkpoints:
                raise
            extra += 1
            fraction *= config.checkpoint_decay
            levels.append(config.target_loss + fraction * (initial_loss - config.target_loss))
            logger.info("seed %s: no usable ratio yet, adding checkpoint %.6g", seed, levels[-1])
    good = [x for x in per_level if x is not None]
    if len(good) > 1 and max(good) > 1.5 * min(good):
        logger.info("seed %s: per-checkpoint ratio estimates disagree by more than 50%%: %s", seed, good)
    logger.info("seed %s: ratio estimate %.6g from R_uniform=%s R_weighted=%s", seed, ratio, R1, R2)
    return EstimationResult(
        ratio=ratio,
        per_level=per_level,
        levels=levels,
        rounds_uniform=R1,
        rounds_weighted=R2,
        g_estimates=g_est,
        warm_params=weighted_run.params,
        warm_round=weighted_run.rounds,
        probe_run=probe_run,
        uniform_run=uniform_run,
        weighted_run=weighted_run,
    )


def proposed_scheme(federation: Federation, config: ExperimentConfig, estimation: EstimationResult) -> tuple[SamplingScheme, dict]:
    bp = BoundParams(estimation.ratio, estimation.g_estimates.filled(), federation.p, config.K, config.E)
    sol = optimize_sampling(bp, federation.profile, config.epsilon0 or None)
    return SamplingScheme(sol.q / sol.q.sum(), "proposed"), dict(sol.solver_diagnostics, M=sol.M, objective=sol.objective_value)


# -- comparison ------------------------------------------------------------------


@dataclass
class TraceSegment:
    """Rows of one run as they appear in ``rounds.csv``."""

    seed: int
    scheme: str
    records: list[RoundRecord]
    time_offset: float = 0.0


@dataclass
class SchemeOutcome:
    seed: int
    scheme: str
    reached: bool
    time_to_target: float | None
    rounds_to_target: int | None
    final_accuracy: float | None
    estimation_time: float = 0.0
    rounds_run: int = 0
    diverged: bool = False
    note: str = ""


@dataclass
class SchemeSummary:
    scheme: str
    seeds: int
    reached: int
    time_mean: float | None
    time_std: float | None
    rounds_mean: float | None
    rounds_std: float | None
    final_accuracy_mean: float | None
    estimation_time_mean: float
    ratio_vs_proposed: float | None
    proposed_faster_fraction: float | None


@dataclass
class ComparisonReport:
    target_loss: float
    seeds: tuple
    outcomes: list[SchemeOutcome]
    rows: list[SchemeSummary] = field(default_factory=list)
    segments: list[TraceSegment] = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict)

    def row(self, scheme: str) -> SchemeSummary:
        for r in self.rows:
            if r.scheme == scheme:
                return r
        raise KeyError(scheme)


def _outcome(seed, scheme, result: RunResult, target, offset=0.0, rounds_before=0, est_time=0.0) -> SchemeOutcome:
    t = result.time_to_loss(target)
    k = result.rounds_to_loss(target)
    acc = next((rec.test_accuracy for rec in reversed(result.trace[: k or len(result.trace)])), None)
    return SchemeOutcome(
        seed=seed,
        scheme=scheme,
        reached=t is not None,
        time_to_target=None if t is None else offset + t,
        rounds_to_target=None if k is None else rounds_before + k,
        final_accuracy=acc,
        estimation_time=est_time,
        rounds_run=result.rounds,
        diverged=result.diverged,
    )


def _safe_run(federation, scheme, stop, sim, **kwargs) -> RunResult:
    try:
        return run_rounds(federation, scheme, stop, sim, **kwargs)
    except DivergenceError as exc:
        logger.warning("%s diverged: %s", scheme.kind, exc)
        params = kwargs.get("params") or ModelParams.zeros(federation.train.num_classes, federation.train.dim)
        res = RunResult(scheme.kind, list(exc.trace), GEstimates.empty(federation.N), params, math.nan, diverged=True)
        return res


def run_seed(config: ExperimentConfig, seed: int) -> tuple[list[SchemeOutcome], list[TraceSegment], dict]:
    """Every configured scheme on one seed's shared federation."""
    federation = build_federation(config, seed)
    sim = config.sim_config(seed)
    stop = StopRule(max_rounds=config.max_rounds, target_loss=config.target_loss)
    outcomes, segments = [], []
    diag = {"fingerprint": federation_fingerprint(federation)}

    estimation = None
    if "proposed" in config.schemes or "statistical" in config.schemes:
        try:
            estimation = run_estimation_phase(federation, config, seed)
            diag.update(ratio=estimation.ratio, per_level=estimation.per_level, levels=estimation.levels)
        except (EstimationError, DegenerateError, DivergenceError) as exc:
            logger.warning("seed %s: estimation failed: %s", seed, exc)
            diag["estimation_error"] = str(exc)

    for name in config.schemes:
        if name in ("proposed", "statistical") and estimation is None:
            outcomes.append(SchemeOutcome(seed, name, False, None, None, None, note="estimation failed"))
            continue
        if name == "proposed":
            try:
                scheme, sol_diag = proposed_scheme(federation, config, estimation)
            except OptimizerError as exc:
                outcomes.append(SchemeOutcome(seed, name, False, None, None, None, note=f"optimizer: {exc}"))
                continue
            diag["solver"] = sol_diag
            est_time = estimation.simulated_time
            if config.cold_restart:
                params, offset_round = None, 0
            else:
                params, offset_round = estimation.warm_params, estimation.warm_round
            result = _safe_run(
                federation, scheme, stop, sim, params=params, g_estimates=estimation.g_estimates, round_offset=offset_round
            )
            offset = 0.0
            for label, run in zip(("probe", "uniform", "weighted"), estimation.runs):
                segments.append(TraceSegment(seed, f"proposed/est-{label}", run.trace, offset))
                offset += run.total_time
            segments.append(TraceSegment(seed, "proposed", result.trace, est_time))
            outcomes.append(_outcome(seed, name, result, config.target_loss, est_time, estimation.rounds, est_time))
            continue
        if name == "statistical":
            scheme = statistical_scheme(federation.p, estimation.g_estimates.filled())
        elif name == "uniform":
            scheme = uniform_scheme(federation.N)
        elif name == "weighted":
            scheme = weighted_scheme(federation.p)
        else:
            scheme = full_scheme(federation.N)
        result = _safe_run(federation, scheme, stop, sim)
        segments.append(TraceSegment(seed, name, result.trace, 0.0))
        outcomes.append(_outcome(seed, name, result, config.target_loss))
    for o in outcomes:
        logger.info(
            "seed %s %-11s reached=%s time=%s rounds=%s", seed, o.scheme, o.reached, o.time_to_target, o.rounds_to_target
        )
    return outcomes, segments, diag


def _mean_std(values):
    if not values:
        return None, None
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std(ddof=1)) if arr.size > 1 else 0.0


def summarize(outcomes: list[SchemeOutcome], schemes, seeds, target_loss: float) -> list[SchemeSummary]:
    """Per-scheme means over seeds.

    Means cover the seeds where the scheme reached the target; a scheme
    that never reached it is NA (``None``) and gets no time ratio. The
    ratio is the scheme's mean time over the proposed scheme's mean time.
    ``proposed_faster_fraction`` counts seeds where the proposed scheme
    reached the target strictly sooner (or the other scheme never did).
    """
    by = {(o.scheme, o.seed): o for o in outcomes}
    rows = []
    prop = [by.get(("proposed", s)) for s in seeds]
    prop_mean = _mean_std([o.time_to_target for o in prop if o is not None and o.reached])[0]
    for name in schemes:
        outs = [by[(name, s)] for s in seeds if (name, s) in by]
        reached = [o for o in outs if o.reached]
        t_mean, t_std = _mean_std([o.time_to_target for o in reached])
        r_mean, r_std = _mean_std([o.rounds_to_target for o in reached])
        accs = [o.final_accuracy for o in reached if o.final_accuracy is not None]
        ratio = None
        if prop_mean and reached:
            ratio = t_mean / prop_mean
        faster = None
        if name != "proposed" and "proposed" in schemes:
            wins = 0
            for s in seeds:
                po, so = by.get(("proposed", s)), by.get((name, s))
                if po is not None and po.reached and (so is None or not so.reached or po.time_to_target < so.time_to_target):
                    wins += 1
            faster = wins / len(seeds)
        rows.append(
            SchemeSummary(
                scheme=name,
                seeds=len(outs),
                reached=len(reached),
                time_mean=t_mean,
                time_std=t_std,
                rounds_mean=r_mean,
                rounds_std=r_std,
                final_accuracy_mean=float(np.mean(accs)) if accs else None,
                estimation_time_mean=float(np.mean([o.estimation_time for o in outs])) if outs else 0.0,
                ratio_vs_proposed=ratio,
                proposed_faster_fraction=faster,
            )
        )
    return rows


def run_comparison(config: ExperimentConfig) -> ComparisonReport:
    """Run every scheme on every seed and reduce to a comparison table.

    Seeds are independent; with ``config.workers > 1`` they run in a process
    pool and are reduced in seed order, so the output is unchanged.
    """
    outcomes, segments, diagnostics = [], [], {}
    if config.workers > 1 and len(config.seeds) > 1:
        with ProcessPoolExecutor(max_workers=min(config.workers, len(config.seeds))) as pool:
            per_seed = list(pool.map(run_seed, [config] * len(config.seeds), config.seeds))
    else:
        per_seed = [run_seed(config, seed) for seed in config.seeds]
    for seed, (o, s, d) in zip(config.seeds, per_seed):
        outcomes += o
        segments += s
        diagnostics[seed] = d
    report = ComparisonReport(config.target_loss, tuple(config.seeds), outcomes, segments=segments, diagnostics=diagnostics)
    report.rows = summarize(outcomes, config.schemes, config.seeds, config.target_loss)
    return report


# -- output ----------------------------------------------------------------------


def _fmt(x) -> str:
    if x is None:
        return NA
    if isinstance(x, float):
        return repr(x)
    return str(x)


def write_rounds_csv(segments: list[TraceSegment], path) -> None:
    """One row per simulated round; cumulative time includes each segment's offset."""
    path = Path(path)
    try:
        with path.open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(ROUNDS_COLUMNS)
            for seg in segments:
                cumulative = seg.time_offset
                for rec in seg.records:
                    cumulative += rec.round_time
                    writer.writerow(
                        [
                            seg.seed,
                            seg.scheme,
                            rec.round,
                            ";".join(str(i) for i in rec.sampled_multiset),
                            repr(float(rec.round_time)),
                            repr(float(cumulative)),
                            repr(float(rec.global_loss)),
                            "" if rec.test_accuracy is None else repr(float(rec.test_accuracy)),
                        ]
                    )
    except OSError as exc:
        raise HarnessError(f"cannot write {path}: {exc}") from None


def write_report_csv(rows: list[SchemeSummary], path) -> None:
    path = Path(path)
    try:
        with path.open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(REPORT_COLUMNS)
            for r in rows:
                writer.writerow(
                    [
                        r.scheme,
                        r.seeds,
                        r.reached,
                        _fmt(r.time_mean),
                        _fmt(r.time_std),
                        _fmt(r.rounds_mean),
                        _fmt(r.rounds_std),
                        _fmt(r.final_accuracy_mean),
                        _fmt(r.estimation_time_mean),
                        _fmt(r.ratio_vs_proposed),
                        _fmt(r.proposed_faster_fraction),
                    ]
                )
    except OSError as exc:
        raise HarnessError(f"cannot write {path}: {exc}") from None


def emit_outputs(report: ComparisonReport | None, segments: list[TraceSegment], outdir, config: ExperimentConfig | None = None) -> dict:
    """Write ``rounds.csv``, ``report.csv`` and ``config.resolved`` into ``outdir``."""
    outdir = Path(outdir)
    try:
        outdir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise HarnessError(f"cannot create output directory {outdir}: {exc}") from None
    paths = {
        "rounds": outdir / "rounds.csv",
        "report": outdir / "report.csv",
        "config": outdir / "config.resolved",
    }
    write_rounds_csv(segments, paths["rounds"])
    write_report_csv(report.rows if report is not None else [], paths["report"])
    text = format_config(config) if config is not None else ""
    text += f"code_version = {__version__}\n"
    try:
        paths["config"].write_text(text, encoding="utf-8")
    except OSError as exc:
        raise HarnessError(f"cannot write {paths['config']}: {exc}") from None
    return paths
