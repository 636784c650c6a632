"""Synthetic federated datasets, power-law client partitions and CSV I/O.

The synthetic generator follows the usual ``Synthetic(alpha, beta)``
construction for federated benchmarks: every client owns its own softmax
model (controlled by ``alpha``) and its own feature mean (controlled by
``beta``), so data are both unbalanced and non-i.i.d. across clients.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

DEFAULT_TOTAL_SAMPLES = 20509
DEFAULT_POWER_EXPONENT = 1.5


class DataError(ValueError):
    """Invalid dataset or generation argument."""


class PartitionError(DataError):
    """A partition request cannot be satisfied."""


class SchemaError(DataError):
    """CSV content does not match the ``f0..f{d-1},label`` schema."""


class ParseError(DataError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


@dataclass(frozen=True, eq=False)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        x = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels)
        if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] < 1:
            raise DataError(f"features must be a non-empty 2-D matrix, got shape {x.shape}")
        if y.shape != (x.shape[0],):
            raise DataError(f"labels shape {y.shape} does not match {x.shape[0]} samples")
        if not np.issubdtype(y.dtype, np.integer):
            raise DataError("labels must be integers")
        if self.num_classes < 1:
            raise DataError("num_classes must be positive")
        if y.min() < 0 or y.max() >= self.num_classes:
            raise DataError(f"labels must lie in [0, {self.num_classes})")
        if not np.all(np.isfinite(x)):
            raise DataError("features contain non-finite values")
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y.astype(np.int64, copy=False))

    @property
    def num_samples(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.num_classes)

    def equals(self, other: "Dataset") -> bool:
        return (
            self.num_classes == other.num_classes
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.labels, other.labels)
        )


@dataclass(frozen=True, eq=False)
class ClientPartition:
    """Disjoint per-client index lists into a :class:`Dataset`."""

    assignments: tuple[np.ndarray, ...]

    def __post_init__(self):
        arrays = tuple(np.asarray(a, dtype=np.int64) for a in self.assignments)
        if not arrays:
            raise PartitionError("partition needs at least one client")
        if any(a.ndim != 1 or a.size < 1 for a in arrays):
            raise PartitionError("every client must hold at least one sample")
        allidx = np.concatenate(arrays)
        if allidx.min() < 0:
            raise PartitionError("negative sample index")
        if np.unique(allidx).size != allidx.size:
            raise PartitionError("client index lists overlap")
        object.__setattr__(self, "assignments", arrays)

    @property
    def n_clients(self) -> int:
        return len(self.assignments)

    @property
    def n(self) -> np.ndarray:
        return np.array([a.size for a in self.assignments], dtype=np.int64)

    @property
    def p(self) -> np.ndarray:
        n = self.n
        return n / n.sum()

    def client_data(self, dataset: Dataset, client: int) -> Dataset:
        return dataset.subset(self.assignments[client])

    def equals(self, other: "ClientPartition") -> bool:
        return self.n_clients == other.n_clients and all(
            np.array_equal(a, b) for a, b in zip(self.assignments, other.assignments)
        )


def power_law_sizes(total: int, n_clients: int, exponent: float, rng: np.random.Generator) -> np.ndarray:
    """Split ``total`` samples into ``n_clients`` sizes proportional to ``rank**-exponent``.

    Ranks are randomly permuted over clients. Rounding uses the largest
    remainder method so the sizes sum to ``total`` exactly; clients that
    round to zero take one sample each from the currently largest client.
    """
    if n_clients < 1:
        raise DataError("n_clients must be >= 1")
    if total < n_clients:
        raise DataError(f"cannot give {n_clients} clients at least one of {total} samples")
    if exponent < 0:
        raise DataError("power-law exponent must be non-negative")
    raw = np.arange(1, n_clients + 1, dtype=np.float64) ** (-exponent)
    raw = raw[rng.permutation(n_clients)]
    share = total * raw / raw.sum()
    sizes = np.floor(share).astype(np.int64)
    short = int(total - sizes.sum())
    if short > 0:
        frac = share - sizes
        # stable order: largest fractional part first, lower id on ties
        order = np.lexsort((np.arange(n_clients), -frac))
        sizes[order[:short]] += 1
    for i in np.flatnonzero(sizes == 0):
        sizes[int(np.argmax(sizes))] -= 1
        sizes[i] = 1
    return sizes


def _fill_classes(need: int, caps: np.ndarray) -> np.ndarray:
    """Split ``need`` as evenly as possible over classes without exceeding ``caps``."""
    alloc = np.zeros_like(caps)
    open_ = caps > 0
    while need > 0 and open_.any():
        idx = np.flatnonzero(open_)
        share, extra = divmod(need, idx.size)
        take = np.full(idx.size, share, dtype=np.int64)
        take[:extra] += 1
        take = np.minimum(take, caps[idx] - alloc[idx])
        alloc[idx] += take
        need -= int(take.sum())
        open_ = alloc < caps
        if take.sum() == 0:
            break
    return alloc


def partition_power_law(
    dataset: Dataset,
    n_clients: int,
    power_exponent: float = DEFAULT_POWER_EXPONENT,
    classes_per_client_range: tuple[int, int] | None = None,
    seed: int = 0,
) -> ClientPartition:
    """Unbalanced, label-skewed split of ``dataset`` over ``n_clients``.

    Client sizes follow :func:`power_law_sizes`. Each client draws a class
    count uniformly from ``classes_per_client_range``; counts and sizes are
    matched at random, so big clients need not have many classes. Clients
    are filled largest first. If the drawn classes cannot supply a client,
    further classes are added up to the range maximum before giving up.
    """
    C = dataset.num_classes
    lo, hi = classes_per_client_range or (1, C)
    if not (1 <= lo <= hi <= C):
        raise PartitionError(f"classes_per_client_range {(lo, hi)} must lie within [1, {C}]")
    if n_clients > dataset.num_samples:
        raise PartitionError(
            f"n_clients={n_clients} exceeds num_samples={dataset.num_samples}"
        )
    rng = np.random.default_rng(seed)
    sizes = power_law_sizes(dataset.num_samples, n_clients, power_exponent, rng)
    class_counts = rng.integers(lo, hi + 1, size=n_clients)

    pools = [rng.permutation(np.flatnonzero(dataset.labels == c)) for c in range(C)]
    used = np.zeros(C, dtype=np.int64)
    caps = np.array([pool.size for pool in pools], dtype=np.int64)
    assignments: list[np.ndarray] = [np.empty(0, dtype=np.int64)] * n_clients

    for client in np.lexsort((np.arange(n_clients), -sizes)):
        need = int(sizes[client])
        remaining = caps - used
        avail = np.flatnonzero(remaining > 0)
        k = min(int(class_counts[client]), need, avail.size)
        weights = remaining[avail] / remaining[avail].sum()
        chosen = list(rng.choice(avail, size=k, replace=False, p=weights))
        while remaining[chosen].sum() < need:
            rest = [c for c in avail if c not in chosen]
            if len(chosen) >= hi or not rest:
                raise PartitionError(
                    f"client {client} needs {need} samples but at most {hi} classes "
                    f"can supply only {int(remaining[chosen].sum())}; "
                    "lower the power-law exponent or widen classes_per_client_range"
                )
            chosen.append(max(rest, key=lambda c: remaining[c]))
        chosen = np.array(chosen, dtype=np.int64)
        alloc = _fill_classes(need, remaining[chosen])
        parts = []
        for c, m in zip(chosen, alloc):
            parts.append(pools[c][used[c] : used[c] + m])
            used[c] += m
        assignments[client] = np.sort(np.concatenate(parts))
    return ClientPartition(tuple(assignments))


def generate_synthetic(
    alpha: float = 1.0,
    beta: float = 1.0,
    n_clients: int = 100,
    dim: int = 60,
    num_classes: int = 10,
    seed: int = 0,
    total_samples: int = DEFAULT_TOTAL_SAMPLES,
    power_exponent: float = DEFAULT_POWER_EXPONENT,
) -> tuple[Dataset, ClientPartition]:
    """Generate a ``Synthetic(alpha, beta)`` federated classification set.

    Client ``k`` draws ``u_k ~ N(0, alpha)`` and ``B_k ~ N(0, beta)``; its
    model is ``W_k ~ N(u_k, 1)``, ``b_k ~ N(u_k, 1)``, its feature mean
    ``v_k ~ N(B_k, 1)`` and features ``x ~ N(v_k, diag(j**-1.2))``. Labels
    are ``argmax(W_k x + b_k)``. Sample counts follow a power law.
    """
    if n_clients < 1 or dim < 1 or num_classes < 2:
        raise DataError("need n_clients >= 1, dim >= 1 and num_classes >= 2")
    if alpha < 0 or beta < 0:
        raise DataError("alpha and beta must be non-negative")
    rng = np.random.default_rng(seed)
    sizes = power_law_sizes(total_samples, n_clients, power_exponent, rng)
    model_means = rng.normal(0.0, alpha, n_clients)
    feature_shift = rng.normal(0.0, beta, n_clients)
    std = np.arange(1, dim + 1, dtype=np.float64) ** (-1.2 / 2)

    features, labels, assignments = [], [], []
    start = 0
    for k in range(n_clients):
        W = rng.normal(model_means[k], 1.0, (num_classes, dim))
        b = rng.normal(model_means[k], 1.0, num_classes)
        v = rng.normal(feature_shift[k], 1.0, dim)
        x = v + std * rng.standard_normal((sizes[k], dim))
        features.append(x)
        labels.append(np.argmax(x @ W.T + b, axis=1))
        assignments.append(np.arange(start, start + sizes[k]))
        start += sizes[k]
    dataset = Dataset(np.vstack(features), np.concatenate(labels), num_classes)
    return dataset, ClientPartition(tuple(assignments))


def save_csv(dataset: Dataset, path) -> None:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([f"f{j}" for j in range(dataset.dim)] + ["label"])
        for row, label in zip(dataset.features, dataset.labels):
            writer.writerow([repr(float(v)) for v in row] + [int(label)])


def load_csv(path) -> Dataset:
    """Read a ``f0,...,f{d-1},label`` CSV file; ``num_classes`` is ``max(label) + 1``."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header:
            raise SchemaError(f"{path}: empty file, expected header f0..f{{d-1}},label")
        dim = len(header) - 1
        expected = [f"f{j}" for j in range(dim)] + ["label"]
        if dim < 1 or [h.strip() for h in header] != expected:
            raise SchemaError(f"{path}: header must be f0..f{{d-1}},label, got {header}")
        rows, labels = [], []
        for row in reader:
            line = reader.line_num
            if not row:
                continue
            if len(row) != dim + 1:
                raise ParseError(f"expected {dim + 1} fields, got {len(row)}", line)
            try:
                rows.append([float(v) for v in row[:dim]])
            except ValueError as exc:
                raise ParseError(f"bad feature value ({exc})", line) from None
            try:
                labels.append(int(row[dim]))
            except ValueError:
                raise SchemaError(f"{path}: line {line}: label {row[dim]!r} is not an integer") from None
    if not rows:
        raise SchemaError(f"{path}: no data rows")
    y = np.array(labels, dtype=np.int64)
    if y.min() < 0:
        raise SchemaError(f"{path}: negative label")
    return Dataset(np.array(rows, dtype=np.float64), y, int(y.max()) + 1)
