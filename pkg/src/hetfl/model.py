"""L2-regularized multinomial logistic regression and local SGD."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Dataset

DEFAULT_L2 = 1e-4


class ShapeError(ValueError):
    pass


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss or gradient."""

    def __init__(self, message: str, round_index: int | None = None, step: int | None = None):
        where = []
        if round_index is not None:
            where.append(f"round {round_index}")
        if step is not None:
            where.append(f"step {step}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)
        self.round_index = round_index
        self.step = step
        self.trace: list = []


@dataclass(eq=False)
class ModelParams:
    weights: np.ndarray  # (num_classes, dim)
    bias: np.ndarray  # (num_classes,)

    @classmethod
    def zeros(cls, num_classes: int, dim: int) -> "ModelParams":
        return cls(np.zeros((num_classes, dim)), np.zeros(num_classes))

    @classmethod
    def from_flat(cls, vec: np.ndarray, num_classes: int, dim: int) -> "ModelParams":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size != num_classes * (dim + 1):
            raise ShapeError(f"flat vector of size {vec.size} does not fit {num_classes}x{dim} + bias")
        return cls(vec[: num_classes * dim].reshape(num_classes, dim).copy(), vec[num_classes * dim :].copy())

    @property
    def num_classes(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.weights.shape[1]

    def flat(self) -> np.ndarray:
        return np.concatenate([self.weights.ravel(), self.bias])

    def copy(self) -> "ModelParams":
        return ModelParams(self.weights.copy(), self.bias.copy())

    def sq_norm(self) -> float:
        return float(np.sum(self.weights**2) + np.sum(self.bias**2))

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.weights)) and np.all(np.isfinite(self.bias)))

    def allclose(self, other: "ModelParams", atol: float = 0.0, rtol: float = 0.0) -> bool:
        return np.allclose(self.flat(), other.flat(), atol=atol, rtol=rtol)


@dataclass
class LocalUpdateResult:
    updated_params: ModelParams
    grad_norm_stats: float  # mean squared stochastic-gradient norm over the local steps
    steps_taken: int


def _check_shapes(params: ModelParams, data: Dataset) -> None:
    if params.dim != data.dim or params.num_classes != data.num_classes:
        raise ShapeError(
            f"model is {params.num_classes}x{params.dim} but data has "
            f"{data.num_classes} classes and dim {data.dim}"
        )


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def cross_entropy(params: ModelParams, features: np.ndarray, labels: np.ndarray) -> float:
    """Mean cross-entropy, no regularization."""
    logp = _log_softmax(features @ params.weights.T + params.bias)
    return float(-logp[np.arange(labels.size), labels].mean())


def accuracy(params: ModelParams, features: np.ndarray, labels: np.ndarray) -> float:
    pred = np.argmax(features @ params.weights.T + params.bias, axis=1)
    return float(np.mean(pred == labels))


def local_loss(params: ModelParams, client_data: Dataset, l2: float = DEFAULT_L2) -> float:
    """Mean cross-entropy over the client's samples plus ``l2/2 * ||params||^2``.

    The bias is regularized along with the weights.
    """
    _check_shapes(params, client_data)
    return cross_entropy(params, client_data.features, client_data.labels) + 0.5 * l2 * params.sq_norm()


def global_loss(params: ModelParams, partition, dataset: Dataset, l2: float = DEFAULT_L2) -> float:
    """``sum_i p_i F_i(w)`` over the clients of ``partition``."""
    p = partition.p
    return float(
        sum(p[i] * local_loss(params, partition.client_data(dataset, i), l2) for i in range(partition.n_clients))
    )


def batch_gradient(params: ModelParams, features: np.ndarray, labels: np.ndarray, l2: float = DEFAULT_L2):
    """Gradient of the regularized mean loss over the given samples."""
    logits = features @ params.weights.T + params.bias
    prob = np.exp(_log_softmax(logits))
    prob[np.arange(labels.size), labels] -= 1.0
    prob /= labels.size
    return ModelParams(prob.T @ features + l2 * params.weights, prob.sum(axis=0) + l2 * params.bias)


def draw_batch(n: int, batch_size: int, rng: np.random.Generator) -> np.ndarray:
    """Indices of one mini-batch, drawn without replacement."""
    if batch_size >= n:
        return np.arange(n)
    return rng.choice(n, size=batch_size, replace=False, shuffle=False)


def stochastic_gradient(
    params: ModelParams,
    client_data: Dataset,
    batch_size: int,
    rng: np.random.Generator,
    l2: float = DEFAULT_L2,
) -> tuple[ModelParams, float]:
    """Mini-batch gradient and its squared Euclidean norm."""
    _check_shapes(params, client_data)
    n = client_data.num_samples
    if n < 1:
        raise ValueError("client holds no samples")
    if not 1 <= batch_size <= n:
        raise ValueError(f"batch_size must be in [1, {n}], got {batch_size}")
    idx = draw_batch(n, batch_size, rng)
    grad = batch_gradient(params, client_data.features[idx], client_data.labels[idx], l2)
    return grad, grad.sq_norm()


def local_sgd_many(
    params: ModelParams,
    clients: list[Dataset],
    E: int,
    lr: float,
    batch_size: int,
    rngs: list[np.random.Generator],
    l2: float = DEFAULT_L2,
    round_index: int | None = None,
) -> list[LocalUpdateResult]:
    """Run ``E`` local SGD steps from ``params`` on several clients at once.

    The clients are stacked so each step is a single batched matrix product.
    Client ``c`` uses ``rngs[c]`` for its batches and a batch size of
    ``min(batch_size, n_c)``; up to rounding, a client's result does not
    depend on which other clients are processed alongside it.
    """
    if E < 1:
        raise ValueError("E must be >= 1")
    if lr < 0:
        raise ValueError("lr must be non-negative")
    if len(clients) != len(rngs):
        raise ValueError("need one rng per client")
    m = len(clients)
    if m == 0:
        return []
    for data in clients:
        _check_shapes(params, data)
    sizes = np.array([d.num_samples for d in clients])
    b_eff = np.minimum(batch_size, sizes)
    b = int(b_eff.max())

    # (m, E, b) gather indices into the concatenated client data, padded with a zero mask
    offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    gather = np.zeros((m, E, b), dtype=np.int64)
    mask = np.zeros((m, b, 1))
    for c, (data, rng) in enumerate(zip(clients, rngs)):
        bc = int(b_eff[c])
        mask[c, :bc, 0] = 1.0 / bc
        for j in range(E):
            gather[c, j, :bc] = offsets[c] + draw_batch(int(sizes[c]), bc, rng)
    X = np.concatenate([d.features for d in clients])
    Y = np.concatenate([d.labels for d in clients])

    W = np.repeat(params.weights[None], m, axis=0)
    bias = np.repeat(params.bias[None], m, axis=0)
    sq_norms = np.zeros((m, E))
    rows = np.arange(m)[:, None]
    cols = np.arange(b)[None, :]
    for j in range(E):
        idx = gather[:, j]
        xb = X[idx]  # (m, b, d)
        logits = np.matmul(xb, W.transpose(0, 2, 1)) + bias[:, None, :]
        logits -= logits.max(axis=2, keepdims=True)
        prob = np.exp(logits)
        prob /= prob.sum(axis=2, keepdims=True)
        prob[rows, cols, Y[idx]] -= 1.0
        prob *= mask
        gW = np.matmul(prob.transpose(0, 2, 1), xb) + l2 * W
        gb = prob.sum(axis=1) + l2 * bias
        sq = np.square(gW).sum(axis=(1, 2)) + np.square(gb).sum(axis=1)
        if not np.all(np.isfinite(sq)):
            raise DivergenceError("non-finite stochastic gradient", round_index, j)
        sq_norms[:, j] = sq
        W -= lr * gW
        bias -= lr * gb
    if not (np.all(np.isfinite(W)) and np.all(np.isfinite(bias))):
        raise DivergenceError("non-finite local model", round_index, E - 1)
    return [
        LocalUpdateResult(ModelParams(W[c].copy(), bias[c].copy()), float(sq_norms[c].mean()), E)
        for c in range(m)
    ]


def local_sgd(
    params: ModelParams,
    client_data: Dataset,
    E: int,
    lr: float,
    batch_size: int,
    rng: np.random.Generator,
    l2: float = DEFAULT_L2,
    round_index: int | None = None,
) -> LocalUpdateResult:
    """``E`` sequential mini-batch SGD steps at a fixed learning rate."""
    return local_sgd_many(params, [client_data], E, lr, batch_size, [rng], l2, round_index)[0]
