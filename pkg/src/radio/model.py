"""Small differentiable feed-forward stand-in for the compression target.

Affine layers with elementwise tanh between them (none after the last),
applied row-wise to an L x E input of token embeddings.  Because rows
pass through the network independently, per-token squared-gradient sums
can be computed in one vectorized backward pass, which is what the
gradient-variance accumulator needs.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ToyModel:
    """Deterministic-by-seed affine/tanh stack.

    weights[n] has shape (in_n, out_n); biases[n] has shape (out_n,).
    """

    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]
    seed: int

    @property
    def widths(self) -> tuple[int, ...]:
        return (self.weights[0].shape[0],) + tuple(w.shape[1] for w in self.weights)

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def with_weights(self, weights, biases=None) -> "ToyModel":
        return replace(
            self,
            weights=tuple(np.ascontiguousarray(w, dtype=np.float64) for w in weights),
            biases=self.biases
            if biases is None
            else tuple(np.ascontiguousarray(b, dtype=np.float64) for b in biases),
        )


def make_toy_model(
    widths: tuple[int, ...] | list[int],
    seed: int,
    column_spread: float = 2.0,
    weight_dist: str = "laplace",
) -> ToyModel:
    """Build a seeded model whose columns carry heterogeneous variances.

    Weights default to Laplace-distributed values (the tail shape large
    language models are modeled with); ``weight_dist="gaussian"`` gives
    normal weights.  column_spread > 1 scales each output column by a
    log-uniform factor in [1/column_spread, column_spread], giving the
    allocator something to exploit; 1.0 yields homogeneous columns.
    """
    if len(widths) < 2:
        raise ModelError("need at least one layer")
    if weight_dist not in ("laplace", "gaussian"):
        raise ModelError("weight_dist must be 'laplace' or 'gaussian'")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        std = 1.0 / np.sqrt(fan_in)
        if weight_dist == "laplace":
            w = rng.laplace(0.0, std / np.sqrt(2.0), size=(fan_in, fan_out))
        else:
            w = rng.normal(0.0, std, size=(fan_in, fan_out))
        if column_spread > 1.0:
            scales = np.exp2(rng.uniform(-1.0, 1.0, size=fan_out) * np.log2(column_spread))
            w = w * scales
        weights.append(w)
        biases.append(rng.normal(0.0, 0.05, size=fan_out))
    return ToyModel(weights=tuple(weights), biases=tuple(biases), seed=seed)


def forward(model: ToyModel, X: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    """Run the network, retaining each layer's input for bias correction."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.weights[0].shape[0]:
        raise ModelError(
            f"input shape {X.shape} does not match model width {model.weights[0].shape[0]}"
        )
    inputs = []
    h = X
    last = model.n_layers - 1
    for n, (w, b) in enumerate(zip(model.weights, model.biases)):
        inputs.append(h)
        h = h @ w + b
        if n != last:
            h = np.tanh(h)
    return h, inputs


def projection_grads(
    model: ToyModel, X: np.ndarray, s: np.ndarray, u: np.ndarray
) -> list[np.ndarray]:
    """d(s^T Z u)/dW_n for every layer, via reverse mode."""
    z, inputs = forward(model, X)
    s = np.asarray(s, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    d = np.outer(s, u)  # dc/dZ
    grads: list[np.ndarray] = [np.empty(0)] * model.n_layers
    for n in range(model.n_layers - 1, -1, -1):
        grads[n] = inputs[n].T @ d
        if n > 0:
            d = (d @ model.weights[n].T) * (1.0 - inputs[n] ** 2)
    return grads


def grad_squared(
    model: ToyModel, X: np.ndarray, s: np.ndarray, u: np.ndarray
) -> list[float]:
    """Per-layer mean of squared partials of the scalar s^T Z u."""
    return [float(np.mean(g**2)) for g in projection_grads(model, X, s, u)]


def token_sq_grad_sums(
    model: ToyModel, X: np.ndarray, token_index: np.ndarray, u: np.ndarray
) -> list[np.ndarray]:
    """Per-weight sums over selected tokens of squared partials of (Z u)_t.

    Rows travel independently, so the per-token gradient w.r.t. W_n is the
    outer product of that token's layer input and backward signal; summing
    squares over tokens is (X_n**2)^T @ (D_n**2) in one pass.
    """
    _, inputs = forward(model, X)
    u = np.asarray(u, dtype=np.float64)
    L = X.shape[0]
    d = np.zeros((L, model.weights[-1].shape[1]))
    d[np.asarray(token_index, dtype=np.int64)] = u
    sums: list[np.ndarray] = [np.empty(0)] * model.n_layers
    for n in range(model.n_layers - 1, -1, -1):
        sums[n] = (inputs[n] ** 2).T @ (d**2)
        if n > 0:
            d = (d @ model.weights[n].T) * (1.0 - inputs[n] ** 2)
    return sums


def full_jacobian_sq_sums(model: ToyModel, X: np.ndarray) -> list[np.ndarray]:
    """Exact per-weight sum of squared partials over every output entry.

    One backward pass per output dimension; test-oracle cost only.
    """
    e_out = model.weights[-1].shape[1]
    all_tokens = np.arange(X.shape[0])
    totals = [np.zeros_like(w) for w in model.weights]
    eye = np.eye(e_out)
    for j in range(e_out):
        for n, s in enumerate(token_sq_grad_sums(model, X, all_tokens, eye[j])):
            totals[n] += s
    return totals
