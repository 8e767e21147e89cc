"""Dense numerical core: a small MLP encoder with exact reverse-mode
gradients, row normalization, seeded RNG streams, and a finite-difference
gradient checker.

Matrices are plain 2-D float64 numpy arrays (row-major). Everything here is
a pure function of its explicit inputs, so results are bit-reproducible for
a fixed seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import NumericError, ParameterError, ShapeError, StateError

# Rows whose Euclidean norm falls below this are treated as degenerate by
# l2_normalize: passed through unchanged instead of divided by ~0.
DEGENERATE_NORM_EPS = 1e-12

ACTIVATIONS = ("relu", "tanh")


def make_rng(seed: int) -> np.random.Generator:
    """Seeded PCG64 generator; same seed and call sequence give identical
    streams on every platform."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))


def derive_rng(seed: int, *key: int) -> np.random.Generator:
    """Independent child stream for (seed, key path), e.g. one per pipeline
    stage, so stages stay reproducible in isolation."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=tuple(key))))


@dataclass
class MlpParams:
    """Parameters of a fully connected network.

    layers holds (weight, bias) pairs; weight has shape (fan_out, fan_in)
    and bias shape (fan_out,). The activation is applied after every layer,
    including the last one.
    """

    layers: list[tuple[np.ndarray, np.ndarray]]
    activation: str = "relu"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ParameterError(f"unknown activation {self.activation!r}")
        if not self.layers:
            raise ParameterError("MlpParams needs at least one layer")
        for i, (w, b) in enumerate(self.layers):
            if w.ndim != 2 or b.ndim != 1 or b.shape[0] != w.shape[0]:
                raise ShapeError(f"layer {i}: weight {w.shape} / bias {b.shape} mismatch")
            if i > 0 and w.shape[1] != self.layers[i - 1][0].shape[0]:
                raise ShapeError(
                    f"layer {i} expects {w.shape[1]} inputs but layer {i - 1} "
                    f"outputs {self.layers[i - 1][0].shape[0]}"
                )

    @property
    def input_dim(self) -> int:
        return self.layers[0][0].shape[1]

    @property
    def output_dim(self) -> int:
        return self.layers[-1][0].shape[0]

    def clone(self) -> "MlpParams":
        return MlpParams([(w.copy(), b.copy()) for w, b in self.layers], self.activation)


def init_mlp(layer_dims: Sequence[int], activation: str, rng: np.random.Generator) -> MlpParams:
    """He-style random initialization for the dim chain layer_dims
    (input, hidden..., output)."""
    if len(layer_dims) < 2:
        raise ParameterError("layer_dims needs an input and an output size")
    layers = []
    for fan_in, fan_out in zip(layer_dims[:-1], layer_dims[1:]):
        scale = np.sqrt(2.0 / fan_in)
        w = rng.normal(0.0, scale, size=(fan_out, fan_in))
        b = np.zeros(fan_out)
        layers.append((w, b))
    return MlpParams(layers, activation)


def _activate(pre: np.ndarray, activation: str) -> np.ndarray:
    if activation == "relu":
        return np.maximum(pre, 0.0)
    return np.tanh(pre)


def _activate_grad(pre: np.ndarray, post: np.ndarray, activation: str) -> np.ndarray:
    if activation == "relu":
        return (pre > 0.0).astype(np.float64)
    return 1.0 - post * post


@dataclass
class ForwardCache:
    """Intermediates kept by mlp_forward_cached for the backward pass."""

    inputs: np.ndarray
    pre_activations: list[np.ndarray] = field(default_factory=list)
    post_activations: list[np.ndarray] = field(default_factory=list)


def mlp_forward(params: MlpParams, batch: np.ndarray) -> np.ndarray:
    """Run the network on a (n, input_dim) batch; returns (n, output_dim)."""
    out, _ = mlp_forward_cached(params, batch)
    return out


def mlp_forward_cached(params: MlpParams, batch: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    """Forward pass that also returns the cache mlp_backward needs."""
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2 or batch.shape[1] != params.input_dim:
        raise ShapeError(
            f"batch shape {batch.shape} incompatible with encoder input dim {params.input_dim}"
        )
    cache = ForwardCache(inputs=batch)
    x = batch
    for w, b in params.layers:
        pre = x @ w.T + b
        x = _activate(pre, params.activation)
        cache.pre_activations.append(pre)
        cache.post_activations.append(x)
    return x, cache


def mlp_backward(
    params: MlpParams, cache: ForwardCache | None, grad_output: np.ndarray
) -> list[tuple[np.ndarray, np.ndarray]]:
    """Exact gradients of a scalar loss w.r.t. every weight and bias.

    grad_output is dloss/doutput for the cached forward pass. Returns
    (dW, db) per layer, in layer order.
    """
    if cache is None or not cache.pre_activations:
        raise StateError("mlp_backward requires the cache from mlp_forward_cached")
    grad_output = np.asarray(grad_output, dtype=np.float64)
    if grad_output.shape != cache.post_activations[-1].shape:
        raise ShapeError(
            f"grad_output shape {grad_output.shape} does not match forward "
            f"output {cache.post_activations[-1].shape}"
        )
    grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(params.layers)  # type: ignore[list-item]
    g = grad_output
    for i in range(len(params.layers) - 1, -1, -1):
        w, _ = params.layers[i]
        pre = cache.pre_activations[i]
        post = cache.post_activations[i]
        layer_in = cache.inputs if i == 0 else cache.post_activations[i - 1]
        g_pre = g * _activate_grad(pre, post, params.activation)
        grads[i] = (g_pre.T @ layer_in, g_pre.sum(axis=0))
        if i > 0:
            g = g_pre @ w
    return grads


def l2_normalize(vectors: np.ndarray, return_degenerate: bool = False):
    """Scale each row to unit Euclidean norm.

    Rows with norm below DEGENERATE_NORM_EPS are returned unchanged. With
    return_degenerate=True also returns the boolean mask of such rows.
    """
    vectors = np.asarray(vectors, dtype=np.float64)
    norms = np.linalg.norm(vectors, axis=-1, keepdims=True)
    degenerate = norms[..., 0] < DEGENERATE_NORM_EPS
    safe = np.where(norms < DEGENERATE_NORM_EPS, 1.0, norms)
    out = vectors / safe
    if return_degenerate:
        return out, degenerate
    return out


def l2_normalize_backward(vectors: np.ndarray, grad_output: np.ndarray) -> np.ndarray:
    """Gradient of l2_normalize: for y = x/|x|, pulls grad_output back
    through the Jacobian (I - y y^T)/|x| row by row. Degenerate rows pass
    the gradient through unchanged."""
    vectors = np.asarray(vectors, dtype=np.float64)
    grad_output = np.asarray(grad_output, dtype=np.float64)
    norms = np.linalg.norm(vectors, axis=-1, keepdims=True)
    degenerate = norms < DEGENERATE_NORM_EPS
    safe = np.where(degenerate, 1.0, norms)
    y = vectors / safe
    dot = np.sum(grad_output * y, axis=-1, keepdims=True)
    grad = (grad_output - dot * y) / safe
    return np.where(degenerate, grad_output, grad)


def params_to_vector(params: MlpParams) -> np.ndarray:
    """Flatten all weights and biases into one vector (layer order, weight
    before bias)."""
    parts = []
    for w, b in params.layers:
        parts.append(w.ravel())
        parts.append(b.ravel())
    return np.concatenate(parts)


def vector_to_params(vector: np.ndarray, template: MlpParams) -> MlpParams:
    """Inverse of params_to_vector, using template for shapes."""
    vector = np.asarray(vector, dtype=np.float64)
    layers = []
    pos = 0
    for w, b in template.layers:
        wn = w.size
        layers.append(
            (vector[pos : pos + wn].reshape(w.shape).copy(), vector[pos + wn : pos + wn + b.size].copy())
        )
        pos += wn + b.size
    if pos != vector.size:
        raise ShapeError(f"vector has {vector.size} entries, template needs {pos}")
    return MlpParams(layers, template.activation)


def grads_to_vector(grads: list[tuple[np.ndarray, np.ndarray]]) -> np.ndarray:
    parts = []
    for gw, gb in grads:
        parts.append(gw.ravel())
        parts.append(gb.ravel())
    return np.concatenate(parts)


def sgd_update(
    params: MlpParams, grads: list[tuple[np.ndarray, np.ndarray]], lr: float
) -> MlpParams:
    """One plain gradient-descent step; returns new params."""
    layers = [(w - lr * gw, b - lr * gb) for (w, b), (gw, gb) in zip(params.layers, grads)]
    return MlpParams(layers, params.activation)


def finite_diff_check(
    scalar_fn: Callable[[np.ndarray], tuple[float, np.ndarray]],
    params: np.ndarray,
    eps: float = 1e-6,
) -> float:
    """Compare the analytic gradient of scalar_fn against central finite
    differences.

    scalar_fn maps a flat parameter vector to (loss, gradient). Returns the
    max over coordinates of |g_fd - g| / max(1, |g|).
    """
    if eps <= 0:
        raise ParameterError("eps must be positive")
    params = np.asarray(params, dtype=np.float64)
    loss, grad = scalar_fn(params)
    if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
        raise NumericError("scalar_fn returned a non-finite loss or gradient")
    worst = 0.0
    for i in range(params.size):
        bumped = params.copy()
        bumped[i] = params[i] + eps
        hi, _ = scalar_fn(bumped)
        bumped[i] = params[i] - eps
        lo, _ = scalar_fn(bumped)
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise NumericError(f"non-finite loss while probing coordinate {i}")
        g_fd = (hi - lo) / (2.0 * eps)
        err = abs(g_fd - grad[i]) / max(1.0, abs(grad[i]))
        worst = max(worst, err)
    return worst
