"""Dense float64 layers with hand-written backward passes, Adam, and a
finite-difference gradient checker.

Activations are numpy arrays laid out ``[batch, time, channels]``. Every op also
accepts an unbatched ``[time, channels]`` array and returns an unbatched result.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError, InputError, ShapeError, TrainingError

DTYPE = np.float64


def _batched(x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=DTYPE)
    if x.ndim == 2:
        return x[None], True
    if x.ndim != 3:
        raise InputError(f"expected [time, channels] or [batch, time, channels], got shape {x.shape}")
    return x, False


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


class ParameterStore:
    """Named parameters packed into one flat float64 buffer.

    ``store[name]`` and ``store.grad(name)`` return views, so layers built on
    top of them see optimizer updates and checkpoint loads without re-binding.
    """

    def __init__(self, specs: Iterable[tuple[str, tuple[int, ...]]]):
        self._index: dict[str, tuple[int, tuple[int, ...]]] = {}
        offset = 0
        for name, shape in specs:
            if name in self._index:
                raise ConfigurationError(f"duplicate parameter name {name!r}")
            shape = tuple(int(s) for s in shape)
            self._index[name] = (offset, shape)
            offset += math.prod(shape)
        self.data = np.zeros(offset, dtype=DTYPE)
        self.grads = np.zeros(offset, dtype=DTYPE)

    def _view(self, buf: np.ndarray, name: str) -> np.ndarray:
        offset, shape = self._index[name]
        return buf[offset : offset + math.prod(shape)].reshape(shape)

    def __getitem__(self, name: str) -> np.ndarray:
        return self._view(self.data, name)

    def grad(self, name: str) -> np.ndarray:
        return self._view(self.grads, name)

    def __contains__(self, name: str) -> bool:
        return name in self._index

    def __iter__(self):
        return iter(self._index)

    def __len__(self) -> int:
        return len(self._index)

    def shape(self, name: str) -> tuple[int, ...]:
        return self._index[name][1]

    def owner_of(self, flat_index: int) -> str:
        for name, (offset, shape) in self._index.items():
            if offset <= flat_index < offset + math.prod(shape):
                return name
        raise IndexError(flat_index)

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self) -> None:
        self.grads.fill(0.0)


def he_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    # std sqrt(2 / fan_in)
    limit = math.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


# ---------------------------------------------------------------------------
# 1-D convolution
# ---------------------------------------------------------------------------


def same_padding(length: int, kernel_size: int, stride: int) -> tuple[int, int, int]:
    """Return ``(out_length, pad_left, pad_right)`` for a same-padded conv."""
    out = -(-length // stride)
    left = (kernel_size - 1) // 2
    right = max((out - 1) * stride + kernel_size - length - left, 0)
    return out, left, right


@dataclass
class Conv1dLayer:
    weights: np.ndarray  # [kernel_size, in_channels, filters]
    bias: np.ndarray  # [filters]
    stride: int = 1

    def __post_init__(self):
        if self.weights.ndim != 3:
            raise ConfigurationError(f"conv weights must be [k, c_in, filters], got {self.weights.shape}")
        if self.bias.shape != (self.weights.shape[2],):
            raise ConfigurationError(f"conv bias shape {self.bias.shape} does not match {self.weights.shape[2]} filters")
        if self.stride < 1:
            raise ConfigurationError(f"stride must be >= 1, got {self.stride}")

    @property
    def kernel_size(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def filters(self) -> int:
        return self.weights.shape[2]

    def output_length(self, length: int) -> int:
        return -(-length // self.stride)


def _im2col(x: np.ndarray, layer: Conv1dLayer) -> np.ndarray:
    """Gather receptive fields: [B, L, C] -> [B, out, k, C]."""
    out, left, right = same_padding(x.shape[1], layer.kernel_size, layer.stride)
    padded = np.pad(x, ((0, 0), (left, right), (0, 0)))
    windows = sliding_window_view(padded, layer.kernel_size, axis=1)  # [B, Lp-k+1, C, k]
    windows = windows[:, :: layer.stride][:, :out]
    return windows.transpose(0, 1, 3, 2)


def conv1d_forward(x: np.ndarray, layer: Conv1dLayer) -> np.ndarray:
    x, squeeze = _batched(x)
    if x.shape[2] != layer.in_channels:
        raise ConfigurationError(
            f"conv input has {x.shape[2]} channels but weights expect {layer.in_channels}"
        )
    cols = _im2col(x, layer)
    b, out, k, c = cols.shape
    y = cols.reshape(b * out, k * c) @ layer.weights.reshape(k * c, layer.filters)
    y = y.reshape(b, out, layer.filters) + layer.bias
    return y[0] if squeeze else y


def conv1d_backward(grad_out: np.ndarray, x: np.ndarray, layer: Conv1dLayer):
    """Return ``(grad_input, grad_weights, grad_bias)``."""
    x, squeeze = _batched(x)
    g = np.asarray(grad_out, dtype=DTYPE)
    if squeeze:
        g = g[None]
    length = x.shape[1]
    out, left, _ = same_padding(length, layer.kernel_size, layer.stride)
    if g.shape != (x.shape[0], out, layer.filters):
        raise ShapeError(f"conv grad_out shape {g.shape} != forward output {(x.shape[0], out, layer.filters)}")
    k, c, f = layer.weights.shape
    cols = _im2col(x, layer).reshape(-1, k * c)
    g2 = g.reshape(-1, f)
    grad_w = (cols.T @ g2).reshape(k, c, f)
    grad_b = g2.sum(axis=0)
    grad_cols = (g2 @ layer.weights.reshape(k * c, f).T).reshape(x.shape[0], out, k, c)

    s = layer.stride
    padded_len = max((out - 1) * s + k, length + left)
    grad_padded = np.zeros((x.shape[0], padded_len, c), dtype=DTYPE)
    for tap in range(k):
        grad_padded[:, tap : tap + s * (out - 1) + 1 : s] += grad_cols[:, :, tap]
    grad_x = grad_padded[:, left : left + length]
    if squeeze:
        grad_x = grad_x[0]
    return grad_x, grad_w, grad_b


# ---------------------------------------------------------------------------
# position-wise dense, activations, loss
# ---------------------------------------------------------------------------


@dataclass
class DenseLayer:
    weights: np.ndarray  # [in_features, units]
    bias: np.ndarray  # [units]

    @property
    def units(self) -> int:
        return self.weights.shape[1]


def dense_forward(x: np.ndarray, layer: DenseLayer) -> np.ndarray:
    x = np.asarray(x, dtype=DTYPE)
    if x.shape[-1] != layer.weights.shape[0]:
        raise ConfigurationError(
            f"dense input has {x.shape[-1]} features but weights expect {layer.weights.shape[0]}"
        )
    return x @ layer.weights + layer.bias


def dense_backward(grad_out: np.ndarray, x: np.ndarray, layer: DenseLayer):
    x = np.asarray(x, dtype=DTYPE)
    if grad_out.shape != x.shape[:-1] + (layer.units,):
        raise ShapeError(f"dense grad_out shape {grad_out.shape} does not match input {x.shape}")
    f = x.shape[-1]
    g2 = grad_out.reshape(-1, layer.units)
    grad_w = x.reshape(-1, f).T @ g2
    grad_b = g2.sum(axis=0)
    grad_x = grad_out @ layer.weights.T
    return grad_x, grad_w, grad_b


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(grad_out: np.ndarray, x: np.ndarray) -> np.ndarray:
    return grad_out * (x > 0)


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=DTYPE)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _check_labels(labels: np.ndarray, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if not np.issubdtype(labels.dtype, np.integer):
        raise InputError(f"labels must be integer class indices, got dtype {labels.dtype}")
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise InputError(f"label out of range [0, {n_classes}): {labels.min()}..{labels.max()}")
    return labels


def cross_entropy(probs: np.ndarray, labels: np.ndarray) -> float:
    """Mean of ``-log p[label]`` over every position (all leading axes)."""
    probs = np.asarray(probs, dtype=DTYPE)
    labels = _check_labels(labels, probs.shape[-1])
    if labels.shape != probs.shape[:-1]:
        raise InputError(f"labels shape {labels.shape} does not match probabilities {probs.shape}")
    picked = np.take_along_axis(probs, labels[..., None], axis=-1)[..., 0]
    with np.errstate(divide="ignore"):
        return float(-np.log(picked).mean())


def per_position_cross_entropy(probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    picked = np.take_along_axis(probs, np.asarray(labels)[..., None], axis=-1)[..., 0]
    with np.errstate(divide="ignore"):
        return -np.log(picked)


def softmax_cross_entropy_backward(probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Gradient of the mean cross entropy w.r.t. the pre-softmax logits."""
    labels = _check_labels(labels, probs.shape[-1])
    grad = np.array(probs, dtype=DTYPE, copy=True)
    np.put_along_axis(grad, labels[..., None], np.take_along_axis(grad, labels[..., None], axis=-1) - 1.0, axis=-1)
    return grad / labels.size


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class OptimizerState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon_hat: float = 1e-4
    step_count: int = 0

    @classmethod
    def for_store(cls, store: ParameterStore, **kwargs) -> "OptimizerState":
        return cls(np.zeros_like(store.data), np.zeros_like(store.data), **kwargs)


def adam_step(store: ParameterStore, state: OptimizerState, lr: float) -> None:
    """One bias-corrected Adam update of ``store.data`` from ``store.grads``.

    The step is ``lr * m_hat / (sqrt(v_hat) + epsilon_hat)``.
    """
    g = store.grads
    if state.first_moment.shape != g.shape or state.second_moment.shape != g.shape:
        raise ShapeError("optimizer moments do not match the parameter buffer")
    if not np.isfinite(g).all():
        bad = int(np.flatnonzero(~np.isfinite(g))[0])
        raise TrainingError(
            f"non-finite gradient in parameter {store.owner_of(bad)!r} at step {state.step_count + 1}"
        )
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    m, v = state.first_moment, state.second_moment
    tmp = np.multiply(g, 1.0 - b1)
    m *= b1
    m += tmp
    np.multiply(g, g, out=tmp)
    tmp *= 1.0 - b2
    v *= b2
    v += tmp
    np.multiply(v, 1.0 / bc2, out=tmp)
    np.sqrt(tmp, out=tmp)
    tmp += state.epsilon_hat
    np.divide(m, tmp, out=tmp)
    tmp *= lr / bc1
    store.data -= tmp


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    tolerance: float
    errors: dict[str, float] = field(default_factory=dict)

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return all(e < self.tolerance for e in self.errors.values())

    def failing(self) -> list[str]:
        return [name for name, e in self.errors.items() if not e < self.tolerance]

    def lines(self, prefix: str = "") -> list[str]:
        return [
            f"{'ok  ' if e < self.tolerance else 'FAIL'} {prefix}{name}: max rel err {e:.3e} (tol {self.tolerance:.0e})"
            for name, e in self.errors.items()
        ]


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale


def gradient_check(
    loss_fn: Callable[[], float],
    blocks: Mapping[str, tuple[np.ndarray, np.ndarray]],
    tolerance: float = 1e-4,
    h: float = 1e-5,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    ``blocks`` maps a name to ``(array, analytic_grad)``. Each array is perturbed
    in place and ``loss_fn`` re-evaluated, so it must read the arrays it is
    given. With ``max_coords`` only that many random coordinates per block are
    probed.
    """
    report = GradCheckReport(tolerance)
    for name, (arr, analytic) in blocks.items():
        analytic = np.asarray(analytic)
        if analytic.shape != arr.shape:
            raise ShapeError(f"{name}: gradient shape {analytic.shape} != parameter shape {arr.shape}")
        flat = arr.reshape(-1)
        if not np.shares_memory(flat, arr):
            raise ShapeError(f"{name}: parameter must be contiguous to perturb in place")
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort((rng or np.random.default_rng(0)).choice(flat.size, max_coords, replace=False))
        numeric = np.empty(coords.size)
        for n, i in enumerate(coords):
            orig = flat[i]
            flat[i] = orig + h
            plus = loss_fn()
            flat[i] = orig - h
            minus = loss_fn()
            flat[i] = orig
            numeric[n] = (plus - minus) / (2 * h)
        err = relative_error(analytic.reshape(-1)[coords], numeric)
        report.errors[name] = float(err.max()) if err.size else 0.0
    return report
