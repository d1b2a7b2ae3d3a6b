"""EmbraceNet fusion and the concatenation/averaging baselines.

Each fused coordinate ``(i, j)`` takes its value from exactly one modality,
picked by a multinomial draw with selection probabilities ``p``. The selection
is stored as a stack of binary masks, one per modality, which are treated as
constants in the backward pass.
"""

from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigurationError, InputError, ShapeError

SENSORS = (
    "accelerometer",
    "gravity",
    "gyroscope",
    "linear_accelerometer",
    "magnetometer",
    "orientation",
    "pressure",
)
CHANNELS = {
    "accelerometer": 3,
    "gravity": 3,
    "gyroscope": 3,
    "linear_accelerometer": 3,
    "magnetometer": 3,
    "orientation": 4,
    "pressure": 1,
}


def uniform_probabilities(m: int) -> np.ndarray:
    return np.full(m, 1.0 / m)


def validate_probabilities(p) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or p.size == 0:
        raise ConfigurationError(f"selection probabilities must be a non-empty vector, got shape {p.shape}")
    if not np.isfinite(p).all() or (p < 0).any():
        raise ConfigurationError(f"selection probabilities must be finite and non-negative: {p}")
    if abs(p.sum() - 1.0) > 1e-12:
        raise ConfigurationError(f"selection probabilities sum to {p.sum()!r}, not 1")
    return p


def sample_masks(p, shape: tuple[int, ...], rng: np.random.Generator) -> np.ndarray:
    """Draw one modality per coordinate; returns binary masks ``[m, *shape]``."""
    p = validate_probabilities(p)
    cdf = np.cumsum(p)
    u = rng.random(shape)
    # cumsum may round below 1; such draws go to the last modality with p > 0
    last = int(np.flatnonzero(p)[-1])
    chosen = np.minimum(np.searchsorted(cdf, u, side="right"), last)
    return (chosen[None] == np.arange(p.size).reshape((-1,) + (1,) * len(shape))).astype(np.float64)


def check_partition(masks: np.ndarray) -> bool:
    """True when every coordinate selects exactly one modality."""
    return bool(np.isin(masks, (0.0, 1.0)).all() and (masks.sum(axis=0) == 1.0).all())


def embrace_forward(docked: np.ndarray, masks: np.ndarray) -> np.ndarray:
    """Masked sum over the modality axis.

    ``docked`` is ``[m, ...]`` or ``[batch, m, ...]``; ``masks`` must match it.
    The modality axis is the first axis of ``masks``'s trailing block, so both
    layouts use the same broadcasting rule.
    """
    docked = np.asarray(docked)
    if docked.shape != masks.shape:
        raise ShapeError(f"mask shape {masks.shape} does not match docked features {docked.shape}")
    axis = 0 if docked.ndim == 3 else 1
    return (masks * docked).sum(axis=axis)


def embrace_backward(grad_fused: np.ndarray, masks: np.ndarray) -> np.ndarray:
    """Gradient for every docked feature: ``r_k * grad_e`` stacked on the modality axis."""
    axis = 0 if masks.ndim == 3 else 1
    if grad_fused.shape != masks.shape[:axis] + masks.shape[axis + 1 :]:
        raise ShapeError(f"fused gradient shape {grad_fused.shape} does not match masks {masks.shape}")
    return masks * np.expand_dims(grad_fused, axis)


def expected_fusion(docked: np.ndarray, p) -> np.ndarray:
    """Deterministic ``sum_k p_k d_k``; a debugging stand-in for mask sampling."""
    p = validate_probabilities(p)
    axis = 0 if docked.ndim == 3 else 1
    if docked.shape[axis] != p.size:
        raise ShapeError(f"{docked.shape[axis]} docked features but {p.size} probabilities")
    w = p.reshape((-1,) + (1,) * (docked.ndim - axis - 1))
    return (w * docked).sum(axis=axis)


def early_fuse(modalities: Mapping[str, np.ndarray], order: Sequence[str] = SENSORS) -> np.ndarray:
    """Concatenate raw sensor channels in the fixed sensor order."""
    missing = [name for name in order if name not in modalities]
    if missing:
        raise InputError(f"early fusion needs every modality; missing {missing}")
    return np.concatenate([np.asarray(modalities[name]) for name in order], axis=-1)


def intermediate_fuse(features: Sequence[np.ndarray]) -> np.ndarray:
    if not features:
        raise InputError("intermediate fusion needs at least one feature")
    lead = features[0].shape[:-1]
    if any(f.shape[:-1] != lead for f in features):
        raise ShapeError(f"features disagree on leading shape: {[f.shape for f in features]}")
    return np.concatenate(features, axis=-1)


def late_fuse(per_model_probs: Sequence[np.ndarray]) -> np.ndarray:
    if len(per_model_probs) == 0:
        raise InputError("late fusion needs at least one model output")
    return np.mean(np.stack(per_model_probs), axis=0)
