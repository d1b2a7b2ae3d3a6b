"""Output self-ensemble: average the softmax outputs of several forward passes
that differ only in their fusion-mask draws.

Draw ``j`` for dataset sample ``i`` always uses the stream ``(seed, i, j)``, so
an ensemble of size n is a prefix of any larger ensemble with the same seed.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import rng as rngmod
from .data import Dataset, SensorSample, prepare_inputs
from .errors import ConfigurationError
from .metrics import Metrics, segment_metrics
from .model import Model, predict


@dataclass(frozen=True)
class EnsembleConfig:
    size: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.size < 1:
            raise ConfigurationError(f"ensemble size must be >= 1, got {self.size}")


def is_stochastic(model: Model) -> bool:
    cfg = model.config
    return (
        cfg.fusion == "embrace"
        and cfg.fusion_mode == "stochastic"
        and np.count_nonzero(cfg.probabilities) > 1
    )


def draw_stream(seed: int, sample_index: int, draw: int) -> np.random.Generator:
    return rngmod.stream(seed, rngmod.EVAL, sample_index, draw)


def ensemble_probs(
    model: Model,
    dataset: Dataset,
    cfg: EnsembleConfig,
    batch_size: int = 64,
    sample_offset: int = 0,
) -> np.ndarray:
    """Averaged class probabilities ``[N, 5, classes]`` for every window."""
    n_draws = cfg.size if is_stochastic(model) else 1
    out = []
    for start in range(0, len(dataset), batch_size):
        idx = np.arange(start, min(start + batch_size, len(dataset)))
        raw = {name: arr[idx] for name, arr in dataset.modalities.items()}
        inputs = prepare_inputs(raw, model.config.input_mode)
        draws = []
        for j in range(n_draws):
            rngs = [draw_stream(cfg.seed, sample_offset + int(i), j) for i in idx]
            probs, _ = model.forward(inputs, rngs=rngs)
            draws.append(probs)
        out.append(np.mean(np.stack(draws), axis=0))
    if not out:
        return np.empty((0, 5, model.config.class_count))
    return np.concatenate(out)


def self_ensemble_predict(model: Model, sample: SensorSample, cfg: EnsembleConfig, sample_index: int = 0):
    """Return ``(probs [5, classes], classes [5])`` for a single window."""
    one = Dataset({name: x[None] for name, x in sample.modalities.items()})
    probs = ensemble_probs(model, one, cfg, sample_offset=sample_index)[0]
    return probs, predict(probs)


def evaluate(model: Model, dataset: Dataset, cfg: EnsembleConfig = EnsembleConfig()) -> Metrics:
    probs = ensemble_probs(model, dataset, cfg)
    return segment_metrics(predict(probs), dataset.labels, dataset.locations, model.config.class_count)


def predict_dataset(
    model: Model,
    dataset: Dataset,
    cfg: EnsembleConfig,
    out_path,
    probs_path=None,
) -> Metrics | None:
    """Write one line of five 1-based labels per window; score when labels exist."""
    probs = ensemble_probs(model, dataset, cfg)
    classes = predict(probs)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    np.savetxt(out_path, classes + 1, fmt="%d")
    if probs_path is not None:
        np.savetxt(probs_path, probs.reshape(len(dataset), -1), fmt="%.17g")
    if dataset.labels is None:
        return None
    return segment_metrics(classes, dataset.labels, dataset.locations, model.config.class_count)
