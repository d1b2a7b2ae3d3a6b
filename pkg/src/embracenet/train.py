"""Training loop: random batches with replacement, mean cross entropy over the
five per-second decisions, Adam, and a step-wise halving learning rate.

Every random choice in step ``t`` is keyed by ``(seed, t, batch_slot)``, so a
run resumed from a checkpoint replays exactly what an uninterrupted run does.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import rng as rngmod
from .data import Dataset, draw_rotation, prepare_inputs, rotate_batch
from .errors import CheckpointError, ConfigurationError, TrainingError
from .inference import EnsembleConfig, evaluate
from .metrics import Metrics
from .model import Model, ModelConfig, load_checkpoint, save_checkpoint
from .tensor import OptimizerState, adam_step, per_position_cross_entropy

log = logging.getLogger(__name__)

__all__ = [
    "TrainConfig",
    "learning_rate",
    "sample_batch",
    "batch_inputs",
    "train_step",
    "evaluate",
    "train_run",
    "RunResult",
    "compare_fusions",
]


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 8
    # desk-scale schedule; TrainConfig.full_schedule() gives 5e5 steps halving every 1e5
    total_steps: int = 5000
    lr0: float = 1e-4
    decay_interval: int = 1000
    decay_factor: float = 2.0
    seed: int = 0
    eval_interval: int = 500
    checkpoint_interval: int = 1000
    augment_rotation: bool = False
    ensemble_n: int = 1

    @classmethod
    def full_schedule(cls, **overrides) -> "TrainConfig":
        return cls(**{"total_steps": 500_000, "decay_interval": 100_000, **overrides})

    def validate(self) -> None:
        for name in ("batch_size", "decay_interval", "eval_interval", "checkpoint_interval", "ensemble_n"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive, got {getattr(self, name)}")
        if self.total_steps < 0 or self.seed < 0:
            raise ConfigurationError("total_steps and seed must be non-negative")
        if not self.lr0 > 0:
            raise ConfigurationError(f"lr0 must be positive, got {self.lr0}")
        if not self.decay_factor > 1:
            raise ConfigurationError(f"decay_factor must exceed 1, got {self.decay_factor}")


def learning_rate(step: int, cfg: TrainConfig) -> float:
    return cfg.lr0 / cfg.decay_factor ** (step // cfg.decay_interval)


def sample_batch(n_samples: int, step: int, cfg: TrainConfig) -> np.ndarray:
    """Uniform draw with replacement of ``batch_size`` dataset indices."""
    return rngmod.stream(cfg.seed, rngmod.BATCH, step).integers(0, n_samples, size=cfg.batch_size)


def batch_inputs(dataset: Dataset, indices, input_mode: str, augment: bool, seed: int = 0, step: int = 0):
    raw = {name: arr[indices] for name, arr in dataset.modalities.items()}
    if augment:
        angles = [draw_rotation(rngmod.stream(seed, rngmod.AUGMENT, step, slot)) for slot in range(len(indices))]
        raw = rotate_batch(raw, angles)
    return prepare_inputs(raw, input_mode)


def train_step(
    model: Model,
    optimizer: OptimizerState,
    inputs,
    labels: np.ndarray,
    step: int,
    cfg: TrainConfig,
    sample_ids=None,
) -> float:
    """One forward/backward/Adam cycle; returns the batch loss."""
    lr = learning_rate(step, cfg)
    rngs = [rngmod.stream(cfg.seed, rngmod.MASK, step, slot) for slot in range(len(labels))]
    probs, cache = model.forward(inputs, rngs=rngs)
    loss = model.backward(cache, labels)
    if not np.isfinite(loss):
        per_sample = per_position_cross_entropy(probs, labels).mean(axis=1)
        slot = int(np.flatnonzero(~np.isfinite(per_sample))[0]) if (~np.isfinite(per_sample)).any() else 0
        culprit = slot if sample_ids is None else int(sample_ids[slot])
        model.params.zero_grad()
        raise TrainingError(f"non-finite loss at step {step} (lr={lr:.3e}), offending sample {culprit}")
    adam_step(model.params, optimizer, lr)
    model.params.zero_grad()
    return loss


@dataclass
class RunResult:
    model: Model
    checkpoint: Path | None
    losses: list[float] = field(default_factory=list)
    evaluations: list[tuple[int, Metrics]] = field(default_factory=list)

    @property
    def final_metrics(self) -> Metrics | None:
        return self.evaluations[-1][1] if self.evaluations else None


def checkpoint_path(out_dir: Path, step: int) -> Path:
    return out_dir / f"checkpoint-{step:08d}.ckpt"


def train_run(
    cfg: TrainConfig,
    model_cfg: ModelConfig,
    train_data: Dataset,
    val_data: Dataset | None = None,
    out_dir=None,
    resume_from=None,
) -> RunResult:
    """Train for ``cfg.total_steps`` steps, checkpointing and evaluating on schedule.

    With ``out_dir`` set, checkpoints go to ``checkpoint-<step>.ckpt``, each step's
    loss to ``loss.log`` and each evaluation to ``metrics.log`` (append-only).
    """
    cfg.validate()
    if len(train_data) == 0:
        raise ConfigurationError("training set is empty")
    if train_data.labels is None:
        raise ConfigurationError("training set has no labels")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    if resume_from is not None:
        ckpt = load_checkpoint(resume_from)
        model, start = ckpt.model, ckpt.step
        if ckpt.optimizer is None:
            raise CheckpointError(f"{resume_from} has no optimizer state; cannot resume")
        optimizer = ckpt.optimizer
        if model.config != model_cfg:
            log.warning("resuming with the checkpoint's model config; the requested one differs")
    else:
        model = Model(model_cfg, cfg.seed)
        optimizer = OptimizerState.for_store(model.params)
        start = 0
    log.info("model %s/%s: %d parameters, seed %d", model.config.preset, model.config.fusion, model.param_count, cfg.seed)

    result = RunResult(model, None)
    last_ckpt_step = None

    def save(step: int) -> None:
        nonlocal last_ckpt_step
        if out is not None and last_ckpt_step != step:
            result.checkpoint = save_checkpoint(checkpoint_path(out, step), model, step, optimizer)
            last_ckpt_step = step

    def log_line(name: str, line: str) -> None:
        if out is not None:
            with open(out / name, "a") as fh:
                fh.write(line + "\n")

    if resume_from is None:
        save(0)
    window_losses: list[float] = []
    ens = EnsembleConfig(cfg.ensemble_n, cfg.seed)
    for step in range(start, cfg.total_steps):
        idx = sample_batch(len(train_data), step, cfg)
        inputs = batch_inputs(train_data, idx, model.config.input_mode, cfg.augment_rotation, cfg.seed, step)
        loss = train_step(model, optimizer, inputs, train_data.labels[idx], step, cfg, sample_ids=idx)
        result.losses.append(loss)
        window_losses.append(loss)
        log_line("loss.log", f"{step + 1} {loss!r}")
        done = step + 1
        if done % cfg.checkpoint_interval == 0:
            save(done)
        if val_data is not None and (done % cfg.eval_interval == 0 or done == cfg.total_steps):
            metrics = evaluate(model, val_data, ens)
            result.evaluations.append((done, metrics))
            line = f"step={done} lr={learning_rate(step, cfg):.6e} loss={np.mean(window_losses):.6f} {metrics.summary()}"
            log.info(line)
            log_line("metrics.log", line)
            window_losses = []
    if cfg.total_steps > start:
        save(cfg.total_steps)
    return result


def compare_fusions(
    cfg: TrainConfig,
    model_cfg: ModelConfig,
    train_data: Dataset,
    val_data: Dataset,
    csv_path=None,
    fusions=("early", "intermediate", "late", "embrace"),
) -> dict[str, float]:
    """Train one model per fusion method and tabulate validation accuracy."""
    results = {}
    for fusion in fusions:
        run = train_run(cfg, replace(model_cfg, fusion=fusion), train_data, val_data)
        results[fusion] = run.final_metrics.accuracy
        log.info("%s fusion: accuracy %.4f", fusion, results[fusion])
    if csv_path is not None:
        with open(csv_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["fusion_method", "accuracy"])
            for fusion, acc in results.items():
                writer.writerow([fusion, f"{acc:.6f}"])
    return results
