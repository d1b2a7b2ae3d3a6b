"""Sensor windows: on-disk layout, invalid-sample filtering, FFT and rotation
transforms, and a synthetic stand-in dataset.

On disk a split is a directory holding a key-value ``manifest.txt``, one text
matrix per sensor (one window per line, ``window * channels`` values, time-major)
and an optional label file with five 1-based class labels per line.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np

from . import rng as rngmod
from .errors import ConfigurationError, FormatError, InputError, ManifestError
from .fusion import CHANNELS, SENSORS

log = logging.getLogger(__name__)

WINDOW = 500
SEGMENTS = 5
NUM_CLASSES = 8
LOCATIONS = ("Bag", "Hips", "Torso", "Hand")
INPUT_MODES = ("raw", "fft", "raw_and_fft")
ROTATED = ("accelerometer", "gravity", "gyroscope", "linear_accelerometer", "magnetometer")


@dataclass
class SensorSample:
    modalities: dict[str, np.ndarray]  # name -> [window, channels]
    labels: np.ndarray | None = None  # [5] class indices
    location: str = ""


@dataclass
class Dataset:
    """Column-oriented collection of windows; indexing yields ``SensorSample``."""

    modalities: dict[str, np.ndarray]  # name -> [N, window, channels]
    labels: np.ndarray | None = None  # [N, 5]
    locations: np.ndarray = field(default_factory=lambda: np.array([], dtype=object))

    def __post_init__(self):
        n = len(self)
        if len(self.locations) != n:
            if len(self.locations) == 0:
                self.locations = np.array([""] * n, dtype=object)
            else:
                raise InputError(f"{len(self.locations)} location tags for {n} samples")
        for name, arr in self.modalities.items():
            if arr.shape[0] != n:
                raise InputError(f"modality {name} has {arr.shape[0]} rows, expected {n}")
        if self.labels is not None and self.labels.shape[0] != n:
            raise InputError(f"{self.labels.shape[0]} label rows for {n} samples")

    def __len__(self) -> int:
        first = next(iter(self.modalities.values()), None)
        return 0 if first is None else first.shape[0]

    def __getitem__(self, i: int) -> SensorSample:
        return SensorSample(
            {name: arr[i] for name, arr in self.modalities.items()},
            None if self.labels is None else self.labels[i],
            str(self.locations[i]),
        )

    def __iter__(self) -> Iterator[SensorSample]:
        return (self[i] for i in range(len(self)))

    @property
    def window(self) -> int:
        return next(iter(self.modalities.values())).shape[1]

    def subset(self, index) -> "Dataset":
        index = np.asarray(index)
        if index.size == 0:
            index = index.astype(np.intp)
        return Dataset(
            {name: arr[index] for name, arr in self.modalities.items()},
            None if self.labels is None else self.labels[index],
            self.locations[index],
        )

    @classmethod
    def from_samples(cls, samples: Sequence[SensorSample]) -> "Dataset":
        if not samples:
            raise InputError("cannot build a dataset from zero samples")
        names = list(samples[0].modalities)
        labels = None
        if all(s.labels is not None for s in samples):
            labels = np.stack([np.asarray(s.labels) for s in samples])
        return cls(
            {n: np.stack([s.modalities[n] for s in samples]) for n in names},
            labels,
            np.array([s.location for s in samples], dtype=object),
        )

    @classmethod
    def concat(cls, parts: Sequence["Dataset"]) -> "Dataset":
        parts = [p for p in parts if len(p)] or list(parts[:1])
        names = list(parts[0].modalities)
        has_labels = all(p.labels is not None for p in parts)
        return cls(
            {n: np.concatenate([p.modalities[n] for p in parts]) for n in names},
            np.concatenate([p.labels for p in parts]) if has_labels else None,
            np.concatenate([p.locations for p in parts]),
        )


# ---------------------------------------------------------------------------
# manifest + text files
# ---------------------------------------------------------------------------


@dataclass
class DatasetManifest:
    split: str
    location: str
    paths: dict[str, Path]
    label_path: Path | None
    sample_count: int
    window: int = WINDOW
    source: Path | None = None


def read_manifest(path) -> DatasetManifest:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ManifestError(f"cannot read manifest {path}: {exc}") from exc
    values: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ManifestError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in values:
            raise ManifestError(f"{path}:{lineno}: duplicate key {key!r}")
        values[key] = value
    known = {"split", "location", "samples", "window", "label", *SENSORS}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ManifestError(f"{path}: unknown manifest keys {unknown}")
    for key in ("split", "location", "samples"):
        if key not in values:
            raise ManifestError(f"{path}: missing required key {key!r}")
    paths = {name: path.parent / values[name] for name in SENSORS if name in values}
    if not paths:
        raise ManifestError(f"{path}: no sensor files listed")
    label = path.parent / values["label"] if "label" in values else None
    for p in [*paths.values(), *([label] if label else [])]:
        if not p.exists():
            raise ManifestError(f"{path}: referenced file {p} does not exist")
    try:
        count, window = int(values["samples"]), int(values.get("window", WINDOW))
    except ValueError as exc:
        raise ManifestError(f"{path}: samples/window must be integers") from exc
    return DatasetManifest(values["split"], values["location"], paths, label, count, window, path)


def write_manifest(manifest: DatasetManifest, path) -> Path:
    path = Path(path)
    lines = [
        f"split = {manifest.split}",
        f"location = {manifest.location}",
        f"samples = {manifest.sample_count}",
        f"window = {manifest.window}",
    ]
    for name in SENSORS:
        if name in manifest.paths:
            lines.append(f"{name} = {Path(manifest.paths[name]).name}")
    if manifest.label_path is not None:
        lines.append(f"label = {Path(manifest.label_path).name}")
    path.write_text("\n".join(lines) + "\n")
    return path


def _read_matrix(path: Path, columns: int) -> np.ndarray:
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            tokens = line.split()
            if not tokens:
                continue
            try:
                row = np.array(tokens, dtype=np.float64)
            except ValueError:
                bad = next(t for t in tokens if not _is_float(t))
                raise FormatError(path, lineno, f"cannot parse number {bad!r}") from None
            if row.size != columns:
                raise FormatError(path, lineno, f"expected {columns} values, found {row.size}")
            rows.append(row)
    if not rows:
        return np.empty((0, columns))
    return np.stack(rows)


def _is_float(token: str) -> bool:
    try:
        float(token)
    except ValueError:
        return False
    return True


def load_dataset(manifest: DatasetManifest | str | Path) -> Dataset:
    if not isinstance(manifest, DatasetManifest):
        manifest = read_manifest(manifest)
    mods = {}
    for name, path in manifest.paths.items():
        s = CHANNELS[name]
        flat = _read_matrix(path, manifest.window * s)
        mods[name] = flat.reshape(-1, manifest.window, s)
    labels = None
    if manifest.label_path is not None:
        raw = _read_matrix(manifest.label_path, SEGMENTS)
        bad = (raw != np.round(raw)) | (raw < 1) | (raw > NUM_CLASSES)
        if bad.any():
            row = int(np.flatnonzero(bad.any(axis=1))[0]) + 1
            raise FormatError(manifest.label_path, row, f"labels must be integers in 1..{NUM_CLASSES}")
        labels = raw.astype(np.int64) - 1
    counts = {name: arr.shape[0] for name, arr in mods.items()}
    if labels is not None:
        counts["label"] = labels.shape[0]
    if len(set(counts.values())) > 1:
        raise ManifestError(f"row counts disagree across files: {counts}")
    n = next(iter(counts.values()))
    if n != manifest.sample_count:
        raise ManifestError(f"manifest declares {manifest.sample_count} samples but files hold {n}")
    if "orientation" in mods:
        mods["orientation"] = normalize_quaternions(mods["orientation"])
    return Dataset(mods, labels, np.array([manifest.location] * n, dtype=object))


def load_manifests(paths: Sequence) -> Dataset:
    return Dataset.concat([load_dataset(p) for p in paths])


def write_dataset(dataset: Dataset, out_dir, split: str, location: str | None = None) -> Path:
    """Write ``dataset`` in the text layout and return the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {}
    for name in SENSORS:
        if name not in dataset.modalities:
            continue
        arr = dataset.modalities[name]
        paths[name] = out_dir / f"{name}.txt"
        np.savetxt(paths[name], arr.reshape(arr.shape[0], -1), fmt="%.10g")
    label_path = None
    if dataset.labels is not None:
        label_path = out_dir / "label.txt"
        np.savetxt(label_path, dataset.labels + 1, fmt="%d")
    if location is None:
        location = str(dataset.locations[0]) if len(dataset) else "Hips"
    manifest = DatasetManifest(split, location, paths, label_path, len(dataset), dataset.window)
    return write_manifest(manifest, out_dir / "manifest.txt")


# ---------------------------------------------------------------------------
# filtering
# ---------------------------------------------------------------------------


def filter_invalid(dataset: Dataset) -> tuple[Dataset, int]:
    """Drop windows holding any NaN/Inf; returns the survivors and the drop count."""
    keep = np.ones(len(dataset), dtype=bool)
    for arr in dataset.modalities.values():
        keep &= np.isfinite(arr).reshape(arr.shape[0], -1).all(axis=1)
    dropped = int((~keep).sum())
    if dropped:
        log.info("dropped %d of %d samples with non-finite values", dropped, len(dataset))
    return dataset.subset(np.flatnonzero(keep)), dropped


# ---------------------------------------------------------------------------
# FFT
# ---------------------------------------------------------------------------


def fft_magnitude(x: np.ndarray, axis: int = -2) -> np.ndarray:
    """Magnitude of the full-length DFT of every channel along the time axis."""
    return np.abs(np.fft.fft(np.asarray(x, dtype=np.float64), axis=axis))


def fft_transform(sample: SensorSample) -> SensorSample:
    return SensorSample(
        {name: fft_magnitude(x, axis=0) for name, x in sample.modalities.items()},
        sample.labels,
        sample.location,
    )


def prepare_inputs(modalities: Mapping[str, np.ndarray], mode: str) -> dict[str, np.ndarray]:
    """Map raw windows (``[..., window, channels]``) to network inputs for ``mode``."""
    if mode == "raw":
        return dict(modalities)
    if mode == "fft":
        return {n: fft_magnitude(x) for n, x in modalities.items()}
    if mode == "raw_and_fft":
        return {n: np.concatenate([x, fft_magnitude(x)], axis=-1) for n, x in modalities.items()}
    raise ConfigurationError(f"unknown input mode {mode!r}; expected one of {INPUT_MODES}")


# ---------------------------------------------------------------------------
# rotations and quaternions (w, x, y, z)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RotationAngles:
    yaw: float  # about z
    pitch: float  # about y
    roll: float  # about x

    def inverse_matrix(self) -> np.ndarray:
        return rotation_matrix(self).T


def draw_rotation(rng: np.random.Generator) -> RotationAngles:
    yaw, pitch, roll = rng.uniform(0.0, 2 * math.pi, size=3)
    return RotationAngles(float(yaw), float(pitch), float(roll))


def rotation_matrix(angles: RotationAngles) -> np.ndarray:
    """``R_z(yaw) @ R_y(pitch) @ R_x(roll)``."""
    cz, sz = math.cos(angles.yaw), math.sin(angles.yaw)
    cy, sy = math.cos(angles.pitch), math.sin(angles.pitch)
    cx, sx = math.cos(angles.roll), math.sin(angles.roll)
    rz = np.array([[cz, -sz, 0.0], [sz, cz, 0.0], [0.0, 0.0, 1.0]])
    ry = np.array([[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]])
    rx = np.array([[1.0, 0.0, 0.0], [0.0, cx, -sx], [0.0, sx, cx]])
    return rz @ ry @ rx


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product, broadcasting over leading axes."""
    aw, ax, ay, az = np.moveaxis(np.asarray(a), -1, 0)
    bw, bx, by, bz = np.moveaxis(np.asarray(b), -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def euler_to_quat(yaw: float, pitch: float, roll: float) -> np.ndarray:
    """Quaternion of ``R_z(yaw) R_y(pitch) R_x(roll)``."""
    qz = np.array([math.cos(yaw / 2), 0.0, 0.0, math.sin(yaw / 2)])
    qy = np.array([math.cos(pitch / 2), 0.0, math.sin(pitch / 2), 0.0])
    qx = np.array([math.cos(roll / 2), math.sin(roll / 2), 0.0, 0.0])
    return quat_multiply(quat_multiply(qz, qy), qx)


def quat_to_euler(q) -> tuple[float, float, float]:
    """Inverse of :func:`euler_to_quat` (pitch in [-pi/2, pi/2]); degenerate at gimbal lock."""
    w, x, y, z = np.asarray(q, dtype=np.float64) / np.linalg.norm(q)
    roll = math.atan2(2 * (w * x + y * z), 1 - 2 * (x * x + y * y))
    pitch = math.asin(max(-1.0, min(1.0, 2 * (w * y - z * x))))
    yaw = math.atan2(2 * (w * z + x * y), 1 - 2 * (y * y + z * z))
    return yaw, pitch, roll


def quat_to_matrix(q) -> np.ndarray:
    w, x, y, z = np.asarray(q, dtype=np.float64)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def normalize_quaternions(q: np.ndarray) -> np.ndarray:
    """Rescale rows to unit norm; zero rows become NaN so filtering drops them."""
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(norm > 0, q / norm, np.nan)


def quat_rotate(q, angles: RotationAngles) -> np.ndarray:
    """Left-compose the augmentation rotation with orientation(s) ``q`` (``[..., 4]``)."""
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    if (norm == 0).any():
        raise InputError("cannot rotate a zero quaternion")
    aug = euler_to_quat(angles.yaw, angles.pitch, angles.roll)
    out = quat_multiply(aug, q / norm)
    return out / np.linalg.norm(out, axis=-1, keepdims=True)


def apply_random_rotation(sample: SensorSample, angles: RotationAngles) -> SensorSample:
    """Rotate every 3-axis sensor and the orientation stream; pressure is untouched."""
    rot = rotation_matrix(angles)
    out = {}
    for name, x in sample.modalities.items():
        if name in ROTATED:
            out[name] = x @ rot.T
        elif name == "orientation":
            out[name] = quat_rotate(x, angles)
        else:
            out[name] = x
    return SensorSample(out, sample.labels, sample.location)


def rotate_batch(modalities: Mapping[str, np.ndarray], angles: Sequence[RotationAngles]) -> dict[str, np.ndarray]:
    """Batched :func:`apply_random_rotation`: one angle triple per window."""
    mats = np.stack([rotation_matrix(a) for a in angles])  # [B, 3, 3]
    quats = np.stack([euler_to_quat(a.yaw, a.pitch, a.roll) for a in angles])  # [B, 4]
    out = {}
    for name, x in modalities.items():
        if name in ROTATED:
            out[name] = np.einsum("btj,bij->bti", x, mats)
        elif name == "orientation":
            q = quat_multiply(quats[:, None, :], x)
            out[name] = q / np.linalg.norm(q, axis=-1, keepdims=True)
        else:
            out[name] = x
    return out


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------


@dataclass
class SynthConfig:
    samples: int = 64
    classes: int = NUM_CLASSES
    noise: float = 0.0
    window: int = WINDOW
    location: str = "Hips"
    # class signatures come from this seed so independently seeded splits agree
    signature_seed: int = 0

    def validate(self) -> None:
        if self.classes != NUM_CLASSES:
            raise ConfigurationError(f"synthetic data must have {NUM_CLASSES} classes, got {self.classes}")
        if self.samples < 1:
            raise ConfigurationError(f"sample count must be >= 1, got {self.samples}")
        if self.noise < 0 or not math.isfinite(self.noise):
            raise ConfigurationError(f"noise must be a finite non-negative number, got {self.noise}")
        if self.window < SEGMENTS or self.window % SEGMENTS:
            raise ConfigurationError(f"window must be a positive multiple of {SEGMENTS}, got {self.window}")


def _signatures(cfg: SynthConfig) -> dict:
    g = rngmod.stream(cfg.signature_seed, rngmod.SIGNATURE)
    k = cfg.classes
    return {
        # cycles per window, distinct per class
        "freq": g.permutation(np.arange(1, k + 1)) * 2.0 + 1.0,
        "offset": {n: g.uniform(-1.0, 1.0, size=(k, CHANNELS[n])) for n in SENSORS},
        "amp": {n: g.uniform(0.3, 1.0, size=(k, CHANNELS[n])) for n in SENSORS},
        "euler": g.uniform(-1.0, 1.0, size=(k, 3)),
    }


def generate_synthetic(cfg: SynthConfig, seed: int) -> Dataset:
    """Windows whose class sets a sinusoid frequency and per-channel offsets."""
    cfg.validate()
    sig = _signatures(cfg)
    g = rngmod.stream(seed, rngmod.SYNTH)
    n, w = cfg.samples, cfg.window
    classes = g.permutation(np.arange(n) % cfg.classes)
    t = np.arange(w) / w
    mods = {}
    for name in SENSORS:
        if name == "orientation":
            continue
        s = CHANNELS[name]
        phase = g.uniform(0, 2 * math.pi, size=(n, 1, s))
        freq = sig["freq"][classes][:, None, None]
        wave = np.sin(2 * math.pi * freq * t[None, :, None] + phase)
        x = sig["offset"][name][classes][:, None, :] + sig["amp"][name][classes][:, None, :] * wave
        mods[name] = x + cfg.noise * g.standard_normal(x.shape)
    # orientation: class-specific mean attitude with a small periodic wobble
    phase = g.uniform(0, 2 * math.pi, size=(n, 1, 1))
    wobble = 0.3 * np.sin(2 * math.pi * sig["freq"][classes][:, None, None] * t[None, :, None] + phase)
    eul = sig["euler"][classes][:, None, :] + wobble  # [n, w, 3]
    half = eul / 2
    cz, sz = np.cos(half[..., 0]), np.sin(half[..., 0])
    cy, sy = np.cos(half[..., 1]), np.sin(half[..., 1])
    cx, sx = np.cos(half[..., 2]), np.sin(half[..., 2])
    zero = np.zeros_like(cz)
    q = quat_multiply(
        quat_multiply(np.stack([cz, zero, zero, sz], -1), np.stack([cy, zero, sy, zero], -1)),
        np.stack([cx, sx, zero, zero], -1),
    )
    q = q + cfg.noise * g.standard_normal(q.shape)
    mods["orientation"] = q / np.linalg.norm(q, axis=-1, keepdims=True)
    mods = {name: mods[name] for name in SENSORS}
    labels = np.repeat(classes[:, None], SEGMENTS, axis=1).astype(np.int64)
    return Dataset(mods, labels, np.array([cfg.location] * n, dtype=object))


def synth_generate(cfg: SynthConfig, out_dir, seed: int, split: str = "train") -> Path:
    dataset = generate_synthetic(cfg, seed)
    return write_dataset(dataset, out_dir, split, cfg.location)
