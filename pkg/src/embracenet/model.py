"""End-to-end activity model: per-sensor conv encoders, a fusion stage, conv
post-processing and a per-second softmax classifier.

Four fusion variants share the same encoder/post-processing geometry:

``embrace``       per-sensor docking dense layer (ReLU) + stochastic modality masks
``early``         raw channels concatenated before a single encoder
``intermediate``  encoder features concatenated along the channel axis
``late``          one full encoder+classifier per sensor, softmax outputs averaged
"""

from __future__ import annotations

import io
import json
import logging
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import rng as rngmod
from .data import INPUT_MODES, SEGMENTS, WINDOW
from .errors import CheckpointError, ConfigurationError, InputError, InternalError
from .fusion import (
    CHANNELS,
    SENSORS,
    early_fuse,
    embrace_backward,
    embrace_forward,
    expected_fusion,
    intermediate_fuse,
    sample_masks,
    uniform_probabilities,
    validate_probabilities,
)
from .tensor import (
    Conv1dLayer,
    DenseLayer,
    OptimizerState,
    ParameterStore,
    conv1d_backward,
    conv1d_forward,
    dense_backward,
    dense_forward,
    he_uniform,
    per_position_cross_entropy,
    relu,
    relu_backward,
    softmax_cross_entropy_backward,
    softmax_rows,
)

log = logging.getLogger(__name__)

FUSIONS = ("embrace", "early", "intermediate", "late")


@dataclass(frozen=True)
class ConvSpec:
    filters: int
    stride: int = 1
    kernel: int = 5
    # (time, channels) output size this layer must produce, when pinned
    expect: tuple[int, int] | None = None


BASE_PREPROC = (
    ConvSpec(32, 5, expect=(100, 32)),
    ConvSpec(64, 5, expect=(20, 64)),
    ConvSpec(128, 2, expect=(10, 128)),
    ConvSpec(256, 2, expect=(5, 256)),
)
BASE_POSTPROC = (
    ConvSpec(256, 1, expect=(5, 256)),
    ConvSpec(256, 1, expect=(5, 256)),
    ConvSpec(8, 1, kernel=1, expect=(5, 8)),
)
LARGE_PREPROC = (
    ConvSpec(32, 1, expect=(500, 32)),
    ConvSpec(32, 5, expect=(100, 32)),
    ConvSpec(64, 1, expect=(100, 64)),
    ConvSpec(64, 5, expect=(20, 64)),
    ConvSpec(128, 1, expect=(20, 128)),
    ConvSpec(128, 2, expect=(10, 128)),
    ConvSpec(256, 1, expect=(10, 256)),
    ConvSpec(256, 2, expect=(5, 256)),
    ConvSpec(512, 1, expect=(5, 512)),
    ConvSpec(512, 1, expect=(5, 512)),
)
LARGE_POSTPROC = (
    ConvSpec(512, 1, expect=(5, 512)),
    ConvSpec(512, 1, expect=(5, 512)),
    ConvSpec(256, 1, expect=(5, 256)),
    ConvSpec(256, 1, expect=(5, 256)),
    ConvSpec(8, 1, kernel=1, expect=(5, 8)),
)
TINY_PREPROC = (ConvSpec(4, 2), ConvSpec(4, 2))
TINY_POSTPROC = (ConvSpec(4, 1), ConvSpec(8, 1, kernel=1))


@dataclass(frozen=True)
class ModelConfig:
    preproc: tuple[ConvSpec, ...] = BASE_PREPROC
    postproc: tuple[ConvSpec, ...] = BASE_POSTPROC
    c: int = 256
    fusion: str = "embrace"
    input_mode: str = "raw"
    modalities: tuple[str, ...] = SENSORS
    class_count: int = 8
    window: int = WINDOW
    p: tuple[float, ...] | None = None  # None -> uniform
    # "expected" replaces mask sampling with sum_k p_k d_k; for debugging only
    fusion_mode: str = "stochastic"
    preset: str = "base"

    @classmethod
    def preset_config(cls, name: str, **overrides) -> "ModelConfig":
        presets = {
            "base": dict(preproc=BASE_PREPROC, postproc=BASE_POSTPROC, c=256, window=WINDOW),
            "large": dict(preproc=LARGE_PREPROC, postproc=LARGE_POSTPROC, c=512, window=WINDOW),
            "tiny": dict(preproc=TINY_PREPROC, postproc=TINY_POSTPROC, c=4, window=20),
        }
        if name not in presets:
            raise ConfigurationError(f"unknown model preset {name!r}; expected one of {sorted(presets)}")
        return cls(preset=name, **{**presets[name], **overrides})

    @property
    def m(self) -> int:
        return len(self.modalities)

    @property
    def probabilities(self) -> np.ndarray:
        return uniform_probabilities(self.m) if self.p is None else np.asarray(self.p, dtype=np.float64)

    def input_channels(self, sensor: str) -> int:
        return CHANNELS[sensor] * (2 if self.input_mode == "raw_and_fft" else 1)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        d = dict(d)
        for key in ("preproc", "postproc"):
            d[key] = tuple(
                ConvSpec(s["filters"], s["stride"], s["kernel"], None if s["expect"] is None else tuple(s["expect"]))
                for s in d[key]
            )
        d["modalities"] = tuple(d["modalities"])
        if d.get("p") is not None:
            d["p"] = tuple(d["p"])
        return cls(**d)

    def validate(self) -> None:
        if self.fusion not in FUSIONS:
            raise ConfigurationError(f"unknown fusion {self.fusion!r}; expected one of {FUSIONS}")
        if self.input_mode not in INPUT_MODES:
            raise ConfigurationError(f"unknown input mode {self.input_mode!r}; expected one of {INPUT_MODES}")
        if self.fusion_mode not in ("stochastic", "expected"):
            raise ConfigurationError(f"unknown fusion mode {self.fusion_mode!r}")
        if not self.modalities or len(set(self.modalities)) != len(self.modalities):
            raise ConfigurationError(f"modalities must be a non-empty list without repeats: {self.modalities}")
        unknown = [s for s in self.modalities if s not in CHANNELS]
        if unknown:
            raise ConfigurationError(f"unknown sensors {unknown}")
        if self.fusion == "embrace":
            p = validate_probabilities(self.probabilities)
            if p.size != self.m:
                raise ConfigurationError(f"{p.size} selection probabilities for {self.m} modalities")
        if self.c < 1 or self.class_count < 1:
            raise ConfigurationError("docking width and class count must be positive")
        if not self.preproc or not self.postproc:
            raise ConfigurationError("need at least one pre-processing and one post-processing layer")
        head = self.postproc[-1]
        if head.filters != self.class_count or head.kernel != 1:
            raise ConfigurationError(
                f"classifier layer must have {self.class_count} filters and kernel 1, got {head}"
            )
        for spec in (*self.preproc, *self.postproc):
            if spec.filters < 1 or spec.stride < 1 or spec.kernel < 1:
                raise ConfigurationError(f"invalid conv spec {spec}")


def _check_expect(where: str, spec_expect, got: tuple[int, int]) -> None:
    if spec_expect is not None and tuple(spec_expect) != got:
        raise ConfigurationError(f"{where}: output size {got[0]}x{got[1]} but expected {spec_expect[0]}x{spec_expect[1]}")


@dataclass
class ForwardCache:
    token: int
    probs: np.ndarray
    items: dict = field(default_factory=dict)


class Model:
    """A built network. Parameters live in ``self.params`` (one flat buffer)."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        config.validate()
        self.config = config
        self.seed = int(seed)
        self._plan = self._trace_shapes()
        self.params = ParameterStore((name, shape) for name, shape, _ in self._plan)
        g = rngmod.stream(self.seed, rngmod.INIT)
        for name, shape, fan_in in self._plan:
            if name.endswith(".w"):
                self.params[name][...] = he_uniform(g, shape, fan_in)
        self._layers: dict[str, Conv1dLayer | DenseLayer] = {}
        for name, _, _ in self._plan:
            base = name[:-2]
            if name.endswith(".w") and base not in self._layers:
                w, b = self.params[base + ".w"], self.params[base + ".b"]
                if base.endswith("dock"):
                    self._layers[base] = DenseLayer(w, b)
                else:
                    self._layers[base] = Conv1dLayer(w, b, self._strides[base])
        self._token = 0
        self._live_token = None
        log.debug("built %s/%s model with %d parameters", config.preset, config.fusion, self.param_count)

    # -- construction -----------------------------------------------------

    def _trace_shapes(self):
        """Propagate shapes through the layer chain, checking pinned sizes.

        Returns ``[(param_name, shape, fan_in)]`` in registration order.
        """
        cfg = self.config
        plan = []
        self._strides: dict[str, int] = {}

        def chain(prefix, specs, length, channels):
            for i, spec in enumerate(specs, 1):
                name = f"{prefix}{i}"
                plan.append((name + ".w", (spec.kernel, channels, spec.filters), spec.kernel * channels))
                plan.append((name + ".b", (spec.filters,), 0))
                self._strides[name] = spec.stride
                length, channels = -(-length // spec.stride), spec.filters
                _check_expect(name, spec.expect, (length, channels))
            return length, channels

        def encoder(prefix, channels):
            length, width = chain(prefix + "pre", cfg.preproc, cfg.window, channels)
            if length != SEGMENTS:
                raise ConfigurationError(
                    f"{prefix}pre{len(cfg.preproc)}: encoder ends at length {length}, need {SEGMENTS} segments"
                )
            return width

        if cfg.fusion == "embrace":
            for s in cfg.modalities:
                width = encoder(f"{s}.", cfg.input_channels(s))
                plan.append((f"{s}.dock.w", (width, cfg.c), width))
                plan.append((f"{s}.dock.b", (cfg.c,), 0))
            chain("post", cfg.postproc, SEGMENTS, cfg.c)
        elif cfg.fusion == "early":
            width = encoder("early.", sum(cfg.input_channels(s) for s in cfg.modalities))
            chain("post", cfg.postproc, SEGMENTS, width)
        elif cfg.fusion == "intermediate":
            widths = [encoder(f"{s}.", cfg.input_channels(s)) for s in cfg.modalities]
            chain("post", cfg.postproc, SEGMENTS, sum(widths))
        else:  # late
            for s in cfg.modalities:
                width = encoder(f"{s}.", cfg.input_channels(s))
                chain(f"{s}.post", cfg.postproc, SEGMENTS, width)
        return plan

    @property
    def param_count(self) -> int:
        return self.params.size

    def layer(self, name: str):
        return self._layers[name]

    def layer_names(self) -> list[str]:
        return list(self._layers)

    # -- forward / backward ----------------------------------------------

    def _chain_forward(self, prefix: str, count: int, x: np.ndarray, linear_last: bool = False):
        caches = []
        for i in range(1, count + 1):
            name = f"{prefix}{i}"
            z = conv1d_forward(x, self._layers[name])
            caches.append((name, x, z))
            x = z if (linear_last and i == count) else relu(z)
        return x, caches

    def _chain_backward(self, caches, g: np.ndarray, linear_last: bool = False) -> np.ndarray:
        for idx in range(len(caches) - 1, -1, -1):
            name, x, z = caches[idx]
            if not (linear_last and idx == len(caches) - 1):
                g = relu_backward(g, z)
            gx, gw, gb = conv1d_backward(g, x, self._layers[name])
            self.params.grad(name + ".w")[...] += gw
            self.params.grad(name + ".b")[...] += gb
            g = gx
        return g

    def _check_inputs(self, inputs: Mapping[str, np.ndarray]) -> int:
        cfg = self.config
        batch = None
        for s in cfg.modalities:
            if s not in inputs:
                raise InputError(f"missing input for sensor {s!r}")
            x = inputs[s]
            if x.ndim != 3 or x.shape[1:] != (cfg.window, cfg.input_channels(s)):
                raise InputError(
                    f"{s}: expected [batch, {cfg.window}, {cfg.input_channels(s)}] for input mode "
                    f"{cfg.input_mode!r}, got {x.shape}"
                )
            if batch is None:
                batch = x.shape[0]
            elif x.shape[0] != batch:
                raise InputError("sensor inputs disagree on batch size")
        return batch

    def draw_masks(self, rngs: Sequence[np.random.Generator]) -> np.ndarray:
        """One mask stack per window: ``[batch, m, 5, c]``."""
        p = self.config.probabilities
        return np.stack([sample_masks(p, (SEGMENTS, self.config.c), g) for g in rngs])

    def forward(self, inputs: Mapping[str, np.ndarray], rngs=None, masks=None):
        """Run the network on a batch.

        ``inputs`` maps sensor name to ``[batch, window, channels]``. For embrace
        fusion pass either one generator per window (``rngs``) or a frozen mask
        stack ``[batch, m, 5, c]``. Returns ``(probs [batch, 5, classes], cache)``.
        """
        cfg = self.config
        batch = self._check_inputs(inputs)
        items: dict = {}
        n_post = len(cfg.postproc)
        if cfg.fusion == "late":
            per_model = []
            for s in cfg.modalities:
                h, enc = self._chain_forward(f"{s}.pre", len(cfg.preproc), inputs[s])
                logits, post = self._chain_forward(f"{s}.post", n_post, h, linear_last=True)
                per_model.append(softmax_rows(logits))
                items[s] = (enc, post)
            items["per_model"] = per_model
            probs = np.mean(np.stack(per_model), axis=0)
        else:
            if cfg.fusion == "early":
                x = early_fuse(inputs, cfg.modalities)
                fused, enc = self._chain_forward("early.pre", len(cfg.preproc), x)
                items["early"] = enc
            elif cfg.fusion == "intermediate":
                feats = []
                for s in cfg.modalities:
                    h, items[s] = self._chain_forward(f"{s}.pre", len(cfg.preproc), inputs[s])
                    feats.append(h)
                fused = intermediate_fuse(feats)
                items["widths"] = [f.shape[-1] for f in feats]
            else:
                docked = []
                for s in cfg.modalities:
                    h, enc = self._chain_forward(f"{s}.pre", len(cfg.preproc), inputs[s])
                    z = dense_forward(h, self._layers[f"{s}.dock"])
                    docked.append(relu(z))
                    items[s] = (enc, h, z)
                d = np.stack(docked, axis=1)  # [B, m, 5, c]
                if cfg.fusion_mode == "expected":
                    fused = expected_fusion(d, cfg.probabilities)
                    masks = np.broadcast_to(cfg.probabilities[None, :, None, None], d.shape)
                else:
                    if masks is None:
                        if rngs is None or len(rngs) != batch:
                            raise InputError("embrace fusion needs one rng per window or frozen masks")
                        masks = self.draw_masks(rngs)
                    fused = embrace_forward(d, masks)
                items["masks"] = masks
            logits, post = self._chain_forward("post", n_post, fused, linear_last=True)
            items["post"] = post
            probs = softmax_rows(logits)
        self._token += 1
        self._live_token = self._token
        return probs, ForwardCache(self._token, probs, items)

    def backward(self, cache: ForwardCache, labels: np.ndarray) -> float:
        """Accumulate parameter gradients of the mean cross entropy; returns the loss.

        Late fusion optimizes the mean of the per-sensor models' losses, which
        decouples into independent training of each sensor model.
        """
        if cache.token != self._live_token:
            raise InternalError("stale forward cache: backward must follow its own forward")
        self._live_token = None
        cfg = self.config
        labels = np.asarray(labels)
        items = cache.items
        if cfg.fusion == "late":
            m = cfg.m
            losses = []
            for s, p in zip(cfg.modalities, items["per_model"]):
                enc, post = items[s]
                losses.append(per_position_cross_entropy(p, labels).mean())
                g = softmax_cross_entropy_backward(p, labels) / m
                g = self._chain_backward(post, g, linear_last=True)
                self._chain_backward(enc, g)
            return float(np.mean(losses))

        loss = float(per_position_cross_entropy(cache.probs, labels).mean())
        g = softmax_cross_entropy_backward(cache.probs, labels)
        g = self._chain_backward(items["post"], g, linear_last=True)
        if cfg.fusion == "early":
            self._chain_backward(items["early"], g)
        elif cfg.fusion == "intermediate":
            start = 0
            for s, w in zip(cfg.modalities, items["widths"]):
                self._chain_backward(items[s], g[..., start : start + w])
                start += w
        else:
            gd = embrace_backward(g, items["masks"])
            for k, s in enumerate(cfg.modalities):
                enc, h, z = items[s]
                gz = relu_backward(gd[:, k], z)
                gh, gw, gb = dense_backward(gz, h, self._layers[f"{s}.dock"])
                self.params.grad(f"{s}.dock.w")[...] += gw
                self.params.grad(f"{s}.dock.b")[...] += gb
                self._chain_backward(enc, gh)
        return loss

    def loss(self, inputs, labels, masks=None, rngs=None) -> float:
        """Forward-only mean cross entropy (late fusion: mean of per-sensor losses)."""
        probs, cache = self.forward(inputs, rngs=rngs, masks=masks)
        self._live_token = None
        if self.config.fusion == "late":
            return float(np.mean([per_position_cross_entropy(p, labels).mean() for p in cache.items["per_model"]]))
        return float(per_position_cross_entropy(probs, labels).mean())


def build(config: ModelConfig, seed: int = 0) -> Model:
    return Model(config, seed)


def predict(probs: np.ndarray) -> np.ndarray:
    """Per-row argmax; ties go to the lowest class index."""
    return np.argmax(probs, axis=-1)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

MAGIC = b"EMBRCKP1"


def save_checkpoint(path, model: Model, step: int, optimizer: OptimizerState | None = None, extra: dict | None = None) -> Path:
    """Single-file checkpoint: magic, u64 header length, JSON header, LE float64 blobs."""
    path = Path(path)
    entries = []
    blobs = []
    offset = 0

    def add(name, arr):
        nonlocal offset
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        offset += arr.size

    for name in model.params:
        add(name, model.params[name])
    opt = None
    if optimizer is not None:
        add("adam.first_moment", optimizer.first_moment)
        add("adam.second_moment", optimizer.second_moment)
        opt = {k: getattr(optimizer, k) for k in ("beta1", "beta2", "epsilon_hat", "step_count")}
    header = {
        "format": 1,
        "config": model.config.to_dict(),
        "seed": model.seed,
        "step": int(step),
        "optimizer": opt,
        "entries": entries,
        "extra": extra or {},
    }
    head = json.dumps(header, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<Q", len(head)))
    buf.write(head)
    for b in blobs:
        buf.write(b)
    tmp = path.with_name(path.name + ".tmp")
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp.write_bytes(buf.getvalue())
    os.replace(tmp, path)
    return path


@dataclass
class Checkpoint:
    model: Model
    step: int
    optimizer: OptimizerState | None
    extra: dict


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint file")
    (hlen,) = struct.unpack("<Q", raw[len(MAGIC) : len(MAGIC) + 8])
    start = len(MAGIC) + 8
    try:
        header = json.loads(raw[start : start + hlen])
        config = ModelConfig.from_dict(header["config"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: corrupt header: {exc}") from exc
    data = np.frombuffer(raw, dtype="<f8", offset=start + hlen)
    model = Model(config, header["seed"])
    arrays = {}
    for e in header["entries"]:
        n = int(np.prod(e["shape"], dtype=np.int64))
        if e["offset"] + n > data.size:
            raise CheckpointError(f"{path}: truncated data for {e['name']}")
        arrays[e["name"]] = data[e["offset"] : e["offset"] + n].reshape(e["shape"])
    for name in model.params:
        if name not in arrays or arrays[name].shape != model.params.shape(name):
            raise CheckpointError(f"{path}: parameter {name!r} missing or mis-shaped")
        model.params[name][...] = arrays[name]
    optimizer = None
    if header.get("optimizer"):
        optimizer = OptimizerState(
            arrays["adam.first_moment"].astype(np.float64),
            arrays["adam.second_moment"].astype(np.float64),
            **header["optimizer"],
        )
    return Checkpoint(model, int(header["step"]), optimizer, header.get("extra", {}))
