"""Finite-difference verification of every backward pass, layer by layer and
through complete tiny models of each fusion variant."""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, replace

import numpy as np

from . import fusion, model as modelmod, tensor
from . import rng as rngmod
from .model import FUSIONS, Model, ModelConfig
from .tensor import Conv1dLayer, DenseLayer, GradCheckReport, gradient_check


@dataclass
class Section:
    name: str
    report: GradCheckReport


def _linear_probe(rng, shape):
    return rng.standard_normal(shape)


def check_conv1d(rng, tolerance=1e-4) -> GradCheckReport:
    x = rng.standard_normal((2, 20, 3))
    layer = Conv1dLayer(rng.standard_normal((5, 3, 4)), rng.standard_normal(4), stride=2)
    probe = _linear_probe(rng, (2, 10, 4))

    def loss():
        return float((tensor.conv1d_forward(x, layer) * probe).sum())

    gx, gw, gb = tensor.conv1d_backward(probe, x, layer)
    return gradient_check(loss, {"input": (x, gx), "weights": (layer.weights, gw), "bias": (layer.bias, gb)}, tolerance)


def check_dense(rng, tolerance=1e-4) -> GradCheckReport:
    x = rng.standard_normal((2, 5, 6))
    layer = DenseLayer(rng.standard_normal((6, 4)), rng.standard_normal(4))
    probe = _linear_probe(rng, (2, 5, 4))

    def loss():
        return float((tensor.dense_forward(x, layer) * probe).sum())

    gx, gw, gb = tensor.dense_backward(probe, x, layer)
    return gradient_check(loss, {"input": (x, gx), "weights": (layer.weights, gw), "bias": (layer.bias, gb)}, tolerance)


def check_chain(rng, tolerance=1e-4) -> GradCheckReport:
    """conv -> relu -> dense -> softmax -> cross entropy."""
    x = rng.standard_normal((2, 20, 3))
    conv = Conv1dLayer(rng.standard_normal((5, 3, 4)) * 0.5, rng.standard_normal(4) * 0.1, stride=2)
    dense = DenseLayer(rng.standard_normal((4, 8)) * 0.5, rng.standard_normal(8) * 0.1)
    labels = rng.integers(0, 8, size=(2, 10))

    def forward():
        z = tensor.conv1d_forward(x, conv)
        a = tensor.relu(z)
        p = tensor.softmax_rows(tensor.dense_forward(a, dense))
        return z, a, p

    def loss():
        return tensor.cross_entropy(forward()[2], labels)

    z, a, p = forward()
    g = tensor.softmax_cross_entropy_backward(p, labels)
    ga, gdw, gdb = tensor.dense_backward(g, a, dense)
    gz = tensor.relu_backward(ga, z)
    gx, gcw, gcb = tensor.conv1d_backward(gz, x, conv)
    blocks = {
        "input": (x, gx),
        "conv.weights": (conv.weights, gcw),
        "conv.bias": (conv.bias, gcb),
        "dense.weights": (dense.weights, gdw),
        "dense.bias": (dense.bias, gdb),
    }
    return gradient_check(loss, blocks, tolerance)


def check_embrace(rng, tolerance=1e-4) -> GradCheckReport:
    d = rng.standard_normal((2, 3, 5, 4))
    masks = np.stack([fusion.sample_masks(np.full(3, 1 / 3), (5, 4), rng) for _ in range(2)])
    probe = _linear_probe(rng, (2, 5, 4))

    def loss():
        return float((fusion.embrace_forward(d, masks) * probe).sum())

    return gradient_check(loss, {"docked": (d, fusion.embrace_backward(probe, masks))}, tolerance)


def tiny_inputs(cfg: ModelConfig, rng, batch: int = 2) -> dict[str, np.ndarray]:
    return {s: rng.standard_normal((batch, cfg.window, cfg.input_channels(s))) for s in cfg.modalities}


def check_model(
    cfg: ModelConfig,
    seed: int = 0,
    tolerance: float = 1e-4,
    max_coords: int | None = None,
    batch: int = 2,
) -> GradCheckReport:
    """Full-network check with fusion masks frozen for the whole probe.

    Biases are moved off their zero init first: an all-zero ReLU row feeding a
    zero bias sits exactly on the kink, where finite differences are meaningless.
    """
    rng = rngmod.stream(seed, rngmod.CHECK)
    model = Model(cfg, seed)
    for name in model.params:
        if name.endswith(".b"):
            model.params[name][...] = rng.uniform(-0.1, 0.1, size=model.params.shape(name))
    inputs = tiny_inputs(cfg, rng, batch)
    labels = rng.integers(0, cfg.class_count, size=(batch, 5))
    masks = None
    if cfg.fusion == "embrace":
        masks = model.draw_masks([rngmod.stream(seed, rngmod.MASK, 0, i) for i in range(batch)])
    model.params.zero_grad()
    _, cache = model.forward(inputs, masks=masks)
    model.backward(cache, labels)
    blocks = {name: (model.params[name], model.params.grad(name).copy()) for name in model.params}
    return gradient_check(lambda: model.loss(inputs, labels, masks=masks), blocks, tolerance, max_coords=max_coords, rng=rng)


@contextlib.contextmanager
def corrupted_backward(scale: float = 1.01):
    """Negative control: skew every conv weight gradient by ``scale``."""
    original = tensor.conv1d_backward

    def broken(grad_out, x, layer):
        gx, gw, gb = original(grad_out, x, layer)
        return gx, gw * scale, gb

    tensor.conv1d_backward = broken
    modelmod.conv1d_backward = broken
    try:
        yield
    finally:
        tensor.conv1d_backward = original
        modelmod.conv1d_backward = original


def run_all(config: ModelConfig | None = None, seed: int = 0, tolerance: float = 1e-4) -> list[Section]:
    """Every layer type, then a full model per fusion variant built from ``config``."""
    rng = rngmod.stream(seed, rngmod.CHECK, 1)
    sections = [
        Section("conv1d", check_conv1d(rng, tolerance)),
        Section("dense", check_dense(rng, tolerance)),
        Section("conv-relu-dense-softmax-ce", check_chain(rng, tolerance)),
        Section("embrace", check_embrace(rng, tolerance)),
    ]
    base = config or ModelConfig.preset_config("tiny")
    for name in FUSIONS:
        cfg = replace(base, fusion=name)
        sections.append(Section(f"model-{base.preset}-{name}", check_model(cfg, seed, tolerance)))
    return sections

