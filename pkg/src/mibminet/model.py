"""Network graph of the four-block EEG classifier.

Block layout for an input of ``n_ch x n_s`` samples:

* block 1: spatial conv (``n_k`` filters of ``n_ch x 1``) + BN
* block 2: temporal depthwise conv (``1 x n_f``, same padding) + BN + ReLU + avg pool 8
* block 3: separable conv (depthwise ``1 x 16`` + pointwise ``n_k x n_k``) + BN + ReLU + avg pool 8
* block 4: flatten + dense to ``n_cl`` logits

Quantization points sit on the input, on every stored block output, before
each pooling stage and after the separable depthwise part. They are inert
until quantization-aware training or export enables them.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass

import numpy as np

from .nn_ops import (AvgPool, BatchNorm, BatchNormParams, Dense, Flatten, Layer, PointwiseConv,
                     QuantPoint, ReLU, SpatialConv, TemporalDepthwise)
from .numerics import ShapeError

POOL = 8
SEP_KERNEL = 16
BLOCKS = ("phi1", "phi2", "phi3", "phi4")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    n_ch: int
    n_s: int
    n_k: int
    n_f: int
    n_cl: int
    pool: int = POOL
    sep_kernel: int = SEP_KERNEL

    def __post_init__(self):
        for name in ("n_ch", "n_s", "n_k", "n_f", "n_cl", "pool", "sep_kernel"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v < 1:
                raise ConfigError(f"{name} must be a positive integer, got {v!r}")
        if self.pool != POOL or self.sep_kernel != SEP_KERNEL:
            raise ConfigError("pool size and separable kernel length are fixed at 8 and 16")
        if self.len3 < 1:
            raise ConfigError(
                f"n_s={self.n_s} too short: two pooling stages by {self.pool} leave no samples")

    @property
    def len2(self) -> int:
        """Time length after the first pooling stage."""
        return self.n_s // self.pool

    @property
    def len3(self) -> int:
        return self.len2 // self.pool

    @property
    def fc_in(self) -> int:
        return self.n_k * self.len3

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def with_channels(self, n_ch: int) -> "ModelConfig":
        return ModelConfig(n_ch, self.n_s, self.n_k, self.n_f, self.n_cl)


BCI_IV2A = ModelConfig(22, 750, 32, 64, 4)
PHYSIONET_MMMI = ModelConfig(64, 480, 16, 128, 4)


def _glorot(rng, shape, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(np.float32)


@dataclass
class PlanStep:
    name: str
    in_features: int
    out_features: int
    params: int
    maccs: int


@dataclass
class LayerPlan:
    steps: list

    @property
    def peak_pair(self) -> int:
        return max((s.in_features + s.out_features for s in self.steps), default=0)

    @property
    def params_total(self) -> int:
        return sum(s.params for s in self.steps)

    @property
    def macc_total(self) -> int:
        return sum(s.maccs for s in self.steps)


class Network:
    """Ordered layer list grouped into the four blocks.

    ``self.blocks`` maps block name to its layers; ``self.layers`` is the
    flat execution order used by forward and backward.
    """

    def __init__(self, config: ModelConfig, blocks: dict[str, list[Layer]], seed: int | None = None):
        self.config = config
        self.blocks = blocks
        self.seed = seed
        self.macc_counter = 0

    @property
    def layers(self) -> list[Layer]:
        return [layer for name in BLOCKS for layer in self.blocks[name]]

    # named accessors used by the other modules
    def layer(self, key: str) -> Layer:
        return self._named()[key]

    def _named(self) -> dict[str, Layer]:
        b = self.blocks
        return {
            "q_in": b["phi1"][0], "spatial": b["phi1"][1], "bn1": b["phi1"][2], "q1": b["phi1"][3],
            "temporal": b["phi2"][0], "bn2": b["phi2"][1], "relu2": b["phi2"][2], "q2r": b["phi2"][3],
            "pool2": b["phi2"][4], "q2": b["phi2"][5],
            "depthwise": b["phi3"][0], "q3d": b["phi3"][1], "pointwise": b["phi3"][2],
            "bn3": b["phi3"][3], "relu3": b["phi3"][4], "q3r": b["phi3"][5], "pool3": b["phi3"][6],
            "q3": b["phi3"][7],
            "flatten": b["phi4"][0], "fc": b["phi4"][1],
        }

    @property
    def spatial_weights(self) -> np.ndarray:
        return self.layer("spatial").params["w"]

    def quant_points(self) -> dict[str, QuantPoint]:
        return {k: v for k, v in self._named().items() if isinstance(v, QuantPoint)}

    def bn_layers(self) -> dict[str, BatchNorm]:
        return {k: v for k, v in self._named().items() if isinstance(v, BatchNorm)}

    def weight_tensors(self) -> dict[str, np.ndarray]:
        """Conv and dense weight matrices (the tensors quantized to int8)."""
        n = self._named()
        return {k: n[k].params["w"] for k in ("spatial", "temporal", "depthwise", "pointwise", "fc")}

    def set_quantization(self, enabled: bool):
        for q in self.quant_points().values():
            q.enabled = enabled and q.scale_exp is not None

    def act_scale_exps(self) -> dict[str, int | None]:
        return {k: q.scale_exp for k, q in self.quant_points().items()}

    def forward(self, x, mode: str = "infer"):
        return forward(self, x, mode)

    def backward(self, grad_logits):
        g = grad_logits
        for layer in reversed(self.layers):
            g = layer.backward(g)
        return g

    def gradients(self) -> dict[tuple[str, str], np.ndarray]:
        out = {}
        for key, layer in self._named().items():
            for pname in layer.params:
                if pname in layer.grads:
                    out[(key, pname)] = layer.grads[pname]
        return out

    def parameters(self) -> dict[tuple[str, str], np.ndarray]:
        return {(key, pname): arr for key, layer in self._named().items()
                for pname, arr in layer.params.items()}


def build(config: ModelConfig, init_seed: int = 0, dtype=np.float32) -> Network:
    """Create a freshly initialized network (Glorot-uniform weights, identity BN)."""
    rng = np.random.default_rng(init_seed)
    c = config
    w_spatial = _glorot(rng, (c.n_k, c.n_ch), c.n_ch, c.n_k).astype(dtype)
    w_temporal = _glorot(rng, (c.n_k, c.n_f), c.n_f, c.n_f).astype(dtype)
    w_depth = _glorot(rng, (c.n_k, c.sep_kernel), c.sep_kernel, c.sep_kernel).astype(dtype)
    w_point = _glorot(rng, (c.n_k, c.n_k), c.n_k, c.n_k).astype(dtype)
    w_fc = _glorot(rng, (c.n_cl, c.fc_in), c.fc_in, c.n_cl).astype(dtype)
    b_fc = np.zeros(c.n_cl, dtype)

    blocks = {
        "phi1": [QuantPoint("in"), SpatialConv(w_spatial),
                 BatchNorm(BatchNormParams.identity(c.n_k, dtype)), QuantPoint("phi1")],
        "phi2": [TemporalDepthwise(w_temporal), BatchNorm(BatchNormParams.identity(c.n_k, dtype)),
                 ReLU(), QuantPoint("phi2_act"), AvgPool(c.pool), QuantPoint("phi2")],
        "phi3": [TemporalDepthwise(w_depth), QuantPoint("phi3_dw"), PointwiseConv(w_point),
                 BatchNorm(BatchNormParams.identity(c.n_k, dtype)), ReLU(), QuantPoint("phi3_act"),
                 AvgPool(c.pool), QuantPoint("phi3")],
        "phi4": [Flatten(), Dense(w_fc, b_fc)],
    }
    return Network(config, blocks, seed=init_seed)


def forward(net: Network, x, mode: str = "infer"):
    """Logits for one trial ``(n_ch, n_s)`` or a batch ``(B, n_ch, n_s)``.

    Adds the multiply-accumulates performed to ``net.macc_counter``.
    """
    c = net.config
    x = np.asarray(x)
    if x.shape[-2:] != (c.n_ch, c.n_s) or x.ndim not in (2, 3):
        raise ShapeError(f"expected input (..., {c.n_ch}, {c.n_s}), got {x.shape}")
    n_trials = x.shape[0] if x.ndim == 3 else 1
    shape = (c.n_ch, c.n_s)
    for layer in net.layers:
        net.macc_counter += n_trials * layer.macc(shape)
        shape = layer.output_shape(shape)
        x = layer.forward(x, mode)
    return x


def layer_plan(net: Network) -> LayerPlan:
    """Per-block feature/parameter/MACC counts taken from the materialized layers."""
    c = net.config
    shape = (c.n_ch, c.n_s)
    steps = []
    for name in BLOCKS:
        in_features = int(np.prod(shape))
        params = maccs = 0
        for layer in net.blocks[name]:
            params += layer.n_params()
            maccs += layer.macc(shape)
            shape = layer.output_shape(shape)
        steps.append(PlanStep(name, in_features, int(np.prod(shape)), params, maccs))
    return LayerPlan(steps)


def count_maccs(net: Network) -> int:
    """MACCs of one single-trial forward pass, measured by running it."""
    before = net.macc_counter
    forward(net, np.zeros((net.config.n_ch, net.config.n_s), np.float32))
    return net.macc_counter - before


__all__ = ["ModelConfig", "Network", "LayerPlan", "PlanStep", "build", "forward", "layer_plan",
           "count_maccs", "ConfigError", "BCI_IV2A", "PHYSIONET_MMMI"]
