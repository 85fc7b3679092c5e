"""Export of a trained float network to the int8 representation.

Every tensor uses a symmetric power-of-two scale ``2**-n``. Batch norm and
the scale conversion between a layer's accumulator and its int8 output are
folded into per-feature ``(mult, shift, bias)`` triples applied as::

    out = clamp(rshift_round((acc + bias) * mult, shift), -128, 127)

ReLU becomes a clamp at zero after requantization, and each average pool
is an int32 window sum whose division by 8 is a rounding right shift.
Temporal kernels are stored reversed so the engine can run them as true
convolutions.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .model import ModelConfig, Network, forward
from .nn_ops import BatchNormParams
from .numerics import (ACT_QMAX, ACT_QMIN, QuantTensor, quantize, round_half_away, rshift_round)

SCALE_EXP_MIN, SCALE_EXP_MAX = -24, 24
MULT_BITS = 30
INT32_MIN, INT32_MAX = -(2 ** 31), 2 ** 31 - 1
CALIB_PERCENTILE = 99.9
REVERSED_KERNELS = ("temporal", "depthwise")


class QuantizationError(ValueError):
    pass


def scale_exp_for_max(max_abs: float, qmax: int = 127) -> int:
    """Largest ``n`` with ``max_abs * 2**n <= qmax``, clamped to [-24, 24]."""
    if not max_abs > 0:
        return 0
    if max_abs * 2.0 ** SCALE_EXP_MAX <= qmax:
        return SCALE_EXP_MAX
    if max_abs * 2.0 ** SCALE_EXP_MIN > qmax:
        return SCALE_EXP_MIN
    n = math.floor(math.log2(qmax / max_abs))
    # guard log2 rounding at exact powers of two
    while max_abs * 2.0 ** (n + 1) <= qmax:
        n += 1
    while max_abs * 2.0 ** n > qmax:
        n -= 1
    return int(min(max(n, SCALE_EXP_MIN), SCALE_EXP_MAX))


def choose_scale_exp(t) -> int:
    t = np.asarray(t)
    return scale_exp_for_max(float(np.max(np.abs(t))) if t.size else 0.0)


@dataclass(frozen=True)
class RequantConstants:
    mult: np.ndarray   # int64 holding 32-bit multipliers, one per feature
    shift: np.ndarray  # int64 in [0, 31]
    bias: np.ndarray   # int64 holding 32-bit accumulator-domain offsets

    def __post_init__(self):
        for name in ("mult", "shift", "bias"):
            object.__setattr__(self, name, np.atleast_1d(np.asarray(getattr(self, name), dtype=np.int64)))
        if not (self.mult.shape == self.shift.shape == self.bias.shape):
            raise QuantizationError("mult, shift and bias must have one entry per feature")
        if np.any((self.shift < 0) | (self.shift > 31)):
            raise QuantizationError(f"shift out of [0, 31]: {self.shift}")
        if np.any(np.abs(self.mult) > 2 ** MULT_BITS):
            raise QuantizationError("multiplier exceeds 2**30")
        if np.any((self.bias < INT32_MIN) | (self.bias > INT32_MAX)):
            raise QuantizationError("requantization bias does not fit in 32 bits")

    def __len__(self):
        return self.mult.size

    @classmethod
    def identity(cls, n: int = 1) -> "RequantConstants":
        return cls(np.ones(n), np.zeros(n), np.zeros(n))

    def column(self):
        """Constants shaped (features, 1) for broadcasting over time."""
        return self.mult[:, None], self.shift[:, None], self.bias[:, None]

    def apply(self, acc, relu: bool = False):
        m, s, b = (self.mult, self.shift, self.bias) if np.ndim(acc) <= 1 else self.column()
        out = np.clip(rshift_round((np.asarray(acc, np.int64) + b) * m, s), ACT_QMIN, ACT_QMAX)
        if relu:
            out = np.maximum(out, 0)
        return out.astype(np.int8)


def _mult_shift(gain: float) -> tuple[int, int]:
    if gain <= 0:
        raise QuantizationError(f"requantization gain must be positive, got {gain}")
    shift = min(max(math.floor(math.log2(2 ** MULT_BITS / gain)), 0), 31)
    mult = int(round_half_away(gain * 2.0 ** shift))
    if mult > 2 ** MULT_BITS:
        raise QuantizationError(f"gain {gain} too large to requantize with shift >= 0")
    if mult == 0:
        raise QuantizationError(f"gain {gain} underflows a 31-bit shift")
    while mult % 2 == 0 and shift > 0:
        mult //= 2
        shift -= 1
    return mult, shift


def fold_affine(a, b, acc_exp: int, out_exp: int) -> RequantConstants:
    """Fold ``y = a * acc_real + b`` into integer constants.

    ``acc_real = acc * 2**-acc_exp`` and the int8 result has step
    ``2**-out_exp``. Every ``a`` must be strictly positive.
    """
    a = np.atleast_1d(np.asarray(a, np.float64))
    b = np.broadcast_to(np.asarray(b, np.float64), a.shape)
    if np.any(~(a > 0)):
        bad = np.flatnonzero(~(a > 0)).tolist()
        raise QuantizationError(
            f"non-positive batch-norm scale on features {bad}: clamp-at-zero ReLU after "
            "requantization is only valid for positive scales")
    mults, shifts, biases = [], [], []
    for ai, bi in zip(a, b):
        m, s = _mult_shift(ai * 2.0 ** (out_exp - acc_exp))
        bias = round_half_away(bi / ai * 2.0 ** acc_exp)
        if not INT32_MIN <= bias <= INT32_MAX:
            raise QuantizationError(f"folded bias {bias} does not fit in 32 bits (a={ai}, b={bi})")
        mults.append(m)
        shifts.append(s)
        biases.append(int(bias))
    return RequantConstants(np.array(mults), np.array(shifts), np.array(biases))


def fold_bn(weight_exp: int, bn: BatchNormParams, in_exp: int, out_exp: int) -> RequantConstants:
    """Merge inference batch norm and the int8 scale conversion of one layer."""
    a, b = bn.scale_shift()
    return fold_affine(a, b, in_exp + weight_exp, out_exp)


def rescale(n: int, acc_exp: int, out_exp: int) -> RequantConstants:
    """Plain scale conversion (no affine part) for ``n`` features."""
    return fold_affine(np.ones(n), np.zeros(n), acc_exp, out_exp)


def pool_requant(in_exp: int, out_exp: int, n: int, window: int = 8) -> RequantConstants:
    """Window sum at step ``2**-in_exp`` -> window mean at step ``2**-out_exp``."""
    exp = out_exp - in_exp - int(math.log2(window))
    if 2 ** int(math.log2(window)) != window:
        raise QuantizationError("pool window must be a power of two")
    if exp >= 0:
        return RequantConstants(np.full(n, 2 ** exp), np.zeros(n), np.zeros(n))
    return RequantConstants(np.ones(n), np.full(n, -exp), np.zeros(n))


@dataclass
class QuantNetwork:
    config: ModelConfig
    input_exp: int
    weights: dict          # name -> QuantTensor; temporal/depthwise stored reversed
    requant: dict          # stage -> RequantConstants
    act_exps: dict         # quantization point -> scale exponent
    fc_bias: np.ndarray    # int32 at the logit scale
    logit_exp: int
    sign_flips: dict = field(default_factory=dict)

    STAGES = ("phi1", "phi2", "phi2_pool", "phi3_dw", "phi3", "phi3_pool")

    def __post_init__(self):
        self.validate()

    def validate(self):
        c = self.config
        shapes = {"spatial": (c.n_k, c.n_ch), "temporal": (c.n_k, c.n_f),
                  "depthwise": (c.n_k, c.sep_kernel), "pointwise": (c.n_k, c.n_k),
                  "fc": (c.n_cl, c.fc_in)}
        for name, shape in shapes.items():
            w = self.weights.get(name)
            if w is None or w.shape != shape:
                raise QuantizationError(f"weight {name}: expected shape {shape}, got "
                                        f"{None if w is None else w.shape}")
            if np.any(w.data == -128):
                raise QuantizationError(f"weight {name} uses -128; weights are limited to [-127, 127]")
        for stage in self.STAGES:
            if stage not in self.requant or len(self.requant[stage]) != c.n_k:
                raise QuantizationError(f"requantization constants for {stage} missing or mis-sized")
        if self.fc_bias.shape != (c.n_cl,):
            raise QuantizationError("dense bias must have one entry per class")
        check_accumulator_bounds(self)

    def param_slots(self) -> int:
        """Parameter count in the float model's convention.

        int8 weights count once each; every batch-norm fold stands in for
        its 4 parameters per feature; the dense bias counts once per class.
        """
        n_bn_features = sum(len(self.requant[s]) for s in ("phi1", "phi2", "phi3"))
        return sum(int(w.data.size) for w in self.weights.values()) + 4 * n_bn_features \
            + int(self.fc_bias.size)

    def storage_bytes(self) -> int:
        """Bytes actually held: int8 weights, 4+1+4 bytes per requant entry, int32 bias."""
        rq = sum(9 * len(r) for r in self.requant.values())
        return sum(int(w.data.size) for w in self.weights.values()) + rq + 4 * int(self.fc_bias.size)

    def kernel(self, name: str) -> QuantTensor:
        """Weights in float-model orientation (undoes the storage reversal)."""
        w = self.weights[name]
        if name in REVERSED_KERNELS:
            return QuantTensor(np.ascontiguousarray(w.data[:, ::-1]), w.scale_exp)
        return w


def check_accumulator_bounds(qnet: QuantNetwork):
    """Reject networks whose worst-case int32 accumulators could overflow."""
    c = qnet.config
    per_tap = 128 * 127
    fc_bias = int(np.max(np.abs(qnet.fc_bias))) if qnet.fc_bias.size else 0
    bounds = {
        "phi1": per_tap * c.n_ch,
        "phi2": per_tap * c.n_f,
        "phi3_dw": per_tap * c.sep_kernel,
        "phi3": per_tap * c.n_k,
        "phi4": per_tap * c.fc_in + fc_bias,
    }
    for stage, bound in bounds.items():
        if bound > INT32_MAX:
            raise QuantizationError(f"{stage}: worst-case accumulator {bound} exceeds int32")
        rq = qnet.requant.get(stage)
        if rq is not None and bound + int(np.max(np.abs(rq.bias))) > 2 ** 32:
            raise QuantizationError(f"{stage}: accumulator plus bias exceeds 33 bits")
    return bounds


def calibrate(net: Network, data, percentile: float = CALIB_PERCENTILE, batch: int = 64) -> dict:
    """Scale exponent per quantization point from float activations.

    Uses the given percentile of absolute values (not the maximum) so that
    rare outliers saturate instead of coarsening the whole grid.
    """
    data = np.asarray(data, np.float32)
    if data.ndim != 3 or data.shape[0] == 0:
        raise QuantizationError("calibration needs a non-empty (trials, channels, samples) array")
    points = net.quant_points()
    saved = {k: q.enabled for k, q in points.items()}
    for q in points.values():
        q.observe, q.observed, q.enabled = True, [], False
    try:
        for i in range(0, data.shape[0], batch):
            forward(net, data[i:i + batch], "infer")
        exps = {}
        for k, q in points.items():
            values = np.concatenate(q.observed)
            exps[k] = scale_exp_for_max(float(np.percentile(values, percentile)), ACT_QMAX)
    finally:
        for k, q in points.items():
            q.observe, q.observed, q.enabled = False, [], saved[k]
    return exps


def _quantize_weight(w) -> QuantTensor:
    return quantize(w, choose_scale_exp(w))


def export(net: Network, calib, percentile: float = CALIB_PERCENTILE,
           use_trained_scales: bool = True) -> QuantNetwork:
    """Build the integer network from a float (ideally QAT-trained) one.

    Activation scales come from the network's own quantization points when
    QAT calibrated them, otherwise from ``calib``. Features whose batch-norm
    scale is negative get their producing filter negated, which keeps every
    folded multiplier positive without changing the function.
    """
    calib_data = calib.data if hasattr(calib, "data") else calib
    if calib_data is None or len(calib_data) == 0:
        raise QuantizationError("export needs a non-empty calibration set")
    c = net.config
    exps = net.act_scale_exps()
    if not (use_trained_scales and all(v is not None for v in exps.values())):
        exps = calibrate(net, calib_data, percentile)

    bns = net.bn_layers()
    folds = {k: bns[k].bn.scale_shift() for k in ("bn1", "bn2", "bn3")}
    flips = {}
    w = {k: np.asarray(v, np.float64) for k, v in net.weight_tensors().items()}
    for bn_key, w_key in (("bn1", "spatial"), ("bn2", "temporal"), ("bn3", "pointwise")):
        a, b = folds[bn_key]
        if np.any(a == 0):
            raise QuantizationError(f"{bn_key}: zero batch-norm scale cannot be folded")
        sign = np.where(a < 0, -1.0, 1.0)
        w[w_key] = w[w_key] * sign[:, None]
        folds[bn_key] = (np.abs(a), b)
        flips[w_key] = np.flatnonzero(sign < 0).tolist()

    qw = {k: _quantize_weight(v) for k, v in w.items()}
    e_in, e1, e2r, e2 = exps["q_in"], exps["q1"], exps["q2r"], exps["q2"]
    e3d, e3r, e3 = exps["q3d"], exps["q3r"], exps["q3"]
    requant = {
        "phi1": fold_affine(*folds["bn1"], e_in + qw["spatial"].scale_exp, e1),
        "phi2": fold_affine(*folds["bn2"], e1 + qw["temporal"].scale_exp, e2r),
        "phi2_pool": pool_requant(e2r, e2, c.n_k, c.pool),
        "phi3_dw": rescale(c.n_k, e2 + qw["depthwise"].scale_exp, e3d),
        "phi3": fold_affine(*folds["bn3"], e3d + qw["pointwise"].scale_exp, e3r),
        "phi3_pool": pool_requant(e3r, e3, c.n_k, c.pool),
    }
    logit_exp = e3 + qw["fc"].scale_exp
    fc_b = np.asarray(net.layer("fc").params["b"], np.float64)
    fc_bias = round_half_away(fc_b * 2.0 ** logit_exp)
    if np.any(np.abs(fc_bias) > INT32_MAX):
        raise QuantizationError("dense bias does not fit in int32 at the logit scale")
    for name in REVERSED_KERNELS:
        q = qw[name]
        qw[name] = QuantTensor(np.ascontiguousarray(q.data[:, ::-1]), q.scale_exp, saturated=q.saturated)
    return QuantNetwork(c, e_in, qw, requant, dict(exps), fc_bias.astype(np.int64), logit_exp, flips)


def quantize_input(qnet: QuantNetwork, x) -> QuantTensor:
    return quantize(x, qnet.input_exp, ACT_QMIN, ACT_QMAX)
