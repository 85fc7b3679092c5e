"""Integer-only inference over a QuantNetwork with a two-region buffer arena.

All feature maps live in one byte arena sized for the largest consecutive
input/output pair. Layer inputs and outputs alternate between its two
ends, so a layer never overwrites its own input and the arena size is the
peak-memory figure of the layer-by-layer schedule.

Per-stage arithmetic (all products int8 x int8 in int64/int32 accumulators):

* phi1: spatial dot products -> folded BN requantize
* phi2: true convolution with the stored (reversed) kernel -> folded BN
  requantize -> clamp at 0 -> window sums of 8 -> pool requantize
* phi3: per pooling window: depthwise convolution -> rescale -> pointwise
  dot products -> folded BN requantize -> clamp at 0 -> window sum -> pool
  requantize. Positions past the last full window are still computed so the
  MACC count matches the layer-level accounting, then discarded.
* phi4: dense dot products + int32 bias -> int32 logits (no requantize)
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .model import ModelConfig
from .numerics import ACT_QMAX, ACT_QMIN, QuantTensor, ShapeError, rshift_round
from .nn_ops import same_padding
from .quantizer import QuantNetwork, RequantConstants, check_accumulator_bounds

LOGIT_BYTES = 4


class EngineError(ValueError):
    pass


def requantize(acc, c: RequantConstants, feature=None):
    """``clamp(rshift_round((acc + bias) * mult, shift), -128, 127)`` as int8.

    ``feature`` selects one entry of per-feature constants; otherwise the
    constants broadcast against the leading axis of ``acc``.
    """
    acc = np.asarray(acc, np.int64)
    if feature is not None:
        m, s, b = c.mult[feature], c.shift[feature], c.bias[feature]
    elif len(c) == 1:
        m, s, b = c.mult[0], c.shift[0], c.bias[0]
    else:
        shape = (-1,) + (1,) * (acc.ndim - 1)
        m, s, b = c.mult.reshape(shape), c.shift.reshape(shape), c.bias.reshape(shape)
    return np.clip(rshift_round((acc + b) * m, s), ACT_QMIN, ACT_QMAX).astype(np.int8)


@dataclass
class LayerTrace:
    name: str
    macc_count: int
    input_bytes: int
    output_bytes: int
    live_peak_bytes: int
    scratch_bytes: int = 0


@dataclass
class ExecutionTrace:
    layers: list = field(default_factory=list)
    arena_bytes: int = 0
    weight_bytes: int = 0         # parameter slots, one byte each
    actual_weight_bytes: int = 0  # bytes the QuantNetwork really stores

    @property
    def macc_total(self) -> int:
        return sum(r.macc_count for r in self.layers)

    @property
    def peak_live_bytes(self) -> int:
        return max((r.live_peak_bytes for r in self.layers), default=0)

    @property
    def memory_bytes(self) -> int:
        """Weights plus the two live feature buffers."""
        return self.weight_bytes + self.peak_live_bytes

    @property
    def scratch_peak_bytes(self) -> int:
        return max((r.scratch_bytes for r in self.layers), default=0)

    def to_dict(self) -> dict:
        return {
            "layers": [asdict(r) for r in self.layers],
            "macc_total": self.macc_total,
            "peak_live_bytes": self.peak_live_bytes,
            "arena_bytes": self.arena_bytes,
            "weight_bytes": self.weight_bytes,
            "actual_weight_bytes": self.actual_weight_bytes,
            "memory_bytes": self.memory_bytes,
            "scratch_peak_bytes": self.scratch_peak_bytes,
        }

    def format_text(self) -> str:
        lines = [f"{'layer':<6} {'MACC':>12} {'in B':>8} {'out B':>8} {'live B':>8} {'scratch B':>10}"]
        for r in self.layers:
            lines.append(f"{r.name:<6} {r.macc_count:>12,} {r.input_bytes:>8,} {r.output_bytes:>8,} "
                         f"{r.live_peak_bytes:>8,} {r.scratch_bytes:>10,}")
        lines.append(f"total: {self.macc_total:,} MACC / {self.peak_live_bytes:,} B live peak / "
                     f"{self.weight_bytes:,} B weights / {self.memory_bytes:,} B memory")
        return "\n".join(lines)


def buffer_plan(config: ModelConfig) -> list:
    """(name, input_bytes, output_bytes) for each block of the schedule."""
    c = config
    return [
        ("phi1", c.n_ch * c.n_s, c.n_k * c.n_s),
        ("phi2", c.n_k * c.n_s, c.n_k * c.len2),
        ("phi3", c.n_k * c.len2, c.fc_in),
        ("phi4", c.fc_in, LOGIT_BYTES * c.n_cl),
    ]


class Arena:
    """One byte buffer whose two ends hold the current input and output."""

    def __init__(self, size: int):
        self.size = size
        self.buf = bytearray(size)

    def region(self, end: str, shape, dtype) -> np.ndarray:
        dtype = np.dtype(dtype)
        nbytes = int(np.prod(shape)) * dtype.itemsize
        if nbytes > self.size:
            raise EngineError(f"buffer of {nbytes} B exceeds arena of {self.size} B")
        offset = 0 if end == "low" else self.size - nbytes
        if dtype.itemsize > 1:
            offset -= offset % dtype.itemsize
        return np.frombuffer(self.buf, dtype, int(np.prod(shape)), offset).reshape(shape)


class Engine:
    """Runs one QuantNetwork; ``run`` allocates a fresh arena per call."""

    def __init__(self, qnet: QuantNetwork, workers: int = 1):
        check_accumulator_bounds(qnet)
        self.qnet = qnet
        self.config = qnet.config
        self.workers = max(1, int(workers))
        self.plan = buffer_plan(self.config)
        self.arena_bytes = max(i + o for _, i, o in self.plan)
        # int64 copies of the weights, made once
        self.w = {k: v.data.astype(np.int64) for k, v in qnet.weights.items()}
        self.rq = qnet.requant

    def _map(self, fn, items):
        if self.workers == 1:
            for i in items:
                fn(i)
            return
        with ThreadPoolExecutor(self.workers) as pool:
            list(pool.map(fn, items))

    # -- blocks -----------------------------------------------------------
    def _phi1(self, x, out):
        w, rq = self.w["spatial"], self.rq["phi1"]
        xi = x.astype(np.int64)

        def feature(k):
            out[k] = requantize(w[k] @ xi, rq, k)
        self._map(feature, range(self.config.n_k))
        return self.config.n_k * self.config.n_ch * self.config.n_s, 8 * self.config.n_s

    def _phi2(self, x, out):
        c = self.config
        h, rq, rq_pool = self.w["temporal"], self.rq["phi2"], self.rq["phi2_pool"]
        left, right = same_padding(c.n_f)
        n_win = c.len2 * c.pool

        def feature(k):
            xp = np.pad(x[k].astype(np.int64), (left, right))
            acc = np.convolve(xp, h[k], "valid")
            y = np.maximum(requantize(acc, rq, k), 0)
            sums = y[:n_win].astype(np.int64).reshape(c.len2, c.pool).sum(axis=1)
            out[k] = requantize(sums, rq_pool, k)
        self._map(feature, range(c.n_k))
        return c.n_k * c.n_f * c.n_s, 8 * (c.n_s + c.n_f)

    def _phi3(self, x, out):
        c = self.config
        h, wp = self.w["depthwise"], self.w["pointwise"]
        rq_dw, rq_bn, rq_pool = self.rq["phi3_dw"], self.rq["phi3"], self.rq["phi3_pool"]
        k_len = c.sep_kernel
        left, right = same_padding(k_len)
        xp = np.pad(x.astype(np.int64), ((0, 0), (left, right)))
        macc = 0
        starts = list(range(0, c.len2, c.pool))
        for w_idx, t0 in enumerate(starts):
            t1 = min(t0 + c.pool, c.len2)
            seg = xp[:, t0:t1 + k_len - 1]
            dw = np.stack([np.convolve(seg[k], h[k], "valid") for k in range(c.n_k)])
            d = requantize(dw, rq_dw)
            z = wp @ d.astype(np.int64)
            macc += c.n_k * k_len * (t1 - t0) + c.n_k * c.n_k * (t1 - t0)
            if t1 - t0 < c.pool:
                continue  # tail positions: computed for accounting, not pooled
            y = np.maximum(requantize(z, rq_bn), 0)
            out[:, w_idx] = requantize(y.astype(np.int64).sum(axis=1), rq_pool)
        scratch = c.n_k * (k_len + c.pool - 1) * 8 + 2 * c.n_k * c.pool * 8
        return macc, scratch

    def _phi4(self, x, out):
        w = self.w["fc"]
        flat = x.reshape(-1).astype(np.int64)
        acc = w @ flat + self.qnet.fc_bias
        if np.any(np.abs(acc) > 2 ** 31 - 1):
            raise EngineError("logit accumulator overflowed int32")
        out[:] = acc.astype(np.int32)
        return w.size, 0

    # -- driver -----------------------------------------------------------
    def run(self, x: QuantTensor):
        c = self.config
        if not isinstance(x, QuantTensor):
            raise EngineError("engine input must be a QuantTensor")
        if x.shape != (c.n_ch, c.n_s):
            raise ShapeError(f"input shape {x.shape} does not match ({c.n_ch}, {c.n_s})")
        if x.scale_exp != self.qnet.input_exp:
            raise EngineError(f"input scale exponent {x.scale_exp} != network input {self.qnet.input_exp}")
        arena = Arena(self.arena_bytes)
        shapes = {"phi1": (c.n_k, c.n_s), "phi2": (c.n_k, c.len2), "phi3": (c.n_k, c.len3),
                  "phi4": (c.n_cl,)}
        kernels = {"phi1": self._phi1, "phi2": self._phi2, "phi3": self._phi3, "phi4": self._phi4}
        trace = ExecutionTrace(arena_bytes=self.arena_bytes, weight_bytes=self.qnet.param_slots(),
                               actual_weight_bytes=self.qnet.storage_bytes())
        cur = arena.region("low", x.shape, np.int8)
        cur[...] = x.data
        side = "low"
        for name, in_bytes, out_bytes in self.plan:
            other = "high" if side == "low" else "low"
            dtype = np.int32 if name == "phi4" else np.int8
            out = arena.region(other, shapes[name], dtype)
            if cur.nbytes != in_bytes or out.nbytes != out_bytes:
                raise EngineError(f"{name}: runtime buffers ({cur.nbytes}, {out.nbytes}) differ "
                                  f"from the plan ({in_bytes}, {out_bytes})")
            macc, scratch = kernels[name](cur, out)
            trace.layers.append(LayerTrace(name, int(macc), in_bytes, out_bytes, in_bytes + out_bytes,
                                           int(scratch)))
            cur, side = out, other
        return np.array(cur, dtype=np.int32), trace


def run(qnet: QuantNetwork, x: QuantTensor, workers: int = 1):
    """Integer logits (int32, step ``2**-qnet.logit_exp``) and the execution trace."""
    return Engine(qnet, workers).run(x)


def run_batch(qnet: QuantNetwork, data, workers: int = 1):
    """Quantize float trials with the network's input scale and run each one."""
    from .quantizer import quantize_input

    eng = Engine(qnet, workers)
    data = np.asarray(data, np.float32)
    logits, trace, saturated = [], None, 0
    for trial in data:
        q = quantize_input(qnet, trial)
        saturated += q.saturated
        out, trace = eng.run(q)
        logits.append(out)
    return np.stack(logits) if logits else np.zeros((0, qnet.config.n_cl), np.int32), trace, saturated


@dataclass(frozen=True)
class SimdModel:
    lanes: int = 4
    cores: int = 1
    overhead_factor: float = 1.0

    def __post_init__(self):
        if self.lanes < 1 or self.cores < 1 or self.overhead_factor < 1.0:
            raise ValueError("lanes and cores must be >= 1 and overhead_factor >= 1.0")


def project_cycles(trace_or_maccs, model: SimdModel = SimdModel()) -> int:
    maccs = trace_or_maccs.macc_total if hasattr(trace_or_maccs, "macc_total") else int(trace_or_maccs)
    base = -(-maccs // (model.lanes * model.cores))
    return int(math.ceil(base * model.overhead_factor))
