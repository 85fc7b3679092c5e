"""Trial datasets and binary file formats, plus the synthetic EEG generator.

MIBT trial file (little-endian, version 1)::

    offset  size  field
    0       4     magic b"MIBT"
    4       2     u16 format version
    6       4     u32 n_trials
    10      2     u16 n_ch
    12      4     u32 n_samples
    16      4     f32 sample rate (Hz)
    20      2     u16 n_classes
    22      ...   n_ch channel names, each u8 length + ASCII bytes
    ...     2*T   u16 labels[n_trials]
    ...     4*T*C*S  f32 data[trial][channel][sample]
    ...     optional: b"SUBJ" + u16 subjects[n_trials]

Checkpoints (magic ``MIBC``) and quantized networks (``MIBQ``) share one
container layout: magic, u16 version, u32 header length, a UTF-8 JSON
header (sorted keys) describing every array (dtype, shape, byte offset),
then the raw little-endian array payload.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import asdict, dataclass, field

import numpy as np

TRIALS_MAGIC = b"MIBT"
TRIALS_VERSION = 1
SUBJECT_TAG = b"SUBJ"
CONTAINER_VERSION = 1
_HEAD = struct.Struct("<4sHIHIfH")


class FormatError(ValueError):
    """A file does not follow the expected layout or violates an invariant."""


@dataclass
class TrialDataset:
    data: np.ndarray            # (n_trials, n_ch, n_samples) float32
    labels: np.ndarray          # (n_trials,) int64 in [0, n_classes)
    channel_names: list
    sample_rate: float
    n_classes: int
    subjects: np.ndarray | None = None

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.channel_names = [str(n) for n in self.channel_names]
        if self.data.ndim != 3:
            raise FormatError(f"trial data must be 3-D (trial, channel, sample), got {self.data.shape}")
        if self.labels.shape != (self.data.shape[0],):
            raise FormatError(f"{self.labels.size} labels for {self.data.shape[0]} trials")
        if len(self.channel_names) != self.data.shape[1]:
            raise FormatError(f"{len(self.channel_names)} channel names for {self.data.shape[1]} channels")
        if self.n_classes < 1 or (self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes)):
            raise FormatError(f"labels must lie in [0, {self.n_classes})")
        if not np.all(np.isfinite(self.data)):
            raise FormatError("trial data contains NaN or Inf")
        if self.subjects is not None:
            self.subjects = np.asarray(self.subjects, dtype=np.int64)
            if self.subjects.shape != self.labels.shape:
                raise FormatError("one subject id per trial required")

    @property
    def n_trials(self) -> int:
        return self.data.shape[0]

    @property
    def n_ch(self) -> int:
        return self.data.shape[1]

    @property
    def n_samples(self) -> int:
        return self.data.shape[2]

    def subset(self, idx) -> "TrialDataset":
        idx = np.asarray(idx)
        if idx.dtype != bool:
            idx = idx.astype(np.intp)
        subj = None if self.subjects is None else self.subjects[idx]
        return TrialDataset(self.data[idx], self.labels[idx], list(self.channel_names),
                            self.sample_rate, self.n_classes, subj)

    def select_channels(self, channel_idx) -> "TrialDataset":
        channel_idx = [int(i) for i in channel_idx]
        return TrialDataset(self.data[:, channel_idx, :], self.labels,
                            [self.channel_names[i] for i in channel_idx],
                            self.sample_rate, self.n_classes, self.subjects)


def _atomic_write(path, payload: bytes):
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_trials(ds: TrialDataset) -> bytes:
    parts = [_HEAD.pack(TRIALS_MAGIC, TRIALS_VERSION, ds.n_trials, ds.n_ch, ds.n_samples,
                        ds.sample_rate, ds.n_classes)]
    for name in ds.channel_names:
        raw = name.encode("ascii")
        if len(raw) > 255:
            raise FormatError(f"channel name too long: {name!r}")
        parts.append(struct.pack("<B", len(raw)) + raw)
    parts.append(ds.labels.astype("<u2").tobytes())
    parts.append(ds.data.astype("<f4").tobytes())
    if ds.subjects is not None:
        parts.append(SUBJECT_TAG + ds.subjects.astype("<u2").tobytes())
    return b"".join(parts)


def decode_trials(buf: bytes) -> TrialDataset:
    if len(buf) < _HEAD.size:
        raise FormatError("truncated trial file: header incomplete")
    magic, version, n_trials, n_ch, n_samples, rate, n_classes = _HEAD.unpack_from(buf, 0)
    if magic != TRIALS_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {TRIALS_MAGIC!r}")
    if version != TRIALS_VERSION:
        raise FormatError(f"unsupported trial format version {version}")
    pos = _HEAD.size
    names = []
    for _ in range(n_ch):
        if pos >= len(buf):
            raise FormatError("truncated trial file: channel-name table incomplete")
        n = buf[pos]
        raw = buf[pos + 1:pos + 1 + n]
        if len(raw) != n:
            raise FormatError("truncated trial file: channel-name table incomplete")
        names.append(raw.decode("ascii"))
        pos += 1 + n
    label_bytes = 2 * n_trials
    data_bytes = 4 * n_trials * n_ch * n_samples
    if len(buf) < pos + label_bytes + data_bytes:
        raise FormatError(f"truncated trial file: expected {pos + label_bytes + data_bytes} bytes, "
                          f"found {len(buf)}")
    labels = np.frombuffer(buf, "<u2", n_trials, pos).astype(np.int64)
    pos += label_bytes
    if n_trials and labels.max() >= n_classes:
        raise FormatError(f"label {labels.max()} out of range for {n_classes} classes")
    data = np.frombuffer(buf, "<f4", n_trials * n_ch * n_samples, pos).reshape(n_trials, n_ch, n_samples)
    pos += data_bytes
    subjects = None
    if pos < len(buf):
        if buf[pos:pos + 4] != SUBJECT_TAG or len(buf) != pos + 4 + 2 * n_trials:
            raise FormatError("unexpected trailing bytes after trial data")
        subjects = np.frombuffer(buf, "<u2", n_trials, pos + 4).astype(np.int64)
    return TrialDataset(data.astype(np.float32), labels, names, float(rate), n_classes, subjects)


def write_trials(path, ds: TrialDataset):
    _atomic_write(path, encode_trials(ds))


def read_trials(path) -> TrialDataset:
    with open(path, "rb") as f:
        return decode_trials(f.read())


# ---------------------------------------------------------------------------
# Synthetic sensorimotor-rhythm generator
# ---------------------------------------------------------------------------

DEFAULT_SYNTH_NAMES = ("FZ", "FC3", "C3", "FCZ", "CZ", "C4", "CP3", "PZ")


@dataclass(frozen=True)
class SynthSpec:
    """Class-specific oscillatory bursts on a few channels plus white noise.

    ``informative[c]`` lists the channels that carry class ``c``'s source;
    ``bands[c]`` is its ``(center_hz, amplitude)``.
    """

    n_ch: int = 8
    n_samples: int = 256
    sample_rate: float = 128.0
    n_classes: int = 2
    informative: tuple = ((2, 5), (2, 5))
    bands: tuple = ((10.0, 2.0), (10.0, 2.0))
    noise_sigma: float = 1.0
    mixing_seed: int = 0
    burst_fraction: float = 0.75
    channel_names: tuple | None = None

    def __post_init__(self):
        if len(self.informative) != self.n_classes or len(self.bands) != self.n_classes:
            raise ValueError("need one informative set and one band per class")
        for chans in self.informative:
            if not chans or any(not 0 <= c < self.n_ch for c in chans):
                raise ValueError(f"informative channels {chans} outside [0, {self.n_ch})")
        if not 0 < self.burst_fraction <= 1:
            raise ValueError("burst_fraction must lie in (0, 1]")

    def names(self) -> list:
        if self.channel_names is not None:
            return list(self.channel_names)
        if self.n_ch == len(DEFAULT_SYNTH_NAMES):
            return list(DEFAULT_SYNTH_NAMES)
        return [f"CH{i}" for i in range(self.n_ch)]

    def spatial_patterns(self) -> np.ndarray:
        """Unit-norm channel pattern of each class source, shape (n_classes, n_ch)."""
        union = sorted({c for chans in self.informative for c in chans})
        rng = np.random.default_rng(self.mixing_seed)
        q, r = np.linalg.qr(rng.standard_normal((len(union), len(union))))
        q = q * np.sign(np.diag(r))
        patterns = np.zeros((self.n_classes, self.n_ch))
        for c, chans in enumerate(self.informative):
            col = q[:, c % len(union)]
            p = np.zeros(self.n_ch)
            for i, ch in enumerate(union):
                if ch in chans:
                    p[ch] = col[i]
            norm = np.linalg.norm(p)
            if norm < 1e-12:
                p[list(chans)] = 1.0
                norm = np.linalg.norm(p)
            patterns[c] = p / norm
        return patterns

    def to_dict(self) -> dict:
        return asdict(self)


def synth(spec: SynthSpec = SynthSpec(), n_per_class: int = 200, seed: int = 0) -> TrialDataset:
    """Generate a balanced labeled dataset; identical output for identical arguments."""
    rng = np.random.default_rng(seed)
    patterns = spec.spatial_patterns()
    n = spec.n_samples
    t = np.arange(n) / spec.sample_rate
    burst_len = max(1, int(round(spec.burst_fraction * n)))
    labels = np.repeat(np.arange(spec.n_classes), n_per_class)
    labels = labels[rng.permutation(labels.size)]
    data = np.empty((labels.size, spec.n_ch, n), dtype=np.float32)
    window = np.hanning(burst_len + 2)[1:-1]
    for i, c in enumerate(labels):
        freq, amp = spec.bands[c]
        phase = rng.uniform(0, 2 * np.pi)
        onset = rng.integers(0, n - burst_len + 1)
        source = np.zeros(n)
        source[onset:onset + burst_len] = window
        source *= amp * np.sin(2 * np.pi * freq * t + phase)
        noise = rng.standard_normal((spec.n_ch, n)) * spec.noise_sigma
        data[i] = np.outer(patterns[c], source) + noise
    return TrialDataset(data, labels, spec.names(), spec.sample_rate, spec.n_classes)


# ---------------------------------------------------------------------------
# Self-describing array containers
# ---------------------------------------------------------------------------

_CONTAINER_HEAD = struct.Struct("<4sHI")


def encode_container(magic: bytes, meta: dict, arrays: dict, version: int = CONTAINER_VERSION) -> bytes:
    entries = []
    blobs = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"))
        raw = le.tobytes()
        entries.append({"name": name, "dtype": le.dtype.str, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta, "arrays": entries}, sort_keys=True,
                        separators=(",", ":")).encode("utf-8")
    return _CONTAINER_HEAD.pack(magic, version, len(header)) + header + b"".join(blobs)


def decode_container(buf: bytes, magic: bytes, version: int = CONTAINER_VERSION):
    if len(buf) < _CONTAINER_HEAD.size:
        raise FormatError("truncated file: header incomplete")
    got_magic, got_version, header_len = _CONTAINER_HEAD.unpack_from(buf, 0)
    if got_magic != magic:
        raise FormatError(f"bad magic {got_magic!r}, expected {magic!r}")
    if got_version != version:
        raise FormatError(f"unsupported {magic.decode()} version {got_version} (expected {version})")
    start = _CONTAINER_HEAD.size
    if len(buf) < start + header_len:
        raise FormatError("truncated file: JSON header incomplete")
    try:
        header = json.loads(buf[start:start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt header: {exc}") from None
    base = start + header_len
    arrays = {}
    end = base
    for e in header["arrays"]:
        dtype = np.dtype(e["dtype"])
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        if count * dtype.itemsize != e["nbytes"] or len(buf) < base + e["offset"] + e["nbytes"]:
            raise FormatError(f"truncated or inconsistent array {e['name']!r}")
        arr = np.frombuffer(buf, dtype, count, base + e["offset"]).reshape(e["shape"])
        arrays[e["name"]] = arr.astype(dtype.newbyteorder("="))
        end = max(end, base + e["offset"] + e["nbytes"])
    if end != len(buf):
        raise FormatError("unexpected trailing bytes")
    return header["meta"], arrays


def _write_container(path, magic, meta, arrays):
    _atomic_write(path, encode_container(magic, meta, arrays))


def _read_container(path, magic):
    with open(path, "rb") as f:
        return decode_container(f.read(), magic)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"MIBC"


@dataclass
class Checkpoint:
    network: object  # model.Network
    metadata: dict = field(default_factory=dict)


def network_arrays(net) -> dict:
    arrays = {}
    for key, layer in net._named().items():
        for pname, arr in layer.params.items():
            arrays[f"{key}.{pname}"] = arr
        if hasattr(layer, "bn"):
            arrays[f"{key}.running_mean"] = layer.bn.running_mean
            arrays[f"{key}.running_var"] = layer.bn.running_var
    return arrays


def save_checkpoint(path, net, metadata: dict | None = None):
    meta = {
        "config": net.config.to_dict(),
        "act_scale_exps": net.act_scale_exps(),
        "bn_eps": {k: layer.bn.eps for k, layer in net.bn_layers().items()},
        "training": metadata or {},
    }
    _write_container(path, CHECKPOINT_MAGIC, meta, network_arrays(net))


def load_checkpoint(path) -> Checkpoint:
    from .model import ModelConfig, build

    meta, arrays = _read_container(path, CHECKPOINT_MAGIC)
    try:
        config = ModelConfig(**meta["config"])
    except (TypeError, ValueError) as exc:
        raise FormatError(f"invalid model config in checkpoint: {exc}") from None
    net = build(config)
    expected = network_arrays(net)
    if set(expected) != set(arrays):
        raise FormatError(f"checkpoint tensors {sorted(arrays)} do not match network {sorted(expected)}")
    for name, target in expected.items():
        src = arrays[name]
        if src.shape != target.shape:
            raise FormatError(f"{name}: shape {src.shape} does not match config ({target.shape})")
        if not np.all(np.isfinite(src)):
            raise FormatError(f"{name}: non-finite values")
        if name.endswith("running_var") and np.any(src < 0):
            raise FormatError(f"{name}: negative running variance")
        target[...] = src
    for key, layer in net.bn_layers().items():
        layer.bn.eps = float(meta["bn_eps"][key])
    for key, q in net.quant_points().items():
        q.scale_exp = meta["act_scale_exps"].get(key)
    net.seed = meta["training"].get("seed")
    return Checkpoint(net, meta["training"])


# ---------------------------------------------------------------------------
# Quantized networks
# ---------------------------------------------------------------------------

QNET_MAGIC = b"MIBQ"


def save_qnet(path, qnet, metadata: dict | None = None):
    arrays = {f"w.{k}": w.data.astype(np.int8) for k, w in qnet.weights.items()}
    for stage, rq in qnet.requant.items():
        arrays[f"rq.{stage}.mult"] = rq.mult.astype(np.int32)
        arrays[f"rq.{stage}.shift"] = rq.shift.astype(np.int8)
        arrays[f"rq.{stage}.bias"] = rq.bias.astype(np.int32)
    arrays["fc_bias"] = qnet.fc_bias.astype(np.int32)
    meta = {
        "config": qnet.config.to_dict(),
        "input_exp": qnet.input_exp,
        "logit_exp": qnet.logit_exp,
        "weight_exps": {k: w.scale_exp for k, w in qnet.weights.items()},
        "act_exps": qnet.act_exps,
        "sign_flips": qnet.sign_flips,
        "extra": metadata or {},
    }
    _write_container(path, QNET_MAGIC, meta, arrays)


def load_qnet(path):
    """Read a quantized network; the result is validated like any freshly built one."""
    from .model import ModelConfig
    from .numerics import QuantTensor
    from .quantizer import QuantNetwork, RequantConstants

    meta, arrays = _read_container(path, QNET_MAGIC)
    try:
        config = ModelConfig(**meta["config"])
        weights = {}
        for k, exp in meta["weight_exps"].items():
            w = arrays[f"w.{k}"]
            if w.dtype != np.int8:
                raise FormatError(f"weight {k} must be int8, found {w.dtype}")
            weights[k] = QuantTensor(w, int(exp))
        requant = {}
        for stage in QuantNetwork.STAGES:
            requant[stage] = RequantConstants(arrays[f"rq.{stage}.mult"], arrays[f"rq.{stage}.shift"],
                                              arrays[f"rq.{stage}.bias"])
        return QuantNetwork(config, int(meta["input_exp"]), weights, requant, dict(meta["act_exps"]),
                            arrays["fc_bias"].astype(np.int64), int(meta["logit_exp"]),
                            dict(meta.get("sign_flips", {})))
    except KeyError as exc:
        raise FormatError(f"quantized network is missing {exc}") from None
    except ValueError as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"invalid quantized network: {exc}") from None
