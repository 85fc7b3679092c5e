"""Channel ranking from spatial filters, plus electrode presets."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass

import numpy as np

from .model import ModelConfig, Network, build


class ChannelError(ValueError):
    pass


@dataclass(frozen=True)
class RankedChannel:
    index: int
    name: str
    norm: float


@dataclass(frozen=True)
class ChannelRanking:
    entries: tuple

    def __len__(self):
        return len(self.entries)

    @property
    def order(self) -> list:
        return [e.index for e in self.entries]

    @property
    def names(self) -> list:
        return [e.name for e in self.entries]

    def norms_by_channel(self) -> np.ndarray:
        out = np.zeros(len(self.entries))
        for e in self.entries:
            out[e.index] = e.norm
        return out

    def to_json(self) -> str:
        return json.dumps([{"index": e.index, "name": e.name, "norm": e.norm} for e in self.entries],
                          indent=2)


def channel_norms(w_s) -> np.ndarray:
    """l2 norm of each input channel's column in the spatial weights (n_k, n_ch)."""
    w = np.asarray(w_s, np.float64)
    if w.ndim != 2 or w.size == 0:
        raise ChannelError(f"spatial weights must be a non-empty 2-D array, got shape {w.shape}")
    return np.sqrt(np.sum(w * w, axis=0))


def rank_channels(w_s, names=None) -> ChannelRanking:
    """Channels sorted by descending norm; ties keep ascending channel index.

    ``w_s`` may also be a list of weight matrices, whose per-channel norms
    are averaged (ranking over repeated trainings).
    """
    if isinstance(w_s, (list, tuple)) and w_s and np.ndim(w_s[0]) == 2:
        norms = np.mean([channel_norms(w) for w in w_s], axis=0)
    else:
        norms = channel_norms(w_s)
    n_ch = norms.size
    names = list(names) if names is not None else [f"CH{i}" for i in range(n_ch)]
    if len(names) != n_ch:
        raise ChannelError(f"{len(names)} names for {n_ch} channels")
    order = np.argsort(-norms, kind="stable")
    return ChannelRanking(tuple(RankedChannel(int(i), names[i], float(norms[i])) for i in order))


def select_top(ranking: ChannelRanking, n_bar: int) -> list:
    if not 1 <= n_bar <= len(ranking):
        raise ChannelError(f"n_bar must be in [1, {len(ranking)}], got {n_bar}")
    return ranking.order[:n_bar]


# ---------------------------------------------------------------------------
# Electrode presets
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ElectrodePreset:
    name: str
    electrodes: tuple

    def __len__(self):
        return len(self.electrodes)


def normalize_name(name: str) -> str:
    return name.strip().upper()


_CENTRAL = {
    2: "C3 C4",
    3: "C3 CZ C4",
    5: "C5 C3 CZ C4 C6",
    7: "C5 C3 C1 CZ C2 C4 C6",
    9: "T7 C5 C3 C1 CZ C2 C4 C6 T8",
    11: "T9 T7 C5 C3 C1 CZ C2 C4 C6 T8 T10",
}
_CENTER_FRONTAL = {
    4: "C3 C4 FC3 FC4",
    6: "C3 CZ C4 FC3 FCZ FC4",
    10: "C5 C3 CZ C4 C6 FC5 FC3 FCZ FC4 FC6",
    14: "C5 C3 C1 CZ C2 C4 C6 FC5 FC3 FC1 FCZ FC2 FC4 FC6",
    18: "T7 C5 C3 C1 CZ C2 C4 C6 T8 FT7 FC5 FC3 FC1 FCZ FC2 FC4 FC6 FT8",
    20: "T9 T7 C5 C3 C1 CZ C2 C4 C6 T8 T10 FT7 FC5 FC3 FC1 FCZ FC2 FC4 FC6 FT8",
}
_CENTER_PARIETAL = {
    4: "C3 C4 CP3 CP4",
    6: "C3 CZ C4 CP3 CPZ CP4",
    10: "C5 C3 CZ C4 C6 CP5 CP3 CPZ CP4 CP6",
    14: "C5 C3 C1 CZ C2 C4 C6 CP5 CP3 CP1 CPZ CP2 CP4 CP6",
    # the published row repeats TP7; TP8 completes the symmetric 18-electrode set
    18: "T7 C5 C3 C1 CZ C2 C4 C6 T8 TP7 CP5 CP3 CP1 CPZ CP2 CP4 CP6 TP8",
    20: "T9 T7 C5 C3 C1 CZ C2 C4 C6 T8 T10 TP7 CP5 CP3 CP1 CPZ CP2 CP4 CP6 TP8",
}
TEN_TWENTY_19 = tuple("FP1 FP2 F7 F3 FZ F4 F8 T7 C3 CZ C4 T8 P7 P3 PZ P4 P8 O1 O2".split())

PRESETS = {}
for _family, _rows in (("Central", _CENTRAL), ("Center+Frontal", _CENTER_FRONTAL),
                       ("Center+Parietal", _CENTER_PARIETAL)):
    for _n, _names in _rows.items():
        PRESETS[f"{_family}-{_n}"] = ElectrodePreset(f"{_family}-{_n}", tuple(_names.split()))
HEADSET_PRESETS = tuple(PRESETS)  # the 18 headset rows
PRESETS["Distributed-19"] = ElectrodePreset("Distributed-19", TEN_TWENTY_19)

# montage orders of the two public datasets
PHYSIONET_64 = tuple(
    "FC5 FC3 FC1 FCZ FC2 FC4 FC6 C5 C3 C1 CZ C2 C4 C6 CP5 CP3 CP1 CPZ CP2 CP4 CP6 FP1 FPZ FP2 AF7 "
    "AF3 AFZ AF4 AF8 F7 F5 F3 F1 FZ F2 F4 F6 F8 FT7 FT8 T7 T8 T9 T10 TP7 TP8 P7 P5 P3 P1 PZ P2 P4 "
    "P6 P8 PO7 PO3 POZ PO4 PO8 O1 OZ O2 IZ".split())
BCI_IV2A_22 = tuple(
    "FZ FC3 FC1 FCZ FC2 FC4 C5 C3 C1 CZ C2 C4 C6 CP3 CP1 CPZ CP2 CP4 P1 PZ P2 POZ".split())

# channels selected from the first cross-validation fold's weights (recorded output)
PHYSIONET_FOLD1_TOP10 = ("AF8", "F8", "T8", "C3", "CZ", "C2", "CP2", "CP5", "F6", "T9")


def preset(name: str) -> ElectrodePreset:
    for key, p in PRESETS.items():
        if key.lower() == name.strip().lower():
            return p
    raise ChannelError(f"unknown preset {name!r}; known: {', '.join(PRESETS)} "
                       "(8- and 38-electrode layouts must be loaded from a file)")


def load_preset_file(path) -> ElectrodePreset:
    """A user-supplied preset: JSON ``{"name": ..., "electrodes": [...]}`` or one name per line."""
    with open(path, encoding="utf-8") as f:
        text = f.read()
    try:
        doc = json.loads(text)
        name, electrodes = doc["name"], doc["electrodes"]
    except (json.JSONDecodeError, TypeError, KeyError):
        name = str(path)
        electrodes = [ln for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]
    electrodes = tuple(normalize_name(e) for e in electrodes)
    if not electrodes or len(set(electrodes)) != len(electrodes):
        raise ChannelError(f"preset file {path}: electrode list empty or contains duplicates")
    return ElectrodePreset(name, electrodes)


def preset_indices(p: ElectrodePreset, channel_names) -> list:
    """Positions of the preset's electrodes in a dataset's channel list."""
    lookup = {normalize_name(n): i for i, n in enumerate(channel_names)}
    missing = [e for e in p.electrodes if e not in lookup]
    if missing:
        raise ChannelError(f"preset {p.name}: electrodes {missing} not in the dataset montage")
    return [lookup[e] for e in p.electrodes]


# ---------------------------------------------------------------------------
# Reduce and retrain
# ---------------------------------------------------------------------------

@dataclass
class ReductionResult:
    ranking: ChannelRanking
    selected: list
    config: ModelConfig
    full_network: Network
    network: Network
    full_accuracy: float
    reduced_accuracy: float

    @property
    def accuracy_delta(self) -> float:
        return self.reduced_accuracy - self.full_accuracy


def reduce_and_retrain(dataset, n_bar: int, hyper, n_k: int, n_f: int, test=None,
                       init_seed: int = 0, full_network: Network | None = None,
                       repeats: int = 1) -> ReductionResult:
    """Train on all channels, keep the ``n_bar`` strongest, retrain from scratch.

    With ``repeats > 1`` the ranking averages channel norms over that many
    full-montage trainings (init and shuffle seeds offset by ``100 * r``); the first one is
    the reported full model. Accuracies are measured on ``test`` (or the
    training set when absent). The reduced model is re-initialized with
    ``init_seed + 1``.
    """
    from .trainer import evaluate, train

    if not 1 <= n_bar <= dataset.n_ch:
        raise ChannelError(f"n_bar must be in [1, {dataset.n_ch}], got {n_bar}")
    if repeats < 1:
        raise ChannelError(f"repeats must be >= 1, got {repeats}")
    test = test if test is not None else dataset
    full_cfg = ModelConfig(dataset.n_ch, dataset.n_samples, n_k, n_f, dataset.n_classes)
    if full_network is None:
        full_network = build(full_cfg, init_seed)
        train(full_network, dataset, hyper)
    weights = [full_network.spatial_weights]
    for r in range(1, repeats):
        extra = build(full_cfg, init_seed + 100 * r)
        train(extra, dataset, dataclasses.replace(hyper, seed=hyper.seed + 100 * r))
        weights.append(extra.spatial_weights)
    ranking = rank_channels(weights if repeats > 1 else weights[0], dataset.channel_names)
    selected = select_top(ranking, n_bar)
    reduced_cfg = full_cfg.with_channels(n_bar)
    net = build(reduced_cfg, init_seed + 1)
    train(net, dataset.select_channels(selected), hyper)
    return ReductionResult(ranking, selected, reduced_cfg, full_network, net,
                           evaluate(full_network, test).accuracy,
                           evaluate(net, test.select_channels(selected)).accuracy)
