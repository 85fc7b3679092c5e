"""Named training presets: architecture width plus optimizer and QAT settings."""
from __future__ import annotations

from dataclasses import dataclass, replace

from .model import ModelConfig
from .trainer import QatSchedule, TrainHyper


@dataclass(frozen=True)
class Preset:
    name: str
    n_k: int
    n_f: int
    float_hyper: TrainHyper
    qat: QatSchedule
    n_ch: int | None = None   # montage the preset was designed for
    n_s: int | None = None

    def config(self, n_ch: int, n_s: int, n_cl: int) -> ModelConfig:
        return ModelConfig(n_ch, n_s, self.n_k, self.n_f, n_cl)

    def hyper(self, qat: bool = True, seed: int | None = None, qat_schedule: QatSchedule | None = None,
              epochs: int | None = None) -> TrainHyper:
        h = self.float_hyper
        if seed is not None:
            h = replace(h, seed=seed)
        if qat:
            q = qat_schedule or self.qat
            return replace(h, epochs=q.t_end, qat=q)
        return replace(h, epochs=epochs if epochs is not None else h.epochs, qat=None)


PRESETS = {
    "bci-iv2a": Preset(
        "bci-iv2a", 32, 64,
        TrainHyper(epochs=500, batch_size=32, lr_schedule=((0, 1e-3),), eps=1e-7),
        QatSchedule(450, 550, 650), n_ch=22, n_s=750),
    "physionet-mmmi": Preset(
        "physionet-mmmi", 16, 128,
        TrainHyper(epochs=100, batch_size=16, lr_schedule=((0, 1e-2), (40, 1e-3), (80, 1e-4)), eps=1e-7),
        QatSchedule(60, 160, 260), n_ch=64, n_s=480),
    # desk-scale setting for the synthetic task (8 channels, 2 s at 128 Hz)
    "synthetic": Preset(
        "synthetic", 8, 32,
        TrainHyper(epochs=30, batch_size=32, lr_schedule=((0, 1e-2), (30, 3e-3)), eps=1e-7),
        QatSchedule(20, 30, 60), n_ch=8, n_s=256),
}


def get_preset(name: str) -> Preset:
    try:
        return PRESETS[name]
    except KeyError:
        raise KeyError(f"unknown preset {name!r}; available: {', '.join(PRESETS)}") from None
