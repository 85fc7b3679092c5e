"""Training: Adam, quantization-aware training with random partial freezing, metrics.

QAT timeline (epochs counted from 0, ``t_a < t_w < t_end``):

* ``epoch >= t_a``: activation quantization points are active. Their scale
  exponents are recalibrated at the start of every epoch from an
  inference-mode pass over the training trials.
* ``epoch >= t_w``: a growing random fraction of every conv/dense weight
  tensor is frozen at its int8 grid value; the rest keeps training through
  the straight-through estimator. The fraction steps every ``rpr_step``
  epochs and reaches 1 at ``t_end``.
* after the last epoch every weight sits on its grid.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .model import Network, forward
from .nn_ops import softmax_cross_entropy
from .numerics import WEIGHT_QMAX, WEIGHT_QMIN, round_half_away
from .quantizer import CALIB_PERCENTILE, calibrate, choose_scale_exp

QUANTIZED_WEIGHTS = ("spatial", "temporal", "depthwise", "pointwise", "fc")


class TrainingError(ValueError):
    pass


@dataclass(frozen=True)
class QatSchedule:
    t_a: int
    t_w: int
    t_end: int
    rpr_step: int = 10
    calib_percentile: float = CALIB_PERCENTILE
    monotone: bool = False  # True: grow the previous partition instead of re-sampling it

    def __post_init__(self):
        if not 0 < self.t_a < self.t_w < self.t_end:
            raise TrainingError(f"QAT epochs must satisfy 0 < t_a < t_w < t_end, got "
                                f"{self.t_a}, {self.t_w}, {self.t_end}")
        if self.rpr_step < 1:
            raise TrainingError("rpr_step must be >= 1")


def rpr_fraction(epoch: int, qat: QatSchedule) -> float:
    """Fraction of each weight tensor frozen during ``epoch``."""
    if epoch < qat.t_w:
        return 0.0
    if epoch >= qat.t_end:
        return 1.0
    n_steps = math.ceil((qat.t_end - qat.t_w) / qat.rpr_step)
    return min(1.0, ((epoch - qat.t_w) // qat.rpr_step) / n_steps)


@dataclass(frozen=True)
class TrainHyper:
    epochs: int
    batch_size: int = 32
    lr_schedule: tuple = ((0, 1e-3),)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-7
    seed: int = 0
    qat: QatSchedule | None = None
    qat_eps: float | None = None   # Adam eps once activation quantization starts

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise TrainingError("epochs must be >= 0 and batch_size >= 1")
        if not self.lr_schedule or self.lr_schedule[0][0] != 0:
            raise TrainingError("lr_schedule must start at epoch 0")
        if any(lr <= 0 for _, lr in self.lr_schedule):
            raise TrainingError("learning rates must be positive")
        if self.qat is not None and self.epochs != self.qat.t_end:
            raise TrainingError(f"with QAT the run length is t_end={self.qat.t_end} epochs, "
                                f"got epochs={self.epochs}")

    def lr_at(self, epoch: int) -> float:
        lr = self.lr_schedule[0][1]
        for start, value in self.lr_schedule:
            if epoch >= start:
                lr = value
        return lr

    def eps_at(self, epoch: int) -> float:
        if self.qat is not None and self.qat_eps is not None and epoch >= self.qat.t_a:
            return self.qat_eps
        return self.eps

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in ("epochs", "batch_size", "beta1", "beta2", "eps", "seed",
                                           "qat_eps")}
        d["lr_schedule"] = [list(p) for p in self.lr_schedule]
        d["qat"] = None if self.qat is None else {k: getattr(self.qat, k) for k in
                                                   ("t_a", "t_w", "t_end", "rpr_step",
                                                    "calib_percentile", "monotone")}
        return d


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict, grads: dict, state: AdamState, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-7):
    """In-place Adam update (arrays in ``params`` are modified, not replaced)."""
    state.t += 1
    bc1 = 1 - beta1 ** state.t
    bc2 = 1 - beta2 ** state.t
    for key, p in params.items():
        g = grads.get(key)
        if g is None:
            continue
        m = state.m.setdefault(key, np.zeros_like(p, dtype=np.float64))
        v = state.v.setdefault(key, np.zeros_like(p, dtype=np.float64))
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * np.square(g)
        p -= (lr * (m / bc1) / (np.sqrt(v / bc2) + eps)).astype(p.dtype)


# ---------------------------------------------------------------------------
# Random partial freezing
# ---------------------------------------------------------------------------

class PartialFreeze:
    """Frozen masks and values for the int8-bound weight tensors."""

    def __init__(self, net: Network, monotone: bool = False):
        self.net = net
        self.monotone = monotone
        self.masks = {k: np.zeros(w.shape, bool) for k, w in net.weight_tensors().items()}
        self.values = {k: np.zeros_like(w) for k, w in net.weight_tensors().items()}
        self.fraction = 0.0

    def repartition(self, fraction: float, rng: np.random.Generator):
        self.fraction = fraction
        for key, w in self.net.weight_tensors().items():
            n_freeze = int(round(fraction * w.size))
            mask = self.masks[key].reshape(-1)
            if self.monotone:
                free = np.flatnonzero(~mask)
                extra = n_freeze - (w.size - free.size)
                if extra > 0:
                    mask[rng.choice(free, size=extra, replace=False)] = True
            else:
                mask[:] = False
                mask[rng.choice(w.size, size=n_freeze, replace=False)] = True
            # freeze on the grid the whole tensor currently implies
            step = 2.0 ** -choose_scale_exp(w)
            grid = np.clip(round_half_away(w / step), WEIGHT_QMIN, WEIGHT_QMAX) * step
            self.values[key] = grid.astype(w.dtype)
            w[self.masks[key]] = self.values[key][self.masks[key]]

    def mask_grads(self):
        grads = self.net.gradients()
        for key, mask in self.masks.items():
            grads[(key, "w")][mask] = 0.0

    def restore(self):
        for key, w in self.net.weight_tensors().items():
            m = self.masks[key]
            w[m] = self.values[key][m]

    def frozen_fraction(self) -> float:
        total = sum(m.size for m in self.masks.values())
        return sum(int(m.sum()) for m in self.masks.values()) / total


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def confusion(y_true, y_pred, n_classes: int) -> np.ndarray:
    """Rows: true class, columns: predicted class."""
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true, np.int64), np.asarray(y_pred, np.int64)), 1)
    return cm


def accuracy(y_true, y_pred) -> float:
    y_true = np.asarray(y_true)
    return float(np.mean(y_true == np.asarray(y_pred))) if y_true.size else float("nan")


def kappa(y_true, y_pred, n_classes: int) -> float:
    """Cohen's kappa."""
    cm = confusion(y_true, y_pred, n_classes).astype(np.float64)
    n = cm.sum()
    if n == 0:
        return float("nan")
    p_o = np.trace(cm) / n
    p_e = float(np.dot(cm.sum(0), cm.sum(1))) / n ** 2
    return 1.0 if p_e == 1 else float((p_o - p_e) / (1 - p_e))


def predict(net: Network, data, batch: int = 128) -> np.ndarray:
    data = np.asarray(data, np.float32)
    out = [np.argmax(forward(net, data[i:i + batch], "infer"), axis=-1)
           for i in range(0, data.shape[0], batch)]
    return np.concatenate(out) if out else np.zeros(0, np.int64)


@dataclass
class Evaluation:
    accuracy: float
    kappa: float
    confusion: np.ndarray

    def to_dict(self) -> dict:
        return {"accuracy": self.accuracy, "kappa": self.kappa, "confusion": self.confusion.tolist()}


def evaluate(net: Network, ds) -> Evaluation:
    pred = predict(net, ds.data)
    return Evaluation(accuracy(ds.labels, pred), kappa(ds.labels, pred, ds.n_classes),
                      confusion(ds.labels, pred, ds.n_classes))


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

@dataclass
class EpochLog:
    epoch: int
    loss: float
    train_acc: float
    train_kappa: float
    lr: float
    frozen: float = 0.0
    val_acc: float | None = None
    val_kappa: float | None = None

    def line(self) -> str:
        s = (f"epoch {self.epoch:4d}  loss {self.loss:.4f}  acc {self.train_acc:.4f}  "
             f"kappa {self.train_kappa:.4f}  lr {self.lr:.2e}  frozen {self.frozen:.2f}")
        if self.val_acc is not None:
            s += f"  val_acc {self.val_acc:.4f}  val_kappa {self.val_kappa:.4f}"
        return s


@dataclass
class TrainResult:
    network: Network
    history: list
    hyper: TrainHyper

    def curves(self) -> str:
        return "\n".join(h.line() for h in self.history)


def _check_dataset(net: Network, ds):
    c = net.config
    if ds.n_trials == 0:
        raise TrainingError("empty training set")
    if (ds.n_ch, ds.n_samples) != (c.n_ch, c.n_s):
        raise TrainingError(f"data is {ds.n_ch}x{ds.n_samples} but the model expects {c.n_ch}x{c.n_s}")
    if ds.n_classes != c.n_cl:
        raise TrainingError(f"data has {ds.n_classes} classes but the model has {c.n_cl} outputs")


def _recalibrate(net: Network, data, percentile: float, max_trials: int = 512):
    exps = calibrate(net, data[:max_trials], percentile)
    for key, q in net.quant_points().items():
        q.scale_exp = exps[key]
    net.set_quantization(True)


def train(net: Network, ds, hyper: TrainHyper, val=None, log=None) -> TrainResult:
    """Train ``net`` in place. Identical inputs give identical weights."""
    _check_dataset(net, ds)
    rng = np.random.default_rng(hyper.seed)
    state = AdamState()
    qat = hyper.qat
    freeze = PartialFreeze(net, qat.monotone) if qat else None
    params = net.parameters()
    history = []
    n = ds.n_trials
    for epoch in range(hyper.epochs):
        lr, eps = hyper.lr_at(epoch), hyper.eps_at(epoch)
        if qat and epoch >= qat.t_a:
            _recalibrate(net, ds.data, qat.calib_percentile)
        if qat and epoch >= qat.t_w:
            frac = rpr_fraction(epoch, qat)
            if frac != freeze.fraction:
                freeze.repartition(frac, rng)
        perm = rng.permutation(n)
        loss_sum, seen, preds = 0.0, [], []
        for start in range(0, n, hyper.batch_size):
            idx = perm[start:start + hyper.batch_size]
            if idx.size < 2 and n >= 2:
                continue  # batch norm needs more than one trial
            logits = forward(net, ds.data[idx], "train")
            loss, g = softmax_cross_entropy(logits, ds.labels[idx])
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}")
            net.backward(g)
            if freeze is not None and freeze.fraction > 0:
                freeze.mask_grads()
            adam_step(params, net.gradients(), state, lr, hyper.beta1, hyper.beta2, eps)
            if freeze is not None and freeze.fraction > 0:
                freeze.restore()
            loss_sum += float(loss) * idx.size
            seen.append(ds.labels[idx])
            preds.append(np.argmax(logits, -1))
        seen, preds = np.concatenate(seen), np.concatenate(preds)
        entry = EpochLog(epoch, loss_sum / seen.size, accuracy(seen, preds),
                         kappa(seen, preds, ds.n_classes), lr,
                         freeze.frozen_fraction() if freeze else 0.0)
        if val is not None:
            ev = evaluate(net, val)
            entry.val_acc, entry.val_kappa = ev.accuracy, ev.kappa
        history.append(entry)
        if log is not None:
            log(entry.line())
    if qat and hyper.epochs > 0:
        freeze.repartition(1.0, rng)
        net.set_quantization(True)
    return TrainResult(net, history, hyper)


# ---------------------------------------------------------------------------
# Subject-disjoint cross-validation
# ---------------------------------------------------------------------------

def kfold_split(subjects, k: int, seed: int = 0) -> list:
    """``k`` (train_idx, val_idx) pairs with no subject on both sides.

    ``subjects`` holds one subject id per trial.
    """
    subjects = np.asarray(subjects)
    ids = np.unique(subjects)
    if not 2 <= k <= ids.size:
        raise TrainingError(f"k={k} folds need 2 <= k <= {ids.size} subjects")
    rng = np.random.default_rng(seed)
    groups = np.array_split(rng.permutation(ids), k)
    folds = []
    for g in groups:
        in_val = np.isin(subjects, g)
        folds.append((np.flatnonzero(~in_val), np.flatnonzero(in_val)))
    return folds


@dataclass
class FoldResult:
    fold: int
    evaluation: Evaluation
    network: Network


def cross_validate(build_net, ds, hyper: TrainHyper, k: int, seed: int = 0, log=None) -> list:
    """Train one fresh network per subject-disjoint fold.

    ``build_net(fold)`` returns an untrained network. Trials without subject
    ids are treated as one subject each.
    """
    subjects = ds.subjects if ds.subjects is not None else np.arange(ds.n_trials)
    results = []
    for i, (tr, va) in enumerate(kfold_split(subjects, k, seed)):
        net = build_net(i)
        train(net, ds.subset(tr), hyper, log=log)
        results.append(FoldResult(i, evaluate(net, ds.subset(va)), net))
    return results
