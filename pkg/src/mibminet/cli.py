"""``mibminet`` command-line interface.

Exit codes: 0 success, 2 validation failure, 3 budget exceeded, 4 I/O error.
Every written artifact gets a ``<artifact>.manifest.json`` sidecar recording
the command line, seeds, config digest, input digests and toolkit version.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from dataclasses import asdict, dataclass, field

import numpy as np

from . import __version__
from .channels import ChannelError, load_preset_file, preset, preset_indices, rank_channels, select_top
from .data_io import (FormatError, SynthSpec, TrialDataset, _atomic_write, load_checkpoint, load_qnet,
                      read_trials, save_checkpoint, save_qnet, synth, write_trials)
from .engine import EngineError, run_batch
from .model import ConfigError, ModelConfig, build, forward
from .numerics import ShapeError
from .presets import PRESETS, get_preset
from .quantizer import QuantizationError, export
from .resources import Budget, check_budget, discrepancies, estimate
from .trainer import QatSchedule, TrainingError, accuracy, confusion, kappa, train

EXIT_OK, EXIT_INVALID, EXIT_BUDGET, EXIT_IO = 0, 2, 3, 4
VALIDATION_ERRORS = (ConfigError, ShapeError, TrainingError, QuantizationError, ChannelError,
                     FormatError, EngineError, ValueError, KeyError)


class UsageError(ValueError):
    pass


@dataclass
class RunManifest:
    command: str
    argv: list
    config_digest: str | None = None
    seeds: dict = field(default_factory=dict)
    inputs: dict = field(default_factory=dict)    # path -> sha256
    outputs: list = field(default_factory=list)
    version: str = __version__

    def write(self, artifact_path):
        blob = json.dumps(asdict(self), indent=2, sort_keys=True).encode() + b"\n"
        _atomic_write(f"{artifact_path}.manifest.json", blob)


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _manifest(args, argv, config: ModelConfig | None = None, seeds=None, inputs=(), outputs=()):
    return RunManifest(args.command, list(argv), config.digest() if config else None, dict(seeds or {}),
                       {os.fspath(p): _sha256(p) for p in inputs}, [os.fspath(p) for p in outputs])


def _emit(path, manifest: RunManifest):
    manifest.write(path)


def _write_json(path, doc):
    _atomic_write(path, json.dumps(doc, indent=2, sort_keys=True).encode() + b"\n")


def _parse_triple(text: str) -> tuple:
    try:
        parts = tuple(int(p) for p in text.split(","))
    except ValueError:
        raise UsageError(f"expected three comma-separated integers, got {text!r}") from None
    if len(parts) != 3:
        raise UsageError(f"expected t_a,t_w,t_end, got {text!r}")
    return parts


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_estimate(args, argv) -> int:
    cfg = ModelConfig(args.nch, args.ns, args.nk, args.nf, args.ncl)
    report = estimate(cfg)
    if args.json:
        print(json.dumps(report.to_dict(), indent=2))
    else:
        print(report.format_table(args.precision))
    if args.discrepancies:
        try:
            print(discrepancies(report).format())
        except KeyError:
            print("no published cells for this configuration")
    if args.budget is not None:
        chk = check_budget(report, args.precision, Budget(args.budget))
        state = "fits" if chk.fits else "EXCEEDS"
        print(f"budget {args.budget:,} B: {state} (needs {chk.required_bytes:,} B, margin {chk.margin_bytes:,} B)")
        if not chk.fits:
            return EXIT_BUDGET
    return EXIT_OK


def cmd_synth(args, argv) -> int:
    informative = tuple(int(c) for c in args.informative.split(","))
    spec = SynthSpec(n_ch=args.nch, n_samples=args.ns, sample_rate=args.rate,
                     n_classes=args.ncl, informative=(informative,) * args.ncl,
                     bands=((args.freq, args.amplitude),) * args.ncl, noise_sigma=args.noise,
                     mixing_seed=args.mixing_seed)
    ds = synth(spec, args.n_per_class, args.seed)
    write_trials(args.out, ds)
    seeds = {"seed": args.seed, "mixing_seed": args.mixing_seed}
    _emit(args.out, _manifest(args, argv, seeds=seeds, outputs=[args.out]))
    print(f"wrote {ds.n_trials} trials x {ds.n_ch} ch x {ds.n_samples} samples to {args.out}")
    if args.test_out:
        test = synth(spec, args.n_per_class, args.test_seed)
        write_trials(args.test_out, test)
        _emit(args.test_out, _manifest(args, argv, seeds={**seeds, "test_seed": args.test_seed},
                                       outputs=[args.test_out]))
        print(f"wrote {test.n_trials} test trials to {args.test_out}")
    return EXIT_OK


def cmd_train(args, argv) -> int:
    ds = read_trials(args.data)
    p = get_preset(args.config)
    n_k = args.nk or p.n_k
    n_f = args.nf or p.n_f
    cfg = ModelConfig(ds.n_ch, ds.n_samples, n_k, n_f, ds.n_classes)
    if args.no_qat:
        hyper = p.hyper(qat=False, seed=args.seed, epochs=args.epochs)
    else:
        sched = QatSchedule(*_parse_triple(args.qat)) if args.qat else None
        hyper = p.hyper(qat=True, seed=args.seed, qat_schedule=sched)
        if args.epochs is not None and args.epochs != hyper.epochs:
            raise UsageError("with QAT the epoch count is t_end; use --qat to change it or --no-qat")
    from dataclasses import replace
    if args.lr is not None:
        hyper = replace(hyper, lr_schedule=((0, args.lr),))
    if args.batch_size is not None:
        hyper = replace(hyper, batch_size=args.batch_size)
    val = read_trials(args.val) if args.val else None
    net = build(cfg, args.seed)
    lines = []

    def log(line):
        lines.append(line)
        if not args.quiet:
            print(line)

    result = train(net, ds, hyper, val=val, log=log)
    meta = {"seed": args.seed, "epoch": hyper.epochs, "hyper": hyper.to_dict(), "preset": p.name,
            "hyper_digest": hashlib.sha256(json.dumps(hyper.to_dict(), sort_keys=True).encode()).hexdigest()[:16]}
    save_checkpoint(args.out, result.network, meta)
    outputs = [args.out]
    if args.curves:
        _atomic_write(args.curves, ("\n".join(lines) + "\n").encode())
        outputs.append(args.curves)
    inputs = [args.data] + ([args.val] if args.val else [])
    _emit(args.out, _manifest(args, argv, cfg, {"seed": args.seed}, inputs, outputs))
    print(f"checkpoint written to {args.out}")
    return EXIT_OK


def cmd_select(args, argv) -> int:
    ds = read_trials(args.data)
    inputs = [args.data]
    if args.preset or args.preset_file:
        p = load_preset_file(args.preset_file) if args.preset_file else preset(args.preset)
        selected = preset_indices(p, ds.channel_names)
        print(f"preset {p.name}: {', '.join(p.electrodes)}")
        doc = {"preset": p.name, "selected": selected}
    else:
        if not args.checkpoint or args.n_bar is None:
            raise UsageError("give --checkpoint with --n-bar, or --preset/--preset-file")
        weights = []
        for path in args.checkpoint:
            net = load_checkpoint(path).network
            inputs.append(path)
            if net.config.n_ch != ds.n_ch:
                raise ShapeError(f"{path} expects {net.config.n_ch} channels, data has {ds.n_ch}")
            weights.append(net.spatial_weights)
        ranking = rank_channels(weights if len(weights) > 1 else weights[0], ds.channel_names)
        selected = select_top(ranking, args.n_bar)
        for r, e in enumerate(ranking.entries):
            mark = "*" if r < args.n_bar else " "
            print(f"{mark} {r + 1:3d}  {e.name:<6} (index {e.index:3d})  norm {e.norm:.6f}")
        doc = {"ranking": json.loads(ranking.to_json()), "selected": selected}
    outputs = []
    if args.ranking:
        _write_json(args.ranking, doc)
        outputs.append(args.ranking)
    if args.out:
        write_trials(args.out, ds.select_channels(selected))
        outputs.append(args.out)
        _emit(args.out, _manifest(args, argv, inputs=inputs, outputs=outputs))
        print(f"reduced dataset ({len(selected)} channels) written to {args.out}")
    return EXIT_OK


def cmd_quantize(args, argv) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    calib = read_trials(args.calib)
    qnet = export(ckpt.network, calib, args.percentile,
                  use_trained_scales=not args.recalibrate)
    save_qnet(args.out, qnet)
    _emit(args.out, _manifest(args, argv, qnet.config, {"seed": ckpt.metadata.get("seed")},
                              [args.checkpoint, args.calib], [args.out]))
    print(f"input exp {qnet.input_exp}, logit exp {qnet.logit_exp}, activation exps {qnet.act_exps}")
    if any(qnet.sign_flips.values()):
        print(f"filters negated for negative batch-norm scale: {qnet.sign_flips}")
    print(f"quantized network written to {args.out}")
    return EXIT_OK


def cmd_infer(args, argv) -> int:
    qnet = load_qnet(args.qnet)
    ds = read_trials(args.data)
    logits, trace, saturated = run_batch(qnet, ds.data, args.workers)
    pred = np.argmax(logits, axis=1)
    acc, kap = accuracy(ds.labels, pred), kappa(ds.labels, pred, ds.n_classes)
    print(f"accuracy {acc:.4f}  kappa {kap:.4f}  ({ds.n_trials} trials, {saturated} saturated inputs)")
    print("confusion (rows true, cols predicted):")
    print(confusion(ds.labels, pred, ds.n_classes))
    if trace is not None:
        print(trace.format_text())
    if args.out:
        _write_json(args.out, {"predictions": pred.tolist(), "logits": logits.tolist(),
                               "logit_exp": qnet.logit_exp, "accuracy": acc, "kappa": kap,
                               "trace": trace.to_dict() if trace else None})
        _emit(args.out, _manifest(args, argv, qnet.config, inputs=[args.qnet, args.data],
                                  outputs=[args.out]))
    return EXIT_OK


def cmd_verify(args, argv) -> int:
    qnet = load_qnet(args.qnet)
    ckpt = load_checkpoint(args.checkpoint)
    ds = read_trials(args.data)
    net = ckpt.network
    if net.config != qnet.config:
        raise ConfigError("checkpoint and quantized network have different configurations")
    net.set_quantization(True)
    float_logits = np.concatenate([forward(net, ds.data[i:i + 128], "infer")
                                   for i in range(0, ds.n_trials, 128)])
    int_logits, _, saturated = run_batch(qnet, ds.data, args.workers)
    deq = int_logits * 2.0 ** -qnet.logit_exp
    delta = np.abs(deq - float_logits).max(axis=1)
    agree = np.argmax(int_logits, 1) == np.argmax(float_logits, 1)
    weight_sat = {k: int(w.saturated) for k, w in qnet.weights.items()}
    if args.per_trial:
        for i, (d, a) in enumerate(zip(delta, agree)):
            print(f"trial {i:5d}  max |logit delta| {d:.6f}  {'agree' if a else 'DISAGREE'}")
    print(f"argmax agreement {agree.mean():.4f} ({int(agree.sum())}/{ds.n_trials})")
    print(f"logit delta: max {delta.max():.6f} mean {delta.mean():.6f}")
    print(f"float accuracy {accuracy(ds.labels, np.argmax(float_logits, 1)):.4f}  "
          f"int8 accuracy {accuracy(ds.labels, np.argmax(int_logits, 1)):.4f}")
    print(f"saturated input values {saturated}; saturated weights at export {weight_sat}")
    if args.out:
        _write_json(args.out, {"agreement": float(agree.mean()), "logit_delta": delta.tolist(),
                               "saturated_inputs": int(saturated), "saturated_weights": weight_sat})
        _emit(args.out, _manifest(args, argv, qnet.config,
                                  inputs=[args.qnet, args.checkpoint, args.data], outputs=[args.out]))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mibminet", description="EEG motor-imagery CNN toolkit")
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("estimate", help="parameter, memory and MACC estimate")
    for flag in ("--nch", "--ns", "--nk", "--nf", "--ncl"):
        p.add_argument(flag, type=int, required=True)
    p.add_argument("--budget", type=int, help="memory budget in bytes")
    p.add_argument("--precision", type=int, choices=(8, 32), default=8)
    p.add_argument("--json", action="store_true")
    p.add_argument("--discrepancies", action="store_true",
                   help="compare against the published cells for this configuration")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("synth-data", help="generate a synthetic motor-imagery dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--test-out")
    p.add_argument("--nch", type=int, default=8)
    p.add_argument("--ns", type=int, default=256)
    p.add_argument("--ncl", type=int, default=2)
    p.add_argument("--rate", type=float, default=128.0)
    p.add_argument("--informative", default="2,5", help="comma-separated informative channels")
    p.add_argument("--freq", type=float, default=10.0)
    p.add_argument("--amplitude", type=float, default=2.0)
    p.add_argument("--noise", type=float, default=1.0)
    p.add_argument("--mixing-seed", type=int, default=0)
    p.add_argument("--n-per-class", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--test-seed", type=int, default=1000)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a network (quantization-aware by default)")
    p.add_argument("--data", required=True)
    p.add_argument("--val")
    p.add_argument("--config", default="synthetic", choices=sorted(PRESETS))
    p.add_argument("--nk", type=int)
    p.add_argument("--nf", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--qat", help="t_a,t_w,t_end (overrides the preset schedule)")
    p.add_argument("--no-qat", action="store_true", help="plain float training")
    p.add_argument("--workers", type=int, default=1,
                   help="accepted for symmetry; training is single-threaded (batch norm couples trials)")
    p.add_argument("--curves", help="write per-epoch curves to this file")
    p.add_argument("--quiet", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("select-channels", help="rank channels or apply an electrode preset")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", nargs="+",
                   help="one checkpoint, or several whose channel norms are averaged")
    p.add_argument("--n-bar", type=int)
    p.add_argument("--preset")
    p.add_argument("--preset-file")
    p.add_argument("--ranking", help="write the ranking as JSON")
    p.add_argument("--out", help="write the channel-reduced dataset")
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("quantize", help="export a checkpoint to an int8 network")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--calib", required=True)
    p.add_argument("--percentile", type=float, default=99.9)
    p.add_argument("--recalibrate", action="store_true",
                   help="ignore scales learned during QAT and calibrate afresh")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("infer", help="integer inference with metrics and trace")
    p.add_argument("--qnet", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("verify", help="float versus int8 agreement report")
    p.add_argument("--qnet", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--per-trial", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_verify)
    return ap


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    try:
        return args.func(args, argv)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
