"""Command-line entry point: synth, train, eval, online, bench.

Exit codes: 0 success, 1 usage error, 2 data or format error, 3 numeric
failure during training or inference.
"""
from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

from . import autodiff as ad
from . import synth, training
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .diffusion import ModelConfig, NoiseSchedule, rank_classes
from .dsp import InsufficientHistoryError
from .online import (Decoder, ProtocolError, ReplaySource, SessionConfig, StreamSource, connect_tcp,
                     latency_benchmark, run_session, synthetic_dataset)
from .timeline import preprocess_dataset

log = logging.getLogger("diffbci")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _nonneg_int(text: str) -> int:
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {text}")
    return v


def _positive_float(text: str) -> float:
    v = float(text)
    if not v > 0:
        raise argparse.ArgumentTypeError(f"expected a positive number, got {text}")
    return v


def _nonneg_float(text: str) -> float:
    v = float(text)
    if not v >= 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative number, got {text}")
    return v


# ---------------------------------------------------------------------------
# pipeline pieces shared by the commands and the acceptance suite
# ---------------------------------------------------------------------------

def model_config_for(ds: synth.Dataset, base_width: int = 8) -> ModelConfig:
    window = ds.samples_per_trial - ds.baseline_samples
    try:
        return ModelConfig(channels_in=ds.channels, length_in=window, base_width=base_width,
                           n_classes=ds.n_classes)
    except ValueError as exc:
        raise DataError(f"dataset does not fit the model: {exc}") from exc


def data_info(ds: synth.Dataset) -> dict:
    return {"fs": ds.fs, "channels": ds.channels, "baseline_samples": ds.baseline_samples,
            "samples_per_trial": ds.samples_per_trial, "n_classes": ds.n_classes}


def train_dataset(ds: synth.Dataset, seed: int = 42, base_width: int = 8, max_epochs: int = 200,
                  fingerprint: str = ""):
    """Preprocess, split, train; returns (checkpoint, history, split, windows)."""
    cfg = model_config_for(ds, base_width)
    tc = training.TrainConfig(seed=seed, max_epochs=max_epochs)
    windows = preprocess_dataset(ds)
    try:
        split = training.split_dataset(ds.labels, tc.val_fraction, seed, ds.n_classes)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    schedule = NoiseSchedule()
    params, history = training.train(windows, ds.labels, cfg, tc, schedule, split)
    ckpt = Checkpoint(params, schedule, tc.to_dict(), seed, fingerprint, data_info(ds))
    return ckpt, history, split, windows


def check_compatible(ckpt: Checkpoint, ds: synth.Dataset) -> None:
    cfg = ckpt.params.config
    have = data_info(ds)
    want = ckpt.data_info
    problems = []
    if cfg.channels_in != ds.channels:
        problems.append(f"channels {ds.channels} != {cfg.channels_in}")
    if cfg.length_in != ds.samples_per_trial - ds.baseline_samples:
        problems.append(f"window {ds.samples_per_trial - ds.baseline_samples} != {cfg.length_in}")
    if cfg.n_classes != ds.n_classes:
        problems.append(f"classes {ds.n_classes} != {cfg.n_classes}")
    for key in ("fs", "baseline_samples"):
        if key in want and want[key] != have[key]:
            problems.append(f"{key} {have[key]} != {want[key]}")
    if problems:
        raise DataError("config mismatch between checkpoint and data: " + "; ".join(problems))


def evaluate_dataset(ckpt: Checkpoint, ds: synth.Dataset, ks=(1, 2), windows=None):
    """Per-window probabilities and metrics for every trial of ``ds``."""
    check_compatible(ckpt, ds)
    if windows is None:
        windows = preprocess_dataset(ds)
    tau = float(ckpt.train_config.get("tau_infer", 0.5))
    probs = training.evaluate_windows(windows, ckpt.params, ckpt.schedule, tau)
    return probs, training.class_metrics(rank_classes(probs), ds.labels, ds.n_classes, ks)


def decoder_from(ckpt: Checkpoint) -> Decoder:
    info = ckpt.data_info
    fs = float(info.get("fs", 500.0))
    base = int(info.get("baseline_samples", round(0.2 * fs)))
    cfg = ckpt.params.config
    return Decoder(ckpt.params, ckpt.schedule, fs, float(ckpt.train_config.get("tau_infer", 0.5)),
                   baseline_s=base / fs, window_s=cfg.length_in / fs)


def open_source(spec: str, ckpt: Checkpoint, n_trials: int, seed: int):
    dec = decoder_from(ckpt)
    if spec.startswith("tcp:"):
        host, _, port = spec[4:].rpartition(":")
        if not host or not port.isdigit():
            raise UsageError(f"bad tcp source {spec!r}, expected tcp:host:port")
        return connect_tcp(host, int(port), dec.fs, dec.channels, poll_s=dec.window_s)
    if spec == "synth":
        info = ckpt.data_info
        cfg = synth.SynthConfig(channels=dec.channels, fs=dec.fs,
                                baseline_s=info.get("baseline_samples", 100) / dec.fs,
                                window_s=dec.window_s, n_classes=dec.n_classes, seed=seed)
        return ReplaySource(synthetic_dataset(cfg, n_trials, seed))
    path = Path(spec)
    with path.open("rb") as f:
        magic = f.read(4)
    if magic == synth.MAGIC:
        ds = synth.read_dataset(path)
        check_compatible(ckpt, ds)
        return ReplaySource(ds)
    return StreamSource(path.open("rb"), dec.fs, dec.channels)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    try:
        cfg = synth.SynthConfig(channels=args.channels, fs=args.fs, snr=args.snr, seed=args.seed,
                                trials_per_class=args.trials_per_class)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    ds = synth.generate_dataset(cfg, args.out)
    print(f"wrote {len(ds)} trials to {args.out} ({synth.fingerprint(args.out)})")
    print("class,trials")
    for name, n in zip(synth.CLASS_NAMES, ds.class_counts()):
        print(f"{name},{n}")
    return EXIT_OK


def cmd_train(args) -> int:
    ds = synth.read_dataset(args.data)
    t0 = time.perf_counter()
    ckpt, history, _, _ = train_dataset(ds, args.seed, args.base_width, args.max_epochs,
                                        synth.fingerprint(args.data))
    wall = time.perf_counter() - t0
    save_checkpoint(ckpt, args.out_model)
    hist_path = Path(str(args.out_model) + ".history.csv")
    hist_path.write_text(history.to_csv())
    last = history.records[-1] if history.records else None
    print(f"stop_reason,{history.stop_reason}")
    print(f"epochs,{len(history.records)}")
    if last is not None:
        print(f"train_acc,{last.train_acc:.6f}")
        print(f"val_acc,{last.val_acc:.6f}")
    print(f"wall_s,{wall:.1f}")
    print(f"checkpoint,{args.out_model}")
    print(f"history,{hist_path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.model)
    ds = synth.read_dataset(args.data)
    k = ckpt.params.config.n_classes
    if not 1 <= args.topk <= k:
        raise UsageError(f"--topk must lie in [1, {k}]")
    ks = (1,) if args.topk == 1 else (1, args.topk)
    _, m = evaluate_dataset(ckpt, ds, ks)
    print(training.format_table(m, _class_names(k)), end="")
    print()
    print(training.format_confusion(m.confusion), end="")
    return EXIT_OK


def cmd_online(args) -> int:
    ckpt = load_checkpoint(args.model)
    source = open_source(args.source, ckpt, args.trials, args.seed)
    dec = decoder_from(ckpt)
    report = run_session(SessionConfig(n_trials=args.trials), dec, source)
    report.check_consistency()
    text = report.to_text(class_names=_class_names(dec.n_classes))
    if args.report:
        Path(args.report).write_text(text)
    a = report.aggregates
    print(f"trials,{a['trials']}")
    print(f"dropped,{a['dropped']}")
    print(f"top1,{a['top1']:.6f}")
    print(f"top2,{a['top2']:.6f}")
    print(f"latency_mean_ms,{a['latency_mean_ms']:.3f}")
    print(f"latency_p95_ms,{a['latency_p95_ms']:.3f}")
    return EXIT_OK


def cmd_bench(args) -> int:
    ckpt = load_checkpoint(args.model)
    stats = latency_benchmark(decoder_from(ckpt), args.n)
    print(f"n,{stats.n}")
    print(stats.to_text(), end="")
    return EXIT_OK


def _class_names(k: int):
    names = list(synth.CLASS_NAMES[:k])
    return names + [f"class{j}" for j in range(len(names), k)]


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="diffbci", description="Synthetic imagined-speech decoding pipeline.")
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="write a synthetic BCIE dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--trials-per-class", type=_positive_int, default=100)
    s.add_argument("--channels", type=_positive_int, default=64)
    s.add_argument("--fs", type=_positive_float, default=500.0)
    s.add_argument("--snr", type=_nonneg_float, default=1.0)
    s.add_argument("--seed", type=int, default=42)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train a decoder and write a BCIM checkpoint")
    t.add_argument("--data", required=True)
    t.add_argument("--out-model", required=True)
    t.add_argument("--seed", type=int, default=42)
    t.add_argument("--base-width", type=_positive_int, default=8)
    t.add_argument("--max-epochs", type=_nonneg_int, default=200)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="per-class top-k accuracy and confusion matrix")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--topk", type=_positive_int, default=2)
    e.set_defaults(func=cmd_eval)

    o = sub.add_parser("online", help="run a closed-loop session from a file or tcp stream")
    o.add_argument("--model", required=True)
    o.add_argument("--source", required=True, help="BCIE file, frame capture, synth, or tcp:host:port")
    o.add_argument("--trials", type=_positive_int, default=20)
    o.add_argument("--seed", type=int, default=42)
    o.add_argument("--report", default=None)
    o.set_defaults(func=cmd_online)

    b = sub.add_parser("bench", help="single-window decode latency")
    b.add_argument("--model", required=True)
    b.add_argument("--n", type=_positive_int, default=100)
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"diffbci: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ad.NonFiniteError as exc:
        print(f"diffbci: numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, synth.DatasetFormatError, CheckpointError, ProtocolError,
            InsufficientHistoryError, OSError) as exc:
        print(f"diffbci: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        if "config mismatch" in str(exc):
            print(f"diffbci: data error: {exc}", file=sys.stderr)
            return EXIT_DATA
        raise


def run() -> None:
    sys.exit(main())


if __name__ == "__main__":
    run()
