"""Command-line entry point: ``ien <verb> [flags]``.

Verbs: ``gen-data``, ``train``, ``eval``, ``ablate`` and ``bench``. Every verb
accepts ``--config`` (a JSON object keyed by :class:`RunConfig` field names),
``--seed`` and ``--out-dir``; explicit flags override values from the config
file. On failure a single line ``ERROR <ErrorClass>: <message>`` goes to
stderr and the exit status is 1.
"""

import argparse
import csv
import json
import os
import sys
import time
from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from .datagen import StreamSpec, check_stream_matches, generate_stream, read_features, segment_windows, write_features
from .errors import ConfigError, IenError, UsageError
from .experiments import (ABLATION_ORDER, REFERENCE_ABLATION_MAP, REFERENCE_SPEED_DELTA_PCT, AblationConfig,
                          run_ablation, run_benchmark, speed_delta_pct)
from .metrics import EvalSet, mean_average_precision, mean_calibrated_ap, read_timeline, write_timeline
from .network import IenConfig, IenModel, load_checkpoint, save_checkpoint, stream_infer, train
from .numerics import PROB_FLOOR


@dataclass
class RunConfig:
    """Every setting a verb may read. ``None`` means "use the verb's default"."""

    # model
    T_plus_1: int = None
    d_v: int = None
    d_e: int = None
    d_h: int = None
    K: int = None
    cell_variant: str = None
    merge_mode: str = None
    # training
    epochs: int = None
    batch_size: int = None
    lr: float = None
    beta1: float = None
    beta2: float = None
    eps: float = None
    seed: int = None
    # data generation
    mode: str = None
    stream_len: int = None
    test_len: int = None
    val_len: int = None
    noise_sigma: float = None
    background_rate: float = None
    episode_min: int = None
    episode_max: int = None
    # ablation and benchmark
    n_seeds: int = None
    variants: list = None
    duration: float = None
    bench_batch: int = None
    # paths
    train_path: str = None
    test_path: str = None
    val_path: str = None
    model_path: str = None
    timeline_path: str = None
    out_dir: str = None

    def with_defaults(self, **defaults):
        return replace(self, **{k: v for k, v in defaults.items() if getattr(self, k) is None})

    def require(self, *names):
        for name in names:
            if getattr(self, name) is None:
                raise UsageError(f"missing required flag {FLAG_OF[name]} (or config key {name!r})")

    def to_dict(self):
        return {k: v for k, v in asdict(self).items() if v is not None}


# Shared defaults. Desk-scale training uses a larger step and smaller batch than
# the reference setup so that small synthetic runs converge in a few epochs.
MODEL_DEFAULTS = dict(T_plus_1=8, d_e=512, d_h=512, cell_variant="ieu", merge_mode="concat")
TRAIN_DEFAULTS = dict(epochs=10, batch_size=32, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, seed=0)
DATA_DEFAULTS = dict(noise_sigma=0.5, background_rate=0.5, episode_min=8, episode_max=16, seed=0)

# (flag, config field, type, help)
_FLAGS = {
    "model": [
        ("--window", "T_plus_1", int, "chunks per window (T+1)"),
        ("--d-e", "d_e", int, "embedding width"),
        ("--d-h", "d_h", int, "hidden width"),
        ("--variant", "cell_variant", str, "cell variant: " + ", ".join(ABLATION_ORDER)),
        ("--merge", "merge_mode", str, "gate input merge: concat or addition"),
    ],
    "train": [
        ("--epochs", "epochs", int, "training epochs"),
        ("--batch", "batch_size", int, "segments per minibatch"),
        ("--lr", "lr", float, "Adam step size"),
        ("--beta1", "beta1", float, "Adam first-moment decay"),
        ("--beta2", "beta2", float, "Adam second-moment decay"),
        ("--eps", "eps", float, "Adam epsilon"),
    ],
    "data": [
        ("--mode", "mode", str, "evidence mode: persistent, early_only or separable"),
        ("--k", "K", int, "number of action classes"),
        ("--dv", "d_v", int, "feature width"),
        ("--len", "stream_len", int, "training stream length in chunks"),
        ("--test-len", "test_len", int, "test stream length (default: --len)"),
        ("--noise", "noise_sigma", float, "feature noise standard deviation"),
        ("--rate", "background_rate", float, "fraction of background chunks"),
        ("--episode-min", "episode_min", int, "shortest action episode"),
        ("--episode-max", "episode_max", int, "longest action episode"),
    ],
}
FLAG_OF = {field: flag for group in _FLAGS.values() for flag, field, _, _ in group}
FLAG_OF.update(seed="--seed", out_dir="--out-dir", train_path="--train", test_path="--test",
               val_path="--val", model_path="--model", timeline_path="--timeline")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add(parser, group):
    for flag, field, typ, help_ in _FLAGS[group]:
        parser.add_argument(flag, dest=field, type=typ, help=help_)


def build_parser():
    common = _Parser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--config", dest="config_path", help="JSON file with RunConfig fields")
    common.add_argument("--seed", type=int, help="random seed")
    common.add_argument("--out-dir", dest="out_dir", help="directory for outputs (default: .)")

    parser = _Parser(prog="ien", description="Information Elevation Network tools")
    verbs = parser.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    p = verbs.add_parser("gen-data", parents=[common], argument_default=argparse.SUPPRESS,
                         help="write synthetic train.ienf and test.ienf")
    _add(p, "data")
    p.add_argument("--window", dest="T_plus_1", type=int, help="window length the data must cover")

    p = verbs.add_parser("train", parents=[common], argument_default=argparse.SUPPRESS,
                         help="train a model on an IENF file")
    p.add_argument("--train", dest="train_path", help="training IENF file")
    _add(p, "model")
    _add(p, "train")

    p = verbs.add_parser("eval", parents=[common], argument_default=argparse.SUPPRESS,
                         help="stream a checkpoint over an IENF file and score it")
    p.add_argument("--model", dest="model_path", help="IENM checkpoint")
    p.add_argument("--data", dest="test_path", help="IENF file to evaluate on")
    p.add_argument("--timeline", dest="timeline_path", help="re-score an existing timeline CSV instead")

    p = verbs.add_parser("ablate", parents=[common], argument_default=argparse.SUPPRESS,
                         help="train and compare the four cell variants")
    _add(p, "data")
    _add(p, "model")
    _add(p, "train")
    p.add_argument("--val-len", dest="val_len", type=int, help="validation stream length (0: no epoch selection)")
    p.add_argument("--seeds", dest="n_seeds", type=int, help="number of seeds, starting at --seed")
    p.add_argument("--variants", nargs="+", help="subset of variants to compare")
    p.add_argument("--train", dest="train_path", help="use this IENF file instead of generated data")
    p.add_argument("--test", dest="test_path", help="test IENF file (with --train)")
    p.add_argument("--val", dest="val_path", help="validation IENF file (with --train)")

    p = verbs.add_parser("bench", parents=[common], argument_default=argparse.SUPPRESS,
                         help="forward throughput of lstm_plain against ieu")
    _add(p, "model")
    p.add_argument("--duration", type=float, help="timed seconds per variant")
    p.add_argument("--batch", dest="bench_batch", type=int, help="windows per forward call")
    p.add_argument("--variants", nargs="+", help="variants to time")
    return parser


def load_config(path):
    try:
        with open(path) as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    known = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"{path}: unknown config keys {unknown}")
    return data


def resolve_config(args):
    """Config file values first, then any flag given on the command line."""
    values = vars(args).copy()
    values.pop("verb")
    merged = load_config(values.pop("config_path")) if "config_path" in values else {}
    merged.update(values)
    return RunConfig(**merged)


def _out(cfg, name):
    out_dir = cfg.out_dir or "."
    os.makedirs(out_dir, exist_ok=True)
    return os.path.join(out_dir, name)


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2)
        fh.write("\n")


def _stream_spec(cfg, length, split):
    return StreamSpec(K=cfg.K, d_v=cfg.d_v, stream_len=length, episode_len_range=(cfg.episode_min, cfg.episode_max),
                      background_rate=cfg.background_rate, evidence_mode=cfg.mode, noise_sigma=cfg.noise_sigma,
                      seed=cfg.seed, split=split, min_len=cfg.T_plus_1)


def cmd_gen_data(cfg):
    cfg.require("mode", "K", "d_v", "stream_len")
    cfg = cfg.with_defaults(T_plus_1=8, test_len=cfg.stream_len, **DATA_DEFAULTS)
    specs = {"train.ienf": _stream_spec(cfg, cfg.stream_len, 0), "test.ienf": _stream_spec(cfg, cfg.test_len, 1)}
    for spec in specs.values():
        spec.validate()
    print(f"seed={cfg.seed} mode={cfg.mode} K={cfg.K} d_v={cfg.d_v}")
    for name, spec in specs.items():
        stream = generate_stream(spec)
        path = _out(cfg, name)
        write_features(path, stream)
        counts = np.bincount(stream.labels, minlength=cfg.K + 1)
        print(f"{path}: {len(stream)} chunks, per-class counts {counts.tolist()}")
    return 0


def cmd_train(cfg):
    cfg.require("train_path")
    cfg = cfg.with_defaults(**MODEL_DEFAULTS, **TRAIN_DEFAULTS)
    stream = read_features(cfg.train_path)
    check_stream_matches(stream, cfg.d_v or stream.d_v, cfg.K or stream.K)
    config = IenConfig(cfg.T_plus_1, stream.d_v, cfg.d_e, cfg.d_h, stream.K, cfg.cell_variant, cfg.merge_mode)
    model = IenModel.init(config, rng=cfg.seed)
    segs = segment_windows(stream, config.T_plus_1)
    start = time.perf_counter()
    result = train(model, segs.feats, segs.labels, epochs=cfg.epochs, batch_size=cfg.batch_size, lr=cfg.lr,
                   rng=cfg.seed, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
    seconds = time.perf_counter() - start
    model_path = _out(cfg, "model.ienm")
    save_checkpoint(model, model_path)
    with open(_out(cfg, "loss.csv"), "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["epoch", "mean_loss"])
        for epoch, loss in enumerate(result.losses, start=1):
            out.writerow([epoch, f"{loss:.17g}"])
    _write_json(_out(cfg, "train_report.json"), {
        "loss_trace": result.losses,
        "config": {**asdict(config), **cfg.with_defaults(d_v=stream.d_v, K=stream.K).to_dict()},
        "timings": {"train_seconds": seconds},
    })
    final = f"{result.losses[-1]:.6f}" if result.losses else "n/a"
    print(f"{model_path}: {len(segs)} segments, {cfg.epochs} epochs, final loss {final}")
    return 0


def metrics_report(evalset, config=None, timings=None, loss=None):
    """Report dict with a fixed key order; only ``timings`` varies between runs."""
    ap = mean_average_precision(evalset)
    cap = mean_calibrated_ap(evalset)
    report = {
        "mAP": ap.mean,
        "mcAP": cap.mean,
        "per_class_ap": {str(k): v for k, v in ap.per_class_ap.items()},
        "per_class_cap": {str(k): v for k, v in cap.per_class_ap.items()},
        "skipped_classes": ap.skipped_classes,
        "n_chunks": int(len(evalset.labels)),
    }
    if loss is not None:
        report["mean_cross_entropy"] = loss
    report["config"] = config or {}
    report["timings"] = timings or {}
    return report


def cmd_eval(cfg):
    if cfg.timeline_path is not None:
        evalset = read_timeline(cfg.timeline_path)
        report = metrics_report(evalset, config=cfg.to_dict())
    else:
        cfg.require("model_path", "test_path")
        model = load_checkpoint(cfg.model_path)
        stream = read_features(cfg.test_path)
        check_stream_matches(stream, model.config.d_v, model.config.K)
        start = time.perf_counter()
        probs = stream_infer(model, stream.feats)
        seconds = time.perf_counter() - start
        write_timeline(_out(cfg, "timeline.csv"), probs, stream.labels)
        evalset = EvalSet(probs, stream.labels)
        picked = probs[np.arange(len(stream)), stream.labels]
        loss = float(-np.mean(np.log(np.maximum(picked, PROB_FLOOR))))
        timings = {"inference_seconds": seconds, "chunks_per_second": len(stream) / seconds if seconds else None}
        report = metrics_report(evalset, {**asdict(model.config), **cfg.to_dict()}, timings, loss)
    path = _out(cfg, "report.json")
    _write_json(path, report)
    print(f"mAP={report['mAP']:.4f} mcAP={report['mcAP']:.4f} -> {path}")
    return 0


def cmd_ablate(cfg):
    defaults = asdict(AblationConfig())
    cfg = cfg.with_defaults(
        K=defaults["K"], d_v=defaults["d_v"], d_e=defaults["d_e"], d_h=defaults["d_h"],
        T_plus_1=defaults["T_plus_1"], stream_len=defaults["train_len"], test_len=defaults["test_len"],
        val_len=defaults["val_len"], mode=defaults["evidence_mode"], episode_min=defaults["episode_len_range"][0],
        episode_max=defaults["episode_len_range"][1], background_rate=defaults["background_rate"],
        noise_sigma=defaults["noise_sigma"], epochs=defaults["epochs"], batch_size=defaults["batch_size"],
        lr=defaults["lr"], seed=0, n_seeds=len(defaults["seeds"]), variants=list(ABLATION_ORDER))
    unknown = sorted(set(cfg.variants) - set(ABLATION_ORDER))
    if unknown:
        raise UsageError(f"unknown variants {unknown}")
    streams = None
    if cfg.train_path is not None:
        cfg.require("test_path")
        train_s, test_s = read_features(cfg.train_path), read_features(cfg.test_path)
        val_s = read_features(cfg.val_path) if cfg.val_path else None
        for s in (test_s, val_s):
            if s is not None:
                check_stream_matches(s, train_s.d_v, train_s.K)
        streams = (train_s, test_s, val_s)
        cfg = replace(cfg, K=train_s.K, d_v=train_s.d_v)
    acfg = AblationConfig(
        K=cfg.K, d_v=cfg.d_v, d_e=cfg.d_e, d_h=cfg.d_h, T_plus_1=cfg.T_plus_1, train_len=cfg.stream_len,
        val_len=cfg.val_len, test_len=cfg.test_len, evidence_mode=cfg.mode,
        episode_len_range=(cfg.episode_min, cfg.episode_max), background_rate=cfg.background_rate,
        noise_sigma=cfg.noise_sigma, epochs=cfg.epochs, batch_size=cfg.batch_size, lr=cfg.lr,
        seeds=tuple(range(cfg.seed, cfg.seed + cfg.n_seeds)), variants=tuple(cfg.variants))
    start = time.perf_counter()
    result = run_ablation(acfg, log=lambda line: print(line, flush=True), streams=streams)
    seconds = time.perf_counter() - start
    report = result.to_dict()
    with open(_out(cfg, "ablation.csv"), "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["variant", "seed", "epoch", "mAP", "mcAP"])
        for v in acfg.variants:
            for i, seed in enumerate(acfg.seeds):
                out.writerow([v, seed, result.epoch_by_seed[v][i], f"{result.map_by_seed[v][i]:.17g}",
                              f"{result.mcap_by_seed[v][i]:.17g}"])
    path = _out(cfg, "ablation.json")
    _write_json(path, report)
    print(f"{'variant':<20}{'mean mAP':>10}{'mean mcAP':>11}{'reference mAP %':>17}")
    for v in acfg.variants:
        print(f"{v:<20}{result.mean_map(v):>10.4f}{result.mean_mcap(v):>11.4f}{REFERENCE_ABLATION_MAP[v]:>17.1f}")
    if result.memoryless_map:
        print(f"{'memoryless':<20}{np.mean(result.memoryless_map):>10.4f}")
    print(f"ordering plain <= bundle <= sophisticated <= ieu: {report['ordering_matches_reference']}")
    print(f"{seconds:.1f} s -> {path}")
    return 0


def cmd_bench(cfg):
    cfg = cfg.with_defaults(d_e=512, d_h=512, T_plus_1=8, duration=10.0, bench_batch=1, seed=0,
                            variants=["lstm_plain", "ieu"])
    results = run_benchmark(d_e=cfg.d_e, d_h=cfg.d_h, T_plus_1=cfg.T_plus_1, batch=cfg.bench_batch,
                            duration=cfg.duration, variants=tuple(cfg.variants), seed=cfg.seed)
    report = {
        "chunks_per_second": {v: r.steps_per_sec for v, r in results.items()},
        "windows_per_second": {v: r.windows_per_sec for v, r in results.items()},
        "timed_seconds": {v: r.seconds for v, r in results.items()},
    }
    if "lstm_plain" in results and "ieu" in results:
        report["delta_pct"] = speed_delta_pct(results)
        report["reference_delta_pct"] = REFERENCE_SPEED_DELTA_PCT
    report["config"] = cfg.to_dict()
    path = _out(cfg, "bench.json")
    _write_json(path, report)
    for v, r in results.items():
        print(f"{v:<20}{r.steps_per_sec:>14.1f} chunks/s")
    if "delta_pct" in report:
        print(f"ieu vs lstm_plain: {report['delta_pct']:+.2f}% (reference hardware: {REFERENCE_SPEED_DELTA_PCT:+.2f}%)")
    return 0


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate,
            "bench": cmd_bench}


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        return COMMANDS[args.verb](resolve_config(args))
    except (IenError, OSError) as exc:
        message = " ".join(str(exc).split())
        print(f"ERROR {type(exc).__name__}: {message}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
