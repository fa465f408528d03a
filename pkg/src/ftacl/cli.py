"""Command-line entry point.

Exit codes: 0 success, 1 runtime or data failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import accounting
from .audio import FrontendConfig, WavError, frame_count, log_mel, read_wav
from .fileformat import FormatError, load_tensor, save_tensor
from .ticl import (
    REFERENCE_OVERRIDES,
    RunConfig,
    TiclRun,
    TrainingDiverged,
    TrainMode,
    matrix_report,
    read_kv,
    run_sequence,
    tasks_for,
)
from .tokenizer import TokenizerConfig, token_grid

log = logging.getLogger("ftacl")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2

PARAM_MODES = {
    "full": "full_finetune",
    "model-seq": "model_sequential",
    "model-inc": "model_incremental",
    "adapter-inc": "adapter_incremental",
    "linear": "linear_probe",
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _default_seed() -> int:
    raw = os.environ.get("FTACL_SEED", "7")
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"FTACL_SEED must be an integer, got {raw!r}") from None


# ---------------------------------------------------------------- analyze


def cmd_analyze(args) -> int:
    cfg = TokenizerConfig(args.kernel, args.stride, 1)
    if args.duration_s is not None:
        if args.frames:
            raise UsageError("give either --frames or --duration-s, not both")
        hop = int(round(args.sample_rate * args.hop_ms / 1000.0))
        frames = [frame_count(int(round(d * args.sample_rate)), hop) for d in args.duration_s]
    elif args.frames:
        frames = args.frames
    else:
        raise UsageError("one of --frames or --duration-s is required")
    d = args.d or 1
    rows = []
    for n in frames:
        try:
            grid = token_grid(args.freq_bins, n, cfg)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        rows.append(accounting.complexity_report(grid, d))
    cols = ["m", "t", "o_gsa_over_d", "o_fta_over_d", "k"] + (["o_gsa", "o_fta"] if args.d else [])
    if args.format == "table":
        print("# " + " ".join(cols))
    for r in rows:
        vals = [r.M, r.T, r.o_gsa_over_d, r.o_fta_over_d, r.k_display] + ([r.o_gsa, r.o_fta] if args.d else [])
        if args.format == "kv":
            print(" ".join(f"{c}={v}" for c, v in zip(cols, vals)))
        else:
            print(" ".join(str(v) for v in vals))
    return EXIT_OK


# ---------------------------------------------------------------- features


def cmd_features(args) -> int:
    src, dst = Path(args.input), Path(args.output)
    if not src.is_file():
        raise UsageError(f"{src}: no such file")
    if not dst.parent.exists():
        raise UsageError(f"{dst.parent}: output directory does not exist")
    try:
        clip = read_wav(src)
    except WavError as exc:
        print(f"error: cannot decode {src}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    try:
        cfg = FrontendConfig(
            sample_rate=clip.sample_rate,
            win_ms=args.win_ms,
            hop_ms=args.hop_ms,
            n_mels=args.n_mels,
            fmin=args.fmin,
            fmax=args.fmax,
            log_floor=args.log_floor,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    try:
        spec = log_mel(clip, cfg)
    except ValueError as exc:
        print(f"error: {src}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    save_tensor(dst, spec.values.astype(np.float32 if args.dtype == "f32" else np.float64))
    print(f"shape={spec.n_mels},{spec.frames} output={dst}")
    return EXIT_OK


# ---------------------------------------------------------------- params


def cmd_params(args) -> int:
    spec = accounting.PRESETS[args.preset]
    overrides = {k: getattr(args, k) for k in ("d", "layers", "heads", "bottleneck", "in_channels") if getattr(args, k)}
    if args.classes:
        overrides["classes"] = tuple(args.classes)
    try:
        spec = type(spec)(**{**spec.__dict__, **overrides})
        if spec.d % spec.heads or not 0 < spec.bottleneck < spec.d:
            raise ValueError("need d divisible by heads and 0 < bottleneck < d")
        rep = accounting.param_report(spec, PARAM_MODES[args.mode], args.tasks)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    sys.stdout.write(accounting.format_param_report(rep))
    return EXIT_OK


# ---------------------------------------------------------------- ticl / train / eval

RUN_KEYS = {f for f in RunConfig.__dataclass_fields__}


def _run_config(args, base: dict | None = None) -> RunConfig:
    """Merge defaults < config file < flags."""
    merged: dict[str, str] = {k: str(v) for k, v in REFERENCE_OVERRIDES.items()}
    merged["seed"] = str(_default_seed())
    merged.update(base or {})
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"{path}: config file not found")
        try:
            file_kv = read_kv(path)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        unknown = file_kv.keys() - RUN_KEYS
        if unknown:
            raise UsageError(f"{path}: unknown config keys {sorted(unknown)}")
        merged.update(file_kv)
    for key in RUN_KEYS:
        val = getattr(args, key, None)
        if val is not None:
            merged[key] = str(val)
    try:
        cfg = RunConfig.from_mapping(merged)
        token_grid(cfg.freq_bins, cfg.frames, cfg.tokenizer_config())
        cfg.encoder_config()
        if not 0 < cfg.bottleneck < cfg.d:
            raise ValueError("need 0 < bottleneck < d")
        if cfg.epochs < 0 or cfg.batch_size < 1 or cfg.tasks < 1 or cfg.lr <= 0:
            raise ValueError("epochs >= 0, batch_size >= 1, tasks >= 1 and lr > 0 required")
    except (KeyError, ValueError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from None
    if cfg.data and not Path(cfg.data).is_dir():
        raise UsageError(f"{cfg.data}: data directory not found")
    return cfg


def _prepare_dir(path) -> Path:
    p = Path(path)
    try:
        p.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"{p}: cannot create run directory ({exc})") from None
    if not os.access(p, os.W_OK):
        raise UsageError(f"{p}: run directory not writable")
    return p


def _load_tasks(cfg: RunConfig):
    tasks = tasks_for(cfg)
    if cfg.data and tasks:
        shape = tasks[0].train_x.shape[1:]
        if shape != (cfg.freq_bins, cfg.frames):
            cfg.freq_bins, cfg.frames = shape
    return tasks


def cmd_ticl(args) -> int:
    cfg = _run_config(args)
    run_dir = _prepare_dir(args.run_dir)
    try:
        tasks = _load_tasks(cfg)
        run = TiclRun(cfg)
        run_sequence(run, tasks)
    except TrainingDiverged as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (FormatError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    run.save(run_dir)
    sys.stdout.write(matrix_report(run))
    return EXIT_OK


def cmd_train(args) -> int:
    """Train the next task of a run directory (creating it on first use)."""
    run_dir = _prepare_dir(args.run_dir)
    existing = (run_dir / "config.txt").exists()
    try:
        if existing:
            if args.config or any(getattr(args, k, None) is not None for k in RUN_KEYS):
                raise UsageError("run directory already configured; flags and --config are only accepted on first use")
            run = TiclRun.load(run_dir)
            cfg = run.cfg
        else:
            cfg = _run_config(args)
            run = TiclRun(cfg)
        tasks = _load_tasks(cfg)
        done = len(run.order_trained())
        if done >= len(tasks):
            raise UsageError(f"all {len(tasks)} configured tasks are already trained")
        for spec in tasks[:done]:
            run.set_test_data(spec.task_id, spec.test_x, spec.test_y)
        spec = tasks[done]
        run.register(spec)
        tlog = run.train_task(spec.task_id, spec.train_x, spec.train_y)
        run.evaluate_stage()
    except TrainingDiverged as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (FormatError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    run.save(run_dir)
    print(f"task_id={spec.task_id} name={spec.name} train_accuracy={tlog.train_accuracy:.6f}")
    sys.stdout.write(matrix_report(run))
    return EXIT_OK


def cmd_eval(args) -> int:
    run_dir = Path(args.run_dir)
    if not (run_dir / "config.txt").is_file():
        raise UsageError(f"{run_dir}: not a run directory")
    try:
        run = TiclRun.load(run_dir)
        if args.features:
            if args.task_id is None:
                raise UsageError("--features needs --task-id")
            x = load_tensor(args.features)
            logits = run.route_and_predict(x, args.task_id)
            print(f"task_id={args.task_id} prediction={int(np.argmax(logits))}")
            print("logits=" + ",".join(f"{v:.6f}" for v in logits))
            return EXIT_OK
        tasks = {t.task_id: t for t in _load_tasks(run.cfg)}
        ids = [args.task_id] if args.task_id is not None else run.order_trained()
        for tid in ids:
            if tid not in tasks:
                raise KeyError(f"unknown task id {tid}")
            t = tasks[tid]
            print(f"task_id={tid} name={t.name} test_accuracy={run.accuracy_on(tid, t.test_x, t.test_y):.6f}")
    except KeyError as exc:
        print(f"error: {exc.args[0]}", file=sys.stderr)
        return EXIT_RUNTIME
    except (FormatError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


# ---------------------------------------------------------------- parser


def _add_run_flags(p):
    p.add_argument("run_dir")
    p.add_argument("--config", help="key=value file; flags override it")
    p.add_argument("--mode", choices=[m.value for m in TrainMode])
    p.add_argument("--tasks", type=int)
    p.add_argument("--seed", type=int, help="default: $FTACL_SEED or 7")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--d", type=int)
    p.add_argument("--layers", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--bottleneck", type=int)
    p.add_argument("--attention", choices=["gsa", "fta"])
    p.add_argument("--noise", type=float)
    p.add_argument("--classes", type=int)
    p.add_argument("--data", help="feature-file task root: <task>/<class>/*.ftt")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ftacl", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("analyze", help="attention pair counts for GSA vs FTA")
    p.add_argument("--freq-bins", type=int, default=128)
    p.add_argument("--frames", type=int, nargs="+")
    p.add_argument("--duration-s", type=float, nargs="+")
    p.add_argument("--sample-rate", type=int, default=16000)
    p.add_argument("--hop-ms", type=float, default=10.0)
    p.add_argument("--kernel", type=int, default=16)
    p.add_argument("--stride", type=int, default=10)
    p.add_argument("--d", type=int, help="also print the x d totals")
    p.add_argument("--format", choices=["table", "kv"], default="table")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("features", help="WAV to log-mel FTT1 tensor")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--n-mels", type=int, default=128)
    p.add_argument("--win-ms", type=float, default=25.0)
    p.add_argument("--hop-ms", type=float, default=10.0)
    p.add_argument("--fmin", type=float, default=0.0)
    p.add_argument("--fmax", type=float)
    p.add_argument("--log-floor", type=float, default=1e-10)
    p.add_argument("--dtype", choices=["f32", "f64"], default="f32")
    p.set_defaults(func=cmd_features)

    p = sub.add_parser("params", help="parameter and storage report")
    p.add_argument("--preset", choices=sorted(accounting.PRESETS), default="paper-full")
    p.add_argument("--mode", choices=sorted(PARAM_MODES), default="full")
    p.add_argument("--tasks", type=int, default=1)
    p.add_argument("--d", type=int)
    p.add_argument("--layers", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--bottleneck", type=int)
    p.add_argument("--in-channels", dest="in_channels", type=int)
    p.add_argument("--classes", type=int, nargs="+")
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("ticl", help="run a full task-incremental sequence")
    _add_run_flags(p)
    p.set_defaults(func=cmd_ticl)

    p = sub.add_parser("train", help="train the next task of a run directory")
    _add_run_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a saved run, or classify one feature file")
    p.add_argument("run_dir")
    p.add_argument("--task-id", type=int)
    p.add_argument("--features", help="FTT1 log-mel tensor to classify")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
