"""Command-line entry point: ``sktcount <command> [flags]``.

Commands: ``synth``, ``train-teacher``, ``distill``, ``eval``, ``profile`` and
``ablate``.  Settings are layered as built-in defaults, then ``--config FILE``,
then explicit flags.  ``--dump-config`` prints the effective configuration and
exits; feeding that text back through ``--config`` reproduces the run.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
from pathlib import Path

from . import config as rc
from .density import load_dataset, synth_dataset, write_dataset
from .evaluation import efficiency_report, evaluate
from .models import ARCHS, ConfigError, parse_cpr, scale_config
from .train import (
    Checkpoint,
    CheckpointError,
    TrainConfig,
    TrainingError,
    TrainingLog,
    distill,
    load_checkpoint,
    save_checkpoint,
    teacher_weights,
)

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
DEFAULT_RUNS = "runs"

# (name, intra metric, fsp mode, alpha_intra on?, alpha_inter on?)
ABLATION_ROWS = [
    ("Intra-PT L2", "l2", "off", True, False),
    ("Intra-PT Cos", "cos", "off", True, False),
    ("Inter-RT S-FSP", "cos", "sparse", False, True),
    ("Inter-RT D-FSP", "cos", "dense", False, True),
    ("L2 + D-FSP", "l2", "dense", True, True),
    ("Cos + D-FSP", "cos", "dense", True, True),
]


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}")


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _nonneg_float(text: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {text!r}") from None
    if v < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {v}")
    return v


def _checked(fn):
    def check(text: str) -> str:
        try:
            fn(text)
        except (rc.ConfigParseError, ConfigError) as exc:
            raise argparse.ArgumentTypeError(str(exc)) from None
        return text

    check.__name__ = fn.__name__
    return check


# flag dest -> (config key, argparse kwargs)
_DATA = {
    "data": ("data.dir", dict(metavar="DIR", help="training data directory")),
}
_TRAIN = {
    "seed": ("train.seed", dict(type=int)),
    "epochs": ("train.epochs", dict(type=_positive_int)),
    "batch_size": ("train.batch_size", dict(type=_positive_int)),
    "lr": ("train.lr", dict(type=_nonneg_float)),
    "optimizer": ("train.optimizer", dict(choices=["adam", "sgd"])),
    "clip_norm": ("train.clip_norm", dict(type=_nonneg_float)),
}
_SKT = {
    "cpr": ("model.cpr", dict(type=_checked(parse_cpr), metavar="R")),
    "alpha_intra": ("skt.alpha_intra", dict(type=_nonneg_float, metavar="A1")),
    "alpha_inter": ("skt.alpha_inter", dict(type=_nonneg_float, metavar="A2")),
    "alpha_map": ("skt.alpha_map", dict(type=_nonneg_float, metavar="A3")),
    "intra_metric": ("skt.intra_metric", dict(choices=["cos", "l2"])),
    "fsp": ("skt.fsp", dict(choices=["dense", "sparse", "off"])),
    "gt": ("skt.gt", dict(choices=["hard", "soft", "both"])),
}
_SYNTH = {
    "out": ("data.dir", dict(metavar="DIR", help="output directory")),
    "count": ("data.count", dict(type=_positive_int)),
    "seed": ("data.seed", dict(type=int)),
    "size": ("data.size", dict(type=_checked(rc.parse_size), metavar="HxW")),
    "people": ("data.people", dict(type=_checked(rc.parse_range), metavar="MIN..MAX")),
}
_ARCH = {"arch": ("model.arch", dict(choices=sorted(ARCHS)))}
_TEACHER = {"teacher": ("model.teacher", dict(metavar="CKPT", help="teacher checkpoint"))}
_TEST = {"test_data": ("eval.data", dict(metavar="DIR", help="held-out data directory for the summary"))}


def _add(parser, table: dict) -> None:
    for dest, (key, kw) in table.items():
        parser.add_argument("--" + dest.replace("_", "-"), dest=dest, default=None, **kw)


def _common(parser, runs: bool = True) -> None:
    parser.add_argument("--config", metavar="FILE", help="run configuration file")
    parser.add_argument("--dump-config", action="store_true", help="print the effective configuration and exit")
    if runs:
        parser.add_argument("--runs", default=DEFAULT_RUNS, metavar="DIR", help="root for per-run directories")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="sktcount", description="Structured knowledge transfer for crowd counting.")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("synth", help="write a synthetic crowd dataset")
    _common(s, runs=False)
    _add(s, _SYNTH)

    t = sub.add_parser("train-teacher", help="train a full-width teacher on hard ground truth")
    _common(t)
    _add(t, {**_DATA, **_ARCH, **_TRAIN})

    d = sub.add_parser("distill", help="distill a 1/n student from a teacher")
    _common(d)
    _add(d, {**_DATA, **_TEACHER, **_TRAIN, **_SKT})

    e = sub.add_parser("eval", help="MAE/RMSE of a checkpoint on a dataset")
    e.add_argument("--ckpt", required=True, metavar="FILE")
    e.add_argument("--data", required=True, metavar="DIR")
    e.add_argument("--table", action="store_true", help="also print per-image counts")

    f = sub.add_parser("profile", help="parameter and FLOP counts")
    f.add_argument("--arch", default="csrnet", help=f"one of: {', '.join(sorted(ARCHS))}")
    f.add_argument("--cpr", default="1", type=_checked(parse_cpr), metavar="R")
    f.add_argument("--size", default="576x864", type=_checked(rc.parse_size), metavar="HxW")

    a = sub.add_parser("ablate", help="run every transfer configuration and tabulate test MAE/RMSE")
    _common(a)
    _add(a, {**_DATA, **_TEACHER, **_TEST, **_TRAIN})
    for dest in ("cpr", "alpha_intra", "alpha_inter", "alpha_map", "gt"):
        key, kw = _SKT[dest]
        a.add_argument("--" + dest.replace("_", "-"), dest=dest, default=None, **kw)
    a.add_argument("--baseline", action="store_true", help="also train the no-transfer student")
    return p


def _tables_for(command: str) -> dict:
    return {
        "synth": _SYNTH,
        "train-teacher": {**_DATA, **_ARCH, **_TRAIN},
        "distill": {**_DATA, **_TEACHER, **_TRAIN, **_SKT},
        "ablate": {**_DATA, **_TEACHER, **_TEST, **_TRAIN, **{k: _SKT[k] for k in ("cpr", "alpha_intra", "alpha_inter", "alpha_map", "gt")}},
    }[command]


def resolve_config(args) -> rc.RunConfig:
    """Defaults, then ``--config``, then explicit flags."""
    cfg = rc.load(args.config) if args.config else rc.RunConfig()
    for dest, (key, _) in _tables_for(args.command).items():
        value = getattr(args, dest, None)
        if value is not None:
            cfg.set(key, value if isinstance(value, str) else rc.format_value(value))
    if args.command == "train-teacher":
        cfg.set("model.cpr", "1")
    _validate(cfg)
    return cfg


def _validate(cfg: rc.RunConfig) -> None:
    h, w = rc.parse_size(cfg.data.size)
    if h % 8 or w % 8:
        raise rc.ConfigParseError(f"data.size {cfg.data.size} must be divisible by 8 in both dimensions")
    try:
        rc.parse_range(cfg.data.people)
        parse_cpr(cfg.model.cpr)
    except ConfigError as exc:
        raise rc.ConfigParseError(str(exc)) from None
    if cfg.model.arch not in ARCHS:
        raise rc.ConfigParseError(f"unknown architecture {cfg.model.arch!r}; valid: {', '.join(sorted(ARCHS))}")
    if cfg.train.epochs < 1:
        raise rc.ConfigParseError(f"train.epochs must be >= 1, got {cfg.train.epochs}")
    try:
        TrainConfig.from_run(cfg)
    except ValueError as exc:
        raise rc.ConfigParseError(str(exc)) from None


def _require_data(directory: str, what: str = "data") -> list:
    if not directory:
        raise UsageError(f"no {what} directory given")
    return load_dataset(directory)


def _run_dir(runs: str, cfg: rc.RunConfig) -> Path:
    d = Path(runs) / cfg.hash()
    d.mkdir(parents=True, exist_ok=True)
    (d / "config.txt").write_text(cfg.dump(), encoding="utf-8")
    return d


def _finish(d: Path, ckpt: Checkpoint) -> None:
    save_checkpoint(ckpt, d / "checkpoint.sktc")
    print(f"run {d}")
    print(f"checkpoint {d / 'checkpoint.sktc'}")


# ---------------------------------------------------------------- commands


def cmd_synth(cfg: rc.RunConfig, args) -> int:
    if not cfg.data.dir:
        raise UsageError("synth needs --out DIR")
    h, w = rc.parse_size(cfg.data.size)
    out = Path(cfg.data.dir)
    if out.exists() and not out.is_dir():
        raise UsageError(f"output path {out} exists and is not a directory")
    samples = synth_dataset(cfg.data.seed, cfg.data.count, h, w, rc.parse_range(cfg.data.people))
    try:
        write_dataset(out, samples)
    except OSError as exc:
        raise UsageError(f"cannot write to {out}: {exc.strerror or exc}") from None
    print(f"wrote {len(samples)} scenes to {out}")
    return EXIT_OK


def cmd_train_teacher(cfg: rc.RunConfig, args) -> int:
    from .train import train_teacher

    data = _require_data(cfg.data.dir)
    tc = TrainConfig.from_run(cfg)
    tc = dataclasses.replace(tc, weights=teacher_weights())
    d = _run_dir(args.runs, cfg)
    log = TrainingLog(cfg.hash(), d / "train.log")
    ckpt = train_teacher(tc, ARCHS[cfg.model.arch](), data, log)
    _finish(d, ckpt)
    return EXIT_OK


def _load_teacher(path: str) -> Checkpoint:
    if not path:
        raise UsageError("no teacher checkpoint given (--teacher)")
    return load_checkpoint(path)


def _distill_run(cfg: rc.RunConfig, runs: str, teacher: Checkpoint, data) -> tuple[Path, Checkpoint]:
    d = _run_dir(runs, cfg)
    student_cfg = scale_config(teacher.net_config, cfg.model.cpr)
    log = TrainingLog(cfg.hash(), d / "train.log")
    ckpt = distill(teacher, student_cfg, TrainConfig.from_run(cfg), data, log)
    save_checkpoint(ckpt, d / "checkpoint.sktc")
    return d, ckpt


def cmd_distill(cfg: rc.RunConfig, args) -> int:
    teacher = _load_teacher(cfg.model.teacher)
    data = _require_data(cfg.data.dir)
    d, ckpt = _distill_run(cfg, args.runs, teacher, data)
    print(f"run {d}")
    print(f"checkpoint {d / 'checkpoint.sktc'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    metrics = evaluate(ckpt, load_dataset(args.data))
    print(metrics.table() if args.table else metrics.record())
    return EXIT_OK


def cmd_profile(args) -> int:
    if args.arch not in ARCHS:
        raise UsageError(f"unknown architecture {args.arch!r}; valid: {', '.join(sorted(ARCHS))}")
    h, w = rc.parse_size(args.size)
    cfg = scale_config(ARCHS[args.arch](), args.cpr)
    print(efficiency_report(cfg, h, w).render())
    return EXIT_OK


def ablation_configs(base: rc.RunConfig, baseline: bool = False) -> list[tuple[str, rc.RunConfig]]:
    """One run configuration per transfer row (plus the no-transfer row)."""
    out = []
    if baseline:
        c = rc.parse(base.dump())
        c.set("skt.alpha_intra", "0.0")
        c.set("skt.alpha_inter", "0.0")
        c.set("skt.fsp", "off")
        c.set("skt.gt", "hard")
        out.append(("W/O Transfer", c))
    for name, metric, fsp, intra, inter in ABLATION_ROWS:
        c = rc.parse(base.dump())
        c.set("skt.intra_metric", metric)
        c.set("skt.fsp", fsp)
        if not intra:
            c.set("skt.alpha_intra", "0.0")
        if not inter:
            c.set("skt.alpha_inter", "0.0")
        out.append((name, c))
    return out


def cmd_ablate(cfg: rc.RunConfig, args) -> int:
    teacher = _load_teacher(cfg.model.teacher)
    data = _require_data(cfg.data.dir)
    test = load_dataset(cfg.eval.data) if cfg.eval.data else data
    rows = []
    for name, c in ablation_configs(cfg, args.baseline):
        d, ckpt = _distill_run(c, args.runs, teacher, data)
        m = evaluate(ckpt, test)
        rows.append((name, m.mae, m.rmse, d.name))
        print(f"{name:<16} {m.record()}  run {d}", flush=True)
    print()
    print(f"{'Transfer Configuration':<24} {'MAE':>10} {'RMSE':>10}  run")
    for name, mae, rmse, run in rows:
        print(f"{name:<24} {mae:10.4f} {rmse:10.4f}  {run}")
    return EXIT_OK


_COMMANDS = {
    "synth": cmd_synth,
    "train-teacher": cmd_train_teacher,
    "distill": cmd_distill,
    "ablate": cmd_ablate,
}


def _thread_limit():
    from threadpoolctl import threadpool_limits

    raw = os.environ.get("SKT_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"SKT_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"SKT_THREADS must be a positive integer, got {raw!r}")
    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        with _thread_limit():
            if args.command == "eval":
                return cmd_eval(args)
            if args.command == "profile":
                return cmd_profile(args)
            cfg = resolve_config(args)
            if args.dump_config:
                sys.stdout.write(cfg.dump())
                return EXIT_OK
            return _COMMANDS[args.command](cfg, args)
    except (UsageError, rc.ConfigParseError) as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, CheckpointError, TrainingError, ConfigError, OSError, ValueError) as exc:
        print(f"sktcount: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
