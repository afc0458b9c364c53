"""``fmocc`` command line: gen, train, eval, infer, bench, plot, repro."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import yaml

from . import runner
from .bench import run_bench, scan_ratio, write_bench
from .config import RunConfig
from .errors import CheckpointError, ConfigError, ContractError, SceneFormatError
from .metrics import MetricsParseError
from .plotting import plot_losses, plot_mask_curves
from .training import TrainingError

log = logging.getLogger("fmocc")

EXIT_CONTRACT = 2
EXIT_TRAINING = 3
EXIT_IO = 4


def _parse_set(items) -> dict:
    out = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = yaml.safe_load(v)
    return out


def load_config(args, fallback: Path | None = None) -> RunConfig:
    """Config from ``--config`` (else ``fallback`` if it exists), then --set, then --seed."""
    if args.config:
        cfg = RunConfig.load(args.config)
    elif fallback is not None and fallback.exists():
        cfg = RunConfig.load(fallback)
    else:
        cfg = RunConfig()
    updates = _parse_set(args.set)
    if args.seed is not None:
        updates["seed"] = args.seed
    return cfg.replace(**updates) if updates else cfg


def _out(args, cfg: RunConfig) -> Path:
    return Path(args.out if args.out else cfg.out_dir)


# --- verbs ------------------------------------------------------------------------


def do_gen(args) -> None:
    cfg = load_config(args)
    if args.split == "test":
        n, first = cfg.data.n_test, cfg.data.test_first_seed
    else:
        n, first = cfg.data.n_train, cfg.data.train_first_seed
    n = args.n if args.n is not None else n
    first = args.first_seed if args.first_seed is not None else first
    paths = runner.cmd_gen(cfg, n, _out(args, cfg), first)
    print(f"wrote {len(paths)} scenes to {_out(args, cfg)}")


def do_train(args) -> None:
    # an existing run directory supplies its own config snapshot, so resume needs no --config
    out = Path(args.out) if args.out else None
    cfg = load_config(args, out / "config.yaml" if out else None)
    out = out or Path(cfg.out_dir)
    final = runner.cmd_train(cfg, args.data, out, resume=not args.no_resume,
                             stop_after=args.stop_after)
    print(f"checkpoint: {final}")


def do_eval(args) -> None:
    ck = Path(args.checkpoint)
    cfg = load_config(args, ck.parent / "config.yaml")
    out = Path(args.out) if args.out else ck.parent / "eval"
    ratios = args.mask_ratio if args.mask_ratio else list(cfg.eval.mask_ratios)
    results = runner.cmd_eval(cfg, ck, args.data, out, ratios, with_rays=not args.no_rays)
    for r in results:
        print(f"mask_ratio={r.mask_ratio:.2f} miou={r.report.miou:.4f} "
              f"rayiou={r.report.rayiou_mean:.4f}")


def do_infer(args) -> None:
    ck = Path(args.checkpoint)
    cfg = load_config(args, ck.parent / "config.yaml")
    out = Path(args.out) if args.out else Path(args.scene).with_suffix(".pred.fmoc")
    runner.cmd_infer(cfg, ck, args.scene, out, args.mask_ratio)
    print(f"prediction: {out}")


def do_bench(args) -> None:
    cfg = load_config(args)
    out = _out(args, cfg)
    out.mkdir(parents=True, exist_ok=True)
    rows = run_bench(cfg)
    write_bench(out / "bench.csv", rows)
    for r in rows:
        print(f"{r.kind:9s} {r.size:6d} {r.seconds * 1e3:10.3f} ms {r.peak_bytes / 2**20:9.2f} MiB")
    if {1024, 4096} <= {r.size for r in rows if r.kind == "ssm_scan"}:
        print(f"scan time ratio L=4096/L=1024: {scan_ratio(rows):.2f}")


def _label_pairs(items, what: str) -> dict[str, list[str]]:
    out: dict[str, list[str]] = {}
    for i, item in enumerate(items or ()):
        label, _, files = item.rpartition("=")
        label = label or f"{what}{i}"
        out[label] = [f for f in files.split(",") if f]
    return out


def do_plot(args) -> None:
    out = Path(args.out) if args.out else Path(".")
    out.mkdir(parents=True, exist_ok=True)
    series = _label_pairs(args.series, "run")
    if args.metrics:
        series.setdefault("run", []).extend(args.metrics)
    if not series:
        raise ContractError("plot needs metrics files (positional or --series)")
    print(plot_mask_curves(series, out / "mask_ratio_miou.png"))
    logs = {k: v[0] for k, v in _label_pairs(args.log, "log").items()}
    if logs:
        print(plot_losses(logs, out / "losses.png"))


def do_repro(args) -> None:
    """gen -> train (MT on, MT off, no-FMSSM baseline) -> eval sweep -> plot -> bench."""
    cfg = load_config(args)
    root = _out(args, cfg)
    train_dir, test_dir = root / "data" / "train", root / "data" / "test"
    d = cfg.data
    runner.cmd_gen(cfg, d.n_train, train_dir, d.train_first_seed)
    runner.cmd_gen(cfg, d.n_test, test_dir, d.test_first_seed)
    variants = {
        "fmssm_mt": cfg,
        "fmssm_no_mt": cfg.replace(**{"mask.enabled": False}),
        "baseline_mt": cfg.replace(**{"model.use_fmssm": False}),
    }
    series, logs = {}, {}
    for name, vcfg in variants.items():
        run = root / name
        print(f"[{name}] training")
        ck = runner.cmd_train(vcfg, train_dir, run)
        results = runner.cmd_eval(vcfg, ck, test_dir, run / "eval", list(vcfg.eval.mask_ratios))
        series[name] = [run / "eval" / f"metrics_mask{r.mask_ratio:.2f}.txt" for r in results]
        logs[name] = run / "log.csv"
        for r in results:
            print(f"[{name}] mask_ratio={r.mask_ratio:.2f} miou={r.report.miou:.4f}")
    plot_mask_curves(series, root / "mask_ratio_miou.png")
    plot_losses(logs, root / "losses.png")
    write_bench(root / "bench.csv", run_bench(cfg))
    print(f"artifacts in {root}")


# --- parser -----------------------------------------------------------------------


def _common_flags(set_dest: str) -> argparse.ArgumentParser:
    # global flags are accepted before or after the verb; SUPPRESS keeps a subparser
    # from overwriting a value given before the verb with its own default
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--config", help="YAML run config")
    common.add_argument("--seed", type=int, help="override the run seed")
    common.add_argument("--out", help="output directory (or file for infer)")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", dest=set_dest,
                        help="dotted config override, e.g. train.epochs=4")
    common.add_argument("-v", "--verbose", action="store_true")
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common_flags("set")
    # --set before the verb lands in its own list so both sides accumulate
    p = argparse.ArgumentParser(prog="fmocc", description=__doc__,
                                parents=[_common_flags("set_before_verb")])
    sub = p.add_subparsers(dest="verb", required=True)

    g = sub.add_parser("gen", parents=[common], help="generate synthetic scenes")
    g.add_argument("--n", type=int, help="number of scenes")
    g.add_argument("--first-seed", type=int)
    g.add_argument("--split", choices=("train", "test"), default="train")
    g.set_defaults(func=do_gen)

    t = sub.add_parser("train", parents=[common], help="train a model on a scene directory")
    t.add_argument("--data", required=True)
    t.add_argument("--no-resume", action="store_true")
    t.add_argument("--stop-after", type=int, help="stop (with a checkpoint) after this step")
    t.set_defaults(func=do_train)

    e = sub.add_parser("eval", parents=[common], help="metrics over a mask-ratio sweep")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--mask-ratio", type=float, action="append")
    e.add_argument("--no-rays", action="store_true", help="skip RayIoU")
    e.set_defaults(func=do_eval)

    i = sub.add_parser("infer", parents=[common], help="predict labels for one scene file")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--scene", required=True)
    i.add_argument("--mask-ratio", type=float, default=0.0)
    i.set_defaults(func=do_infer)

    b = sub.add_parser("bench", parents=[common], help="scan and inference timings")
    b.set_defaults(func=do_bench)

    pl = sub.add_parser("plot", parents=[common], help="render curves from metrics and logs")
    pl.add_argument("metrics", nargs="*", help="metrics documents for a single series")
    pl.add_argument("--series", action="append", metavar="LABEL=F1,F2,...")
    pl.add_argument("--log", action="append", metavar="LABEL=log.csv")
    pl.set_defaults(func=do_plot)

    r = sub.add_parser("repro", parents=[common], help="full gen/train/eval/plot pipeline")
    r.set_defaults(func=do_repro)
    return p


_GLOBAL_DEFAULTS = dict(config=None, seed=None, out=None, set=None, verbose=False)


def parse_args(argv=None) -> argparse.Namespace:
    args = build_parser().parse_args(argv)
    # parent actions are shared objects, so set_defaults on the top parser would leak
    # into every subparser; missing globals are filled in here instead
    for k, v in _GLOBAL_DEFAULTS.items():
        if not hasattr(args, k):
            setattr(args, k, v)
    before = getattr(args, "set_before_verb", None)
    if before:
        args.set = before + (args.set or [])
    return args


def main(argv=None) -> int:
    args = parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except TrainingError as exc:
        print(f"fmocc {args.verb}: training aborted: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    except (ContractError, ConfigError, CheckpointError, SceneFormatError, MetricsParseError,
            runner.DataError) as exc:
        print(f"fmocc {args.verb}: {exc}", file=sys.stderr)
        return EXIT_CONTRACT
    except OSError as exc:
        print(f"fmocc {args.verb}: {exc}", file=sys.stderr)
        return EXIT_IO
    return 0


if __name__ == "__main__":
    sys.exit(main())
