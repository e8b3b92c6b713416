"""Command line entry point: ``patchdecomp {synth,train,forecast,aopcr}``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from .config import ConfigError, RunConfig, load_config
from .data import DataError, make_windows, stack_windows, synth_generate, window_at, write_csv, SynthSpec
from .evaluation import compare_strategies, metrics, write_aopcr_csv
from .explain import export, global_explain, local_explain, variable_curves
from .model import ConfigurationError, forward
from .train import CheckpointError, TrainingDivergedError, load_checkpoint, predict_batched, save_checkpoint, train


logger = logging.getLogger("patchdecomp")

EXIT_OK, EXIT_USER, EXIT_INTERNAL = 0, 1, 2
USER_ERRORS = (ConfigError, DataError, CheckpointError, ConfigurationError, TrainingDivergedError, FileNotFoundError)


class UsageError(Exception):
    pass


def _config(args) -> RunConfig:
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg.training.seed = args.seed
    return cfg


def _run_dir(args, cfg: RunConfig) -> Path:
    out = Path(args.out) if getattr(args, "out", None) else cfg.run_dir
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_synth(args) -> int:
    if args.config:
        spec = load_config(args.config).synth_spec(args.seed)
    else:
        spec = SynthSpec() if args.seed is None else SynthSpec(seed=args.seed)
    if args.length is not None:
        spec = SynthSpec.from_dict({**spec.__dict__, "length": args.length})
    ds = synth_generate(spec)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_csv(ds, out)
    print(f"wrote {len(ds)} rows to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    run_dir = _run_dir(args, cfg)
    ds = cfg.load_dataset()
    mc, tc = cfg.model_config(ds), cfg.train_config()
    L, H = mc.input_size, mc.h
    tr = make_windows(ds, L, H, stride=cfg.training.train_stride, subset="train")
    va = make_windows(ds, L, H, stride=1, subset="valid")
    if not tr or not va:
        raise DataError(f"not enough data: {len(tr)} train and {len(va)} valid windows for L={L}, H={H}")
    params, report = train(mc, tr, va, tc)
    save_checkpoint(params, run_dir / "best.ckpt", tc)
    te = make_windows(ds, L, H, subset="test")
    payload = json.loads(report.to_json())
    if te:
        tb = stack_windows(te)
        payload["test"] = metrics(predict_batched(params, tb), tb.y_future)
    (run_dir / "report.json").write_text(json.dumps(payload, indent=2))
    # same content minus wall-clock time, so reruns can be compared byte for byte
    stable = {k: v for k, v in payload.items() if k != "wall_clock_seconds"}
    (run_dir / "metrics.json").write_text(json.dumps(stable, indent=2, sort_keys=True))
    (run_dir / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2))
    print(f"best epoch {report.best_epoch}, valid MAE {report.best_valid_mae:.6g}; wrote {run_dir}")
    return EXIT_OK


def _load_model(args, cfg: RunConfig, ds):
    ckpt = Path(args.ckpt) if args.ckpt else cfg.run_dir / "best.ckpt"
    expected = cfg.model_config(ds).layout()
    params, _, _ = load_checkpoint(ckpt, layout=expected)
    return params, ckpt


def _origins(args, ds, layout) -> list[int]:
    if args.origins:
        origins = [int(o) for o in args.origins.split(",") if o.strip()]
        for o in origins:
            if o - layout.L + 1 < 0 or o + layout.H >= len(ds):
                raise UsageError(f"origin {o} is outside the data (need {layout.L - 1} <= origin <= {len(ds) - layout.H - 1})")
        return origins
    return [w.origin for w in make_windows(ds, layout.L, layout.H, subset="test")]


def cmd_forecast(args) -> int:
    cfg = _config(args)
    ds = cfg.load_dataset()
    params, ckpt = _load_model(args, cfg, ds)
    layout = params.layout
    origins = _origins(args, ds, layout)
    if not origins:
        raise UsageError("no forecast origins")
    batch = stack_windows([window_at(ds, o, layout.L, layout.H) for o in origins])
    out = forward(batch, layout, params, want_decomposition=args.explain or args.check_decomposition)
    out_path = Path(args.out) if args.out else ckpt.parent / "forecast.csv"
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["origin", "h", "y_hat", "y"])
        for i, o in enumerate(origins):
            for h in range(layout.H):
                w.writerow([o, h + 1, repr(float(out.y_hat[i, h])), repr(float(batch.y_future[i, h]))])
    print(f"wrote {len(origins) * layout.H} rows to {out_path}")
    dec = out.decomposition
    if args.check_decomposition:
        residual = dec.residual()
        print(f"decomposition max residual {residual:.3e}")
        if not residual <= 1e-6:
            print("decomposition check FAILED", file=sys.stderr)
            return EXIT_INTERNAL
    if args.explain:
        exp_dir = out_path.parent / "explanations"
        exp_dir.mkdir(exist_ok=True)
        locals_ = []
        for i, o in enumerate(origins):
            d = dec.window(i)
            loc = local_explain(d, layout)
            locals_.append(loc)
            for fmt in ("json", "csv"):
                export(variable_curves(d, layout), fmt, exp_dir / f"curves_{o}.{fmt}")
                export(loc, fmt, exp_dir / f"local_{o}.{fmt}")
        g = global_explain(locals_)
        for fmt in ("json", "csv"):
            export(g, fmt, exp_dir / f"global.{fmt}")
        print(f"wrote explanations for {len(origins)} windows to {exp_dir}")
    return EXIT_OK


def cmd_aopcr(args) -> int:
    cfg = _config(args)
    ds = cfg.load_dataset()
    params, ckpt = _load_model(args, cfg, ds)
    layout = params.layout
    K = [float(k) for k in args.k.split(",")] if args.k else cfg.aopcr.K
    n_seeds = args.seeds if args.seeds is not None else cfg.aopcr.n_seeds
    te = make_windows(ds, layout.L, layout.H, subset="test")
    if not te:
        raise DataError("test region holds no complete window")
    results = compare_strategies(params, te, layout, ds.variable_means("test"), K, n_seeds)
    out_path = Path(args.out) if args.out else ckpt.parent / "aopcr.csv"
    write_aopcr_csv(results, out_path)
    for r in results:
        print(r.strategy, " ".join(f"{k:g}:{s:.4f}" for k, s in zip(r.K, r.scores)))
    print(f"wrote {out_path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="patchdecomp", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic dataset CSV")
    p.add_argument("--config", help="take the generator settings from data.synth of this run config")
    p.add_argument("--seed", type=int)
    p.add_argument("--length", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train and write best.ckpt and report.json")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="run directory (default: output_dir of the config)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("forecast", help="predict from a checkpoint")
    p.add_argument("--config", required=True)
    p.add_argument("--ckpt")
    p.add_argument("--origins", help="comma-separated forecast origins (default: test windows)")
    p.add_argument("--out", help="predictions CSV path")
    p.add_argument("--explain", action="store_true", help="also export curves, local and global explanations")
    p.add_argument("--check-decomposition", action="store_true")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_forecast)

    p = sub.add_parser("aopcr", help="guided vs random patch-removal AOPCR")
    p.add_argument("--config", required=True)
    p.add_argument("--ckpt")
    p.add_argument("--k", help="comma-separated percentages")
    p.add_argument("--seeds", type=int)
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_aopcr)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (UsageError, *USER_ERRORS) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER
    except Exception as exc:  # noqa: BLE001
        logger.exception("internal error")
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
