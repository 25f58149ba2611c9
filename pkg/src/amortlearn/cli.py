"""``amortlearn`` command line: training, evaluation, sampling and checks.

Exit codes: 0 success, 1 failed check (gradcheck or recipe trend), 2
config or compatibility error, 3 numeric failure. Relative output paths resolve against
``$AMORT_OUTPUT_ROOT`` (default: the working directory).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import yaml

from .checkpoint import CheckpointError
from .config import ConfigError, config_from_dict, load_config
from .experiment import CHECKPOINT_NAME, build_model, load_checkpoint_model, pipeline, run_eval, run_train
from .flow import integrate_samples, read_points_csv, samples_to_csv
from .gradcheck import TOLERANCE, run_gradcheck, run_meta_gradcheck
from .io_utils import atomic_write_text
from .metrics import write_csv
from .trainer import NumericFailure, bench_attention, default_output_root

EXIT_OK, EXIT_GRADCHECK, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3


def resolve(path: str | Path) -> Path:
    path = Path(path)
    return path if path.is_absolute() else default_output_root() / path


def _eval_override(cfg, path: str | None):
    """Replace ``cfg.eval`` (and optionally ``seed``) from a YAML file that
    holds an ``eval`` mapping."""
    if path is None:
        return cfg
    try:
        raw = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read eval config {path}: {exc}") from exc
    if not isinstance(raw, dict) or set(raw) - {"eval", "seed"}:
        raise ConfigError("eval config may only contain 'eval' and 'seed'")
    merged = cfg.to_dict()
    merged["eval"] = {**merged["eval"], **(raw.get("eval") or {})}
    if "seed" in raw:
        merged["seed"] = raw["seed"]
    new = config_from_dict(merged)
    ood = new.ood_family()
    if ood is not None:
        fam = new.family()
        if (ood.x_dim, ood.y_dim, ood.kind) != (fam.x_dim, fam.y_dim, fam.kind):
            raise ConfigError("eval.ood_task is incompatible with the trained model's input/output shape")
    return new


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    out_dir = resolve(args.output_dir or cfg.output_dir)
    trainer = run_train(cfg, out_dir, resume=not args.fresh, max_updates=args.max_updates)
    print(f"trained to update {trainer.update}; outputs in {out_dir}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg, model = load_checkpoint_model(args.checkpoint)
    cfg = _eval_override(cfg, args.eval_config)
    records = run_eval(cfg, model)
    out = resolve(args.out) if args.out else Path(args.checkpoint).parent / "eval.csv"
    write_csv(out, records)
    for r in records:
        print(f"{r.family:<12} k={r.steps:<3} {r.metric:<12} {r.mean:.4f} +- {r.se:.4f}{'  (ood)' if r.ood else ''}")
    print(f"wrote {out}")
    return EXIT_OK


def cmd_sample(args) -> int:
    cfg, model = load_checkpoint_model(args.checkpoint)
    if pipeline(cfg) != "flow":
        raise ConfigError("sample needs a generative (gmm/flow) checkpoint")
    if args.n < 0 or args.k < 1:
        raise ConfigError("need n >= 0 and k >= 1")
    context = read_points_csv(args.context)
    try:
        samples = integrate_samples(model, context, args.n, cfg.flow, args.k, batch_size=cfg.eval.batch_size or cfg.train.max_context, seed=args.seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    atomic_write_text(resolve(args.out), samples_to_csv(samples))
    print(f"wrote {len(samples)} samples to {resolve(args.out)}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    passed, report = run_gradcheck(seed=args.seed)
    if not args.ops_only:
        meta_ok, meta = run_meta_gradcheck(seed=args.seed)
        passed = passed and meta_ok
        report.update({f"meta_loss[{k}]": v for k, v in meta.items()})
    width = max(map(len, report))
    for name, err in report.items():
        print(f"{name:<{width}}  {err:.3e}  {'ok' if err < TOLERANCE else 'FAIL'}")
    print("gradcheck", "passed" if passed else "FAILED")
    return EXIT_OK if passed else EXIT_GRADCHECK


def cmd_bench(args) -> int:
    if args.config:
        cfg = load_config(args.config)
        if pipeline(cfg) != "amortizer":
            raise ConfigError("bench needs an amortizer config")
    else:
        cfg = config_from_dict(
            {
                "version": 1,
                "task": {"name": "linreg", "d": 16},
                "model": {"d_model": 32, "d_ffn": 64, "n_layers": 1, "masking_scheme": "non_causal"},
                "regime": {"regime": "parametric", "signal": "data"},
            }
        )
    rows = bench_attention(build_model(cfg), batches=args.batches, steps=args.steps)
    for r in rows:
        flag = "ok" if r["ratio"] <= r["bound"] else "over"
        print(f"B={r['B']:<3} K={r['K']:<2} iterative={r['iterative']:<8} single={r['single']:<8} ratio={r['ratio']:.4f} bound={r['bound']:.4f} {flag}")
    if args.out:
        atomic_write_text(resolve(args.out), json.dumps(rows, indent=2) + "\n")
    return EXIT_OK


def cmd_recipe(args) -> int:
    from .recipes import RECIPES, run_recipe

    if args.list or not args.name:
        for r in RECIPES.values():
            print(f"{r.name:<18} {r.runtime:<8} {r.expected}")
        return EXIT_OK
    if args.name not in RECIPES:
        raise ConfigError(f"unknown recipe {args.name!r}")
    res = run_recipe(args.name, resolve(args.output_dir or f"runs/{args.name}"), max_updates=args.max_updates)
    print(f"{res.name}: {'PASS' if res.passed else 'FAIL'} ({res.detail})")
    return EXIT_OK if res.passed else EXIT_GRADCHECK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="amortlearn", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train from a YAML config (resumes if a checkpoint exists)")
    p.add_argument("config")
    p.add_argument("--output-dir", help=f"overrides config output_dir; holds {CHECKPOINT_NAME} and metrics.jsonl")
    p.add_argument("--max-updates", type=int, help="stop after this many more updates")
    p.add_argument("--fresh", action="store_true", help="ignore an existing checkpoint")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint, write metrics CSV")
    p.add_argument("checkpoint")
    p.add_argument("--eval-config", help="YAML with an 'eval' mapping overriding the stored one")
    p.add_argument("--out", help="CSV path (default: eval.csv next to the checkpoint)")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("sample", help="draw samples from a generative checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--context", required=True, help="CSV of context points")
    p.add_argument("--n", type=int, default=128)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_sample)

    p = sub.add_parser("gradcheck", help="finite-difference check of every op")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ops-only", action="store_true", help="skip the end-to-end meta-loss checks")
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("bench", help="attention-pair accounting, iterative vs single pass")
    p.add_argument("--config")
    p.add_argument("--batches", type=int, nargs="+", default=[8, 16, 32])
    p.add_argument("--steps", type=int, nargs="+", default=[2, 4])
    p.add_argument("--out")
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("recipe", help="train + evaluate a packaged recipe and check its trend")
    p.add_argument("name", nargs="?")
    p.add_argument("--list", action="store_true")
    p.add_argument("--output-dir")
    p.add_argument("--max-updates", type=int)
    p.set_defaults(fn=cmd_recipe)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, CheckpointError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericFailure as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
