"""``unlearn-forge`` command line.

Exit codes: 0 success, 1 usage error, 2 validation / data error,
3 numerical failure (divergence guard, non-finite gradients, gradcheck).
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import metrics as M
from .data import DataError, load_idk_pool, prepare_raw_corpus, write_synthetic
from .estimator import Bernoulli, EstimatorError, Gaussian, convergence_experiment, mean_abs_error, \
    write_convergence_csv
from .model import CheckpointError, ModelConfig, NonFiniteGradientError, load_checkpoint, save_checkpoint

log = logging.getLogger("unlearn_forge")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


# ---------------------------------------------------------------------------
# config flags, generated from the dataclasses so they stay one-to-one


def _flag(name, prefix=""):
    return "--" + (prefix + name).replace("_", "-")


def _add_field(group, f, prefix=""):
    dest = prefix.replace("-", "_") + f.name
    kw = dict(dest=dest, default=argparse.SUPPRESS)
    if f.type in ("bool", bool):
        group.add_argument(_flag(f.name, prefix), action=argparse.BooleanOptionalAction, **kw)
        return
    conv = {"int": int, "float": float}.get(str(f.type), str)
    if "float" in str(f.type) and "None" not in str(f.type):
        conv = float
    group.add_argument(_flag(f.name, prefix), type=conv, metavar=f.name.upper(), **kw)


def _add_config_flags(p):
    from .trainer import ExperimentConfig

    p.add_argument("--config", help="JSON file mirroring the experiment config")
    g = p.add_argument_group("experiment config (override --config)")
    for f in dataclasses.fields(ExperimentConfig):
        if f.name != "model":
            _add_field(g, f)
    g = p.add_argument_group("model config")
    for f in dataclasses.fields(ModelConfig):
        _add_field(g, f, "model-")


def _resolve_config(args):
    """Defaults < config file < command-line flags."""
    from .trainer import ExperimentConfig

    base = ExperimentConfig().to_dict()
    if getattr(args, "config", None):
        try:
            file_cfg = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(file_cfg, dict):
            raise DataError("config file must hold a JSON object")
        model = file_cfg.pop("model", {}) or {}
        unknown = set(file_cfg) - set(base)
        if unknown:
            raise DataError(f"unknown config keys: {sorted(unknown)}")
        base.update(file_cfg)
        base["model"].update(ModelConfig.from_dict({**base["model"], **model}).to_dict())
    given = vars(args)
    for f in dataclasses.fields(ExperimentConfig):
        if f.name != "model" and f.name in given:
            base[f.name] = given[f.name]
    for f in dataclasses.fields(ModelConfig):
        key = "model_" + f.name
        if key in given:
            base["model"][f.name] = given[key]
    if "divergence" in given and given["divergence"] in ("", "none"):
        base["divergence"] = None
    try:
        return ExperimentConfig.from_dict(base)
    except (ValueError, TypeError) as exc:
        raise DataError(f"invalid config: {exc}") from None


# ---------------------------------------------------------------------------
# subcommands


def _out_dir(args):
    return Path(args.out) if getattr(args, "out", None) else None


def _plan(args, steps):
    print(f"[dry-run] {args.command}")
    for s in steps:
        print(f"  - {s}")
    return EXIT_OK


def cmd_prepare_data(args):
    out = Path(args.out)
    if args.corpus == "synthetic":
        steps = [f"generate synthetic corpus (seed {args.seed})", f"write JSONL splits to {out}"]
    else:
        steps = [f"chunk {args.corpus}/forget.txt, retain.txt[, holdout.txt] into {args.max_tokens}-token pieces",
                 f"split each at prefix length {args.prefix_len}", f"write JSONL splits to {out}"]
    if args.dry_run:
        return _plan(args, steps)
    if args.prefix_len < 1 or args.max_tokens <= args.prefix_len:
        raise DataError("need 1 <= --prefix-len < --max-tokens")
    pool = load_idk_pool(args.idk_pool)
    if args.corpus == "synthetic":
        write_synthetic(out, seed=args.seed)
    else:
        prepare_raw_corpus(args.corpus, out, args.prefix_len, args.max_tokens, pool, args.seed)
    (out / "idk_pool.txt").write_text("\n".join(pool) + "\n", encoding="utf-8")
    print(f"wrote {', '.join(sorted(p.name for p in out.glob('*.jsonl')))} to {out}")
    return EXIT_OK


def _save_config(cfg, out):
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n",
                                     encoding="utf-8")


def cmd_train(args):
    from .trainer import resolve_corpus, train_original, train_retained

    cfg = _resolve_config(args)
    out = Path(args.out)
    if args.dry_run:
        return _plan(args, [f"corpus: {cfg.corpus}",
                            f"train original model on forget+retain ({cfg.train_epochs} epochs, lr {cfg.train_lr})",
                            "train retained model on retain only",
                            f"write original.ckpt, retained.ckpt, config.json to {out}"])
    corpus = resolve_corpus(cfg)
    out.mkdir(parents=True, exist_ok=True)
    ckpt_dir = out / "epochs" if args.save_every_epoch else None
    theta_o = train_original(cfg, corpus, ckpt_dir)
    save_checkpoint(theta_o, out / "original.ckpt")
    if not args.skip_retained:
        save_checkpoint(train_retained(cfg, corpus, ckpt_dir), out / "retained.ckpt")
    _save_config(cfg, out)
    print(f"trained {theta_o.num_parameters()} parameters; checkpoints in {out}")
    return EXIT_OK


def _load_ckpt(path, cfg):
    return load_checkpoint(path, cfg.model) if path else None


def cmd_unlearn(args):
    from .trainer import resolve_corpus, run_experiment

    cfg = _resolve_config(args)
    out = _out_dir(args)
    if args.dry_run:
        method, div = cfg.label
        return _plan(args, [f"corpus: {cfg.corpus}",
                            f"original model: {args.original or 'train from scratch'}",
                            f"retained model: {args.retained or 'train from scratch'}",
                            f"unlearn with {method}{'(' + div + ')' if div else ''} for {cfg.epochs} epochs, "
                            f"lr {cfg.lr}, seed {cfg.seed}",
                            f"write report.csv, report.md, unlearned.ckpt, config.json to {out}" if out
                            else "print the report (no --out given, nothing written)"])
    corpus = resolve_corpus(cfg)
    theta_o = _load_ckpt(args.original, cfg)
    theta_r = _load_ckpt(args.retained, cfg)
    _, rows = run_experiment(cfg, out, corpus, theta_o, theta_r)
    if out is not None:
        _save_config(cfg, out)
    print(M.markdown_table(rows))
    return EXIT_OK


def cmd_eval(args):
    from .trainer import _cache, evaluate, resolve_corpus

    cfg = _resolve_config(args)
    out = _out_dir(args)
    if args.dry_run:
        return _plan(args, [f"evaluate {args.checkpoint} on corpus {cfg.corpus}",
                            f"compare against {args.retained}" if args.retained else "no retained comparator",
                            f"write eval.csv to {out}" if out else "print the metrics"])
    corpus = resolve_corpus(cfg)
    theta = load_checkpoint(args.checkpoint, cfg.model)
    theta_r = _load_ckpt(args.retained, cfg)
    cache = _cache(evaluate(theta_r, corpus, cfg)) if theta_r is not None else None
    rep = evaluate(theta, corpus, cfg, theta_r, cache)
    rows = M.report_rows(args.label, "", rep)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        M.write_csv(rows, out / "eval.csv")
    print(M.markdown_table(rows))
    return EXIT_OK


_FAMILIES = {"bernoulli": Bernoulli, "gaussian": Gaussian}


def cmd_estimate(args):
    fam = _FAMILIES[args.family]
    if args.family == "bernoulli" and not all(0 < v < 1 for v in (args.param_e, args.param_f)):
        raise DataError("Bernoulli parameters must lie in (0, 1)")
    grid = [int(x) for x in args.n_grid.split(",")]
    if any(n < 4 for n in grid) or args.repeats < 1:
        raise DataError("--n-grid values must be >= 4 and --repeats >= 1")
    out = _out_dir(args)
    if args.dry_run:
        return _plan(args, [f"{args.divergence} between {args.family}({args.param_e}) and "
                            f"{args.family}({args.param_f})",
                            f"N in {grid}, {args.repeats} seeds from {args.seed}",
                            f"write convergence.csv to {out}" if out else "print the summary"])
    rows = convergence_experiment(args.divergence, fam(args.param_e), fam(args.param_f), grid,
                                  args.repeats, args.seed, hidden=args.hidden, steps=args.steps, lr=args.lr)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        write_convergence_csv(rows, out / "convergence.csv")
    oracle = rows[0][3]
    print(f"oracle {args.divergence} divergence: {oracle:.6f}")
    for n, err in mean_abs_error(rows).items():
        med = float(np.median([r[2] for r in rows if r[0] == n]))
        print(f"N={n:>7d}  median estimate {med:.6f}  mean |error| {err:.6f}")
    return EXIT_OK


def cmd_gradcheck(args):
    from .gradcheck import TOLERANCE, run_suite

    if args.dry_run:
        return _plan(args, [f"central differences for every loss at {args.precision} precision",
                            f"tolerance {TOLERANCE[args.precision]:g}",
                            "all coordinates" if args.coords_per_tensor is None
                            else f"{args.coords_per_tensor} coordinates per tensor"])
    results = run_suite(args.precision, args.coords_per_tensor, args.seed)
    bad = 0
    for r in results:
        status = "ok" if r.ok else "FAIL"
        bad += not r.ok
        print(f"{r.name:<14s} rel_error={r.rel_error:.3e} coords={r.n_coords:<6d} {status}")
    out = _out_dir(args)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "gradcheck.json").write_text(json.dumps(
            [dataclasses.asdict(r) | {"ok": r.ok} for r in results], indent=2) + "\n", encoding="utf-8")
    if bad:
        print(f"{bad} of {len(results)} gradient checks failed", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_report(args):
    out = _out_dir(args)
    if args.dry_run:
        return _plan(args, [f"read {', '.join(args.csv)}",
                            f"write report.md to {out}" if out else "print the table"])
    rows = []
    for path in args.csv:
        try:
            rows.extend(M.read_csv(path))
        except OSError as exc:
            raise DataError(f"cannot read {path}: {exc}") from None
    table = M.markdown_table(rows, args.digits)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.md").write_text(table, encoding="utf-8")
    print(table)
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="unlearn-forge", description="f-divergence unlearning experiments on a byte-level toy LM")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    def common(sp, out_required=False):
        sp.add_argument("--out", required=out_required, help="directory for all outputs")
        sp.add_argument("--dry-run", action="store_true", help="print the plan and touch nothing")

    sp = sub.add_parser("prepare-data", help="build JSONL splits")
    sp.add_argument("--corpus", required=True, help="'synthetic' or a directory holding forget.txt / retain.txt")
    sp.add_argument("--prefix-len", type=int, default=32)
    sp.add_argument("--max-tokens", type=int, default=128)
    sp.add_argument("--idk-pool", help="text file with one refusal phrase per line")
    sp.add_argument("--seed", type=int, default=0)
    common(sp, True)
    sp.set_defaults(fn=cmd_prepare_data)

    sp = sub.add_parser("train", help="train original and retained models")
    _add_config_flags(sp)
    sp.add_argument("--skip-retained", action="store_true")
    sp.add_argument("--save-every-epoch", action="store_true")
    common(sp, True)
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("unlearn", help="unlearn and write the metric report")
    _add_config_flags(sp)
    sp.add_argument("--original", help="original-model checkpoint (trained if omitted)")
    sp.add_argument("--retained", help="retained-model checkpoint (trained if omitted)")
    common(sp)
    sp.set_defaults(fn=cmd_unlearn)

    sp = sub.add_parser("eval", help="evaluate one checkpoint")
    _add_config_flags(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--retained")
    sp.add_argument("--label", default="model")
    common(sp)
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("estimate-divergence", help="variational estimator convergence run")
    sp.add_argument("--divergence", default="kl", choices=["tv", "js", "pearson", "kl"])
    sp.add_argument("--family", default="bernoulli", choices=sorted(_FAMILIES))
    sp.add_argument("--param-e", type=float, default=0.8)
    sp.add_argument("--param-f", type=float, default=0.2)
    sp.add_argument("--n-grid", default="200,2000,20000")
    sp.add_argument("--repeats", type=int, default=5)
    sp.add_argument("--hidden", type=int, default=16)
    sp.add_argument("--steps", type=int, default=400)
    sp.add_argument("--lr", type=float, default=0.03)
    sp.add_argument("--seed", type=int, default=0)
    common(sp)
    sp.set_defaults(fn=cmd_estimate)

    sp = sub.add_parser("gradcheck", help="finite-difference check of every loss")
    sp.add_argument("--precision", default="double", choices=["single", "double"])
    sp.add_argument("--coords-per-tensor", type=int, default=None,
                    help="sample this many coordinates per tensor (default: all)")
    sp.add_argument("--seed", type=int, default=0)
    common(sp)
    sp.set_defaults(fn=cmd_gradcheck)

    sp = sub.add_parser("report", help="render report CSVs as a markdown table")
    sp.add_argument("csv", nargs="+")
    sp.add_argument("--digits", type=int, default=4)
    common(sp)
    sp.set_defaults(fn=cmd_report)
    return p


def main(argv=None) -> int:
    from .trainer import DivergenceGuardError

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.fn(args)
    except (DataError, CheckpointError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (DivergenceGuardError, NonFiniteGradientError, EstimatorError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
