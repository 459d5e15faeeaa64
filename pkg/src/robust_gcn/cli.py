"""Command-line entry point: ``robust-gcn {train,attack,breakdown,evaluate}``.

Exit codes: 0 ok, 2 configuration error, 3 data error, 4 numeric divergence.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .aggregators import (
    DEFAULT_SCHEDULE,
    AggregationInput,
    AggregationKind,
    empirical_breakdown,
    theoretical_breakdown,
)
from .graph import BundleError, GraphError
from .harness import (
    ReportError,
    attack_campaign,
    average_reports,
    categorize_single_edge,
    category_csv,
    emit_report,
    load_report,
    prepare_dataset,
    sample_targets,
    single_edge_campaign,
)
from .model import DivergenceError, GcnConfig, load_model, save_model, train
from .validation import check_alpha

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
DEFAULT_ALPHA = 0.45


class ConfigError(ValueError):
    pass


class DataError(ValueError):
    pass


def _aggregation(args) -> AggregationKind:
    alpha = args.alpha
    if args.agg in ("tmean", "trimmed_mean"):
        alpha = DEFAULT_ALPHA if alpha is None else alpha
    elif alpha is not None:
        raise ConfigError("--alpha only applies to --agg tmean")
    try:
        if alpha is not None:
            check_alpha(alpha)
        kind = AggregationKind.parse(args.agg, alpha)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    args.alpha = kind.alpha  # echo the resolved value
    return kind


def _budget(text: str) -> int:
    """``"1-5"`` or ``"3"``; campaigns always start at budget 1."""
    lo, _, hi = text.partition("-")
    try:
        lo_i, hi_i = int(lo), int(hi or lo)
    except ValueError:
        raise ConfigError(f"bad --budget {text!r}") from None
    if not (1 <= lo_i <= hi_i <= 5) or (hi and lo_i != 1):
        raise ConfigError(f"--budget must be N or 1-N with N in 1..5, got {text!r}")
    return hi_i


def _dataset(args):
    try:
        return prepare_dataset(args.data, feature_norm=not args.no_feature_norm,
                               split_seed=args.split_seed)
    except (BundleError, GraphError, OSError) as exc:
        raise DataError(str(exc)) from exc


def _echo(args) -> dict:
    out = {}
    for k, v in sorted(vars(args).items()):
        if k == "func":
            continue
        if isinstance(v, Path):
            v = str(v)
        elif isinstance(v, list):
            v = [str(i) if isinstance(i, Path) else i for i in v]
        out[k] = v
    return out


def _write(path: Path, text: str):
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc}") from exc


# -------------------------------------------------------------- commands


def cmd_train(args) -> int:
    kind = _aggregation(args)
    try:
        cfg = GcnConfig(hidden_units=args.hidden, learning_rate=args.lr, max_epochs=args.epochs,
                        patience=args.patience, aggregation=kind, seed=args.seed,
                        weight_decay=args.weight_decay, dropout=args.dropout,
                        transform_first=not args.aggregate_first)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    ds = _dataset(args)
    model, history = train(cfg, ds.graph, ds.features, ds.labels, ds.split, ds.meta)
    model.meta["run_config"] = _echo(args)
    out = Path(args.out)
    try:
        out.parent.mkdir(parents=True, exist_ok=True)
        save_model(model, out)
    except OSError as exc:
        raise DataError(f"cannot write {out}: {exc}") from exc
    hist = Path(args.history) if args.history else out.with_name(out.stem + ".history.json")
    doc = {"config": _echo(args), **history.to_dict()}
    _write(hist, json.dumps(doc, indent=2) + "\n")
    print(f"trained {kind} on {ds.name}: best epoch {history.best_epoch}, "
          f"val acc {max(history.val_accuracy):.4f} -> {out}")
    return EXIT_OK


def _load_models(paths):
    models = []
    for p in paths:
        try:
            models.append(load_model(p))
        except (OSError, ValueError, KeyError) as exc:
            raise DataError(f"cannot load model {p}: {exc}") from exc
    return models


def _targets(spec: str, pool, seed: int):
    if spec == "all":
        return np.sort(np.asarray(pool)), None
    try:
        k = int(spec)
    except ValueError:
        raise ConfigError(f"--targets must be 'all' or a count, got {spec!r}") from None
    if k < 1:
        raise ConfigError("--targets must be positive")
    return sample_targets(pool, k, seed), k


def cmd_attack(args) -> int:
    if args.jobs < 1:
        raise ConfigError("--jobs must be >= 1")
    budget = _budget(args.budget)
    models = _load_models(args.model)
    ds = _dataset(args)
    for m in models:
        if m.W1.shape[0] != ds.features.num_features or m.W2.shape[1] != ds.labels.num_classes:
            raise DataError("model shape does not match the dataset")
    config = _echo(args)
    out_dir = Path(args.out_dir)
    header = json.dumps({"config": config}, sort_keys=True)
    if args.mode == "single-edge":
        pool = np.arange(ds.graph.num_nodes)
        targets, _ = _targets(args.targets, pool, args.target_seed)
        summaries = []
        for i, m in enumerate(models):
            rows = single_edge_campaign(m, ds, targets, args.jobs, args.candidate_limit)
            summaries.append(categorize_single_edge(rows))
            lines = [header] + [json.dumps({
                "target": s.target, "injection_success": s.injection_success,
                "deletion_success": s.deletion_success, "both_success": s.both_success,
                "degree": s.degree, "purity": round(s.purity, 6)}) for s in rows]
            _write(out_dir / f"single_edge.{i}.jsonl", "\n".join(lines) + "\n")
            _write(out_dir / f"single_edge.{i}.csv",
                   "".join(f"# {k}={json.dumps(v)}\n" for k, v in config.items()) + category_csv(summaries[-1]))
        doc = {"config": config, "runs": [c.to_dict() for c in summaries]}
        if len(summaries) > 1:
            doc["mean"] = {k: round(float(np.mean([c.to_dict()[k] for c in summaries])), 6)
                           for k in ("pct_injection", "pct_deletion", "pct_both")}
        _write(out_dir / "single_edge_summary.json", json.dumps(doc, indent=2) + "\n")
        for c in summaries:
            print(f"injection {c.pct_injection:.2f}%  deletion {c.pct_deletion:.2f}%  "
                  f"both {c.pct_both:.2f}%  violations {c.violations}")
        return EXIT_OK
    targets, _ = _targets(args.targets, ds.split.test, args.target_seed)
    reports = []
    for i, m in enumerate(models):
        rep, outcomes = attack_campaign(m, ds, targets, args.mode, budget, args.jobs,
                                        seed=m.config.seed, config=config)
        reports.append(rep)
        lines = [header] + [json.dumps(o.to_dict()) for o in outcomes]
        _write(out_dir / f"outcomes.{i}.jsonl", "\n".join(lines) + "\n")
    final = average_reports(reports)
    emit_report(final, out_dir / "report.json", "json")
    emit_report(final, out_dir / "report.csv", "csv")
    print(f"{ds.name} {final.agg} {final.mode}: p={[round(v, 4) for v in final.p]} "
          f"metric={final.metric:.4f}")
    return EXIT_OK


def cmd_breakdown(args) -> int:
    kind = _aggregation(args)
    ns = args.n
    if any(n < 1 for n in ns):
        raise ConfigError("--n must be >= 1")
    rng = np.random.default_rng(args.seed)
    rows = []
    for n in ns:
        try:
            theory = theoretical_breakdown(kind, n)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        entry = {"agg": str(kind), "n": n, "theoretical": round(theory, 6)}
        if not args.no_empirical:
            clean = rng.standard_normal((n, args.dim))
            if kind.name == "tmean":
                rep = empirical_breakdown(kind, clean, DEFAULT_SCHEDULE, total_size=n)
            elif kind.name == "mean":
                rep = empirical_breakdown(kind, AggregationInput(clean, np.full(n, 1.0 / n)),
                                          DEFAULT_SCHEDULE)
            else:
                rep = empirical_breakdown(kind, clean, DEFAULT_SCHEDULE)
            entry["empirical"] = None if rep.empirical_fraction is None else round(rep.empirical_fraction, 6)
            entry["m_break"] = rep.m_break
        rows.append(entry)
    if args.json:
        print(json.dumps({"config": _echo(args), "rows": rows}, indent=2))
    else:
        print("agg\tn\ttheoretical\tempirical\tm_break")
        for r in rows:
            print(f"{r['agg']}\t{r['n']}\t{r['theoretical']:.6f}\t"
                  f"{'' if r.get('empirical') is None else format(r['empirical'], '.6f')}\t"
                  f"{'' if r.get('m_break') is None else r['m_break']}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    reports = []
    for p in args.reports:
        try:
            reps, warnings = load_report(p)
        except ReportError as exc:
            raise DataError(str(exc)) from exc
        for w in warnings:
            print(f"warning: {w}", file=sys.stderr)
        reports.extend(reps)
    reports.sort(key=lambda r: (-r.metric, r.dataset, r.agg, r.mode))
    print("dataset\tagg\tmode\t" + "\t".join(f"q{q}" for q in range(1, 6)) + "\tmetric")
    for r in reports:
        ps = [f"{v:.4f}" for v in r.p] + [""] * (5 - len(r.p))
        print(f"{r.dataset}\t{r.agg}\t{r.mode}\t" + "\t".join(ps) + f"\t{r.metric:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------- parser


def _add_data(p):
    p.add_argument("--data", type=Path, required=True, help="dataset bundle directory")
    p.add_argument("--split-seed", type=int, default=0, help="seed of the 10/10/80 split (default 0)")
    p.add_argument("--no-feature-norm", action="store_true",
                   help="keep raw features instead of L1 row normalisation")


def _add_agg(p):
    p.add_argument("--agg", default="mean", choices=["mean", "median", "tmean"],
                   help="aggregation function")
    p.add_argument("--alpha", type=float, default=None,
                   help=f"trimmed-mean fraction in (0, 0.5); default {DEFAULT_ALPHA} for tmean")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="robust-gcn", description="Robust-aggregation GCN experiments.")
    sub = ap.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a two-layer GCN",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    _add_data(t)
    _add_agg(t)
    t.add_argument("--seed", type=int, default=0, help="training seed")
    t.add_argument("--hidden", type=int, default=64, help="hidden units")
    t.add_argument("--lr", type=float, default=0.01, help="Adam learning rate")
    t.add_argument("--epochs", type=int, default=200, help="maximum epochs")
    t.add_argument("--patience", type=int, default=30, help="early-stopping patience")
    t.add_argument("--weight-decay", type=float, default=5e-4, help="L2 penalty on W1")
    t.add_argument("--dropout", type=float, default=0.5, help="dropout on hidden features")
    t.add_argument("--aggregate-first", action="store_true",
                   help="order-statistic layer 1 aggregates raw features before W1")
    t.add_argument("--out", type=Path, required=True, help="model JSON path")
    t.add_argument("--history", type=Path, default=None, help="history JSON path")
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("attack", help="attack a trained model",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    _add_data(a)
    a.add_argument("--model", type=Path, action="append", required=True,
                   help="model file; repeat to average over seeds")
    a.add_argument("--mode", choices=["direct", "indirect", "single-edge"], default="direct")
    a.add_argument("--budget", default="1-5", help="max edits, N or 1-N with N <= 5")
    a.add_argument("--targets", default="1000", help="'all' or number of sampled targets")
    a.add_argument("--target-seed", type=int, default=0, help="seed of the target sample")
    a.add_argument("--jobs", type=int, default=1, help="worker processes")
    a.add_argument("--candidate-limit", type=int, default=None,
                   help="single-edge: only try injections to the N most distant nodes")
    a.add_argument("--out-dir", type=Path, required=True, help="output directory")
    a.set_defaults(func=cmd_attack)

    b = sub.add_parser("breakdown", help="theoretical vs empirical breakdown points",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    _add_agg(b)
    b.add_argument("--n", type=int, nargs="+", required=True,
                   help="clean set size (mean, median) or total size (tmean)")
    b.add_argument("--dim", type=int, default=4, help="dimension of the random clean set")
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--no-empirical", action="store_true", help="theory only")
    b.add_argument("--json", action="store_true", help="print JSON instead of a table")
    b.set_defaults(func=cmd_breakdown)

    e = sub.add_parser("evaluate", help="tabulate robustness reports")
    e.add_argument("reports", nargs="+", type=Path, help="report JSON or CSV files")
    e.set_defaults(func=cmd_evaluate)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        print(f"error: numeric divergence: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
