"""Experiment orchestration: datasets, clean accuracy, attack campaigns and reports."""
from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .aggregators import AggregationKind
from .attack import (
    AttackEngine,
    AttackError,
    AttackOutcome,
    SingleEdgeSummary,
    enumerate_single_edge,
    greedy_direct_attack,
    greedy_indirect_attack,
)
from .graph import (
    FeatureMatrix,
    Graph,
    LabelVector,
    Split,
    add_self_loops,
    largest_connected_component,
    load_bundle,
    purity_all,
    random_split,
    row_normalize,
)
from .model import GcnConfig, GcnModel, forward, train

CSV_HEADER = "dataset,agg,mode,q1,q2,q3,q4,q5,metric"
MODES = ("direct", "indirect", "single-edge")
DECIMALS = 6


def _r(v):
    return None if v is None else round(float(v), DECIMALS)


# ------------------------------------------------------------------ data


@dataclass(frozen=True)
class Dataset:
    name: str
    graph: Graph  # LCC with self-loops
    features: FeatureMatrix
    labels: LabelVector
    split: Split
    feature_norm: bool

    @property
    def meta(self) -> dict:
        return {
            "name": self.name,
            "num_nodes": self.graph.num_nodes,
            "num_features": self.features.num_features,
            "num_classes": self.labels.num_classes,
        }


def prepare_dataset(path, feature_norm: bool = True, split_seed: int = 0) -> Dataset:
    """Load a bundle, keep its LCC, add self-loops and split 10/10/80.

    A split shipped with the bundle is used when it covers exactly the LCC
    nodes; otherwise a seeded random split is drawn.
    """
    path = Path(path)
    g, x, y, bundle_split = load_bundle(path)
    g, x, y, id_map = largest_connected_component(g, x, y)
    split = None
    if bundle_split is not None:
        remap = np.full(int(id_map.max()) + 1, -1, dtype=np.int64)
        remap[id_map] = np.arange(len(id_map))
        old = np.concatenate([bundle_split.train, bundle_split.val, bundle_split.test])
        inside = old < len(remap)
        if len(old) == g.num_nodes and inside.all() and np.all(remap[old] >= 0):
            split = Split(remap[bundle_split.train], remap[bundle_split.val],
                          remap[bundle_split.test], bundle_split.seed)
    if split is None:
        split = random_split(g.num_nodes, seed=split_seed)
    if feature_norm:
        x = row_normalize(x)
    name = path.name
    meta_file = path / "meta.json"
    if meta_file.exists():
        name = json.loads(meta_file.read_text(encoding="utf-8")).get("name", name)
    return Dataset(name, add_self_loops(g), x, y, split, feature_norm)


def clean_accuracy(m: GcnModel, g: Graph, x: FeatureMatrix, y: LabelVector, mask) -> float:
    mask = np.asarray(mask, dtype=np.int64).ravel()
    if mask.size == 0:
        raise ValueError("clean accuracy needs a non-empty mask")
    pred = np.argmax(forward(m, g, x), axis=1)
    return float(np.mean(pred[mask] == y.labels[mask]))


def sample_targets(pool, k: int | None = 1000, seed: int = 0) -> np.ndarray:
    """Sorted uniform sample without replacement of ``min(k, |pool|)`` nodes."""
    pool = np.asarray(pool, dtype=np.int64)
    if pool.size == 0:
        raise ValueError("empty target pool")
    if k is None or k >= pool.size:
        return np.sort(pool)
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(pool, size=int(k), replace=False))


def train_seeds(ds: Dataset, cfg: GcnConfig, seeds) -> list[GcnModel]:
    return [train(replace(cfg, seed=int(s)), ds.graph, ds.features, ds.labels, ds.split, ds.meta)[0]
            for s in seeds]


# --------------------------------------------------------------- reports


@dataclass
class RobustnessReport:
    dataset: str
    agg: str
    mode: str
    targets: int
    p: list
    seeds: list = field(default_factory=list)
    p_std: list | None = None
    metric_std: float | None = None
    clean_accuracy: float | None = None
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        self.p = [float(v) for v in self.p]
        if any(not 0.0 <= v <= 1.0 for v in self.p):
            raise ValueError("p entries must lie in [0, 1]")

    @property
    def metric(self) -> float:
        return robustness_metric(self.p)

    def to_dict(self) -> dict:
        return {
            "dataset": self.dataset,
            "agg": self.agg,
            "mode": self.mode,
            "targets": self.targets,
            "p": [_r(v) for v in self.p],
            "metric": _r(self.metric),
            "seeds": list(self.seeds),
            "p_std": None if self.p_std is None else [_r(v) for v in self.p_std],
            "metric_std": _r(self.metric_std),
            "clean_accuracy": _r(self.clean_accuracy),
            "config": self.config,
        }


def robustness_metric(p) -> float:
    """``sum_q q * p_q`` with ``q`` starting at 1."""
    return float(sum((q + 1) * float(v) for q, v in enumerate(p)))


def average_reports(reports) -> RobustnessReport:
    """Mean over seeds with sample standard deviations."""
    reports = list(reports)
    if not reports:
        raise ValueError("no reports to average")
    first = reports[0]
    P = np.array([r.p for r in reports])
    metrics = np.array([r.metric for r in reports])
    ddof = 1 if len(reports) > 1 else 0
    clean = [r.clean_accuracy for r in reports if r.clean_accuracy is not None]
    return RobustnessReport(
        dataset=first.dataset, agg=first.agg, mode=first.mode, targets=first.targets,
        p=P.mean(axis=0).tolist(), seeds=[s for r in reports for s in r.seeds],
        p_std=P.std(axis=0, ddof=ddof).tolist(), metric_std=float(metrics.std(ddof=ddof)),
        clean_accuracy=float(np.mean(clean)) if clean else None, config=first.config,
    )


def emit_report(report: RobustnessReport, path, fmt: str = "json") -> Path:
    path = Path(path)
    if fmt == "json":
        text = json.dumps(report.to_dict(), indent=2) + "\n"
    elif fmt == "csv":
        text = report_csv([report])
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    try:
        path.write_text(text, encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot write report to {path}: {exc}") from exc
    return path


def report_csv(reports) -> str:
    buf = io.StringIO()
    reports = list(reports)
    if reports:
        for k, v in reports[0].config.items():
            buf.write(f"# {k}={json.dumps(v)}\n")
    buf.write(CSV_HEADER + "\n")
    w = csv.writer(buf, lineterminator="\n")
    for r in reports:
        qs = [f"{v:.{DECIMALS}f}" for v in r.p] + [""] * (5 - len(r.p))
        w.writerow([r.dataset, r.agg, r.mode, *qs[:5], f"{r.metric:.{DECIMALS}f}"])
    return buf.getvalue()


class ReportError(ValueError):
    pass


def load_report(path) -> tuple[list[RobustnessReport], list[str]]:
    """Parse a JSON or CSV report; returns reports and metric-mismatch warnings.

    Stored metrics are never trusted: the metric is recomputed from ``p``.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ReportError(f"cannot read report {path}: {exc}") from exc
    warnings = []
    out = []
    try:
        if text.lstrip().startswith("{"):
            rows = [json.loads(text)]
            config = rows[0].get("config", {})
        else:
            config = {}
            lines = []
            for line in text.splitlines():
                if line.startswith("#"):
                    k, _, v = line[1:].strip().partition("=")
                    config[k] = json.loads(v)
                elif line.strip():
                    lines.append(line)
            if not lines or lines[0] != CSV_HEADER:
                raise ReportError(f"{path}: bad CSV header")
            rows = []
            for rec in csv.DictReader(lines):
                p = [float(rec[f"q{q}"]) for q in range(1, 6) if rec[f"q{q}"] != ""]
                rows.append({"dataset": rec["dataset"], "agg": rec["agg"], "mode": rec["mode"],
                             "p": p, "metric": float(rec["metric"]), "targets": 0})
        for d in rows:
            rep = RobustnessReport(
                dataset=d["dataset"], agg=d["agg"], mode=d["mode"], targets=int(d.get("targets", 0)),
                p=d["p"], seeds=d.get("seeds", []), p_std=d.get("p_std"),
                metric_std=d.get("metric_std"), clean_accuracy=d.get("clean_accuracy"), config=config,
            )
            stored = d.get("metric")
            if stored is not None and not math.isclose(stored, rep.metric, abs_tol=10 ** -DECIMALS * 20):
                warnings.append(f"{path}: stored metric {stored} differs from recomputed "
                                f"{rep.metric:.{DECIMALS}f}; using recomputed value")
            out.append(rep)
    except ReportError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ReportError(f"{path}: malformed report ({exc})") from exc
    return out, warnings


# ------------------------------------------------------------- campaigns

_WORKER: dict = {}


def _init_worker(model, graph, features, mode, budget, refs, candidate_limit):
    _WORKER.update(engine=AttackEngine(model, graph, features), model=model, graph=graph,
                   features=features, mode=mode, budget=budget, refs=refs,
                   candidate_limit=candidate_limit)


def _run_target(t):
    w = _WORKER
    if w["mode"] == "single-edge":
        return enumerate_single_edge(w["model"], w["graph"], w["features"], t, engine=w["engine"],
                                     candidate_limit=w["candidate_limit"])
    fn = greedy_direct_attack if w["mode"] == "direct" else greedy_indirect_attack
    ref = w["refs"].get(t)
    try:
        return fn(w["model"], w["graph"], w["features"], t, w["budget"], engine=w["engine"], reference=ref)
    except AttackError:
        # nothing to edit: the target cannot be attacked
        return AttackOutcome(target=int(t), original_class=ref, budget=w["budget"], new_class=ref)


def _run_chunk(ts):
    return [_run_target(int(t)) for t in ts]


def run_attacks(m: GcnModel, g: Graph, x: FeatureMatrix, targets, mode: str, budget: int = 5,
                jobs: int = 1, candidate_limit: int | None = None):
    """Attack every target independently; results are ordered by target id."""
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    targets = np.sort(np.asarray(targets, dtype=np.int64))
    if targets.size == 0:
        raise ValueError("empty target set")
    pred = np.argmax(forward(m, g, x), axis=1)
    refs = {int(t): int(pred[t]) for t in targets}
    args = (m, g, x, mode, budget, refs, candidate_limit)
    if jobs <= 1:
        _init_worker(*args)
        try:
            return _run_chunk(targets)
        finally:
            _WORKER.clear()
    chunks = np.array_split(targets, jobs * 4)
    with ProcessPoolExecutor(max_workers=jobs, initializer=_init_worker, initargs=args) as ex:
        parts = list(ex.map(_run_chunk, [c for c in chunks if c.size]))
    return [o for part in parts for o in part]


def campaign_p(outcomes, correct: dict, max_budget: int = 5) -> list[float]:
    """``p_q`` = share of targets correct on the clean graph and unbroken within ``q`` edits."""
    n = len(outcomes)
    return [sum(1 for o in outcomes if correct[o.target] and not o.success_within(q)) / n
            for q in range(1, max_budget + 1)]


def attack_campaign(m: GcnModel, ds: Dataset, targets, mode: str = "direct", max_budget: int = 5,
                    jobs: int = 1, seed: int | None = None, config: dict | None = None):
    """Run a greedy campaign at the largest budget and derive every smaller budget.

    Greedy edits are cumulative and stop at first success, so the outcome at
    budget ``q`` is the prefix of the budget-``max_budget`` run.
    """
    if mode not in ("direct", "indirect"):
        raise ValueError("campaign mode must be direct or indirect")
    outcomes = run_attacks(m, ds.graph, ds.features, targets, mode, max_budget, jobs)
    pred = np.argmax(forward(m, ds.graph, ds.features), axis=1)
    correct = {int(t): bool(pred[t] == ds.labels.labels[t]) for t in targets}
    report = RobustnessReport(
        dataset=ds.name, agg=str(m.aggregation), mode=mode, targets=len(outcomes),
        p=campaign_p(outcomes, correct, max_budget),
        seeds=[] if seed is None else [int(seed)],
        clean_accuracy=float(np.mean(list(correct.values()))), config=config or {},
    )
    return report, outcomes


# -------------------------------------------------------- categorization


@dataclass(frozen=True)
class CategorySummary:
    pct_injection: float
    pct_deletion: float
    pct_both: float
    violations: int
    nodes: list  # (target, degree, purity, injection_success, deletion_success)

    def to_dict(self) -> dict:
        return {
            "pct_injection": _r(self.pct_injection),
            "pct_deletion": _r(self.pct_deletion),
            "pct_both": _r(self.pct_both),
            "violations": self.violations,
            "targets": len(self.nodes),
        }

    def successful_nodes(self):
        """``(degree, purity)`` pairs of nodes broken by some single edge."""
        return [(d, p) for _, d, p, i, de in self.nodes if i or de]


def categorize_single_edge(summaries) -> CategorySummary:
    summaries = list(summaries)
    n = len(summaries)
    if n == 0:
        return CategorySummary(0.0, 0.0, 0.0, 0, [])
    inj = sum(s.injection_success for s in summaries)
    dele = sum(s.deletion_success for s in summaries)
    both = sum(s.both_success for s in summaries)
    viol = sum(s.deletion_success and not s.injection_success for s in summaries)
    nodes = [(s.target, s.degree, _r(s.purity), s.injection_success, s.deletion_success)
             for s in summaries]
    return CategorySummary(100.0 * inj / n, 100.0 * dele / n, 100.0 * both / n, viol, nodes)


def single_edge_campaign(m: GcnModel, ds: Dataset, targets=None, jobs: int = 1,
                         candidate_limit: int | None = None) -> list[SingleEdgeSummary]:
    targets = np.arange(ds.graph.num_nodes) if targets is None else targets
    raw = run_attacks(m, ds.graph, ds.features, targets, "single-edge", 1, jobs, candidate_limit)
    pur = purity_all(ds.graph, ds.labels)
    return [replace(s, purity=float(pur[s.target])) for s in raw]


def category_csv(cat: CategorySummary) -> str:
    """Plot-ready per-node table."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["target", "degree", "purity", "injection", "deletion", "both"])
    for t, d, p, i, de in cat.nodes:
        w.writerow([t, d, f"{p:.{DECIMALS}f}", int(i), int(de), int(i or de)])
    return buf.getvalue()


def aggregation_label(kind: AggregationKind) -> str:
    return str(kind)
