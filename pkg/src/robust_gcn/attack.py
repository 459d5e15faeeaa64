"""Targeted evasion attacks on graph structure.

The model is frozen; only edges change. Three attacks are provided:

* :func:`enumerate_single_edge` tries every single edge incident to the
  target (all deletions, all injections) and reports which kinds flip it.
* :func:`greedy_direct_attack` repeatedly applies the incident edit that
  minimises the target's logit margin.
* :func:`greedy_indirect_attack` does the same with edits incident to the
  target's neighbours but never to the target itself.

Predictions under an edit depend only on the target's 2-hop receptive field,
so :class:`AttackEngine` keeps per-node layer-1 state for the current graph
and re-evaluates candidates locally. Batches of injections sharing one
endpoint are scored in closed form: for the weighted mean through the
degree-update algebra of ``1/sqrt(|N_u||N_v|)``, for order statistics
through "insert one value" window sums (inserting ``x`` into a sorted set
changes every window sum by a single clamp of ``x``).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .aggregators import AggregationKind, order_window
from .graph import FeatureMatrix, Graph
from .model import GcnModel, logit_margin

__all__ = [
    "AttackError",
    "EdgeEdit",
    "AttackOutcome",
    "SingleEdgeSummary",
    "AttackEngine",
    "apply_edits",
    "margin",
    "enumerate_single_edge",
    "greedy_direct_attack",
    "greedy_indirect_attack",
]

INJECT, DELETE = "inject", "delete"


class AttackError(ValueError):
    """Invalid edit or an attack with nothing to try."""


@dataclass(frozen=True, order=True)
class EdgeEdit:
    kind: str
    u: int
    v: int

    def __post_init__(self):
        kind = str(self.kind).lower()
        if kind not in (INJECT, DELETE):
            raise AttackError(f"unknown edit kind {self.kind!r}")
        u, v = int(self.u), int(self.v)
        if u == v:
            raise AttackError("self-loop edges are not editable")
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "u", min(u, v))
        object.__setattr__(self, "v", max(u, v))

    @property
    def pair(self) -> tuple[int, int]:
        return self.u, self.v

    def to_dict(self) -> dict:
        return {"kind": self.kind, "u": self.u, "v": self.v}

    @classmethod
    def from_dict(cls, d) -> "EdgeEdit":
        return cls(d["kind"], d["u"], d["v"])


@dataclass
class AttackOutcome:
    target: int
    original_class: int
    budget: int
    edits: list = field(default_factory=list)
    success: bool = False
    new_class: int = -1
    margin_trace: list = field(default_factory=list)

    def success_within(self, q: int) -> bool:
        """Whether the attack had already succeeded using at most ``q`` edits."""
        return self.success and len(self.edits) <= q

    def to_dict(self) -> dict:
        return {
            "target": self.target,
            "reference_class": self.original_class,
            "budget": self.budget,
            "edits": [e.to_dict() for e in self.edits],
            "success": self.success,
            "new_class": self.new_class,
        }


@dataclass(frozen=True)
class SingleEdgeSummary:
    target: int
    injection_success: bool
    deletion_success: bool
    degree: int
    purity: float

    @property
    def both_success(self) -> bool:
        return self.injection_success or self.deletion_success


def apply_edits(g: Graph, edits) -> Graph:
    """Return a new graph with ``edits`` applied in order."""
    edges = g.edge_set()
    for e in edits:
        e = e if isinstance(e, EdgeEdit) else EdgeEdit(*e)
        if not (0 <= e.u < g.num_nodes and 0 <= e.v < g.num_nodes):
            raise AttackError(f"edit {e} references a node outside the graph")
        if e.kind == INJECT:
            if e.pair in edges:
                raise AttackError(f"cannot inject existing edge {e.pair}")
            edges.add(e.pair)
        else:
            if e.pair not in edges:
                raise AttackError(f"cannot delete missing edge {e.pair}")
            edges.remove(e.pair)
    arr = np.array(sorted(edges), dtype=np.int64).reshape(-1, 2)
    return g.with_edges(arr)


def _relu(z):
    return np.maximum(z, 0.0)


class AttackEngine:
    """Mutable 2-hop evaluation state for one frozen model on one graph.

    ``apply`` edits the working graph and records an undo log; ``rollback``
    returns to the graph the engine was built with. The model's weights are
    copied on construction and never written.
    """

    chunk_elements = 1 << 22

    def __init__(self, model: GcnModel, graph: Graph, features: FeatureMatrix):
        if not graph.self_loops_included:
            raise AttackError("attack graph must include self-loops")
        if features.num_nodes != graph.num_nodes:
            raise AttackError("feature rows do not match graph nodes")
        self.kind: AggregationKind = model.aggregation
        self.W1 = np.array(model.W1, dtype=np.float64)
        self.W2 = np.array(model.W2, dtype=np.float64)
        self.n = graph.num_nodes
        self.X = features.dense()
        self.nbrs = [set(graph.neighbors(v).tolist()) for v in range(self.n)]
        self.deg = graph.degrees().astype(np.float64)
        self._undo: list = []
        if self.kind.name == "mean":
            self.P = self.X @ self.W1
            inv = 1.0 / np.sqrt(self.deg)
            self.S = graph.adjacency() @ (self.P * inv[:, None])
            self.Z1 = self.S * inv[:, None]
        else:
            # order statistics run over V: raw features, or projected ones
            self.transform_first = bool(model.config.transform_first)
            self.V = self.X @ self.W1 if self.transform_first else self.X
            f = self.V.shape[1]
            self.lo = np.empty((self.n, f))
            self.hi = np.empty((self.n, f))
            self.inner = np.empty((self.n, f))
            self.cnt = np.empty(self.n)
            a1 = np.empty((self.n, f))
            deg = graph.degrees()
            for d in np.unique(deg):
                rows = np.flatnonzero(deg == d)
                step = max(1, self.chunk_elements // int(d * f))
                for s in range(0, len(rows), step):
                    r = rows[s : s + step]
                    nb = graph.csr_targets[graph.csr_offsets[r][:, None] + np.arange(d)]
                    srt = np.sort(self.V[nb], axis=1)
                    a1[r] = self._window_mean(srt, int(d))
                    self._store_stats(r, srt, int(d))
            self.Z1 = self._post(a1)
        self.H1 = _relu(self.Z1)

    # ----------------------------------------------------------- helpers

    def neighbors(self, v: int) -> set:
        return self.nbrs[v]

    def _post(self, a):
        return a if self.transform_first else a @ self.W1

    def _window_mean(self, srt, d):
        lo, hi = order_window(self.kind, d)
        return srt[:, lo : hi + 1].mean(axis=1)

    def _store_stats(self, rows, srt, d):
        # window of the d+1 values obtained by inserting one more row
        a, b = order_window(self.kind, d + 1)
        k = len(rows)
        f = srt.shape[2]
        self.lo[rows] = srt[:, a - 1] if a >= 1 else np.full((k, f), -np.inf)
        self.hi[rows] = srt[:, b] if b <= d - 1 else np.full((k, f), np.inf)
        self.inner[rows] = srt[:, a:b].sum(axis=1)
        self.cnt[rows] = b - a + 1

    def _insert_one(self, node_rows, x):
        """Window mean of ``N_j + {x}`` for node rows ``j`` (broadcast over x)."""
        return (self.inner[node_rows] + np.clip(x, self.lo[node_rows], self.hi[node_rows])) \
            / np.atleast_1d(self.cnt[node_rows])[..., None]

    def _refresh(self, nodes):
        for j in nodes:
            idx = np.fromiter(sorted(self.nbrs[j]), dtype=np.int64)
            if self.kind.name == "mean":
                self.S[j] = (self.P[idx] / np.sqrt(self.deg[idx])[:, None]).sum(axis=0)
                self.Z1[j] = self.S[j] / np.sqrt(self.deg[j])
            else:
                srt = np.sort(self.V[idx], axis=0)[None]
                d = len(idx)
                self.Z1[j] = self._post(self._window_mean(srt, d)[0])
                self._store_stats(np.array([j]), srt, d)
            self.H1[j] = _relu(self.Z1[j])

    def _snapshot(self, nodes):
        rows = {}
        for j in nodes:
            rec = {"nbrs": set(self.nbrs[j]), "deg": self.deg[j], "Z1": self.Z1[j].copy(),
                   "H1": self.H1[j].copy()}
            if self.kind.name == "mean":
                rec["S"] = self.S[j].copy()
            else:
                rec.update(lo=self.lo[j].copy(), hi=self.hi[j].copy(),
                           inner=self.inner[j].copy(), cnt=self.cnt[j])
            rows[j] = rec
        return rows

    def _affected(self, u, v):
        if self.kind.name == "mean":
            return {u, v} | self.nbrs[u] | self.nbrs[v]
        return {u, v}

    def apply(self, edit: EdgeEdit) -> None:
        u, v = edit.u, edit.v
        present = v in self.nbrs[u]
        if edit.kind == INJECT and present:
            raise AttackError(f"cannot inject existing edge {edit.pair}")
        if edit.kind == DELETE and not present:
            raise AttackError(f"cannot delete missing edge {edit.pair}")
        before = self._affected(u, v)
        if edit.kind == INJECT:
            self.nbrs[u].add(v)
            self.nbrs[v].add(u)
        else:
            self.nbrs[u].discard(v)
            self.nbrs[v].discard(u)
        # snapshot taken after the toggle is undone by restoring the sets below
        affected = before | self._affected(u, v)
        snap = self._snapshot(affected)
        for j in (u, v):
            snap[j]["nbrs"] = set(self.nbrs[j]) ^ {v if j == u else u}
            snap[j]["deg"] = float(len(snap[j]["nbrs"]))
        self._undo.append(snap)
        self.deg[u] = len(self.nbrs[u])
        self.deg[v] = len(self.nbrs[v])
        self._refresh(sorted(affected))

    def rollback(self) -> None:
        while self._undo:
            snap = self._undo.pop()
            for j, rec in snap.items():
                self.nbrs[j] = rec["nbrs"]
                self.deg[j] = rec["deg"]
                self.Z1[j] = rec["Z1"]
                self.H1[j] = rec["H1"]
                if self.kind.name == "mean":
                    self.S[j] = rec["S"]
                else:
                    self.lo[j], self.hi[j] = rec["lo"], rec["hi"]
                    self.inner[j], self.cnt[j] = rec["inner"], rec["cnt"]

    def current_edges(self) -> np.ndarray:
        pairs = [(u, v) for u in range(self.n) for v in sorted(self.nbrs[u]) if u < v]
        return np.array(pairs, dtype=np.int64).reshape(-1, 2)

    # ----------------------------------------------------- exact local path

    def _layer2(self, rows, weights=None):
        if self.kind.name == "mean":
            return (weights @ rows) @ self.W2
        srt = np.sort(rows, axis=0)
        lo, hi = order_window(self.kind, rows.shape[0])
        return srt[lo : hi + 1].mean(axis=0) @ self.W2

    def local_logits(self, t: int, toggles=()) -> np.ndarray:
        """Exact logits of ``t`` after flipping the given node pairs."""
        over: dict[int, set] = {}
        for u, v in toggles:
            for a, b in ((u, v), (v, u)):
                s = over.get(a)
                if s is None:
                    s = over[a] = set(self.nbrs[a])
                s ^= {b}
        nb = lambda j: over.get(j, self.nbrs[j])  # noqa: E731
        touched = set(over)
        members = sorted(nb(t))
        if self.kind.name == "mean":
            rows = np.empty((len(members), self.W1.shape[1]))
            w = np.empty(len(members))
            for i, j in enumerate(members):
                nj = nb(j)
                if j in touched or not touched.isdisjoint(nj):
                    idx = sorted(nj)
                    dk = np.array([len(nb(k)) for k in idx], dtype=np.float64)
                    z = (self.P[idx] / np.sqrt(dk)[:, None]).sum(axis=0) / np.sqrt(len(nj))
                    rows[i] = _relu(z)
                else:
                    rows[i] = self.H1[j]
                w[i] = 1.0 / np.sqrt(len(nj) * len(members))
            return self._layer2(rows, w)
        rows = np.empty((len(members), self.W1.shape[1]))
        for i, j in enumerate(members):
            if j in touched:
                idx = sorted(nb(j))
                srt = np.sort(self.V[idx], axis=0)[None]
                rows[i] = _relu(self._post(self._window_mean(srt, len(idx))[0]))
            else:
                rows[i] = self.H1[j]
        return self._layer2(rows)

    # --------------------------------------------------- batched injections

    def _window_rows(self, fixed, extra):
        """Order-window mean over ``fixed`` rows plus per-candidate ``extra`` rows."""
        k, r = fixed.shape[0], extra.shape[1]
        h = fixed.shape[1]
        lo, hi = order_window(self.kind, k + r)
        out = np.empty((extra.shape[0], h))
        step = max(1, self.chunk_elements // ((k + r) * h))
        for s in range(0, extra.shape[0], step):
            e = extra[s : s + step]
            block = np.concatenate([np.broadcast_to(fixed, (len(e), k, h)), e], axis=1)
            block.sort(axis=1)
            out[s : s + step] = block[:, lo : hi + 1].mean(axis=1)
        return out

    def _pair_corrections(self, rows, zrow, cand, pos, total):
        # rows adjacent to a candidate b see b's degree grow by one
        jj, bb = [], []
        for j in rows:
            nb = np.fromiter(self.nbrs[j], dtype=np.int64)
            nb = nb[(nb != j) & (pos[nb] >= 0)]
            jj.append(np.full(len(nb), j))
            bb.append(nb)
        if not jj:
            return
        jj, bb = np.concatenate(jj), np.concatenate(bb)
        if jj.size == 0:
            return
        dj = np.sqrt(self.deg[jj])[:, None]
        db = self.deg[bb][:, None]
        delta = self.P[bb] * (1.0 / np.sqrt(db + 1) - 1.0 / np.sqrt(db)) / dj
        z = zrow[jj]
        corr = (_relu(z + delta) - _relu(z)) / dj
        np.add.at(total, pos[bb], corr)

    def scan_direct_injections(self, t: int, cand) -> np.ndarray:
        """Logits of ``t`` for each injection ``(t, b)``, ``b`` in ``cand``."""
        cand = np.asarray(cand, dtype=np.int64)
        if cand.size == 0:
            return np.empty((0, self.W2.shape[1]))
        rest = np.fromiter(sorted(self.nbrs[t] - {t}), dtype=np.int64)
        if self.kind.name == "mean":
            P, dt = self.P, self.deg[t]
            db = self.deg[cand][:, None]
            st = np.sqrt(dt + 1)
            z_t = (self.S[t] - P[t] / np.sqrt(dt) + P[t] / st + P[cand] / np.sqrt(db + 1)) / st
            z_b = (self.S[cand] - P[cand] / np.sqrt(db) + P[cand] / np.sqrt(db + 1)
                   + P[t] / st) / np.sqrt(db + 1)
            zrow = self.Z1.copy() if rest.size else self.Z1
            if rest.size:
                zrow[rest] += P[t] * (1.0 / st - 1.0 / np.sqrt(dt)) / np.sqrt(self.deg[rest])[:, None]
            base = (_relu(zrow[rest]) / np.sqrt(self.deg[rest])[:, None]).sum(axis=0)
            total = base + _relu(z_t) / st + _relu(z_b) / np.sqrt(db + 1)
            pos = np.full(self.n, -1)
            pos[cand] = np.arange(len(cand))
            self._pair_corrections(rest, zrow, cand, pos, total)
            return (total @ self.W2) / st
        v_t = _relu(self._post(self._insert_one(t, self.V[cand])))
        v_b = _relu(self._post(self._insert_one(cand, self.V[t][None, :])))
        extra = np.stack([v_t, v_b], axis=1)
        return self._window_rows(self.H1[rest], extra) @ self.W2

    def scan_indirect_injections(self, t: int, a: int, cand) -> np.ndarray:
        """Logits of ``t`` for injections ``(a, b)`` with ``a`` a neighbour of ``t``.

        Every ``b`` must lie outside ``N_t`` and ``N_a``.
        """
        cand = np.asarray(cand, dtype=np.int64)
        if cand.size == 0:
            return np.empty((0, self.W2.shape[1]))
        members = np.fromiter(sorted(self.nbrs[t]), dtype=np.int64)
        rest = members[members != a]
        if self.kind.name == "mean":
            P, da = self.P, self.deg[a]
            db = self.deg[cand][:, None]
            sa = np.sqrt(da + 1)
            z_a = (self.S[a] - P[a] / np.sqrt(da) + P[a] / sa + P[cand] / np.sqrt(db + 1)) / sa
            zrow = self.Z1.copy()
            adj = np.array([j for j in rest if a in self.nbrs[j]], dtype=np.int64)
            if adj.size:
                zrow[adj] += P[a] * (1.0 / sa - 1.0 / np.sqrt(da)) / np.sqrt(self.deg[adj])[:, None]
            base = (_relu(zrow[rest]) / np.sqrt(self.deg[rest])[:, None]).sum(axis=0)
            total = base + _relu(z_a) / sa
            pos = np.full(self.n, -1)
            pos[cand] = np.arange(len(cand))
            self._pair_corrections(rest, zrow, cand, pos, total)
            return (total @ self.W2) / np.sqrt(self.deg[t])
        v_a = _relu(self._post(self._insert_one(a, self.V[cand])))
        return self._window_rows(self.H1[rest], v_a[:, None, :]) @ self.W2


# ------------------------------------------------------------ candidates


def _reference(engine, t):
    return int(np.argmax(engine.local_logits(t)))


def _margins(logits, ref):
    logits = np.atleast_2d(logits)
    others = np.delete(logits, ref, axis=1)
    return logits[:, ref] - others.max(axis=1), np.argmax(logits, axis=1)


def _direct_batches(engine, t, used, limit=None):
    """Yield ``(kind, u_array, v_array, logits)`` batches for edits incident to ``t``."""
    nb = engine.nbrs[t]
    mask = np.ones(engine.n, dtype=bool)
    mask[list(nb)] = False
    for p in used:
        if t in p:
            mask[p[0] + p[1] - t] = False
    inj = np.flatnonzero(mask)
    if limit is not None and len(inj) > limit:
        dist = np.linalg.norm(engine.X[inj] - engine.X[t], axis=1)
        inj = np.sort(inj[np.argsort(-dist, kind="stable")[:limit]])
    if inj.size:
        yield INJECT, np.full(len(inj), t), inj, engine.scan_direct_injections(t, inj)
    dels = [b for b in sorted(nb - {t}) if (min(t, b), max(t, b)) not in used]
    if dels:
        logits = np.stack([engine.local_logits(t, [(t, b)]) for b in dels])
        yield DELETE, np.full(len(dels), t), np.array(dels), logits


def _indirect_batches(engine, t, used):
    members = engine.nbrs[t]
    anchors = sorted(members - {t})
    inner_inj, dels = [], []
    for a in anchors:
        na = engine.nbrs[a]
        mask = np.ones(engine.n, dtype=bool)
        mask[list(na | members)] = False
        for p in used:
            if a in p:
                mask[p[0] + p[1] - a] = False
        far = np.flatnonzero(mask)
        if far.size:
            yield INJECT, np.full(len(far), a), far, engine.scan_indirect_injections(t, a, far)
        for b in anchors:
            if b > a and b not in na and (a, b) not in used:
                inner_inj.append((a, b))
        for b in sorted(na - {a, t}):
            pair = (min(a, b), max(a, b))
            if pair in used or (b in members and b < a):
                continue
            dels.append(pair)
    if inner_inj:
        logits = np.stack([engine.local_logits(t, [p]) for p in inner_inj])
        arr = np.array(inner_inj)
        yield INJECT, arr[:, 0], arr[:, 1], logits
    if dels:
        logits = np.stack([engine.local_logits(t, [p]) for p in dels])
        arr = np.array(dels)
        yield DELETE, arr[:, 0], arr[:, 1], logits


def _best(batches, ref):
    """Pick the margin-minimising edit; ties prefer flips, injections, low ids."""
    best_key, best = None, None
    for kind, us, vs, logits in batches:
        marg, pred = _margins(logits, ref)
        lo = np.minimum(us, vs)
        hi = np.maximum(us, vs)
        flipped = (pred != ref).astype(np.int64)
        order = np.lexsort((hi, lo, -flipped, marg))
        i = order[0]
        key = (marg[i], -flipped[i], 0 if kind == INJECT else 1, lo[i], hi[i])
        if best_key is None or key < best_key:
            best_key = key
            best = (EdgeEdit(kind, int(lo[i]), int(hi[i])), float(marg[i]), int(pred[i]))
    return best


def _greedy(engine, t, budget, batch_fn, reference=None):
    if budget < 1:
        raise AttackError("budget must be >= 1")
    ref = _reference(engine, t) if reference is None else int(reference)
    outcome = AttackOutcome(target=t, original_class=ref, budget=budget, new_class=ref)
    used: set = set()
    try:
        for step in range(budget):
            pick = _best(batch_fn(engine, t, used), ref)
            if pick is None:
                if step == 0:
                    raise AttackError(f"no candidate edits for target {t}")
                break
            edit, marg, pred = pick
            engine.apply(edit)
            used.add(edit.pair)
            outcome.edits.append(edit)
            outcome.margin_trace.append(marg)
            outcome.new_class = pred
            if pred != ref:
                outcome.success = True
                break
    finally:
        engine.rollback()
    return outcome


def _engine(model, g, x, engine):
    if engine is None:
        return AttackEngine(model, g, x)
    return engine


def _check_target(engine, target):
    if not 0 <= int(target) < engine.n:
        raise AttackError(f"target {target} not in graph")
    return int(target)


def margin(m: GcnModel, g: Graph, x: FeatureMatrix, target: int, reference: int | None = None,
           engine: AttackEngine | None = None) -> float:
    """``logit[reference] - max`` over other classes; reference defaults to the prediction."""
    engine = _engine(m, g, x, engine)
    t = _check_target(engine, target)
    row = engine.local_logits(t)
    ref = int(np.argmax(row)) if reference is None else int(reference)
    return logit_margin(row, ref)


def enumerate_single_edge(m: GcnModel, g: Graph, x: FeatureMatrix, target: int,
                          engine: AttackEngine | None = None, candidate_limit: int | None = None,
                          degree: int | None = None, purity: float = float("nan")) -> SingleEdgeSummary:
    """Exhaustive budget-1 direct attack against the clean prediction of ``target``.

    ``candidate_limit`` restricts injections to that many nodes with the most
    distant features; the default tries every non-neighbour.
    """
    engine = _engine(m, g, x, engine)
    t = _check_target(engine, target)
    ref = _reference(engine, t)
    flags = {INJECT: False, DELETE: False}
    for kind, _, _, logits in _direct_batches(engine, t, set(), candidate_limit):
        _, pred = _margins(logits, ref)
        flags[kind] = flags[kind] or bool(np.any(pred != ref))
    deg = len(engine.nbrs[t]) if degree is None else degree
    return SingleEdgeSummary(t, flags[INJECT], flags[DELETE], int(deg), float(purity))


def greedy_direct_attack(m: GcnModel, g: Graph, x: FeatureMatrix, target: int, budget: int,
                         engine: AttackEngine | None = None, reference: int | None = None
                         ) -> AttackOutcome:
    """Greedy margin-minimising attack with edits incident to ``target``."""
    engine = _engine(m, g, x, engine)
    t = _check_target(engine, target)
    return _greedy(engine, t, budget, _direct_batches, reference)


def greedy_indirect_attack(m: GcnModel, g: Graph, x: FeatureMatrix, target: int, budget: int,
                           engine: AttackEngine | None = None, reference: int | None = None
                           ) -> AttackOutcome:
    """Greedy attack restricted to edits incident to neighbours of ``target``."""
    engine = _engine(m, g, x, engine)
    t = _check_target(engine, target)
    if not engine.nbrs[t] - {t}:
        raise AttackError(f"empty candidate set: target {t} has no neighbours")
    return _greedy(engine, t, budget, _indirect_batches, reference)
