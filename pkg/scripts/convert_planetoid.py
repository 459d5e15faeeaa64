"""Convert raw citation datasets into bundle directories.

Supported inputs:

* LINQS-style Cora: ``cora.content`` + ``cora.cites``
* Planetoid pickles: ``ind.<name>.{x,tx,allx,y,ty,ally,graph,test.index}``

Both ship in the ``pgl`` source distribution on PyPI under ``pgl/data/``.
Edges are symmetrised, de-duplicated and stripped of self-loops; features
are written as raw (unnormalised) values.

    python scripts/convert_planetoid.py linqs  RAW/cora     data/cora
    python scripts/convert_planetoid.py planetoid RAW/citeseer citeseer data/citeseer
"""
import argparse
import pickle
import sys
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from robust_gcn.graph import FeatureMatrix, Graph, LabelVector, write_bundle


def _clean_edges(pairs):
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    pairs = pairs[pairs[:, 0] != pairs[:, 1]]
    pairs = np.unique(np.sort(pairs, axis=1), axis=0)
    return pairs


def convert_linqs(raw: Path, name: str):
    ids, rows, labels = {}, [], []
    classes = {}
    with open(raw / f"{name}.content", encoding="utf-8") as fh:
        for line in fh:
            parts = line.split()
            ids[parts[0]] = len(ids)
            rows.append([float(v) for v in parts[1:-1]])
            labels.append(classes.setdefault(parts[-1], len(classes)))
    # class ids follow sorted label names for a stable mapping
    names = sorted(classes)
    relabel = {classes[c]: i for i, c in enumerate(names)}
    labels = [relabel[c] for c in labels]
    pairs = []
    with open(raw / f"{name}.cites", encoding="utf-8") as fh:
        for line in fh:
            a, b = line.split()
            if a in ids and b in ids:
                pairs.append((ids[a], ids[b]))
    n = len(ids)
    x = FeatureMatrix(sp.csr_matrix(np.asarray(rows)))
    return Graph(n, _clean_edges(pairs)), x, LabelVector(labels, len(names))


def convert_planetoid(raw: Path, name: str):
    def load(part):
        with open(raw / f"ind.{name}.{part}", "rb") as fh:
            return pickle.load(fh, encoding="latin1")

    x, y, tx, ty, allx, ally, graph = (load(p) for p in ("x", "y", "tx", "ty", "allx", "ally", "graph"))
    test_idx = np.loadtxt(raw / f"ind.{name}.test.index", dtype=np.int64)
    test_range = np.sort(test_idx)
    if name == "citeseer":
        # some test ids are missing from the pickles; pad with empty rows
        full = np.arange(test_range.min(), test_range.max() + 1)
        tx_ext = sp.lil_matrix((len(full), x.shape[1]))
        tx_ext[test_range - test_range.min(), :] = tx
        tx = tx_ext
        ty_ext = np.zeros((len(full), y.shape[1]))
        ty_ext[test_range - test_range.min(), :] = ty
        ty = ty_ext
    feats = sp.vstack((allx, tx)).tolil()
    feats[test_idx, :] = feats[test_range, :]
    onehot = np.vstack((ally, ty))
    onehot[test_idx, :] = onehot[test_range, :]
    labels = onehot.argmax(axis=1)
    n = feats.shape[0]
    pairs = [(u, v) for u, vs in graph.items() for v in vs if u < n and v < n]
    return (
        Graph(n, _clean_edges(pairs)),
        FeatureMatrix(sp.csr_matrix(feats)),
        LabelVector(labels, onehot.shape[1]),
    )


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = ap.add_subparsers(dest="fmt", required=True)
    a = sub.add_parser("linqs")
    a.add_argument("raw", type=Path)
    a.add_argument("out", type=Path)
    a.add_argument("--name", default="cora")
    b = sub.add_parser("planetoid")
    b.add_argument("raw", type=Path)
    b.add_argument("name")
    b.add_argument("out", type=Path)
    args = ap.parse_args(argv)
    if args.fmt == "linqs":
        g, x, y = convert_linqs(args.raw, args.name)
    else:
        g, x, y = convert_planetoid(args.raw, args.name)
    write_bundle(args.out, args.name, g, x, y)
    print(f"{args.name}: {g.num_nodes} nodes, {g.num_edges} edges, "
          f"{x.num_features} features, {y.num_classes} classes -> {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
