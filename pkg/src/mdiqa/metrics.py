"""SRCC / PLCC and the repeated 8:2 split evaluation protocol."""
from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Callable, Dict, Optional, Sequence

import numpy as np
from scipy.stats import rankdata


class MetricError(ValueError):
    pass


def _check_pair(pred, label):
    p = np.asarray(pred, dtype=np.float64).ravel()
    y = np.asarray(label, dtype=np.float64).ravel()
    if p.shape != y.shape:
        raise MetricError(f"length mismatch: {p.size} vs {y.size}")
    if p.size < 2:
        raise MetricError("need at least 2 values")
    if np.all(p == p[0]) or np.all(y == y[0]):
        raise MetricError("undefined correlation: constant input")
    return p, y


def _pearson(p, y):
    p = p - p.mean()
    y = y - y.mean()
    r = float((p @ y) / np.sqrt((p @ p) * (y @ y)))
    return max(-1.0, min(1.0, r))


def plcc(pred, label) -> float:
    return _pearson(*_check_pair(pred, label))


def srcc(pred, label) -> float:
    """Pearson correlation of average-tied ranks."""
    p, y = _check_pair(pred, label)
    return _pearson(rankdata(p, method="average"), rankdata(y, method="average"))


def split_indices(n: int, seed: int, train_fraction: float = 0.8):
    perm = np.random.default_rng(np.random.SeedSequence([int(seed), 808])).permutation(n)
    k = int(round(n * train_fraction))
    return np.sort(perm[:k]), np.sort(perm[k:])


def correlation_table(pred: np.ndarray, label: np.ndarray, mask: Optional[np.ndarray],
                      names: Sequence[str]) -> Dict[str, Dict[str, float]]:
    """SRCC/PLCC per column; columns with too few or constant labels get None."""
    out = {}
    for j, name in enumerate(names):
        m = np.ones(len(pred), bool) if mask is None else mask[:, j]
        try:
            out[name] = {"srcc": srcc(pred[m, j], label[m, j]), "plcc": plcc(pred[m, j], label[m, j])}
        except MetricError:
            out[name] = {"srcc": None, "plcc": None}
    return out


def evaluate(predict: Callable, dataset, names: Sequence[str], splits: int = 1, seed: int = 0,
             train_fn: Optional[Callable] = None, train_fraction: float = 0.8) -> dict:
    """Repeated random-split evaluation.

    ``dataset`` is ``(images, dim_labels, dim_mask, overall, overall_mask)`` arrays.
    ``predict(images) -> (dim_scores, overall)``. With ``train_fn(train_idx)``
    a fresh predictor is fitted per split and returned; otherwise the given
    predictor is scored on each split's test part. ``splits=1`` with no
    ``train_fn`` scores the whole set.
    """
    x, y, m, o, om = dataset
    n = len(x)
    if n == 0:
        raise MetricError("empty dataset")
    rows = []
    for k in range(splits):
        if splits == 1 and train_fn is None:
            test = np.arange(n)
            train = np.arange(0)
        else:
            train, test = split_indices(n, seed + k, train_fraction)
        pred_fn = train_fn(train) if train_fn is not None else predict
        ds, ov = pred_fn(x[test])
        row = {"split": k, "seed": seed + k, "n_train": int(len(train)), "n_test": int(len(test))}
        dims = correlation_table(np.asarray(ds), y[test], m[test], names)
        omask = om[test]
        try:
            row["overall"] = {"srcc": srcc(np.asarray(ov)[omask], o[test][omask]),
                              "plcc": plcc(np.asarray(ov)[omask], o[test][omask])}
        except MetricError:
            row["overall"] = {"srcc": None, "plcc": None}
        row["dims"] = dims
        rows.append(row)
    return {"names": list(names), "splits": rows, "mean": _mean_row(rows, names)}


def _mean(vals):
    vals = [v for v in vals if v is not None]
    return float(np.mean(vals)) if vals else None


def _mean_row(rows, names):
    mean = {"overall": {k: _mean([r["overall"][k] for r in rows]) for k in ("srcc", "plcc")}}
    mean["dims"] = {n: {k: _mean([r["dims"][n][k] for r in rows]) for k in ("srcc", "plcc")}
                    for n in names}
    return mean


def write_report(report: dict, out_dir) -> Dict[str, str]:
    """Write ``report.json`` and ``report.csv`` (one row per split plus ``mean``)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    jp, cp = out_dir / "report.json", out_dir / "report.csv"
    jp.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    names = report["names"]
    header = ["split", "overall_srcc", "overall_plcc"]
    for n in names:
        header += [f"{n}_srcc", f"{n}_plcc"]

    def fmt(v):
        return "" if v is None else f"{v:.6f}"

    with open(cp, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in report["splits"] + [dict(report["mean"], split="mean")]:
            row = [r["split"], fmt(r["overall"]["srcc"]), fmt(r["overall"]["plcc"])]
            for n in names:
                row += [fmt(r["dims"][n]["srcc"]), fmt(r["dims"][n]["plcc"])]
            w.writerow(row)
    return {"json": str(jp), "csv": str(cp)}
