"""Confusion metrics, comparison tables, ablations, window sweeps and embedding clusters."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, replace
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import cascade, grid

N_CLASSES = 3
NA = "NA"
ABLATION_CATEGORIES = ("weather", "spatial", "accident")
# always active during ablation: without them the windows carry no history
CONTEXT_CATEGORIES = ("temporal", "congestion")
METRICS_HEADER = ("model", "class", "precision", "recall", "n_true", "n_pred")


class EvalError(ValueError):
    pass


def confusion(truth, pred, n_classes: int = N_CLASSES) -> np.ndarray:
    """``M[i, j]`` counts samples of true class ``i`` predicted as ``j``."""
    t = np.asarray(truth, dtype=np.int64).ravel()
    p = np.asarray(pred, dtype=np.int64).ravel()
    if t.shape != p.shape:
        raise EvalError(f"truth has {t.size} entries, predictions {p.size}")
    if t.size and (t.min() < 0 or p.min() < 0 or t.max() >= n_classes or p.max() >= n_classes):
        raise EvalError(f"classes must lie in 0..{n_classes - 1}")
    return np.bincount(t * n_classes + p, minlength=n_classes * n_classes).reshape(n_classes, n_classes)


def precision_recall(M, i: int) -> tuple[Fraction | None, Fraction | None]:
    """Exact precision (column sum) and recall (row sum); ``None`` when the denominator is 0."""
    M = np.asarray(M)
    col, row = int(M[:, i].sum()), int(M[i, :].sum())
    hit = int(M[i, i])
    return (Fraction(hit, col) if col else None), (Fraction(hit, row) if row else None)


@dataclass(frozen=True)
class MetricRow:
    model: str
    cls: int
    precision: Fraction | None
    recall: Fraction | None
    n_true: int
    n_pred: int


def metrics_table(model: str, truth, pred) -> list[MetricRow]:
    M = confusion(truth, pred)
    rows = []
    for c in range(N_CLASSES):
        p, r = precision_recall(M, c)
        rows.append(MetricRow(model, c, p, r, int(M[c].sum()), int(M[:, c].sum())))
    return rows


def _fmt(x: Fraction | None) -> str:
    return NA if x is None else f"{float(x):.6f}"


def metrics_csv(rows: list[MetricRow]) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(METRICS_HEADER)
    for r in rows:
        wr.writerow([r.model, r.cls, _fmt(r.precision), _fmt(r.recall), r.n_true, r.n_pred])
    return buf.getvalue()


def write_metrics(path, rows: list[MetricRow]) -> Path:
    path = Path(path)
    path.write_text(metrics_csv(rows))
    return path


def headline(rows: list[MetricRow]) -> dict:
    """precision(0), recall(1), recall(2) as floats (None if undefined)."""
    by = {r.cls: r for r in rows}
    f = lambda x: None if x is None else float(x)  # noqa: E731
    return {"precision0": f(by[0].precision), "recall1": f(by[1].recall), "recall2": f(by[2].recall)}


# --------------------------------------------------------------------------
# ablation and window sweep
# --------------------------------------------------------------------------

def category_mask(pack: grid.Pack, categories) -> np.ndarray:
    cats = set(categories)
    if not cats:
        raise EvalError("ablation needs at least one feature category")
    unknown = cats - set(ABLATION_CATEGORIES)
    if unknown:
        raise EvalError(f"unknown categories {sorted(unknown)}; choose from {ABLATION_CATEGORIES}")
    mask = np.zeros(pack.n_features)
    for c in cats | set(CONTEXT_CATEGORIES):
        if c not in pack.categories:
            raise EvalError(f"pack manifest lacks category {c!r}")
        mask[pack.categories[c]] = 1.0
    return mask


def run_cascade(pack: grid.Pack, cfg: cascade.TrainConfig, mask=None, label: str = "cascade"):
    data = cascade.CascadeData.from_pack(pack, cfg.w, mask)
    model = cascade.train_cascade(data, cfg)
    rows = metrics_table(label, data.test.target_gamma, model.predict(data.test))
    return model, data, rows


def ablate(pack: grid.Pack, categories, cfg: cascade.TrainConfig) -> list[MetricRow]:
    """Retrain the cascade with only ``categories`` (plus context columns) active."""
    mask = category_mask(pack, categories)
    label = "+".join(c for c in ABLATION_CATEGORIES if c in set(categories))
    return run_cascade(pack, cfg, mask, label)[2]


@dataclass(frozen=True)
class SweepRow:
    w: int
    n_train: int
    n_test: int
    precision0: float | None
    recall1: float | None
    recall2: float | None


def window_sweep(pack: grid.Pack, ws, cfg: cascade.TrainConfig) -> list[SweepRow]:
    out = []
    for w in ws:
        if w < 1 or w >= pack.labels.shape[1]:
            raise EvalError(f"window {w} outside 1..{pack.labels.shape[1] - 1}")
        _, data, rows = run_cascade(pack, replace(cfg, w=int(w)), label=f"w={w}")
        h = headline(rows)
        out.append(SweepRow(int(w), len(data.train), len(data.test), h["precision0"], h["recall1"], h["recall2"]))
    return out


def sweep_csv(rows: list[SweepRow]) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(("w", "n_train", "n_test", "precision0", "recall1", "recall2"))
    for r in rows:
        wr.writerow([r.w, r.n_train, r.n_test] +
                    [NA if v is None else f"{v:.6f}" for v in (r.precision0, r.recall1, r.recall2)])
    return buf.getvalue()


# --------------------------------------------------------------------------
# k-means
# --------------------------------------------------------------------------

@dataclass
class KMeansResult:
    labels: np.ndarray
    centroids: np.ndarray
    inertia: list[float]
    iterations: int


def _sqdist(X, C):
    return ((X[:, None, :] - C[None, :, :]) ** 2).sum(axis=2)


def kmeans(X, k: int, seed: int = 0, max_iter: int = 100, tol: float = 1e-6) -> KMeansResult:
    """Lloyd iterations from a k-means++ start.

    ``inertia[i]`` is the objective after the i-th assignment step.
    """
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    if k < 1 or k > n:
        raise EvalError(f"k={k} must lie in 1..{n}")
    rng = cascade.stream(seed, "kmeans")
    C = np.empty((k, X.shape[1]))
    C[0] = X[rng.integers(n)]
    d2 = _sqdist(X, C[:1]).ravel()
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            # fewer distinct points than k: take any not yet chosen
            C[j] = X[rng.integers(n)]
        else:
            C[j] = X[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, _sqdist(X, C[j:j + 1]).ravel())
    inertia = []
    for it in range(1, max_iter + 1):
        D = _sqdist(X, C)
        labels = np.argmin(D, axis=1)
        inertia.append(float(D[np.arange(n), labels].sum()))
        new = C.copy()
        for j in range(k):
            members = X[labels == j]
            if members.size:
                new[j] = members.mean(axis=0)
        shift = float(np.sqrt(((new - C) ** 2).sum(axis=1)).max())
        C = new
        if shift <= tol:
            break
    D = _sqdist(X, C)
    labels = np.argmin(D, axis=1)
    return KMeansResult(labels, C, inertia, it)


def cluster_embeddings(model1: cascade.Model1, pack: grid.Pack, k: int = 4, seed: int = 0):
    """Cluster the learned zone embeddings; returns the result and export rows."""
    table = model1.embedding.params["table"]
    if table.shape[0] != len(pack.zones):
        raise EvalError(f"model has {table.shape[0]} zone embeddings, pack has {len(pack.zones)} zones")
    res = kmeans(table, k, seed)
    rows = []
    for i, z in enumerate(pack.zones):
        lat, lon = pack.spec.cell_center(z.row, z.col)
        rows.append((i, lat, lon, int(res.labels[i])))
    return res, rows


def write_clusters(directory, res: KMeansResult, rows) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / "clusters.csv", "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(("zone_index", "lat", "lon", "cluster"))
        for i, lat, lon, c in rows:
            wr.writerow([i, f"{lat:.6f}", f"{lon:.6f}", c])
    with open(directory / "centroids.csv", "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["cluster"] + [f"e{j}" for j in range(res.centroids.shape[1])])
        for j, c in enumerate(res.centroids):
            wr.writerow([j] + [f"{v:.9g}" for v in c])
    return directory
