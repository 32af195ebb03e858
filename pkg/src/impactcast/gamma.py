"""Accident-impact target: delay regression on congestion, transferred to accidents.

Inputs are (severity, duration, distance) triples. Severity is one-hot
encoded over the categories seen at fit time; duration and distance are
min-max scaled with training-split bounds, as is the delay target. The
resulting gamma lives in that normalised delay scale.
"""
from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path

import numpy as np

from .nn import functional as F
from .nn.layers import Dense, Sequential, Tanh, collect
from .nn.optim import Adam
from .nn.serialize import load_weights, save_weights

log = logging.getLogger(__name__)

MLP_HIDDEN = (3, 3, 3, 3)
MLP_LR = 0.0008
MLP_EPOCHS = 200
MLP_BATCH = 32
TRAIN_FRACTION = 0.85
MIN_RECORDS = 100


class DegenerateDesign(ValueError):
    pass


class UnseenSeverity(UserWarning):
    pass


def _span(lo: float, hi: float) -> float:
    return hi - lo if hi > lo else 1.0


@dataclass
class GammaModel:
    kind: str
    severities: list[int]
    norm: dict[str, float]
    params: dict[str, np.ndarray] = field(default_factory=dict)
    loss_curve: list[float] = field(default_factory=list)

    # ---- encoding
    def design(self, severity, duration, distance) -> np.ndarray:
        severity = np.asarray(severity)
        cats = np.asarray(self.severities)
        known = np.isin(severity, cats)
        if not known.all():
            bad = sorted(set(severity[~known].tolist()))
            warnings.warn(f"unseen severity {bad}; mapped to nearest known category", UnseenSeverity)
            # nearest by ordinal distance, ties to the lower category
            severity = cats[np.abs(severity[:, None] - cats[None, :]).argmin(axis=1)]
        onehot = (severity[:, None] == cats[None, :]).astype(float)
        n = self.norm
        dur = (np.asarray(duration, float) - n["duration_min"]) / _span(n["duration_min"], n["duration_max"])
        dist = (np.asarray(distance, float) - n["distance_min"]) / _span(n["distance_min"], n["distance_max"])
        return np.column_stack([onehot, dur, dist])

    def scale_target(self, delay) -> np.ndarray:
        n = self.norm
        return (np.asarray(delay, float) - n["delay_min"]) / _span(n["delay_min"], n["delay_max"])

    # ---- evaluation
    def _mlp(self) -> Sequential:
        net = _build_mlp(len(self.severities) + 2, np.random.default_rng(0))
        params, _, _ = collect({"mlp": net})
        for k, v in params.items():
            v[...] = self.params[k]
        return net

    def predict(self, X: np.ndarray) -> np.ndarray:
        if self.kind == "linear":
            return X @ self.params["coef"]
        return self._mlp().forward(X)[:, 0]

    # ---- persistence
    def save(self, directory) -> Path:
        meta = {"kind": self.kind, "severities": self.severities, "normalization": self.norm,
                "input_layout": [f"severity_{s}" for s in self.severities] + ["duration", "distance"],
                "target": "min-max normalised delay", "loss_curve": self.loss_curve}
        if self.kind == "mlp":
            meta["hidden"] = list(MLP_HIDDEN)
            meta["activation"] = "tanh"
        return save_weights(directory, self.params, meta)

    @classmethod
    def load(cls, directory) -> "GammaModel":
        arrays, m = load_weights(directory)
        return cls(m["kind"], list(m["severities"]), dict(m["normalization"]), arrays, list(m.get("loss_curve", [])))


def _build_mlp(n_in: int, rng) -> Sequential:
    layers, width = [], n_in
    for h in MLP_HIDDEN:
        layers += [Dense(width, h, rng), Tanh()]
        width = h
    layers.append(Dense(width, 1, rng))
    return Sequential(layers)


def split_indices(n: int, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    perm = np.random.default_rng(seed).permutation(n)
    cut = int(round(fraction * n))
    return np.sort(perm[:cut]), np.sort(perm[cut:])


def fit_gamma(severity, duration, distance, delay, kind: str = "mlp", split: float = TRAIN_FRACTION,
              seed: int = 0, epochs: int = MLP_EPOCHS, lr: float = MLP_LR,
              batch_size: int = MLP_BATCH) -> tuple[GammaModel, dict[str, float]]:
    """Fit the delay function and score it on the held-out split.

    Returns the model and ``{"mse", "mae"}`` in normalised target units.
    """
    severity = np.asarray(severity)
    duration = np.asarray(duration, float)
    distance = np.asarray(distance, float)
    delay = np.asarray(delay, float)
    n = delay.shape[0]
    if n < MIN_RECORDS:
        raise ValueError(f"need at least {MIN_RECORDS} congestion records, got {n}")
    if kind not in ("linear", "mlp"):
        raise ValueError(f"unknown gamma model kind {kind!r}")
    tr, te = split_indices(n, split, seed)
    norm = {
        "duration_min": float(duration[tr].min()), "duration_max": float(duration[tr].max()),
        "distance_min": float(distance[tr].min()), "distance_max": float(distance[tr].max()),
        "delay_min": float(delay[tr].min()), "delay_max": float(delay[tr].max()),
    }
    model = GammaModel(kind, sorted({int(s) for s in severity[tr]}), norm)
    X = model.design(severity, duration, distance)
    y = model.scale_target(delay)

    if kind == "linear":
        Xt = X[tr]
        if np.linalg.matrix_rank(Xt) < Xt.shape[1]:
            raise DegenerateDesign("design matrix is rank deficient")
        coef, *_ = np.linalg.lstsq(Xt, y[tr], rcond=None)
        model.params = {"coef": coef}
    else:
        model.params, model.loss_curve = _train_mlp(X[tr], y[tr], seed, epochs, lr, batch_size)

    resid = model.predict(X[te]) - y[te]
    metrics = {"mse": float(np.mean(resid ** 2)), "mae": float(np.mean(np.abs(resid)))}
    log.info("gamma %s fit: held-out mse=%.6g mae=%.6g", kind, metrics["mse"], metrics["mae"])
    return model, metrics


def _train_mlp(X, y, seed, epochs, lr, batch_size):
    rng = np.random.default_rng([seed, 1])
    net = _build_mlp(X.shape[1], rng)
    opt = Adam(lr=lr)
    curve = []
    n = X.shape[0]
    for epoch in range(epochs):
        order = rng.permutation(n)
        for s in range(0, n, batch_size):
            idx = order[s:s + batch_size]
            pred = net.forward(X[idx], train=True)[:, 0]
            diff = pred - y[idx]
            net.backward((2.0 / idx.size) * diff[:, None])
            params, grads, _ = collect({"mlp": net})
            opt.step(params, grads)
        loss = float(np.mean((net.forward(X)[:, 0] - y) ** 2))
        if not np.isfinite(loss):
            raise F.NonFiniteError(f"non-finite training loss at epoch {epoch}")
        curve.append(loss)
    params, _, _ = collect({"mlp": net})
    return {k: v.copy() for k, v in params.items()}, curve


def apply_gamma(model: GammaModel, severity, duration, distance) -> np.ndarray:
    """Gamma (normalised predicted delay) for each accident triple."""
    out = model.predict(model.design(np.atleast_1d(severity), np.atleast_1d(duration), np.atleast_1d(distance)))
    if not np.all(np.isfinite(out)):
        raise F.NonFiniteError("non-finite gamma")
    return out


def classify_gamma(gammas, median: float) -> np.ndarray:
    """1 (medium) for gamma <= median, 2 (high) above it."""
    g = np.asarray(gammas, dtype=float)
    return np.where(g > median, 2, 1).astype(np.int64)


@dataclass
class AccidentLabels:
    ids: list[str]
    start_time: list[datetime]
    severity: np.ndarray
    duration: np.ndarray
    distance: np.ndarray
    gamma: np.ndarray
    gamma_class: np.ndarray
    in_train: np.ndarray
    median: float

    def class_by_id(self) -> dict[str, int]:
        return dict(zip(self.ids, self.gamma_class.tolist()))


def label_accidents(model: GammaModel, accidents, train_end: datetime | None = None) -> AccidentLabels:
    """Gamma and class for every accident; the median comes from training-period accidents only."""
    sev = np.array([a.severity for a in accidents])
    dur = np.array([a.duration for a in accidents], dtype=float)
    dist = np.array([a.distance for a in accidents], dtype=float)
    g = apply_gamma(model, sev, dur, dist) if accidents else np.zeros(0)
    in_train = np.array([train_end is None or a.start_time < train_end for a in accidents], dtype=bool)
    if not in_train.any():
        raise ValueError("no accidents in the training period to set the median")
    median = float(np.median(g[in_train]))
    return AccidentLabels([a.id for a in accidents], [a.start_time for a in accidents], sev, dur, dist,
                          g, classify_gamma(g, median), in_train, median)


LABEL_COLUMNS = ("ID", "Start_Time", "Severity", "Duration(min)", "Distance(mi)", "Gamma", "Gamma_Class", "Period")


def write_labels(path, labels: AccidentLabels) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(LABEL_COLUMNS)
        for i, aid in enumerate(labels.ids):
            w.writerow([aid, labels.start_time[i].isoformat(sep=" "), int(labels.severity[i]),
                        repr(float(labels.duration[i])), repr(float(labels.distance[i])),
                        repr(float(labels.gamma[i])), int(labels.gamma_class[i]),
                        "train" if labels.in_train[i] else "test"])


def read_labels(path) -> dict[str, np.ndarray]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return {
        "id": np.array([r["ID"] for r in rows], dtype=object),
        "duration": np.array([float(r["Duration(min)"]) for r in rows]),
        "gamma": np.array([float(r["Gamma"]) for r in rows]),
        "gamma_class": np.array([int(r["Gamma_Class"]) for r in rows], dtype=np.int64),
    }
