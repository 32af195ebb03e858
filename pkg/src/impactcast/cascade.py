"""Two-stage accident-impact predictor.

Model 1 (zone embedding + stacked LSTM) decides whether the next interval
of a zone holds an accident. Model 2 (a small CNN over the ``1 x w x F``
window image) assigns the gamma class to windows Model 1 flags. Both
models standardise inputs with statistics fitted on the training period
and apply an optional feature mask used for ablations.
"""
from __future__ import annotations

import itertools
import json
import logging
import math
import warnings
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import evaluate as ev
from . import grid
from .nn import functional as F
from .nn.layers import (LSTM, BatchNorm, Conv2D, Dense, Dropout, Embedding, Flatten, MaxPool2D, ReLU,
                        Sequential, collect)
from .nn.optim import Adam
from .nn.serialize import load_weights, save_weights

log = logging.getLogger(__name__)

RUS_RATIO = 1.3


class CascadeError(ValueError):
    pass


class RusShortfall(UserWarning):
    pass


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------

@dataclass
class TrainConfig:
    w: int = 4
    epochs1: int = 150
    epochs2: int = 25
    batch_size: int = 128
    lr: float = 1e-3
    seed: int = 0
    rus_ratio: float = RUS_RATIO
    embed_dim: int = 20
    lstm_units: tuple[int, ...] = (12, 24)
    fc_units: tuple[int, ...] = (25, 25)
    keep_prob: float = 0.8
    class_weights1: tuple[float, float] = (1.0, 3.0)
    conv_filters: tuple[int, ...] = (32, 64, 64)
    kernel: tuple[int, int] = (1, 3)
    pool: tuple[int, int] = (1, 2)
    dense2: tuple[int, ...] = (64, 32)
    class_weights2: tuple[float, float, float] = (0.7, 4.5, 3.5)
    model2_pool: str = "model1"  # or "truth"
    baseline_epochs: int | None = None

    def __post_init__(self):
        for k in ("lstm_units", "fc_units", "class_weights1", "conv_filters", "kernel", "pool", "dense2",
                  "class_weights2"):
            setattr(self, k, tuple(getattr(self, k)))
        if self.w < 1:
            raise CascadeError("w must be at least 1")
        if self.model2_pool not in ("model1", "truth"):
            raise CascadeError(f"model2_pool must be 'model1' or 'truth', not {self.model2_pool!r}")

    def to_json(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    @classmethod
    def from_json(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise CascadeError(f"unknown train config keys {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        return cls.from_json(json.loads(Path(path).read_text()))


def derive_seed(seed: int, name: str) -> list[int]:
    return [int(seed), zlib.crc32(name.encode())]


def stream(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, name))


# --------------------------------------------------------------------------
# data
# --------------------------------------------------------------------------

@dataclass
class Standardizer:
    mean: np.ndarray
    std: np.ndarray
    mask: np.ndarray

    @classmethod
    def fit(cls, features: np.ndarray, train_end: int, mask=None) -> "Standardizer":
        flat = features[:, :train_end].reshape(-1, features.shape[2]).astype(np.float64)
        mean = flat.mean(axis=0)
        std = flat.std(axis=0)
        std[std == 0] = 1.0
        m = np.ones(features.shape[2]) if mask is None else np.asarray(mask, dtype=np.float64)
        return cls(mean, std, m)

    def __call__(self, seq: np.ndarray) -> np.ndarray:
        return ((seq - self.mean) / self.std) * self.mask


@dataclass
class CascadeData:
    """Windows of a pack split at the pack's training boundary."""

    windows: grid.WindowSet
    train: grid.WindowSet
    test: grid.WindowSet
    scaler: Standardizer
    n_zones: int

    @classmethod
    def from_pack(cls, pack: grid.Pack, w: int, mask=None) -> "CascadeData":
        ws = grid.build_windows(pack.features, pack.labels, w)
        train, test = grid.temporal_split(ws, pack.train_end)
        return cls(ws, train, test, Standardizer.fit(pack.features, pack.train_end, mask), len(pack.zones))


def rus(labels, ratio: float = RUS_RATIO, seed: int = 0) -> np.ndarray:
    """Indices kept by random under-sampling: all accidents plus ceil(n_acc * ratio) others.

    Returned sorted. When there are too few non-accident samples all are
    kept and :class:`RusShortfall` is warned.
    """
    y = np.asarray(labels)
    acc = np.flatnonzero(y != 0)
    non = np.flatnonzero(y == 0)
    if acc.size == 0 or non.size == 0:
        raise CascadeError("under-sampling needs both accident and non-accident samples")
    target = math.ceil(Fraction(repr(float(ratio))) * acc.size)
    if non.size < target:
        warnings.warn(f"only {non.size} non-accident samples for a target of {target}; keeping all", RusShortfall)
        chosen = non
    else:
        chosen = np.random.default_rng(derive_seed(seed, "rus")).choice(non, target, replace=False)
    return np.sort(np.concatenate([acc, chosen]))


# --------------------------------------------------------------------------
# networks
# --------------------------------------------------------------------------

class _Net:
    """Shared plumbing: parameter access, batched inference, persistence."""

    kind = ""
    n_out = 2

    def named_layers(self) -> dict:
        raise NotImplementedError

    def forward(self, zone, seq, train=False):
        raise NotImplementedError

    def backward(self, g):
        raise NotImplementedError

    def parameters(self):
        return collect(self.named_layers())

    def logits(self, ws: grid.WindowSet, chunk: int = 4096) -> np.ndarray:
        out = np.empty((len(ws), self.n_out))
        for s in range(0, len(ws), chunk):
            idx = np.arange(s, min(s + chunk, len(ws)))
            out[idx] = self.forward(ws.zone[idx], ws.sequences(idx), train=False)
        return out

    def predict(self, ws: grid.WindowSet) -> np.ndarray:
        return np.argmax(self.logits(ws), axis=1)

    def check_input(self, seq: np.ndarray) -> None:
        if seq.shape[1:] != (self.w, self.n_features):
            raise F.ShapeError(f"{self.kind} expects windows of shape ({self.w}, {self.n_features}), "
                               f"got {seq.shape[1:]}")

    def save(self, directory) -> Path:
        params, _, buffers = self.parameters()
        arrays = {**params, **buffers, "scaler.mean": self.scaler.mean, "scaler.std": self.scaler.std,
                  "scaler.mask": self.scaler.mask}
        meta = {"kind": self.kind, "config": self.config.to_json(), "n_features": self.n_features,
                "n_zones": self.n_zones, "w": self.w, "loss_curve": self.loss_curve}
        return save_weights(directory, arrays, meta)

    @staticmethod
    def load(directory) -> "_Net":
        arrays, m = load_weights(directory)
        cls = {"model1": Model1, "model2": Model2, "lstm_baseline": Model1, "cnn_baseline": Model2}[m["kind"]]
        cfg = TrainConfig.from_json(m["config"])
        scaler = Standardizer(arrays["scaler.mean"], arrays["scaler.std"], arrays["scaler.mask"])
        n_out = 2 if m["kind"] == "model1" else 3
        net = cls(m["n_zones"], m["n_features"], cfg, scaler, n_out=n_out)
        net.kind = m["kind"]
        params, _, buffers = net.parameters()
        for name, arr in {**params, **buffers}.items():
            if arrays[name].shape != arr.shape:
                raise F.ShapeError(f"{name}: stored {arrays[name].shape}, expected {arr.shape}")
            arr[...] = arrays[name]
        net.loss_curve = list(m.get("loss_curve", []))
        return net


class Model1(_Net):
    """Zone embedding + LSTM stack, concatenated into a dense classifier."""

    kind = "model1"

    def __init__(self, n_zones: int, n_features: int, config: TrainConfig, scaler: Standardizer,
                 n_out: int = 2, rng=None):
        rng = rng if rng is not None else stream(config.seed, f"{self.kind}/init")
        self.config, self.scaler = config, scaler
        self.n_zones, self.n_features, self.w, self.n_out = n_zones, n_features, config.w, n_out
        self.loss_curve: list[float] = []
        self.embedding = Embedding(n_zones, config.embed_dim, rng)
        self.lstms = []
        width = n_features
        for i, h in enumerate(config.lstm_units):
            self.lstms.append(LSTM(width, h, rng, return_sequences=i < len(config.lstm_units) - 1))
            width = h
        drop_rng = stream(config.seed, f"{self.kind}/dropout")
        layers, width = [], width + config.embed_dim
        for u in config.fc_units:
            layers += [Dense(width, u, rng), BatchNorm(u), ReLU(), Dropout(config.keep_prob, drop_rng)]
            width = u
        layers.append(Dense(width, n_out, rng))
        self.head = Sequential(layers)

    def named_layers(self):
        return {"embedding": self.embedding, **{f"lstm{i}": l for i, l in enumerate(self.lstms)},
                "head": self.head}

    def forward(self, zone, seq, train=False):
        self.check_input(seq)
        x = self.scaler(seq)
        for lstm in self.lstms:
            x = lstm.forward(x, train)
        e = self.embedding.forward(np.asarray(zone), train)
        self._split = x.shape[1]
        return self.head.forward(np.concatenate([x, e], axis=1), train)

    def backward(self, g):
        g = self.head.backward(g)
        self.embedding.backward(g[:, self._split:])
        g = g[:, :self._split]
        for lstm in reversed(self.lstms):
            g = lstm.backward(g)


class Model2(_Net):
    """Convolution/pooling stack over the window image, then dense layers."""

    kind = "model2"
    n_out = 3

    def __init__(self, n_zones: int, n_features: int, config: TrainConfig, scaler: Standardizer,
                 n_out: int = 3, rng=None):
        rng = rng if rng is not None else stream(config.seed, f"{self.kind}/init")
        self.config, self.scaler = config, scaler
        self.n_zones, self.n_features, self.w, self.n_out = n_zones, n_features, config.w, n_out
        self.loss_curve = []
        layers, c, h, wd = [], 1, config.w, n_features
        for f in config.conv_filters:
            if h < config.kernel[0] or wd < config.kernel[1]:
                raise CascadeError("window too small for the convolution stack")
            layers += [Conv2D(c, f, config.kernel, rng), ReLU(), MaxPool2D(config.pool, "floor")]
            c, h, wd = f, (h - config.kernel[0] + 1) // config.pool[0], (wd - config.kernel[1] + 1) // config.pool[1]
            if h < 1 or wd < 1:
                raise CascadeError("pooling collapses the feature map; use fewer conv layers")
        layers.append(Flatten())
        width = c * h * wd
        for u in config.dense2:
            layers += [Dense(width, u, rng), ReLU()]
            width = u
        layers.append(Dense(width, n_out, rng))
        self.net = Sequential(layers)

    def named_layers(self):
        return {"cnn": self.net}

    def forward(self, zone, seq, train=False):
        self.check_input(seq)
        x = self.scaler(seq)[:, None, :, :]
        return self.net.forward(x, train)

    def backward(self, g):
        self.net.backward(g)


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------

def _fit(net: _Net, ws: grid.WindowSet, targets: np.ndarray, class_weights, epochs: int, cfg: TrainConfig,
         name: str) -> list[float]:
    rng = stream(cfg.seed, f"{name}/batches")
    opt = Adam(lr=cfg.lr)
    n = len(ws)
    seqs = ws.sequences()
    curve = []
    batch_id = 0
    for epoch in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for s in range(0, n, cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            logits = net.forward(ws.zone[idx], seqs[idx], train=True)
            try:
                loss, grad = F.weighted_xent(logits, targets[idx], class_weights)
            except F.NonFiniteError:
                loss = math.nan
            if not np.isfinite(loss):
                raise F.NonFiniteError(f"{name}: non-finite loss at epoch {epoch}, batch {batch_id}")
            net.backward(grad)
            params, grads, _ = net.parameters()
            opt.step(params, grads)
            total += loss * idx.size
            batch_id += 1
        curve.append(total / n)
        log.debug("%s epoch %d loss %.6f", name, epoch, curve[-1])
    net.loss_curve = curve
    return curve


def train_model1(train: grid.WindowSet, data: CascadeData, cfg: TrainConfig, n_out: int = 2,
                 kind: str = "model1", epochs: int | None = None) -> Model1:
    """Fit Model 1 on (already balanced) windows; ``n_out=3`` gives the LSTM baseline."""
    net = Model1(data.n_zones, data.windows.features.shape[2], cfg, data.scaler, n_out,
                 rng=stream(cfg.seed, f"{kind}/init"))
    net.kind = kind
    if n_out == 2:
        targets, weights = train.target_label, cfg.class_weights1
    else:
        targets, weights = train.target_gamma, cfg.class_weights2
    _fit(net, train, targets, weights, cfg.epochs1 if epochs is None else epochs, cfg, kind)
    return net


def model2_pool(balanced: grid.WindowSet, model1: Model1 | None, cfg: TrainConfig) -> grid.WindowSet:
    if cfg.model2_pool == "truth":
        return balanced.subset(np.flatnonzero(balanced.target_label == 1))
    flagged = np.flatnonzero(model1.predict(balanced) == 1)
    return balanced.subset(flagged)


def train_model2(pool: grid.WindowSet, data: CascadeData, cfg: TrainConfig, kind: str = "model2",
                 epochs: int | None = None) -> Model2:
    present = set(np.unique(pool.target_gamma).tolist())
    required = {1, 2} if cfg.model2_pool == "truth" and kind == "model2" else {0, 1, 2}
    missing = required - present
    if missing:
        raise CascadeError(f"gamma classes {sorted(missing)} absent from the {kind} training pool "
                           f"({len(pool)} samples)")
    net = Model2(data.n_zones, data.windows.features.shape[2], cfg, data.scaler, 3,
                 rng=stream(cfg.seed, f"{kind}/init"))
    net.kind = kind
    _fit(net, pool, pool.target_gamma, cfg.class_weights2, cfg.epochs2 if epochs is None else epochs, cfg, kind)
    return net


@dataclass
class Cascade:
    model1: Model1
    model2: Model2
    balanced_size: int = 0
    pool_size: int = 0

    def predict(self, ws: grid.WindowSet) -> np.ndarray:
        if self.model1.n_features != self.model2.n_features or self.model1.w != self.model2.w:
            raise F.ShapeError("model 1 and model 2 disagree on window shape")
        out = np.zeros(len(ws), dtype=np.int64)
        flagged = np.flatnonzero(self.model1.predict(ws) == 1)
        if flagged.size:
            out[flagged] = self.model2.predict(ws.subset(flagged))
        return out


def train_cascade(data: CascadeData, cfg: TrainConfig) -> Cascade:
    keep = rus(data.train.target_label, cfg.rus_ratio, cfg.seed)
    balanced = data.train.subset(keep)
    log.info("RUS: %d of %d training windows kept (%d accident)", len(balanced), len(data.train),
             int(balanced.target_label.sum()))
    m1 = train_model1(balanced, data, cfg)
    pool = model2_pool(balanced, m1, cfg)
    log.info("model 2 pool: %d windows (%s source)", len(pool), cfg.model2_pool)
    m2 = train_model2(pool, data, cfg)
    return Cascade(m1, m2, len(balanced), len(pool))


def predict(sample: grid.WindowSample, model1: Model1, model2: Model2) -> int:
    """Gamma class of one window: Model 1 gates, Model 2 grades."""
    seq = np.asarray(sample.sequence, dtype=np.float64)[None]
    if seq.shape[1:] != (model1.w, model1.n_features) or seq.shape[1:] != (model2.w, model2.n_features):
        raise F.ShapeError(f"window shape {seq.shape[1:]} does not match the models")
    zone = np.array([sample.zone_index])
    if int(np.argmax(model1.forward(zone, seq)[0])) == 0:
        return 0
    return int(np.argmax(model2.forward(zone, seq)[0]))


def train_baselines(data: CascadeData, cfg: TrainConfig) -> dict[str, _Net]:
    """Single-step LSTM and CNN with a 3-way head, trained on the balanced windows."""
    balanced = data.train.subset(rus(data.train.target_label, cfg.rus_ratio, cfg.seed))
    lstm = train_model1(balanced, data, cfg, n_out=3, kind="lstm_baseline",
                        epochs=cfg.baseline_epochs or cfg.epochs1)
    cnn = train_model2(balanced, data, cfg, kind="cnn_baseline", epochs=cfg.baseline_epochs or cfg.epochs2)
    return {"lstm_baseline": lstm, "cnn_baseline": cnn}


# --------------------------------------------------------------------------
# grid search
# --------------------------------------------------------------------------

MODEL1_SPACE = {"lstm_layers": [1, 2, 3], "lstm_neurons": [12, 18, 24], "fc_layers": [1, 2],
                "fc_size": [12, 25, 50]}
MODEL2_SPACE = {"conv_layers": [1, 2, 3], "filters": [8, 16, 32, 64, 128]}


def _apply(base: TrainConfig, point: dict) -> TrainConfig:
    upd = {}
    rest = dict(point)
    if "lstm_layers" in rest or "lstm_neurons" in rest:
        n = rest.pop("lstm_layers", len(base.lstm_units))
        u = rest.pop("lstm_neurons", base.lstm_units[-1])
        upd["lstm_units"] = (u,) * n
    if "fc_layers" in rest or "fc_size" in rest:
        n = rest.pop("fc_layers", len(base.fc_units))
        u = rest.pop("fc_size", base.fc_units[-1])
        upd["fc_units"] = (u,) * n
    if "conv_layers" in rest or "filters" in rest:
        n = rest.pop("conv_layers", len(base.conv_filters))
        f = rest.pop("filters", base.conv_filters[-1])
        upd["conv_filters"] = (f,) * n
    upd.update(rest)
    return replace(base, **upd)


def expand_space(space: dict, base: TrainConfig) -> list[tuple[dict, TrainConfig]]:
    """Cartesian product in key order, then value order."""
    keys = list(space)
    return [(dict(zip(keys, vals)), _apply(base, dict(zip(keys, vals))))
            for vals in itertools.product(*(space[k] for k in keys))]


def selection_key(metrics: dict) -> tuple:
    """Lexicographic: recall(2), recall(1), precision(0); undefined ranks lowest."""
    def v(x):
        return -1.0 if x is None else float(x)
    return (v(metrics.get("recall2")), v(metrics.get("recall1")), v(metrics.get("precision0")))


@dataclass
class GridResult:
    best: TrainConfig
    best_point: dict
    table: list[dict] = field(default_factory=list)


def validation_split(train: grid.WindowSet, fraction: float = 0.8) -> tuple[grid.WindowSet, grid.WindowSet]:
    targets = np.unique(train.end + 1)
    boundary = targets[int(fraction * (targets.size - 1))] if targets.size else 0
    return grid.temporal_split(train, int(boundary))


def cascade_metrics(truth, pred) -> dict:
    M = ev.confusion(truth, pred)
    out = {}
    for c in range(3):
        p, r = ev.precision_recall(M, c)
        out[f"precision{c}"] = None if p is None else float(p)
        out[f"recall{c}"] = None if r is None else float(r)
    return out


def evaluate_config(args) -> dict:
    """Train on the fit split and score on the validation split (picklable for process pools)."""
    which, cfg, data, fit, val = args
    sub = CascadeData(data.windows, fit, val, data.scaler, data.n_zones)
    if which == "model1":
        balanced = fit.subset(rus(fit.target_label, cfg.rus_ratio, cfg.seed))
        m1 = train_model1(balanced, sub, cfg)
        # Model 1 alone: flagged windows count as correctly graded
        flag = m1.predict(val)
        pred = np.where(flag == 1, np.maximum(val.target_gamma, 1), 0)
        return cascade_metrics(val.target_gamma, pred)
    casc = train_cascade(sub, cfg)
    return cascade_metrics(val.target_gamma, casc.predict(val))


def grid_search(space: dict, data: CascadeData | None, base: TrainConfig, budget: int | None = None,
                which: str = "model1", workers: int = 1, evaluate=None) -> GridResult:
    """Evaluate configurations in deterministic order and pick the best lexicographically.

    Each configuration trains with its own seed derived from ``(base.seed, index)``.
    ``evaluate(config) -> metrics`` may be supplied to replace training.
    """
    if budget is not None and budget < 1:
        raise CascadeError("grid-search budget must be at least 1")
    points = expand_space(space, base)
    if budget is not None:
        points = points[:budget]
    cfgs = [replace(c, seed=int(np.random.SeedSequence(derive_seed(base.seed, f"grid/{i}")).generate_state(1)[0]))
            for i, (_, c) in enumerate(points)]
    if evaluate is not None:
        results = [evaluate(c) for c in cfgs]
    else:
        fit, val = validation_split(data.train)
        jobs = [(which, c, data, fit, val) for c in cfgs]
        if workers > 1:
            with ProcessPoolExecutor(workers) as pool:
                results = list(pool.map(evaluate_config, jobs))
        else:
            results = [evaluate_config(j) for j in jobs]
    table = [{"index": i, **p, **m} for i, ((p, _), m) in enumerate(zip(points, results))]
    best = max(range(len(results)), key=lambda i: (selection_key(results[i]), -i))
    return GridResult(cfgs[best], points[best][0], table)
