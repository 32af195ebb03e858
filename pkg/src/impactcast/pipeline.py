"""File-based pipeline stages shared by the command line and the tests.

Each stage reads only earlier stages' files and writes its outputs plus a
``run_manifest.json`` into its own directory.
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass
from datetime import datetime
from pathlib import Path

import numpy as np

from . import __version__, _accel, cascade, durfit, evaluate, gamma, grid, ingest, synth

log = logging.getLogger(__name__)

RUN_MANIFEST = "run_manifest.json"
CLEAN_FILES = dict(synth.FILES)
LABELS_FILE = "labels.csv"
GAMMA_DIR = "gamma_model"
METRICS_FILE = "metrics.csv"
PREDICTIONS_FILE = "predictions.csv"
MODEL_DIRS = ("model1", "model2", "lstm_baseline", "cnn_baseline")


class PipelineError(RuntimeError):
    pass


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def digests(paths) -> dict[str, str]:
    out = {}
    for p in paths:
        p = Path(p)
        files = sorted(q for q in p.rglob("*") if q.is_file() and q.name != RUN_MANIFEST) if p.is_dir() else [p]
        for f in files:
            out[str(f)] = sha256(f)
    return out


def write_manifest(out_dir, command: str, config: dict, inputs=(), outputs=(), extra: dict | None = None) -> Path:
    """Run manifest: no timestamps, so equal runs write equal manifests."""
    out_dir = Path(out_dir)
    m = {
        "tool": "impactcast",
        "version": __version__,
        "command": command,
        "config": config,
        "backend": _accel.backend_name(),
        "dtype": "float64",
        "inputs": digests(inputs),
        "outputs": digests(outputs),
        **(extra or {}),
    }
    path = out_dir / RUN_MANIFEST
    path.write_text(json.dumps(m, indent=1, sort_keys=True, default=str) + "\n")
    return path


def _check_dir(path, what: str) -> Path:
    path = Path(path)
    if not path.is_dir():
        raise PipelineError(f"{what} directory {path} does not exist")
    return path


# --------------------------------------------------------------------------
# stages
# --------------------------------------------------------------------------

def run_synth(cfg: synth.SynthConfig, out) -> synth.SynthOutput:
    res = synth.generate(cfg, out)
    write_manifest(out, "synth", cfg.to_json(), outputs=[res.directory / f for f in synth.FILES.values()])
    return res


def run_ingest(raw_dir, out) -> dict:
    """Parse, deduplicate, extract delays, impute and clip; write clean tables."""
    raw_dir = _check_dir(raw_dir, "raw data")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    parsed = {k: ingest.parse_dataset(raw_dir / f, k) for k, f in CLEAN_FILES.items()}
    rejects = {k: r.rejects for k, r in parsed.items()}
    accidents = ingest.dedup_accidents(parsed["accident"].records)
    congestion, misses = ingest.attach_delays(parsed["congestion"].records)
    weather = ingest.clip_weather(ingest.impute_missing(parsed["weather"].records))
    _, redundancy = ingest.drop_redundant(ingest.accident_table(accidents))

    ingest.write_accidents(out / CLEAN_FILES["accident"], accidents)
    ingest.write_congestion(out / CLEAN_FILES["congestion"], congestion)
    ingest.write_weather(out / CLEAN_FILES["weather"], weather)
    ingest.write_poi(out / CLEAN_FILES["poi"], parsed["poi"].records)
    ingest.write_rejects(out / "rejects.csv", rejects)
    report = {
        "accidents_in": len(parsed["accident"].records), "accidents_out": len(accidents),
        "congestion": len(congestion), "delay_misses": misses, "weather": len(weather),
        "poi": len(parsed["poi"].records), "rejects": {k: len(v) for k, v in rejects.items()},
        "redundancy": {"correlated": redundancy.correlated, "dominant": redundancy.dominant},
    }
    (out / "ingest_report.json").write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
    write_manifest(out, "ingest", {}, inputs=[raw_dir / f for f in CLEAN_FILES.values()],
                   outputs=[out / f for f in CLEAN_FILES.values()], extra={"report": report})
    return report


def _parse_clean(clean_dir, kind):
    return ingest.parse_dataset(Path(clean_dir) / CLEAN_FILES[kind], kind).records


def run_label_gamma(clean_dir, out, train_end: datetime, kind: str = "mlp", seed: int = 0) -> gamma.AccidentLabels:
    clean_dir = _check_dir(clean_dir, "clean data")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    cong = [c for c in _parse_clean(clean_dir, "congestion") if c.delay is not None]
    if not cong:
        raise PipelineError("no congestion reports with a delay; run ingest first")
    model, metrics = gamma.fit_gamma(np.array([c.severity for c in cong]), np.array([c.duration for c in cong]),
                                     np.array([c.distance for c in cong]), np.array([c.delay for c in cong]),
                                     kind=kind, seed=seed)
    model.save(out / GAMMA_DIR)
    labels = gamma.label_accidents(model, _parse_clean(clean_dir, "accident"), train_end)
    gamma.write_labels(out / LABELS_FILE, labels)
    write_manifest(out, "label-gamma", {"kind": kind, "seed": seed, "train_end": train_end.isoformat()},
                   inputs=[clean_dir / CLEAN_FILES["congestion"], clean_dir / CLEAN_FILES["accident"]],
                   outputs=[out / LABELS_FILE, out / GAMMA_DIR],
                   extra={"holdout": metrics, "median": labels.median})
    return labels


def run_fit_duration(labels_path, out) -> durfit.FitReport:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    d = gamma.read_labels(labels_path)["duration"]
    rep = durfit.fit_and_rank(d[d > 0])
    body = {
        "n": int((d > 0).sum()), "K": rep.binning.K, "edges": rep.binning.edges.tolist(),
        "frequencies": rep.binning.frequencies.tolist(),
        "ranking": [{"name": c.name, "params": c.params, "sse": c.sse, "converged": c.converged}
                    for c in rep.candidates],
    }
    (out / "durfit.json").write_text(json.dumps(body, indent=1, sort_keys=True) + "\n")
    write_manifest(out, "fit-duration", {}, inputs=[labels_path], outputs=[out / "durfit.json"])
    return rep


def run_build_pack(clean_dir, labels_path, grid_path, out, train_end: datetime, alpha: int = grid.DEFAULT_ALPHA,
                   weather_encoding: str = "grouped") -> grid.Pack:
    clean_dir = _check_dir(clean_dir, "clean data")
    spec = grid.GridSpec.from_json(json.loads(Path(grid_path).read_text()))
    lab = gamma.read_labels(labels_path)
    src = grid.Sources(_parse_clean(clean_dir, "accident"), _parse_clean(clean_dir, "congestion"),
                       _parse_clean(clean_dir, "weather"), _parse_clean(clean_dir, "poi"),
                       dict(zip(lab["id"].tolist(), lab["gamma_class"].tolist())))
    pack = grid.assemble(spec, src, alpha, weather_encoding, train_end)
    grid.save_pack(pack, out)
    write_manifest(out, "build-pack", {"alpha": alpha, "weather_encoding": weather_encoding,
                                       "train_end": train_end.isoformat()},
                   inputs=[*(clean_dir / f for f in CLEAN_FILES.values()), labels_path, grid_path],
                   outputs=[Path(out) / grid.FEATURES_FILE, Path(out) / grid.LABELS_FILE],
                   extra={"feature_names": pack.feature_names, "categories": pack.categories})
    return pack


@dataclass
class Trained:
    cascade: cascade.Cascade
    baselines: dict
    data: cascade.CascadeData


def run_train(pack_dir, cfg: cascade.TrainConfig, out, baselines: bool = True) -> Trained:
    pack = grid.load_pack(pack_dir)
    data = cascade.CascadeData.from_pack(pack, cfg.w)
    casc = cascade.train_cascade(data, cfg)
    out = Path(out)
    casc.model1.save(out / "model1")
    casc.model2.save(out / "model2")
    base = cascade.train_baselines(data, cfg) if baselines else {}
    for name, net in base.items():
        net.save(out / name)
    write_manifest(out, "train", cfg.to_json(), inputs=[pack_dir],
                   outputs=[out / d for d in MODEL_DIRS if (out / d).exists()],
                   extra={"rus_kept": casc.balanced_size, "model2_pool": casc.pool_size,
                          "model2_pool_source": cfg.model2_pool, "model2_pool_resampled": False,
                          "test_undersampled": False})
    return Trained(casc, base, data)


def load_models(models_dir) -> dict:
    models_dir = _check_dir(models_dir, "model")
    return {d: cascade._Net.load(models_dir / d) for d in MODEL_DIRS if (models_dir / d).exists()}


def _test_windows(pack: grid.Pack, models: dict) -> grid.WindowSet:
    for name, net in models.items():
        if net.n_features != pack.n_features:
            raise PipelineError(f"dimension mismatch: pack has F={pack.n_features} features, "
                                f"{name} was trained with F={net.n_features}")
        if net.n_zones != len(pack.zones):
            raise PipelineError(f"dimension mismatch: pack has {len(pack.zones)} zones, "
                                f"{name} was trained with {net.n_zones}")
    w = models["model1"].w
    return grid.temporal_split(grid.build_windows(pack.features, pack.labels, w), pack.train_end)[1]


def run_predict(pack_dir, models_dir, out) -> np.ndarray:
    pack = grid.load_pack(pack_dir)
    models = load_models(models_dir)
    test = _test_windows(pack, models)
    pred = cascade.Cascade(models["model1"], models["model2"]).predict(test)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / PREDICTIONS_FILE, "w") as fh:
        fh.write("zone_index,interval,true_class,pred_class\n")
        for z, e, t, p in zip(test.zone.tolist(), (test.end + 1).tolist(), test.target_gamma.tolist(),
                              pred.tolist()):
            fh.write(f"{z},{e},{t},{p}\n")
    write_manifest(out, "predict", {}, inputs=[pack_dir, models_dir], outputs=[out / PREDICTIONS_FILE])
    return pred


def run_eval(pack_dir, models_dir, out) -> list[evaluate.MetricRow]:
    """Metrics CSV for the cascade and any saved baselines on the test period."""
    pack = grid.load_pack(pack_dir)
    models = load_models(models_dir)
    test = _test_windows(pack, models)
    rows = evaluate.metrics_table("cascade", test.target_gamma,
                                  cascade.Cascade(models["model1"], models["model2"]).predict(test))
    rows += evaluate.metrics_table("majority", test.target_gamma, np.zeros(len(test), dtype=np.int64))
    for name in ("lstm_baseline", "cnn_baseline"):
        if name in models:
            rows += evaluate.metrics_table(name, test.target_gamma, models[name].predict(test))
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    evaluate.write_metrics(out / METRICS_FILE, rows)
    write_manifest(out, "eval", {}, inputs=[pack_dir, models_dir], outputs=[out / METRICS_FILE])
    return rows


@dataclass
class PipelineResult:
    root: Path
    metrics: list
    trained: Trained


def run_all(root, synth_cfg: synth.SynthConfig | None = None, train_cfg: cascade.TrainConfig | None = None,
            gamma_kind: str = "mlp") -> PipelineResult:
    """synth -> ingest -> label-gamma -> fit-duration -> build-pack -> train -> eval under ``root``."""
    root = Path(root)
    scfg = synth_cfg or synth.SynthConfig()
    tcfg = train_cfg or cascade.TrainConfig(seed=scfg.seed)
    run_synth(scfg, root / "raw")
    run_ingest(root / "raw", root / "clean")
    run_label_gamma(root / "clean", root / "gamma", scfg.train_end_time, gamma_kind, scfg.seed)
    run_fit_duration(root / "gamma" / LABELS_FILE, root / "durfit")
    run_build_pack(root / "clean", root / "gamma" / LABELS_FILE, root / "raw" / synth.GRID_FILE, root / "pack",
                   scfg.train_end_time, scfg.alpha)
    trained = run_train(root / "pack", tcfg, root / "models")
    rows = run_eval(root / "pack", root / "models", root / "eval")
    return PipelineResult(root, rows, trained)
