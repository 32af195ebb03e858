"""``impactcast`` command line."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__, cascade, evaluate, grid, ingest, pipeline, synth

log = logging.getLogger("impactcast")


def _when(text: str):
    try:
        return ingest.parse_time(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _train_config(args) -> cascade.TrainConfig:
    cfg = cascade.TrainConfig.load(args.config) if getattr(args, "config", None) else cascade.TrainConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_synth(args):
    cfg = synth.SynthConfig.load(args.config) if args.config else synth.SynthConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    res = pipeline.run_synth(cfg, args.out)
    print(f"wrote {len(res.accidents)} accidents, {len(res.congestion)} congestion, {len(res.weather)} weather, "
          f"{len(res.poi)} POI rows to {res.directory}")


def cmd_ingest(args):
    rep = pipeline.run_ingest(args.raw, args.out)
    print(f"accidents {rep['accidents_in']} -> {rep['accidents_out']}, delay misses {rep['delay_misses']}, "
          f"rejects {sum(rep['rejects'].values())}")


def cmd_label_gamma(args):
    labels = pipeline.run_label_gamma(args.clean, args.out, args.train_end, args.kind, args.seed or 0)
    n2 = int((labels.gamma_class == 2).sum())
    print(f"labelled {len(labels.ids)} accidents (median gamma {labels.median:.6g}; {n2} high-impact)")


def cmd_fit_duration(args):
    rep = pipeline.run_fit_duration(args.labels, args.out)
    for c in rep.candidates:
        print(f"{c.name:13s} sse={c.sse:.6g}" + ("" if c.converged else " (not converged)"))


def cmd_build_pack(args):
    pack = pipeline.run_build_pack(args.clean, args.labels, args.grid, args.out, args.train_end, args.alpha,
                                   args.weather_encoding)
    print(f"pack: {len(pack.zones)} zones x {pack.labels.shape[1]} intervals x {pack.n_features} features")


def cmd_train(args):
    cfg = _train_config(args)
    t = pipeline.run_train(args.pack, cfg, args.model_out, baselines=not args.no_baselines)
    print(f"trained on {t.cascade.balanced_size} balanced windows; model 2 pool {t.cascade.pool_size}")


def cmd_predict(args):
    pred = pipeline.run_predict(args.pack, args.models, args.out)
    print(f"wrote {len(pred)} predictions to {Path(args.out) / pipeline.PREDICTIONS_FILE}")


def cmd_eval(args):
    rows = pipeline.run_eval(args.pack, args.models, args.out)
    sys.stdout.write(evaluate.metrics_csv(rows))


def cmd_gridsearch(args):
    space = json.loads(Path(args.space).read_text())
    which = space.pop("model", "model1")
    if which not in ("model1", "model2"):
        raise ValueError(f"space 'model' must be model1 or model2, not {which!r}")
    cfg = _train_config(args)
    pack = grid.load_pack(args.pack)
    data = cascade.CascadeData.from_pack(pack, cfg.w)
    res = cascade.grid_search(space, data, cfg, args.budget, which, workers=args.threads)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    keys = list(res.table[0])
    with open(out / "gridsearch.csv", "w", newline="") as fh:
        wr = csv.DictWriter(fh, keys, lineterminator="\n")
        wr.writeheader()
        for row in sorted(res.table, key=lambda r: (cascade.selection_key(r), -r["index"]), reverse=True):
            wr.writerow({k: evaluate.NA if v is None else v for k, v in row.items()})
    (out / "best_config.json").write_text(json.dumps(res.best.to_json(), indent=1, sort_keys=True) + "\n")
    pipeline.write_manifest(out, "gridsearch", {"space": space, "model": which, "budget": args.budget,
                                                "base": cfg.to_json()},
                            inputs=[args.pack, args.space], outputs=[out / "gridsearch.csv"])
    print(f"best of {len(res.table)}: {res.best_point}")


def cmd_ablate(args):
    cfg = _train_config(args)
    pack = grid.load_pack(args.pack)
    rows = []
    for group in args.categories:
        rows += evaluate.ablate(pack, group.split("+"), cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    evaluate.write_metrics(out / "ablation.csv", rows)
    pipeline.write_manifest(out, "ablate", {"categories": args.categories, "train": cfg.to_json(),
                                            "context_categories": list(evaluate.CONTEXT_CATEGORIES)},
                            inputs=[args.pack], outputs=[out / "ablation.csv"])
    sys.stdout.write(evaluate.metrics_csv(rows))


def cmd_sweep_w(args):
    cfg = _train_config(args)
    rows = evaluate.window_sweep(grid.load_pack(args.pack), args.w, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "window_sweep.csv").write_text(evaluate.sweep_csv(rows))
    pipeline.write_manifest(out, "sweep-w", {"w": args.w, "train": cfg.to_json()}, inputs=[args.pack],
                            outputs=[out / "window_sweep.csv"])
    sys.stdout.write(evaluate.sweep_csv(rows))


def cmd_cluster(args):
    models = pipeline.load_models(args.models)
    pack = grid.load_pack(args.pack)
    res, rows = evaluate.cluster_embeddings(models["model1"], pack, args.k, args.seed or 0)
    evaluate.write_clusters(args.out, res, rows)
    pipeline.write_manifest(args.out, "cluster", {"k": args.k, "seed": args.seed or 0},
                            inputs=[args.models, args.pack], outputs=[Path(args.out) / "clusters.csv"],
                            extra={"inertia": res.inertia})
    print(f"{len(rows)} zones in {args.k} clusters after {res.iterations} iterations (inertia {res.inertia[-1]:.6g})")


def cmd_pipeline(args):
    scfg = synth.SynthConfig.load(args.synth_config) if args.synth_config else synth.SynthConfig()
    if args.seed is not None:
        scfg = replace(scfg, seed=args.seed)
    tcfg = cascade.TrainConfig.load(args.config) if args.config else cascade.TrainConfig()
    tcfg = replace(tcfg, seed=scfg.seed)
    res = pipeline.run_all(args.out, scfg, tcfg)
    sys.stdout.write(evaluate.metrics_csv(res.metrics))


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--seed", type=int, default=None, help="base seed for every derived random stream")
    shared.add_argument("--threads", type=int, default=1, help="worker processes for parallel stages")
    shared.add_argument("--out", required=True, help="output directory")

    p = argparse.ArgumentParser(prog="impactcast", description="Traffic accident impact prediction pipeline.")
    p.add_argument("--version", action="version", version=f"impactcast {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        sp = sub.add_parser(name, parents=[shared], help=help_)
        sp.set_defaults(func=func)
        return sp

    sp = add("synth", cmd_synth, "generate synthetic raw datasets")
    sp.add_argument("--config", help="SynthConfig JSON")

    sp = add("ingest", cmd_ingest, "parse and clean raw datasets")
    sp.add_argument("--raw", required=True)

    sp = add("label-gamma", cmd_label_gamma, "fit the delay model and label accidents")
    sp.add_argument("--clean", required=True)
    sp.add_argument("--train-end", type=_when, required=True)
    sp.add_argument("--kind", choices=("mlp", "linear"), default="mlp")

    sp = add("fit-duration", cmd_fit_duration, "rank duration distributions")
    sp.add_argument("--labels", required=True)

    sp = add("build-pack", cmd_build_pack, "assemble the zone x interval tensor pack")
    sp.add_argument("--clean", required=True)
    sp.add_argument("--labels", required=True)
    sp.add_argument("--grid", required=True)
    sp.add_argument("--train-end", type=_when, required=True)
    sp.add_argument("--alpha", type=int, default=grid.DEFAULT_ALPHA)
    sp.add_argument("--weather-encoding", choices=("grouped", "full"), default="grouped")

    sp = add("train", cmd_train, "train the cascade (and baselines)")
    sp.add_argument("--pack", required=True)
    sp.add_argument("--config")
    sp.add_argument("--model-out", required=True)
    sp.add_argument("--no-baselines", action="store_true")

    sp = add("predict", cmd_predict, "cascade predictions on the test period")
    sp.add_argument("--pack", required=True)
    sp.add_argument("--models", required=True)

    sp = add("eval", cmd_eval, "metrics CSV for cascade and baselines")
    sp.add_argument("--pack", required=True)
    sp.add_argument("--models", required=True)

    sp = add("gridsearch", cmd_gridsearch, "hyper-parameter grid search")
    sp.add_argument("--pack", required=True)
    sp.add_argument("--space", required=True)
    sp.add_argument("--config")
    sp.add_argument("--budget", type=int, default=None)

    sp = add("ablate", cmd_ablate, "feature-category ablation")
    sp.add_argument("--pack", required=True)
    sp.add_argument("--config")
    sp.add_argument("--categories", nargs="+", required=True,
                    help="one run per argument; join categories with '+', e.g. weather+spatial")

    sp = add("sweep-w", cmd_sweep_w, "window-length sweep")
    sp.add_argument("--pack", required=True)
    sp.add_argument("--config")
    sp.add_argument("--w", type=_int_list, required=True, help="comma-separated window lengths")

    sp = add("cluster", cmd_cluster, "k-means over learned zone embeddings")
    sp.add_argument("--models", required=True)
    sp.add_argument("--pack", required=True)
    sp.add_argument("--k", type=int, default=4)

    sp = add("pipeline", cmd_pipeline, "synth through eval in one go")
    sp.add_argument("--synth-config")
    sp.add_argument("--config")
    return p


def main(argv=None) -> int:
    level = os.environ.get("IMPACTCAST_LOG", "WARNING").upper()
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    if args.threads < 1:
        print("impactcast: error: --threads must be at least 1", file=sys.stderr)
        return 2
    try:
        args.func(args)
    except (ValueError, RuntimeError, OSError, KeyError, FloatingPointError) as exc:
        print(f"impactcast {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
