"""Command-line experiment orchestration.

Subcommands cover the pipeline stages (gen-mobility, simulate, train,
attack, evaluate, sweep, ablate); every stage reads and writes the
documented file formats and emits a manifest for exact reproduction.
Any config key can be overridden with ``--set dotted.key=value``.
Exit codes: 0 success, 2 config error, 3 data error, 4 divergence.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import os
import sys

import numpy as np

from . import epidemic, metrics, mobility, pipeline
from .attacks import ObservationLog, localization_attack
from .config import load_config, write_manifest
from .errors import ConfigError, DataError, DivergenceError


@contextlib.contextmanager
def atomic_path(path):
    """Write via a temp file and rename so readers never see partial files."""
    tmp = f"{path}.tmp"
    yield tmp
    os.replace(tmp, path)


def _common_args(sub):
    sub.add_argument("--config", default=None, help="YAML config file")
    sub.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override a config key by dotted name (repeatable)",
    )
    sub.add_argument("--out", default=None, help="output directory (default from config)")


def _load(args):
    cfg = load_config(args.config, args.overrides)
    out_dir = args.out or cfg["output_dir"]
    pipeline.ensure_dir(out_dir)
    return cfg, out_dir


def _need(path, producer):
    if not os.path.exists(path):
        raise DataError(f"missing input {path!r}; produce it with `fedepi {producer}`")
    return path


def cmd_gen_mobility(args):
    cfg, out = _load(args)
    base_seed = np.random.SeedSequence(cfg["seed"]).spawn(1)[0]
    mob = cfg["mobility"]
    pop = mobility.generate_population(
        base_seed,
        mob["n_users"],
        mob["n_regions"],
        mob["n_intervals"],
        interval_hours=mob["interval_hours"],
        leisure_prob=mob["leisure_prob"],
        kernel_scale_km=mob["kernel_scale_km"],
    )
    if mob["eta"] < 1.0:
        pop = mobility.subsample_reporting(pop, mob["eta"], cfg["seed"])
    with atomic_path(os.path.join(out, "traces.csv")) as tmp:
        mobility.export_csv(pop, tmp)
    with atomic_path(os.path.join(out, "geometry.csv")) as tmp:
        mobility.export_geometry_csv(pop.geometry, tmp)
    write_manifest(os.path.join(out, "manifest.json"), cfg, {"stage": "gen-mobility"})
    print(f"wrote {out}/traces.csv ({pop.n_users} users, {pop.n_intervals} intervals)")
    return 0


def cmd_simulate(args):
    cfg, out = _load(args)
    base = pipeline.build_base_world(cfg)
    with atomic_path(os.path.join(out, "labels.csv")) as tmp:
        epidemic.export_labels_csv(base.log, tmp)
    with atomic_path(os.path.join(out, "cases.csv")) as tmp:
        epidemic.export_cases_csv(base.log.new_cases, tmp)
    write_manifest(os.path.join(out, "manifest.json"), cfg, {"stage": "simulate"})
    curve = base.log.daily_curve()
    print(
        f"wrote {out}/labels.csv and cases.csv; "
        f"final infected {int(base.labels.sum())}/{base.labels.size}, "
        f"peak day {int(np.argmax(curve))}"
    )
    return 0


def cmd_train(args):
    cfg, out = _load(args)
    run = pipeline.run_experiment(cfg, args.variant, epochs=args.epochs)
    with atomic_path(os.path.join(out, "predictions.csv")) as tmp:
        pipeline.export_predictions_csv(tmp, run.result.scores)
    with atomic_path(os.path.join(out, "metrics.json")) as tmp:
        metrics.write_metrics_json(tmp, run.metrics)
    if hasattr(run.result.server.params, "hidden"):
        with atomic_path(os.path.join(out, "checkpoint.npz")) as tmp:
            pipeline.save_checkpoint(tmp, run.result, cfg["seed"])
    write_manifest(
        os.path.join(out, "manifest.json"),
        cfg,
        {"stage": "train", "variant": args.variant},
    )
    print(json.dumps({"variant": args.variant, **run.metrics}, sort_keys=True))
    return 0


def cmd_attack(args):
    cfg, out = _load(args)
    base = pipeline.build_base_world(cfg)
    run, grad_report = pipeline.run_gradient_attack(cfg, epochs=args.epochs, base=base)
    obs = ObservationLog.from_view(run.world.view)
    if cfg["privacy"]["n_pseudo"] > 0:
        loc_report = localization_attack(
            obs, base.aggregate_model.visit_dist, base.aggregate_model.transition
        )
        loc_json = loc_report.to_json()
    else:
        loc_json = json.dumps(
            {"attack": "localization", "error_rate": 0.0, "n_decisions": 0}
        )
    with atomic_path(os.path.join(out, "attack_gradient.json")) as tmp:
        with open(tmp, "w", encoding="utf-8") as fh:
            fh.write(grad_report.to_json() + "\n")
    with atomic_path(os.path.join(out, "attack_localization.json")) as tmp:
        with open(tmp, "w", encoding="utf-8") as fh:
            fh.write(loc_json + "\n")
    write_manifest(os.path.join(out, "manifest.json"), cfg, {"stage": "attack"})
    print(grad_report.to_json())
    print(loc_json)
    return 0


def cmd_evaluate(args):
    cfg, out = _load(args)
    labels = _read_two_col(_need(args.labels, "simulate"), "user_id,label", int)
    scores = _read_two_col(_need(args.scores, "train"), "user_id,score", float)
    users = sorted(set(labels) & set(scores))
    if not users:
        raise DataError("labels and scores share no user ids")
    y = np.array([labels[u] for u in users])
    s = np.array([scores[u] for u in users])
    r0 = pipeline.disease_params(cfg).r0
    report = metrics.metrics_report(s, y, r0)
    with atomic_path(os.path.join(out, "metrics.json")) as tmp:
        metrics.write_metrics_json(tmp, report)
    print(json.dumps(report, sort_keys=True))
    return 0


def _read_two_col(path, header, cast):
    out = {}
    with open(path, "r", encoding="utf-8") as fh:
        first = fh.readline().strip()
        if first != header:
            raise DataError(f"{path}: expected header {header!r}, got {first!r}")
        for line in fh:
            line = line.strip()
            if not line:
                continue
            u, v = line.split(",")
            out[int(u)] = cast(v)
    return out


def cmd_sweep(args):
    cfg, out = _load(args)
    kinds = args.kinds.split(",")
    n_ps = [int(x) for x in args.n_pseudo.split(",")]
    rows = pipeline.privacy_utility_sweep(cfg, kinds, n_ps, epochs=args.epochs)
    from .attacks import write_sweep_csv

    with atomic_path(os.path.join(out, "sweep.csv")) as tmp:
        write_sweep_csv(tmp, rows)
    write_manifest(os.path.join(out, "manifest.json"), cfg, {"stage": "sweep"})
    for row in rows:
        print(json.dumps(row, sort_keys=True))
    return 0


def cmd_ablate(args):
    cfg, out = _load(args)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else None
    rows = pipeline.ablate(cfg, seeds=seeds, epochs=args.epochs, with_dct=args.with_dct)
    with atomic_path(os.path.join(out, "ablate.csv")) as tmp:
        keys = list(rows[0].keys())
        with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(",".join(keys) + "\n")
            for row in rows:
                fh.write(",".join(str(row[k]) for k in keys) + "\n")
    write_manifest(os.path.join(out, "manifest.json"), cfg, {"stage": "ablate"})
    for row in rows:
        print(json.dumps(row, sort_keys=True))
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="fedepi",
        description="federated hypergraph epidemic-prediction simulator",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-mobility", help="generate synthetic traces")
    _common_args(p)
    p.set_defaults(fn=cmd_gen_mobility)

    p = sub.add_parser("simulate", help="run the epidemic over the traces")
    _common_args(p)
    p.set_defaults(fn=cmd_simulate)

    p = sub.add_parser("train", help="train a prediction variant end to end")
    _common_args(p)
    p.add_argument("--variant", default="fed", choices=pipeline.VARIANTS)
    p.add_argument("--epochs", type=int, default=None)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("attack", help="run both privacy adversaries")
    _common_args(p)
    p.add_argument("--epochs", type=int, default=None)
    p.set_defaults(fn=cmd_attack)

    p = sub.add_parser("evaluate", help="metrics from labels + scores files")
    _common_args(p)
    p.add_argument("--labels", required=True)
    p.add_argument("--scores", required=True)
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("sweep", help="privacy-utility grid over decoy settings")
    _common_args(p)
    p.add_argument("--kinds", default="uniform_iid,aggregate_iid,aggregate_walk,epidemic")
    p.add_argument("--n-pseudo", default="1,2,5", dest="n_pseudo")
    p.add_argument("--epochs", type=int, default=None)
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("ablate", help="metrics per ablation variant")
    _common_args(p)
    p.add_argument("--seeds", default=None, help="comma-separated seed list")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--with-dct", action="store_true")
    p.set_defaults(fn=cmd_ablate)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except DivergenceError as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
