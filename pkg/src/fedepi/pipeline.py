"""End-to-end experiment stages shared by the CLI and the test suite.

Stage outputs are plain data (arrays and small dataclasses); every stage
is also runnable standalone from files through the CLI. The split
between ``build_base_world`` (privacy-independent simulation artifacts)
and ``build_variant_world`` (the server-observed side, which depends on
the obfuscation settings) lets ablation grids share the expensive
simulation work.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, replace

import numpy as np

from . import epidemic, hypergraph, macro, metrics, mobility, pseudoloc
from .attacks import ObservationLog, gradient_inference_attack, localization_attack
from .config import stage_seeds
from .errors import ConfigError
from .fedtrain import (
    ModelConfig,
    PrivacyConfig,
    build_observed_view,
    init_embeddings,
    init_params,
    train,
    train_centralized,
)
from .fedtrain.model import ModelParams

VARIANTS = (
    "fed",
    "no-macro",
    "no-pseudo",
    "no-noise",
    "no-privacy",
    "hgnn-central",
    "hgnn-eq3",
    "hgnn-noisy",
)

ABLATION_ROWS = ("hgnn", "no-macro", "no-pseudo", "no-noise", "no-privacy", "fed")


def disease_params(cfg):
    d = cfg["disease"]
    if d.get("preset"):
        base = epidemic.preset(d["preset"])
        return replace(base, asymptomatic_fraction=d["asymptomatic_fraction"])
    if d["beta"] is None or d["alpha"] is None or d["mu"] is None:
        raise ConfigError("disease needs a preset or explicit beta/alpha/mu")
    return epidemic.DiseaseParams(
        beta=d["beta"],
        alpha=d["alpha"],
        mu=d["mu"],
        asymptomatic_fraction=d["asymptomatic_fraction"],
    )


def privacy_config(cfg):
    p = cfg["privacy"]
    return PrivacyConfig(
        epsilon=p["epsilon"],
        delta=p["delta"],
        clip_location=p["clip_location"],
        sigma_location=p["sigma_location"],
        clip_gradient=p["clip_gradient"],
        sigma_gradient=p["sigma_gradient"],
        n_pseudo=p["n_pseudo"],
    )


def model_config(cfg, in_dim_extra=0):
    m = cfg["model"]
    return ModelConfig(
        embed_dim=m["embed_dim"],
        hidden_dim=m["hidden_dim"],
        n_layers=m["n_layers"],
        lr=m["lr"],
        dropout=m["dropout"],
        weight_decay=m["weight_decay"],
        optimizer=m["optimizer"],
    )


@dataclass
class BaseWorld:
    """Privacy-independent simulation artifacts."""

    cfg: dict
    seeds: dict
    pop_full: mobility.Population
    pop_reported: mobility.Population
    params: epidemic.DiseaseParams
    log: epidemic.EpidemicLog
    train_users: np.ndarray
    eval_users: np.ndarray
    labels: np.ndarray
    reported_case_mat: np.ndarray  # (M, days), diagnosed users only
    aggregate_model: pseudoloc.MobilityModel
    clustering: pseudoloc.EpidemicClustering


@dataclass
class VariantWorld:
    """Server-observed artifacts under one obfuscation setting."""

    base: BaseWorld
    privacy: PrivacyConfig
    pseudo_traces: np.ndarray
    view: object
    macro_hidden: np.ndarray | None
    cases_intervals: np.ndarray


def build_base_world(cfg):
    seeds = stage_seeds(cfg["seed"])
    mob = cfg["mobility"]
    if mob.get("trace_csv"):
        pop_full = mobility.ingest_csv(
            mob["trace_csv"], interval_hours=mob["interval_hours"]
        )
        if pop_full.geometry is None:
            pop_full = mobility.Population(
                visits=pop_full.visits,
                n_regions=pop_full.n_regions,
                interval_hours=pop_full.interval_hours,
                geometry=mobility.grid_geometry(pop_full.n_regions),
            )
    else:
        pop_full = mobility.generate_population(
            seeds["mobility"],
            mob["n_users"],
            mob["n_regions"],
            mob["n_intervals"],
            interval_hours=mob["interval_hours"],
            leisure_prob=mob["leisure_prob"],
            kernel_scale_km=mob["kernel_scale_km"],
        )
    params = disease_params(cfg)
    log = epidemic.simulate(
        pop_full, params, cfg["disease"]["n_seed_infections"], seeds["epidemic"]
    )
    train_users, eval_users = epidemic.split_labels(
        log, cfg["disease"]["train_fraction"], seeds["split"]
    )
    pop_reported = mobility.subsample_reporting(
        pop_full, mob["eta"], seeds["subsample"]
    )
    reported_case_mat = epidemic.reported_cases(log, pop_full, train_users)

    p = cfg["privacy"]
    aggregate = pseudoloc.fit_aggregate_model(
        pop_reported, p["epsilon_floor"], pop_full.geometry
    )
    n_clusters = p["n_clusters"] or max(2, pop_full.n_regions // 20)
    sim = pseudoloc.similarity_matrix(
        reported_case_mat, pop_full.geometry, p["gamma"]
    )
    clustering = pseudoloc.cluster_regions(sim, min(n_clusters, pop_full.n_regions))
    return BaseWorld(
        cfg=cfg,
        seeds=seeds,
        pop_full=pop_full,
        pop_reported=pop_reported,
        params=params,
        log=log,
        train_users=train_users,
        eval_users=eval_users,
        labels=log.final_labels.astype(np.int64),
        reported_case_mat=reported_case_mat,
        aggregate_model=aggregate,
        clustering=clustering,
    )


def build_variant_world(base, privacy, macro_enabled):
    cfg = base.cfg
    pop = base.pop_reported
    kind = cfg["privacy"]["generator"]
    if privacy.n_pseudo > 0:
        pseudo = pseudoloc.generate_pseudo_traces(
            pop,
            kind,
            privacy.n_pseudo,
            base.seeds["pseudo"],
            clustering=base.clustering,
            aggregate=base.aggregate_model,
        )
    else:
        pseudo = np.empty((0, pop.n_users, pop.n_intervals), dtype=np.int64)
    view = build_observed_view(pop.visits, pseudo, pop.n_regions, base.seeds["view"])

    intervals_per_day = max(1, int(round(24.0 / pop.interval_hours)))
    cases_intervals = macro.upsample_daily(
        base.reported_case_mat, pop.n_intervals, intervals_per_day
    )
    macro_hidden = None
    if macro_enabled:
        mc = cfg["macro"]
        flow = macro.build_flow_graph(view.trace_matrix(), pop.n_regions)
        encoder_len = min(mc["encoder_len"], max(2, pop.n_intervals // 2))
        horizon = max(1, min(mc["horizon"], pop.n_intervals - encoder_len - 1))
        result = macro.train_macro(
            flow,
            cases_intervals,
            horizon,
            encoder_len,
            mc["epochs"],
            base.seeds["macro"],
            hidden_dim=mc["hidden_dim"],
            k_diffusion=mc["diffusion_steps"],
            lr=mc["lr"],
        )
        occupied = np.zeros((pop.n_regions, pop.n_intervals), dtype=bool)
        occupied[view.cell_region, view.cell_t] = True
        macro_hidden = macro.export_hidden(result, flow, cases_intervals, occupied)
    return VariantWorld(
        base=base,
        privacy=privacy,
        pseudo_traces=pseudo,
        view=view,
        macro_hidden=macro_hidden,
        cases_intervals=cases_intervals,
    )


def variant_privacy(cfg, variant):
    base = privacy_config(cfg)
    if variant in ("fed", "no-macro", "hgnn-noisy"):
        return base
    if variant == "no-pseudo":
        return replace(base, n_pseudo=0)
    if variant == "no-noise":
        return replace(base, sigma_location=0.0)
    if variant in ("no-privacy", "hgnn-central", "hgnn-eq3"):
        return PrivacyConfig.off()
    raise ConfigError(f"unknown variant {variant!r}")


def variant_macro(cfg, variant):
    if variant in ("no-macro", "hgnn-central", "hgnn-eq3", "hgnn-noisy"):
        return False
    return bool(cfg["macro"]["enabled"])


@dataclass
class RunOutput:
    variant: str
    result: object
    metrics: dict
    world: VariantWorld


def run_variant(vworld, variant, epochs=None, transcript_mode=None):
    base = vworld.base
    cfg = base.cfg
    macro_dim = cfg["macro"]["hidden_dim"] if vworld.macro_hidden is not None else 0
    mcfg = model_config(cfg)
    in_dim = mcfg.embed_dim + macro_dim
    rng = np.random.default_rng(base.seeds["init"])
    params0 = init_params(rng, in_dim, mcfg.hidden_dim, mcfg.n_layers)
    emb0 = init_embeddings(rng, base.pop_full.n_users, mcfg.embed_dim)
    epochs = epochs if epochs is not None else cfg["model"]["epochs"]

    if variant in ("fed", "no-macro", "no-pseudo", "no-noise", "no-privacy"):
        result = train(
            vworld.view,
            base.labels,
            base.train_users,
            params0,
            emb0,
            mcfg,
            vworld.privacy,
            epochs,
            base.seeds["train"],
            macro_hidden=vworld.macro_hidden,
            transcript_mode=transcript_mode,
        )
    elif variant in ("hgnn-central", "hgnn-eq3", "hgnn-noisy"):
        graph = hypergraph.build(base.pop_reported)
        sigma = (
            cfg["privacy"]["sigma_location"] if variant == "hgnn-noisy" else 0.0
        )
        result = train_centralized(
            graph,
            base.labels,
            base.train_users,
            params0,
            emb0,
            mcfg,
            epochs,
            base.seeds["train"],
            embedding_grad="local" if variant == "hgnn-central" else "full",
            propagation="detached" if variant == "hgnn-central" else "eq3",
            sigma_location=sigma,
        )
    else:
        raise ConfigError(f"unknown variant {variant!r}")

    report = eval_metrics(base, result.scores)
    return RunOutput(variant=variant, result=result, metrics=report, world=vworld)


def eval_metrics(base, scores):
    users = base.eval_users
    return metrics.metrics_report(
        scores[users], base.labels[users], base.params.r0
    )


def run_experiment(cfg, variant="fed", epochs=None, base=None, transcript_mode=None):
    if base is None:
        base = build_base_world(cfg)
    privacy = variant_privacy(cfg, variant)
    vworld = build_variant_world(base, privacy, variant_macro(cfg, variant))
    return run_variant(vworld, variant, epochs=epochs, transcript_mode=transcript_mode)


def dct_scores(base):
    """Contact-tracing flags as 0/1 scores over all users."""
    known = base.train_users[base.labels[base.train_users] == 1]
    flags = epidemic.dct_baseline(base.pop_reported, base.log, set(known.tolist()))
    return flags.astype(np.float64)


def ablate(cfg, seeds=None, epochs=None, with_dct=False):
    """One metrics row per ablation variant (means over the given seeds)."""
    seeds = list(seeds) if seeds else [cfg["seed"]]
    name_map = {"hgnn": "hgnn-eq3"}
    row_names = list(ABLATION_ROWS) + (["dct"] if with_dct else [])
    collected = {name: [] for name in row_names}
    for seed in seeds:
        run_cfg = {**cfg, "seed": seed}
        base = build_base_world(run_cfg)
        for name in row_names:
            if name == "dct":
                collected[name].append(eval_metrics(base, dct_scores(base)))
            else:
                out = run_experiment(
                    run_cfg, name_map.get(name, name), epochs=epochs, base=base
                )
                collected[name].append(out.metrics)
    rows = []
    for name in row_names:
        per_seed = collected[name]
        mean = {k: float(np.mean([m[k] for m in per_seed])) for k in per_seed[0]}
        rows.append({"variant": name, "n_seeds": len(seeds), **mean})
    return rows


def privacy_utility_sweep(cfg, kinds, n_pseudo_values, epochs=None):
    """Grid over decoy generator kind and decoy count.

    Each grid point trains the federated model under that obfuscation,
    runs the localization attack, and reports attack error alongside
    eval AUC and F1.
    """
    rows = []
    base = build_base_world(cfg)
    for kind in kinds:
        for n_p in n_pseudo_values:
            run_cfg = {
                **cfg,
                "privacy": {**cfg["privacy"], "generator": kind, "n_pseudo": int(n_p)},
            }
            run_base = replace(base, cfg=run_cfg)
            privacy = privacy_config(run_cfg)
            vworld = build_variant_world(
                run_base, privacy, variant_macro(run_cfg, "fed")
            )
            out = run_variant(vworld, "fed", epochs=epochs)
            if n_p > 0:
                obs = ObservationLog.from_view(vworld.view)
                attack = localization_attack(
                    obs,
                    base.aggregate_model.visit_dist,
                    base.aggregate_model.transition,
                )
                attack_error = attack.error_rate
            else:
                attack_error = 0.0
            rows.append(
                {
                    "kind": kind,
                    "n_p": int(n_p),
                    "sigma_l": run_cfg["privacy"]["sigma_location"],
                    "attack_error": float(attack_error),
                    "auc": out.metrics["auc"],
                    "f1": out.metrics["f1"],
                }
            )
    return rows


def run_gradient_attack(cfg, epochs=None, base=None):
    """Train with a recording transcript, then run the norm adversary."""
    out = run_experiment(cfg, "fed", epochs=epochs, base=base, transcript_mode="norms")
    report = gradient_inference_attack(
        out.world.view,
        out.result.transcript,
        threshold=cfg["attacks"]["gradient_threshold"],
    )
    return out, report


def export_predictions_csv(path, scores):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("user_id,score\n")
        for u, s in enumerate(scores):
            fh.write(f"{u},{float(s)!r}\n")


def save_checkpoint(path, result, seed):
    arrays = {
        f"hidden{i}": w for i, w in enumerate(result.server.params.hidden)
    }
    np.savez_compressed(
        path,
        version=1,
        seed=seed,
        epoch=result.server.epoch,
        head=result.server.params.head,
        embeddings=result.embeddings,
        n_hidden=len(result.server.params.hidden),
        **arrays,
    )


def load_checkpoint(path):
    data = np.load(path)
    hidden = [data[f"hidden{i}"] for i in range(int(data["n_hidden"]))]
    return {
        "params": ModelParams(hidden=hidden, head=data["head"]),
        "embeddings": data["embeddings"],
        "epoch": int(data["epoch"]),
        "seed": int(data["seed"]),
    }


def ensure_dir(path):
    os.makedirs(path, exist_ok=True)
    return path
