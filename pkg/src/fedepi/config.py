"""Experiment configuration: defaults, YAML loading, dotted overrides,
and the reproduction manifest."""

from __future__ import annotations

import copy
import hashlib
import json
from importlib import metadata

import numpy as np
import yaml

from .errors import ConfigError

DEFAULT_CONFIG = {
    "seed": 7,
    "output_dir": "runs/out",
    "mobility": {
        "n_users": 2000,
        "n_regions": 300,
        "n_intervals": 168,  # 14 days of 2-hour intervals
        "interval_hours": 2.0,
        "eta": 1.0,  # reported fraction of trajectory cells
        "leisure_prob": 0.3,
        "kernel_scale_km": 2.0,
        "trace_csv": None,  # ingest instead of generating when set
    },
    "disease": {
        "preset": "sars-cov-2",  # or null with explicit beta/alpha/mu
        "beta": None,
        "alpha": None,
        "mu": None,
        "asymptomatic_fraction": 0.3,
        "n_seed_infections": 40,
        "train_fraction": 0.4,
    },
    "model": {
        "embed_dim": 16,
        "hidden_dim": 16,
        "n_layers": 2,
        "lr": 0.001,
        "epochs": 500,
        "dropout": 0.2,
        "weight_decay": 0.0005,
        "optimizer": "adam",
    },
    "privacy": {
        "epsilon": 1.0,
        "delta": 0.001,
        "clip_location": 0.1,
        "sigma_location": 0.1,
        "clip_gradient": 0.1,
        "sigma_gradient": 0.1,
        "n_pseudo": 2,
        "generator": "epidemic",  # or uniform_iid / aggregate_iid / aggregate_walk
        "gamma": 1.0,
        "epsilon_floor": 1.0e-4,
        "n_clusters": None,  # default max(2, M // 20)
    },
    "macro": {
        "enabled": True,
        "hidden_dim": 8,
        "diffusion_steps": 2,
        "horizon": 12,  # intervals ahead (one day at 2-hour granularity)
        "encoder_len": 24,
        "epochs": 40,
        "lr": 0.01,
    },
    "attacks": {
        "record_transcript": False,
        "gradient_threshold": None,
    },
}


def _merge(base, override, path=""):
    out = copy.deepcopy(base)
    for key, value in override.items():
        dotted = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key: {dotted}")
        if isinstance(base[key], dict) and isinstance(value, dict):
            out[key] = _merge(base[key], value, dotted)
        elif isinstance(base[key], dict):
            raise ConfigError(f"config key {dotted} expects a mapping")
        else:
            out[key] = value
    return out


def load_config(path=None, overrides=()):
    """Defaults, optionally merged with a YAML file and dotted overrides."""
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        with open(path, "r", encoding="utf-8") as fh:
            data = yaml.safe_load(fh) or {}
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        cfg = _merge(cfg, data)
    for item in overrides:
        cfg = apply_override(cfg, item)
    return cfg


def apply_override(cfg, item):
    """Apply one ``dotted.key=value`` override; values parse as YAML."""
    if "=" not in item:
        raise ConfigError(f"override must look like key.path=value, got {item!r}")
    dotted, raw = item.split("=", 1)
    keys = dotted.strip().split(".")
    value = yaml.safe_load(raw)
    node = {}
    leaf = node
    for key in keys[:-1]:
        leaf[key] = {}
        leaf = leaf[key]
    leaf[keys[-1]] = value
    return _merge(cfg, node)


def config_hash(cfg):
    canonical = json.dumps(cfg, sort_keys=True, default=str)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def stage_seeds(root_seed):
    """Named, stable per-stage seed sequences derived from the root seed."""
    names = (
        "mobility",
        "epidemic",
        "split",
        "subsample",
        "pseudo",
        "view",
        "train",
        "attack",
        "init",
        "macro",
    )
    children = np.random.SeedSequence(root_seed).spawn(len(names))
    return dict(zip(names, children))


def write_manifest(path, cfg, extra=None):
    try:
        version = metadata.version("fedepi")
    except metadata.PackageNotFoundError:
        version = "unknown"
    manifest = {
        "config": cfg,
        "config_hash": config_hash(cfg),
        "seed": cfg.get("seed"),
        "versions": {
            "fedepi": version,
            "numpy": np.__version__,
        },
    }
    if extra:
        manifest.update(extra)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")
    return manifest
