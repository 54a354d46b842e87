"""Run configuration: one JSON document drives every pipeline stage.

Sections: data, tokenizer, diffusion, model, train, infer, plus a top
level seed and out_dir. Values merge over defaults; unknown keys are
rejected before any work starts, as are m/K inconsistencies (the
tokenizer's m and K are canonical and propagate to the diffusion state
space and the model heads). The DDSR_SEED environment variable
overrides the document seed.
"""

from __future__ import annotations

import copy
import json
import os

from .diffusion import DiffusionConfig
from .inference import InferenceConfig
from .model import ApproximatorConfig
from .tokenizer import TokenizerConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    """Raised for unusable configuration before any compute happens."""


DEFAULTS = {
    "seed": 0,
    "out_dir": "runs/default",
    "data": {
        "interactions": None,
        "texts": None,
        "embeddings": None,
        "min_count": 5,
        "popularity_threshold": 5,
        "synthetic": None,  # e.g. {"num_items": 1000, "num_users": 2000, ...}
    },
    "tokenizer": {
        "method": "pq",
        "m": 4,
        "K": 64,
        "kmeans_iters": 25,
        "rqvae_beta": 0.25,
        "rqvae_hidden": [512, 256, 128],
        "rqvae_epochs": 200,
        "rqvae_lr": 1e-3,
    },
    "diffusion": {
        "transition": "uniform",
        "T": 100,
        "cosine_s": 0.008,
        "sigma_sq_low": 1e-4,
        "sigma_sq_high": 0.02,
        "shared_matrix": True,
    },
    "model": {
        "d": 64,
        "layers": 2,
        "heads": 4,
        "ff": 0,
        "dropout": 0.1,
        "max_positions": 64,
    },
    "train": {
        "batch_size": 128,
        "lr": 3e-4,
        "max_epochs": 30,
        "patience": 10,
        "refresh_every": 1,
        "grad_clip": 5.0,
        "valid_sample": 256,
        "valid_batch": 256,
    },
    "infer": {
        "S": 20,
        "ranking": "logprob",
        "readout": "clean",
    },
}

SYNTHETIC_DEFAULTS = {
    "num_items": 1000,
    "num_users": 2000,
    "clusters": 20,
    "markov_sharpness": 0.9,
    "embed_dim": 16,
    "min_len": 8,
    "max_len": 24,
    "jitter": 0.35,
}


def _merge(base, override, path=""):
    out = copy.deepcopy(base)
    for key, val in override.items():
        here = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key {here!r}")
        if isinstance(base[key], dict) and isinstance(val, dict):
            out[key] = _merge(base[key], val, here)
        else:
            out[key] = copy.deepcopy(val)
    return out


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(cfg, dotted, value):
    """Set a dot-path key, e.g. train.lr=0.001."""
    parts = dotted.split(".")
    node = cfg
    for part in parts[:-1]:
        if not isinstance(node, dict) or part not in node:
            raise ConfigError(f"unknown config key {dotted!r}")
        node = node[part]
    leaf = parts[-1]
    if not isinstance(node, dict) or leaf not in node:
        raise ConfigError(f"unknown config key {dotted!r}")
    node[leaf] = _parse_value(value) if isinstance(value, str) else value


def load_config(path=None, overrides=(), env=None):
    """Resolve the effective config from file + overrides + environment."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        if not os.path.exists(path):
            raise ConfigError(f"config file not found: {path}")
        with open(path, encoding="utf-8") as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"config is not valid JSON: {exc}") from None
        if not isinstance(doc, dict):
            raise ConfigError("config document must be a JSON object")
        syn = doc.get("data", {}).get("synthetic")
        cfg = _merge(cfg, doc)
        if isinstance(syn, dict):
            unknown = set(syn) - set(SYNTHETIC_DEFAULTS)
            if unknown:
                raise ConfigError(f"unknown data.synthetic keys {sorted(unknown)}")
            cfg["data"]["synthetic"] = {**SYNTHETIC_DEFAULTS, **syn}
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must look like key=value, got {item!r}")
        key, value = item.split("=", 1)
        apply_override(cfg, key, value)
    env = os.environ if env is None else env
    if "DDSR_SEED" in env:
        try:
            cfg["seed"] = int(env["DDSR_SEED"])
        except ValueError:
            raise ConfigError(
                f"DDSR_SEED must be an integer, got {env['DDSR_SEED']!r}"
            ) from None
    validate(cfg)
    return cfg


def validate(cfg):
    """Reject inconsistent configs before any compute."""
    tok = cfg["tokenizer"]
    if tok["m"] < 1 or tok["K"] < 2:
        raise ConfigError(f"tokenizer needs m >= 1 and K >= 2, got {tok['m']}, {tok['K']}")
    if cfg["diffusion"]["transition"] not in {"uniform", "importance", "none"}:
        raise ConfigError(f"unknown diffusion.transition {cfg['diffusion']['transition']!r}")
    if cfg["infer"]["ranking"] not in {"logprob", "nearest"}:
        raise ConfigError(f"unknown infer.ranking {cfg['infer']['ranking']!r}")
    if cfg["infer"]["readout"] not in {"clean", "final"}:
        raise ConfigError(f"unknown infer.readout {cfg['infer']['readout']!r}")
    if cfg["diffusion"]["T"] < 1:
        raise ConfigError("diffusion.T must be >= 1")
    if cfg["infer"]["S"] < 1:
        raise ConfigError("infer.S must be >= 1")
    if cfg["diffusion"]["transition"] != "none" and cfg["infer"]["S"] > cfg["diffusion"]["T"]:
        raise ConfigError(
            f"infer.S={cfg['infer']['S']} exceeds diffusion.T={cfg['diffusion']['T']}"
        )
    if cfg["model"]["d"] % cfg["model"]["heads"] != 0:
        raise ConfigError("model.d must be divisible by model.heads")
    syn = cfg["data"]["synthetic"]
    if syn is not None and not isinstance(syn, dict):
        raise ConfigError("data.synthetic must be an object or null")


def tokenizer_config(cfg, method=None):
    tok = cfg["tokenizer"]
    return TokenizerConfig(
        method=method or tok["method"],
        m=int(tok["m"]),
        K=int(tok["K"]),
        rqvae_beta=float(tok["rqvae_beta"]),
        rqvae_hidden=tuple(int(w) for w in tok["rqvae_hidden"]),
        kmeans_iters=int(tok["kmeans_iters"]),
        seed=int(cfg["seed"]),
    )


def diffusion_config(cfg, transition=None):
    d = cfg["diffusion"]
    return DiffusionConfig(
        K=int(cfg["tokenizer"]["K"]),
        T=int(d["T"]),
        transition=transition or d["transition"],
        cosine_s=float(d["cosine_s"]),
        sigma_sq_low=float(d["sigma_sq_low"]),
        sigma_sq_high=float(d["sigma_sq_high"]),
        shared_matrix=bool(d["shared_matrix"]),
    )


def model_config(cfg):
    m = cfg["model"]
    return ApproximatorConfig(
        m=int(cfg["tokenizer"]["m"]),
        K=int(cfg["tokenizer"]["K"]),
        d=int(m["d"]),
        layers=int(m["layers"]),
        heads=int(m["heads"]),
        ff=int(m["ff"]),
        dropout=float(m["dropout"]),
        max_positions=int(m["max_positions"]),
    )


def train_config(cfg):
    t = cfg["train"]
    return TrainConfig(
        batch_size=int(t["batch_size"]),
        lr=float(t["lr"]),
        max_epochs=int(t["max_epochs"]),
        patience=int(t["patience"]),
        refresh_every=int(t["refresh_every"]),
        grad_clip=float(t["grad_clip"]),
        seed=int(cfg["seed"]),
        valid_sample=int(t["valid_sample"]),
        valid_batch=int(t["valid_batch"]),
    )


def infer_config(cfg):
    i = cfg["infer"]
    return InferenceConfig(
        S=int(i["S"]), ranking=i["ranking"], readout=i["readout"], seed=int(cfg["seed"])
    )
