"""Command line pipeline: prepare, tokenize, train, evaluate, recommend, ablate.

Every command reads one JSON config document (merged over defaults,
overridable with --set dot.path=value) and works inside out_dir.
Artifacts: catalog.json and split.json (prepare), codebook.json
(tokenize), checkpoint/ and train_log.jsonl (train), metrics.json and
metrics.md (evaluate), ablation.json and ablation.md (ablate).

Exit codes: 0 success, 2 config or validation error, 3 missing artifact
dependency, 4 runtime failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys

import numpy as np

from . import corpus, diffusion, tokenizer, trainer
from .config import (
    SYNTHETIC_DEFAULTS,
    ConfigError,
    diffusion_config,
    infer_config,
    load_config,
    model_config,
    tokenizer_config,
    train_config,
)
from .evaluator import config_fingerprint, evaluate
from .model import Approximator
from .seeding import spawn

log = logging.getLogger(__name__)


class MissingArtifact(Exception):
    """A pipeline stage requires an output of an earlier stage."""


def _path(cfg, name):
    return os.path.join(cfg["out_dir"], name)


def _require(path, hint):
    if not os.path.exists(path):
        raise MissingArtifact(f"missing {path}; run `ddsr {hint}` first")
    return path


def _save_catalog(path, catalog):
    doc = {
        "item_ids": list(catalog.item_ids),
        "popularity": [int(v) for v in catalog.popularity],
        "texts": list(catalog.texts) if catalog.texts is not None else None,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True)
        fh.write("\n")


def _load_catalog(path):
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    return corpus.Catalog(
        item_ids=tuple(doc["item_ids"]),
        popularity=np.asarray(doc["popularity"], dtype=np.int64),
        texts=tuple(doc["texts"]) if doc.get("texts") else None,
    )


def _save_split(path, split):
    doc = {
        "user_ids": list(split.user_ids),
        "train_items": [list(s) for s in split.train_items],
        "valid_targets": [int(v) for v in split.valid_targets],
        "test_targets": [int(v) for v in split.test_targets],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True)
        fh.write("\n")


def _load_split(path):
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    return corpus.SplitDataset(
        user_ids=tuple(doc["user_ids"]),
        train_items=tuple(tuple(s) for s in doc["train_items"]),
        valid_targets=np.asarray(doc["valid_targets"], dtype=np.int64),
        test_targets=np.asarray(doc["test_targets"], dtype=np.int64),
    )


def _load_prepared(cfg):
    catalog = _load_catalog(_require(_path(cfg, "catalog.json"), "prepare"))
    split = _load_split(_require(_path(cfg, "split.json"), "prepare"))
    return catalog, split


def _load_tokenized(cfg, catalog):
    path = _require(_path(cfg, "codebook.json"), "tokenize")
    codebook, code_map = tokenizer.load_codebook(path, catalog)
    with open(path, "rb") as fh:
        digest = hashlib.sha256(fh.read()).hexdigest()[:16]
    return codebook, code_map, digest


def _embeddings_path(cfg):
    if cfg["data"]["embeddings"]:
        return cfg["data"]["embeddings"]
    return _path(cfg, "embeddings.jsonl")


def _build_transition(cfg, model):
    dconf = diffusion_config(cfg)
    if dconf.transition == "none":
        return None
    if dconf.transition == "uniform":
        return diffusion.build_transition_model(dconf)
    shared = dconf.shared_matrix
    d2 = trainer.code_embedding_distances(model, shared=shared)
    return diffusion.build_transition_model(dconf, d2)


def cmd_prepare(cfg, args):
    os.makedirs(cfg["out_dir"], exist_ok=True)
    syn = cfg["data"]["synthetic"]
    if args.synthetic and syn is None:
        syn = dict(SYNTHETIC_DEFAULTS)
    if syn is not None:
        syn = {**SYNTHETIC_DEFAULTS, **syn}
        catalog0, sequences, emb = corpus.generate_synthetic(
            num_items=int(syn["num_items"]),
            num_users=int(syn["num_users"]),
            clusters=int(syn["clusters"]),
            markov_sharpness=float(syn["markov_sharpness"]),
            seed=int(cfg["seed"]),
            embed_dim=int(syn["embed_dim"]),
            min_len=int(syn["min_len"]),
            max_len=int(syn["max_len"]),
            jitter=float(syn["jitter"]),
        )
        corpus.write_interactions(_path(cfg, "interactions.csv"), sequences, catalog0)
        corpus.write_embeddings(_path(cfg, "embeddings.jsonl"), catalog0.item_ids, emb)
        interactions = _path(cfg, "interactions.csv")
        # the generator guarantees sequence lengths, so no k-core pruning
        min_count = 1
    else:
        interactions = cfg["data"]["interactions"]
        if not interactions:
            raise ConfigError("data.interactions is required without a synthetic section")
        _require(interactions, "prepare with an existing interactions file")
        min_count = int(cfg["data"]["min_count"])
    texts = None
    if cfg["data"]["texts"]:
        texts = corpus.load_item_texts(cfg["data"]["texts"])
    catalog, sequences = corpus.load_interactions(interactions, min_count, texts=texts)
    split = corpus.make_split(sequences)
    _save_catalog(_path(cfg, "catalog.json"), catalog)
    _save_split(_path(cfg, "split.json"), split)
    print(json.dumps({
        "users": split.num_users,
        "items": catalog.num_items,
        "interactions": int(sum(len(s.items) for s in sequences)),
    }, sort_keys=True))
    return 0


def cmd_tokenize(cfg, args):
    catalog, _ = _load_prepared(cfg)
    method = cfg["tokenizer"]["method"]
    tconf = tokenizer_config(cfg)
    if method == "random":
        code_map = tokenizer.random_codes(catalog, tconf)
        codebook = None
    else:
        ids, matrix = corpus.load_embeddings(
            _require(_embeddings_path(cfg), "prepare (or set data.embeddings)")
        )
        emb = corpus.align_embeddings(catalog, ids, matrix)
        if method == "pq":
            codebook, code_map = tokenizer.fit_pq(emb, tconf)
        else:
            state, code_map = tokenizer.fit_rqvae(
                emb, tconf,
                epochs=int(cfg["tokenizer"]["rqvae_epochs"]),
                lr=float(cfg["tokenizer"]["rqvae_lr"]),
            )
            codebook = tokenizer.rqvae_codebook(state)
    tokenizer.save_codebook(_path(cfg, "codebook.json"), codebook, code_map, catalog)
    print(json.dumps({
        "method": method,
        "items": code_map.num_items,
        "collision_groups": len(code_map.collision_groups),
        "collided_items": int(sum(len(g) for g in code_map.collision_groups)),
    }, sort_keys=True))
    return 0


def cmd_train(cfg, args):
    catalog, split = _load_prepared(cfg)
    codebook, code_map, tok_hash = _load_tokenized(cfg, catalog)
    model = Approximator(model_config(cfg), seed=int(cfg["seed"]))
    transition = _build_transition(cfg, model)
    log_path = _path(cfg, "train_log.jsonl")
    if os.path.exists(log_path):
        os.unlink(log_path)
    ckpt = trainer.fit(
        split, code_map, transition, model, train_config(cfg),
        codebook=codebook, infer_config=infer_config(cfg), log_path=log_path,
    )
    trainer.save_checkpoint(_path(cfg, "checkpoint"), ckpt, tokenizer_hash=tok_hash)
    print(json.dumps({
        "best_epoch": ckpt.best_epoch,
        "best_valid_ndcg10": ckpt.best_valid_ndcg10,
        "epochs_run": ckpt.epochs_run,
        "halted": ckpt.halted,
    }, sort_keys=True))
    return 0


def cmd_evaluate(cfg, args):
    catalog, split = _load_prepared(cfg)
    codebook, code_map, _ = _load_tokenized(cfg, catalog)
    _require(os.path.join(_path(cfg, "checkpoint"), "manifest.json"), "train")
    model, _ = trainer.load_checkpoint(_path(cfg, "checkpoint"))
    transition = _build_transition(cfg, model)
    buckets = corpus.popularity_buckets(
        catalog, int(cfg["data"]["popularity_threshold"])
    )
    report = evaluate(
        model, code_map, codebook, transition, split, buckets,
        infer_config(cfg), split=args.split,
        fingerprint=config_fingerprint(cfg),
    )
    with open(_path(cfg, "metrics.json"), "w", encoding="utf-8") as fh:
        fh.write(report.to_json())
    with open(_path(cfg, "metrics.md"), "w", encoding="utf-8") as fh:
        fh.write(report.to_markdown())
    print(report.to_json(), end="")
    return 0


def cmd_recommend(cfg, args):
    catalog, split = _load_prepared(cfg)
    codebook, code_map, _ = _load_tokenized(cfg, catalog)
    _require(os.path.join(_path(cfg, "checkpoint"), "manifest.json"), "train")
    model, _ = trainer.load_checkpoint(_path(cfg, "checkpoint"))
    transition = _build_transition(cfg, model)
    try:
        u = split.user_ids.index(args.user)
    except ValueError:
        raise MissingArtifact(f"user {args.user!r} not found in the split") from None
    history = split.test_input(u) + (int(split.test_targets[u]),)
    from .inference import denoise_sequence, rank_items

    _, dists = denoise_sequence(
        code_map.codes[list(history)], model, transition, infer_config(cfg),
        seed=spawn(cfg["seed"], 0xEC),
    )
    ranked = rank_items(dists, code_map, codebook, infer_config(cfg))
    items, scores = ranked.top(args.top)
    print(json.dumps([
        {"item_id": catalog.item_ids[int(v)], "score": float(s)}
        for v, s in zip(items, scores)
    ], indent=2))
    return 0


ABLATE_FULL = [
    (t, m)
    for t in ("uniform", "importance", "none")
    for m in ("pq", "rqvae", "random")
]
ABLATE_AXES = [
    ("uniform", "pq"),
    ("importance", "pq"),
    ("none", "pq"),
    ("uniform", "rqvae"),
    ("uniform", "random"),
]


def cmd_ablate(cfg, args):
    import copy

    # "axes" varies one design axis at a time around the uniform+pq row
    rows = ABLATE_AXES if args.rows == "axes" else ABLATE_FULL
    base_out = cfg["out_dir"]
    results = []
    for transition, method in rows:
        sub = copy.deepcopy(cfg)
        sub["out_dir"] = os.path.join(base_out, f"{transition}+{method}")
        sub["tokenizer"]["method"] = method
        sub["diffusion"]["transition"] = transition
        os.makedirs(sub["out_dir"], exist_ok=True)
        for name in ("catalog.json", "split.json", "embeddings.jsonl", "interactions.csv"):
            src = _path(cfg, name)
            dst = _path(sub, name)
            if os.path.exists(src) and not os.path.exists(dst):
                with open(src, "rb") as fi, open(dst, "wb") as fo:
                    fo.write(fi.read())
        ns = argparse.Namespace(split="test", synthetic=False)
        cmd_tokenize(sub, ns)
        cmd_train(sub, ns)
        cmd_evaluate(sub, ns)
        with open(_path(sub, "metrics.json"), encoding="utf-8") as fh:
            metrics = json.load(fh)["metrics"]
        results.append({"transition": transition, "tokenizer": method, **metrics})
    with open(_path(cfg, "ablation.json"), "w", encoding="utf-8") as fh:
        json.dump({"rows": results}, fh, sort_keys=True, indent=2)
        fh.write("\n")
    lines = [
        "| transition | tokenizer | R@10 | N@10 | R@50 | N@50 |",
        "|---|---|---|---|---|---|",
    ]
    for r in results:
        lines.append(
            f"| {r['transition']} | {r['tokenizer']} | "
            f"{r['recall@10']:.4f} | {r['ndcg@10']:.4f} | "
            f"{r['recall@50']:.4f} | {r['ndcg@50']:.4f} |"
        )
    table = "\n".join(lines) + "\n"
    with open(_path(cfg, "ablation.md"), "w", encoding="utf-8") as fh:
        fh.write(table)
    print(table, end="")
    return 0


COMMANDS = {
    "prepare": cmd_prepare,
    "tokenize": cmd_tokenize,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "recommend": cmd_recommend,
    "ablate": cmd_ablate,
}


def run(command, cfg, args=None):
    """Execute one pipeline command; returns a process exit code."""
    if command not in COMMANDS:
        raise ConfigError(f"unknown command {command!r}")
    if args is None:
        args = argparse.Namespace(split="test", synthetic=False, user=None, top=10, rows="full")
    return COMMANDS[command](cfg, args)


def build_parser():
    # SUPPRESS defaults let the shared flags appear before or after the
    # subcommand without the subparser default clobbering the root value.
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument(
        "--config", default=argparse.SUPPRESS,
        help="path to a JSON config document",
    )
    shared.add_argument(
        "--set", dest="overrides", action="append", default=argparse.SUPPRESS,
        metavar="KEY=VALUE", help="override a config key, e.g. train.lr=0.001",
    )
    shared.add_argument("--out-dir", default=argparse.SUPPRESS, help="override out_dir")
    parser = argparse.ArgumentParser(
        prog="ddsr",
        description="Sequential recommendation with discrete diffusion over semantic IDs",
        parents=[shared],
    )
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("prepare", parents=[shared]).add_argument(
        "--synthetic", action="store_true",
        help="generate the synthetic corpus even without a data.synthetic section",
    )
    sub.add_parser("tokenize", parents=[shared])
    sub.add_parser("train", parents=[shared])
    p_eval = sub.add_parser("evaluate", parents=[shared])
    p_eval.add_argument("--split", choices=["valid", "test"], default="test")
    p_rec = sub.add_parser("recommend", parents=[shared])
    p_rec.add_argument("--user", required=True)
    p_rec.add_argument("--top", type=int, default=10)
    p_abl = sub.add_parser("ablate", parents=[shared])
    p_abl.add_argument("--rows", choices=["full", "axes"], default="full")
    return parser


def main(argv=None):
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    defaults = (
        ("config", None), ("overrides", []), ("out_dir", None),
        ("split", "test"), ("synthetic", False), ("rows", "full"),
    )
    for name, default in defaults:
        if not hasattr(args, name):
            setattr(args, name, default)
    try:
        cfg = load_config(args.config, overrides=args.overrides)
        if args.out_dir:
            cfg["out_dir"] = args.out_dir
        return run(args.command, cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except MissingArtifact as exc:
        print(f"missing dependency: {exc}", file=sys.stderr)
        return 3
    except Exception as exc:  # fold data and numeric failures into one code
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
