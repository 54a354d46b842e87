"""Training loop: corrupt histories, predict clean next-item codes.

Each batch draws one diffusion step t per example (uniform over [0, T],
so t=0 clean batches are part of the schedule), corrupts the history
codes at that step, and minimizes masked cross-entropy between the
model's per-block predictions and the clean codes of each block's next
item. Validation NDCG@10 drives best-checkpoint selection and early
stopping; importance-mode transition matrices are rebuilt from the
model's current code embeddings between epochs.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import diffusion
from .evaluator import evaluate
from .inference import InferenceConfig
from .model import Approximator, ApproximatorConfig, loss_ce_with_grad
from .optim import Adam, clip_global_norm
from .seeding import spawn


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 128
    lr: float = 3e-4
    max_epochs: int = 50
    patience: int = 10
    refresh_every: int = 1  # epochs between importance-matrix rebuilds
    grad_clip: float = 5.0
    seed: int = 0
    valid_sample: int = 0  # 0 evaluates every user each epoch
    valid_batch: int = 256

    def __post_init__(self):
        if self.patience < 1:
            raise ValueError(f"patience must be >= 1, got {self.patience}")
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.batch_size < 1 or self.max_epochs < 1 or self.refresh_every < 1:
            raise ValueError("batch_size, max_epochs, refresh_every must be >= 1")


@dataclass
class Checkpoint:
    params: dict
    model_config: ApproximatorConfig
    best_valid_ndcg10: float
    best_epoch: int
    epochs_run: int
    log: list = field(default_factory=list)
    halted: str = ""


def code_embedding_distances(model, shared=True):
    """Pairwise squared distances between current code embeddings.

    Shared mode pools by averaging the per-slot distance matrices into
    one K x K table; otherwise a list of per-slot tables is returned.
    """
    emb = np.asarray(model.code_embeddings(), dtype=np.float64)
    if not np.all(np.isfinite(emb)):
        raise FloatingPointError("code embeddings contain non-finite values")
    tables = []
    for p in range(emb.shape[0]):
        x = emb[p]
        sq = (x * x).sum(axis=1)
        d2 = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
        d2 = np.maximum(d2, 0.0)
        d2 = 0.5 * (d2 + d2.T)
        np.fill_diagonal(d2, 0.0)
        tables.append(d2)
    if shared:
        return np.mean(tables, axis=0)
    return tables


def refresh_importance(model, transition):
    """Rebuild importance transition caches from current embeddings."""
    if transition.mode != "importance":
        raise ValueError("refresh_importance needs an importance transition")
    if isinstance(transition, diffusion.PerPositionTransitions):
        transition.refresh(code_embedding_distances(model, shared=False))
    else:
        transition.refresh(code_embedding_distances(model, shared=True))
    return transition


def _build_examples(dataset, maxpos):
    """Item-index training sequences (>= 2 items each), newest kept."""
    examples = []
    for seq in dataset.train_items:
        if len(seq) < 2:
            continue
        examples.append(np.asarray(seq[-(maxpos + 1) :], dtype=np.int64))
    if not examples:
        raise ValueError("no user has enough history to form a training pair")
    examples.sort(key=lambda s: (-len(s),))
    return examples


def _pad_batch(seqs, code_map):
    """Stack sequences into (inputs, targets, mask) code arrays."""
    b = len(seqs)
    lmax = max(len(s) - 1 for s in seqs)
    m = code_map.m
    inputs = np.zeros((b, lmax, m), dtype=np.int64)
    targets = np.zeros((b, lmax, m), dtype=np.int64)
    mask = np.zeros((b, lmax), dtype=bool)
    for i, s in enumerate(seqs):
        n = len(s) - 1
        inputs[i, :n] = code_map.codes[s[:-1]]
        targets[i, :n] = code_map.codes[s[1:]]
        mask[i, :n] = True
    return inputs, targets, mask


def fit(
    dataset,
    code_map,
    transition,
    model,
    config,
    codebook=None,
    infer_config=None,
    log_path=None,
):
    """Train the approximator; returns the best checkpoint.

    The model is left loaded with the best parameters. ``log_path``, when
    given, receives one JSON line per epoch.
    """
    maxpos = model.config.max_positions
    examples = _build_examples(dataset, maxpos)
    batches = [
        examples[i : i + config.batch_size]
        for i in range(0, len(examples), config.batch_size)
    ]
    T = transition.T if transition is not None else 0
    if infer_config is None:
        infer_config = InferenceConfig(
            S=max(1, min(20, T)) if T else 1, seed=config.seed
        )

    subset = None
    if config.valid_sample and config.valid_sample < dataset.num_users:
        subset = np.sort(
            spawn(config.seed, 101).choice(
                dataset.num_users, size=config.valid_sample, replace=False
            )
        )

    opt = Adam(model.params, lr=config.lr)
    best_params = model.clone_params()
    best_metric = -np.inf
    best_epoch = 0
    since_improve = 0
    log_records = []
    halted = ""
    log_fh = open(log_path, "a", encoding="utf-8") if log_path else None

    def validate():
        report = evaluate(
            model, code_map, codebook, transition, dataset, None,
            infer_config, split="valid", batch_size=config.valid_batch,
            user_subset=subset,
        )
        return report.metrics["ndcg@10"]

    epoch = 0
    try:
        for epoch in range(1, config.max_epochs + 1):
            rng = spawn(config.seed, 1000 + epoch)
            losses = []
            for bi in rng.permutation(len(batches)):
                inputs, targets, mask = _pad_batch(batches[bi], code_map)
                b = inputs.shape[0]
                if transition is not None:
                    t = rng.integers(0, T + 1, size=b)
                    corrupted = diffusion.corrupt_batch(inputs, transition, t, rng)
                else:
                    t = np.zeros(b, dtype=np.int64)
                    corrupted = inputs
                logits, cache = model.forward(
                    corrupted, t, mask, train=True, rng=rng, want_cache=True
                )
                loss, dlogits = loss_ce_with_grad(logits, targets, mask)
                if not np.isfinite(loss):
                    halted = f"non-finite loss at epoch {epoch}"
                    break
                grads = model.backward(cache, dlogits)
                clip_global_norm(grads, config.grad_clip)
                opt.step(grads)
                losses.append(loss)
            if halted:
                break
            if (
                transition is not None
                and transition.mode == "importance"
                and epoch % config.refresh_every == 0
            ):
                refresh_importance(model, transition)
            ndcg = validate()
            record = {
                "epoch": epoch,
                "loss": float(np.mean(losses)) if losses else float("nan"),
                "valid_ndcg10": float(ndcg),
                "lr": config.lr,
            }
            log_records.append(record)
            if log_fh:
                log_fh.write(json.dumps(record) + "\n")
                log_fh.flush()
            if ndcg > best_metric:
                best_metric = ndcg
                best_params = model.clone_params()
                best_epoch = epoch
                since_improve = 0
            else:
                since_improve += 1
                if since_improve >= config.patience:
                    break
    finally:
        if log_fh:
            log_fh.close()

    model.load_params(best_params)
    return Checkpoint(
        params=best_params,
        model_config=model.config,
        best_valid_ndcg10=float(best_metric) if np.isfinite(best_metric) else 0.0,
        best_epoch=best_epoch,
        epochs_run=epoch,
        log=log_records,
        halted=halted,
    )


def save_checkpoint(dir_path, checkpoint, tokenizer_hash=""):
    """Write params.npz plus manifest.json into a directory."""
    os.makedirs(dir_path, exist_ok=True)
    np.savez(os.path.join(dir_path, "params.npz"), **checkpoint.params)
    manifest = {
        "model": asdict(checkpoint.model_config),
        "best_valid_ndcg10": checkpoint.best_valid_ndcg10,
        "best_epoch": checkpoint.best_epoch,
        "epochs_run": checkpoint.epochs_run,
        "tokenizer_hash": tokenizer_hash,
        "halted": checkpoint.halted,
    }
    with open(os.path.join(dir_path, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)
        fh.write("\n")


def load_checkpoint(dir_path):
    """Re-create the model from a checkpoint directory."""
    with open(os.path.join(dir_path, "manifest.json"), encoding="utf-8") as fh:
        manifest = json.load(fh)
    cfg_kwargs = dict(manifest["model"])
    cfg = ApproximatorConfig(**cfg_kwargs)
    model = Approximator(cfg, seed=0)
    with np.load(os.path.join(dir_path, "params.npz")) as data:
        model.load_params({k: data[k] for k in data.files})
    return model, manifest
