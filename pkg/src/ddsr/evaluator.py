"""Leave-one-out evaluation with full-catalog ranking.

Every user contributes one ground-truth target (validation or test); the
catalog is ranked for each user and the target's rank feeds Recall@K and
NDCG@K for K in {10, 50}, overall and split by the target's popularity
bucket.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .inference import denoise_batch, rank_items
from .seeding import spawn

METRIC_KS = (10, 50)


def recall_at_k(rank, k):
    """1 when the single relevant item sits within the top k."""
    if rank < 1:
        raise ValueError(f"rank must be >= 1, got {rank}")
    return 1 if rank <= k else 0


def ndcg_at_k(rank, k):
    """Discounted gain of the single relevant item; ideal DCG is 1."""
    if rank < 1:
        raise ValueError(f"rank must be >= 1, got {rank}")
    if rank > k:
        return 0.0
    return 1.0 / np.log2(rank + 1.0)


@dataclass(frozen=True)
class MetricsReport:
    split: str
    num_users: int
    skipped: int
    metrics: dict  # e.g. {"recall@10": ..., "ndcg@10": ..., ...}
    buckets: dict  # bucket name -> {"users": n, metrics...}
    fingerprint: str = ""
    ranks: np.ndarray = field(default=None, repr=False, compare=False)

    def to_dict(self):
        return {
            "split": self.split,
            "num_users": self.num_users,
            "skipped": self.skipped,
            "metrics": {k: float(v) for k, v in self.metrics.items()},
            "buckets": {
                name: {k: (int(v) if k == "users" else float(v)) for k, v in vals.items()}
                for name, vals in self.buckets.items()
            },
            "fingerprint": self.fingerprint,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def to_markdown(self):
        cols = ["R@10", "N@10", "R@50", "N@50"]
        keys = ["recall@10", "ndcg@10", "recall@50", "ndcg@50"]
        lines = [
            "| segment | users | " + " | ".join(cols) + " |",
            "|---|---|" + "---|" * len(cols),
        ]

        def row(name, users, vals):
            cells = " | ".join(f"{vals[k]:.4f}" for k in keys)
            return f"| {name} | {users} | {cells} |"

        lines.append(row("overall", self.num_users, self.metrics))
        for name, vals in self.buckets.items():
            lines.append(row(name, vals["users"], vals))
        return "\n".join(lines) + "\n"


def config_fingerprint(obj):
    """Stable hash of a JSON-serializable configuration blob."""
    payload = json.dumps(obj, sort_keys=True, default=str).encode("utf-8")
    return hashlib.sha256(payload).hexdigest()[:16]


def _means(ranks):
    out = {}
    for k in METRIC_KS:
        out[f"recall@{k}"] = float(np.mean([recall_at_k(r, k) for r in ranks])) if ranks else 0.0
        out[f"ndcg@{k}"] = float(np.mean([ndcg_at_k(r, k) for r in ranks])) if ranks else 0.0
    return out


def metrics_from_ranks(ranks, bucket_of=None):
    """Aggregate 1-based ranks into the report metric dict(s)."""
    overall = _means(list(ranks))
    buckets = {}
    if bucket_of is not None:
        for name in ("long_tail", "popular"):
            sub = [r for r, b in zip(ranks, bucket_of) if b == name]
            buckets[name] = {"users": len(sub), **_means(sub)}
    return overall, buckets


def evaluate(
    model,
    code_map,
    codebook,
    transition,
    dataset,
    buckets,
    infer_config,
    split="test",
    batch_size=256,
    user_subset=None,
    fingerprint="",
):
    """Rank the catalog for every user of a split and aggregate metrics.

    ``user_subset`` restricts evaluation to the given user indices (used
    for fast validation during training). Users whose target is missing
    from the code map are skipped and counted.
    """
    if split not in {"valid", "test"}:
        raise ValueError(f"split must be 'valid' or 'test', got {split!r}")
    users = np.arange(dataset.num_users) if user_subset is None else np.asarray(user_subset)
    targets = dataset.valid_targets if split == "valid" else dataset.test_targets

    lt_mask = np.zeros(code_map.num_items, dtype=bool)
    if buckets is not None:
        lt_mask[buckets.long_tail] = True

    ranks, bucket_of, skipped = [], [], 0
    maxpos = model.config.max_positions
    for start in range(0, users.size, batch_size):
        chunk = users[start : start + batch_size]
        seqs = []
        kept = []
        for u in chunk:
            items = dataset.valid_input(u) if split == "valid" else dataset.test_input(u)
            tgt = int(targets[u])
            if tgt >= code_map.num_items or len(items) == 0:
                skipped += 1
                continue
            seqs.append(items[-maxpos:])
            kept.append(u)
        if not kept:
            continue
        L = max(len(s) for s in seqs)
        codes = np.zeros((len(kept), L, code_map.m), dtype=np.int64)
        mask = np.zeros((len(kept), L), dtype=bool)
        for i, s in enumerate(seqs):
            codes[i, : len(s)] = code_map.codes[list(s)]
            mask[i, : len(s)] = True
        _, dists = denoise_batch(
            codes, mask, model, transition, infer_config,
            seed=spawn(infer_config.seed, start),
        )
        for i, u in enumerate(kept):
            ranked = rank_items(dists[i], code_map, codebook, infer_config)
            r = ranked.rank_of(int(targets[u]))
            ranks.append(r)
            if buckets is not None:
                bucket_of.append("long_tail" if lt_mask[targets[u]] else "popular")

    overall, per_bucket = metrics_from_ranks(ranks, bucket_of if buckets is not None else None)
    return MetricsReport(
        split=split,
        num_users=len(ranks),
        skipped=skipped,
        metrics=overall,
        buckets=per_bucket,
        fingerprint=fingerprint,
        ranks=np.asarray(ranks, dtype=np.int64),
    )
