"""Recommendation by iterative reverse refinement.

The reverse chain starts from the clean history codes (not from noise):
x_T is the tokenized history, and each stride runs the model to get
per-block estimates of the denoised codes, then samples the stride
posterior. Because block i is trained to predict item i+1, its output
serves as that block's denoising target, so refinement pulls every
block toward its successor and the last block toward the next item.
The last block's predicted distributions from the final forward pass
score the whole catalog.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffusion, kernels
from .seeding import as_generator


@dataclass(frozen=True)
class InferenceConfig:
    S: int = 20  # skip divisor: strides of k = floor(T/S) steps
    ranking: str = "logprob"  # logprob | nearest
    readout: str = "clean"  # clean | final: which pass scores the catalog
    seed: int = 0

    def __post_init__(self):
        if self.S < 1:
            raise ValueError(f"S must be >= 1, got {self.S}")
        if self.ranking not in {"logprob", "nearest"}:
            raise ValueError(f"unknown ranking mode {self.ranking!r}")
        if self.readout not in {"clean", "final"}:
            raise ValueError(f"unknown readout mode {self.readout!r}")


@dataclass(frozen=True)
class RankedList:
    items: np.ndarray  # all catalog items, best first
    scores: np.ndarray  # matching scores, non-increasing
    _rank_of: np.ndarray  # item index -> 1-based rank

    def rank_of(self, item):
        return int(self._rank_of[item])

    def top(self, n):
        return self.items[:n], self.scores[:n]


def _softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _last_valid_index(item_mask):
    counts = item_mask.sum(axis=1)
    if np.any(counts == 0):
        raise ValueError("every sequence needs at least one item")
    return counts - 1


def denoise_batch(codes, item_mask, model, transition, config, seed=None):
    """Refine a padded batch of histories.

    Returns (final codes, per-user last-block distributions (B, m, K)).
    With no transition (the no-diffusion ablation) this is a single
    forward pass at t=0 on the clean history.

    The readout mode picks which distributions come back for catalog
    ranking. "clean" evaluates the denoiser once on the intact history at
    step 0, the regime it was trained to treat as uncorrupted, before the
    refinement chain runs; "final" takes the last pass of the chain. With
    an aggressive schedule the chain passes all run at high steps, where
    the denoiser was trained to discount token content (the first stride
    already collapses the state toward the prior), so "clean" is the
    informative choice for ranking while "final" reflects the
    distribution the returned codes were actually sampled from.
    """
    codes = np.asarray(codes, dtype=np.int64)
    if codes.ndim == 2:
        codes = codes[None]
    B, L, m = codes.shape
    if item_mask is None:
        item_mask = np.ones((B, L), dtype=bool)
    item_mask = np.asarray(item_mask, dtype=bool)
    maxpos = model.config.max_positions
    if L > maxpos:
        codes = codes[:, -maxpos:]
        item_mask = item_mask[:, -maxpos:]
        L = maxpos
    last = _last_valid_index(item_mask)
    rows = np.arange(B)

    if transition is None:
        logits = model.forward(codes, np.zeros(B, dtype=np.int64), item_mask)
        dists = _softmax(logits)
        return codes.copy(), dists[rows, last]

    T = transition.T
    if config.S > T:
        raise ValueError(f"skip divisor S={config.S} exceeds T={T}")
    k = T // config.S
    n_steps = T // k
    rng = as_generator(config.seed if seed is None else seed)
    readout = None
    if config.readout == "clean":
        logits = model.forward(codes, np.zeros(B, dtype=np.int64), item_mask)
        readout = _softmax(logits)
    x = codes.copy()
    dists = None
    t = T
    for _ in range(n_steps):
        logits = model.forward(x, np.full(B, t, dtype=np.int64), item_mask)
        dists = _softmax(logits)
        x = diffusion.reverse_step(x, dists, transition, t, k, rng)
        t -= k
    # any remainder t > 0 is the skipped partial step; x stands as x_0
    if readout is None:
        readout = dists
    return x, readout[rows, last]


def denoise_sequence(history_codes, model, transition, config, seed=None):
    """Single-sequence wrapper; returns (final codes, (m, K) distributions)."""
    history_codes = np.asarray(history_codes, dtype=np.int64)
    if history_codes.ndim != 2 or history_codes.shape[0] < 1:
        raise ValueError("history_codes must be (items, m) with at least one item")
    out, dists = denoise_batch(history_codes[None], None, model, transition, config, seed)
    return out[0], dists[0]


def score_catalog(last_block_dists, code_map, codebook, config):
    """Raw per-item scores under the configured ranking rule."""
    dists = np.asarray(last_block_dists, dtype=np.float64)
    if dists.shape != (code_map.m, code_map.K):
        raise ValueError(f"expected {(code_map.m, code_map.K)} distributions, got {dists.shape}")
    if config.ranking == "logprob":
        logp = np.log(dists + 1e-12)
        return kernels.score_code_tuples(logp, code_map.codes)
    tables = (
        codebook.distance_tables()
        if codebook is not None and codebook.centroids is not None
        else None
    )
    if tables is None:
        from .tokenizer import Codebook

        tables = Codebook(
            method="random", m=code_map.m, K=code_map.K
        ).distance_tables()
    q = dists.argmax(axis=1)
    score = np.zeros(code_map.num_items, dtype=np.float64)
    for p in range(code_map.m):
        score -= tables[p, q[p]][code_map.codes[:, p]]
    return score


def rank_items(last_block_dists, code_map, codebook, config):
    """Order the full catalog: score desc, then popularity desc, then index."""
    scores = score_catalog(last_block_dists, code_map, codebook, config)
    v = scores.shape[0]
    pop = (
        code_map.popularity
        if code_map.popularity is not None
        else np.zeros(v, dtype=np.int64)
    )
    order = np.lexsort((np.arange(v), -pop, -scores))
    rank_of = np.empty(v, dtype=np.int64)
    rank_of[order] = np.arange(1, v + 1)
    return RankedList(items=order, scores=scores[order], _rank_of=rank_of)
