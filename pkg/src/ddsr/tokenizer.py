"""Semantic IDs: map item embeddings to tuples of m discrete codes.

Three methods share the CodeMap output shape: product quantization
(split the embedding into m sub-vectors, k-means each), a residual
quantizer trained end to end with a small encoder/decoder (RQ-VAE), and
uniform random codes as an ablation baseline. resolve_item maps a code
tuple back to a catalog item: exact matches win (most popular item on a
collision), otherwise the item whose codes are closest in summed
per-position centroid distance.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .seeding import as_generator, spawn

log = logging.getLogger(__name__)


class TokenizerError(ValueError):
    """Raised when fitting cannot proceed (bad config or divergence)."""


@dataclass(frozen=True)
class TokenizerConfig:
    method: str = "pq"  # pq | rqvae | random
    m: int = 4
    K: int = 64
    rqvae_beta: float = 0.25  # commitment weight
    rqvae_hidden: tuple = (512, 256, 128)  # encoder widths; last = latent dim
    kmeans_iters: int = 25
    seed: int = 0

    def __post_init__(self):
        if self.method not in {"pq", "rqvae", "random"}:
            raise ValueError(f"unknown tokenizer method {self.method!r}")
        if self.m < 1 or self.K < 2:
            raise ValueError(f"need m >= 1 and K >= 2, got m={self.m}, K={self.K}")
        if self.rqvae_beta < 0:
            raise ValueError("rqvae_beta must be non-negative")


@dataclass(frozen=True)
class Codebook:
    """Per-position centroid tables; None for random IDs."""

    method: str
    m: int
    K: int
    centroids: np.ndarray = None  # (m, K, dim) or None
    meta: dict = field(default_factory=dict)

    def distance_tables(self):
        """Per-position K x K centroid Euclidean distances.

        Random IDs have no geometry; any two distinct codes sit at unit
        distance (Hamming-style fallback).
        """
        if self.centroids is None:
            d = 1.0 - np.eye(self.K)
            return np.broadcast_to(d, (self.m, self.K, self.K)).copy()
        c = self.centroids
        diff = c[:, :, None, :] - c[:, None, :, :]
        return np.sqrt(np.maximum((diff * diff).sum(axis=-1), 0.0))


@dataclass(frozen=True)
class CodeMap:
    """Item index -> semantic ID, plus collision bookkeeping."""

    codes: np.ndarray  # (V, m) int64
    K: int
    method: str
    popularity: np.ndarray = None  # optional per-item counts for tie-breaks
    collision_groups: tuple = None
    _lookup: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        codes = np.ascontiguousarray(self.codes, dtype=np.int64)
        object.__setattr__(self, "codes", codes)
        if codes.ndim != 2:
            raise ValueError(f"codes must be (items, m), got {codes.shape}")
        if np.any((codes < 0) | (codes >= self.K)):
            raise ValueError("code indices out of range")
        lookup = {}
        for v in range(codes.shape[0]):
            lookup.setdefault(tuple(codes[v]), []).append(v)
        object.__setattr__(self, "_lookup", lookup)
        if self.collision_groups is None:
            groups = tuple(
                tuple(vs) for vs in lookup.values() if len(vs) > 1
            )
            object.__setattr__(self, "collision_groups", groups)

    @property
    def num_items(self):
        return self.codes.shape[0]

    @property
    def m(self):
        return self.codes.shape[1]

    def items_with_code(self, code):
        return self._lookup.get(tuple(int(c) for c in code), [])

    def with_popularity(self, popularity):
        return CodeMap(
            codes=self.codes,
            K=self.K,
            method=self.method,
            popularity=np.asarray(popularity, dtype=np.int64),
            collision_groups=self.collision_groups,
        )


def _kmeans_pp_init(x, k, rng):
    """k-means++ seeding; may return fewer centers than asked when the
    data has fewer distinct rows."""
    n = x.shape[0]
    centers = np.empty((k, x.shape[1]), dtype=np.float64)
    centers[0] = x[int(rng.integers(n))]
    taken = 1
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            break
        r = rng.random() * total
        idx = min(int(np.searchsorted(np.cumsum(d2), r, side="right")), n - 1)
        centers[j] = x[idx]
        taken += 1
        d2 = np.minimum(d2, ((x - centers[j]) ** 2).sum(axis=1))
    return centers[:taken]


def kmeans(x, k, iters, rng):
    """Lloyd's algorithm with k-means++ seeding.

    Returns (centroids, labels, per-iteration mean distortions). Empty
    clusters keep their previous centroid, which preserves the
    non-increasing distortion guarantee.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    if n == 0:
        raise TokenizerError("cannot run k-means on zero vectors")
    distinct = np.unique(x, axis=0).shape[0]
    eff_k = min(k, distinct)
    centers = _kmeans_pp_init(x, eff_k, rng)
    eff_k = centers.shape[0]
    distortions = []
    labels = None
    for _ in range(max(iters, 1)):
        new_labels, d2 = kernels.assign_nearest(x, centers)
        distortions.append(float(d2.mean()))
        if labels is not None and np.array_equal(new_labels, labels):
            labels = new_labels
            break
        labels = new_labels
        sums = np.zeros_like(centers)
        np.add.at(sums, labels, x)
        counts = np.bincount(labels, minlength=eff_k)
        nonempty = counts > 0
        centers[nonempty] = sums[nonempty] / counts[nonempty, None]
    labels, d2 = kernels.assign_nearest(x, centers)
    distortions.append(float(d2.mean()))
    return centers, labels, distortions


def fit_pq(embeddings, config):
    """Product quantization: per-subspace k-means codes.

    The embedding is split into m contiguous sub-vectors; position p is
    coded as the index of its nearest centroid in that position's
    codebook. When a position has fewer distinct sub-vectors than K, its
    effective codebook shrinks (remaining rows are padded by cycling the
    fitted centroids so every index in [0, K) stays resolvable).
    """
    if config.method != "pq":
        raise TokenizerError(f"fit_pq needs method 'pq', got {config.method!r}")
    x = np.asarray(embeddings, dtype=np.float64)
    v, d_w = x.shape
    if d_w % config.m != 0:
        raise TokenizerError(
            f"embedding dim {d_w} not divisible by m={config.m}"
        )
    sub = d_w // config.m
    centroids = np.empty((config.m, config.K, sub), dtype=np.float64)
    codes = np.empty((v, config.m), dtype=np.int64)
    effective_k = []
    curves = []
    for p in range(config.m):
        block = x[:, p * sub : (p + 1) * sub]
        centers, labels, curve = kmeans(
            block, config.K, config.kmeans_iters, spawn(config.seed, p)
        )
        eff = centers.shape[0]
        if eff < config.K:
            log.warning(
                "position %d: only %d distinct sub-vectors, shrinking K from %d",
                p,
                eff,
                config.K,
            )
            reps = np.resize(np.arange(eff), config.K)
            centers = centers[reps]
        centroids[p] = centers
        codes[:, p] = labels
        effective_k.append(eff)
        curves.append(curve)
    codebook = Codebook(
        method="pq",
        m=config.m,
        K=config.K,
        centroids=centroids,
        meta={
            "effective_k": effective_k,
            "distortion_curves": curves,
            "kmeans_iters": config.kmeans_iters,
        },
    )
    code_map = CodeMap(codes=codes, K=config.K, method="pq")
    return codebook, code_map


def random_codes(catalog, config):
    """Uniform random semantic IDs (ablation baseline)."""
    if config.method != "random":
        raise TokenizerError(f"random_codes needs method 'random', got {config.method!r}")
    rng = spawn(config.seed, 0x7A)
    codes = rng.integers(0, config.K, size=(catalog.num_items, config.m), dtype=np.int64)
    return CodeMap(codes=codes, K=config.K, method="random")


def resolve_item(code, code_map, codebook):
    """Map a semantic ID to a catalog item.

    Exact matches return the most popular owner of that ID (lowest index
    on a popularity tie). Otherwise every item is scored by the summed
    per-position Euclidean distance between the query's centroids and
    the item's centroids, and the closest wins.
    """
    if code_map.num_items == 0:
        raise TokenizerError("cannot resolve against an empty catalog")
    code = tuple(int(c) for c in code)
    if len(code) != code_map.m or any(not (0 <= c < code_map.K) for c in code):
        raise ValueError(f"code {code} out of range for m={code_map.m}, K={code_map.K}")
    hits = code_map.items_with_code(code)
    if hits:
        if len(hits) == 1 or code_map.popularity is None:
            return hits[0]
        pops = code_map.popularity[hits]
        return hits[int(np.argmax(pops))]
    tables = codebook.distance_tables() if codebook is not None else None
    if tables is None:
        tables = Codebook(method="random", m=code_map.m, K=code_map.K).distance_tables()
    dist = np.zeros(code_map.num_items, dtype=np.float64)
    for p, q in enumerate(code):
        dist += tables[p, q][code_map.codes[:, p]]
    return int(np.argmin(dist))


# --- RQ-VAE -----------------------------------------------------------


class _MLP:
    """Fully connected stack with ReLU between layers, manual gradients."""

    def __init__(self, widths, rng):
        self.weights = []
        self.biases = []
        for a, b in zip(widths[:-1], widths[1:]):
            self.weights.append(rng.normal(0.0, np.sqrt(2.0 / a), size=(a, b)))
            self.biases.append(np.zeros(b))

    def params(self, prefix):
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{prefix}.w{i}"] = w
            out[f"{prefix}.b{i}"] = b
        return out

    def forward(self, x):
        acts = [x]
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if i != last:
                h = np.maximum(h, 0.0)
            acts.append(h)
        return h, acts

    def backward(self, acts, dout):
        grads = {}
        last = len(self.weights) - 1
        dh = dout
        for i in range(last, -1, -1):
            if i != last:
                dh = dh * (acts[i + 1] > 0.0)
            grads[f"w{i}"] = acts[i].T @ dh
            grads[f"b{i}"] = dh.sum(axis=0)
            dh = dh @ self.weights[i].T
        return dh, grads


def residual_quantize(z, codebooks):
    """Greedy residual quantization.

    Level d assigns the current residual to its nearest centroid and
    subtracts it; returns (codes, residuals per level including the
    input, summed quantization).
    """
    z = np.asarray(z, dtype=np.float64)
    n = z.shape[0]
    m = len(codebooks)
    codes = np.empty((n, m), dtype=np.int64)
    residuals = [z]
    quant = np.zeros_like(z)
    r = z
    for d, cb in enumerate(codebooks):
        labels, _ = kernels.assign_nearest(r, cb)
        chosen = cb[labels]
        codes[:, d] = labels
        quant = quant + chosen
        r = r - chosen
        residuals.append(r)
    return codes, residuals, quant


@dataclass
class RQVAEState:
    encoder: _MLP
    decoder: _MLP
    codebooks: np.ndarray  # (m, K, latent)
    config: TokenizerConfig
    loss_curve: list
    residual_norms: np.ndarray  # (m+1,) mean ||r_d|| on the training set

    def encode(self, x):
        z, _ = self.encoder.forward(np.asarray(x, dtype=np.float64))
        codes, _, _ = residual_quantize(z, self.codebooks)
        return codes


def fit_rqvae(embeddings, config, epochs=200, lr=1e-3):
    """Train the residual-quantized autoencoder and emit item codes.

    Loss per item: reconstruction ||e - e_hat||^2 plus, per level,
    ||sg[r_d] - a||^2 + beta ||r_d - sg[a]||^2 where a is the selected
    centroid and sg stops gradients. The decoder input is the summed
    quantization with a straight-through gradient to the encoder.
    Codebook rows never selected during an epoch are re-seeded to random
    encoder outputs.
    """
    if config.method != "rqvae":
        raise TokenizerError(f"fit_rqvae needs method 'rqvae', got {config.method!r}")
    from .optim import Adam  # local import to avoid a cycle at module load

    x = np.asarray(embeddings, dtype=np.float64)
    n, d_w = x.shape
    rng = spawn(config.seed, 0x5A)
    hidden = list(config.rqvae_hidden)
    latent = hidden[-1]
    enc = _MLP([d_w] + hidden, rng)
    dec = _MLP([latent] + hidden[-2::-1] + [d_w], rng)

    z0, _ = enc.forward(x)
    codebooks = np.empty((config.m, config.K, latent), dtype=np.float64)
    r = z0
    for d in range(config.m):
        if n >= config.K:
            rows = rng.choice(n, size=config.K, replace=False)
        else:
            rows = np.resize(rng.permutation(n), config.K)
        codebooks[d] = r[rows] + 1e-4 * rng.normal(size=(config.K, latent))
        labels, _ = kernels.assign_nearest(r, codebooks[d])
        r = r - codebooks[d][labels]

    params = {}
    params.update(enc.params("enc"))
    params.update(dec.params("dec"))
    for d in range(config.m):
        params[f"cb{d}"] = codebooks[d]
    opt = Adam(params, lr=lr)

    beta = config.rqvae_beta
    loss_curve = []
    for epoch in range(epochs):
        z, enc_acts = enc.forward(x)
        codes, residuals, quant = residual_quantize(z, codebooks)
        xhat, dec_acts = dec.forward(quant)

        err = xhat - x
        recon = float((err * err).sum(axis=1).mean())
        vq_loss = 0.0
        dz_commit = np.zeros_like(z)
        cb_grads = []
        for d in range(config.m):
            r_d = residuals[d]
            a_d = codebooks[d][codes[:, d]]
            diff = r_d - a_d
            vq_loss += float((diff * diff).sum(axis=1).mean()) * (1.0 + beta)
            dz_commit += 2.0 * beta * diff / n
            g = np.zeros_like(codebooks[d])
            np.add.at(g, codes[:, d], -2.0 * diff / n)
            cb_grads.append(g)
        total = recon + vq_loss
        if not np.isfinite(total):
            raise TokenizerError(
                f"RQ-VAE loss became non-finite at epoch {epoch} "
                f"(recon={recon}, vq={vq_loss}); lower lr or beta"
            )
        loss_curve.append(total)

        dxhat = 2.0 * err / n
        dquant, dec_g = dec.backward(dec_acts, dxhat)
        dz = dquant + dz_commit  # straight-through + commitment pull
        _, enc_g = enc.backward(enc_acts, dz)

        grads = {f"enc.{k}": v for k, v in enc_g.items()}
        grads.update({f"dec.{k}": v for k, v in dec_g.items()})
        for d in range(config.m):
            grads[f"cb{d}"] = cb_grads[d]
        opt.step(grads)

        for d in range(config.m):
            used = np.bincount(codes[:, d], minlength=config.K) > 0
            dead = np.flatnonzero(~used)
            if dead.size:
                rows = rng.integers(0, n, size=dead.size)
                codebooks[d][dead] = z[rows] + 1e-4 * rng.normal(
                    size=(dead.size, latent)
                )
                log.info("epoch %d: re-seeded %d dead codes at level %d",
                         epoch, dead.size, d)

    z, _ = enc.forward(x)
    codes, residuals, _ = residual_quantize(z, codebooks)
    norms = np.array([np.linalg.norm(r, axis=1).mean() for r in residuals])
    state = RQVAEState(
        encoder=enc,
        decoder=dec,
        codebooks=codebooks,
        config=config,
        loss_curve=loss_curve,
        residual_norms=norms,
    )
    code_map = CodeMap(codes=codes, K=config.K, method="rqvae")
    return state, code_map


def rqvae_codebook(state):
    """Artifact view of a trained RQ-VAE (per-level centroid tables)."""
    return Codebook(
        method="rqvae",
        m=state.config.m,
        K=state.config.K,
        centroids=state.codebooks.copy(),
        meta={"residual_norms": [float(v) for v in state.residual_norms]},
    )


# --- artifact I/O ------------------------------------------------------


def save_codebook(path, codebook, code_map, catalog):
    """Write the single-document JSON artifact."""
    doc = {
        "method": code_map.method,
        "m": int(code_map.m),
        "K": int(code_map.K),
        "centroids": []
        if codebook is None or codebook.centroids is None
        else codebook.centroids.tolist(),
        "codes": {
            catalog.item_ids[v]: [int(c) for c in code_map.codes[v]]
            for v in range(code_map.num_items)
        },
        "collisions": [
            [catalog.item_ids[v] for v in group]
            for group in code_map.collision_groups
        ],
        "meta": {} if codebook is None else _json_safe(codebook.meta),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True)
        fh.write("\n")


def _json_safe(obj):
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    return obj


def load_codebook(path, catalog):
    """Read the JSON artifact back, aligned to catalog index order."""
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    m, k = int(doc["m"]), int(doc["K"])
    missing = [i for i in catalog.item_ids if i not in doc["codes"]]
    if missing:
        raise TokenizerError(
            f"{len(missing)} catalog items missing from codebook, e.g. {missing[:5]}"
        )
    codes = np.array(
        [doc["codes"][i] for i in catalog.item_ids], dtype=np.int64
    )
    centroids = None
    if doc.get("centroids"):
        centroids = np.asarray(doc["centroids"], dtype=np.float64)
    codebook = Codebook(
        method=doc["method"], m=m, K=k, centroids=centroids,
        meta=doc.get("meta", {}),
    )
    code_map = CodeMap(codes=codes, K=k, method=doc["method"]).with_popularity(
        catalog.popularity
    )
    return codebook, code_map
