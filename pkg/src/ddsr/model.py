"""Next-item code predictor: a block-causal transformer over code tokens.

A history of n items, each carrying m code tokens, becomes n*m input
tokens (code embedding + item-position embedding + code-slot embedding,
plus a sinusoidal embedding of the diffusion step t added to every
token). Attention is causal at item granularity: the m tokens of one
item see each other and everything earlier, never later items. The
final representations of block i are mean-pooled and fed to m
independent K-way heads whose logits predict the codes of item i+1.

All gradients are computed by hand in float64; `backward` mirrors
`forward` exactly, which is what the finite-difference test leans on.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)

LN_EPS = 1e-5
_GELU_C = np.sqrt(2.0 / np.pi)
_truncation_warned = False


@dataclass(frozen=True)
class ApproximatorConfig:
    m: int
    K: int
    d: int = 128
    layers: int = 2
    heads: int = 4
    ff: int = 0  # 0 means 4*d
    dropout: float = 0.2
    max_positions: int = 64

    def __post_init__(self):
        if min(self.m, self.K, self.d, self.layers, self.heads, self.max_positions) < 1:
            raise ValueError("all approximator sizes must be >= 1")
        if self.d % self.heads != 0:
            raise ValueError(f"d={self.d} not divisible by heads={self.heads}")
        if self.d % 2 != 0:
            raise ValueError(f"d={self.d} must be even for sinusoidal embeddings")
        if not (0.0 <= self.dropout < 1.0):
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.ff == 0:
            object.__setattr__(self, "ff", 4 * self.d)


def timestep_embedding(t, d):
    """Interleaved sin/cos embedding of integer steps, base 10000."""
    t = np.asarray(t, dtype=np.float64)
    half = d // 2
    w = np.power(10000.0, -2.0 * np.arange(half) / d)
    ang = t[:, None] * w[None, :]
    out = np.empty((t.shape[0], d), dtype=np.float64)
    out[:, 0::2] = np.sin(ang)
    out[:, 1::2] = np.cos(ang)
    return out


def _gelu(x):
    u = _GELU_C * (x + 0.044715 * x**3)
    return 0.5 * x * (1.0 + np.tanh(u))


def _gelu_grad(x):
    u = _GELU_C * (x + 0.044715 * x**3)
    th = np.tanh(u)
    du = _GELU_C * (1.0 + 3.0 * 0.044715 * x**2)
    return 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th**2) * du


def _ln_forward(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv)


def _ln_backward(dy, g, cache):
    xhat, inv = cache
    d = xhat.shape[-1]
    dg = (dy * xhat).reshape(-1, d).sum(axis=0)
    db = dy.reshape(-1, d).sum(axis=0)
    dxhat = dy * g
    dx = inv * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, dg, db


class Approximator:
    """Transformer over code tokens with hand-written gradients."""

    def __init__(self, config, seed=0):
        self.config = config
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
        c = config
        scale = 0.02
        p = {
            "code_emb": rng.normal(0.0, scale, size=(c.m, c.K, c.d)),
            "pos_emb": rng.normal(0.0, scale, size=(c.max_positions, c.d)),
            "slot_emb": rng.normal(0.0, scale, size=(c.m, c.d)),
            "lnf_g": np.ones(c.d),
            "lnf_b": np.zeros(c.d),
            "head_w": rng.normal(0.0, scale, size=(c.m, c.d, c.K)),
            "head_b": np.zeros((c.m, c.K)),
        }
        for layer in range(c.layers):
            pre = f"l{layer}."
            for name in ("wq", "wk", "wv", "wo"):
                p[pre + name] = rng.normal(0.0, scale, size=(c.d, c.d))
            for name in ("bq", "bk", "bv", "bo"):
                p[pre + name] = np.zeros(c.d)
            p[pre + "ln1_g"] = np.ones(c.d)
            p[pre + "ln1_b"] = np.zeros(c.d)
            p[pre + "ln2_g"] = np.ones(c.d)
            p[pre + "ln2_b"] = np.zeros(c.d)
            p[pre + "w1"] = rng.normal(0.0, scale, size=(c.d, c.ff))
            p[pre + "b1"] = np.zeros(c.ff)
            p[pre + "w2"] = rng.normal(0.0, scale, size=(c.ff, c.d))
            p[pre + "b2"] = np.zeros(c.d)
        self.params = p

    def clone_params(self):
        return {k: v.copy() for k, v in self.params.items()}

    def load_params(self, params):
        for k in self.params:
            self.params[k][...] = params[k]

    def code_embeddings(self):
        """Current (m, K, d) code embedding table (view, do not mutate)."""
        return self.params["code_emb"]

    def _attention_mask(self, item_mask, L):
        """(B, N, N) boolean: token i may attend to token j."""
        m = self.config.m
        blocks = np.repeat(np.arange(L), m)
        causal = blocks[None, :] <= blocks[:, None]
        valid = np.repeat(item_mask, m, axis=1)  # (B, N)
        allowed = causal[None, :, :] & valid[:, None, :]
        n = L * m
        allowed[:, np.arange(n), np.arange(n)] = True
        return allowed

    def forward(self, codes, t, item_mask=None, train=False, rng=None, want_cache=False):
        """Logits of shape (B, L, m, K); block i predicts item i+1."""
        global _truncation_warned
        c = self.config
        codes = np.asarray(codes, dtype=np.int64)
        if codes.ndim == 2:
            codes = codes[None]
        B, L, m = codes.shape
        if m != c.m:
            raise ValueError(f"expected {c.m} code slots, got {m}")
        if np.any((codes < 0) | (codes >= c.K)):
            raise ValueError("code indices out of range")
        t = np.asarray(t, dtype=np.int64)
        if t.ndim == 0:
            t = np.full(B, int(t))
        if item_mask is None:
            item_mask = np.ones((B, L), dtype=bool)
        else:
            item_mask = np.asarray(item_mask, dtype=bool)
        if L > c.max_positions:
            if not _truncation_warned:
                log.warning(
                    "history length %d exceeds max_positions=%d; keeping the most recent",
                    L, c.max_positions,
                )
                _truncation_warned = True
            codes = codes[:, -c.max_positions :]
            item_mask = item_mask[:, -c.max_positions :]
            L = c.max_positions
        if train and c.dropout > 0.0 and rng is None:
            raise ValueError("training-mode forward with dropout needs an rng")

        p = self.params
        slots = np.broadcast_to(np.arange(m), codes.shape)
        tok = p["code_emb"][slots, codes]  # (B, L, m, d)
        tok = tok + p["pos_emb"][:L][None, :, None, :]
        tok = tok + p["slot_emb"][None, None, :, :]
        temb = timestep_embedding(t, c.d)
        tok = tok + temb[:, None, None, :]
        N = L * m
        x = tok.reshape(B, N, c.d)

        drop_p = c.dropout if train else 0.0
        cache = {
            "codes": codes, "slots": slots, "L": L, "B": B,
            "mask": self._attention_mask(item_mask, L), "drops": [], "layers": [],
        }

        def dropout(h):
            if drop_p <= 0.0:
                cache["drops"].append(None)
                return h
            keep = (rng.random(h.shape) >= drop_p) / (1.0 - drop_p)
            cache["drops"].append(keep)
            return h * keep

        x = dropout(x)
        H, hd = c.heads, c.d // c.heads
        neg = -np.inf
        for layer in range(c.layers):
            pre = f"l{layer}."
            lc = {}
            h, lc["ln1"] = _ln_forward(x, p[pre + "ln1_g"], p[pre + "ln1_b"])
            lc["x_in"], lc["h1"] = x, h
            q = (h @ p[pre + "wq"] + p[pre + "bq"]).reshape(B, N, H, hd).transpose(0, 2, 1, 3)
            k = (h @ p[pre + "wk"] + p[pre + "bk"]).reshape(B, N, H, hd).transpose(0, 2, 1, 3)
            v = (h @ p[pre + "wv"] + p[pre + "bv"]).reshape(B, N, H, hd).transpose(0, 2, 1, 3)
            scores = q @ k.transpose(0, 1, 3, 2) / np.sqrt(hd)
            scores = np.where(cache["mask"][:, None, :, :], scores, neg)
            scores -= scores.max(axis=-1, keepdims=True)
            e = np.exp(scores)
            attn = e / e.sum(axis=-1, keepdims=True)
            ctx = (attn @ v).transpose(0, 2, 1, 3).reshape(B, N, c.d)
            a_out = ctx @ p[pre + "wo"] + p[pre + "bo"]
            lc.update(q=q, k=k, v=v, attn=attn, ctx=ctx)
            x = x + dropout(a_out)
            h2, lc["ln2"] = _ln_forward(x, p[pre + "ln2_g"], p[pre + "ln2_b"])
            lc["x_mid"], lc["h2"] = x, h2
            z1 = h2 @ p[pre + "w1"] + p[pre + "b1"]
            f = _gelu(z1) @ p[pre + "w2"] + p[pre + "b2"]
            lc["z1"] = z1
            x = x + dropout(f)
            cache["layers"].append(lc)

        y, cache["lnf"] = _ln_forward(x, p["lnf_g"], p["lnf_b"])
        cache["x_final"] = x
        blocks = y.reshape(B, L, m, c.d)
        rep = blocks.mean(axis=2)  # (B, L, d)
        cache["rep"] = rep
        logits = np.einsum("bld,pdk->blpk", rep, p["head_w"]) + p["head_b"]
        if want_cache:
            return logits, cache
        return logits

    def backward(self, cache, dlogits):
        """Gradients for every parameter given d(loss)/d(logits)."""
        c = self.config
        p = self.params
        B, L = cache["B"], cache["L"]
        N = L * c.m
        H, hd = c.heads, c.d // c.heads
        g = {k: np.zeros_like(v) for k, v in p.items()}

        g["head_w"] += np.einsum("bld,blpk->pdk", cache["rep"], dlogits)
        g["head_b"] += dlogits.sum(axis=(0, 1))
        drep = np.einsum("blpk,pdk->bld", dlogits, p["head_w"])
        dblocks = np.broadcast_to(
            drep[:, :, None, :] / c.m, (B, L, c.m, c.d)
        )
        dy = dblocks.reshape(B, N, c.d)
        dx, dgf, dbf = _ln_backward(dy, p["lnf_g"], cache["lnf"])
        g["lnf_g"] += dgf
        g["lnf_b"] += dbf

        drops = cache["drops"]
        di = len(drops) - 1

        def drop_back(dh):
            nonlocal di
            keep = drops[di]
            di -= 1
            return dh if keep is None else dh * keep

        for layer in range(c.layers - 1, -1, -1):
            pre = f"l{layer}."
            lc = cache["layers"][layer]
            df = drop_back(dx)
            gz = _gelu(lc["z1"])
            g[pre + "w2"] += np.einsum("bnf,bnd->fd", gz, df)
            g[pre + "b2"] += df.sum(axis=(0, 1))
            dz1 = (df @ p[pre + "w2"].T) * _gelu_grad(lc["z1"])
            g[pre + "w1"] += np.einsum("bnd,bnf->df", lc["h2"], dz1)
            g[pre + "b1"] += dz1.sum(axis=(0, 1))
            dh2 = dz1 @ p[pre + "w1"].T
            dx_mid, dg2, db2 = _ln_backward(dh2, p[pre + "ln2_g"], lc["ln2"])
            g[pre + "ln2_g"] += dg2
            g[pre + "ln2_b"] += db2
            dx = dx + dx_mid

            da_out = drop_back(dx)
            g[pre + "wo"] += np.einsum("bnd,bne->de", lc["ctx"], da_out)
            g[pre + "bo"] += da_out.sum(axis=(0, 1))
            dctx = (da_out @ p[pre + "wo"].T).reshape(B, N, H, hd).transpose(0, 2, 1, 3)
            attn, q, k, v = lc["attn"], lc["q"], lc["k"], lc["v"]
            dattn = dctx @ v.transpose(0, 1, 3, 2)
            dv = attn.transpose(0, 1, 3, 2) @ dctx
            ds = attn * (dattn - (dattn * attn).sum(axis=-1, keepdims=True))
            ds = ds / np.sqrt(hd)
            dq = ds @ k
            dk = ds.transpose(0, 1, 3, 2) @ q
            dq = dq.transpose(0, 2, 1, 3).reshape(B, N, c.d)
            dk = dk.transpose(0, 2, 1, 3).reshape(B, N, c.d)
            dv = dv.transpose(0, 2, 1, 3).reshape(B, N, c.d)
            h1 = lc["h1"]
            g[pre + "wq"] += np.einsum("bnd,bne->de", h1, dq)
            g[pre + "wk"] += np.einsum("bnd,bne->de", h1, dk)
            g[pre + "wv"] += np.einsum("bnd,bne->de", h1, dv)
            g[pre + "bq"] += dq.sum(axis=(0, 1))
            g[pre + "bk"] += dk.sum(axis=(0, 1))
            g[pre + "bv"] += dv.sum(axis=(0, 1))
            dh1 = dq @ p[pre + "wq"].T + dk @ p[pre + "wk"].T + dv @ p[pre + "wv"].T
            dx_in, dg1, db1 = _ln_backward(dh1, p[pre + "ln1_g"], lc["ln1"])
            g[pre + "ln1_g"] += dg1
            g[pre + "ln1_b"] += db1
            dx = dx + dx_in

        dtok = drop_back(dx).reshape(B, L, c.m, c.d)
        np.add.at(g["code_emb"], (cache["slots"], cache["codes"]), dtok)
        g["pos_emb"][:L] += dtok.sum(axis=(0, 2))
        g["slot_emb"] += dtok.sum(axis=(0, 1))
        return g


def loss_ce_with_grad(logits, targets, mask=None):
    """Masked mean cross-entropy and its gradient w.r.t. the logits.

    The mean runs over all valid (block, slot) pairs; padded blocks are
    excluded via ``mask`` (B, L).
    """
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.int64)
    B, L, m, K = logits.shape
    if targets.shape != (B, L, m):
        raise ValueError(f"targets must be {(B, L, m)}, got {targets.shape}")
    if mask is None:
        mask = np.ones((B, L), dtype=bool)
    else:
        mask = np.asarray(mask, dtype=bool)
    n_valid = int(mask.sum()) * m
    if n_valid == 0:
        raise ValueError("no unmasked target positions")
    shifted = logits - logits.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - lse
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    w = mask[:, :, None].astype(np.float64)
    loss = float(-(picked * w).sum() / n_valid)
    soft = np.exp(logp)
    onehot = np.zeros_like(soft)
    np.put_along_axis(onehot, targets[..., None], 1.0, axis=-1)
    dlogits = (soft - onehot) * w[..., None] / n_valid
    return loss, dlogits


def loss_ce(logits, targets, mask=None):
    """Masked mean cross-entropy over (block, slot) pairs."""
    return loss_ce_with_grad(logits, targets, mask)[0]
