"""Hot numeric kernels, JIT-compiled with numba when available.

Backend selection: numba is used when it imports cleanly, unless the
environment variable ``DDSR_NUMBA`` is set to ``0``/``false``/``off``.
Both implementations stay importable (``numpy_impl``, ``numba_impl``) so
the benchmark in ``benchmarks/bench_kernels.py`` can time them head to
head. Matrix products large enough to be BLAS-bound are left to numpy on
purpose; these kernels cover the per-token loops that BLAS cannot see.

Every sampler takes pre-drawn uniforms so that results are a pure
function of (inputs, uniforms) regardless of backend.
"""

from __future__ import annotations

import os
import types

import numpy as np

__all__ = [
    "sample_rows",
    "reverse_mixture",
    "assign_nearest",
    "score_code_tuples",
    "backend",
    "numpy_impl",
    "numba_impl",
]


def _numpy_sample_rows(probs, u):
    """Inverse-CDF categorical sample per row: first j with u < cumsum[j]."""
    cs = np.cumsum(probs, axis=1)
    n, k = probs.shape
    out = np.empty(n, dtype=np.int64)
    for i in range(n):
        out[i] = np.searchsorted(cs[i], u[i], side="right")
    return np.minimum(out, k - 1)


def _numpy_reverse_mixture(x0_dist, xt, qbar_prev, qbar_t, qprod):
    """Mix per-candidate posteriors by the denoiser distribution.

    For token i with current state xt[i], returns over previous states j:
        p[i, j] ~ sum_c x0_dist[i, c] / qbar_t[c, xt[i]]
                  * qbar_prev[c, j] * qprod[j, xt[i]]
    normalized across j. Candidates c that cannot reach xt[i] under the
    forward marginal (qbar_t[c, xt[i]] = 0) contribute nothing.
    """
    denom = qbar_t[:, xt].T
    w = np.divide(
        x0_dist, denom, out=np.zeros_like(x0_dist), where=denom > 0.0
    )
    v = w @ qbar_prev
    p = v * qprod[:, xt].T
    s = p.sum(axis=1, keepdims=True)
    if np.any(s <= 0.0):
        raise FloatingPointError("reverse mixture produced a zero-mass row")
    return p / s


def _numpy_assign_nearest(x, centroids):
    """Index and squared distance of the nearest centroid per row."""
    d2 = (
        (x * x).sum(axis=1)[:, None]
        - 2.0 * x @ centroids.T
        + (centroids * centroids).sum(axis=1)[None, :]
    )
    labels = np.argmin(d2, axis=1)
    best = np.maximum(d2[np.arange(x.shape[0]), labels], 0.0)
    return labels.astype(np.int64), best


def _numpy_score_code_tuples(logp, codes):
    """Sum per-slot log-probabilities of each item's code tuple."""
    m = logp.shape[0]
    return logp[np.arange(m)[None, :], codes].sum(axis=1)


numpy_impl = types.SimpleNamespace(
    sample_rows=_numpy_sample_rows,
    reverse_mixture=_numpy_reverse_mixture,
    assign_nearest=_numpy_assign_nearest,
    score_code_tuples=_numpy_score_code_tuples,
)


def _want_numba():
    flag = os.environ.get("DDSR_NUMBA", "").strip().lower()
    return flag not in {"0", "false", "off", "no"}


numba_impl = None
if _want_numba():
    try:
        from numba import njit
    except ImportError:
        njit = None
else:
    njit = None

if njit is not None:

    @njit(cache=True)
    def _nb_sample_rows(probs, u):
        n, k = probs.shape
        out = np.empty(n, dtype=np.int64)
        for i in range(n):
            acc = 0.0
            idx = k - 1
            for j in range(k):
                acc += probs[i, j]
                if u[i] < acc:
                    idx = j
                    break
            out[i] = idx
        return out

    @njit(cache=True)
    def _nb_reverse_mixture(x0_dist, xt, qbar_prev, qbar_t, qprod):
        # weight rows in a loop, then one BLAS matmul for the k x k mix
        n, k = x0_dist.shape
        w = np.empty((n, k), dtype=np.float64)
        for i in range(n):
            xti = xt[i]
            for c in range(k):
                q = qbar_t[c, xti]
                w[i, c] = x0_dist[i, c] / q if q > 0.0 else 0.0
        v = np.dot(w, qbar_prev)
        out = np.empty((n, k), dtype=np.float64)
        for i in range(n):
            xti = xt[i]
            s = 0.0
            for j in range(k):
                pj = v[i, j] * qprod[j, xti]
                out[i, j] = pj
                s += pj
            if s <= 0.0:
                raise FloatingPointError("reverse mixture produced a zero-mass row")
            inv = 1.0 / s
            for j in range(k):
                out[i, j] *= inv
        return out

    @njit(cache=True)
    def _nb_assign_nearest(x, centroids):
        # expanded-square form so the cross term is a BLAS matmul,
        # matching the numpy fallback's arithmetic
        n, d = x.shape
        k = centroids.shape[0]
        g = np.dot(x, centroids.T)
        cn = np.empty(k, dtype=np.float64)
        for j in range(k):
            acc = 0.0
            for c in range(d):
                acc += centroids[j, c] * centroids[j, c]
            cn[j] = acc
        labels = np.empty(n, dtype=np.int64)
        best = np.empty(n, dtype=np.float64)
        for i in range(n):
            xn = 0.0
            for c in range(d):
                xn += x[i, c] * x[i, c]
            bj = 0
            bd = np.inf
            for j in range(k):
                d2 = xn - 2.0 * g[i, j] + cn[j]
                if d2 < bd:
                    bd = d2
                    bj = j
            labels[i] = bj
            best[i] = bd if bd > 0.0 else 0.0
        return labels, best

    @njit(cache=True)
    def _nb_score_code_tuples(logp, codes):
        nv, m = codes.shape
        out = np.empty(nv, dtype=np.float64)
        for v in range(nv):
            acc = 0.0
            for p in range(m):
                acc += logp[p, codes[v, p]]
            out[v] = acc
        return out

    numba_impl = types.SimpleNamespace(
        sample_rows=_nb_sample_rows,
        reverse_mixture=_nb_reverse_mixture,
        assign_nearest=_nb_assign_nearest,
        score_code_tuples=_nb_score_code_tuples,
    )

_active = numba_impl if numba_impl is not None else numpy_impl


def backend():
    """Name of the kernel backend in use ('numba' or 'numpy')."""
    return "numba" if _active is numba_impl else "numpy"


def sample_rows(probs, u):
    return _active.sample_rows(
        np.ascontiguousarray(probs, dtype=np.float64),
        np.ascontiguousarray(u, dtype=np.float64),
    )


def reverse_mixture(x0_dist, xt, qbar_prev, qbar_t, qprod):
    return _active.reverse_mixture(
        np.ascontiguousarray(x0_dist, dtype=np.float64),
        np.ascontiguousarray(xt, dtype=np.int64),
        np.ascontiguousarray(qbar_prev, dtype=np.float64),
        np.ascontiguousarray(qbar_t, dtype=np.float64),
        np.ascontiguousarray(qprod, dtype=np.float64),
    )


def assign_nearest(x, centroids):
    return _active.assign_nearest(
        np.ascontiguousarray(x, dtype=np.float64),
        np.ascontiguousarray(centroids, dtype=np.float64),
    )


def score_code_tuples(logp, codes):
    return _active.score_code_tuples(
        np.ascontiguousarray(logp, dtype=np.float64),
        np.ascontiguousarray(codes, dtype=np.int64),
    )
