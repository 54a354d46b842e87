"""Categorical diffusion over code indices.

A code token is a state in [0, K). One forward step applies a
row-stochastic K x K transition matrix Q_t; t steps compose into the
cumulative Qbar_t = Q_1 ... Q_t, so corruption at step t resamples each
token from the Qbar_t row of its clean value. Two transition families
are provided: uniform (stay with probability beta_t, otherwise move to
any other state equally) and importance (Gaussian kernel on pairwise
squared distances between code embeddings, so similar codes swap more
often). The reverse direction combines the Bayes posterior
q(x_{t-1} | x_t, x_0) with a model estimate of x_0, generalized to
strides of k steps.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .seeding import as_generator


class ScheduleError(ValueError):
    """Raised when a noise schedule cannot satisfy its constraints."""


A_CLAMP_MIN = 1e-6


@dataclass(frozen=True)
class DiffusionConfig:
    K: int
    T: int = 1000
    transition: str = "uniform"  # uniform | importance | none
    cosine_s: float = 0.008
    sigma_sq_low: float = 1e-4  # times K at t=1
    sigma_sq_high: float = 0.02  # times K at t=T
    shared_matrix: bool = True  # one matrix across code slots vs per-slot

    def __post_init__(self):
        if self.K < 2:
            raise ValueError(f"K must be >= 2, got {self.K}")
        if self.T < 1:
            raise ValueError(f"T must be >= 1, got {self.T}")
        if self.transition not in {"uniform", "importance", "none"}:
            raise ValueError(f"unknown transition {self.transition!r}")
        if not (0.0 < self.sigma_sq_low < self.sigma_sq_high):
            raise ValueError("sigma_sq endpoints must be positive and increasing")


@dataclass(frozen=True)
class Schedule:
    """Per-step noise parameters for t = 1..T (index t-1 in the arrays)."""

    kind: str  # cosine | sigma
    beta: np.ndarray = None  # stay probabilities (uniform mode)
    a: np.ndarray = None  # closed-form diagonal coefficients (uniform mode)
    abar: np.ndarray = None  # length T+1 cumulative coefficients, abar[0] = 1
    sigma_sq: np.ndarray = None  # variances (importance mode)

    @property
    def T(self):
        arr = self.beta if self.beta is not None else self.sigma_sq
        return len(arr)


def build_cosine_schedule(config):
    """Stay-probability schedule from the squared-cosine decay.

    With f(t) = cos^2(((t/T + s) / (1 + s)) * pi/2), the cumulative
    diagonal coefficient is abar_t = f(t)/f(0) and the per-step
    coefficient a_t = abar_t / abar_{t-1}, clamped to [1e-6, 1]. The
    stay probability follows as beta_t = (a_t (K-1) + 1) / K, and abar
    is rebuilt as the running product of the clamped a_t so the two
    stay consistent.
    """
    T, K, s = config.T, config.K, config.cosine_s
    t = np.arange(T + 1, dtype=np.float64)
    f = np.cos(((t / T + s) / (1.0 + s)) * (np.pi / 2.0)) ** 2
    abar_raw = f / f[0]
    a = np.clip(abar_raw[1:] / abar_raw[:-1], A_CLAMP_MIN, 1.0)
    beta = (a * (K - 1) + 1.0) / K
    if np.any(beta <= 1.0 / K):
        raise ScheduleError(f"stay probability fell to 1/K; K={K} too small for T={T}")
    abar = np.concatenate([[1.0], np.cumprod(a)])
    return Schedule(kind="cosine", beta=beta, a=a, abar=abar)


def build_sigma_schedule(config):
    """Linearly increasing variances, scaled by the state-space size."""
    T, K = config.T, config.K
    lo, hi = config.sigma_sq_low * K, config.sigma_sq_high * K
    if T == 1:
        return Schedule(kind="sigma", sigma_sq=np.array([lo]))
    t = np.arange(1, T + 1, dtype=np.float64)
    return Schedule(kind="sigma", sigma_sq=lo + (t - 1.0) / (T - 1.0) * (hi - lo))


def uniform_qt(beta_t, K):
    """Single-step matrix: stay with beta_t, else uniform over the rest."""
    if K < 2:
        raise ValueError(f"K must be >= 2, got {K}")
    if not (0.0 < beta_t <= 1.0):
        raise ValueError(f"beta_t must be in (0, 1], got {beta_t}")
    q = np.full((K, K), (1.0 - beta_t) / (K - 1), dtype=np.float64)
    np.fill_diagonal(q, beta_t)
    return q


def importance_qt(distances_sq, sigma_sq):
    """Single-step matrix from a Gaussian kernel on code distances.

    Off-diagonal entries are exp(-d^2/(2 sigma^2)) normalized by the sum
    over all states including the diagonal (whose kernel weight is 1);
    the diagonal absorbs the leftover mass, which keeps it the row
    maximum and non-negative by construction.
    """
    d2 = np.asarray(distances_sq, dtype=np.float64)
    if d2.ndim != 2 or d2.shape[0] != d2.shape[1]:
        raise ValueError(f"distances_sq must be square, got {d2.shape}")
    if sigma_sq <= 0.0:
        raise ValueError(f"sigma_sq must be positive, got {sigma_sq}")
    if not np.all(np.isfinite(d2)):
        raise ValueError("distances_sq contains non-finite entries")
    if np.any(np.abs(np.diagonal(d2)) > 0.0):
        raise ValueError("distances_sq diagonal must be zero")
    if not np.allclose(d2, d2.T, atol=1e-12):
        raise ValueError("distances_sq must be symmetric")
    w = np.exp(-d2 / (2.0 * sigma_sq))
    denom = w.sum(axis=1, keepdims=True)
    q = w / denom
    off_mass = q.sum(axis=1) - np.diagonal(q)
    diag = 1.0 - off_mass
    if np.any(diag < 0.0):
        raise FloatingPointError("importance transition produced a negative diagonal")
    np.fill_diagonal(q, diag)
    return q


def _coef_matrix(c, K):
    """c * I + (1 - c) * ones/K, the closed form for uniform products."""
    q = np.full((K, K), (1.0 - c) / K, dtype=np.float64)
    np.fill_diagonal(q, c + (1.0 - c) / K)
    return q


class TransitionModel:
    """Q_t / Qbar_t provider for one K-state space.

    Uniform mode works from the schedule's closed-form coefficients: all
    matrices live in the two-dimensional commutative algebra spanned by
    the identity and the constant matrix ones/K, which is closed under
    products, so cumulative and stride products reduce to products of
    scalar coefficients. Importance mode materializes every Q_t and all
    prefix products once per refresh.
    """

    def __init__(self, mode, K, schedule, distances_sq=None):
        if mode not in {"uniform", "importance"}:
            raise ValueError(f"unknown transition mode {mode!r}")
        self.mode = mode
        self.K = int(K)
        self.schedule = schedule
        self._prod_cache = {}
        if mode == "uniform":
            if schedule.beta is None or schedule.abar is None:
                raise ValueError("uniform mode needs beta/abar schedule arrays")
            self._q = None
            self._qbar = None
        else:
            if schedule.sigma_sq is None:
                raise ValueError("importance mode needs a sigma_sq schedule")
            if distances_sq is None:
                raise ValueError("importance mode needs pairwise distances")
            self.refresh(distances_sq)

    @property
    def T(self):
        return self.schedule.T

    def refresh(self, distances_sq):
        """Rebuild all single-step and prefix matrices (importance mode)."""
        if self.mode != "importance":
            raise ValueError("refresh only applies to importance transitions")
        d2 = np.asarray(distances_sq, dtype=np.float64)
        if d2.shape != (self.K, self.K):
            raise ValueError(f"distances_sq must be {(self.K, self.K)}, got {d2.shape}")
        self.distances_sq = d2
        self._q = [importance_qt(d2, s) for s in self.schedule.sigma_sq]
        qbar = [np.eye(self.K)]
        for q in self._q:
            qbar.append(qbar[-1] @ q)
        self._qbar = qbar
        self._prod_cache = {}

    def _check_t(self, t, low):
        if not (low <= t <= self.T):
            raise ValueError(f"t must be in [{low}, {self.T}], got {t}")

    def qt(self, t):
        """Single-step matrix Q_t, t in 1..T."""
        self._check_t(t, 1)
        if self.mode == "uniform":
            return uniform_qt(float(self.schedule.beta[t - 1]), self.K)
        return self._q[t - 1]

    def qbar(self, t):
        """Cumulative matrix Q_1 ... Q_t; identity at t=0."""
        self._check_t(t, 0)
        if self.mode == "uniform":
            return _coef_matrix(float(self.schedule.abar[t]), self.K)
        return self._qbar[t]

    def abar(self, t):
        """Cumulative diagonal coefficient (uniform mode only)."""
        if self.mode != "uniform":
            raise ValueError("abar is only defined for uniform transitions")
        self._check_t(t, 0)
        return float(self.schedule.abar[t])

    def qprod(self, t0, t1):
        """Product Q_{t0+1} ... Q_{t1}; identity when t0 == t1."""
        self._check_t(t1, 0)
        if not (0 <= t0 <= t1):
            raise ValueError(f"need 0 <= t0 <= t1, got ({t0}, {t1})")
        if self.mode == "uniform":
            c = float(np.prod(self.schedule.a[t0:t1]))
            return _coef_matrix(c, self.K)
        key = (t0, t1)
        if key not in self._prod_cache:
            m = np.eye(self.K)
            for s in range(t0 + 1, t1 + 1):
                m = m @ self._q[s - 1]
            self._prod_cache[key] = m
        return self._prod_cache[key]


class PerPositionTransitions:
    """One TransitionModel per code slot (importance mode, unshared)."""

    def __init__(self, models):
        if not models:
            raise ValueError("need at least one transition model")
        self.models = tuple(models)
        if len({m.K for m in self.models}) != 1:
            raise ValueError("all per-slot transitions must share K")
        if len({m.T for m in self.models}) != 1:
            raise ValueError("all per-slot transitions must share T")

    @property
    def K(self):
        return self.models[0].K

    @property
    def T(self):
        return self.models[0].T

    @property
    def mode(self):
        return self.models[0].mode

    def refresh(self, distances_sq_per_slot):
        for model, d2 in zip(self.models, distances_sq_per_slot):
            model.refresh(d2)


def build_transition_model(config, distances_sq=None):
    """Construct the transition machinery for a DiffusionConfig.

    Returns None for transition 'none' (the no-corruption ablation). For
    importance mode, ``distances_sq`` is either one K x K matrix (shared)
    or a list of per-slot matrices (shared_matrix=False).
    """
    if config.transition == "none":
        return None
    if config.transition == "uniform":
        return TransitionModel("uniform", config.K, build_cosine_schedule(config))
    schedule = build_sigma_schedule(config)
    if config.shared_matrix:
        return TransitionModel("importance", config.K, schedule, distances_sq)
    return PerPositionTransitions(
        [
            TransitionModel("importance", config.K, schedule, d2)
            for d2 in distances_sq
        ]
    )


def cumulative(transition, t):
    """Cumulative matrix Qbar_t (identity at t=0)."""
    return transition.qbar(t)


def _corrupt_flat(codes_flat, model, t, rng):
    probs = model.qbar(t)[codes_flat]
    u = rng.random(codes_flat.size)
    return kernels.sample_rows(probs, u)


def corrupt(codes, transition, t, seed):
    """Resample every token from the Qbar_t row of its clean value.

    ``codes`` has shape (..., m) when ``transition`` is per-slot,
    anything otherwise. One t is shared by all tokens. t=0 is the
    identity map (fresh copy).
    """
    codes = np.asarray(codes, dtype=np.int64)
    if not (0 <= t <= transition.T):
        raise ValueError(f"t must be in [0, {transition.T}], got {t}")
    if np.any((codes < 0) | (codes >= transition.K)):
        raise ValueError("code indices out of range")
    if t == 0:
        return codes.copy()
    rng = as_generator(seed)
    if isinstance(transition, PerPositionTransitions):
        out = np.empty_like(codes)
        for p, model in enumerate(transition.models):
            flat = codes[..., p].reshape(-1)
            out[..., p] = _corrupt_flat(flat, model, t, rng).reshape(codes[..., p].shape)
        return out
    flat = codes.reshape(-1)
    return _corrupt_flat(flat, transition, t, rng).reshape(codes.shape)


def corrupt_batch(codes, transition, t_per_example, seed):
    """Corrupt a batch where each example carries its own t.

    ``codes`` has shape (B, ...); examples are grouped by t so each
    group samples in one shot. Deterministic in (inputs, seed).
    """
    codes = np.asarray(codes, dtype=np.int64)
    t_per_example = np.asarray(t_per_example, dtype=np.int64)
    if t_per_example.shape[0] != codes.shape[0]:
        raise ValueError("t_per_example must match the batch dimension")
    rng = as_generator(seed)
    out = codes.copy()
    for t in np.unique(t_per_example):
        idx = np.flatnonzero(t_per_example == t)
        if t == 0:
            continue
        out[idx] = corrupt(codes[idx], transition, int(t), rng)
    return out


def posterior(x_t, x_0, transition, t):
    """Bayes posterior q(x_{t-1} | x_t, x_0), one length-K row per token.

    ``x_t`` and ``x_0`` share any shape; the result appends a K axis.
    Per-slot transitions expect the trailing axis to index code slots.
    """
    if t < 1:
        raise ValueError(f"posterior needs t >= 1, got {t}")
    x_t = np.asarray(x_t, dtype=np.int64)
    x_0 = np.asarray(x_0, dtype=np.int64)
    if x_t.shape != x_0.shape:
        raise ValueError("x_t and x_0 must have matching shapes")
    if isinstance(transition, PerPositionTransitions):
        if x_t.shape[-1] != len(transition.models):
            raise ValueError("trailing axis must index code slots")
        out = np.empty(x_t.shape + (transition.K,))
        for p, model in enumerate(transition.models):
            out[..., p, :] = posterior(x_t[..., p], x_0[..., p], model, t)
        return out
    flat_t = x_t.reshape(-1)
    flat_0 = x_0.reshape(-1)
    qt_cols = transition.qt(t)[:, flat_t].T
    qbar_rows = transition.qbar(t - 1)[flat_0, :]
    z = transition.qbar(t)[flat_0, flat_t]
    if np.any(z <= 0.0):
        raise FloatingPointError(f"impossible (x_0, x_t) combination at t={t}")
    out = qt_cols * qbar_rows / z[:, None]
    return out.reshape(x_t.shape + (transition.K,))


def reverse_distribution(x_t, x0_dist, transition, t, k):
    """Distribution of x_{t-k} given x_t and a denoiser estimate of x_0.

    Marginalizes the k-step posterior over the denoiser distribution:
    p(x_{t-k} | x_t) = sum_c p_theta(c | x_t) q(x_{t-k} | x_t, x_0=c),
    where the stride posterior uses the product Q_{t-k+1} ... Q_t in
    place of Q_t and Qbar_{t-k} in place of Qbar_{t-1}.
    """
    if not (1 <= k <= t):
        raise ValueError(f"need 1 <= k <= t, got k={k}, t={t}")
    x_t = np.asarray(x_t, dtype=np.int64)
    x0_dist = np.asarray(x0_dist, dtype=np.float64)
    if x0_dist.shape[:-1] != x_t.shape:
        raise ValueError("x0_dist must provide one row per token")
    if isinstance(transition, PerPositionTransitions):
        if x_t.shape[-1] != len(transition.models):
            raise ValueError("trailing axis must index code slots")
        out = np.empty_like(x0_dist)
        for p, model in enumerate(transition.models):
            out[..., p, :] = reverse_distribution(
                x_t[..., p], x0_dist[..., p, :], model, t, k
            )
        return out
    flat_xt = x_t.reshape(-1)
    flat_x0 = x0_dist.reshape(-1, transition.K)
    probs = kernels.reverse_mixture(
        flat_x0,
        flat_xt,
        transition.qbar(t - k),
        transition.qbar(t),
        transition.qprod(t - k, t),
    )
    return probs.reshape(x0_dist.shape)


def reverse_step(x_t, x0_dist, transition, t, k, seed):
    """Sample x_{t-k} from the stride-k reverse distribution."""
    rng = as_generator(seed)
    probs = reverse_distribution(x_t, x0_dist, transition, t, k)
    flat = probs.reshape(-1, transition.K)
    u = rng.random(flat.shape[0])
    out = kernels.sample_rows(flat, u)
    return out.reshape(np.asarray(x_t).shape)
