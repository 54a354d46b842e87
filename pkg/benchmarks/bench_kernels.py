"""Time the numba kernels against the pure-numpy fallbacks.

Run from the repository root:

    python benchmarks/bench_kernels.py

Each kernel is timed on sizes close to the shapes the pipeline actually
produces (reverse refinement over a few thousand tokens, catalog scoring
over a few thousand items). The numba column is absent when the compiled
backend is unavailable (or disabled via DDSR_NUMBA=0).
"""

import time

import numpy as np

from ddsr import kernels


def _bench(fn, args, repeats=5, warmup=1):
    for _ in range(warmup):
        fn(*args)
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def _case_sample_rows(rng, n=20000, k=128):
    probs = rng.dirichlet(np.ones(k), size=n)
    u = rng.random(n)
    return (probs, u)


def _case_reverse_mixture(rng, n=8000, k=128):
    x0 = rng.dirichlet(np.ones(k), size=n)
    xt = rng.integers(0, k, size=n)
    q = rng.dirichlet(np.ones(k), size=k)
    return (x0, xt, q, q, q)


def _case_assign_nearest(rng, n=20000, d=32, k=256):
    return (rng.normal(size=(n, d)), rng.normal(size=(k, d)))


def _case_score_code_tuples(rng, m=4, k=128, v=10000):
    logp = np.log(rng.dirichlet(np.ones(k), size=m))
    codes = rng.integers(0, k, size=(v, m))
    return (logp, codes)


CASES = [
    ("sample_rows", _case_sample_rows),
    ("reverse_mixture", _case_reverse_mixture),
    ("assign_nearest", _case_assign_nearest),
    ("score_code_tuples", _case_score_code_tuples),
]


def main():
    rng = np.random.default_rng(0)
    have_numba = kernels.numba_impl is not None
    print(f"active backend: {kernels.backend()}")
    header = f"{'kernel':<20}{'numpy':>12}" + (f"{'numba':>12}{'speedup':>10}" if have_numba else "")
    print(header)
    print("-" * len(header))
    for name, make in CASES:
        args = make(rng)
        t_np = _bench(getattr(kernels.numpy_impl, name), args)
        line = f"{name:<20}{t_np * 1e3:>10.2f}ms"
        if have_numba:
            t_nb = _bench(getattr(kernels.numba_impl, name), args)
            line += f"{t_nb * 1e3:>10.2f}ms{t_np / t_nb:>9.1f}x"
        print(line)
        np_out = getattr(kernels.numpy_impl, name)(*args)
        if have_numba:
            nb_out = getattr(kernels.numba_impl, name)(*args)
            for a, b in zip(np.atleast_1d(np_out), np.atleast_1d(nb_out)):
                np.testing.assert_allclose(a, b, atol=1e-12)


if __name__ == "__main__":
    main()
