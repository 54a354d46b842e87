import numpy as np
import pytest

from ddsr import diffusion
from ddsr.inference import (
    InferenceConfig,
    denoise_batch,
    denoise_sequence,
    rank_items,
    score_catalog,
)
from ddsr.tokenizer import CodeMap, Codebook

from conftest import PointMassOracle


def _distinct_codes(num_items, m=2, K=8):
    """Collision-free tuples by construction: base-K digits of the index."""
    codes = np.empty((num_items, m), dtype=np.int64)
    for v in range(num_items):
        x = v
        for p in range(m):
            codes[v, p] = x % K
            x //= K
    assert len({tuple(r) for r in codes}) == num_items
    return codes


def _ring_setup(num_items=40, m=2, K=8, T=10):
    codes = _distinct_codes(num_items, m, K)
    successor = (np.arange(num_items) + 1) % num_items
    oracle = PointMassOracle(codes, successor)
    code_map = CodeMap(codes=codes, K=K, method="random")
    dconf = diffusion.DiffusionConfig(T=T, transition="uniform", K=K)
    transition = diffusion.build_transition_model(dconf)
    return codes, successor, oracle, code_map, transition


def _history(codes, items):
    return codes[np.asarray(items, dtype=np.int64)]


def test_config_validation():
    with pytest.raises(ValueError):
        InferenceConfig(S=0)
    with pytest.raises(ValueError):
        InferenceConfig(ranking="cosine")
    with pytest.raises(ValueError):
        InferenceConfig(readout="middle")


def test_no_transition_is_single_clean_pass():
    codes, successor, oracle, code_map, _ = _ring_setup()
    hist = _history(codes, [3, 4, 5])
    out, dists = denoise_sequence(hist, oracle, None, InferenceConfig(seed=0))
    assert np.array_equal(out, hist)  # codes returned untouched
    expect = codes[successor[5]]
    assert np.array_equal(dists.argmax(axis=1), expect)
    assert np.allclose(dists.sum(axis=1), 1.0, atol=1e-12)


def test_clean_readout_sees_intact_history():
    codes, successor, oracle, code_map, transition = _ring_setup()
    hist = _history(codes, [7, 8, 9])
    cfg = InferenceConfig(S=5, readout="clean", seed=3)
    out, dists = denoise_sequence(hist, oracle, transition, cfg)
    # the readout pass runs on the intact history, so the oracle's point
    # mass lands on the true successor no matter what the chain samples
    assert np.array_equal(dists.argmax(axis=1), codes[successor[9]])
    assert out.shape == hist.shape
    assert out.min() >= 0 and out.max() < code_map.K


def test_final_readout_reflects_last_pass():
    codes, successor, oracle, code_map, transition = _ring_setup()
    hist = _history(codes, [0, 1, 2])
    clean = denoise_sequence(
        hist, oracle, transition, InferenceConfig(S=5, readout="clean", seed=11)
    )[1]
    final = denoise_sequence(
        hist, oracle, transition, InferenceConfig(S=5, readout="final", seed=11)
    )[1]
    assert np.allclose(clean.sum(axis=1), 1.0, atol=1e-12)
    assert np.allclose(final.sum(axis=1), 1.0, atol=1e-12)
    # same seed, same chain: only the readout pass differs
    assert clean.shape == final.shape


def test_denoise_batch_matches_sequence_wrapper():
    codes, successor, oracle, code_map, transition = _ring_setup()
    hist = _history(codes, [12, 13, 14])
    cfg = InferenceConfig(S=5, seed=9)
    out_b, dists_b = denoise_batch(hist[None], None, oracle, transition, cfg)
    out_s, dists_s = denoise_sequence(hist, oracle, transition, cfg)
    assert np.array_equal(out_b[0], out_s)
    assert np.allclose(dists_b[0], dists_s, atol=0)


def test_batch_rows_use_each_users_last_valid_block():
    codes, successor, oracle, code_map, _ = _ring_setup()
    batch = np.zeros((2, 3, 2), dtype=np.int64)
    mask = np.array([[True, True, True], [True, True, False]])
    batch[0] = _history(codes, [3, 4, 5])
    batch[1, :2] = _history(codes, [8, 9])
    _, dists = denoise_batch(batch, mask, oracle, None, InferenceConfig(seed=0))
    assert np.array_equal(dists[0].argmax(axis=1), codes[successor[5]])
    assert np.array_equal(dists[1].argmax(axis=1), codes[successor[9]])


def test_empty_history_rejected():
    codes, _, oracle, _, _ = _ring_setup()
    mask = np.array([[False, False]])
    with pytest.raises(ValueError):
        denoise_batch(codes[:2][None], mask, oracle, None, InferenceConfig())
    with pytest.raises(ValueError):
        denoise_sequence(codes[0], oracle, None, InferenceConfig())


def test_skip_divisor_larger_than_T_rejected():
    codes, _, oracle, _, transition = _ring_setup(T=10)
    hist = _history(codes, [1, 2])
    with pytest.raises(ValueError):
        denoise_sequence(hist, oracle, transition, InferenceConfig(S=11))


def test_long_history_truncates_to_newest_window():
    codes, successor, oracle, code_map, _ = _ring_setup()
    maxpos = oracle.config.max_positions
    items = [(3 + j) % 40 for j in range(maxpos + 10)]
    full = _history(codes, items)
    tail = _history(codes, items[-maxpos:])
    cfg = InferenceConfig(seed=0)
    _, d_full = denoise_sequence(full, oracle, None, cfg)
    _, d_tail = denoise_sequence(tail, oracle, None, cfg)
    assert np.allclose(d_full, d_tail, atol=0)


def test_chain_codes_deterministic_given_seed():
    codes, _, oracle, _, transition = _ring_setup()
    hist = _history(codes, [20, 21, 22])
    cfg = InferenceConfig(S=5, seed=0)
    out1, d1 = denoise_sequence(hist, oracle, transition, cfg, seed=42)
    out2, d2 = denoise_sequence(hist, oracle, transition, cfg, seed=42)
    out3, _ = denoise_sequence(hist, oracle, transition, cfg, seed=43)
    assert np.array_equal(out1, out2) and np.allclose(d1, d2, atol=0)
    assert not np.array_equal(out1, out3)  # different draws somewhere


def test_score_catalog_logprob_matches_manual():
    codes = _distinct_codes(12, m=2, K=8)
    code_map = CodeMap(codes=codes, K=8, method="random")
    rng = np.random.default_rng(0)
    dists = rng.dirichlet(np.ones(8), size=2)
    cfg = InferenceConfig(ranking="logprob")
    scores = score_catalog(dists, code_map, None, cfg)
    logp = np.log(dists + 1e-12)
    manual = np.array([logp[0, c0] + logp[1, c1] for c0, c1 in codes])
    assert np.allclose(scores, manual, atol=1e-12)


def test_score_catalog_shape_mismatch_rejected():
    codes = _distinct_codes(5, m=2, K=8)
    code_map = CodeMap(codes=codes, K=8, method="random")
    with pytest.raises(ValueError):
        score_catalog(np.ones((3, 8)) / 8, code_map, None, InferenceConfig())


def test_score_catalog_nearest_uses_centroid_distances():
    K, m = 4, 2
    codes = _distinct_codes(10, m=m, K=K)
    code_map = CodeMap(codes=codes, K=K, method="pq")
    rng = np.random.default_rng(1)
    centroids = rng.normal(size=(m, K, 3))
    codebook = Codebook(method="pq", m=m, K=K, centroids=centroids)
    dists = rng.dirichlet(np.ones(K), size=m)
    cfg = InferenceConfig(ranking="nearest")
    scores = score_catalog(dists, code_map, codebook, cfg)
    q = dists.argmax(axis=1)
    manual = np.zeros(10)
    for v, row in enumerate(codes):
        for p in range(m):
            diff = centroids[p, q[p]] - centroids[p, row[p]]
            manual[v] -= np.sqrt(diff @ diff)
    assert np.allclose(scores, manual, atol=1e-10)


def test_score_catalog_nearest_without_centroids_falls_back_to_hamming():
    K, m = 4, 2
    codes = _distinct_codes(6, m=m, K=K)
    code_map = CodeMap(codes=codes, K=K, method="random")
    dists = np.full((m, K), 1.0 / K)
    dists[0, 2] = 0.9
    dists[1, 1] = 0.9
    dists /= dists.sum(axis=1, keepdims=True)
    scores = score_catalog(dists, code_map, None, InferenceConfig(ranking="nearest"))
    q = np.array([2, 1])
    manual = -np.array([(row != q).sum() for row in codes], dtype=float)
    assert np.allclose(scores, manual, atol=1e-12)


def test_rank_items_orders_and_breaks_ties():
    K, m = 8, 2
    codes = _distinct_codes(6, m=m, K=K)
    pop = np.array([5, 1, 9, 9, 0, 2])
    code_map = CodeMap(codes=codes, K=K, method="random").with_popularity(pop)
    flat = np.full((m, K), 1.0 / K)  # all items tie on score
    ranked = rank_items(flat, code_map, None, InferenceConfig())
    assert np.all(np.diff(ranked.scores) <= 1e-15)
    # ties resolve by popularity desc, then index asc
    assert ranked.items.tolist() == [2, 3, 0, 5, 1, 4]
    for pos, item in enumerate(ranked.items, start=1):
        assert ranked.rank_of(int(item)) == pos
    top_items, top_scores = ranked.top(3)
    assert top_items.tolist() == [2, 3, 0] and top_scores.shape == (3,)


def test_rank_items_point_mass_puts_target_first():
    codes, successor, oracle, code_map, _ = _ring_setup()
    hist = _history(codes, [5, 6, 7])
    _, dists = denoise_sequence(hist, oracle, None, InferenceConfig(seed=0))
    ranked = rank_items(dists, code_map, None, InferenceConfig())
    assert ranked.rank_of(int(successor[7])) == 1
