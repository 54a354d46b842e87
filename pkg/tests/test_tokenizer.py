import numpy as np
import pytest
from scipy import stats

from ddsr import corpus, tokenizer
from ddsr.seeding import as_generator
from ddsr.tokenizer import (
    Codebook,
    CodeMap,
    TokenizerConfig,
    TokenizerError,
    fit_pq,
    fit_rqvae,
    load_codebook,
    random_codes,
    residual_quantize,
    resolve_item,
    save_codebook,
)


def _catalog(num_items, popularity=None):
    ids = tuple(f"it{v:05d}" for v in range(num_items))
    pop = (
        np.asarray(popularity, dtype=np.int64)
        if popularity is not None
        else np.ones(num_items, dtype=np.int64)
    )
    return corpus.Catalog(item_ids=ids, popularity=pop)


def _brute_pq_codes(embeddings, centroids):
    # independent per-position argmin over every centroid
    v, d = embeddings.shape
    m, K, sub = centroids.shape
    codes = np.empty((v, m), dtype=np.int64)
    for p in range(m):
        block = embeddings[:, p * sub : (p + 1) * sub]
        for i in range(v):
            dists = np.linalg.norm(centroids[p] - block[i], axis=1)
            codes[i, p] = int(np.argmin(dists))
    return codes


def test_pq_codes_match_exhaustive_search():
    rng = as_generator(7)
    emb = rng.normal(size=(200, 8))
    cfg = TokenizerConfig(method="pq", m=4, K=4, seed=3)
    codebook, code_map = fit_pq(emb, cfg)
    expected = _brute_pq_codes(emb, codebook.centroids)
    assert np.array_equal(code_map.codes, expected)


def test_pq_two_value_subspaces_assign_by_proximity():
    # sub-vector values cluster at 0 and 1; 0.9 joins the 1-side centroid
    emb = np.array([[0.0, 0.0], [1.0, 1.0], [0.9, 0.1]])
    cfg = TokenizerConfig(method="pq", m=2, K=2, seed=0)
    _, code_map = fit_pq(emb, cfg)
    codes = code_map.codes
    assert codes[2, 0] == codes[1, 0]
    assert codes[2, 1] == codes[0, 1]
    assert codes[0, 0] != codes[1, 0]


def test_pq_distortion_non_increasing():
    rng = as_generator(11)
    emb = rng.normal(size=(300, 8))
    cfg = TokenizerConfig(method="pq", m=2, K=8, kmeans_iters=15, seed=1)
    codebook, _ = fit_pq(emb, cfg)
    for curve in codebook.meta["distortion_curves"]:
        diffs = np.diff(np.asarray(curve))
        assert np.all(diffs <= 1e-12)


def test_pq_identical_embeddings_collide():
    rng = as_generator(2)
    emb = rng.normal(size=(6, 4))
    emb[4] = emb[1]
    cfg = TokenizerConfig(method="pq", m=2, K=4, seed=0)
    _, code_map = fit_pq(emb, cfg)
    assert np.array_equal(code_map.codes[1], code_map.codes[4])
    assert any({1, 4} <= set(g) for g in code_map.collision_groups)


def test_pq_rejects_indivisible_dim():
    emb = np.zeros((10, 7))
    with pytest.raises(TokenizerError, match="not divisible"):
        fit_pq(emb, TokenizerConfig(method="pq", m=2, K=2))


def test_pq_shrinks_codebook_when_data_degenerate():
    # two distinct sub-vectors per position but K=4 requested
    emb = np.repeat(np.array([[0.0, 0.0], [1.0, 1.0]]), 5, axis=0)
    cfg = TokenizerConfig(method="pq", m=2, K=4, seed=0)
    codebook, code_map = fit_pq(emb, cfg)
    assert codebook.meta["effective_k"] == [2, 2]
    assert codebook.centroids.shape == (2, 4, 1)
    assert np.all(code_map.codes < 4)
    # padded rows stay resolvable
    assert np.all(np.isfinite(codebook.centroids))


def test_pq_deterministic_under_seed():
    rng = as_generator(5)
    emb = rng.normal(size=(50, 8))
    cfg = TokenizerConfig(method="pq", m=4, K=8, seed=9)
    cb1, cm1 = fit_pq(emb, cfg)
    cb2, cm2 = fit_pq(emb, cfg)
    assert np.array_equal(cm1.codes, cm2.codes)
    assert np.array_equal(cb1.centroids, cb2.centroids)


def test_residual_identity_holds_at_every_level():
    rng = as_generator(13)
    z = rng.normal(size=(40, 6))
    codebooks = rng.normal(size=(3, 5, 6))
    codes, residuals, quant = residual_quantize(z, codebooks)
    assert len(residuals) == 4
    for d in range(3):
        chosen = codebooks[d][codes[:, d]]
        assert np.array_equal(residuals[d + 1], residuals[d] - chosen)
    assert np.allclose(quant + residuals[-1], z, atol=1e-12)


def test_rqvae_single_level_is_plain_vq():
    rng = as_generator(4)
    emb = rng.normal(size=(80, 8))
    cfg = TokenizerConfig(
        method="rqvae", m=1, K=8, rqvae_hidden=(16, 4), seed=0
    )
    state, code_map = fit_rqvae(emb, cfg, epochs=5, lr=1e-3)
    z, _ = state.encoder.forward(emb)
    expected = np.array(
        [np.argmin(np.linalg.norm(state.codebooks[0] - zi, axis=1)) for zi in z]
    )
    assert np.array_equal(code_map.codes[:, 0], expected)


def test_rqvae_residual_norms_non_increasing():
    catalog, sequences, emb = corpus.generate_synthetic(
        num_items=500, num_users=10, clusters=10, markov_sharpness=0.9, seed=0
    )
    cfg = TokenizerConfig(
        method="rqvae", m=4, K=16, rqvae_hidden=(64, 16), seed=0
    )
    state, _ = fit_rqvae(emb, cfg, epochs=20, lr=1e-3)
    norms = state.residual_norms
    assert norms.shape == (5,)
    assert np.all(np.diff(norms) <= 1e-9)


def test_rqvae_loss_descends():
    rng = as_generator(21)
    emb = rng.normal(size=(200, 12))
    cfg = TokenizerConfig(
        method="rqvae", m=2, K=8, rqvae_hidden=(32, 8), seed=1
    )
    state, _ = fit_rqvae(emb, cfg, epochs=20, lr=1e-3)
    assert state.loss_curve[19] < state.loss_curve[0]


def test_rqvae_deterministic_under_seed():
    rng = as_generator(6)
    emb = rng.normal(size=(60, 8))
    cfg = TokenizerConfig(
        method="rqvae", m=2, K=4, rqvae_hidden=(16, 4), seed=2
    )
    _, cm1 = fit_rqvae(emb, cfg, epochs=3, lr=1e-3)
    _, cm2 = fit_rqvae(emb, cfg, epochs=3, lr=1e-3)
    assert np.array_equal(cm1.codes, cm2.codes)


def test_random_codes_deterministic_and_in_range():
    catalog = _catalog(30)
    cfg = TokenizerConfig(method="random", m=3, K=5, seed=4)
    cm1 = random_codes(catalog, cfg)
    cm2 = random_codes(catalog, cfg)
    assert np.array_equal(cm1.codes, cm2.codes)
    assert cm1.codes.shape == (30, 3)
    assert np.all((cm1.codes >= 0) & (cm1.codes < 5))


def test_random_codes_uniform_per_position():
    catalog = _catalog(10000)
    cfg = TokenizerConfig(method="random", m=8, K=256, seed=0)
    cm = random_codes(catalog, cfg)
    for p in range(8):
        counts = np.bincount(cm.codes[:, p], minlength=256)
        _, pval = stats.chisquare(counts)
        assert pval > 0.01


def test_config_rejects_degenerate_codebook():
    with pytest.raises(ValueError, match="K >= 2"):
        TokenizerConfig(method="random", m=2, K=1)


def test_resolve_exact_unique_match():
    codes = np.array([[0, 1], [1, 0], [2, 2]])
    cm = CodeMap(codes=codes, K=3, method="random")
    assert resolve_item((1, 0), cm, None) == 1


def test_resolve_collision_prefers_popular():
    codes = np.array([[0, 0], [1, 1], [1, 1]])
    cm = CodeMap(codes=codes, K=2, method="random").with_popularity([5, 3, 9])
    assert resolve_item((1, 1), cm, None) == 2


def test_resolve_nearest_matches_brute_force():
    rng = as_generator(17)
    centroids = rng.normal(size=(2, 4, 3))
    codes = np.array([[0, 0], [1, 2], [3, 3]])
    cm = CodeMap(codes=codes, K=4, method="pq")
    cb = Codebook(method="pq", m=2, K=4, centroids=centroids)
    query = (2, 1)  # owned by no item
    dists = []
    for v in range(3):
        d = 0.0
        for p in range(2):
            d += np.linalg.norm(centroids[p, query[p]] - centroids[p, codes[v, p]])
        dists.append(d)
    assert resolve_item(query, cm, cb) == int(np.argmin(dists))


def test_resolve_random_codes_fall_back_to_hamming():
    codes = np.array([[0, 0, 0], [0, 0, 1], [2, 2, 2]])
    cm = CodeMap(codes=codes, K=3, method="random")
    # query differs from item 1 in one slot, from item 0 in two
    assert resolve_item((1, 0, 1), cm, None) == 1


def test_resolve_rejects_bad_input():
    cm = CodeMap(codes=np.array([[0, 0]]), K=2, method="random")
    with pytest.raises(ValueError, match="out of range"):
        resolve_item((0, 5), cm, None)
    empty = CodeMap(codes=np.zeros((0, 2), dtype=np.int64), K=2, method="random")
    with pytest.raises(TokenizerError, match="empty"):
        resolve_item((0, 0), empty, None)


def test_distance_tables_random_is_unit_hamming():
    cb = Codebook(method="random", m=2, K=3)
    tables = cb.distance_tables()
    assert tables.shape == (2, 3, 3)
    assert np.array_equal(tables[0], 1.0 - np.eye(3))


def test_distance_tables_match_pairwise_norms():
    rng = as_generator(8)
    centroids = rng.normal(size=(2, 3, 4))
    tables = Codebook(method="pq", m=2, K=3, centroids=centroids).distance_tables()
    for p in range(2):
        for i in range(3):
            for j in range(3):
                want = np.linalg.norm(centroids[p, i] - centroids[p, j])
                assert tables[p, i, j] == pytest.approx(want, abs=1e-12)


def test_codebook_roundtrip(tmp_path):
    rng = as_generator(19)
    emb = rng.normal(size=(20, 8))
    catalog = _catalog(20, popularity=rng.integers(1, 50, size=20))
    cfg = TokenizerConfig(method="pq", m=4, K=4, seed=0)
    codebook, code_map = fit_pq(emb, cfg)
    path = tmp_path / "codebook.json"
    save_codebook(path, codebook, code_map, catalog)
    loaded_cb, loaded_cm = load_codebook(path, catalog)
    assert np.array_equal(loaded_cm.codes, code_map.codes)
    assert np.allclose(loaded_cb.centroids, codebook.centroids)
    assert loaded_cm.popularity is not None
    assert loaded_cm.collision_groups == code_map.collision_groups


def test_load_codebook_requires_every_item(tmp_path):
    import json

    catalog = _catalog(3)
    cfg = TokenizerConfig(method="random", m=2, K=4, seed=0)
    cm = random_codes(catalog, cfg)
    path = tmp_path / "codebook.json"
    save_codebook(path, None, cm, catalog)
    doc = json.loads(path.read_text())
    del doc["codes"]["it00001"]
    path.write_text(json.dumps(doc))
    with pytest.raises(TokenizerError, match="missing"):
        load_codebook(path, catalog)
