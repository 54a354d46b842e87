import numpy as np
import pytest

from ddsr.corpus import Catalog, SplitDataset


def build_cycle_corpus(num_items=40, num_users=30, seq_len=8, seed=0):
    """Corpus whose every sequence walks the cycle v -> (v+1) % V.

    The successor of any item is fully determined, so an oracle that
    knows the cycle can place every held-out target at rank 1.
    """
    rng = np.random.default_rng(seed)
    item_ids = tuple(f"it{v:03d}" for v in range(num_items))
    user_ids = []
    train_items = []
    valid_targets = []
    test_targets = []
    popularity = np.zeros(num_items, dtype=np.int64)
    for u in range(num_users):
        start = int(rng.integers(0, num_items))
        walk = [(start + j) % num_items for j in range(seq_len)]
        user_ids.append(f"u{u:03d}")
        train_items.append(tuple(walk[:-2]))
        valid_targets.append(walk[-2])
        test_targets.append(walk[-1])
        for v in walk[:-2]:
            popularity[v] += 1
    catalog = Catalog(item_ids=item_ids, popularity=popularity)
    dataset = SplitDataset(
        user_ids=tuple(user_ids),
        train_items=tuple(train_items),
        valid_targets=np.asarray(valid_targets, dtype=np.int64),
        test_targets=np.asarray(test_targets, dtype=np.int64),
    )
    return catalog, dataset


class PointMassOracle:
    """Denoiser stub that bets everything on the known successor's codes.

    Blocks whose code tuple is not in the lookup get flat logits. Mimics
    the approximator interface closely enough for inference and
    evaluation: ``config`` plus ``forward``.
    """

    HIT = 50.0

    def __init__(self, codes, successor, max_positions=64):
        codes = np.asarray(codes, dtype=np.int64)
        self._codes = codes
        self._succ = np.asarray(successor, dtype=np.int64)
        self._lookup = {tuple(row): v for v, row in enumerate(codes)}
        m, K = codes.shape[1], int(codes.max()) + 1
        self.config = type(
            "Cfg", (), {"m": m, "K": K, "max_positions": max_positions, "dropout": 0.0}
        )()
        self.K = K

    def forward(self, codes, t, item_mask, train=False, rng=None, want_cache=False):
        codes = np.asarray(codes, dtype=np.int64)
        B, L, m = codes.shape
        logits = np.zeros((B, L, m, self.K))
        for b in range(B):
            for l in range(L):
                if not item_mask[b, l]:
                    continue
                v = self._lookup.get(tuple(codes[b, l]))
                if v is None:
                    continue
                nxt = self._codes[self._succ[v]]
                logits[b, l, np.arange(m), nxt] = self.HIT
        if want_cache:
            return logits, {}
        return logits


@pytest.fixture
def cycle_corpus():
    return build_cycle_corpus()
