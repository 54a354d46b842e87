"""Interaction log ingestion, leave-one-out splits, and synthetic data.

Raw logs are CSV rows (user_id, item_id, timestamp). Items and users with
too few interactions are removed by iterative k-core filtering, surviving
events are grouped into per-user chronological sequences, and each
sequence is split so the last item is the test target and the
second-to-last the validation target. A small synthetic generator builds
cluster-structured datasets for desk-scale checks.
"""

from __future__ import annotations

import csv
import json
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

MAX_TEXT_CHARS = 512


class DataError(Exception):
    """Raised when input data violates the format or is unusable."""


class ParseError(DataError):
    """Raised for a malformed input row; carries the 1-based line number."""

    def __init__(self, line_no, message):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class EmptyDatasetError(DataError):
    """Raised when filtering leaves no usable users."""


@dataclass(frozen=True)
class Interaction:
    user_id: str
    item_id: str
    timestamp: int


@dataclass(frozen=True)
class UserSequence:
    user_id: str
    items: tuple  # catalog item indices, chronological order

    @property
    def n(self):
        return len(self.items)


@dataclass(frozen=True)
class Catalog:
    item_ids: tuple  # dense index -> external id
    popularity: np.ndarray  # training-split occurrence count per index
    texts: tuple = None  # optional per-index text, same length as item_ids
    index_of: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not self.index_of:
            object.__setattr__(
                self, "index_of", {v: i for i, v in enumerate(self.item_ids)}
            )

    @property
    def num_items(self):
        return len(self.item_ids)


@dataclass(frozen=True)
class SplitDataset:
    """Leave-one-out split.

    ``train_items[u]`` holds everything except the last two events, so
    train + (valid target) + (test target) concatenates back to the full
    sequence. Validation predicts ``valid_targets[u]`` from the train
    items; test predicts ``test_targets[u]`` from train items plus the
    validation target.
    """

    user_ids: tuple
    train_items: tuple  # tuple of int tuples, one per user
    valid_targets: np.ndarray
    test_targets: np.ndarray

    @property
    def num_users(self):
        return len(self.user_ids)

    def valid_input(self, u):
        return self.train_items[u]

    def test_input(self, u):
        return self.train_items[u] + (int(self.valid_targets[u]),)


@dataclass(frozen=True)
class PopularityBuckets:
    threshold: int
    long_tail: np.ndarray  # item indices with popularity < threshold
    popular: np.ndarray  # the complement

    def summary(self):
        return {
            "threshold": int(self.threshold),
            "long_tail_items": int(self.long_tail.size),
            "popular_items": int(self.popular.size),
        }


def _read_rows(path):
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ParseError(1, "empty file, expected header user_id,item_id,timestamp")
        header = [h.strip() for h in header]
        try:
            iu = header.index("user_id")
            ii = header.index("item_id")
            it = header.index("timestamp")
        except ValueError:
            raise ParseError(1, f"missing required columns in header {header}") from None
        for line_no, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) <= max(iu, ii, it):
                raise ParseError(line_no, f"expected 3 fields, got {len(row)}")
            try:
                ts = int(row[it])
            except ValueError:
                raise ParseError(line_no, f"timestamp {row[it]!r} is not an integer") from None
            if ts < 0:
                raise ParseError(line_no, f"negative timestamp {ts}")
            rows.append((row[iu], row[ii], ts))
    return rows


def _kcore(rows, min_count):
    # Users additionally need >= 3 events so every survivor can be split
    # into train / valid target / test target.
    user_min = max(min_count, 3)
    while True:
        ucnt = Counter(r[0] for r in rows)
        icnt = Counter(r[1] for r in rows)
        kept = [
            r for r in rows if ucnt[r[0]] >= user_min and icnt[r[1]] >= min_count
        ]
        if len(kept) == len(rows):
            return kept
        rows = kept


def _build_sequences(rows):
    per_user = {}
    for order, (u, i, ts) in enumerate(rows):
        per_user.setdefault(u, []).append((ts, order, i))
    sequences = {}
    for u, events in per_user.items():
        events.sort(key=lambda e: (e[0], e[1]))
        sequences[u] = [i for _, _, i in events]
    return sequences


def _training_popularity(seq_indices, num_items):
    pop = np.zeros(num_items, dtype=np.int64)
    for items in seq_indices.values():
        for v in items[:-2]:
            pop[v] += 1
    return pop


def load_interactions(path, min_count, texts=None):
    """Load a CSV log, k-core filter it, and build per-user sequences.

    Filtering repeats until every surviving user and item has at least
    ``min_count`` events (users always need >= 3). Timestamp ties keep
    input order. ``texts`` is an optional item_id -> text mapping carried
    onto the catalog, truncated to 512 characters.
    """
    if min_count < 1:
        raise ValueError(f"min_count must be >= 1, got {min_count}")
    rows = _read_rows(path)
    rows = _kcore(rows, min_count)
    if not rows:
        raise EmptyDatasetError(
            f"no users with >= {max(min_count, 3)} interactions survive filtering"
        )
    item_ids = []
    index_of = {}
    for _, i, _ in rows:
        if i not in index_of:
            index_of[i] = len(item_ids)
            item_ids.append(i)
    raw_sequences = _build_sequences(rows)
    seq_indices = {
        u: [index_of[i] for i in items] for u, items in raw_sequences.items()
    }
    pop = _training_popularity(seq_indices, len(item_ids))
    item_texts = None
    if texts is not None:
        item_texts = tuple(
            (texts.get(i) or "")[:MAX_TEXT_CHARS] if i in texts else None
            for i in item_ids
        )
    catalog = Catalog(item_ids=tuple(item_ids), popularity=pop, texts=item_texts)
    sequences = [
        UserSequence(user_id=u, items=tuple(items))
        for u, items in seq_indices.items()
    ]
    return catalog, sequences


def make_split(sequences):
    """Split each sequence into train items, valid target, test target."""
    user_ids, train_items, valid_t, test_t = [], [], [], []
    for seq in sequences:
        if seq.n < 3:
            raise DataError(
                f"user {seq.user_id!r} has only {seq.n} interactions, need >= 3"
            )
        user_ids.append(seq.user_id)
        train_items.append(seq.items[:-2])
        valid_t.append(seq.items[-2])
        test_t.append(seq.items[-1])
    return SplitDataset(
        user_ids=tuple(user_ids),
        train_items=tuple(train_items),
        valid_targets=np.asarray(valid_t, dtype=np.int64),
        test_targets=np.asarray(test_t, dtype=np.int64),
    )


def popularity_buckets(catalog, threshold):
    """Partition the catalog at a half-open popularity boundary.

    Items with training popularity in [0, threshold) are long tail; the
    rest are popular.
    """
    if threshold < 1:
        raise ValueError(f"threshold must be >= 1, got {threshold}")
    idx = np.arange(catalog.num_items)
    mask = catalog.popularity < threshold
    return PopularityBuckets(
        threshold=int(threshold), long_tail=idx[mask], popular=idx[~mask]
    )


def load_item_texts(path):
    """Read JSON-lines of {item_id, text}, truncating text to 512 chars."""
    texts = {}
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(line_no, f"invalid JSON: {exc}") from None
            if "item_id" not in obj or "text" not in obj:
                raise ParseError(line_no, "object needs keys item_id and text")
            texts[str(obj["item_id"])] = str(obj["text"])[:MAX_TEXT_CHARS]
    return texts


def load_embeddings(path):
    """Read JSON-lines of {item_id, vector} into (ids, float64 matrix)."""
    ids, vectors = [], []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(line_no, f"invalid JSON: {exc}") from None
            if "item_id" not in obj or "vector" not in obj:
                raise ParseError(line_no, "object needs keys item_id and vector")
            vec = np.asarray(obj["vector"], dtype=np.float64)
            if vec.ndim != 1:
                raise ParseError(line_no, "vector must be a flat list of numbers")
            if vectors and vec.shape != vectors[0].shape:
                raise ParseError(
                    line_no,
                    f"vector length {vec.size} differs from first row {vectors[0].size}",
                )
            ids.append(str(obj["item_id"]))
            vectors.append(vec)
    if not ids:
        raise EmptyDatasetError(f"no embeddings in {path}")
    return ids, np.stack(vectors)


def align_embeddings(catalog, ids, matrix):
    """Reorder an embedding matrix to catalog index order."""
    lookup = {i: r for r, i in enumerate(ids)}
    missing = [i for i in catalog.item_ids if i not in lookup]
    if missing:
        raise DataError(
            f"{len(missing)} catalog items lack embeddings, e.g. {missing[:5]}"
        )
    rows = np.array([lookup[i] for i in catalog.item_ids], dtype=np.int64)
    return np.ascontiguousarray(matrix[rows])


def write_interactions(path, sequences, catalog=None):
    """Write sequences back out as a CSV log with positional timestamps."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["user_id", "item_id", "timestamp"])
        for seq in sequences:
            for pos, v in enumerate(seq.items):
                item = catalog.item_ids[v] if catalog is not None else str(v)
                writer.writerow([seq.user_id, item, pos])


def write_embeddings(path, ids, matrix):
    with open(path, "w", encoding="utf-8") as fh:
        for i, row in zip(ids, np.asarray(matrix, dtype=np.float64)):
            fh.write(
                json.dumps({"item_id": i, "vector": [float(x) for x in row]}) + "\n"
            )


def generate_synthetic(
    num_items,
    num_users,
    clusters,
    markov_sharpness,
    seed,
    embed_dim=16,
    min_len=8,
    max_len=24,
    jitter=0.35,
):
    """Build a deterministic cluster-structured dataset.

    Items are assigned round-robin to clusters whose centers are well
    separated; embeddings are center + isotropic jitter. Each item has a
    designated successor (the same within-cluster rank in the next
    cluster). A walk moves to that successor with probability
    ``markov_sharpness`` and otherwise jumps uniformly to an item outside
    the successor cluster, so the in-successor-cluster rate is exactly
    the sharpness.
    """
    if not (num_items >= clusters >= 1):
        raise ValueError(f"need num_items >= clusters >= 1, got {num_items}, {clusters}")
    if not (0.0 < markov_sharpness <= 1.0):
        raise ValueError(f"markov_sharpness must be in (0, 1], got {markov_sharpness}")
    if markov_sharpness < 1.0 and clusters < 2:
        raise ValueError("markov_sharpness < 1 needs at least 2 clusters to jump to")
    if num_users < 1 or min_len < 3 or max_len < min_len:
        raise ValueError("need num_users >= 1 and 3 <= min_len <= max_len")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))

    centers = rng.normal(size=(clusters, embed_dim)) * 3.0
    cluster_of = np.arange(num_items) % clusters
    embeddings = centers[cluster_of] + jitter * rng.normal(size=(num_items, embed_dim))

    # successor keeps the within-cluster rank, moves to the next cluster
    successor = np.empty(num_items, dtype=np.int64)
    for v in range(num_items):
        nxt = v + 1
        if nxt % clusters == 0:
            nxt -= clusters
        successor[v] = nxt if nxt < num_items else (v + 1) % clusters

    out_of_cluster = {
        c: np.flatnonzero(cluster_of != c) for c in range(clusters)
    }

    sequences = []
    for u in range(num_users):
        length = int(rng.integers(min_len, max_len + 1))
        cur = int(rng.integers(num_items))
        items = [cur]
        for _ in range(length - 1):
            succ = int(successor[cur])
            succ_cluster = int(cluster_of[succ])
            if rng.random() < markov_sharpness:
                cur = succ
            else:
                pool = out_of_cluster[succ_cluster]
                cur = int(pool[rng.integers(pool.size)])
            items.append(cur)
        sequences.append(UserSequence(user_id=f"u{u:05d}", items=tuple(items)))

    item_ids = tuple(f"it{v:05d}" for v in range(num_items))
    pop = _training_popularity(
        {s.user_id: list(s.items) for s in sequences}, num_items
    )
    catalog = Catalog(item_ids=item_ids, popularity=pop)
    return catalog, sequences, embeddings
