"""Interaction log ingestion, filtering, and leave-one-out splitting.

Raw (user, item, rating, timestamp) records are filtered to ratings at or
above a threshold, ordered per user by timestamp (stable on ties), and
users with too few remaining interactions are dropped. Surviving external
ids are remapped to dense 1-based internal ids; id 0 is reserved for
context padding.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import EmptyDatasetError, ParseError, SamplingError

DATASET_VERSION = 1

FIELDS = ("user", "item", "rating", "timestamp")


@dataclass(frozen=True)
class RawInteraction:
    user: str
    item: str
    rating: float
    timestamp: int


class InteractionLog:
    """Filtered, time-ordered per-user item sequences with dense ids.

    Internal user and item ids run 1..count; index helpers are 1-based.
    """

    def __init__(self, sequences: list[list[int]], user_ids: list[str], item_ids: list[str]):
        self.sequences = sequences  # sequences[i] belongs to internal user i+1
        self.user_ids = user_ids  # external id of internal user i+1
        self.item_ids = item_ids  # external id of internal item i+1
        self._item_sets: dict[int, frozenset[int]] = {}
        self._complements: dict[int, np.ndarray] = {}

    @property
    def user_count(self) -> int:
        return len(self.sequences)

    @property
    def item_count(self) -> int:
        return len(self.item_ids)

    @property
    def interaction_count(self) -> int:
        return sum(len(seq) for seq in self.sequences)

    def items_of(self, user: int) -> list[int]:
        if not 1 <= user <= self.user_count:
            raise IndexError(f"user id {user} out of range 1..{self.user_count}")
        return self.sequences[user - 1]

    def user_item_set(self, user: int) -> frozenset[int]:
        cached = self._item_sets.get(user)
        if cached is None:
            cached = frozenset(self.items_of(user))
            self._item_sets[user] = cached
        return cached

    def unseen_items(self, user: int) -> np.ndarray:
        """Items the user never interacted with, ascending."""
        cached = self._complements.get(user)
        if cached is None:
            owned = self.user_item_set(user)
            cached = np.array(
                [i for i in range(1, self.item_count + 1) if i not in owned], dtype=np.intp
            )
            self._complements[user] = cached
        return cached

    @classmethod
    def from_sequences(cls, sequences: list[list[int]], item_count: int) -> "InteractionLog":
        """Build a log directly from internal-id sequences (synthetic data)."""
        user_ids = [f"u{i + 1}" for i in range(len(sequences))]
        item_ids = [f"i{i + 1}" for i in range(item_count)]
        return cls([list(s) for s in sequences], user_ids, item_ids)

    # -- serialization -------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "format_version": DATASET_VERSION,
            "user_count": self.user_count,
            "item_count": self.item_count,
            "interaction_count": self.interaction_count,
            "user_ids": self.user_ids,
            "item_ids": self.item_ids,
            "sequences": self.sequences,
        }

    def save(self, path) -> None:
        text = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        Path(path).write_text(text + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "InteractionLog":
        from .errors import CompatibilityError

        data = json.loads(Path(path).read_text(encoding="utf-8"))
        version = data.get("format_version")
        if version != DATASET_VERSION:
            raise CompatibilityError(
                f"{path}: dataset format version {version} not supported "
                f"(expected {DATASET_VERSION})"
            )
        return cls(data["sequences"], data["user_ids"], data["item_ids"])


# ---------------------------------------------------------------------------
# ingestion


def _parse_csv(path: Path) -> tuple[list[RawInteraction], list[tuple[int, str]]]:
    records: list[RawInteraction] = []
    bad: list[tuple[int, str]] = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            return records, bad  # empty file
        if [h.strip() for h in header] != list(FIELDS):
            raise ParseError(
                f"{path}: expected header {','.join(FIELDS)}, got {','.join(header)}", [1]
            )
        for lineno, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            parsed = _parse_row(dict(zip(FIELDS, row)) if len(row) == len(FIELDS) else None)
            if parsed is None:
                bad.append((lineno, ",".join(row)))
            else:
                records.append(parsed)
    return records, bad


def _parse_jsonl(path: Path) -> tuple[list[RawInteraction], list[tuple[int, str]]]:
    records: list[RawInteraction] = []
    bad: list[tuple[int, str]] = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError:
                bad.append((lineno, line.strip()))
                continue
            parsed = _parse_row(obj) if isinstance(obj, dict) else None
            if parsed is None:
                bad.append((lineno, line.strip()))
            else:
                records.append(parsed)
    return records, bad


def _parse_row(row) -> RawInteraction | None:
    if row is None or any(f not in row for f in FIELDS):
        return None
    try:
        rating = float(row["rating"])
        timestamp = int(row["timestamp"])
    except (TypeError, ValueError):
        return None
    if isinstance(row["rating"], bool) or isinstance(row["timestamp"], bool):
        return None
    if timestamp < 0 or not np.isfinite(rating):
        return None
    user = str(row["user"]).strip()
    item = str(row["item"]).strip()
    if not user or not item:
        return None
    return RawInteraction(user=user, item=item, rating=rating, timestamp=timestamp)


def ingest(path, format: str = "csv", strict: bool = False
           ) -> tuple[list[RawInteraction], list[tuple[int, str]]]:
    """Load raw interactions; returns (records, malformed (line, content) pairs).

    With strict=True any malformed row raises ParseError naming the lines.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"input file not found: {path}")
    if format == "csv":
        records, bad = _parse_csv(path)
    elif format == "jsonl":
        records, bad = _parse_jsonl(path)
    else:
        raise ValueError(f"unknown input format {format!r}; expected csv or jsonl")
    if strict and bad:
        lines = [ln for ln, _ in bad]
        raise ParseError(f"{path}: {len(bad)} malformed row(s) at line(s) {lines}", lines)
    return records, bad


# ---------------------------------------------------------------------------
# preprocessing


def preprocess(records: list[RawInteraction], min_rating: float = 3,
               min_interactions: int = 10) -> InteractionLog:
    """Filter by rating, order by time, drop short users, remap ids densely.

    Timestamp ties keep their input order (stable sort). User ids follow
    first appearance among surviving rows; item ids follow first appearance
    scanning users in id order through their time-sorted sequences, which
    makes the mapping reproducible and idempotent.
    """
    kept = [r for r in records if r.rating >= min_rating]
    by_user: dict[str, list[RawInteraction]] = {}
    for r in kept:
        by_user.setdefault(r.user, []).append(r)

    surviving = [u for u, rows in by_user.items() if len(rows) >= min_interactions]
    if not surviving:
        raise EmptyDatasetError(
            f"no users with at least {min_interactions} interactions of rating >= {min_rating}"
        )
    user_order: list[str] = []
    seen_users = set()
    for r in kept:
        if r.user not in seen_users and len(by_user[r.user]) >= min_interactions:
            seen_users.add(r.user)
            user_order.append(r.user)

    item_map: dict[str, int] = {}
    item_order: list[str] = []
    sequences: list[list[int]] = []
    for user in user_order:
        rows = sorted(by_user[user], key=lambda r: r.timestamp)
        seq = []
        for r in rows:
            internal = item_map.get(r.item)
            if internal is None:
                internal = len(item_order) + 1
                item_map[r.item] = internal
                item_order.append(r.item)
            seq.append(internal)
        sequences.append(seq)

    return InteractionLog(sequences, user_order, item_order)


# ---------------------------------------------------------------------------
# splitting


@dataclass
class SplitDataset:
    """Leave-one-out splits: per-user test/validation targets plus sliding
    training windows over the prefix that precedes the validation target."""

    seq_len: int
    train_users: np.ndarray
    train_contexts: np.ndarray  # (N, L), left-padded with 0
    train_targets: np.ndarray
    val_users: np.ndarray
    val_contexts: np.ndarray
    val_targets: np.ndarray
    test_users: np.ndarray
    test_contexts: np.ndarray
    test_targets: np.ndarray

    def split_arrays(self, split: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        if split == "validation":
            return self.val_users, self.val_contexts, self.val_targets
        if split == "test":
            return self.test_users, self.test_contexts, self.test_targets
        raise ValueError(f"unknown split {split!r}; expected 'validation' or 'test'")

    def to_dict(self) -> dict:
        return {
            "format_version": DATASET_VERSION,
            "seq_len": self.seq_len,
            "train": {
                "users": self.train_users.tolist(),
                "contexts": self.train_contexts.tolist(),
                "targets": self.train_targets.tolist(),
            },
            "validation": {
                "users": self.val_users.tolist(),
                "contexts": self.val_contexts.tolist(),
                "targets": self.val_targets.tolist(),
            },
            "test": {
                "users": self.test_users.tolist(),
                "contexts": self.test_contexts.tolist(),
                "targets": self.test_targets.tolist(),
            },
        }

    def serialize(self) -> bytes:
        return (json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")) + "\n").encode()


def _window(seq: list[int], position: int, seq_len: int) -> list[int]:
    ctx = seq[max(0, position - seq_len):position]
    return [0] * (seq_len - len(ctx)) + ctx


def make_splits(log: InteractionLog, seq_len: int = 5) -> SplitDataset:
    """Last item is the test target, second-to-last the validation target;
    training windows slide (stride 1) over the remaining prefix."""
    train_u, train_c, train_t = [], [], []
    val_u, val_c, val_t = [], [], []
    test_u, test_c, test_t = [], [], []
    for user in range(1, log.user_count + 1):
        seq = log.items_of(user)
        n = len(seq)
        if n < 3:
            raise ValueError(f"user {user} has only {n} interactions; need at least 3 to split")
        test_u.append(user)
        test_c.append(_window(seq, n - 1, seq_len))
        test_t.append(seq[n - 1])
        val_u.append(user)
        val_c.append(_window(seq, n - 2, seq_len))
        val_t.append(seq[n - 2])
        # positions 1 .. n-3 of the prefix; position 0 has no true context
        for p in range(1, n - 2):
            train_u.append(user)
            train_c.append(_window(seq, p, seq_len))
            train_t.append(seq[p])

    return SplitDataset(
        seq_len=seq_len,
        train_users=np.asarray(train_u, dtype=np.intp),
        train_contexts=np.asarray(train_c, dtype=np.intp).reshape(len(train_u), seq_len),
        train_targets=np.asarray(train_t, dtype=np.intp),
        val_users=np.asarray(val_u, dtype=np.intp),
        val_contexts=np.asarray(val_c, dtype=np.intp).reshape(len(val_u), seq_len),
        val_targets=np.asarray(val_t, dtype=np.intp),
        test_users=np.asarray(test_u, dtype=np.intp),
        test_contexts=np.asarray(test_c, dtype=np.intp).reshape(len(test_u), seq_len),
        test_targets=np.asarray(test_t, dtype=np.intp),
    )


# ---------------------------------------------------------------------------
# negative sampling


def sample_negatives(log: InteractionLog, user: int, k: int,
                     rng: np.random.Generator) -> np.ndarray:
    """Draw k distinct items the user never interacted with, uniformly."""
    pool = log.unseen_items(user)
    if k > len(pool):
        raise SamplingError(
            f"user {user}: requested {k} negatives but only {len(pool)} items are unseen"
        )
    idx = rng.choice(len(pool), size=k, replace=False)
    return pool[idx]
