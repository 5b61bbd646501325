"""Sampled-candidate ranking evaluation.

Each user's held-out target is ranked against a fixed number of sampled
items the user never interacted with (100 by default, so 101 candidates).
Ties count against the target, so a constant-output model cannot look
good. Candidate draws come from a per-(seed, split, user) stream, making
reports reproducible and comparable across epochs regardless of batching.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import rng as rng_streams
from .data import InteractionLog, SplitDataset, sample_negatives
from .errors import ConfigError

REPORT_VERSION = 1


@dataclass
class EvalConfig:
    seed: int = 0
    num_negatives: int = 100
    k: int = 10

    def __post_init__(self):
        if self.num_negatives < 0:
            raise ConfigError(f"num_negatives must be nonnegative, got {self.num_negatives}")
        if self.k < 1:
            raise ConfigError(f"k must be positive, got {self.k}")
        if self.num_negatives + 1 < self.k:
            raise ConfigError(
                f"candidate count {self.num_negatives + 1} is smaller than k={self.k}"
            )


@dataclass
class MetricsReport:
    split: str
    seed: int
    k: int
    ranks: list[int]
    map: float
    recall: float
    ndcg: float
    warnings: list[str] = field(default_factory=list)

    @property
    def user_count(self) -> int:
        return len(self.ranks)

    def to_json_dict(self) -> dict:
        return {
            "format_version": REPORT_VERSION,
            "split": self.split,
            "seed": self.seed,
            "users": self.user_count,
            "map": self.map,
            f"recall_at_{self.k}": self.recall,
            f"ndcg_at_{self.k}": self.ndcg,
            "warnings": self.warnings,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), sort_keys=True, indent=2) + "\n"


def rank_target(scores: Mapping[int, float], target_id: int) -> int:
    """1-based rank of the target; every tie counts against it."""
    if target_id not in scores:
        raise ValueError(f"target {target_id} is not among the scored candidates")
    target_score = scores[target_id]
    greater = 0
    ties = 0
    for cand, s in scores.items():
        if cand == target_id:
            continue
        if s > target_score:
            greater += 1
        elif s == target_score:
            ties += 1
    return 1 + greater + ties


def user_metrics(rank: int, k: int) -> tuple[float, float, float]:
    """(average precision, recall@k, ndcg@k) for a single relevant item."""
    if rank < 1:
        raise ValueError(f"rank must be >= 1, got {rank}")
    ap = 1.0 / rank
    recall = 1.0 if rank <= k else 0.0
    ndcg = 1.0 / math.log2(rank + 1) if rank <= k else 0.0
    return ap, recall, ndcg


def evaluate(scorer, split: str, log: InteractionLog, splits: SplitDataset,
             config: EvalConfig) -> MetricsReport:
    """Rank every user's held-out target among sampled unseen candidates.

    `scorer` only needs a ``score_batch(user_ids, contexts, candidate_ids)``
    method returning a float array of the candidate shape, so trained
    models and popularity baselines evaluate through the same path.
    """
    users, contexts, targets = splits.split_arrays(split)
    if len(users) == 0:
        raise ValueError(f"split {split!r} is empty")
    warnings: list[str] = []
    candidate_rows: list[np.ndarray] = []
    for user, target in zip(users, targets):
        user = int(user)
        stream = rng_streams.stream(config.seed, "eval-candidates", split, user)
        available = log.item_count - len(log.user_item_set(user))
        n_neg = min(config.num_negatives, available)
        if n_neg < config.num_negatives:
            warnings.append(
                f"user {user}: only {n_neg} of {config.num_negatives} negatives available"
            )
        negatives = sample_negatives(log, user, n_neg, stream)
        candidate_rows.append(np.concatenate([[int(target)], negatives]))

    # Group by candidate count so each group scores as one rectangular batch.
    by_width: dict[int, list[int]] = {}
    for i, row in enumerate(candidate_rows):
        by_width.setdefault(len(row), []).append(i)
    scores_per_user: list[np.ndarray | None] = [None] * len(users)
    for width, rows in by_width.items():
        sel = np.asarray(rows)
        cand_matrix = np.stack([candidate_rows[i] for i in rows])
        scored = scorer.score_batch(users[sel], contexts[sel], cand_matrix)
        for j, i in enumerate(rows):
            scores_per_user[i] = scored[j]

    ranks: list[int] = []
    ap_sum = recall_sum = ndcg_sum = 0.0
    for i, (user, target) in enumerate(zip(users, targets)):
        row_scores = dict(zip((int(c) for c in candidate_rows[i]), scores_per_user[i]))
        rank = rank_target(row_scores, int(target))
        ranks.append(rank)
        ap, recall, ndcg = user_metrics(rank, config.k)
        ap_sum += ap
        recall_sum += recall
        ndcg_sum += ndcg

    n = len(ranks)
    return MetricsReport(
        split=split,
        seed=config.seed,
        k=config.k,
        ranks=ranks,
        map=ap_sum / n,
        recall=recall_sum / n,
        ndcg=ndcg_sum / n,
        warnings=warnings,
    )


class PopRecScorer:
    """Non-personalized baseline: score = training-prefix frequency."""

    def __init__(self, counts: np.ndarray):
        self.counts = counts

    def score_batch(self, user_ids, contexts, candidate_ids) -> np.ndarray:
        cands = np.asarray(candidate_ids, dtype=np.intp)
        return self.counts[cands].astype(np.float64)


def poprec_baseline(log: InteractionLog) -> PopRecScorer:
    """Popularity counts excluding each user's two held-out items."""
    counts = np.zeros(log.item_count + 1, dtype=np.int64)
    for user in range(1, log.user_count + 1):
        for item in log.items_of(user)[:-2]:
            counts[item] += 1
    return PopRecScorer(counts)
