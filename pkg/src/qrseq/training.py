"""Training loop: sampled binary cross-entropy, Adam, epoch control.

The objective sums -log(sigmoid(score)) over targets and
-log(1 - sigmoid(score)) over sampled negatives, computed through
softplus so large scores never overflow. L2 regularization is applied as
decoupled weight decay inside the optimizer step rather than as a loss
term, which keeps the differentiated objective equal to the pure
cross-entropy (the two formulations differ only through Adam's moment
coupling).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import rng as rng_streams
from .autodiff import Tensor
from .data import InteractionLog, SplitDataset, sample_negatives
from .errors import ConfigError
from .evaluation import EvalConfig, MetricsReport, evaluate
from .model import ModelConfig, ModelScorer, ParameterStore, forward_batch


@dataclass
class TrainConfig:
    seed: int
    lr: float = 0.001
    batch_size: int = 512
    l2: float = 1e-6
    negatives_per_target: int = 3
    base_epochs: int = 20
    patience: int = 5
    max_epochs: int = 200

    def __post_init__(self):
        if self.lr < 0:
            raise ConfigError(f"lr must be nonnegative, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.l2 < 0:
            raise ConfigError(f"l2 must be nonnegative, got {self.l2}")
        if self.negatives_per_target < 1:
            raise ConfigError(
                f"negatives_per_target must be >= 1, got {self.negatives_per_target}"
            )
        if self.base_epochs < 0:
            raise ConfigError(f"base_epochs must be >= 0, got {self.base_epochs}")
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")
        if self.max_epochs < self.base_epochs:
            raise ConfigError("max_epochs must be >= base_epochs")


class AdamState:
    """First/second moment buffers mirroring every parameter, plus the step count."""

    def __init__(self, store: ParameterStore, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {name: np.zeros_like(p.value) for name, p in store.named_parameters().items()}
        self.v = {name: np.zeros_like(p.value) for name, p in store.named_parameters().items()}


def bce_loss(target_scores: Tensor, negative_scores: Tensor | None = None) -> Tensor:
    """Summed binary cross-entropy over target and negative scores.

    -log(sigmoid(y)) == softplus(-y) and -log(1 - sigmoid(y)) == softplus(y),
    so the result stays finite for any finite score.
    """
    if target_scores.value.size == 0:
        raise ValueError("bce_loss needs at least one target score")
    loss = ad.sum_all(ad.softplus(ad.neg(target_scores)))
    if negative_scores is not None and negative_scores.value.size:
        loss = ad.add(loss, ad.sum_all(ad.softplus(negative_scores)))
    return loss


def adam_step(store: ParameterStore, state: AdamState, lr: float, l2: float = 0.0) -> None:
    """One bias-corrected Adam update with decoupled weight decay lr*l2*theta.

    The padding rows (id 0) never receive updates.
    """
    store.clear_padding_grads()
    state.step_count += 1
    t = state.step_count
    correct1 = 1.0 - state.beta1 ** t
    correct2 = 1.0 - state.beta2 ** t
    for name, p in store.named_parameters().items():
        g = p.grad
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        update = (m / correct1) / (np.sqrt(v / correct2) + state.eps)
        if l2:
            update = update + l2 * p.value
        p.value -= lr * update


def train_epoch(log: InteractionLog, splits: SplitDataset, store: ParameterStore,
                state: AdamState, config: TrainConfig, epoch: int) -> tuple[float, int]:
    """One pass over shuffled training windows; returns (mean loss, examples)."""
    n = len(splits.train_targets)
    if n == 0:
        raise ValueError("training split is empty")
    shuffle_rng = rng_streams.stream(config.seed, "shuffle", epoch)
    negatives_rng = rng_streams.stream(config.seed, "negatives", epoch)
    dropout_rng = rng_streams.stream(config.seed, "dropout", epoch)
    order = shuffle_rng.permutation(n)
    k = config.negatives_per_target

    total_loss = 0.0
    for lo in range(0, n, config.batch_size):
        batch = order[lo:lo + config.batch_size]
        users = splits.train_users[batch]
        contexts = splits.train_contexts[batch]
        targets = splits.train_targets[batch]
        negatives = np.stack(
            [sample_negatives(log, int(u), k, negatives_rng) for u in users]
        )
        candidates = np.concatenate([targets[:, None], negatives], axis=1)

        store.zero_grads()
        with ad.record():
            scores, _ = forward_batch(
                store, contexts, users, candidates, mode="train", rng=dropout_rng
            )
            loss = bce_loss(
                ad.slice_cols(scores, 0, 1), ad.slice_cols(scores, 1, 1 + k)
            )
        ad.backward(loss)
        adam_step(store, state, config.lr, config.l2)
        total_loss += loss.item()

    return total_loss / n, n


@dataclass
class EpochRecord:
    epoch: int
    mean_loss: float
    val_map: float
    val_recall: float
    val_ndcg: float


@dataclass
class FitResult:
    store: ParameterStore
    best_epoch: int
    epochs_run: int
    val_report: MetricsReport
    test_report: MetricsReport
    history: list[EpochRecord] = field(default_factory=list)


def fit(log: InteractionLog, splits: SplitDataset, model_config: ModelConfig,
        train_config: TrainConfig, eval_config: EvalConfig,
        evaluate_fn=None, progress=None) -> FitResult:
    """Train with per-epoch validation and return the best-validation checkpoint.

    Runs base_epochs epochs, then keeps going while any validation metric
    improved within the last `patience` epochs (hard cap at max_epochs).
    The returned checkpoint is the epoch with the best validation ndcg@k,
    paired with that same epoch's test metrics.

    `evaluate_fn(store, split)` may be injected for tests; the default runs
    the sampled-ranking evaluation on this run's data.
    """
    if evaluate_fn is None:
        def evaluate_fn(store, split):
            return evaluate(ModelScorer(store), split, log, splits, eval_config)

    store = ParameterStore(model_config, rng=rng_streams.stream(train_config.seed, "init"))
    state = AdamState(store)

    if train_config.base_epochs == 0:
        val = evaluate_fn(store, "validation")
        test = evaluate_fn(store, "test")
        return FitResult(store, 0, 0, val, test, [])

    history: list[EpochRecord] = []
    best_ndcg = -np.inf
    best = None
    metric_bests = {"map": -np.inf, "recall": -np.inf, "ndcg": -np.inf}
    last_improvement = 0
    epoch = 0
    while True:
        epoch += 1
        mean_loss, _ = train_epoch(log, splits, store, state, train_config, epoch)
        val = evaluate_fn(store, "validation")
        test = evaluate_fn(store, "test")

        improved = False
        for key, value in (("map", val.map), ("recall", val.recall), ("ndcg", val.ndcg)):
            if value > metric_bests[key]:
                metric_bests[key] = value
                improved = True
        if improved:
            last_improvement = epoch
        if val.ndcg > best_ndcg:
            best_ndcg = val.ndcg
            best = (epoch, store.copy(), val, test)

        record = EpochRecord(epoch, mean_loss, val.map, val.recall, val.ndcg)
        history.append(record)
        if progress is not None:
            progress(record)

        if epoch >= train_config.max_epochs:
            break
        if epoch >= train_config.base_epochs and epoch - last_improvement >= train_config.patience:
            break

    best_epoch, best_store, best_val, best_test = best
    return FitResult(best_store, best_epoch, epoch, best_val, best_test, history)
