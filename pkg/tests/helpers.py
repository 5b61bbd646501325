"""Shared test utilities: independent oracles and synthetic datasets."""
from __future__ import annotations

import numpy as np

from qrseq import autodiff as ad
from qrseq import rng as rng_streams
from qrseq.data import InteractionLog
from qrseq.model import ModelConfig, ParameterStore, forward_batch
from qrseq.training import bce_loss


def numeric_gradient(loss_fn, tensor: ad.Tensor, eps: float = 1e-5) -> np.ndarray:
    """Central finite differences of loss_fn() w.r.t. every entry of `tensor`.

    loss_fn must re-evaluate the loss from current tensor values; it is the
    independent oracle against which analytic gradients are checked.
    """
    grad = np.zeros_like(tensor.value)
    flat = tensor.value.reshape(-1)
    flat_grad = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = loss_fn()
        flat[i] = orig - eps
        lo = loss_fn()
        flat[i] = orig
        flat_grad[i] = (hi - lo) / (2.0 * eps)
    return grad


def relative_errors(analytic: np.ndarray, numeric: np.ndarray,
                    floor: float = 1e-3) -> np.ndarray:
    """|a - n| / max(|a|, |n|, floor); the floor keeps near-zero gradients
    from amplifying finite-difference roundoff into spurious failures."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def model_loss_case(config: ModelConfig, seed: int, batch: int = 3, init_std: float = 0.4):
    """A small model plus a fixed training example set for gradient checking.

    Returns (store, loss_fn, run_tape) where loss_fn() evaluates the
    objective from current parameter values without recording, and
    run_tape() records one forward/backward pass, leaving gradients in
    the store.
    """
    rng = rng_streams.stream(seed, "gradcheck")
    store = ParameterStore(config, rng, init_std=init_std)
    contexts = rng.integers(0, config.num_items + 1, size=(batch, config.seq_len))
    contexts[0, 0] = 0  # keep one padded position in play
    users = rng.integers(1, config.num_users + 1, size=batch)
    targets = rng.integers(1, config.num_items + 1, size=(batch, 1))
    negatives = rng.integers(1, config.num_items + 1, size=(batch, 2))
    candidates = np.concatenate([targets, negatives], axis=1)

    def compute_loss() -> ad.Tensor:
        scores, _ = forward_batch(store, contexts, users, candidates, mode="eval")
        return bce_loss(ad.slice_cols(scores, 0, 1), ad.slice_cols(scores, 1, 3))

    def loss_fn() -> float:
        return compute_loss().item()

    def run_tape() -> float:
        store.zero_grads()
        with ad.record():
            loss = compute_loss()
        ad.backward(loss)
        return loss.item()

    return store, loss_fn, run_tape


def oracle_rank(candidate_ids, scores, target_id) -> int:
    """Sort-based rank oracle, independent of the comparison-counting path.

    Sorts the scores ascending and binary-searches the target's score:
    the pessimistic rank (target loses every tie) equals the number of
    scores at or above it, target included.
    """
    scores = np.asarray(scores, dtype=float)
    candidate_ids = np.asarray(candidate_ids)
    target_score = float(scores[candidate_ids == target_id][0])
    ascending = np.sort(scores)
    below = int(np.searchsorted(ascending, target_score, side="left"))
    return len(scores) - below


# ---------------------------------------------------------------------------
# synthetic datasets


def chain_log(num_users: int = 500, num_items: int = 200, seq_len: int = 30,
              seed: int = 0) -> InteractionLog:
    """Users walk a fixed random permutation: the next item is a
    deterministic function of the last one."""
    rng = rng_streams.stream(seed, "chain")
    nxt = rng.permutation(num_items) + 1  # nxt[i-1] follows item i
    sequences = []
    for _ in range(num_users):
        item = int(rng.integers(1, num_items + 1))
        seq = [item]
        for _ in range(seq_len - 1):
            item = int(nxt[item - 1])
            seq.append(item)
        sequences.append(seq)
    return InteractionLog.from_sequences(sequences, num_items)


def mixed_order_log(num_users: int = 500, num_items: int = 200, seq_len: int = 30,
                    seed: int = 0) -> InteractionLog:
    """Mixed-order rule: which first-order map applies depends on the
    item before last, so width-1 features alone cannot disambiguate."""
    rng = rng_streams.stream(seed, "mixed")
    map_a = rng.permutation(num_items) + 1
    map_b = rng.permutation(num_items) + 1
    half = num_items // 2
    sequences = []
    for _ in range(num_users):
        prev = int(rng.integers(1, num_items + 1))
        last = int(rng.integers(1, num_items + 1))
        seq = [prev, last]
        for _ in range(seq_len - 2):
            table = map_a if prev <= half else map_b
            prev, last = last, int(table[last - 1])
            seq.append(last)
        sequences.append(seq)
    return InteractionLog.from_sequences(sequences, num_items)


def uniform_log(num_users: int = 600, num_items: int = 400, seq_len: int = 12,
                seed: int = 0) -> InteractionLog:
    """Interactions drawn uniformly at random: no popularity signal."""
    rng = rng_streams.stream(seed, "uniform")
    sequences = []
    for _ in range(num_users):
        seq = rng.choice(num_items, size=seq_len, replace=False) + 1
        sequences.append([int(i) for i in seq])
    return InteractionLog.from_sequences(sequences, num_items)


def write_interactions_csv(path, sequences: list[list[str]] | None = None,
                           rows: list[tuple] | None = None) -> None:
    """Write a raw interaction CSV either from explicit rows or from
    per-user item sequences (rating 5, timestamps by position)."""
    lines = ["user,item,rating,timestamp"]
    if rows is not None:
        for row in rows:
            lines.append(",".join(str(v) for v in row))
    else:
        for u, seq in enumerate(sequences, start=1):
            for t, item in enumerate(seq):
                lines.append(f"u{u},{item},5,{t}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def log_to_csv(path, log: InteractionLog) -> None:
    """Dump an InteractionLog back to raw CSV (rating 5, positional timestamps)."""
    rows = []
    for user in range(1, log.user_count + 1):
        for t, item in enumerate(log.items_of(user)):
            rows.append((f"u{user}", f"i{item}", 5, t))
    write_interactions_csv(path, rows=rows)
