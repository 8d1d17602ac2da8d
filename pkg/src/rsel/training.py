"""Training: the in-batch-negatives objective, the SGD schedule, the
pretraining loop, and the two fine-tuning regimes.

Each batch of K (input, response) pairs is scored all-against-all; every
input's own response is the positive and the other K-1 responses are the
negatives. Label smoothing puts ``smoothing_mass`` on the positive and
spreads the remainder evenly over the negatives. Fine-tuning either
continues training on target pairs only ("direct") or mixes a fixed
percentage of source pairs into every batch ("mixed"), with early stopping
on target validation recall.
"""

from __future__ import annotations

import dataclasses
import json
import math
import time
from pathlib import Path
from typing import IO, Sequence

import numpy as np

from . import evaluation
from .encoder import EncoderConfig, score_matrix_node
from .numerics import ParamStore, Tape
from .textpipe import DialoguePair, FeatureIds, Vocabulary, featurize, normalize, truncate_tokens

EMBEDDING_TABLES = ("embeddings/unigram", "embeddings/bigram")


@dataclasses.dataclass
class TrainingConfig:
    batch_size: int = 500
    lr0: float = 0.03
    decay_factor: float = 0.3
    decay_every: int = 1_000_000
    decay_after: int = 2_500_000
    smoothing_mass: float = 0.8
    scale_embedding_grads_by_batch: bool = True
    max_steps: int | None = None
    seed: int = 0

    def __post_init__(self) -> None:
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.5 < self.smoothing_mass <= 1.0:
            raise ValueError("smoothing_mass must lie in (0.5, 1]")
        if self.lr0 <= 0 or self.decay_every < 1 or self.decay_after < 0:
            raise ValueError("invalid learning-rate schedule")


@dataclasses.dataclass
class FinetuneConfig:
    strategy: str = "direct"
    source_percent: float = 75.0
    patience: int = 5
    eval_every: int = 200

    def __post_init__(self) -> None:
        if self.strategy not in ("direct", "mixed"):
            raise ValueError(f"unknown strategy {self.strategy!r} (direct|mixed)")
        if not 0 <= self.source_percent < 100:
            raise ValueError("source_percent must lie in [0, 100)")
        if self.patience < 1 or self.eval_every < 1:
            raise ValueError("patience and eval_every must be >= 1")


@dataclasses.dataclass
class TrainState:
    params: ParamStore
    step: int = 0
    best_metric: float = -math.inf
    best_step: int = -1
    history: list[tuple[int, float, float]] = dataclasses.field(default_factory=list)


def batch_loss(scores: np.ndarray, smoothing_mass: float) -> tuple[float, np.ndarray]:
    """Smoothed softmax cross-entropy over each row of a K x K score matrix.

    Returns the scalar loss (mean over rows) and its gradient with respect
    to the scores, ``(softmax - targets) / K``. With ``smoothing_mass=1``
    this is exactly the negated in-batch objective scaled by 1/K.
    """
    scores = np.asarray(scores)
    if scores.ndim != 2 or scores.shape[0] != scores.shape[1]:
        raise ValueError(f"scores must be square, got {scores.shape}")
    k = scores.shape[0]
    if k == 1 and smoothing_mass < 1.0:
        raise ValueError("K=1 with smoothing_mass < 1: no mass recipient")

    targets = np.full((k, k), (1.0 - smoothing_mass) / max(k - 1, 1), dtype=np.float64)
    np.fill_diagonal(targets, smoothing_mass)

    s64 = scores.astype(np.float64)
    shifted = s64 - s64.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - logsumexp
    loss = float(-(targets * log_probs).sum() / k)
    grad = ((np.exp(log_probs) - targets) / k).astype(scores.dtype)
    return loss, grad


def batch_loss_node(tape, scores, smoothing_mass: float):
    """Wrap :func:`batch_loss` as a scalar node so encoder + objective can
    be differentiated (and grad-checked) end to end."""
    from .numerics import Node, _accum

    loss, grad = batch_loss(scores.value, smoothing_mass)
    out = Node(np.asarray(loss, dtype=scores.value.dtype))

    def backward(g):
        _accum(scores, grad * g)

    if tape is not None:
        tape.record(out, backward)
    return out


def smoothed_target_entropy(k: int, smoothing_mass: float) -> float:
    """Entropy of the smoothed target row; the lower bound of batch_loss."""
    if k == 1:
        return 0.0
    rest = (1.0 - smoothing_mass) / (k - 1)
    ent = -smoothing_mass * math.log(smoothing_mass) if smoothing_mass > 0 else 0.0
    if rest > 0:
        ent -= (k - 1) * rest * math.log(rest)
    return ent


def learning_rate(step: int, config: TrainingConfig) -> float:
    """Constant until ``decay_after``, then cut by ``decay_factor`` there and
    at every ``decay_every`` steps after."""
    if step < 0:
        raise ValueError("step must be >= 0")
    if step < config.decay_after:
        return config.lr0
    cuts = (step - config.decay_after) // config.decay_every + 1
    return config.lr0 * config.decay_factor**cuts


def sgd_step(
    state: TrainState,
    batch: Sequence[tuple[FeatureIds, FeatureIds]],
    train_config: TrainingConfig,
    enc_config: EncoderConfig,
) -> float:
    """One forward/backward/update pass over a batch; returns the loss."""
    tape = Tape()
    inputs = [p[0] for p in batch]
    responses = [p[1] for p in batch]
    scores = score_matrix_node(tape, inputs, responses, state.params, enc_config)
    loss, grad_scores = batch_loss(scores.value, train_config.smoothing_mass)
    if not math.isfinite(loss):
        raise RuntimeError(
            f"non-finite loss {loss!r} at step {state.step} "
            f"(score range [{scores.value.min()}, {scores.value.max()}])"
        )
    tape.backward(scores, grad_scores)

    if train_config.scale_embedding_grads_by_batch:
        k = len(batch)
        for name in EMBEDDING_TABLES:
            if name in state.params:
                node = state.params[name]
                if node.grad is not None:
                    node.grad *= k

    lr = learning_rate(state.step, train_config)
    for _, node in state.params.items():
        if node.grad is None:
            continue
        if node.touched and not node.dense_hit:
            rows = np.unique(np.concatenate(node.touched))
            node.value[rows] -= lr * node.grad[rows]
        else:
            node.value -= lr * node.grad
    state.params.zero_grads()
    state.step += 1
    return loss


def featurize_pairs(
    pairs: Sequence[DialoguePair], vocab: Vocabulary, max_positions: int
) -> list[tuple[FeatureIds, FeatureIds]]:
    """Normalize, truncate and featurize both sides of every pair."""
    out = []
    for pair in pairs:
        fx = featurize(truncate_tokens(normalize(pair.input), max_positions), vocab)
        fy = featurize(truncate_tokens(normalize(pair.response), max_positions), vocab)
        out.append((fx, fy))
    return out


class _Shuffler:
    """Endless deterministic stream of items in seeded shuffled epochs."""

    def __init__(self, items: Sequence, seed: int) -> None:
        if not items:
            raise ValueError("cannot shuffle an empty corpus")
        self._items = list(items)
        self._rng = np.random.Generator(np.random.PCG64(seed))
        self._queue: list = []

    def take(self, n: int) -> list:
        out = []
        while len(out) < n:
            if not self._queue:
                order = self._rng.permutation(len(self._items))
                self._queue = [self._items[i] for i in order]
            out.append(self._queue.pop())
        return out


def _validation_recall(
    params: ParamStore,
    enc_config: EncoderConfig,
    vocab: Vocabulary,
    val_pairs: Sequence[DialoguePair],
    seed: int,
) -> float:
    n_candidates = min(100, len(val_pairs))
    ranker = evaluation.EncoderRanker(params, enc_config, vocab)
    result = evaluation.evaluate(
        ranker,
        val_pairs,
        evaluation.EvalConfig(n_candidates=n_candidates, k=1, seed=seed),
    )
    return result.recall


def _log_eval(
    log: IO[str] | None, step: int, lr: float, train_loss: float, val_recall: float, wall_ms: float
) -> None:
    if log is None:
        return
    log.write(
        json.dumps(
            {
                "step": step,
                "lr": lr,
                "train_loss": round(train_loss, 6),
                "val_recall": val_recall,
                "wall_ms": round(wall_ms, 1),
            },
            sort_keys=True,
        )
        + "\n"
    )
    log.flush()


def pretrain(
    pairs: Sequence[DialoguePair],
    vocab: Vocabulary,
    enc_config: EncoderConfig,
    train_config: TrainingConfig,
    epochs: int = 1,
    val_fraction: float = 0.05,
    eval_every: int = 200,
    init: ParamStore | None = None,
    log: IO[str] | None = None,
) -> TrainState:
    """Train from scratch with shuffled epochs and periodic validation.

    Run on in-domain data this is also the from-scratch baseline trainer.
    Deterministic given the seed: two runs produce identical parameters.
    """
    from .encoder import init_params

    rng = np.random.Generator(np.random.PCG64(train_config.seed))
    pairs = list(pairs)
    n_val = int(len(pairs) * val_fraction)
    order = rng.permutation(len(pairs))
    val_pairs = [pairs[i] for i in order[:n_val]]
    train_pairs = [pairs[i] for i in order[n_val:]]
    if len(train_pairs) < train_config.batch_size:
        raise ValueError(
            f"corpus of {len(train_pairs)} training pairs is smaller than "
            f"batch_size={train_config.batch_size}"
        )

    feats = featurize_pairs(train_pairs, vocab, enc_config.max_positions)
    params = init if init is not None else init_params(enc_config, seed=train_config.seed)
    state = TrainState(params=params)
    shuffler = _Shuffler(feats, seed=train_config.seed + 1)
    steps_per_epoch = len(feats) // train_config.batch_size
    total_steps = steps_per_epoch * epochs
    if train_config.max_steps is not None:
        total_steps = min(total_steps, train_config.max_steps)

    t0 = time.perf_counter()
    loss_acc, loss_n = 0.0, 0
    for _ in range(total_steps):
        batch = shuffler.take(train_config.batch_size)
        loss_acc += sgd_step(state, batch, train_config, enc_config)
        loss_n += 1
        if state.step % eval_every == 0 or state.step == total_steps:
            mean_loss = loss_acc / max(loss_n, 1)
            recall = float("nan")
            if len(val_pairs) >= 2:
                recall = _validation_recall(
                    params, enc_config, vocab, val_pairs, train_config.seed
                )
                if recall > state.best_metric:
                    state.best_metric = recall
                    state.best_step = state.step
            state.history.append((state.step, mean_loss, recall))
            _log_eval(
                log,
                state.step,
                learning_rate(state.step, train_config),
                mean_loss,
                recall,
                (time.perf_counter() - t0) * 1000.0,
            )
            loss_acc, loss_n = 0.0, 0
            t0 = time.perf_counter()
    return state


def mixed_batch_sizes(batch_size: int, source_percent: float) -> tuple[int, int]:
    """(source, target) pair counts per mixed batch."""
    n_source = int(math.floor(batch_size * source_percent / 100.0 + 0.5))
    return n_source, batch_size - n_source


def finetune(
    params: ParamStore,
    enc_config: EncoderConfig,
    vocab: Vocabulary,
    target_pairs: Sequence[DialoguePair],
    ft_config: FinetuneConfig,
    train_config: TrainingConfig,
    source_pairs: Sequence[DialoguePair] | None = None,
    val_pairs: Sequence[DialoguePair] | None = None,
    val_fraction: float = 0.1,
    log: IO[str] | None = None,
) -> TrainState:
    """Adapt a pretrained model to a target domain.

    "direct" continues training on target pairs only; "mixed" builds every
    batch from ``source_percent``% source pairs and the rest target pairs,
    all serving as mutual negatives. Stops once target validation recall
    has not improved for ``patience`` evaluations and returns the best
    parameters seen. The learning-rate schedule restarts from step 0.
    """
    if ft_config.strategy == "mixed" and not source_pairs:
        raise ValueError("mixed fine-tuning requires a source corpus")
    target_pairs = list(target_pairs)
    if val_pairs is None:
        rng = np.random.Generator(np.random.PCG64(train_config.seed))
        order = rng.permutation(len(target_pairs))
        n_val = max(2, int(len(target_pairs) * val_fraction))
        val_pairs = [target_pairs[i] for i in order[:n_val]]
        target_pairs = [target_pairs[i] for i in order[n_val:]]

    n_source, n_target = mixed_batch_sizes(
        train_config.batch_size,
        ft_config.source_percent if ft_config.strategy == "mixed" else 0.0,
    )
    if n_target < 1:
        raise ValueError("mixed batches must contain at least one target pair")
    target_feats = featurize_pairs(target_pairs, vocab, enc_config.max_positions)
    target_stream = _Shuffler(target_feats, seed=train_config.seed + 2)
    source_stream = None
    if n_source > 0:
        source_feats = featurize_pairs(source_pairs, vocab, enc_config.max_positions)
        source_stream = _Shuffler(source_feats, seed=train_config.seed + 3)

    state = TrainState(params=params)
    best_params = params.copy()
    evals_since_best = 0
    t0 = time.perf_counter()
    loss_acc, loss_n = 0.0, 0
    while True:
        if train_config.max_steps is not None and state.step >= train_config.max_steps:
            break
        batch = []
        if source_stream is not None:
            batch.extend(source_stream.take(n_source))
        batch.extend(target_stream.take(n_target))
        loss_acc += sgd_step(state, batch, train_config, enc_config)
        loss_n += 1
        if state.step % ft_config.eval_every == 0:
            recall = _validation_recall(
                params, enc_config, vocab, val_pairs, train_config.seed
            )
            mean_loss = loss_acc / max(loss_n, 1)
            state.history.append((state.step, mean_loss, recall))
            _log_eval(
                log,
                state.step,
                learning_rate(state.step, train_config),
                mean_loss,
                recall,
                (time.perf_counter() - t0) * 1000.0,
            )
            loss_acc, loss_n = 0.0, 0
            t0 = time.perf_counter()
            if recall > state.best_metric:
                state.best_metric = recall
                state.best_step = state.step
                best_params = params.copy()
                evals_since_best = 0
            else:
                evals_since_best += 1
                if evals_since_best >= ft_config.patience:
                    break
    state.params = best_params
    return state
