"""Triplet-loss optimisation of the encoder with Adam."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from kgrefine.encoder import Encoder, EncoderConfig, triplet_loss, triplet_loss_and_grad
from kgrefine.exceptions import TrainingDivergedError
from kgrefine.sampling import (
    Regime,
    SamplerConfig,
    compute_close_relations,
    sample_entity_triplets,
    sample_relation_triplets,
)
from kgrefine.store import KgStore
from kgrefine.text import DEFAULT_MAX_SEQ_LEN, Kind, TokenVocab, encode_tokens

__all__ = ["TrainConfig", "Adam", "TrainResult", "train", "triplet_loss"]

logger = logging.getLogger(__name__)

PAPER_LEARNING_RATE = 2e-5


@dataclass(frozen=True)
class TrainConfig:
    margin: float = 5.0
    batch_size: int = 64
    learning_rate: float = 1e-3
    epochs: int = 4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 42
    resample_each_epoch: bool = True
    checkpoint_every: int = 0

    def __post_init__(self):
        if not self.margin > 0:
            raise ValueError("margin must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")


class Adam:
    """Adam with bias correction over a dict of arrays, updated in place."""

    def __init__(self, params: dict[str, np.ndarray], lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name, g in grads.items():
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if self.lr:
                self.params[name] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class TrainResult:
    encoder: Encoder
    vocab: TokenVocab
    loss_history: list[float]
    active_history: list[float]
    initial_loss: float
    steps: int
    counters: dict = field(default_factory=dict)


class _IdCache:
    def __init__(self, vocab: TokenVocab, max_seq_len: int):
        self.vocab, self.max_seq_len = vocab, max_seq_len
        self._cache: dict = {}

    def __call__(self, pf) -> np.ndarray:
        key = (pf.source, pf.kind)
        ids = self._cache.get(key)
        if ids is None:
            ids = encode_tokens(pf, self.vocab, self.max_seq_len)
            self._cache[key] = ids
        return ids


def _examples(store, sampler_config, seed, epoch, table):
    if sampler_config.regime is Regime.RELATION:
        return sample_relation_triplets(
            store, table, sampler_config.n_per_anchor, seed, epoch=epoch,
            use_descriptions=sampler_config.use_descriptions, workers=sampler_config.workers,
        )
    return sample_entity_triplets(
        store, sampler_config.hrt_prob, sampler_config.n_per_anchor, seed, epoch=epoch,
        use_descriptions=sampler_config.use_descriptions, workers=sampler_config.workers,
    )


def mean_loss(encoder: Encoder, triplets, margin: float, batch_size: int = 512) -> float:
    """Mean triplet loss of ``(anchor_ids, positive_ids, negative_ids)`` tuples."""
    total = 0.0
    for start in range(0, len(triplets), batch_size):
        chunk = triplets[start : start + batch_size]
        emb = encoder.encode([s for t in chunk for s in t])
        ea, ep, en = emb[0::3], emb[1::3], emb[2::3]
        d_ap = np.sqrt(((ea - ep) ** 2).sum(axis=1))
        d_an = np.sqrt(((ea - en) ** 2).sum(axis=1))
        total += triplet_loss(d_ap, d_an, margin).sum()
    return total / len(triplets)


def train(
    store: KgStore,
    sampler_config: SamplerConfig,
    encoder_config: EncoderConfig | dict,
    train_config: TrainConfig,
    vocab: TokenVocab | None = None,
    encoder: Encoder | None = None,
    on_epoch: Callable[[int, float, float], None] | None = None,
    on_checkpoint: Callable[[int, Encoder], None] | None = None,
) -> TrainResult:
    """Fit encoder weights on freshly sampled triplets every epoch.

    ``encoder_config`` may be a dict of :class:`EncoderConfig` fields without
    ``vocab_size``; it is then filled in from the train-split vocabulary.
    Each epoch runs ``ceil(n_examples / batch_size)`` Adam steps over the
    shuffled examples.  The result carries the mean loss per epoch, the
    fraction of examples with a non-zero hinge and the loss of the first
    epoch's examples under the initial weights.
    """
    if vocab is None:
        vocab = TokenVocab.from_store(store, sampler_config.use_descriptions)
    if isinstance(encoder_config, dict):
        encoder_config = EncoderConfig(vocab_size=len(vocab), **encoder_config)
    if encoder_config.vocab_size != len(vocab):
        raise ValueError(f"encoder vocab_size {encoder_config.vocab_size} != vocabulary size {len(vocab)}")
    if encoder is None:
        encoder = Encoder(encoder_config)

    max_len = encoder_config.max_seq_len if encoder_config.architecture == "transformer" else DEFAULT_MAX_SEQ_LEN
    ids_of = _IdCache(vocab, max_len)
    table = None
    if sampler_config.regime is Regime.RELATION:
        table = compute_close_relations(store, sampler_config.threshold_pct)

    tc = train_config
    opt = Adam(encoder.params, tc.learning_rate, tc.beta1, tc.beta2, tc.eps)
    history, active_hist = [], []
    counters = {"reused_positive": 0, "fallback_negative": 0, "examples": 0}
    initial_loss = math.nan
    triplets = meta = None
    step = 0
    for epoch in range(tc.epochs):
        if triplets is None or tc.resample_each_epoch:
            examples = list(_examples(store, sampler_config, tc.seed, epoch, table))
            if not examples:
                raise ValueError("sampler produced no examples")
            triplets = [(ids_of(e.anchor), ids_of(e.positive), ids_of(e.negative)) for e in examples]
            meta = [(e.anchor_fact, e.positive_fact, e.negative_fact) for e in examples]
            counters["examples"] += len(examples)
            counters["reused_positive"] += sum(e.reused_positive for e in examples)
            counters["fallback_negative"] += sum(e.fallback_negative for e in examples)
        if epoch == 0:
            initial_loss = mean_loss(encoder, triplets, tc.margin)

        order = np.random.default_rng([tc.seed, epoch, 1]).permutation(len(triplets))
        loss_sum, n_active = 0.0, 0
        for start in range(0, len(order), tc.batch_size):
            batch = order[start : start + tc.batch_size]
            a = [triplets[i][0] for i in batch]
            p = [triplets[i][1] for i in batch]
            n = [triplets[i][2] for i in batch]
            losses, grads, _ = triplet_loss_and_grad(encoder, a, p, n, tc.margin)
            if not np.isfinite(losses).all() or not all(np.isfinite(g).all() for g in grads.values()):
                ids = [meta[i] for i in batch]
                raise TrainingDivergedError(
                    f"non-finite loss or gradient at step {step} (epoch {epoch}); source facts {ids[:8]}",
                    step=step,
                    example_ids=ids,
                )
            opt.step(grads)
            step += 1
            loss_sum += float(losses.sum())
            n_active += int((losses > 0).sum())
        mean = loss_sum / len(order)
        active = n_active / len(order)
        history.append(mean)
        active_hist.append(active)
        logger.info("epoch %d mean_loss %.6f active %.4f", epoch + 1, mean, active)
        if on_epoch is not None:
            on_epoch(epoch + 1, mean, active)
        if on_checkpoint is not None and tc.checkpoint_every and (epoch + 1) % tc.checkpoint_every == 0:
            on_checkpoint(epoch + 1, encoder)

    return TrainResult(encoder, vocab, history, active_hist, initial_loss, step, counters)
