"""scikit-learn style estimators wrapping the train / index / evaluate pipeline.

Both estimators are fitted on a :class:`~kgrefine.store.KgStore` and then
take id arrays: ``(n, 2)`` head/tail pairs or ``(n, 3)`` triples.

>>> from kgrefine.synthetic import block_kg, positives
>>> store = block_kg(n_relations=3, n_train=600, n_valid=60, n_test=60, n_groups=2,
...                  group_heads=10, group_tails=20, seed=1)
>>> model = RelationPredictor(embedding_dim=16, epochs=2).fit(store)
>>> model.predict(positives(store)[:3]).shape
(3,)
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from kgrefine.encoder import BAG
from kgrefine.evaluation import (
    GLOBAL_FALLBACK,
    K_MODE,
    MIN,
    ClassifierConfig,
    Embedder,
    RelationPredictorConfig,
    classification_distances,
    few_shot_report,
    rank_metrics,
    relation_ranks,
    tune_sigma,
)
from kgrefine.index import EXACT
from kgrefine.reference import build_reference_index
from kgrefine.sampling import Regime, SamplerConfig
from kgrefine.store import add_reverse_relations
from kgrefine.text import Kind
from kgrefine.training import TrainConfig, train
from kgrefine.validation import check_pairs, check_store, check_triples


class _TripletModel(BaseEstimator, TransformerMixin):
    _regime: Regime
    _kind: Kind

    def __init__(
        self,
        *,
        embedding_dim=64,
        architecture=BAG,
        num_layers=1,
        num_heads=2,
        feedforward_dim=128,
        max_seq_len=32,
        margin=5.0,
        batch_size=64,
        learning_rate=1e-3,
        epochs=4,
        n_per_anchor=5,
        use_descriptions=False,
        index_mode=EXACT,
        n_lists=16,
        n_probe=4,
        seed=42,
        workers=1,
    ):
        self.embedding_dim = embedding_dim
        self.architecture = architecture
        self.num_layers = num_layers
        self.num_heads = num_heads
        self.feedforward_dim = feedforward_dim
        self.max_seq_len = max_seq_len
        self.margin = margin
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.n_per_anchor = n_per_anchor
        self.use_descriptions = use_descriptions
        self.index_mode = index_mode
        self.n_lists = n_lists
        self.n_probe = n_probe
        self.seed = seed
        self.workers = workers

    def _sampler_config(self) -> SamplerConfig:
        raise NotImplementedError

    def _fit_encoder(self, store):
        sampler_config = self._sampler_config()
        result = train(
            store,
            sampler_config,
            {
                "embedding_dim": self.embedding_dim,
                "architecture": self.architecture,
                "num_layers": self.num_layers,
                "num_heads": self.num_heads,
                "feedforward_dim": self.feedforward_dim,
                "max_seq_len": self.max_seq_len,
                "init_seed": self.seed,
            },
            TrainConfig(
                margin=self.margin,
                batch_size=self.batch_size,
                learning_rate=self.learning_rate,
                epochs=self.epochs,
                seed=self.seed,
            ),
        )
        self.store_ = store
        self.encoder_ = result.encoder
        self.vocab_ = result.vocab
        self.loss_history_ = result.loss_history
        self.initial_loss_ = result.initial_loss
        self.embedder_ = Embedder(result.encoder, result.vocab, store, self.use_descriptions)
        self.index_ = build_reference_index(
            store, self.embedder_, sampler_config, self.seed,
            mode=self.index_mode, n_lists=self.n_lists, n_probe=self.n_probe,
        )
        return self

    def transform(self, X):
        """Embeddings of the partial facts this model clusters."""
        check_is_fitted(self, "encoder_")
        X = check_triples(X, self.store_)
        return self.embedder_(X, self._kind)


class RelationPredictor(ClassifierMixin, _TripletModel):
    """Predict the relation between two entities from their nearest training anchors.

    ``predict`` returns the top-ranked relation id (``-1`` when no neighbour
    yields a candidate); ``score`` returns filtered Hits@1 on ``(n, 3)``
    triples.
    """

    _regime = Regime.RELATION
    _kind = Kind.HT

    def __init__(self, *, threshold_pct=30.0, strategy=K_MODE, k=10, filtered=True, **kwargs):
        super().__init__(**kwargs)
        self.threshold_pct = threshold_pct
        self.strategy = strategy
        self.k = k
        self.filtered = filtered

    # BaseEstimator introspects __init__; list the inherited parameters too
    @classmethod
    def _get_param_names(cls):
        return sorted(set(_TripletModel._get_param_names()) | {"threshold_pct", "strategy", "k", "filtered"})

    def _sampler_config(self):
        return SamplerConfig(
            regime=Regime.RELATION, n_per_anchor=self.n_per_anchor,
            threshold_pct=self.threshold_pct, use_descriptions=self.use_descriptions,
            workers=self.workers,
        )

    def _predictor_config(self, filtered=None):
        return RelationPredictorConfig(self.strategy, self.k, self.filtered if filtered is None else filtered)

    def fit(self, X, y=None):
        store = check_store(X)
        self.classes_ = np.arange(store.n_base_relations)
        return self._fit_encoder(store)

    def predict(self, X):
        check_is_fitted(self, "encoder_")
        pairs = check_pairs(X, self.store_)
        triples = np.column_stack([pairs[:, 0], np.zeros(len(pairs), dtype=np.int64), pairs[:, 1]])
        _, preds = relation_ranks(triples, self.embedder_, self.index_, self._predictor_config(False), self.store_)
        return np.array([-1 if p is None else p for p in preds], dtype=np.int64)

    def rank(self, X):
        """Gold-relation ranks of ``(n, 3)`` triples (filtered if configured)."""
        check_is_fitted(self, "encoder_")
        X = check_triples(X, self.store_)
        ranks, _ = relation_ranks(X, self.embedder_, self.index_, self._predictor_config(), self.store_)
        return ranks

    def score(self, X, y=None, sample_weight=None):
        return rank_metrics(self.rank(X))["hits@1"]

    def few_shot(self, X, thresholds=(10, 15, 20, 25, 30)):
        return few_shot_report(X, self.rank(X), self.store_, thresholds)


class TripleClassifier(ClassifierMixin, _TripletModel):
    """Accept a triple when its HRT embedding lies within sigma of its head's anchors.

    ``fit`` trains on the entity regime and tunes sigma on the store's
    labeled validation split.
    """

    _regime = Regime.ENTITY
    _kind = Kind.HRT

    def __init__(self, *, hrt_prob=0.3, aggregation=MIN, cold_start_policy=GLOBAL_FALLBACK,
                 reverse_relations=False, **kwargs):
        super().__init__(**kwargs)
        self.hrt_prob = hrt_prob
        self.aggregation = aggregation
        self.cold_start_policy = cold_start_policy
        self.reverse_relations = reverse_relations

    @classmethod
    def _get_param_names(cls):
        extra = {"hrt_prob", "aggregation", "cold_start_policy", "reverse_relations"}
        return sorted(set(_TripletModel._get_param_names()) | extra)

    def _sampler_config(self):
        return SamplerConfig(
            regime=Regime.ENTITY, n_per_anchor=self.n_per_anchor, hrt_prob=self.hrt_prob,
            use_descriptions=self.use_descriptions, workers=self.workers,
        )

    def fit(self, X, y=None):
        store = check_store(X)
        if store.valid_labels is None:
            raise ValueError("sigma tuning needs a labeled validation split")
        if self.reverse_relations:
            store = add_reverse_relations(store)
        self.classes_ = np.array([-1, 1])
        self._fit_encoder(store)
        self.config_ = ClassifierConfig(self.aggregation, None, self.cold_start_policy)
        d, _ = classification_distances(store.valid, self.embedder_, self.index_, self.config_)
        self.sigma_, self.valid_accuracy_ = tune_sigma(d, store.valid_labels)
        self.config_.sigma = self.sigma_
        return self

    def distances(self, X):
        """Aggregated distance of each triple to its head's reference set."""
        check_is_fitted(self, "sigma_")
        X = check_triples(X, self.store_)
        d, cold = classification_distances(X, self.embedder_, self.index_, self.config_)
        self.last_cold_starts_ = int(cold.sum())
        return d

    def decision_function(self, X):
        return self.sigma_ - self.distances(X)

    def predict(self, X):
        return np.where(self.decision_function(X) > 0, 1, -1)
