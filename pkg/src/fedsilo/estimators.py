"""scikit-learn style wrappers around the toy models.

``AdapterClassifier`` trains centrally; ``FederatedClassifier`` splits the
training data into dual-Dirichlet shards and fits them through a simulated
federation. Both expose the usual ``fit`` / ``predict`` / ``predict_proba``
/ ``score`` surface and ``get_params`` / ``set_params`` via BaseEstimator.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_is_fitted, validate_data

from .adapters import AdapterSpec
from .communicator.store import MemoryStore
from .config import ExperimentConfig
from .partition import PartitionConfig, dual_dirichlet_partition
from .taskdata import Dataset
from .tensor import decode_state
from .trainer import LINEAR_SOFTMAX, ModelSpec, TrainerConfig, local_train


class AdapterClassifier(ClassifierMixin, BaseEstimator):
    """Toy classifier with an optional low-rank adapter, trained with AdamW.

    With ``rank=None`` every base parameter is trained; otherwise only the
    adapter factors on the weight matrices are.
    """

    def __init__(self, kind=LINEAR_SOFTMAX, hidden_dim=None, rank=2, scaling=4.0, rounds=5,
                 learning_rate=0.02, decay=0.85, batch_size=16, batches_per_round=100,
                 weight_decay=0.01, init_std=0.01, random_state=0):
        self.kind = kind
        self.hidden_dim = hidden_dim
        self.rank = rank
        self.scaling = scaling
        self.rounds = rounds
        self.learning_rate = learning_rate
        self.decay = decay
        self.batch_size = batch_size
        self.batches_per_round = batches_per_round
        self.weight_decay = weight_decay
        self.init_std = init_std
        self.random_state = random_state

    def _seed(self) -> int:
        rs = self.random_state
        if rs is None:
            return int(np.random.default_rng().integers(2**31))
        if isinstance(rs, (int, np.integer)):
            return int(rs)
        raise ValueError("random_state must be an int or None")

    def _model_spec(self, n_features, n_classes, seed) -> ModelSpec:
        adapter = None
        if self.rank is not None:
            targets = ["linear.weight"] if self.kind == LINEAR_SOFTMAX else ["hidden.weight", "output.weight"]
            adapter = AdapterSpec(int(self.rank), float(self.scaling), targets)
        return ModelSpec(self.kind, n_features, max(n_classes, 2), self.hidden_dim, seed, self.init_std,
                         adapter, seed)

    def _trainer(self, seed) -> TrainerConfig:
        return TrainerConfig(learning_rate=self.learning_rate, decay=self.decay, batch_size=self.batch_size,
                             batches_per_round=self.batches_per_round, weight_decay=self.weight_decay, seed=seed)

    def _prepare(self, X, y):
        X, y = validate_data(self, X, y, dtype=np.float64)
        check_classification_targets(y)
        self.classes_, encoded = np.unique(y, return_inverse=True)
        return X, encoded.astype(np.int64)

    def fit(self, X, y):
        X, y = self._prepare(X, y)
        seed = self._seed()
        spec = self._model_spec(X.shape[1], len(self.classes_), seed)
        trainer = self._trainer(seed)
        data = Dataset(X, y)
        model = spec.build()
        for k in range(self.rounds):
            state, _ = local_train(model, data, trainer, k)
            model = model.with_trainable(state)
        self.model_ = model
        return self

    def _logits(self, X):
        check_is_fitted(self, "model_")
        X = validate_data(self, X, dtype=np.float64, reset=False)
        return self.model_.logits(X)[:, : len(self.classes_)]

    def decision_function(self, X):
        """Class scores; for two classes, the margin of the second over the first."""
        Z = self._logits(X)
        if Z.shape[1] == 2:
            return Z[:, 1] - Z[:, 0]
        return Z

    def predict_proba(self, X):
        Z = self._logits(X)
        Z = Z - Z.max(axis=1, keepdims=True)
        P = np.exp(Z)
        return P / P.sum(axis=1, keepdims=True)

    def predict(self, X):
        Z = self._logits(X)
        return self.classes_[np.argmax(Z, axis=1)]


class FederatedClassifier(AdapterClassifier):
    """Fits ``n_clients`` dual-Dirichlet shards of the training data through
    an in-process federation and keeps the aggregated model."""

    def __init__(self, kind=LINEAR_SOFTMAX, hidden_dim=None, rank=2, scaling=4.0, rounds=5,
                 learning_rate=0.02, decay=0.85, batch_size=16, batches_per_round=100,
                 weight_decay=0.01, init_std=0.01, random_state=0, n_clients=4, alpha1=2.0, alpha2=8.0):
        super().__init__(kind, hidden_dim, rank, scaling, rounds, learning_rate, decay, batch_size,
                         batches_per_round, weight_decay, init_std, random_state)
        self.n_clients = n_clients
        self.alpha1 = alpha1
        self.alpha2 = alpha2

    def fit(self, X, y):
        from .orchestrator import RunLog, simulate

        X, y = self._prepare(X, y)
        seed = self._seed()
        partition = PartitionConfig(self.n_clients, self.alpha1, self.alpha2, seed)
        plan = dual_dirichlet_partition(y, partition)
        data = Dataset(X, y)
        shards = [data.subset(idx) for idx in plan.assignments]
        config = ExperimentConfig(
            model=self._model_spec(X.shape[1], len(self.classes_), seed),
            data_source="memory:estimator",
            trainer=self._trainer(seed),
            name="estimator",
            global_rounds=self.rounds,
            seed=seed,
            val_fraction=0.0,
            partition=partition,
        )
        self.partition_plan_ = plan
        store = MemoryStore()
        self.report_ = simulate(config, store=store, runlog=RunLog(), loaders=shards)
        final = decode_state(store.get(self.report_.final_key))
        self.model_ = config.model.build().with_trainable(final)
        return self
