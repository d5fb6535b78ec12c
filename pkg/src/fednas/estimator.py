"""Scikit-learn style wrapper around the search -> derive -> retrain pipeline.

`fit` splits (X, y) across simulated clients, searches an architecture
federatedly, derives the discrete net and retrains it from scratch with
FedAvg; `predict` runs the retrained net. Composes with sklearn tooling
(`clone`, `GridSearchCV`, pipelines) through get_params/set_params.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .config import DEFAULT_CANDIDATES, parse_candidate
from .data import LabeledDataset, iid_partition
from .federation import clients_from_plan, retrain_fedavg, run_search
from .supernet import SuperNetModel, derive_normal_net


class FederatedNASClassifier(ClassifierMixin, BaseEstimator):
    """Image classifier whose architecture is searched across simulated clients.

    Parameters mirror the experiment config; `image_shape` is required when X
    is 2D (each row is a flattened (channels, height, width) image).
    """

    def __init__(self, num_clients=4, search_rounds=10, retrain_rounds=10,
                 local_epochs=2, batch_size=32, lr=0.05, alpha_lr=3e-3,
                 momentum=0.9, weight_decay=3e-4, latency_weight=0.0,
                 latency_table=None, num_layers=4, stem_channels=8,
                 candidates=None, image_shape=None, test_fraction=0.0,
                 n_threads=1, random_state=0):
        self.num_clients = num_clients
        self.search_rounds = search_rounds
        self.retrain_rounds = retrain_rounds
        self.local_epochs = local_epochs
        self.batch_size = batch_size
        self.lr = lr
        self.alpha_lr = alpha_lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.latency_weight = latency_weight
        self.latency_table = latency_table
        self.num_layers = num_layers
        self.stem_channels = stem_channels
        self.candidates = candidates
        self.image_shape = image_shape
        self.test_fraction = test_fraction
        self.n_threads = n_threads
        self.random_state = random_state

    def _as_images(self, X):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 4:
            return X
        if X.ndim == 2:
            if self.image_shape is None:
                raise ValueError("2D input needs image_shape=(channels, height, width)")
            return X.reshape((len(X),) + tuple(self.image_shape))
        raise ValueError(f"expected 2D or 4D input, got ndim={X.ndim}")

    def _hyper(self):
        from .federation import TrainHyper
        return TrainHyper(local_epochs=self.local_epochs, batch_size=self.batch_size,
                          lr_w=self.lr, momentum=self.momentum,
                          weight_decay=self.weight_decay, alpha_lr=self.alpha_lr)

    def fit(self, X, y):
        X, y = check_X_y(X, y, allow_nd=True)
        images = self._as_images(X)
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need at least 2 classes")
        dataset = LabeledDataset(examples=images, labels=y_idx,
                                 num_classes=len(self.classes_))
        plan = iid_partition(dataset, self.num_clients, self.random_state,
                             test_fraction=self.test_fraction)
        clients = clients_from_plan(plan)
        names = list(self.candidates) if self.candidates else list(DEFAULT_CANDIDATES)
        cands = [parse_candidate(n, self.stem_channels) for n in names]
        model = SuperNetModel(in_shape=images.shape[1:], num_classes=len(self.classes_),
                              layer_candidates=[list(cands) for _ in range(self.num_layers)],
                              stem_channels=self.stem_channels)
        hyper = self._hyper()
        result = run_search(model, clients, dataset, hyper, self.search_rounds,
                            self.random_state, table=self.latency_table,
                            lam=self.latency_weight, threads=self.n_threads)
        net, inherited, self.choices_ = derive_normal_net(model, result.params, result.arch)
        self.net_ = net
        if self.retrain_rounds > 0:
            self.net_params_, _ = retrain_fedavg(net, clients, dataset, hyper,
                                                 self.retrain_rounds, self.random_state,
                                                 threads=self.n_threads)
        else:
            self.net_params_ = inherited
        self.n_features_in_ = X.shape[1] if X.ndim == 2 else int(np.prod(X.shape[1:]))
        return self

    def decision_function(self, X):
        check_is_fitted(self, "net_")
        X = check_array(X, allow_nd=True)
        images = self._as_images(X)
        return self.net_.predict_logits(self.net_params_, images)

    def predict_proba(self, X):
        logits = self.decision_function(X)
        shifted = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, X):
        logits = self.decision_function(X)
        return self.classes_[logits.argmax(axis=1)]
