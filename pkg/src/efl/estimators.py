"""scikit-learn compatible wrappers around the pipeline stages."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin, clone  # noqa: F401
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import adapt as _adapt
from .augment import AugmentConfig, SampleSeries, augment_dataset
from .errors import InsufficientDataError, ShapeError
from .features import DEFAULT_MAX_FREQ, model_input
from .nnet.autodiff import Tensor, relu
from .nnet.losses import ce_loss
from .nnet.model import EncoderConfig
from .nnet.optim import ParamStore, sgd_momentum_step


class SpectrogramFeaturizer(TransformerMixin, BaseEstimator):
    """Low-frequency crop, log compression and per-sample standardization.

    Accepts a list of spectrograms / labelled samples, or an array
    ``(n, F, T)`` that has already been cropped.
    """

    def __init__(self, max_freq=DEFAULT_MAX_FREQ, log=True, standardize=True):
        self.max_freq = max_freq
        self.log = log
        self.standardize = standardize

    def fit(self, X, y=None):
        Xt = self._convert(X)
        self.input_shape_ = tuple(Xt.shape[1:])
        return self

    def _convert(self, X):
        Xt = model_input(X, self.max_freq, self.log)
        if self.standardize:
            mu = Xt.mean(axis=(1, 2), keepdims=True)
            sd = Xt.std(axis=(1, 2), keepdims=True)
            Xt = (Xt - mu) / np.where(sd > 0, sd, 1.0)
        return Xt

    def transform(self, X):
        check_is_fitted(self, "input_shape_")
        Xt = self._convert(X)
        if tuple(Xt.shape[1:]) != self.input_shape_:
            raise ShapeError(f"expected frames of shape {self.input_shape_}, got {Xt.shape[1:]}")
        return Xt


class HiddenLayerClassifier(ClassifierMixin, BaseEstimator):
    """One 256-unit ReLU hidden layer, softmax output, SGD with momentum.

    Inputs are standardized with statistics of the training set.
    """

    def __init__(self, hidden=256, lr=0.1, momentum=0.9, epochs=200, batch_size=64,
                 weight_decay=1e-4, random_state=0):
        self.hidden = hidden
        self.lr = lr
        self.momentum = momentum
        self.epochs = epochs
        self.batch_size = batch_size
        self.weight_decay = weight_decay
        self.random_state = random_state

    def _init(self, d, n_classes):
        rng = np.random.default_rng(self.random_state)
        store = ParamStore()
        store.add("w1", rng.normal(0, np.sqrt(2.0 / d), (d, self.hidden)))
        store.add("b1", np.zeros(self.hidden))
        store.add("w2", rng.normal(0, np.sqrt(1.0 / self.hidden), (self.hidden, n_classes)))
        store.add("b2", np.zeros(n_classes))
        return store

    def _logits(self, X, store):
        h = relu(Tensor(X) @ store["w1"] + store["b1"])
        return h @ store["w2"] + store["b2"]

    def fit(self, X, y):
        X, y = check_X_y(X, y)
        if len(X) == 0:
            raise InsufficientDataError("empty training set")
        self.classes_, yi = np.unique(y, return_inverse=True)
        self.mean_ = X.mean(axis=0)
        sd = X.std(axis=0)
        self.scale_ = np.where(sd > 0, sd, 1.0)
        Xs = (X - self.mean_) / self.scale_
        store = self._init(X.shape[1], len(self.classes_))
        rng = np.random.default_rng([self.random_state, 7])
        self.loss_curve_ = []
        for _ in range(self.epochs):
            order = rng.permutation(len(Xs))
            total = 0.0
            for i in range(0, len(Xs), self.batch_size):
                idx = order[i:i + self.batch_size]
                loss = ce_loss(self._logits(Xs[idx], store), yi[idx])
                store.zero_grad()
                loss.backward()
                sgd_momentum_step(store, lr=self.lr, momentum=self.momentum,
                                  weight_decay=self.weight_decay)
                total += loss.item() * len(idx)
            self.loss_curve_.append(total / len(Xs))
        self.store_ = store
        return self

    def _scaled(self, X):
        check_is_fitted(self, "store_")
        X = check_array(X)
        return (X - self.mean_) / self.scale_

    def decision_function(self, X):
        return self._logits(self._scaled(X), self.store_).data

    def predict_proba(self, X):
        z = self.decision_function(X)
        z = np.exp(z - z.max(axis=1, keepdims=True))
        return z / z.sum(axis=1, keepdims=True)

    def predict(self, X):
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]


class ContrastiveDomainAdapter(ClassifierMixin, BaseEstimator):
    """Source pre-training, pseudo-label adaptation to unlabelled target data,
    then a hidden-layer classifier on source embeddings.

    ``fit(X, y, X_target=...)``; without ``X_target`` only the source stage runs.
    ``X`` are model inputs ``(n, F, T)`` (see :class:`SpectrogramFeaturizer`).
    """

    def __init__(self, encoder=None, epochs=10, iterations_per_epoch=20, batch_source=64,
                 batch_target=64, tau=0.07, mad_threshold=3.5, lr=0.1, momentum=0.9,
                 objective="combined", pretrain_max_epochs=40, pretrain_batch=64,
                 classifier_epochs=200, random_state=42):
        self.encoder = encoder
        self.epochs = epochs
        self.iterations_per_epoch = iterations_per_epoch
        self.batch_source = batch_source
        self.batch_target = batch_target
        self.tau = tau
        self.mad_threshold = mad_threshold
        self.lr = lr
        self.momentum = momentum
        self.objective = objective
        self.pretrain_max_epochs = pretrain_max_epochs
        self.pretrain_batch = pretrain_batch
        self.classifier_epochs = classifier_epochs
        self.random_state = random_state

    def adapt_config(self) -> _adapt.AdaptConfig:
        return _adapt.AdaptConfig(
            epochs=self.epochs, iterations_per_epoch=self.iterations_per_epoch,
            batch_source=self.batch_source, batch_target=self.batch_target, tau=self.tau,
            mad_threshold=self.mad_threshold, lr=self.lr, momentum=self.momentum,
            objective=self.objective, pretrain_max_epochs=self.pretrain_max_epochs,
            pretrain_batch=self.pretrain_batch, seed=self.random_state)

    def _check(self, X):
        X = np.asarray(X, dtype=float)
        if X.ndim != 3:
            raise ShapeError(f"expected (n, F, T) model inputs, got shape {X.shape}")
        if not np.all(np.isfinite(X)):
            raise ShapeError("inputs must be finite")
        return X

    def fit(self, X, y, X_target=None, y_target=None):
        X = self._check(X)
        y = np.asarray(y, dtype=int)
        cfg = self.adapt_config()
        enc = self.encoder if self.encoder is not None else EncoderConfig(input_shape=X.shape[1:])
        self.model_ = _adapt.ExpressionModel(enc, seed=self.random_state)
        self.pretrain_log_ = []
        _adapt.pretrain_source(self.model_, X, y, cfg, self.pretrain_log_)
        self.adaptation_ = None
        if X_target is not None and cfg.epochs > 0:
            self.adaptation_ = _adapt.adaptation_loop(self.model_, X, y, self._check(X_target), cfg,
                                                      y_t_true=y_target)
        self.fit_classifier(X, y)
        return self

    def fit_classifier(self, X, y):
        Z = self.model_.embed(X)
        self.classifier_ = HiddenLayerClassifier(epochs=self.classifier_epochs,
                                                 random_state=self.random_state).fit(Z, y)
        self.classes_ = self.classifier_.classes_
        return self

    def transform(self, X):
        check_is_fitted(self, "model_")
        return self.model_.embed(self._check(X))

    def predict_proba(self, X):
        return self.classifier_.predict_proba(self.transform(X))

    def predict(self, X):
        return self.classifier_.predict(self.transform(X))


class AcousticAugmenter(BaseEstimator):
    """Resampler: returns the inputs followed by their augmented copies."""

    def __init__(self, mode="intra", Dis=4, K=4, w=0.5, exponent=0.5, random_state=0):
        self.mode = mode
        self.Dis = Dis
        self.K = K
        self.w = w
        self.exponent = exponent
        self.random_state = random_state

    def fit_resample(self, X, y, groups):
        X = np.asarray(X, dtype=float)
        cfg = AugmentConfig(self.mode, self.Dis, self.K, self.w, self.random_state, self.exponent)
        series = [SampleSeries(_column_major(x), int(lab), str(g), sample_id=str(i), shape=x.shape)
                  for i, (x, lab, g) in enumerate(zip(X, y, groups))]
        out = augment_dataset(series, cfg)
        self.provenance_ = [s.provenance() | {"sample_id": s.sample_id} for s in out]
        Xa = np.stack([_from_column_major(s.values, X.shape[1:]) for s in out])
        return Xa, np.array([s.label for s in out]), np.array([s.person_id for s in out])


def _column_major(frame: np.ndarray) -> np.ndarray:
    """Flatten time column by time column, so DTW warps along time."""
    return np.asarray(frame).T.ravel()


def _from_column_major(values, shape) -> np.ndarray:
    return np.asarray(values).reshape(shape[::-1]).T


class LloydKMeans(BaseEstimator):
    def __init__(self, n_clusters=6, max_iter=300, random_state=0):
        self.n_clusters = n_clusters
        self.max_iter = max_iter
        self.random_state = random_state

    def fit(self, X, y=None):
        X = check_array(X)
        self.labels_, self.cluster_centers_, self.inertia_history_ = _adapt.kmeans(
            X, self.n_clusters, self.random_state, self.max_iter)
        self.inertia_ = self.inertia_history_[-1]
        return self

    def fit_predict(self, X, y=None):
        return self.fit(X).labels_

    def predict(self, X):
        check_is_fitted(self, "cluster_centers_")
        X = check_array(X)
        d = ((X[:, None, :] - self.cluster_centers_[None]) ** 2).sum(-1)
        return np.argmin(d, axis=1)
