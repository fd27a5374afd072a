"""scikit-learn style wrappers around the gated CNN and the pruning loop.

Inputs are image tensors ``X`` of shape ``[n, C, H, W]`` with integer or
string labels ``y`` and an optional ``domains`` array naming the source
domain of every sample. Domain-balanced minibatches are drawn per domain,
so the batch size must be a multiple of the number of distinct domains.
"""
from __future__ import annotations

import copy

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, clone
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import tensor as T
from .domains import Dataset, split
from .exceptions import ConfigError, ShapeError
from .harness import pretrain
from .importance import IoRConfig
from .nn import ArchConfig, build_model, forward
from .pruning import PruneSchedule, prune_finetune_loop


def check_images(X, *, expected_shape: tuple[int, ...] | None = None) -> np.ndarray:
    """Float64 ``[n, C, H, W]`` array; optionally the trailing shape must match a fitted one."""
    X = check_array(X, allow_nd=True, dtype=np.float64, ensure_all_finite=True)
    if X.ndim != 4:
        raise ShapeError(f"expected images of shape [n, C, H, W], got {X.shape}")
    if expected_shape is not None and X.shape[1:] != tuple(expected_shape):
        raise ShapeError(f"images have shape {X.shape[1:]}, estimator was fitted on {tuple(expected_shape)}")
    return X


def check_domains(domains, n_samples: int) -> tuple[np.ndarray, np.ndarray]:
    """(unique domain values, per-sample domain index). ``None`` puts everything in one domain."""
    if domains is None:
        return np.array([0]), np.zeros(n_samples, dtype=np.int64)
    domains = np.asarray(domains)
    if domains.shape != (n_samples,):
        raise ShapeError(f"domains must have shape ({n_samples},), got {domains.shape}")
    values, idx = np.unique(domains, return_inverse=True)
    return values, idx.astype(np.int64)


def _as_dataset(X: np.ndarray, y_idx: np.ndarray, dom_idx: np.ndarray, n_classes: int,
                domain_values: np.ndarray) -> Dataset:
    return Dataset(X, y_idx.astype(np.int64), dom_idx, np.zeros(len(y_idx), dtype=np.int64), n_classes,
                   tuple(str(v) for v in domain_values))


class GatedCNNClassifier(ClassifierMixin, BaseEstimator):
    """Gated CNN trained with ERM, CORAL or Mixup on domain-balanced batches.

    The fitted network is the checkpoint with the best accuracy on a held
    back ``validation_fraction`` of each domain.
    """

    def __init__(self, channels=(16, 32, 32), kernel_sizes=(3, 3, 3), gate_placement="post_relu",
                 method="erm", epochs=30, learning_rate=0.01, momentum=0.9, batch_size=63,
                 coral_lambda=1.0, mixup_alpha=0.2, validation_fraction=0.1, random_state=0):
        self.channels = channels
        self.kernel_sizes = kernel_sizes
        self.gate_placement = gate_placement
        self.method = method
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.batch_size = batch_size
        self.coral_lambda = coral_lambda
        self.mixup_alpha = mixup_alpha
        self.validation_fraction = validation_fraction
        self.random_state = random_state

    def _encode(self, X, y, domains):
        X, y = check_X_y(X, y, allow_nd=True, dtype=np.float64)
        X = check_images(X)
        dom_values, dom_idx = check_domains(domains, len(y))
        return X, y, dom_values, dom_idx

    def fit(self, X, y, domains=None):
        X, y, dom_values, dom_idx = self._encode(X, y, domains)
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ConfigError("need at least two classes to fit")
        arch = ArchConfig(tuple(self.channels), tuple(self.kernel_sizes), in_channels=X.shape[1],
                          image_size=X.shape[2:], n_classes=len(self.classes_),
                          gate_placement=self.gate_placement)
        self.domains_ = dom_values
        self.input_shape_ = X.shape[1:]
        dataset = _as_dataset(X, y_idx, dom_idx, len(self.classes_), dom_values)
        plan = split(dataset, None, seed=self.random_state, validation_fraction=self.validation_fraction)
        rec = pretrain(build_model(arch, seed=self.random_state), dataset, plan, self.method, self.epochs,
                       self.random_state, self.learning_rate, self.momentum, self.batch_size,
                       self.coral_lambda, self.mixup_alpha)
        self.model_ = rec.model
        self.best_validation_accuracy_ = rec.best_validation_accuracy
        self.best_epoch_ = rec.best_epoch
        self.history_ = rec.history
        return self

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = check_images(X, expected_shape=self.input_shape_)
        return np.concatenate([forward(self.model_, X[i:i + 256]).data for i in range(0, len(X), 256)]) \
            if len(X) else np.zeros((0, len(self.classes_)))

    def predict_proba(self, X) -> np.ndarray:
        return T.softmax(self.decision_function(X))

    def predict(self, X) -> np.ndarray:
        scores = self.decision_function(X)
        return self.classes_[np.argmax(scores, axis=1)]


class FilterPruner(ClassifierMixin, BaseEstimator):
    """Prune a :class:`GatedCNNClassifier` to a target fraction of filters while finetuning.

    A fitted ``estimator`` is copied and pruned as is; an unfitted one is
    cloned and fitted first. The pruned classifier is ``estimator_``.
    """

    def __init__(self, estimator=None, criterion="taylor", alpha=1.0, target_remaining_ratio=0.5,
                 interval_minibatches=30, max_filters_per_event=4, per_layer_floor=1, finetune_epochs=30,
                 learning_rate=0.001, momentum=0.9, random_state=0):
        self.estimator = estimator
        self.criterion = criterion
        self.alpha = alpha
        self.target_remaining_ratio = target_remaining_ratio
        self.interval_minibatches = interval_minibatches
        self.max_filters_per_event = max_filters_per_event
        self.per_layer_floor = per_layer_floor
        self.finetune_epochs = finetune_epochs
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.random_state = random_state

    def fit(self, X, y, domains=None):
        base = self.estimator if self.estimator is not None else GatedCNNClassifier()
        if hasattr(base, "model_"):
            est = copy.deepcopy(base)
        else:
            est = clone(base).fit(X, y, domains)
        X, y, dom_values, dom_idx = est._encode(X, y, domains)
        X = check_images(X, expected_shape=est.input_shape_)
        unknown = np.setdiff1d(y, est.classes_)
        if len(unknown):
            raise ConfigError(f"labels {unknown.tolist()} were not seen when the estimator was fitted")
        y_idx = np.searchsorted(est.classes_, y)
        dataset = _as_dataset(X, y_idx, dom_idx, len(est.classes_), dom_values)
        plan = split(dataset, None, seed=self.random_state, validation_fraction=est.validation_fraction)
        schedule = PruneSchedule(self.interval_minibatches, self.max_filters_per_event,
                                 self.target_remaining_ratio, self.per_layer_floor)
        rec = prune_finetune_loop(est.model_.copy(), dataset, plan, schedule, self.criterion,
                                  IoRConfig(alpha=self.alpha), epochs=self.finetune_epochs,
                                  seed=self.random_state, batch_size=est.batch_size,
                                  learning_rate=self.learning_rate, momentum=self.momentum)
        est.model_ = rec.best_model
        self.estimator_ = est
        self.classes_ = est.classes_
        self.events_ = rec.events
        self.importance_ = rec.table
        self.best_validation_accuracy_ = rec.best_validation_accuracy
        self.remaining_ratio_ = rec.best_model.remaining_ratio
        return self

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "estimator_")
        return self.estimator_.predict_proba(X)

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "estimator_")
        return self.estimator_.predict(X)
