"""scikit-learn style wrappers around the inner model, the corruptions and meta-training.

Images are arrays of shape (n_samples, channels, height, width) with values in [0, 1].
"""

from __future__ import annotations

import warnings
from pathlib import Path

import numpy as np
from scipy.special import softmax
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_random_state, check_X_y

from . import learned_opt as lo
from . import model
from .corruptions import CorruptionSpec, corrupt_images
from .dataset import DatasetSplits, Split
from .inner_loop import SGD, Adam, Learned, train_population
from .outer import ESConfig, TruncationSchedule, outer_train, smoothed_final_loss
from .tasks import FixedSpec, Task, TrainCorruptions, toy_task


def _check_images(X, allow_empty: bool = False) -> np.ndarray:
    X = check_array(X, allow_nd=True, dtype=np.float64, ensure_min_samples=0 if allow_empty else 1)
    if X.ndim != 4:
        raise ValueError(f"expected images of shape (n_samples, channels, height, width), got {X.shape}")
    if X.shape[2] != X.shape[3]:
        raise ValueError(f"images must be square, got {X.shape[2]}x{X.shape[3]}")
    if X.size and (X.min() < 0.0 or X.max() > 1.0):
        raise ValueError("pixel values must lie in [0, 1]")
    return X


def _seed(random_state) -> int:
    if random_state is None:
        return 0
    if isinstance(random_state, (int, np.integer)):
        return int(random_state)
    if isinstance(random_state, np.random.Generator):
        return int(random_state.integers(2**31))
    return int(check_random_state(random_state).randint(2**31))


def _sampler(train_corruption):
    if train_corruption in (None, "clean", "identity"):
        return None
    if train_corruption == "train_corruptions":
        return TrainCorruptions()
    if isinstance(train_corruption, CorruptionSpec):
        return FixedSpec(train_corruption)
    return FixedSpec(CorruptionSpec.parse(train_corruption))


class CNNClassifier(ClassifierMixin, BaseEstimator):
    """The 4-layer CNN trained by Adam, SGD or a learned optimizer.

    ``optimizer`` is ``"adam"``, ``"sgd"`` or ``"learned"``; the learned
    rule reads its parameters from ``theta`` (a checkpoint path or a parameter
    dict). ``train_corruption`` corrupts every training minibatch and takes a
    spec label, ``"train_corruptions"`` or None. ``loss_curve_`` holds the
    minibatch training loss every 10 steps.
    """

    def __init__(
        self,
        optimizer="adam",
        learning_rate=1e-3,
        steps=1000,
        batch_size=16,
        channels=(8, 8, 16, 16),
        strides=(2, 2, 1, 1),
        theta=None,
        train_corruption=None,
        random_state=0,
    ):
        self.optimizer = optimizer
        self.learning_rate = learning_rate
        self.steps = steps
        self.batch_size = batch_size
        self.channels = channels
        self.strides = strides
        self.theta = theta
        self.train_corruption = train_corruption
        self.random_state = random_state

    def _make_optimizer(self):
        if self.optimizer == "adam":
            return Adam(float(self.learning_rate))
        if self.optimizer == "sgd":
            return SGD(float(self.learning_rate))
        if self.optimizer == "learned":
            if self.theta is None:
                raise ValueError("optimizer='learned' needs theta")
            theta = lo.load_checkpoint(self.theta) if isinstance(self.theta, (str, Path)) else self.theta
            return Learned(theta)
        raise ValueError(f"unknown optimizer {self.optimizer!r}")

    def fit(self, X, y):
        X, y = check_X_y(X, y, allow_nd=True, dtype=np.float64)
        X = _check_images(X)
        if int(self.steps) < 1 or int(self.batch_size) < 1:
            raise ValueError("steps and batch_size must be >= 1")
        self.classes_, encoded = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        self.arch_ = model.ArchConfig(
            in_channels=X.shape[1],
            image_size=X.shape[2],
            channels=tuple(self.channels),
            strides=tuple(self.strides),
            num_classes=len(self.classes_),
        )
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        split = Split(X, encoded.astype(np.int64))
        data = DatasetSplits(split, split, split, len(self.classes_), X.shape[2], X.shape[3])
        task = Task("arrays", data, self.arch_, FixedSpec(), batch_size=int(self.batch_size))
        run = train_population(task, self._make_optimizer(), [_seed(self.random_state)], int(self.steps), _sampler(self.train_corruption))
        self.params_ = model.take(run.params, 0)
        self.diverged_ = bool(run.diverged[0])
        self.loss_curve_ = run.curve[:, 0].copy()
        if self.diverged_:
            warnings.warn("inner training diverged; parameters were reset to zero", RuntimeWarning)
        return self

    def decision_function(self, X):
        check_is_fitted(self, "params_")
        X = _check_images(X)
        if X.shape[1:] != (self.arch_.in_channels, self.arch_.image_size, self.arch_.image_size):
            raise ValueError(f"fitted on images {self.n_features_in_} features wide, got shape {X.shape[1:]}")
        return model.forward(self.params_, X, self.arch_)

    def predict_proba(self, X):
        return softmax(self.decision_function(X), axis=-1)

    def predict(self, X):
        return self.classes_[np.argmax(self.decision_function(X), axis=-1)]


class ImageCorruptor(TransformerMixin, BaseEstimator):
    """Apply one corruption spec (a label such as ``"fog:3"``) to every image.

    With an integer ``random_state`` every call to ``transform`` draws the same
    noise; pass a Generator for fresh draws on each call.
    """

    def __init__(self, spec="identity", random_state=None):
        self.spec = spec
        self.random_state = random_state

    def _spec(self) -> CorruptionSpec:
        return self.spec if isinstance(self.spec, CorruptionSpec) else CorruptionSpec.parse(str(self.spec))

    def fit(self, X, y=None):
        X = _check_images(X, allow_empty=True)
        self.spec_ = self._spec()
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def transform(self, X):
        check_is_fitted(self, "spec_")
        X = _check_images(X, allow_empty=True)
        if isinstance(self.random_state, np.random.Generator):
            rng = self.random_state
        else:
            rng = np.random.default_rng(self.random_state if self.random_state is not None else None)
        return corrupt_images(X, self.spec_, rng)


class LearnedOptimizerES(BaseEstimator):
    """Meta-train the learned optimizer with truncated antithetic ES.

    ``fit()`` with no data meta-trains on the toy task; ``fit(X, y)`` holds out
    ``valid_fraction`` of the images as the outer-objective split and
    corrupts them with ``outer_corruption``.
    """

    def __init__(
        self,
        sigma=0.01,
        pairs_per_batch=16,
        outer_lr=1e-2,
        outer_lr_schedule="cosine",
        outer_iters=2000,
        start_len=10,
        end_len=40,
        ramp_iters=1000,
        jitter_frac=0.2,
        max_unroll_steps=150,
        eval_every=10,
        batch_size=16,
        valid_batch_size=256,
        channels=(8, 8, 16, 16),
        outer_corruption="gaussian_sigma:0.05",
        valid_fraction=0.1,
        out_dir=None,
        random_state=0,
    ):
        self.sigma = sigma
        self.pairs_per_batch = pairs_per_batch
        self.outer_lr = outer_lr
        self.outer_lr_schedule = outer_lr_schedule
        self.outer_iters = outer_iters
        self.start_len = start_len
        self.end_len = end_len
        self.ramp_iters = ramp_iters
        self.jitter_frac = jitter_frac
        self.max_unroll_steps = max_unroll_steps
        self.eval_every = eval_every
        self.batch_size = batch_size
        self.valid_batch_size = valid_batch_size
        self.channels = channels
        self.outer_corruption = outer_corruption
        self.valid_fraction = valid_fraction
        self.out_dir = out_dir
        self.random_state = random_state

    def _task(self, X, y) -> Task:
        sampler = _sampler(self.outer_corruption) or FixedSpec()
        if X is None:
            task = toy_task(batch_size=int(self.batch_size), valid_batch_size=int(self.valid_batch_size))
            task.outer_spec = sampler
            return task
        X, y = check_X_y(X, y, allow_nd=True, dtype=np.float64)
        X = _check_images(X)
        if not 0 < self.valid_fraction < 1:
            raise ValueError("valid_fraction must lie in (0, 1)")
        classes, encoded = np.unique(y, return_inverse=True)
        if len(classes) < 2:
            raise ValueError("need at least two classes")
        order = np.random.default_rng(_seed(self.random_state)).permutation(len(X))
        n_valid = max(1, int(round(self.valid_fraction * len(X))))
        if n_valid >= len(X):
            raise ValueError("not enough samples for a validation split")
        valid, train = order[:n_valid], order[n_valid:]
        encoded = encoded.astype(np.int64)
        data = DatasetSplits(
            Split(X[train], encoded[train]),
            Split(X[valid], encoded[valid]),
            Split(X[valid], encoded[valid]),
            len(classes),
            X.shape[2],
            X.shape[3],
        )
        arch = model.ArchConfig(in_channels=X.shape[1], image_size=X.shape[2], channels=tuple(self.channels), num_classes=len(classes))
        return Task("arrays", data, arch, sampler, batch_size=int(self.batch_size), valid_batch_size=int(self.valid_batch_size))

    def fit(self, X=None, y=None):
        task = self._task(X, y)
        config = ESConfig(
            sigma=self.sigma,
            pairs_per_batch=self.pairs_per_batch,
            workers=1,
            outer_lr=self.outer_lr,
            outer_lr_schedule=self.outer_lr_schedule,
            outer_iters=self.outer_iters,
            eval_every=self.eval_every,
            checkpoint_every=max(1, int(self.outer_iters)),
            max_unroll_steps=self.max_unroll_steps,
        )
        sched = TruncationSchedule(self.start_len, self.end_len, self.ramp_iters, self.jitter_frac)
        run = outer_train(config, sched, task, _seed(self.random_state), self.out_dir)
        self.theta_ = lo.theta_from_vector(run.theta)
        self.log_ = run.log
        self.final_outer_loss_ = smoothed_final_loss([r["mean_outer_loss"] for r in run.log])
        return self

    def as_optimizer(self) -> Learned:
        check_is_fitted(self, "theta_")
        return Learned(self.theta_, label="learned")

    def score(self, X=None, y=None) -> float:
        """Negative smoothed final outer loss, so that larger is better."""
        check_is_fitted(self, "theta_")
        return -self.final_outer_loss_

    def save(self, path) -> Path:
        check_is_fitted(self, "theta_")
        return lo.save_checkpoint(self.theta_, path)
