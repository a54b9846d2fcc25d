"""scikit-learn estimator wrapping the part-aware model."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .losses import LossConfig
from .model import ModelConfig, PartAwareModel
from .training import TrainConfig, default_schedule, load_checkpoint, train


class PartAwareReID(TransformerMixin, BaseEstimator):
    """Learn part-aware descriptors for retrieval.

    ``fit(X, y)`` trains on inputs ``X`` (``[n, input_dim]`` vectors for the
    toy backbone, ``[n, H, W, C]`` maps for precomputed features) with
    identity labels ``y``. ``transform(X)`` returns ``[n, (p1 + p2) * C]``
    descriptors, each part unit-normalized.

    Parameters mirror :class:`ModelConfig` and :class:`TrainConfig`;
    ``branches``/``memory``/``loss`` are the ablation switches.
    """

    def __init__(
        self,
        source="toy",
        input_dim=256,
        height=12,
        width=12,
        channels=64,
        tokens=8,
        head_scale=4.0,
        p1=6,
        p2=6,
        epochs=60,
        batch_size=16,
        lr_schedule=None,
        momentum=0.9,
        lam=1.0,
        alpha=1.0,
        beta=0.05,
        softmax_target="class",
        delta=0.5,
        memory=True,
        loss="tc",
        memory_source="head",
        warm_start=True,
        seed=0,
    ):
        self.source = source
        self.input_dim = input_dim
        self.height = height
        self.width = width
        self.channels = channels
        self.tokens = tokens
        self.head_scale = head_scale
        self.p1 = p1
        self.p2 = p2
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr_schedule = lr_schedule
        self.momentum = momentum
        self.lam = lam
        self.alpha = alpha
        self.beta = beta
        self.softmax_target = softmax_target
        self.delta = delta
        self.memory = memory
        self.loss = loss
        self.memory_source = memory_source
        self.warm_start = warm_start
        self.seed = seed

    def model_config(self):
        return ModelConfig(
            source=self.source, input_dim=self.input_dim, height=self.height, width=self.width,
            channels=self.channels, tokens=self.tokens, p1=self.p1, p2=self.p2, head_scale=self.head_scale,
        )

    def train_config(self):
        schedule = self.lr_schedule if self.lr_schedule is not None else default_schedule(self.epochs)
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            lr_schedule=schedule,
            momentum=self.momentum,
            seed=self.seed,
            loss=LossConfig(self.lam, self.alpha, self.beta, self.softmax_target),
            delta=self.delta,
            memory=bool(self.memory),
            loss_kind=self.loss,
            memory_source=self.memory_source,
            warm_start=self.warm_start,
        )

    def _check_X(self, X, model_config):
        X = check_array(X, allow_nd=True, dtype=np.float64)
        expected = PartAwareModel(model_config).input_shape
        if X.shape[1:] != expected:
            raise ValueError(f"X has sample shape {X.shape[1:]}, expected {expected}")
        return X

    def fit(self, X, y, out_dir=None, resume=False):
        model_config = self.model_config()
        train_config = self.train_config()
        X = self._check_X(X, model_config)
        y = np.asarray(y)
        if y.shape != (X.shape[0],):
            raise ValueError(f"y must have shape ({X.shape[0]},), got {y.shape}")
        if len(np.unique(y)) < 2:
            raise ValueError("need at least two identities to train")
        state = train(model_config, train_config, X, y, out_dir=out_dir, resume=resume)
        self._set_state(state, X.shape[1:])
        return self

    def _set_state(self, state, sample_shape):
        self.params_ = state.params
        self.bank_ = state.bank
        self.log_ = state.log
        self.epoch_ = state.epoch
        self.n_features_in_ = int(np.prod(sample_shape))

    def transform(self, X):
        check_is_fitted(self, "params_")
        model_config = self.model_config()
        X = self._check_X(X, model_config)
        return PartAwareModel(model_config).embed(self.params_, X)

    @classmethod
    def from_checkpoint(cls, path):
        """Rebuild a fitted estimator from a training checkpoint."""
        state, mc, tc = load_checkpoint(path)
        schedule = None if tc.lr_schedule == default_schedule(tc.epochs) else tc.lr_schedule
        est = cls(
            source=mc.source, input_dim=mc.input_dim, height=mc.height, width=mc.width,
            channels=mc.channels, tokens=mc.tokens, head_scale=mc.head_scale, p1=mc.p1, p2=mc.p2,
            epochs=tc.epochs, batch_size=tc.batch_size, lr_schedule=schedule,
            momentum=tc.momentum, lam=tc.loss.lam, alpha=tc.loss.alpha, beta=tc.loss.beta,
            softmax_target=tc.loss.softmax_target, delta=tc.delta, memory=tc.memory, loss=tc.loss_kind,
            memory_source=tc.memory_source, warm_start=tc.warm_start, seed=tc.seed,
        )
        est._set_state(state, PartAwareModel(mc).input_shape)
        return est
