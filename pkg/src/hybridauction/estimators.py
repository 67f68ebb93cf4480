"""scikit-learn style wrappers around the learned mechanism and the VCG baseline.

``X`` is either :class:`AuctionSamples` or the flat matrix from
:func:`hybridauction.validation.to_features`. ``predict`` returns payments,
``transform`` returns ``[expected clicks | payments]`` per agent and ``score``
is the mean revenue.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .data import setting_from_preset
from .metrics import EvalConfig, LearnedMechanism, VcgMechanism, empirical_revenue, empirical_welfare, test_regret
from .network import HybridRegretNet
from .training import TrainConfig, Trainer
from .validation import check_samples


class _AuctionMixin:
    def _setting(self):
        return setting_from_preset(self.setting, self.C)

    def _mechanism(self):
        raise NotImplementedError

    def outcome(self, X):
        samples = check_samples(X, self._setting(), self.value_max)
        return self._mechanism().outcome(samples), samples

    def predict(self, X):
        return self.outcome(X)[0].payments

    def predict_allocation(self, X):
        return self.outcome(X)[0].allocation

    def transform(self, X):
        out, samples = self.outcome(X)
        return np.hstack([out.expected_ctr(samples.setting.theta), out.payments])

    def score(self, X, y=None):
        return empirical_revenue(self.outcome(X)[0])

    def welfare(self, X):
        out, samples = self.outcome(X)
        return empirical_welfare(out, samples.values, samples.setting.theta)

    def regret(self, X, eval_config: EvalConfig | None = None):
        samples = check_samples(X, self._setting(), self.value_max)
        return test_regret(self._mechanism(), samples, eval_config or EvalConfig()).average


class HRegNetAuction(_AuctionMixin, BaseEstimator):
    """Learned hybrid auction trained by the augmented-Lagrangian loop."""

    def __init__(self, setting="A", C=1, hidden=(128, 128), store_hidden=(64, 64), iterations=10000,
                 batch_size=128, ascent_steps=25, ascent_lr=0.1, lr=1e-3, multiplier_period=100,
                 rho_init=1.0, rho_increment=1.0, optimizer="adam", value_max=1.0, random_state=0):
        self.setting = setting
        self.C = C
        self.hidden = hidden
        self.store_hidden = store_hidden
        self.iterations = iterations
        self.batch_size = batch_size
        self.ascent_steps = ascent_steps
        self.ascent_lr = ascent_lr
        self.lr = lr
        self.multiplier_period = multiplier_period
        self.rho_init = rho_init
        self.rho_increment = rho_increment
        self.optimizer = optimizer
        self.value_max = value_max
        self.random_state = random_state

    def _train_config(self) -> TrainConfig:
        return TrainConfig(iterations=self.iterations, batch_size=self.batch_size, ascent_steps=self.ascent_steps,
                           ascent_lr=self.ascent_lr, lr=self.lr, multiplier_period=self.multiplier_period,
                           rho_init=self.rho_init, rho_increment=self.rho_increment, optimizer=self.optimizer,
                           hidden=self.hidden, store_hidden=self.store_hidden, seed=self.random_state,
                           log_every=max(self.iterations, 1))

    def fit(self, X, y=None):
        setting = self._setting()
        samples = check_samples(X, setting, self.value_max)
        state = Trainer(setting, self._train_config()).fit(samples)
        self.params_ = state.params
        self.lagrange_ = state.lagrange
        self.net_ = HybridRegretNet(setting, self.hidden, self.store_hidden)
        return self

    def _mechanism(self):
        if not hasattr(self, "params_"):
            raise NotFittedError("HRegNetAuction is not fitted yet; call fit first")
        return LearnedMechanism(self.net_, self.params_)


class VCGAuction(_AuctionMixin, BaseEstimator):
    """Welfare-maximizing hybrid allocation with Clarke payments; fitting only validates input."""

    def __init__(self, setting="A", C=1, pivot="zero_bid", value_max=1.0):
        self.setting = setting
        self.C = C
        self.pivot = pivot
        self.value_max = value_max

    def fit(self, X=None, y=None):
        if X is not None:
            check_samples(X, self._setting(), self.value_max)
        if self.pivot not in ("zero_bid", "remove"):
            raise ValueError(f"unknown pivot rule {self.pivot!r}")
        self.fitted_ = True
        return self

    def _mechanism(self):
        return VcgMechanism(self.pivot)
