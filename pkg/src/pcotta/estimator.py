"""scikit-learn style facade over the pretrain / bank / adapt stages."""

from __future__ import annotations

import dataclasses

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import autodiff as ad
from . import geometry as geo
from .adaptation import Adapter, AdaptationConfig
from .config import BankConfig, PretrainConfig, RunConfig
from .errors import ContractError, ShapeError
from .model import ModelDims, encode_features
from .pipeline import init_bank, pretrain_model
from .tasks import TaskSample


def check_clouds(X, min_points: int = 1) -> list[np.ndarray]:
    """Accept an (n, N, 3) array or a sequence of (N_i, 3) clouds."""
    if isinstance(X, np.ndarray):
        if X.ndim == 2:
            X = X[None]
        if X.ndim != 3:
            raise ShapeError(f"expected (n, N, 3) clouds, got shape {X.shape}")
        return [geo.check_cloud(c, min_points) for c in X]
    clouds = [geo.check_cloud(c, min_points) for c in X]
    if not clouds:
        raise ContractError("no clouds given")
    return clouds


def check_samples(X) -> list[TaskSample]:
    samples = [X] if isinstance(X, TaskSample) else list(X)
    if not samples:
        raise ContractError("no samples given")
    bad = [type(s).__name__ for s in samples if not isinstance(s, TaskSample)]
    if bad:
        raise ContractError(f"expected TaskSample items, got {bad[0]}")
    return samples


class PCoTTA(BaseEstimator):
    """Prototype-shifted in-context point-cloud model with continual test-time adaptation.

    ``fit`` takes labelled source samples; ``adapt`` consumes an unlabelled
    target stream in order and updates only the learnable prototypes and the
    attention module.
    """

    def __init__(self, M=16, C=32, g=16, hidden=64, pretrain_epochs=30, bank_epochs=3, n_prototypes=2,
                 tau=0.07, alpha=1.0, omega_margin=0.05, test_lr=1e-3, random_state=0):
        self.M = M
        self.C = C
        self.g = g
        self.hidden = hidden
        self.pretrain_epochs = pretrain_epochs
        self.bank_epochs = bank_epochs
        self.n_prototypes = n_prototypes
        self.tau = tau
        self.alpha = alpha
        self.omega_margin = omega_margin
        self.test_lr = test_lr
        self.random_state = random_state

    def _config(self, domains) -> RunConfig:
        cfg = RunConfig(
            model=ModelDims(self.M, self.C, self.g, self.hidden),
            pretrain=PretrainConfig(epochs=self.pretrain_epochs),
            bank=BankConfig(epochs=self.bank_epochs, quantity=self.n_prototypes),
            adapt=AdaptationConfig(tau=self.tau, alpha=self.alpha, omega_margin=self.omega_margin, lr=self.test_lr),
        )
        return cfg.replace("data", source_domains=tuple(domains))

    def fit(self, X, y=None):
        samples = check_samples(X)
        domains = tuple(dict.fromkeys(s.query_domain for s in samples))
        cfg = self._config(domains)
        model, trace = pretrain_model(cfg, self.random_state, samples)
        art = init_bank(cfg, model, self.random_state, samples)
        self.config_ = cfg
        self.model_ = art.model
        self.bank_ = art.bank
        self.pool_ = art.pool
        self.loss_curve_ = trace + art.trace
        self.adapter_ = Adapter(self.model_.copy(), self.bank_.copy(), cfg.adapt, seed=self.random_state)
        return self

    def reset(self):
        """Forget all test-time updates."""
        check_is_fitted(self, "model_")
        self.adapter_ = Adapter(self.model_.copy(), self.bank_.copy(), self.config_.adapt, seed=self.random_state)
        return self

    def transform(self, X):
        """Pre-shift token features, flattened to (n, M*C)."""
        check_is_fitted(self, "model_")
        clouds = check_clouds(X, max(self.M, self.g))
        return np.stack([encode_features(self.model_, c).reshape(-1) for c in clouds])

    def _with_prompt(self, s: TaskSample) -> TaskSample:
        if s.prompt_input is not None and s.prompt_target is not None:
            return s
        j = self.pool_.nearest(encode_features(self.model_, s.query_input), s.task)
        return s.with_prompt(self.pool_.inputs[j], self.pool_.targets[j], self.pool_.domains[j])

    def _run(self, X, lr: float) -> list[np.ndarray]:
        check_is_fitted(self, "model_")
        samples = [self._with_prompt(s) for s in check_samples(X)]
        adapter = self.adapter_
        saved = adapter.config
        adapter.config = dataclasses.replace(saved, lr=lr)
        try:
            return [adapter.step(s)[0].prediction for s in samples]
        finally:
            adapter.config = saved

    def predict(self, X):
        """Predictions with the current test-time state, without updating it."""
        with ad.no_grad():
            return self._run(X, 0.0)

    def adapt(self, X):
        """Predict each sample in order, taking one adaptation step after each."""
        return self._run(X, self.config_.adapt.lr)

    def score(self, X, y=None):
        """Negative mean Chamfer distance to the samples' query targets."""
        samples = check_samples(X)
        if any(s.query_target is None for s in samples):
            raise ContractError("score needs samples with query targets")
        preds = self.predict(samples)
        return -float(np.mean([geo.chamfer_value(p, s.query_target) for p, s in zip(preds, samples)]))
