"""scikit-learn style wrappers around the meta-learning and Bayes reconstructors."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, clone
from sklearn.utils.validation import check_array, check_is_fitted

from .bayes import GaussianPrior, bayes_estimate, subspace_bases
from .bilevel import InnerConfig, OuterConfig, fine_tune, maml_train, mean_psnr
from .models import LinearFamily, PDNetFamily, default_step
from .numerics import make_rng


def _batched(Y, operator):
    """Split ``Y`` into single measurements; returns ``(items, was_single)``."""
    Y = np.asarray(Y, dtype=np.float64)
    if Y.shape == operator.out_shape:
        return [Y], True
    if Y.shape[1:] != operator.out_shape:
        raise ValueError(f"measurements of shape {Y.shape} do not match operator output {operator.out_shape}")
    return list(Y), False


class MetaReconstructor(BaseEstimator):
    """Meta-trained reconstruction network for a family of linear inverse problems.

    ``fit`` takes a list of :class:`~metainv.operators.Task` objects and
    learns shared parameters; ``fine_tune`` adapts them to a new task.
    """

    def __init__(self, model="pdnet", n_layers=10, n_channels=40, tau=None, gamma=None,
                 inner_mode="unsup", inner_steps=1, inner_optimizer="adam", inner_step_size=1e-3,
                 reg_lambda=1.0, outer_step_size=1e-3, epochs=100, batch_size=None,
                 lambda_init=0.01, random_state=0):
        self.model = model
        self.n_layers = n_layers
        self.n_channels = n_channels
        self.tau = tau
        self.gamma = gamma
        self.inner_mode = inner_mode
        self.inner_steps = inner_steps
        self.inner_optimizer = inner_optimizer
        self.inner_step_size = inner_step_size
        self.reg_lambda = reg_lambda
        self.outer_step_size = outer_step_size
        self.epochs = epochs
        self.batch_size = batch_size
        self.lambda_init = lambda_init
        self.random_state = random_state

    def _inner_config(self) -> InnerConfig:
        return InnerConfig(mode=self.inner_mode, steps=self.inner_steps, optimizer=self.inner_optimizer,
                           step_size=self.inner_step_size, reg_lambda=self.reg_lambda)

    def _make_family(self, tasks):
        if self.model == "linear":
            op = tasks[0].operator
            return LinearFamily(op.in_shape, op.out_shape), None
        if self.model != "pdnet":
            raise ValueError(f"model must be 'pdnet' or 'linear', got {self.model!r}")
        step = None
        if self.tau is None or self.gamma is None:
            step = default_step([t.operator for t in tasks])
        family = PDNetFamily(self.n_layers, self.n_channels,
                             self.tau if self.tau is not None else step,
                             self.gamma if self.gamma is not None else step)
        return family, family.init(make_rng(self.random_state, 1), self.lambda_init)

    def fit(self, tasks, y=None):
        tasks = list(tasks)
        if not tasks:
            raise ValueError("fit needs at least one task")
        self.family_, theta0 = self._make_family(tasks)
        outer = OuterConfig(step_size=self.outer_step_size, epochs=self.epochs, batch_size=self.batch_size)
        state = maml_train(self.family_, tasks, self._inner_config(), outer, seed=self.random_state,
                           theta_init=theta0, record_psnr=False)
        self.theta_star_ = state.theta_star
        self.history_ = state.history
        self.n_tasks_ = len(tasks)
        return self

    def predict(self, Y, operator):
        check_is_fitted(self, "theta_star_")
        items, single = _batched(Y, operator)
        out = np.stack([self.family_.predict(self.theta_star_, y, operator) for y in items])
        return out[0] if single else out

    def fine_tune(self, task, mode=None, steps=50, step_size=1e-3, optimizer="adam", reg_lambda=0.0):
        """Return a copy adapted to ``task``; the per-step trace is in ``finetune_trace_``."""
        check_is_fitted(self, "theta_star_")
        cfg = InnerConfig(mode=mode or self.inner_mode, steps=max(1, steps), optimizer=optimizer,
                          step_size=step_size, reg_lambda=reg_lambda)
        phi, rows = fine_tune(self.family_, self.theta_star_, task, cfg, steps=steps)
        tuned = clone(self)
        tuned.family_ = self.family_
        tuned.theta_star_ = phi
        tuned.history_ = self.history_
        tuned.n_tasks_ = self.n_tasks_
        tuned.finetune_trace_ = rows
        return tuned

    def score(self, tasks, y=None):
        """Mean test-split PSNR over ``tasks`` (a single task is accepted)."""
        check_is_fitted(self, "theta_star_")
        if not isinstance(tasks, (list, tuple)):
            tasks = [tasks]
        return float(np.mean([mean_psnr(self.family_, self.theta_star_, t) for t in tasks]))


class GaussianBayesReconstructor(BaseEstimator):
    """Posterior-mean reconstruction under a Gaussian prior fitted to clean signals.

    ``shrinkage`` adds a multiple of the identity to the sample covariance.
    """

    def __init__(self, shrinkage=0.0):
        self.shrinkage = shrinkage

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64, ensure_min_samples=2)
        if self.shrinkage < 0:
            raise ValueError("shrinkage must be non-negative")
        mu = X.mean(axis=0)
        sigma = np.atleast_2d(np.cov(X, rowvar=False, bias=True)) + self.shrinkage * np.eye(X.shape[1])
        self.prior_ = GaussianPrior(mu, 0.5 * (sigma + sigma.T))
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, Y, operator):
        check_is_fitted(self, "prior_")
        if operator.in_size != self.n_features_in_:
            raise ValueError(f"operator acts on {operator.in_size} values, prior has {self.n_features_in_}")
        items, single = _batched(Y, operator)
        bases = subspace_bases(operator)
        out = np.stack([bayes_estimate(self.prior_, operator, y, bases) for y in items])
        return out[0] if single else out
