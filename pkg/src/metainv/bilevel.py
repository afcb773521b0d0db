"""Bilevel meta-training: inner solves from the meta parameters, unrolled
hypergradients, the outer Adam loop and fine-tuning on new tasks.

Parameters are flat vectors handled through a model family
(:class:`~metainv.models.LinearFamily` or :class:`~metainv.models.PDNetFamily`).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .numerics import NumericalError, make_rng, psnr
from .operators import Task

logger = logging.getLogger(__name__)

DIVERGENCE_LIMIT = 1e12
MAX_TAPED_STEPS = 50


@dataclass(frozen=True)
class InnerConfig:
    mode: str = "unsup"
    steps: int = 1
    optimizer: str = "adam"
    step_size: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    reg_lambda: float = 1.0

    def __post_init__(self):
        if self.mode not in ("sup", "unsup"):
            raise ValueError(f"inner mode must be 'sup' or 'unsup', got {self.mode!r}")
        if self.optimizer not in ("gd", "adam"):
            raise ValueError(f"inner optimizer must be 'gd' or 'adam', got {self.optimizer!r}")
        if self.steps < 1:
            raise ValueError("inner steps must be >= 1")
        if not self.step_size > 0:
            raise ValueError("inner step size must be positive")
        if self.reg_lambda < 0:
            raise ValueError("reg_lambda must be non-negative")


@dataclass(frozen=True)
class OuterConfig:
    step_size: float = 1e-3
    epochs: int = 100
    batch_size: int | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not self.step_size > 0:
            raise ValueError("outer step size must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


# -- losses -------------------------------------------------------------------


def sup_loss(model, task: Task, split: str = "test") -> float:
    """``sum 1/2 |f(y) - x|^2`` over a split; ``model(y, op)`` reconstructs."""
    total = 0.0
    for x, y in task.split(split):
        r = model(y, task.operator) - x
        total += 0.5 * float(np.sum(r * r))
    return total


def unsup_loss(model, task: Task, split: str = "train") -> float:
    """``sum 1/2 |A f(y) - y|^2`` over a split."""
    op = task.operator
    total = 0.0
    for _, y in task.split(split):
        r = op.apply(model(y, op)) - y
        total += 0.5 * float(np.sum(r * r))
    return total


def bind(family, phi):
    """Callable ``(y, op) -> x`` for a family and parameter vector."""
    return lambda y, op: family.predict(phi, y, op)


def mean_psnr(family, phi, task: Task, split: str = "test") -> float:
    data = task.split(split)
    return float(np.mean([psnr(family.predict(phi, y, task.operator), x) for x, y in data]))


def inner_objective_grad(family, phi, theta_star, task: Task, cfg: InnerConfig):
    """Value and gradient of the regularized inner objective on the train split."""
    loss, grad = family.loss_and_grad(phi, task.split("train"), task.operator, cfg.mode)
    diff = phi - theta_star
    loss += 0.5 * cfg.reg_lambda * float(diff @ diff)
    return loss, grad + cfg.reg_lambda * diff


# -- Adam -----------------------------------------------------------------------


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, size: int) -> "AdamState":
        return cls(np.zeros(size), np.zeros(size), 0)


def adam_step(params, grad, state: AdamState, step_size: float, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update; returns ``(params, state)``."""
    t = state.t + 1
    m = beta1 * state.m + (1.0 - beta1) * grad
    v = beta2 * state.v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    return params - step_size * m_hat / (np.sqrt(v_hat) + eps), AdamState(m, v, t)


# -- inner problem --------------------------------------------------------------


@dataclass
class InnerTrace:
    iterates: list = field(default_factory=list)
    grads: list = field(default_factory=list)
    moments: list = field(default_factory=list)  # (m, v) after each Adam step
    losses: list = field(default_factory=list)


def inner_solve(family, theta_star, task: Task, cfg: InnerConfig, steps: int | None = None):
    """Run ``cfg.steps`` optimizer steps from ``theta_star``.

    Returns the final iterate and an :class:`InnerTrace` holding every
    iterate, gradient and Adam moment (needed for unrolled reverse mode).
    """
    n_steps = cfg.steps if steps is None else int(steps)
    phi = np.array(theta_star, dtype=np.float64)
    trace = InnerTrace(iterates=[phi])
    state = AdamState.zeros(phi.size)
    for t in range(n_steps):
        loss, grad = inner_objective_grad(family, phi, theta_star, task, cfg)
        if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
            raise NumericalError(f"non-finite inner loss at step {t} on task {task.name!r}")
        trace.losses.append(loss)
        trace.grads.append(grad)
        if cfg.optimizer == "gd":
            phi = phi - cfg.step_size * grad
        else:
            phi, state = adam_step(phi, grad, state, cfg.step_size, cfg.beta1, cfg.beta2, cfg.eps)
            trace.moments.append((state.m, state.v))
        trace.iterates.append(phi)
    return phi, trace


def _unroll_reverse(family, theta_star, task: Task, cfg: InnerConfig, trace: InnerTrace, a_phi):
    """Pull the adjoint of the final iterate back to ``theta_star``."""
    pairs = task.split("train")
    op = task.operator
    lam = cfg.reg_lambda
    alpha = cfg.step_size
    theta_bar = np.zeros_like(theta_star)
    a_phi = a_phi.copy()
    steps = len(trace.grads)
    if cfg.optimizer == "gd":
        for t in reversed(range(steps)):
            phi_t = trace.iterates[t]
            a_grad = -alpha * a_phi
            a_phi = a_phi + family.hvp(phi_t, pairs, op, cfg.mode, a_grad) + lam * a_grad
            theta_bar -= lam * a_grad
        return theta_bar + a_phi

    b1, b2, eps = cfg.beta1, cfg.beta2, cfg.eps
    a_m = np.zeros_like(theta_star)
    a_v = np.zeros_like(theta_star)
    for t in reversed(range(steps)):
        c = t + 1
        m, v = trace.moments[t]
        g = trace.grads[t]
        bc1, bc2 = 1.0 - b1**c, 1.0 - b2**c
        m_hat, v_hat = m / bc1, v / bc2
        root = np.sqrt(v_hat)
        den = root + eps
        a_m = a_m - a_phi * alpha / (den * bc1)
        with np.errstate(divide="ignore", invalid="ignore"):
            dv = np.where(root > 0, alpha * m_hat / (den * den * 2.0 * root * bc2), 0.0)
        a_v = a_v + a_phi * dv
        a_grad = (1.0 - b1) * a_m + 2.0 * (1.0 - b2) * g * a_v
        a_m = b1 * a_m
        a_v = b2 * a_v
        if np.any(a_grad):
            a_phi = a_phi + family.hvp(trace.iterates[t], pairs, op, cfg.mode, a_grad) + lam * a_grad
        theta_bar -= lam * a_grad
    return theta_bar + a_phi


@dataclass
class TaskOutcome:
    phi: np.ndarray
    inner_loss: float
    outer_loss: float
    hypergrad: np.ndarray


def task_hypergradient(family, theta_star, task: Task, cfg: InnerConfig) -> TaskOutcome:
    if cfg.steps > MAX_TAPED_STEPS:
        raise ValueError(f"at most {MAX_TAPED_STEPS} inner steps can be unrolled")
    phi, trace = inner_solve(family, theta_star, task, cfg)
    outer, a_phi = family.loss_and_grad(phi, task.split("test"), task.operator, "sup")
    hg = _unroll_reverse(family, theta_star, task, cfg, trace, a_phi)
    inner_loss, _ = family.loss_and_grad(phi, task.split("train"), task.operator, cfg.mode)
    return TaskOutcome(phi, inner_loss, outer, hg)


def hypergradient(family, theta_star, tasks, cfg: InnerConfig):
    """Gradient in ``theta_star`` of the summed outer (supervised, test split)
    loss through the unrolled inner solves. Returns ``(grad, outer_loss)``."""
    theta_star = np.asarray(theta_star, dtype=np.float64)
    total = np.zeros_like(theta_star)
    loss = 0.0
    for task in tasks:
        out = task_hypergradient(family, theta_star, task, cfg)
        total += out.hypergrad
        loss += out.outer_loss
    return total, loss


def outer_objective(family, theta_star, tasks, cfg: InnerConfig) -> float:
    """Summed outer loss after the inner solves (no gradient)."""
    loss = 0.0
    for task in tasks:
        phi, _ = inner_solve(family, theta_star, task, cfg)
        loss += family.loss_and_grad(phi, task.split("test"), task.operator, "sup")[0]
    return loss


# -- meta training --------------------------------------------------------------


@dataclass
class MetaState:
    theta_star: np.ndarray
    adam: AdamState
    history: list = field(default_factory=list)
    epoch: int = 0


def maml_train(family, tasks, inner_cfg: InnerConfig, outer_cfg: OuterConfig, seed: int = 0,
               theta_init=None, record_psnr: bool = True, callback=None, state: MetaState | None = None) -> MetaState:
    """Outer Adam on the meta parameters.

    Every epoch visits the tasks in a seed-derived shuffled order, split into
    minibatches (all tasks at once by default); each minibatch contributes
    one outer step with the sum of its task hypergradients.
    """
    tasks = list(tasks)
    if not tasks:
        raise ValueError("need at least one task")
    if state is None:
        theta = family.init(make_rng(seed, 1)) if theta_init is None else np.array(theta_init, dtype=np.float64)
        if theta.size != family.n_params:
            raise ValueError("initial parameters do not match the model family")
        state = MetaState(theta, AdamState.zeros(theta.size))
    batch = outer_cfg.batch_size or len(tasks)
    for _ in range(outer_cfg.epochs):
        epoch = state.epoch
        order = make_rng(seed, 1000 + epoch).permutation(len(tasks))
        record = {"epoch": epoch, "outer_loss": 0.0, "inner_loss": {}, "outer_task_loss": {},
                  "meta_loss": {}, "meta_psnr": {}, "inner_psnr": {}}
        for start in range(0, len(tasks), batch):
            idx = sorted(order[start : start + batch].tolist())
            grad = np.zeros_like(state.theta_star)
            for i in idx:
                task = tasks[i]
                out = task_hypergradient(family, state.theta_star, task, inner_cfg)
                grad += out.hypergrad
                record["outer_loss"] += out.outer_loss
                record["outer_task_loss"][i] = out.outer_loss
                record["inner_loss"][i] = out.inner_loss
                if record_psnr:
                    record["meta_loss"][i] = sup_loss(bind(family, state.theta_star), task)
                    record["meta_psnr"][i] = mean_psnr(family, state.theta_star, task)
                    record["inner_psnr"][i] = mean_psnr(family, out.phi, task)
            if not np.isfinite(record["outer_loss"]) or record["outer_loss"] > DIVERGENCE_LIMIT:
                raise NumericalError(
                    f"outer loss diverged at epoch {epoch}: {record['outer_loss']:.3e} "
                    f"(|grad| = {np.linalg.norm(grad):.3e})"
                )
            theta, state.adam = adam_step(state.theta_star, grad, state.adam, outer_cfg.step_size,
                                          outer_cfg.beta1, outer_cfg.beta2, outer_cfg.eps)
            state.theta_star = theta
        state.history.append(record)
        state.epoch += 1
        logger.debug("epoch %d outer loss %.6g", epoch, record["outer_loss"])
        if callback is not None:
            callback(state, record)
    return state


def fine_tune(family, theta_star, task: Task, cfg: InnerConfig, steps: int | None = None):
    """Solve the inner problem of a new task from the meta parameters.

    Returns ``(phi, trace)`` where each trace row holds the optimized
    train-split loss (without the proximal term) and, when the task has
    ground truth, the mean test PSNR.
    """
    n_steps = cfg.steps if steps is None else int(steps)
    if n_steps < 0:
        raise ValueError("steps must be >= 0")
    theta_star = np.asarray(theta_star, dtype=np.float64)
    pairs = task.split("train")
    op = task.operator
    phi = theta_star.copy()
    state = AdamState.zeros(phi.size)
    rows = []

    def record(step):
        loss, _ = family.loss_and_grad(phi, pairs, op, cfg.mode)
        row = {"step": step, "loss": loss, "psnr": mean_psnr(family, phi, task) if task.test else float("nan")}
        rows.append(row)

    record(0)
    for t in range(n_steps):
        loss, grad = inner_objective_grad(family, phi, theta_star, task, cfg)
        if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
            raise NumericalError(f"non-finite loss at fine-tuning step {t}")
        if cfg.optimizer == "gd":
            phi = phi - cfg.step_size * grad
        else:
            phi, state = adam_step(phi, grad, state, cfg.step_size, cfg.beta1, cfg.beta2, cfg.eps)
        record(t + 1)
    return phi, rows


def with_steps(cfg: InnerConfig, steps: int) -> InnerConfig:
    return replace(cfg, steps=steps)
