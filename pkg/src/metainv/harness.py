"""Experiment runners: toy Gaussian study, multi-task training, fine-tuning,
evaluation and the Bayes-estimator consistency sweep.

Every run writes ``manifest.json`` and ``metrics.csv`` to its output
directory; re-running from the manifest reproduces the metrics exactly.
"""
from __future__ import annotations

import csv
import json
import os
import platform
import time
from dataclasses import astuple, dataclass, field, fields

import numpy as np

from . import __version__
from .bayes import (
    GaussianPrior,
    bayes_estimate,
    bayes_linear_map,
    exponential_covariance,
    gaussian_condition_oracle,
    sample_prior,
    square_mask_operator,
)
from .bilevel import InnerConfig, OuterConfig, bind, fine_tune, maml_train, mean_psnr, sup_loss, with_steps
from .config import ExperimentConfig, TaskSection, config_dict, config_hash
from .data import list_images, load_dataset, read_image, write_image
from .models import LinearFamily, PDNetFamily, default_step, load_checkpoint, save_checkpoint
from .numerics import make_rng, psnr, save_npy
from .operators import (
    Pair,
    Task,
    kernel_projector,
    make_decimation,
    make_identity,
    make_mask,
    make_task,
    pinv_apply,
)

MIN_TRAIN_IMAGES = 20

# RNG stream ids; one per independent consumer so runs replay exactly.
STREAM_DATA = 10
STREAM_TEST_DATA = 11
STREAM_TASK = 100
STREAM_MODEL = 200
STREAM_BAYES = 300


# -- metrics ----------------------------------------------------------------------


@dataclass
class MetricsRow:
    experiment_id: str
    task_id: str
    step: int
    loss_kind: str
    loss: float
    psnr: float
    wall_ms: int = 0


METRIC_COLUMNS = tuple(f.name for f in fields(MetricsRow))


class MetricsWriter:
    """Append-only CSV writer with a single header and fixed column order."""

    def __init__(self, path, experiment_id: str, record_wall_clock: bool = False):
        self.path = path
        self.experiment_id = experiment_id
        self.record_wall_clock = record_wall_clock
        self._start = time.perf_counter()
        self.count = 0
        with open(path, "w", newline="") as fh:
            csv.writer(fh).writerow(METRIC_COLUMNS)

    def write(self, task_id, step, loss_kind, loss, psnr_value=float("nan")) -> MetricsRow:
        wall = int(round((time.perf_counter() - self._start) * 1000)) if self.record_wall_clock else 0
        row = MetricsRow(self.experiment_id, str(task_id), int(step), loss_kind, float(loss), float(psnr_value), wall)
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh).writerow(_format(row))
        self.count += 1
        return row


def _format(row: MetricsRow) -> list:
    # repr keeps every bit of a float64, so the file round-trips exactly
    return [repr(v) if isinstance(v, float) else str(v) for v in astuple(row)]


def read_metrics(path) -> list:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader))
        if header != METRIC_COLUMNS:
            raise ValueError(f"unexpected metrics header {header}")
        return [
            MetricsRow(r[0], r[1], int(r[2]), r[3], float(r[4]), float(r[5]), int(r[6]))
            for r in reader
        ]


# -- run bookkeeping ----------------------------------------------------------------


@dataclass
class RunResult:
    output_dir: str
    experiment_id: str
    report: dict = field(default_factory=dict)

    @property
    def metrics_path(self) -> str:
        return os.path.join(self.output_dir, "metrics.csv")


def _versions() -> dict:
    import pydantic
    import scipy

    return {
        "metainv": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "pydantic": pydantic.__version__,
        "platform": platform.platform(),
    }


class _Run:
    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.out = cfg.output_dir
        os.makedirs(self.out, exist_ok=True)
        digest = config_hash(cfg)
        self.experiment_id = f"{cfg.experiment}-{digest[:12]}"
        manifest = {
            "experiment_id": self.experiment_id,
            "config_hash": digest,
            "seed": cfg.seed,
            "versions": _versions(),
            "config": config_dict(cfg),
        }
        with open(os.path.join(self.out, "manifest.json"), "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
        self.metrics = MetricsWriter(os.path.join(self.out, "metrics.csv"), self.experiment_id, cfg.record_wall_clock)

    def path(self, *parts) -> str:
        p = os.path.join(self.out, *parts)
        os.makedirs(os.path.dirname(p), exist_ok=True)
        return p

    def dir(self, *parts) -> str:
        p = os.path.join(self.out, *parts)
        os.makedirs(p, exist_ok=True)
        return p

    def finish(self, report: dict) -> RunResult:
        report = dict(report, experiment_id=self.experiment_id, metrics_rows=self.metrics.count)
        with open(os.path.join(self.out, "report.json"), "w") as fh:
            json.dump(report, fh, indent=2, sort_keys=True, default=float)
        return RunResult(self.out, self.experiment_id, report)


def _load_array(path) -> np.ndarray:
    return np.load(path).astype(np.float64) if str(path).endswith(".npy") else read_image(path)


def _task_params(spec: TaskSection) -> dict:
    params = spec.model_dump(exclude_none=True, exclude={"kind", "name", "kernel_path", "mask_path"})
    if spec.kernel_path:
        params["kernel"] = _load_array(spec.kernel_path)
    if spec.mask_path:
        params["mask"] = (_load_array(spec.mask_path) > 0.5).astype(np.float64)
    return params


def _images(cfg: ExperimentConfig):
    """Train and test images from the data section (disjoint draws)."""
    d = cfg.data
    if d.source != "synthetic":
        n_files = len(list_images(d.source))
        if cfg.experiment == "train" and n_files < MIN_TRAIN_IMAGES:
            raise ValueError(f"dataset {d.source} has {n_files} images; training needs at least {MIN_TRAIN_IMAGES}")
    train = load_dataset(d.source, d.patch_size, d.n_train, make_rng(cfg.seed, STREAM_DATA))
    test = load_dataset(d.source, d.patch_size, d.n_test, make_rng(cfg.seed, STREAM_TEST_DATA))
    return train, test


def _build_tasks(cfg: ExperimentConfig, specs, train, test) -> list:
    tasks = []
    for i, spec in enumerate(specs):
        kinds = [s.kind for s in specs]
        name = spec.name or (spec.kind if kinds.count(spec.kind) == 1 else f"{spec.kind}-{i}")
        tasks.append(make_task(spec.kind, _task_params(spec), train, make_rng(cfg.seed, STREAM_TASK + i),
                               test_images=test, name=name))
    return tasks


def _inner_config(cfg: ExperimentConfig, steps: int, step_size: float) -> InnerConfig:
    s = cfg.inner
    return InnerConfig(
        mode=s.mode,
        steps=s.steps if s.steps is not None else steps,
        optimizer=s.optimizer,
        step_size=s.step_size if s.step_size is not None else step_size,
        reg_lambda=s.reg_lambda,
    )


# -- toy Gaussian experiment ----------------------------------------------------------


def toy_tasks(cfg: ExperimentConfig):
    """Gaussian prior, train tasks (masks in region A) and the region-B test task."""
    t = cfg.toy
    grid = (t.grid, t.grid)
    n = t.grid * t.grid
    prior = GaussianPrior(np.zeros(n), exponential_covariance(grid, t.length_scale))
    rng = make_rng(cfg.seed, STREAM_DATA)
    tr, tc = t.test_anchor
    m = t.mask_size

    def overlaps(r, c):
        return r < tr + m and tr < r + m and c < tc + m and tc < c + m

    anchors = [(r, c) for r in range(t.anchor_limit) for c in range(t.anchor_limit) if not overlaps(r, c)]
    if not anchors:
        raise ValueError("no training anchors left outside the test region")

    def sample(op, count):
        xs = sample_prior(prior, count, rng)
        return [Pair(x.reshape(grid), op.apply(x.reshape(grid))) for x in xs]

    tasks = []
    for a in anchors:
        op = square_mask_operator(grid, a, m)
        tasks.append(Task(f"mask@{a[0]},{a[1]}", op, train=sample(op, t.n_train), test=sample(op, t.n_test)))
    op = square_mask_operator(grid, (tr, tc), m)
    test_task = Task(f"mask@{tr},{tc}", op, train=sample(op, t.n_train), test=sample(op, t.n_test))
    return prior, tasks, test_task


def kernel_image_blocks(theta, prior: GaussianPrior, op):
    """(learned, analytic) blocks mapping observed pixels to hidden ones."""
    observed = op.meta["mask"].ravel() > 0
    hidden = ~observed
    analytic, _ = bayes_linear_map(prior, op)
    return theta[np.ix_(hidden, observed)], analytic[np.ix_(hidden, observed)]


def cosine(a, b) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.sum(a * b) / (na * nb))


def relative_error(a, b) -> float:
    nb = np.linalg.norm(b)
    return float(np.linalg.norm(a - b) / nb) if nb > 0 else float(np.linalg.norm(a))


def diagonal_block_check(cfg: ExperimentConfig) -> float:
    """Analytic kernel block under a diagonal covariance against the closed form
    (zero map, prediction equal to the prior mean on the hidden pixels)."""
    t = cfg.toy
    grid = (t.grid, t.grid)
    n = t.grid * t.grid
    rng = make_rng(cfg.seed, STREAM_BAYES)
    prior = GaussianPrior(rng.standard_normal(n), np.diag(rng.uniform(0.5, 2.0, n)))
    op = square_mask_operator(grid, t.test_anchor, t.mask_size)
    B, c = bayes_linear_map(prior, op)
    observed = op.meta["mask"].ravel() > 0
    hidden = ~observed
    err_block = np.abs(B[np.ix_(hidden, observed)]).max()
    err_offset = np.abs(c[hidden] - prior.mu[hidden]).max() / max(1.0, np.abs(prior.mu).max())
    return float(max(err_block, err_offset))


def run_toy(cfg: ExperimentConfig) -> RunResult:
    run = _Run(cfg)
    prior, tasks, test_task = toy_tasks(cfg)
    grid = (cfg.toy.grid, cfg.toy.grid)
    family = LinearFamily(grid, grid)
    inner = _inner_config(cfg, steps=20, step_size=1e-2)
    outer = OuterConfig(step_size=cfg.outer.step_size, epochs=cfg.outer.epochs, batch_size=cfg.outer.batch_size)

    def log_epoch(state, record):
        for i, task in enumerate(tasks):
            run.metrics.write(task.name, record["epoch"], "outer", record["outer_task_loss"][i])
            run.metrics.write(task.name, record["epoch"], "inner", record["inner_loss"][i])

    # zero start: at the identity the unsupervised inner gradient vanishes
    state = maml_train(family, tasks, inner, outer, seed=cfg.seed, theta_init=np.zeros(family.n_params),
                       record_psnr=False, callback=log_epoch)
    theta_star = family.theta(state.theta_star)
    phi_test, rows = fine_tune(family, state.theta_star, test_task, with_steps(inner, max(1, cfg.toy.finetune_steps)), steps=cfg.toy.finetune_steps)
    for r in rows:
        run.metrics.write(test_task.name, r["step"], f"finetune_{inner.mode}", r["loss"])
    theta_test = family.theta(phi_test)

    learned, analytic = zip(*(kernel_image_blocks(theta_star, prior, t.operator) for t in tasks))
    learned_test, analytic_test = kernel_image_blocks(theta_test, prior, test_task.operator)
    train_cos = [cosine(a, b) for a, b in zip(learned, analytic)]
    train_err = [relative_error(a, b) for a, b in zip(learned, analytic)]

    save_npy(run.path("theta_star.npy"), theta_star)
    save_npy(run.path("theta_test.npy"), theta_test)
    save_npy(run.path("covariance.npy"), prior.sigma)
    save_npy(run.path("learned_blocks_train.npy"), np.stack(learned))
    save_npy(run.path("analytic_blocks_train.npy"), np.stack(analytic))
    save_npy(run.path("learned_block_test.npy"), learned_test)
    save_npy(run.path("analytic_block_test.npy"), analytic_test)
    save_npy(run.path("train_masks.npy"), np.stack([t.operator.meta["mask"] for t in tasks]))
    save_npy(run.path("test_mask.npy"), test_task.operator.meta["mask"])

    return run.finish({
        "train_tasks": [t.name for t in tasks],
        "train_cosine": train_cos,
        "train_cosine_mean": float(np.mean(train_cos)),
        "train_relative_error": train_err,
        "test_cosine": cosine(learned_test, analytic_test),
        "test_relative_error": relative_error(learned_test, analytic_test),
        "diagonal_block_error": diagonal_block_check(cfg),
        "final_outer_loss": state.history[-1]["outer_loss"] if state.history else float("nan"),
    })


# -- multi-task training ---------------------------------------------------------------


def _make_family(cfg: ExperimentConfig, tasks):
    m = cfg.model
    if m.family == "linear":
        shape = tasks[0].operator.in_shape
        outs = {t.operator.out_shape for t in tasks}
        if len(outs) != 1:
            raise ValueError("a linear model needs all tasks to share one measurement shape")
        return LinearFamily(shape, outs.pop())
    if m.tau is None or m.gamma is None:
        step = default_step([t.operator for t in tasks])
    return PDNetFamily(m.n_layers, m.n_channels,
                       m.tau if m.tau is not None else step,
                       m.gamma if m.gamma is not None else step)


def _init_params(cfg: ExperimentConfig, family):
    if isinstance(family, PDNetFamily):
        return family.init(make_rng(cfg.seed, STREAM_MODEL), cfg.model.lambda_init)
    return family.identity()


def run_train(cfg: ExperimentConfig) -> RunResult:
    run = _Run(cfg)
    train, test = _images(cfg)
    tasks = _build_tasks(cfg, cfg.tasks, train, test)
    family = _make_family(cfg, tasks)
    inner = _inner_config(cfg, steps=1, step_size=1e-3)
    outer = OuterConfig(step_size=cfg.outer.step_size, epochs=cfg.outer.epochs, batch_size=cfg.outer.batch_size)

    def log_epoch(state, record):
        e = record["epoch"]
        for i, task in enumerate(tasks):
            run.metrics.write(task.name, e, "meta", record["meta_loss"][i], record["meta_psnr"][i])
            run.metrics.write(task.name, e, "inner", record["outer_task_loss"][i], record["inner_psnr"][i])
        if cfg.checkpoint_every and (e + 1) % cfg.checkpoint_every == 0:
            save_checkpoint(run.dir("checkpoints", f"epoch_{e + 1:05d}"), family, state.theta_star,
                            {"epoch": e + 1})

    state = maml_train(family, tasks, inner, outer, seed=cfg.seed, theta_init=_init_params(cfg, family),
                       callback=log_epoch)
    ckpt = os.path.join(run.out, "checkpoint")
    save_checkpoint(ckpt, family, state.theta_star, {"epoch": state.epoch, "experiment_id": run.experiment_id})
    last = state.history[-1] if state.history else None
    return run.finish({
        "checkpoint": ckpt,
        "epochs": state.epoch,
        "tasks": [t.name for t in tasks],
        "final_meta_psnr": {t.name: last["meta_psnr"][i] for i, t in enumerate(tasks)} if last else {},
        "final_inner_psnr": {t.name: last["inner_psnr"][i] for i, t in enumerate(tasks)} if last else {},
        "final_outer_loss": last["outer_loss"] if last else float("nan"),
    })


# -- fine-tuning and evaluation ---------------------------------------------------------


def _checked_family(cfg: ExperimentConfig, tasks):
    family, phi, manifest = load_checkpoint(cfg.finetune.checkpoint)
    if isinstance(family, LinearFamily):
        for t in tasks:
            if tuple(family.image_shape) != t.operator.in_shape or tuple(family.meas_shape) != t.operator.out_shape:
                raise ValueError(
                    f"checkpoint/model mismatch: linear model maps {family.meas_shape} -> {family.image_shape}, "
                    f"task {t.name!r} needs {t.operator.out_shape} -> {t.operator.in_shape}"
                )
    return family, phi


def _mean(values) -> float:
    return float(np.mean(values))


def run_finetune(cfg: ExperimentConfig) -> RunResult:
    run = _Run(cfg)
    train, test = _images(cfg)
    f = cfg.finetune
    (task,) = _build_tasks(cfg, [f.task], train, test)
    family, theta_star = _checked_family(cfg, [task])
    icfg = InnerConfig(mode=f.mode, steps=max(1, f.steps), optimizer=f.optimizer,
                       step_size=f.step_size, reg_lambda=f.reg_lambda)
    phi, rows = fine_tune(family, theta_star, task, icfg, steps=f.steps)
    for r in rows:
        run.metrics.write(task.name, r["step"], f"finetune_{f.mode}", r["loss"], r["psnr"])

    op = task.operator
    recon = {
        "meta": [family.predict(theta_star, y, op) for _, y in task.test],
        "finetuned": [family.predict(phi, y, op) for _, y in task.test],
        "adjoint": [op.adjoint(y) for _, y in task.test],
        "pinv": [pinv_apply(op, y) for _, y in task.test],
    }
    targets = [x for x, _ in task.test]
    summary = {}
    for name, images in recon.items():
        loss = sum(0.5 * float(np.sum((r - x) ** 2)) for r, x in zip(images, targets))
        mean = _mean([psnr(r, x) for r, x in zip(images, targets)])
        summary[name] = {"sup_loss": loss, "psnr": mean}
        if name in ("adjoint", "pinv"):
            run.metrics.write(task.name, 0, f"baseline_{name}", loss, mean)
        save_npy(run.path("recon", f"{name}.npy"), np.stack(images))
        write_image(run.path("recon", f"{name}_0.png"), images[0])
    save_npy(run.path("recon", "target.npy"), np.stack(targets))
    write_image(run.path("recon", "target_0.png"), targets[0])
    save_checkpoint(run.dir("finetuned"), family, phi, {"finetuned_from": os.path.abspath(f.checkpoint)})

    return run.finish({
        "task": task.name,
        "mode": f.mode,
        "steps": f.steps,
        "loss_step0": rows[0]["loss"],
        "loss_final": rows[-1]["loss"],
        "psnr_step0": rows[0]["psnr"],
        "psnr_final": rows[-1]["psnr"],
        "reconstructions": summary,
    })


def run_eval(cfg: ExperimentConfig) -> RunResult:
    run = _Run(cfg)
    train, test = _images(cfg)
    tasks = _build_tasks(cfg, cfg.tasks, train, test)
    family, phi = _checked_family(cfg, tasks)
    out = {}
    for task in tasks:
        loss = sup_loss(bind(family, phi), task)
        value = mean_psnr(family, phi, task)
        run.metrics.write(task.name, 0, "eval", loss, value)
        out[task.name] = {"sup_loss": loss, "psnr": value}
    return run.finish({"tasks": out})


# -- Bayes estimator consistency ---------------------------------------------------------


def _random_prior(n: int, rng, diagonal: bool = False) -> GaussianPrior:
    mu = rng.standard_normal(n)
    if diagonal:
        return GaussianPrior(mu, np.diag(rng.uniform(0.2, 2.0, n)))
    b = rng.standard_normal((n, n))
    return GaussianPrior(mu, b @ b.T / n + 0.1 * np.eye(n))


def _random_operator(i: int, shape, rng):
    if i % 2 and all(s % 2 == 0 for s in shape):
        return make_decimation(2, shape)
    mask = (rng.random(shape) < 0.5).astype(np.float64)
    mask.flat[rng.integers(mask.size)] = 1.0  # keep at least one sample
    return make_mask(mask)


def _rel(a, b) -> float:
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


def run_bayes_check(cfg: ExperimentConfig) -> RunResult:
    run = _Run(cfg)
    b = cfg.bayes_check
    shape = (b.side, b.side)
    n = b.side * b.side
    rng = make_rng(cfg.seed, STREAM_BAYES)

    def instance(prior, op):
        x = sample_prior(prior, 1, rng)[0].reshape(shape)
        y = op.apply(x)
        return bayes_estimate(prior, op, y), gaussian_condition_oracle(prior, op, y)

    errors = []
    for i in range(b.instances):
        op = _random_operator(i, shape, rng)
        est, ref = instance(_random_prior(n, rng), op)
        errors.append(_rel(est, ref))
        run.metrics.write(f"{op.kind}-{i}", i, "bayes_vs_oracle", errors[-1])

    identity_errors = []
    for i in range(b.identity_instances):
        est, ref = instance(_random_prior(n, rng), make_identity(shape))
        identity_errors.append(_rel(est, ref))
        run.metrics.write(f"identity-{i}", i, "bayes_vs_oracle", identity_errors[-1])

    kernel_errors = []
    for i in range(b.diagonal_instances):
        op = _random_operator(i, shape, rng)
        prior = _random_prior(n, rng, diagonal=True)
        est, _ = instance(prior, op)
        proj = kernel_projector(op)
        gap = proj @ (est.ravel() - prior.mu)
        kernel_errors.append(float(np.abs(gap).max()))
        run.metrics.write(f"diagonal-{op.kind}-{i}", i, "kernel_minus_mean", kernel_errors[-1])

    max_err = max(errors, default=0.0)
    report = {
        "max_relative_error": max_err,
        "tolerance": b.tolerance,
        "max_identity_error": max(identity_errors, default=0.0),
        "max_diagonal_kernel_error": max(kernel_errors, default=0.0),
        "passed": bool(max_err <= b.tolerance and max(identity_errors, default=0.0) <= 1e-12
                       and max(kernel_errors, default=0.0) <= 1e-12),
    }
    return run.finish(report)


RUNNERS = {
    "toy": run_toy,
    "train": run_train,
    "finetune": run_finetune,
    "eval": run_eval,
    "bayes-check": run_bayes_check,
}


def run_experiment(cfg: ExperimentConfig) -> RunResult:
    return RUNNERS[cfg.experiment](cfg)


__all__ = [
    "METRIC_COLUMNS",
    "MetricsRow",
    "MetricsWriter",
    "RunResult",
    "read_metrics",
    "run_bayes_check",
    "run_eval",
    "run_experiment",
    "run_finetune",
    "run_toy",
    "run_train",
    "toy_tasks",
    "kernel_image_blocks",
    "cosine",
]
