"""Gaussian priors and the noiseless Bayes estimator for linear measurements.

Two independent routes to ``E[x | A x = y]`` are provided:

* :func:`bayes_estimate` splits the signal space into ``Im(A^T)`` and
  ``Ker(A)`` and regresses the kernel coordinates on the pseudo-inverse
  reconstruction;
* :func:`gaussian_condition_oracle` conditions the joint Gaussian of
  ``(x, A x)`` directly.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .operators import LinearOp, make_mask, pinv_apply

SYM_TOL = 1e-12
PSD_TOL = 1e-10
RIDGE = 1e-12
RANGE_RTOL = 1e-8


@dataclass(frozen=True)
class GaussianPrior:
    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=np.float64).reshape(-1)
        sigma = np.asarray(self.sigma, dtype=np.float64)
        if sigma.shape != (mu.size, mu.size):
            raise ValueError(f"covariance shape {sigma.shape} does not match mean of size {mu.size}")
        if np.abs(sigma - sigma.T).max(initial=0.0) > SYM_TOL:
            raise ValueError("covariance is not symmetric")
        if mu.size and np.linalg.eigvalsh(sigma).min() < -PSD_TOL:
            raise ValueError("covariance is not positive semi-definite")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", sigma)

    @property
    def dim(self) -> int:
        return self.mu.size


@dataclass(frozen=True)
class SubspaceBases:
    """Orthonormal bases of ``Im(A^T)`` (``v_im``) and ``Ker(A)`` (``v_ker``)."""

    v_im: np.ndarray
    v_ker: np.ndarray


def exponential_covariance(grid_shape, length_scale: float) -> np.ndarray:
    """``Sigma_ij = exp(-|p_i - p_j| / length_scale)`` over pixel positions."""
    coords = np.stack(np.meshgrid(*[np.arange(s) for s in grid_shape], indexing="ij"), -1)
    coords = coords.reshape(-1, len(grid_shape)).astype(np.float64)
    dist = np.sqrt(((coords[:, None, :] - coords[None, :, :]) ** 2).sum(-1))
    if length_scale <= 0:
        return np.eye(len(coords))
    return np.exp(-dist / length_scale)


def sample_prior(prior: GaussianPrior, count: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``count`` samples, returned as rows of a ``(count, n)`` array."""
    n = prior.dim
    sigma = prior.sigma
    try:
        chol = np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError:
        jitter = 1e-10 * max(np.trace(sigma), 1e-300) / n
        try:
            chol = np.linalg.cholesky(sigma + jitter * np.eye(n))
        except np.linalg.LinAlgError as exc:
            raise ValueError("covariance is not positive semi-definite") from exc
    z = rng.standard_normal((count, n))
    return prior.mu + z @ chol.T


def subspace_bases(op: LinearOp) -> SubspaceBases:
    """SVD-derived orthonormal bases of ``Im(A^T)`` and ``Ker(A)``."""
    if op.kind == "mask":
        m = op.meta["mask"].reshape(-1)
        eye = np.eye(m.size)
        return SubspaceBases(eye[:, m == 1.0], eye[:, m == 0.0])
    _, _, vt, r = op.svd
    return SubspaceBases(vt[:r].T.copy(), vt[r:].T.copy())


def _check_in_range(op: LinearOp, y: np.ndarray, x_pinv: np.ndarray):
    resid = np.linalg.norm(op.apply(x_pinv) - y)
    if resid > RANGE_RTOL * max(np.linalg.norm(y), 1e-300):
        raise ValueError(f"measurement is outside Im(A): residual {resid:.3e}")


def bayes_estimate(prior: GaussianPrior, op: LinearOp, y, bases: SubspaceBases | None = None) -> np.ndarray:
    """Posterior mean of ``x ~ N(mu, Sigma)`` given noiseless ``y = A x``.

    The component on ``Im(A^T)`` is ``A^+ y``; the kernel component is the
    Gaussian regression of kernel coordinates on image coordinates.
    """
    y = np.asarray(y, dtype=np.float64)
    x_pinv = pinv_apply(op, y).reshape(-1)
    _check_in_range(op, y, x_pinv.reshape(op.in_shape))
    if bases is None:
        bases = subspace_bases(op)
    v_im, v_ker = bases.v_im, bases.v_ker
    x_im = v_im.T @ x_pinv
    if v_ker.shape[1] == 0:
        return (v_im @ x_im).reshape(op.in_shape)
    mu, sigma = prior.mu, prior.sigma
    mu_im, mu_ker = v_im.T @ mu, v_ker.T @ mu
    if v_im.shape[1] == 0:
        return (v_ker @ mu_ker).reshape(op.in_shape)
    s_im = v_im.T @ sigma @ v_im
    s_ker_im = v_ker.T @ sigma @ v_im
    try:
        # cond() guards the ridge; np.linalg.solve alone does not flag near-singular blocks
        if np.linalg.cond(s_im) > 1e14:
            raise np.linalg.LinAlgError
        coef = np.linalg.solve(s_im, x_im - mu_im)
    except np.linalg.LinAlgError:
        ridge = RIDGE * max(np.trace(s_im), 1e-300)
        coef = np.linalg.solve(s_im + ridge * np.eye(s_im.shape[0]), x_im - mu_im)
    x_ker = mu_ker + s_ker_im @ coef
    return (v_im @ x_im + v_ker @ x_ker).reshape(op.in_shape)


def gaussian_condition_oracle(prior: GaussianPrior, op: LinearOp, y) -> np.ndarray:
    """``mu + Sigma A^T (A Sigma A^T)^+ (y - A mu)`` with dense matrices."""
    y = np.asarray(y, dtype=np.float64)
    a = op.matrix
    _check_in_range(op, y, pinv_apply(op, y))
    mu, sigma = prior.mu, prior.sigma
    s_xy = sigma @ a.T
    s_yy = a @ sigma @ a.T
    gain = s_xy @ np.linalg.pinv(s_yy, rcond=1e-12, hermitian=True)
    return (mu + gain @ (y.reshape(-1) - a @ mu)).reshape(op.in_shape)


def bayes_linear_map(prior: GaussianPrior, op: LinearOp) -> tuple[np.ndarray, np.ndarray]:
    """Affine form ``x_hat = B y + c`` of :func:`bayes_estimate`.

    ``B`` has shape ``(n, m)``; for mask operators this is the matrix a
    linear reconstruction model should learn when ``mu = 0``.
    """
    bases = subspace_bases(op)
    v_im, v_ker = bases.v_im, bases.v_ker
    # A^+ as a dense matrix
    if op.kind in ("identity", "mask", "decimate"):
        pinv = op.matrix.T
    else:
        u, s, vt, r = op.svd
        pinv = vt[:r].T @ (u.T / s[:, None])
    p_im = v_im.T @ pinv
    mu = prior.mu
    if v_ker.shape[1] == 0 or v_im.shape[1] == 0:
        b = v_im @ p_im
        return b, v_ker @ (v_ker.T @ mu)
    s_im = v_im.T @ prior.sigma @ v_im
    reg = v_ker.T @ prior.sigma @ v_im @ np.linalg.pinv(s_im, rcond=1e-12, hermitian=True)
    b = v_im @ p_im + v_ker @ reg @ p_im
    c = v_ker @ (v_ker.T @ mu - reg @ (v_im.T @ mu))
    return b, c


def square_mask_operator(grid_shape, anchor, size: int) -> LinearOp:
    """Mask hiding a ``size`` x ``size`` square whose top-left corner is ``anchor``."""
    mask = np.ones(grid_shape)
    r, c = anchor
    mask[r : r + size, c : c + size] = 0.0
    return make_mask(mask)
