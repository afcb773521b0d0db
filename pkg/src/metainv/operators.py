"""Linear measurement operators, kernel projectors, pseudo-inverses,
the TV proximal map and task construction.

Every operator maps real ``float64`` arrays of ``in_shape`` to arrays of
``out_shape``. Complex Fourier data is carried as a leading axis of size 2
(real, imaginary) so the whole stack stays in real arithmetic.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, NamedTuple, Sequence

import numpy as np

MAX_DENSE_SIZE = 4096
RANK_RTOL = 1e-10

KINDS = ("identity", "mask", "conv", "decimate", "fourier-mask", "dense")


class LinearOp:
    """A linear map with an exact adjoint.

    Instances are treated as immutable; dense materializations and SVDs are
    cached on first use.
    """

    def __init__(
        self,
        in_shape: Sequence[int],
        out_shape: Sequence[int],
        apply: Callable[[np.ndarray], np.ndarray],
        adjoint: Callable[[np.ndarray], np.ndarray],
        kind: str,
        **meta,
    ):
        if kind not in KINDS:
            raise ValueError(f"unknown operator kind {kind!r}")
        self.in_shape = tuple(int(s) for s in in_shape)
        self.out_shape = tuple(int(s) for s in out_shape)
        self._apply = apply
        self._adjoint = adjoint
        self.kind = kind
        self.meta = meta

    def __repr__(self):
        return f"LinearOp(kind={self.kind!r}, in_shape={self.in_shape}, out_shape={self.out_shape})"

    @property
    def in_size(self) -> int:
        return int(np.prod(self.in_shape))

    @property
    def out_size(self) -> int:
        return int(np.prod(self.out_shape))

    def apply(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape != self.in_shape:
            raise ValueError(f"{self.kind}: expected input shape {self.in_shape}, got {x.shape}")
        return self._apply(x)

    def adjoint(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=np.float64)
        if u.shape != self.out_shape:
            raise ValueError(f"{self.kind}: expected output shape {self.out_shape}, got {u.shape}")
        return self._adjoint(u)

    __call__ = apply

    def gram(self, x) -> np.ndarray:
        """``A^T A x``."""
        return self.adjoint(self.apply(x))

    @cached_property
    def matrix(self) -> np.ndarray:
        """Dense ``(out_size, in_size)`` matrix of the operator."""
        n = self.in_size
        if n > MAX_DENSE_SIZE or self.out_size > 2 * MAX_DENSE_SIZE:
            raise ValueError(
                f"operator with {n} inputs is too large to materialize densely "
                f"(limit {MAX_DENSE_SIZE}); use a mask operator for the analytic fast path"
            )
        cols = np.empty((self.out_size, n))
        e = np.zeros(n)
        for j in range(n):
            e[j] = 1.0
            cols[:, j] = self._apply(e.reshape(self.in_shape)).reshape(-1)
            e[j] = 0.0
        return cols

    @cached_property
    def svd(self):
        """Thin SVD ``(U_r, s_r, Vt_full, r)`` with the relative rank cutoff applied."""
        mat = self.matrix
        u, s, vt = np.linalg.svd(mat, full_matrices=True)
        r = int(np.sum(s > RANK_RTOL * s[0])) if s.size and s[0] > 0 else 0
        return u[:, :r], s[:r], vt, r

    @property
    def rank(self) -> int:
        if self.kind == "mask":
            return int(self.meta["mask"].sum())
        return self.svd[3]


def make_identity(shape) -> LinearOp:
    shape = (int(shape),) if np.isscalar(shape) else tuple(int(s) for s in shape)
    return LinearOp(shape, shape, lambda x: x.copy(), lambda u: u.copy(), "identity")


def make_dense(matrix, in_shape=None, out_shape=None) -> LinearOp:
    mat = np.array(matrix, dtype=np.float64)
    if mat.ndim != 2:
        raise ValueError("dense operator needs a 2-D matrix")
    in_shape = (mat.shape[1],) if in_shape is None else tuple(in_shape)
    out_shape = (mat.shape[0],) if out_shape is None else tuple(out_shape)
    if int(np.prod(in_shape)) != mat.shape[1] or int(np.prod(out_shape)) != mat.shape[0]:
        raise ValueError("shapes inconsistent with matrix")

    def apply(x):
        return (mat @ x.reshape(-1)).reshape(out_shape)

    def adjoint(u):
        return (mat.T @ u.reshape(-1)).reshape(in_shape)

    op = LinearOp(in_shape, out_shape, apply, adjoint, "dense", dense=mat)
    op.__dict__["matrix"] = mat
    return op


def _check_binary(mask) -> np.ndarray:
    mask = np.asarray(mask, dtype=np.float64)
    if not np.all((mask == 0.0) | (mask == 1.0)):
        raise ValueError("mask entries must be 0 or 1")
    return mask


def make_mask(mask, shape=None) -> LinearOp:
    """Elementwise binary mask ``y = M * x`` (self-adjoint projection)."""
    mask = _check_binary(mask)
    if shape is not None and tuple(shape) != mask.shape:
        raise ValueError(f"mask shape {mask.shape} differs from {tuple(shape)}")
    mask = mask.copy()
    mask.setflags(write=False)
    fn = lambda x: x * mask  # noqa: E731
    return LinearOp(mask.shape, mask.shape, fn, fn, "mask", mask=mask)


def make_conv(kernel, image_shape, mode: str = "circular") -> LinearOp:
    """Circular 2-D convolution with an odd-sized kernel."""
    if mode != "circular":
        raise ValueError("only circular boundary handling is supported")
    kernel = np.asarray(kernel, dtype=np.float64)
    if kernel.ndim != 2 or kernel.shape[0] % 2 == 0 or kernel.shape[1] % 2 == 0:
        raise ValueError(f"kernel must be 2-D with odd sizes, got {kernel.shape}")
    image_shape = tuple(image_shape)
    if kernel.shape[0] > image_shape[0] or kernel.shape[1] > image_shape[1]:
        raise ValueError("kernel larger than image")
    ci, cj = kernel.shape[0] // 2, kernel.shape[1] // 2
    taps = [
        (kernel[a, b], (a - ci, b - cj))
        for a in range(kernel.shape[0])
        for b in range(kernel.shape[1])
        if kernel[a, b] != 0.0
    ]

    def apply(x):
        out = np.zeros_like(x)
        for w, s in taps:
            out += w * np.roll(x, s, axis=(0, 1))
        return out

    def adjoint(u):
        out = np.zeros_like(u)
        for w, (si, sj) in taps:
            out += w * np.roll(u, (-si, -sj), axis=(0, 1))
        return out

    return LinearOp(image_shape, image_shape, apply, adjoint, "conv", kernel=kernel.copy())


def make_decimation(factor: int, image_shape) -> LinearOp:
    """Keep every ``factor``-th sample along each axis; adjoint zero-upsamples."""
    factor = int(factor)
    if factor < 2:
        raise ValueError("decimation factor must be >= 2")
    image_shape = tuple(image_shape)
    if any(s % factor for s in image_shape):
        raise ValueError(f"image shape {image_shape} not divisible by {factor}")
    sl = tuple(slice(None, None, factor) for _ in image_shape)
    small = tuple(s // factor for s in image_shape)

    def apply(x):
        return x[sl].copy()

    def adjoint(u):
        out = np.zeros(image_shape)
        out[sl] = u
        return out

    return LinearOp(image_shape, small, apply, adjoint, "decimate", factor=factor)


def make_fourier_mask(mask) -> LinearOp:
    """Unitary 2-D DFT followed by frequency masking, output as (re, im) channels."""
    mask = _check_binary(mask)
    if mask.ndim != 2:
        raise ValueError("frequency mask must be 2-D")
    mask = mask.copy()
    mask.setflags(write=False)
    shape = mask.shape

    def apply(x):
        k = np.fft.fft2(x, norm="ortho") * mask
        return np.stack([k.real, k.imag])

    def adjoint(u):
        k = (u[0] + 1j * u[1]) * mask
        return np.fft.ifft2(k, norm="ortho").real

    return LinearOp(shape, (2,) + shape, apply, adjoint, "fourier-mask", mask=mask)


def kernel_projector(op: LinearOp) -> np.ndarray:
    """Dense orthogonal projector onto ``Ker(A)``, shape ``(n, n)``."""
    if op.kind == "mask":
        return np.diag(1.0 - op.meta["mask"].reshape(-1))
    if op.kind == "identity":
        return np.zeros((op.in_size, op.in_size))
    _, _, vt, r = op.svd
    v_ker = vt[r:].T
    return v_ker @ v_ker.T


def pinv_apply(op: LinearOp, y) -> np.ndarray:
    """Moore-Penrose pseudo-inverse applied to ``y``."""
    y = np.asarray(y, dtype=np.float64)
    if y.shape != op.out_shape:
        raise ValueError(f"expected measurement shape {op.out_shape}, got {y.shape}")
    if op.kind in ("identity", "mask", "decimate"):
        return op.adjoint(y)
    if op.kind == "fourier-mask" and np.all(op.meta["mask"] == 1.0):
        return op.adjoint(y)
    u, s, vt, r = op.svd
    coef = (u.T @ y.reshape(-1)) / s
    return (vt[:r].T @ coef).reshape(op.in_shape)


# -- total variation -------------------------------------------------------


def _grad(x):
    g = np.zeros((2,) + x.shape)
    g[0, :-1] = x[1:] - x[:-1]
    g[1, :, :-1] = x[:, 1:] - x[:, :-1]
    return g


def _grad_adjoint(p):
    # exact transpose of _grad (negative divergence)
    out = np.zeros(p.shape[1:])
    out[:-1] -= p[0, :-1]
    out[1:] += p[0, :-1]
    out[:, :-1] -= p[1, :, :-1]
    out[:, 1:] += p[1, :, :-1]
    return out


def total_variation(x) -> float:
    """Isotropic discrete TV with forward differences and Neumann boundary."""
    g = _grad(np.asarray(x, dtype=np.float64))
    return float(np.sum(np.sqrt(g[0] ** 2 + g[1] ** 2)))


def _project_unit_ball(p):
    norm = np.sqrt(p[0] ** 2 + p[1] ** 2)
    return p / np.maximum(norm, 1.0)


def tv_prox(y, strength: float, tol: float = 1e-6, max_iter: int = 500, return_dual: bool = False):
    """Proximal map of ``strength * TV`` for a 2-D image.

    Solved on the dual (fast gradient projection): the primal solution is
    ``y - strength * grad^T p`` with ``|p_ij| <= 1``.
    """
    if strength < 0:
        raise ValueError("TV strength must be non-negative")
    if not tol > 0:
        raise ValueError("tol must be positive")
    y = np.asarray(y, dtype=np.float64)
    if y.ndim != 2:
        raise ValueError("tv_prox expects a 2-D image")
    if strength == 0:
        return (y.copy(), np.zeros((2,) + y.shape)) if return_dual else y.copy()
    step = 1.0 / (8.0 * strength)
    p = np.zeros((2,) + y.shape)
    q = p.copy()
    t = 1.0
    for _ in range(max_iter):
        x = y - strength * _grad_adjoint(q)
        p_new = _project_unit_ball(q + step * _grad(x))
        t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        q = p_new + ((t - 1.0) / t_new) * (p_new - p)
        delta = np.linalg.norm(p_new - p)
        ref = max(np.linalg.norm(p_new), 1e-12)
        p, t = p_new, t_new
        if delta / ref < tol:
            break
    x = y - strength * _grad_adjoint(p)
    return (x, p) if return_dual else x


def tv_duality_gap(y, x, p, strength: float) -> float:
    """Primal-dual gap of the TV prox problem at primal ``x`` and dual ``p``."""
    primal = strength * total_variation(x) + 0.5 * np.sum((x - y) ** 2)
    r = y - strength * _grad_adjoint(p)
    dual = 0.5 * np.sum(y**2) - 0.5 * np.sum(r**2)
    return float(primal - dual)


# -- tasks -------------------------------------------------------------------


class Pair(NamedTuple):
    x: np.ndarray
    y: np.ndarray


@dataclass
class Task:
    """An inverse problem with paired train/test data."""

    name: str
    operator: LinearOp
    noise_sigma: float = 0.0
    target_transform: str = "identity"
    train: list = field(default_factory=list)
    test: list = field(default_factory=list)

    def split(self, which: str) -> list:
        if which not in ("train", "test"):
            raise ValueError(f"unknown split {which!r}")
        data = self.train if which == "train" else self.test
        if not data:
            raise ValueError(f"task {self.name!r} has an empty {which} split")
        return data


TASK_KINDS = ("T1", "T2", "T3", "T4", "SR", "MRI")


def motion_kernel(size: int = 5) -> np.ndarray:
    """Normalized diagonal line kernel, a simple stand-in for motion blur."""
    k = np.eye(size)
    return k / k.sum()


def random_mask(shape, drop_rate: float, rng: np.random.Generator) -> np.ndarray:
    return (rng.random(shape) >= drop_rate).astype(np.float64)


def mri_mask(shape, acceleration: int, rng: np.random.Generator, center_fraction: float = 0.08) -> np.ndarray:
    """Column undersampling mask keeping the low frequencies plus random lines."""
    h, w = shape
    n_keep = max(1, w // int(acceleration))
    n_center = max(1, int(round(w * center_fraction)))
    freqs = np.fft.fftfreq(w)
    order = np.argsort(np.abs(freqs), kind="stable")
    keep = set(order[:n_center].tolist())
    rest = np.array(sorted(set(range(w)) - keep))
    extra = rng.choice(rest, size=max(0, n_keep - len(keep)), replace=False)
    keep.update(int(c) for c in extra)
    mask = np.zeros(shape)
    mask[:, sorted(keep)] = 1.0
    return mask


def _require(params: dict, *keys):
    missing = [k for k in keys if k not in params]
    if missing:
        raise ValueError(f"missing task parameter(s): {', '.join(missing)}")


def make_operator(kind: str, params: dict, image_shape, rng: np.random.Generator) -> LinearOp:
    """Build the measurement operator of a task kind."""
    if kind in ("T1", "T2"):
        return make_identity(tuple(image_shape))
    if kind == "T3":
        kernel = params.get("kernel")
        if kernel is None:
            _require(params, "kernel_size")
            kernel = motion_kernel(int(params["kernel_size"]))
        return make_conv(kernel, image_shape)
    if kind == "T4":
        mask = params.get("mask")
        if mask is None:
            _require(params, "drop_rate")
            mask = random_mask(image_shape, float(params["drop_rate"]), rng)
        return make_mask(mask)
    if kind == "SR":
        _require(params, "factor")
        return make_decimation(int(params["factor"]), image_shape)
    if kind == "MRI":
        mask = params.get("mask")
        if mask is None:
            _require(params, "acceleration")
            mask = mri_mask(image_shape, int(params["acceleration"]), rng)
        return make_fourier_mask(mask)
    raise ValueError(f"unknown task kind {kind!r}; expected one of {TASK_KINDS}")


def make_task(kind: str, params: dict, images, rng: np.random.Generator, test_images=None, name=None) -> Task:
    """Generate a task and its (x, y) pairs.

    When ``test_images`` is omitted the last quarter of ``images`` (at least
    one) is held out for the test split.
    """
    if kind not in TASK_KINDS:
        raise ValueError(f"unknown task kind {kind!r}; expected one of {TASK_KINDS}")
    params = dict(params or {})
    images = [np.asarray(im, dtype=np.float64) for im in images]
    if not images:
        raise ValueError("no images given")
    if test_images is None:
        if len(images) == 1:
            train_images, test_images = images, images
        else:
            n_test = max(1, len(images) // 4)
            train_images, test_images = images[:-n_test], images[-n_test:]
    else:
        train_images = images
        test_images = [np.asarray(im, dtype=np.float64) for im in test_images]
    shape = images[0].shape
    if kind == "T1":
        _require(params, "sigma")
    if kind == "T2":
        _require(params, "strength")
    op = make_operator(kind, params, shape, rng)
    sigma = float(params.get("sigma", 0.0)) if kind == "T1" else 0.0

    def pairs(ims):
        out = []
        for im in ims:
            if im.shape != shape:
                raise ValueError("all images of a task must share one shape")
            if kind == "T2":
                out.append(Pair(tv_prox(im, float(params["strength"])), im.copy()))
                continue
            y = op.apply(im)
            if sigma > 0:
                y = y + sigma * rng.standard_normal(y.shape)
            out.append(Pair(im.copy(), y))
        return out

    return Task(
        name=name or kind,
        operator=op,
        noise_sigma=sigma,
        target_transform="tv-prox" if kind == "T2" else "identity",
        train=pairs(train_images),
        test=pairs(test_images),
    )
