"""Reconstruction models: a linear map ``x = theta @ y`` and PDNet, an
unrolled primal-dual network with per-layer 3x3 analysis filters.

Both families expose the same small surface used by the bilevel code:
``predict``, ``loss_and_grad`` and ``hvp`` on a flat parameter vector.
PDNet gradients are hand-written reverse mode; Hessian-vector products
propagate forward tangents through the forward and reverse sweeps.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .numerics import load_npy, make_rng, save_npy
from .operators import LinearOp

LAYOUT_VERSION = 1
DEFAULT_CHANNELS = 40


# -- linear model -------------------------------------------------------------


@dataclass
class LinearModel:
    theta: np.ndarray

    def __call__(self, y):
        return linear_forward(self, y)


def linear_forward(model: LinearModel, y) -> np.ndarray:
    theta = np.asarray(model.theta, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if theta.ndim != 2 or theta.shape[1] != y.size:
        raise ValueError(f"theta of shape {theta.shape} cannot act on measurement of size {y.size}")
    return theta @ y.reshape(-1)


def linear_loss_grads(theta, theta_star, op: LinearOp, x, y, mode: str, reg_lambda: float = 0.0) -> np.ndarray:
    """Gradient in ``theta`` of one pair's inner objective.

    ``unsup``: 1/2 |A theta y - y|^2 + reg/2 |theta - theta*|^2
    ``sup``:   1/2 |theta y - x|^2   + reg/2 |theta - theta*|^2
    """
    theta = np.asarray(theta, dtype=np.float64)
    theta_star = np.asarray(theta_star, dtype=np.float64)
    yv = np.asarray(y, dtype=np.float64).reshape(-1)
    xv = np.asarray(x, dtype=np.float64).reshape(-1)
    if theta.shape != (op.in_size, yv.size) or theta_star.shape != theta.shape:
        raise ValueError(f"theta must have shape {(op.in_size, yv.size)}")
    if yv.size != op.out_size:
        raise ValueError("measurement size does not match operator")
    pred = theta @ yv
    if mode == "unsup":
        resid = op.apply(pred.reshape(op.in_shape)) - yv.reshape(op.out_shape)
        back = op.adjoint(resid).reshape(-1)
    elif mode == "sup":
        if xv.size != op.in_size:
            raise ValueError("target size does not match operator input")
        back = pred - xv
    else:
        raise ValueError(f"unknown loss mode {mode!r}")
    return np.outer(back, yv) + reg_lambda * (theta - theta_star)


class LinearFamily:
    """Flat-parameter adapter for :class:`LinearModel`."""

    kind = "linear"

    def __init__(self, image_shape, meas_shape):
        self.image_shape = tuple(image_shape)
        self.meas_shape = tuple(meas_shape)
        self.n = int(np.prod(self.image_shape))
        self.m = int(np.prod(self.meas_shape))
        self.n_params = self.n * self.m
        self._cache = {}

    def theta(self, phi) -> np.ndarray:
        return np.asarray(phi).reshape(self.n, self.m)

    def init(self, rng=None, scale: float = 0.0) -> np.ndarray:
        if scale == 0.0 or rng is None:
            return np.zeros(self.n_params)
        return scale * rng.standard_normal(self.n_params)

    def identity(self) -> np.ndarray:
        if self.n != self.m:
            raise ValueError("identity needs square theta")
        return np.eye(self.n).reshape(-1)

    def predict(self, phi, y, op: LinearOp) -> np.ndarray:
        return (self.theta(phi) @ np.asarray(y).reshape(-1)).reshape(op.in_shape)

    def _stack(self, pairs):
        # datasets are immutable lists; cache the stacked matrices per list object
        hit = self._cache.get(id(pairs))
        if hit is not None and hit[0] is pairs:
            return hit[1], hit[2]
        xs = np.stack([np.asarray(p.x, dtype=np.float64).reshape(-1) for p in pairs])
        ys = np.stack([np.asarray(p.y, dtype=np.float64).reshape(-1) for p in pairs])
        if len(self._cache) > 256:
            self._cache.clear()
        self._cache[id(pairs)] = (pairs, xs, ys)
        return xs, ys

    def loss_and_grad(self, phi, pairs, op: LinearOp, mode: str):
        theta = self.theta(phi)
        xs, ys = self._stack(pairs)
        pred = ys @ theta.T
        if mode == "unsup":
            a = op.matrix
            resid = pred @ a.T - ys
            back = resid @ a
        elif mode == "sup":
            resid = back = pred - xs
        else:
            raise ValueError(f"unknown loss mode {mode!r}")
        loss = 0.5 * float(np.sum(resid * resid))
        return loss, (back.T @ ys).reshape(-1)

    def hvp(self, phi, pairs, op: LinearOp, mode: str, v) -> np.ndarray:
        _, ys = self._stack(pairs)
        dpred = ys @ self.theta(v).T
        if mode == "unsup":
            a = op.matrix
            dpred = dpred @ a.T @ a
        return (dpred.T @ ys).reshape(-1)

    def manifest(self) -> dict:
        return {"model": self.kind, "image_shape": list(self.image_shape), "meas_shape": list(self.meas_shape)}


# -- PDNet --------------------------------------------------------------------


def box_prox(u, radius: float) -> np.ndarray:
    """Proximal map of the conjugate of ``radius * |.|_1``: clamp to ``[-radius, radius]``."""
    if radius < 0:
        raise ValueError("radius must be non-negative")
    return np.clip(np.asarray(u, dtype=np.float64), -radius, radius)


def _patches(x):
    h, w = x.shape
    xp = np.pad(x, 1)
    return np.stack([xp[a : a + h, b : b + w] for a in range(3) for b in range(3)])


def conv_apply(weights, x) -> np.ndarray:
    """Zero-padded 3x3 correlation mapping one channel to ``C``."""
    c = weights.shape[0]
    s = _patches(x)
    return (weights.reshape(c, 9) @ s.reshape(9, -1)).reshape((c,) + x.shape)


def conv_adjoint(weights, u) -> np.ndarray:
    """Exact adjoint of :func:`conv_apply` (``C`` channels back to one)."""
    c, h, w = u.shape
    z = (weights.reshape(c, 9).T @ u.reshape(c, -1)).reshape(9, h, w)
    out = np.zeros((h + 2, w + 2))
    for idx in range(9):
        a, b = divmod(idx, 3)
        out[a : a + h, b : b + w] += z[idx]
    return out[1:-1, 1:-1]


def conv_weight_grad(x, g) -> np.ndarray:
    """Gradient of ``<g, conv_apply(W, x)>`` with respect to ``W``."""
    c = g.shape[0]
    return (g.reshape(c, -1) @ _patches(x).reshape(9, -1).T).reshape(c, 3, 3)


@dataclass
class PDNetParams:
    """Per-layer filters ``weights`` (K, C, 3, 3) and log-thresholds (K,).

    Thresholds are stored as logarithms so that unconstrained updates keep
    them positive; ``lambdas`` exposes the actual values.
    """

    weights: np.ndarray
    log_lambdas: np.ndarray
    tau: float
    gamma: float

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.log_lambdas = np.asarray(self.log_lambdas, dtype=np.float64).reshape(-1)
        if self.weights.ndim != 4 or self.weights.shape[2:] != (3, 3):
            raise ValueError("weights must have shape (K, C, 3, 3)")
        if self.weights.shape[0] < 1 or self.weights.shape[0] != self.log_lambdas.size:
            raise ValueError("need K >= 1 layers with one threshold each")
        if not (self.tau > 0 and self.gamma > 0):
            raise ValueError("tau and gamma must be positive")

    @property
    def n_layers(self) -> int:
        return self.weights.shape[0]

    @property
    def n_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def lambdas(self) -> np.ndarray:
        return np.exp(self.log_lambdas)

    @classmethod
    def from_lambdas(cls, weights, lambdas, tau, gamma):
        lambdas = np.asarray(lambdas, dtype=np.float64)
        if np.any(lambdas <= 0):
            raise ValueError("thresholds must be positive")
        return cls(weights, np.log(lambdas), tau, gamma)


def pack(params: PDNetParams) -> np.ndarray:
    """Flatten to ``[W_1, log l_1, W_2, log l_2, ...]`` (9C + 1 entries per layer)."""
    k = params.n_layers
    return np.concatenate([params.weights.reshape(k, -1), params.log_lambdas[:, None]], axis=1).reshape(-1)


def unpack(vector, n_layers: int, n_channels: int, tau: float, gamma: float) -> PDNetParams:
    v = np.asarray(vector, dtype=np.float64).reshape(n_layers, 9 * n_channels + 1)
    return PDNetParams(v[:, :-1].reshape(n_layers, n_channels, 3, 3).copy(), v[:, -1].copy(), tau, gamma)


def init_pdnet(n_layers: int, rng: np.random.Generator, n_channels: int = DEFAULT_CHANNELS,
               tau: float = 0.5, gamma: float = 0.5, lam: float = 0.01) -> PDNetParams:
    bound = 1.0 / 3.0  # 1 / sqrt(fan_in) with fan_in = 9
    w = rng.uniform(-bound, bound, size=(n_layers, n_channels, 3, 3))
    return PDNetParams.from_lambdas(w, np.full(n_layers, lam), tau, gamma)


def pdnet_layer(x, u, y, op: LinearOp, weights, lam: float, tau: float, gamma: float):
    """One primal-dual layer; returns ``(x_next, u_next)``."""
    if u.shape != (weights.shape[0],) + x.shape:
        raise ValueError(f"dual variable must have shape {(weights.shape[0],) + x.shape}")
    x_next = x - tau * op.adjoint(op.apply(x) - y) - tau * conv_adjoint(weights, u)
    u_next = box_prox(u + gamma * conv_apply(weights, 2.0 * x_next - x), lam)
    return x_next, u_next


class Tape:
    """Intermediates of one forward pass, consumed by :func:`pdnet_vjp`."""

    def __init__(self, params_vector, y, op):
        self.params_vector = params_vector
        self.y = y
        self.op = op
        self.layers = []  # (x, u, x_next, z, v) per layer
        self.output = None


def pdnet_forward(params: PDNetParams, y, op: LinearOp):
    """Run all layers from ``x0 = A^T y``, ``u0 = 0``; returns ``(x_K, tape)``."""
    y = np.asarray(y, dtype=np.float64)
    if y.shape != op.out_shape:
        raise ValueError(f"measurement shape {y.shape} does not match operator {op.out_shape}")
    x = op.adjoint(y)
    if x.ndim != 2:
        raise ValueError("PDNet expects 2-D images")
    u = np.zeros((params.n_channels,) + x.shape)
    tape = Tape(pack(params), y, op)
    lams = params.lambdas
    tau, gamma = params.tau, params.gamma
    for k in range(params.n_layers):
        w = params.weights[k]
        x_next = x - tau * op.adjoint(op.apply(x) - y) - tau * conv_adjoint(w, u)
        z = 2.0 * x_next - x
        v = u + gamma * conv_apply(w, z)
        tape.layers.append((x, u, x_next, z, v))
        x, u = x_next, np.clip(v, -lams[k], lams[k])
    tape.output = x
    return x, tape


def pdnet_vjp(params: PDNetParams, tape: Tape, cotangent) -> np.ndarray:
    """Gradient of ``<cotangent, x_K>`` in the packed layout.

    The threshold entries hold derivatives with respect to ``lambda_k``
    itself, not its logarithm. Clamp convention: unit slope strictly inside
    the box, zero elsewhere (ties included).
    """
    if not np.array_equal(pack(params), tape.params_vector):
        raise ValueError("stale tape: parameters changed since the forward pass")
    gw, glam, _ = _reverse(params, tape, np.asarray(cotangent, dtype=np.float64))
    k = params.n_layers
    return np.concatenate([gw.reshape(k, -1), glam[:, None]], axis=1).reshape(-1)


def _reverse(params, tape, cot, tangents=None, dcot=None, dparams=None):
    """Reverse sweep; with ``tangents`` also returns tangents of the gradient."""
    op = tape.op
    tau, gamma = params.tau, params.gamma
    lams = params.lambdas
    K = params.n_layers
    gw = np.zeros_like(params.weights)
    glam = np.zeros(K)
    gx = cot
    gu = np.zeros((params.n_channels,) + cot.shape)
    second = tangents is not None
    if second:
        dW, dlam = dparams
        dgw = np.zeros_like(gw)
        dglam = np.zeros(K)
        dgx = dcot
        dgu = np.zeros_like(gu)
    for k in reversed(range(K)):
        x, u, x_next, z, v = tape.layers[k]
        w = params.weights[k]
        lam = lams[k]
        inside = np.abs(v) < lam
        above = v > lam
        below = v < -lam
        gv = np.where(inside, gu, 0.0)
        glam[k] = np.sum(gu[above]) - np.sum(gu[below])
        gz = gamma * conv_adjoint(w, gv)
        gw[k] = gamma * conv_weight_grad(z, gv)
        gxn = gx + 2.0 * gz
        gu_prev = gv - tau * conv_apply(w, gxn)
        gw[k] -= tau * conv_weight_grad(gxn, u)
        gx_prev = -gz + gxn - tau * op.gram(gxn)
        if second:
            dx, du, dxn, dz, dv = tangents[k]
            dgv = np.where(inside, dgu, 0.0)
            dglam[k] = np.sum(dgu[above]) - np.sum(dgu[below])
            dgz = gamma * (conv_adjoint(dW[k], gv) + conv_adjoint(w, dgv))
            dgw[k] = gamma * (conv_weight_grad(dz, gv) + conv_weight_grad(z, dgv))
            dgxn = dgx + 2.0 * dgz
            dgu = dgv - tau * (conv_apply(dW[k], gxn) + conv_apply(w, dgxn))
            dgw[k] -= tau * (conv_weight_grad(dgxn, u) + conv_weight_grad(gxn, du))
            dgx = -dgz + dgxn - tau * op.gram(dgxn)
        gx, gu = gx_prev, gu_prev
    if second:
        return gw, glam, gx, dgw, dglam
    return gw, glam, gx


def _forward_tangent(params, tape, dW, dlam):
    """Forward-mode tangents of every layer intermediate."""
    op = tape.op
    tau, gamma = params.tau, params.gamma
    lams = params.lambdas
    dx = np.zeros_like(tape.layers[0][0])
    du = np.zeros_like(tape.layers[0][1])
    out = []
    for k in range(params.n_layers):
        x, u, x_next, z, v = tape.layers[k]
        w = params.weights[k]
        lam = lams[k]
        dxn = dx - tau * op.gram(dx) - tau * (conv_adjoint(w, du) + conv_adjoint(dW[k], u))
        dz = 2.0 * dxn - dx
        dv = du + gamma * (conv_apply(w, dz) + conv_apply(dW[k], z))
        out.append((dx, du, dxn, dz, dv))
        inside = np.abs(v) < lam
        du = np.where(inside, dv, 0.0) + dlam[k] * ((v > lam).astype(float) - (v < -lam).astype(float))
        dx = dxn
    return out, dx


class PDNetFamily:
    """Flat-parameter adapter for PDNet with log-parametrized thresholds."""

    kind = "pdnet"

    def __init__(self, n_layers: int, n_channels: int = DEFAULT_CHANNELS, tau: float = 0.5, gamma: float = 0.5):
        if n_layers < 1:
            raise ValueError("PDNet needs at least one layer")
        self.n_layers = int(n_layers)
        self.n_channels = int(n_channels)
        self.tau = float(tau)
        self.gamma = float(gamma)
        self.per_layer = 9 * self.n_channels + 1
        self.n_params = self.n_layers * self.per_layer

    def params(self, phi) -> PDNetParams:
        return unpack(phi, self.n_layers, self.n_channels, self.tau, self.gamma)

    def init(self, rng: np.random.Generator, lam: float = 0.01) -> np.ndarray:
        return pack(init_pdnet(self.n_layers, rng, self.n_channels, self.tau, self.gamma, lam))

    def _lambda_slots(self):
        idx = np.zeros(self.n_params, dtype=bool)
        idx[self.per_layer - 1 :: self.per_layer] = True
        return idx

    def predict(self, phi, y, op: LinearOp) -> np.ndarray:
        return pdnet_forward(self.params(phi), y, op)[0]

    def _cotangent(self, out, x, y, op, mode):
        if mode == "sup":
            resid = out - x
            return 0.5 * float(np.sum(resid * resid)), resid
        resid = op.apply(out) - y
        return 0.5 * float(np.sum(resid * resid)), op.adjoint(resid)

    def loss_and_grad(self, phi, pairs, op: LinearOp, mode: str):
        params = self.params(phi)
        lams = params.lambdas
        loss = 0.0
        grad = np.zeros(self.n_params)
        for x, y in pairs:
            out, tape = pdnet_forward(params, y, op)
            val, cot = self._cotangent(out, x, y, op, mode)
            loss += val
            grad += pdnet_vjp(params, tape, cot)
        slots = self._lambda_slots()
        grad[slots] *= lams
        return loss, grad

    def hvp(self, phi, pairs, op: LinearOp, mode: str, v) -> np.ndarray:
        params = self.params(phi)
        lams = params.lambdas
        dparams = unpack(v, self.n_layers, self.n_channels, self.tau, self.gamma)
        dW = dparams.weights
        dlam = lams * dparams.log_lambdas
        g_lam = np.zeros(self.n_layers)
        hv_w = np.zeros_like(params.weights)
        hv_lam = np.zeros(self.n_layers)
        for x, y in pairs:
            out, tape = pdnet_forward(params, y, op)
            _, cot = self._cotangent(out, x, y, op, mode)
            tangents, dout = _forward_tangent(params, tape, dW, dlam)
            dcot = dout if mode == "sup" else op.gram(dout)
            _, glam, _, dgw, dglam = _reverse(params, tape, cot, tangents, dcot, (dW, dlam))
            g_lam += glam
            hv_w += dgw
            hv_lam += dglam
        # chain rule for lambda = exp(s): d(lambda g)/ds
        hv_s = lams * hv_lam + lams * dparams.log_lambdas * g_lam
        k = self.n_layers
        return np.concatenate([hv_w.reshape(k, -1), hv_s[:, None]], axis=1).reshape(-1)

    def smooth_margin(self, phi, pairs, op: LinearOp) -> float:
        """Smallest distance of any pre-clamp dual value to a clamp boundary."""
        params = self.params(phi)
        lams = params.lambdas
        margin = np.inf
        for _, y in pairs:
            _, tape = pdnet_forward(params, y, op)
            for k, (_, _, _, _, v) in enumerate(tape.layers):
                margin = min(margin, float(np.min(np.abs(np.abs(v) - lams[k]))))
        return margin

    def manifest(self) -> dict:
        return {
            "model": self.kind,
            "n_layers": self.n_layers,
            "n_channels": self.n_channels,
            "tau": self.tau,
            "gamma": self.gamma,
        }


def default_step(ops) -> float:
    """``0.5 / max(1, max_i |A_i|)``, shared by tau and gamma."""
    from .numerics import spectral_norm

    norm = max(spectral_norm(op, 100, make_rng(0, 7)) for op in ops)
    return 0.5 / max(1.0, norm)


# -- checkpoints ----------------------------------------------------------------


def save_checkpoint(directory, family, phi, extra: dict | None = None) -> None:
    os.makedirs(directory, exist_ok=True)
    save_npy(os.path.join(directory, "params.npy"), phi)
    manifest = dict(family.manifest())
    manifest["layout_version"] = LAYOUT_VERSION
    manifest["n_params"] = int(family.n_params)
    if extra:
        manifest.update(extra)
    with open(os.path.join(directory, "model.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def family_from_manifest(manifest: dict):
    kind = manifest.get("model")
    if kind == "pdnet":
        return PDNetFamily(manifest["n_layers"], manifest["n_channels"], manifest["tau"], manifest["gamma"])
    if kind == "linear":
        return LinearFamily(manifest["image_shape"], manifest["meas_shape"])
    raise ValueError(f"unknown model kind {kind!r} in checkpoint")


def load_checkpoint(directory):
    with open(os.path.join(directory, "model.json")) as fh:
        manifest = json.load(fh)
    if manifest.get("layout_version") != LAYOUT_VERSION:
        raise ValueError(f"unsupported checkpoint layout {manifest.get('layout_version')!r}")
    family = family_from_manifest(manifest)
    phi = load_npy(os.path.join(directory, "params.npy"))
    if phi.size != family.n_params:
        raise ValueError("checkpoint parameter count does not match its manifest")
    return family, phi, manifest
