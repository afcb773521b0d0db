import numpy as np
import pytest
from scipy.optimize import lsq_linear

from metainv.numerics import make_rng
from metainv.operators import (
    Task,
    kernel_projector,
    make_conv,
    make_decimation,
    make_dense,
    make_fourier_mask,
    make_identity,
    make_mask,
    make_operator,
    make_task,
    motion_kernel,
    mri_mask,
    pinv_apply,
    total_variation,
    tv_duality_gap,
    tv_prox,
)


def all_operators(rng, shape=(8, 8)):
    return {
        "identity": make_identity(shape),
        "mask": make_mask((rng.random(shape) > 0.3).astype(float)),
        "conv": make_conv(rng.standard_normal((3, 3)), shape),
        "decimate": make_decimation(2, shape),
        "fourier-mask": make_fourier_mask(mri_mask(shape, 4, rng)),
        "dense": make_dense(rng.standard_normal((20, 64)), shape, (20,)),
    }


@pytest.mark.parametrize("kind", ["identity", "mask", "conv", "decimate", "fourier-mask", "dense"])
def test_adjoint_identity(kind):
    rng = make_rng(0)
    op = all_operators(rng)[kind]
    for _ in range(100):
        x = rng.standard_normal(op.in_shape)
        u = rng.standard_normal(op.out_shape)
        lhs = np.sum(op.apply(x) * u)
        rhs = np.sum(x * op.adjoint(u))
        assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs))


def test_shape_errors():
    op = make_identity((4, 4))
    with pytest.raises(ValueError):
        op.apply(np.zeros((3, 4)))
    with pytest.raises(ValueError):
        op.adjoint(np.zeros(16))
    with pytest.raises(ValueError):
        make_decimation(3, (8, 8))
    with pytest.raises(ValueError):
        make_mask(np.array([0.0, 0.5, 1.0]))


def test_conv_matches_direct_circular_sum():
    rng = make_rng(1)
    k = rng.standard_normal((3, 3))
    x = rng.standard_normal((6, 7))
    out = make_conv(k, x.shape).apply(x)
    ref = np.zeros_like(x)
    for i in range(6):
        for j in range(7):
            for a in range(3):
                for b in range(3):
                    ref[i, j] += k[a, b] * x[(i - a + 1) % 6, (j - b + 1) % 7]
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_fourier_full_mask_is_unitary():
    rng = make_rng(2)
    op = make_fourier_mask(np.ones((8, 8)))
    x = rng.standard_normal((8, 8))
    assert np.linalg.norm(op.apply(x)) == pytest.approx(np.linalg.norm(x), rel=1e-12)
    np.testing.assert_allclose(op.adjoint(op.apply(x)), x, atol=1e-12)


@pytest.mark.parametrize("kind", ["identity", "mask", "conv", "decimate", "fourier-mask", "dense"])
def test_kernel_projector_properties(kind):
    rng = make_rng(3)
    op = all_operators(rng)[kind]
    p = kernel_projector(op)
    assert np.abs(p @ p - p).max() <= 1e-10
    assert np.abs(p - p.T).max() <= 1e-10
    assert np.abs(op.matrix @ p).max() <= 1e-10


def test_kernel_projector_examples():
    assert np.array_equal(kernel_projector(make_identity(5)), np.zeros((5, 5)))
    p = kernel_projector(make_mask(np.array([1.0, 0.0, 1.0])))
    assert np.array_equal(p, np.diag([0.0, 1.0, 0.0]))


@pytest.mark.parametrize("kind", ["identity", "mask", "conv", "decimate", "fourier-mask", "dense"])
def test_pinv_residual_and_least_norm(kind):
    rng = make_rng(4)
    op = all_operators(rng)[kind]
    a = op.matrix
    y = rng.standard_normal(op.out_shape)
    x = pinv_apply(op, y).reshape(-1)
    ref = np.linalg.pinv(a, rcond=1e-10) @ y.reshape(-1)
    assert np.linalg.norm(x - ref) <= 1e-8 * max(1.0, np.linalg.norm(ref))
    # A A^+ A = A on probes
    z = rng.standard_normal(op.in_shape)
    az = op.apply(z)
    assert np.linalg.norm(op.apply(pinv_apply(op, az)) - az) <= 1e-8 * max(1.0, np.linalg.norm(az))
    # least norm: no kernel component
    assert np.linalg.norm(kernel_projector(op) @ x) <= 1e-8 * max(1.0, np.linalg.norm(x))


def test_pinv_examples():
    op = make_mask(np.array([[1.0, 0.0], [1.0, 1.0]]))
    np.testing.assert_array_equal(pinv_apply(op, np.array([[2.0, 9.0], [3.0, 4.0]])), [[2.0, 0.0], [3.0, 4.0]])
    assert np.array_equal(pinv_apply(make_dense(np.zeros((3, 4))), np.ones(3)), np.zeros(4))


# -- total variation --------------------------------------------------------------


def exact_tv_1d(y, strength):
    """1-D TV denoising through its box-constrained dual, solved by scipy."""
    n = y.size
    d = np.diff(np.eye(n), axis=0)  # forward differences, (n-1, n)
    res = lsq_linear(d.T, y, bounds=(-strength, strength), method="bvls", tol=1e-14)
    return y - d.T @ res.x


def test_tv_prox_strength_zero_is_identity():
    y = make_rng(5).random((6, 9))
    assert np.array_equal(tv_prox(y, 0.0), y)


def test_tv_prox_constant_image_invariant():
    y = np.full((7, 5), 0.3)
    assert np.array_equal(tv_prox(y, 0.7), y)


def test_tv_prox_1d_step_matches_exact_solver():
    y = np.concatenate([np.zeros(8), np.ones(12)])[None, :]
    x = tv_prox(y, 0.5, tol=1e-12, max_iter=5000)
    exact = exact_tv_1d(y[0], 0.5)
    analytic = np.concatenate([np.full(8, 0.5 / 8), np.full(12, 1 - 0.5 / 12)])
    assert np.abs(exact - analytic).max() <= 1e-9
    assert np.abs(x[0] - exact).max() <= 1e-4


def test_tv_prox_random_1d_matches_exact_solver():
    rng = make_rng(6)
    for _ in range(5):
        y = rng.standard_normal(15)
        x = tv_prox(y[None, :], 0.2, tol=1e-12, max_iter=5000)
        assert np.abs(x[0] - exact_tv_1d(y, 0.2)).max() <= 1e-4


def test_tv_prox_reduces_objective_and_gap():
    rng = make_rng(7)
    y = rng.random((16, 16))
    x, p = tv_prox(y, 0.1, return_dual=True)
    obj = lambda v: 0.5 * np.sum((v - y) ** 2) + 0.1 * total_variation(v)
    assert obj(x) <= obj(y)
    assert tv_duality_gap(y, x, p, 0.1) <= 1e-4 * obj(x)
    assert total_variation(x) < total_variation(y)


def test_tv_prox_rejects_negative_strength():
    with pytest.raises(ValueError):
        tv_prox(np.zeros((3, 3)), -1.0)


# -- tasks ---------------------------------------------------------------------------


def test_motion_kernel_and_mri_mask():
    k = motion_kernel(5)
    assert k.sum() == pytest.approx(1.0)
    m = mri_mask((32, 32), 4, make_rng(0))
    assert set(np.unique(m)) <= {0.0, 1.0}
    assert m[:, 0].all()  # DC column always kept
    assert m[0].sum() == 8


def test_make_task_kinds():
    rng = make_rng(8)
    images = [rng.random((8, 8)) for _ in range(8)]
    specs = {"T1": {"sigma": 0.1}, "T2": {"strength": 0.1}, "T3": {"kernel_size": 3},
             "T4": {"drop_rate": 0.3}, "SR": {"factor": 2}, "MRI": {"acceleration": 4}}
    for kind, params in specs.items():
        task = make_task(kind, params, images, make_rng(9))
        assert isinstance(task, Task)
        assert len(task.train) == 6 and len(task.test) == 2
        x, y = task.train[0]
        assert y.shape == task.operator.out_shape
    t1 = make_task("T1", {"sigma": 0.0}, images, make_rng(9))
    np.testing.assert_array_equal(t1.train[0].y, t1.train[0].x)
    t2 = make_task("T2", {"strength": 0.1}, images, make_rng(9))
    np.testing.assert_array_equal(t2.train[0].y, images[0])


def test_make_task_errors():
    images = [np.zeros((4, 4))]
    with pytest.raises(ValueError):
        make_task("T9", {}, images, make_rng(0))
    with pytest.raises(ValueError):
        make_task("T1", {}, images, make_rng(0))
    with pytest.raises(ValueError):
        make_operator("SR", {}, (4, 4), make_rng(0))
    with pytest.raises(ValueError):
        Task("empty", make_identity(2)).split("train")
