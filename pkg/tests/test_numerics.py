import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from metainv.numerics import (
    PSNR_CAP,
    NumericalError,
    finite_diff_grad,
    load_npy,
    make_rng,
    psnr,
    save_npy,
    spectral_norm,
)
from metainv.operators import make_dense, make_identity, make_mask


def test_rng_streams_are_deterministic_and_distinct():
    a = make_rng(42, 3).standard_normal(1000)
    b = make_rng(42, 3).standard_normal(1000)
    c = make_rng(42, 4).standard_normal(1000)
    assert np.array_equal(a, b)
    assert not np.allclose(a, c)


def test_rng_independent_of_creation_order():
    first = make_rng(7, 1).random(5)
    make_rng(7, 2).random(100)
    assert np.array_equal(first, make_rng(7, 1).random(5))


def test_psnr_examples():
    assert psnr(np.ones(4), np.ones(4)) == PSNR_CAP
    ref = np.zeros(100)
    x = np.full(100, 0.1)  # MSE 0.01
    assert psnr(x, ref, 1.0) == pytest.approx(20.0, abs=1e-12)
    assert psnr([0.0, 0.0], [1.0, 1.0], 1.0) == pytest.approx(0.0, abs=1e-12)


def test_psnr_errors():
    with pytest.raises(ValueError):
        psnr(np.zeros(3), np.zeros(4))
    with pytest.raises(ValueError):
        psnr(np.zeros(3), np.zeros(3), peak=0.0)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=20))
def test_psnr_self_hits_cap(values):
    x = np.array(values)
    assert psnr(x, x, 1.0) == PSNR_CAP


def test_finite_diff_quadratic_and_constant():
    g = finite_diff_grad(lambda x: 0.5 * float(x @ x), np.array([3.0, -1.0]), 1e-5)
    np.testing.assert_allclose(g, [3.0, -1.0], atol=1e-8)
    g0 = finite_diff_grad(lambda x: 4.2, np.ones((2, 3)))
    assert np.array_equal(g0, np.zeros((2, 3)))


def test_finite_diff_quadratic_form():
    rng = make_rng(1)
    b = rng.standard_normal((6, 6))
    q = b @ b.T
    x = rng.standard_normal(6)
    g = finite_diff_grad(lambda v: 0.5 * float(v @ q @ v), x)
    assert np.linalg.norm(g - q @ x) <= 1e-7 * np.linalg.norm(q @ x)


def test_finite_diff_rejects_nonfinite():
    with pytest.raises(NumericalError):
        finite_diff_grad(lambda x: np.inf, np.zeros(2))


def test_spectral_norm_examples():
    assert spectral_norm(make_identity(4), 10, make_rng(0)) == pytest.approx(1.0, abs=1e-6)
    assert spectral_norm(make_dense(np.diag([3.0, 1.0, 0.5])), 100, make_rng(0)) == pytest.approx(3.0, abs=0.03)
    mask = np.array([1.0, 0.0, 1.0, 1.0, 0.0])
    assert spectral_norm(make_mask(mask), 10, make_rng(0)) == pytest.approx(1.0, abs=1e-6)
    assert spectral_norm(make_dense(np.zeros((3, 3))), 5) == 0.0


def test_spectral_norm_random_matrix_within_one_percent():
    rng = make_rng(3)
    u, _ = np.linalg.qr(rng.standard_normal((8, 8)))
    v, _ = np.linalg.qr(rng.standard_normal((8, 8)))
    s = np.array([2.0, 1.5, 1.0, 0.8, 0.5, 0.3, 0.2, 0.1])
    est = spectral_norm(make_dense(u @ np.diag(s) @ v.T), 100, rng)
    assert abs(est - 2.0) <= 0.02


def test_npy_roundtrip(tmp_path):
    arr = make_rng(0).standard_normal((3, 4))
    save_npy(tmp_path / "a.npy", arr)
    back = load_npy(tmp_path / "a.npy")
    assert back.dtype == np.float64
    assert np.array_equal(arr, back)
