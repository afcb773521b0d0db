import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from metainv.bayes import gaussian_condition_oracle
from metainv.estimators import GaussianBayesReconstructor, MetaReconstructor
from metainv.numerics import make_rng
from metainv.operators import make_decimation, make_mask, make_task


def test_bayes_reconstructor_matches_oracle():
    rng = make_rng(0)
    X = rng.standard_normal((300, 16)) @ rng.standard_normal((16, 16))
    est = GaussianBayesReconstructor(shrinkage=1e-6).fit(X)
    assert est.n_features_in_ == 16
    op = make_decimation(2, (4, 4))
    Y = np.stack([op.apply(x.reshape(4, 4)) for x in X[:4]])
    out = est.predict(Y, op)
    assert out.shape == (4, 4, 4)
    for y, x_hat in zip(Y, out):
        ref = gaussian_condition_oracle(est.prior_, op, y)
        assert np.linalg.norm(x_hat - ref) <= 1e-8 * np.linalg.norm(ref)
    assert est.predict(Y[0], op).shape == (4, 4)


def test_bayes_reconstructor_validation():
    est = GaussianBayesReconstructor()
    with pytest.raises(NotFittedError):
        est.predict(np.zeros((2, 2)), make_mask(np.ones((2, 2))))
    with pytest.raises(ValueError):
        est.fit(np.array([[1.0, np.nan], [0.0, 1.0]]))
    with pytest.raises(ValueError):
        GaussianBayesReconstructor(shrinkage=-1).fit(np.eye(3))
    fitted = GaussianBayesReconstructor().fit(np.eye(3))
    with pytest.raises(ValueError):
        fitted.predict(np.zeros((2, 2)), make_mask(np.ones((2, 2))))


def test_params_roundtrip():
    m = MetaReconstructor(n_layers=3, epochs=7)
    assert m.get_params()["n_layers"] == 3
    m.set_params(epochs=2)
    assert clone(m).epochs == 2


def test_meta_reconstructor_fit_predict_finetune():
    rng = make_rng(1)
    images = [rng.random((8, 8)) for _ in range(6)]
    tasks = [make_task("T4", {"drop_rate": 0.3}, images, make_rng(2)),
             make_task("T1", {"sigma": 0.05}, images, make_rng(3))]
    m = MetaReconstructor(n_layers=2, n_channels=4, epochs=2, random_state=5).fit(tasks)
    again = MetaReconstructor(n_layers=2, n_channels=4, epochs=2, random_state=5).fit(tasks)
    assert np.array_equal(m.theta_star_, again.theta_star_)
    assert len(m.history_) == 2
    op = tasks[0].operator
    batch = np.stack([y for _, y in tasks[0].test])
    assert m.predict(batch, op).shape == (len(batch), 8, 8)
    assert np.isfinite(m.score(tasks))
    tuned = m.fine_tune(tasks[0], mode="sup", steps=3, step_size=1e-2)
    assert len(tuned.finetune_trace_) == 4
    assert not np.array_equal(tuned.theta_star_, m.theta_star_)
    with pytest.raises(ValueError):
        m.predict(np.zeros((3, 3)), op)
    with pytest.raises(NotFittedError):
        MetaReconstructor().predict(batch, op)
    with pytest.raises(ValueError):
        MetaReconstructor(model="cnn").fit(tasks)
