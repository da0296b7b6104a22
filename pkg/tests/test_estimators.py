import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from flowdistill.analytic import gmm_sample, preset_mixture
from flowdistill.estimators import FGMDistiller, FlowMatchingSampler
from flowdistill.nets import VectorFieldNet


def test_params_and_clone():
    est = FlowMatchingSampler(hidden=(8,), steps=5, random_state=3)
    params = est.get_params()
    assert params["hidden"] == (8,) and params["random_state"] == 3
    twin = clone(est).set_params(steps=7)
    assert twin.steps == 7 and est.steps == 5
    assert FGMDistiller(lambda1=0.5).get_params()["lambda1"] == 0.5


def test_unfitted_raises():
    with pytest.raises(NotFittedError):
        FlowMatchingSampler().transform(np.zeros((2, 2)))
    with pytest.raises(NotFittedError):
        FGMDistiller().sample(3)


def test_sampler_fit_transform_on_data():
    X = gmm_sample(preset_mixture("single-gauss"), 300, np.random.default_rng(0))
    est = FlowMatchingSampler(hidden=(8, 8), n_freq=2, steps=20, batch_size=16, euler_steps=4, random_state=1).fit(X)
    assert est.n_features_in_ == 2 and len(est.history_) == 20
    Z = np.random.default_rng(2).standard_normal((10, 2))
    out = est.transform(Z)
    assert out.shape == (10, 2) and np.all(np.isfinite(out))
    np.testing.assert_array_equal(out, est.transform(Z))
    np.testing.assert_array_equal(est.sample(10, random_state=2), out)
    assert est.transform(np.zeros((0, 2))).shape == (0, 2)
    with pytest.raises(ValueError):
        est.transform(np.zeros((3, 3)))


def test_sampler_fit_is_deterministic():
    q0 = preset_mixture("ring8")
    a = FlowMatchingSampler(hidden=(8,), n_freq=1, steps=10, batch_size=8, random_state=4).fit(q0)
    b = clone(a).fit(q0)
    np.testing.assert_array_equal(a.field_.get_flat(), b.field_.get_flat())


def test_distiller_from_sampler_and_mixture():
    q0 = preset_mixture("ring8")
    teacher = FlowMatchingSampler(hidden=(8,), n_freq=1, steps=5, batch_size=8, random_state=0).fit(q0)
    dist = FGMDistiller(teacher=teacher, steps=3, batch_size=8, random_state=0).fit()
    Z = np.random.default_rng(1).standard_normal((6, 2))
    assert dist.transform(Z).shape == (6, 2)
    np.testing.assert_array_equal(dist.transform(Z), dist.generator_(Z))

    init = VectorFieldNet(2, hidden=(8,), n_freq=1).init(np.random.default_rng(0))
    analytic = FGMDistiller(teacher=q0, init=init, steps=2, batch_size=8).fit(np.zeros((4, 2)))
    assert analytic.sample(5, random_state=0).shape == (5, 2)


def test_distiller_validation():
    q0 = preset_mixture("ring8")
    with pytest.raises(ValueError, match="init is required"):
        FGMDistiller(teacher=q0, steps=1).fit()
    with pytest.raises(ValueError, match="teacher must be"):
        FGMDistiller(teacher="nope").fit()
    init = VectorFieldNet(2, hidden=(4,), n_freq=1).init(np.random.default_rng(0))
    with pytest.raises(ValueError, match="features"):
        FGMDistiller(teacher=q0, init=init, steps=1).fit(np.zeros((3, 3)))
    with pytest.raises(ValueError):
        FlowMatchingSampler(random_state=np.random.default_rng(0)).fit(q0)


def test_zero_step_distiller_matches_init():
    init = VectorFieldNet(2, hidden=(8,), n_freq=1).init(np.random.default_rng(0), zero_final=False)
    dist = FGMDistiller(teacher=preset_mixture("ring8"), init=init, steps=0).fit()
    Z = np.random.default_rng(3).standard_normal((4, 2))
    expected = Z - 0.97 * init.velocity(Z, 0.97)
    np.testing.assert_allclose(dist.transform(Z), expected, rtol=0, atol=1e-15)
