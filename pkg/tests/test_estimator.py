import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from rainstream import TwoStreamDerainer
from rainstream.rainsynth import RainConfig, composite, render_streaks
from rainstream.tensor import ShapeError


def small_pair(seed=0, frames=3):
    r = np.random.default_rng(seed)
    c = r.uniform(0.1, 0.6, (frames, 1, 8, 8))
    trip = composite(c, render_streaks((frames, 8, 8), RainConfig(density=50, seed=seed)))
    return trip.x, trip.c


def small_model(**kw):
    params = dict(T=2, cube=(2, 8, 8), phase1_steps=2, phase2_steps=2, batch_size=2, lr=1e-3)
    params.update(kw)
    return TwoStreamDerainer(**params)


def test_params_round_trip_through_clone():
    est = TwoStreamDerainer(theta=0.2, ablation="plain_cnn")
    assert est.get_params()["theta"] == 0.2
    twin = clone(est)
    assert twin.get_params() == est.get_params() and twin is not est
    est.set_params(lr=0.5)
    assert est.lr == 0.5


def test_unfitted_estimator_refuses_to_transform():
    with pytest.raises(NotFittedError):
        TwoStreamDerainer().transform(np.zeros((9, 3, 8, 8)))


def test_fit_transform_score():
    x, c = small_pair()
    est = small_model().fit(x, c)
    assert est.n_channels_ == 1 and len(est.train_log_) == 4
    out = est.transform(x)
    assert out.shape == x.shape
    assert est.predict_streaks(x).shape == x.shape
    assert np.isfinite(est.score(x, c))
    stacked = est.predict(np.stack([x, x]))
    assert stacked.shape == (2,) + x.shape
    np.testing.assert_array_equal(stacked[0], out)


def test_fit_is_reproducible():
    x, c = small_pair(1)
    a = small_model(random_state=3).fit(x, c).transform(x)
    b = small_model(random_state=3).fit(x, c).transform(x)
    np.testing.assert_array_equal(a, b)


def test_fit_validates_inputs():
    x, c = small_pair()
    with pytest.raises(ValueError, match="darker"):
        small_model().fit(c, x + 0.01)
    with pytest.raises(ValueError, match="cube length"):
        small_model(cube=(3, 8, 8)).fit(x, c)
    with pytest.raises(ValueError, match="ablation"):
        small_model(ablation="bogus").fit(x, c)
    with pytest.raises(ValueError, match=r"\[0, 1\]"):
        small_model().fit(x * 3, c)
    with pytest.raises(ShapeError):
        small_model().fit(x[0], c[0])
    est = small_model().fit(x, c)
    with pytest.raises(ShapeError, match="channel"):
        est.transform(np.zeros((3, 3, 8, 8)))
