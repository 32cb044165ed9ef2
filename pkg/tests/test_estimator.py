import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from doodlenet.data import generate_sample
from doodlenet.estimator import DooDLeNetSegmenter, check_label_maps, check_paired_images


@pytest.fixture(scope="module")
def arrays():
    samples = [generate_sample(i, 1, 32, 3, 1, 0.5) for i in range(8)]
    X = np.stack([np.concatenate([s.color, s.thermal]) for s in samples])
    y = np.stack([s.labels for s in samples])
    return X, y


def make(**kw):
    base = dict(epochs=2, batch_size=4, widths=(4, 8, 8, 16), num_classes=3)
    base.update(kw)
    return DooDLeNetSegmenter(**base)


def test_params_round_trip():
    est = make(variant="conf_only")
    params = est.get_params()
    assert params["variant"] == "conf_only" and params["epochs"] == 2
    twin = clone(est)
    assert twin.get_params() == params
    twin.set_params(lr=0.5)
    assert twin.lr == 0.5 and est.lr == 0.01


def test_fit_predict(arrays):
    X, y = arrays
    est = make().fit(X, y)
    pred = est.predict(X)
    assert pred.shape == y.shape and pred.max() < 3
    proba = est.predict_proba(X)
    np.testing.assert_allclose(proba.sum(axis=1), 1.0, rtol=1e-5)
    assert 0.0 <= est.score(X, y) <= 1.0
    assert len(est.loss_curve_) == 2


def test_seeded(arrays):
    X, y = arrays
    a = make().fit(X, y).decision_function(X)
    b = make().fit(X, y).decision_function(X)
    assert np.array_equal(a, b)


def test_unfitted(arrays):
    with pytest.raises(NotFittedError):
        make().predict(arrays[0])


def test_validation(arrays):
    X, y = arrays
    with pytest.raises(ValueError):
        check_paired_images(X[:, :3])
    with pytest.raises(ValueError):
        check_paired_images(X[:, :, :30, :30])
    bad = X.copy()
    bad[0, 0, 0, 0] = np.nan
    with pytest.raises(ValueError):
        check_paired_images(bad)
    with pytest.raises(ValueError):
        check_label_maps(y[:, :16], X)
    with pytest.raises(ValueError):
        check_label_maps(y + 5, X, 3)
    with pytest.raises(ValueError):
        make().fit(X, y).predict(X[:, :, :16, :16])
