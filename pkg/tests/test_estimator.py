import numpy as np
import pytest
from sklearn.base import clone

from fads.data import synthetic_dataset
from fads.estimator import FADSDetector, FADSEnsemble
from fads.netio import make_reference_net


@pytest.fixture(scope="module")
def bench():
    items = synthetic_dataset(seed=42, n_nominal=14, n_anomalous=6)
    train = np.stack([i.image for i in items[:8]])
    test = np.stack([i.image for i in items[8:]])
    labels = np.array([i.label for i in items[8:]])
    return train, test, labels


def test_params_and_clone():
    det = FADSDetector(input_size=(1, 32, 32), scoring="l2", boundary=1.5)
    params = det.get_params()
    assert params["scoring"] == "l2" and params["boundary"] == 1.5
    twin = clone(det)
    assert twin.get_params() == params and twin is not det
    ens = FADSEnsemble(members=[det], scoring="percentile90")
    assert ens.get_params()["members"] == [det]
    assert clone(ens).get_params()["scoring"] == "percentile90"


def test_unfitted_raises(bench):
    from sklearn.exceptions import NotFittedError
    with pytest.raises(NotFittedError):
        FADSDetector().predict(bench[1])


def test_detector_fit_predict(bench):
    train, test, labels = bench
    det = FADSDetector(input_size=(1, 32, 32)).fit(train)
    assert det.n_filters_ == 32 and det.filter_mean_.shape == (32,)
    assert np.mean(det.anomaly_score(train)) == pytest.approx(1.0, abs=1e-6)
    scores = det.anomaly_score(test)
    assert scores[labels == 1].min() > scores[labels == 0].max()
    pred = det.predict(test)
    assert set(pred) <= {-1, 1}
    np.testing.assert_array_equal(pred, np.where(scores > 1.0, -1, 1))
    np.testing.assert_allclose(det.score_samples(test), -scores)
    assert det.transform(test).shape == (len(test), 32)


def test_detector_accepts_explicit_network(bench):
    train, test, _ = bench
    graph, weights = make_reference_net(7)
    det = FADSDetector(graph=graph, weights=weights, input_size=(1, 32, 32), agg="mean").fit(train)
    assert np.isfinite(det.anomaly_score(test)).all()


def test_detector_rejects_bad_options(bench):
    with pytest.raises(ValueError):
        FADSDetector(agg="median").fit(bench[0])
    with pytest.raises(ValueError):
        FADSDetector().fit(bench[0][:1])


@pytest.mark.parametrize("scoring", ["max", "percentile90", "l2"])
def test_ensemble_self_normalizes(bench, scoring):
    train, test, labels = bench
    ens = FADSEnsemble(scoring=scoring).fit(train)
    assert len(ens.members_) == 2
    assert np.mean(ens.anomaly_score(train)) == pytest.approx(1.0, abs=1e-6)
    per_member = ens.member_scores(test)
    np.testing.assert_allclose(ens.anomaly_score(test), per_member.mean(axis=1))


def test_ensemble_boundary_controls_predict(bench):
    train, test, _ = bench
    loose = FADSEnsemble(boundary=1e9).fit(train)
    assert (loose.predict(test) == 1).all()
    strict = FADSEnsemble(boundary=-1.0).fit(train)
    assert (strict.predict(test) == -1).all()


def test_saliency_shape(bench):
    train, test, _ = bench
    det = FADSDetector(input_size=(1, 32, 32)).fit(train)
    (sal,) = det.saliency(test[-1:])
    assert sal.values.shape == (32, 32)
    assert 0.0 <= sal.values.min() and sal.values.max() <= 1.0
