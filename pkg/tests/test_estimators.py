import numpy as np
import pytest
from sklearn.base import clone
from sklearn.pipeline import make_pipeline

from efl.echosim import DomainProfile, generate_dataset
from efl.errors import ShapeError
from efl.estimators import (
    AcousticAugmenter,
    ContrastiveDomainAdapter,
    HiddenLayerClassifier,
    LloydKMeans,
    SpectrogramFeaturizer,
)
from efl.nnet import ConvLayer, EncoderConfig

from oracles import best_matching_accuracy


@pytest.mark.parametrize("est", [
    SpectrogramFeaturizer(max_freq=800.0),
    HiddenLayerClassifier(hidden=16),
    ContrastiveDomainAdapter(epochs=2, tau=0.2),
    AcousticAugmenter(mode="inter", K=2),
    LloydKMeans(n_clusters=3),
])
def test_params_round_trip_through_clone(est):
    params = est.get_params()
    twin = clone(est)
    assert twin.get_params() == params
    assert twin is not est


@pytest.fixture(scope="module")
def small_data():
    data = generate_dataset([DomainProfile("d")], 1, 1, seed=0)
    return data, np.array([s.label for s in data])


def test_featurizer_crops_and_standardizes(small_data):
    data, _ = small_data
    f = SpectrogramFeaturizer().fit(data)
    X = f.transform(data)
    assert X.shape == (len(data), 11, 90)
    np.testing.assert_allclose(X.mean(axis=(1, 2)), 0.0, atol=1e-12)
    np.testing.assert_allclose(X.std(axis=(1, 2)), 1.0, atol=1e-12)
    with pytest.raises(ShapeError):
        SpectrogramFeaturizer(max_freq=2000.0).fit(data[:1]).transform(X[:, :5])


def test_classifier_in_pipeline():
    rng = np.random.default_rng(0)
    X = np.vstack([rng.normal(0, 1, (30, 3)), rng.normal(4, 1, (30, 3))])
    y = np.repeat(["a", "b"], 30)
    pipe = make_pipeline(HiddenLayerClassifier(hidden=16, epochs=50))
    pipe.fit(X, y)
    assert pipe.score(X, y) >= 0.95
    p = pipe.predict_proba(X)
    np.testing.assert_allclose(p.sum(axis=1), 1.0)


def test_augmenter_round_trips_layout():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(8, 3, 4))
    y = np.repeat([0, 1], 4)
    groups = np.tile(["p0", "p1"], 4)
    Xa, ya, ga = AcousticAugmenter(mode="intra", Dis=1).fit_resample(X, y, groups)
    assert Xa.shape == (16, 3, 4)
    np.testing.assert_array_equal(Xa[:8], X)
    np.testing.assert_allclose(Xa[8:], X)  # Dis=1 is the identity
    np.testing.assert_array_equal(ya, np.r_[y, y])
    np.testing.assert_array_equal(ga, np.r_[groups, groups])


def test_augmenter_inter_records_provenance():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(12, 2, 5))
    y = np.repeat([0, 1], 6)
    groups = np.tile(["p0", "p1", "p2"], 4)
    aug = AcousticAugmenter(mode="inter", K=2, random_state=3)
    Xa, ya, _ = aug.fit_resample(X, y, groups)
    assert len(Xa) == 24
    extra = aug.provenance_[12:]
    assert all(p["augmented"] and p["mode"] == "inter" and len(p["neighbor_ids"]) == 1 for p in extra)


def test_kmeans_estimator():
    rng = np.random.default_rng(0)
    truth = np.repeat(np.arange(3), 20)
    X = np.array([[0, 0], [8, 0], [0, 8]])[truth] + rng.normal(0, 0.2, (60, 2))
    km = LloydKMeans(n_clusters=3).fit(X)
    assert best_matching_accuracy(km.labels_, truth, 3) == 1.0
    np.testing.assert_array_equal(km.predict(X), km.labels_)


def test_domain_adapter_fits_and_predicts():
    rng = np.random.default_rng(0)
    y = np.repeat(np.arange(6), 4)
    X = rng.normal(0, 0.3, (24, 5, 6))
    X[np.arange(24), y % 5, :] += 2.0
    Xt = X + 0.2
    enc = EncoderConfig(input_shape=(5, 6), convs=[ConvLayer(4), ConvLayer(4, (3, 3), (2, 2))],
                        memory_slots=4, embed_dim=8, proj_hidden=8, proj_dim=4)
    est = ContrastiveDomainAdapter(encoder=enc, epochs=1, iterations_per_epoch=2, batch_source=12,
                                   batch_target=12, pretrain_max_epochs=3, classifier_epochs=20, lr=0.05)
    est.fit(X, y, X_target=Xt, y_target=y)
    assert est.predict(Xt).shape == (24,)
    assert est.transform(X).shape == (24, 8)
    assert len(est.adaptation_.pseudo_accuracy) == 1
    with pytest.raises(ShapeError):
        est.fit(X[0], y)
