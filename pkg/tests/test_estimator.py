import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from rpnsd.annotation import Annotation, from_turns
from rpnsd.estimator import RPNSDiarizer, SpeakerKMeans
from rpnsd.features import make_speaker_inventory, synthetic_features

INV = make_speaker_inventory(2, dim=8, separation=3.0, seed=2)


def corpus(n):
    X, y = [], []
    for i in range(n):
        a, b = INV.speakers
        ann = from_turns(f"r{i}", [(a, 0.05, 0.4), (b, 0.5 + 0.05 * (i % 3), 1.1)])
        X.append(synthetic_features(INV, ann, 128, i, 0.01).matrix)
        y.append(ann)
    return X, y


def test_kmeans_params_and_clone():
    km = SpeakerKMeans(n_clusters=3, random_state=4)
    assert km.get_params() == {"n_clusters": 3, "n_init": 10, "max_iter": 100, "random_state": 4}
    assert clone(km).get_params() == km.get_params()


def test_kmeans_fit_predict():
    rng = np.random.default_rng(0)
    x = np.concatenate([rng.normal(0, 0.1, (20, 2)), rng.normal(5, 0.1, (20, 2))])
    km = SpeakerKMeans(2).fit(x)
    labels = km.fit_predict(x)
    assert len(set(labels[:20])) == 1 and len(set(labels[20:])) == 1 and labels[0] != labels[-1]
    np.testing.assert_array_equal(km.predict(x), km.labels_)


def test_kmeans_validation():
    with pytest.raises(NotFittedError):
        SpeakerKMeans().predict(np.zeros((2, 2)))
    km = SpeakerKMeans(2).fit(np.arange(8.0).reshape(4, 2))
    with pytest.raises(ValueError):
        km.predict(np.zeros((2, 3)))
    with pytest.raises(ValueError):
        SpeakerKMeans().fit(np.array([[np.nan, 1.0], [0.0, 1.0]]))


def test_diarizer_params_roundtrip():
    est = RPNSDiarizer(preset="micro", steps=3, num_speakers=2)
    assert clone(est).get_params() == est.get_params()
    est.set_params(gamma=0.7)
    assert est.gamma == 0.7


def test_diarizer_fit_predict_micro():
    X, y = corpus(4)
    est = RPNSDiarizer(preset="micro", steps=4, batch_size=2, num_speakers=2).fit(X, y)
    assert len(est.loss_history_) == 4
    assert est.speakers_ == INV.speakers
    hyps = est.predict(X)
    assert len(hyps) == 4 and all(isinstance(h, Annotation) for h in hyps)
    for h in hyps:
        assert all(0.0 <= t.start < t.end <= 1.28 + 1e-9 for t in h.turns)
    assert -10.0 < est.score(X, y) <= 1.0


def test_diarizer_rejects_bad_input():
    X, y = corpus(2)
    with pytest.raises(ValueError):
        RPNSDiarizer(preset="micro", steps=1).fit(X, y[:1])
    with pytest.raises(ValueError):
        RPNSDiarizer(preset="nope", steps=1).fit(X, y)
    with pytest.raises(NotFittedError):
        RPNSDiarizer().predict(X)
    est = RPNSDiarizer(preset="micro", steps=1).fit(X, y)
    with pytest.raises(ValueError):
        est.predict([np.zeros((9, 64))])
