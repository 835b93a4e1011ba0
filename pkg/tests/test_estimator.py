"""The sklearn-style facade: params protocol, fit/transform/predict/score."""

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

import codedinference as ci
from codedinference import ConfigurationError, ErasureCodeEstimator

from .conftest import make_labeled_dataset, make_toy_base


@pytest.fixture(scope="module")
def fitted():
    base = make_toy_base(n=8, m=4, seed=11)
    ds = make_labeled_dataset(base, 240, seed=4)
    est = ErasureCodeEstimator(base_model=base, k=2, r=1, encoder="mlp",
                               loss="mse-base", epochs=2, batch_samples=16,
                               seed=0)
    est.fit(ds.images, ds.labels)
    return base, ds, est


class TestSklearnProtocol:
    def test_get_params_roundtrip(self):
        est = ErasureCodeEstimator(k=5, encoder="conv", learning_rate=0.01)
        params = est.get_params()
        assert params["k"] == 5
        assert params["encoder"] == "conv"
        est.set_params(k=2)
        assert est.k == 2

    def test_clone(self):
        base = make_toy_base()
        est = ErasureCodeEstimator(base_model=base, k=2, epochs=3)
        twin = clone(est)
        assert twin.base_model.param_digest == base.param_digest
        assert twin.epochs == 3
        assert not hasattr(twin, "trained_code_")

    def test_not_fitted_errors(self):
        est = ErasureCodeEstimator(base_model=make_toy_base())
        with pytest.raises(NotFittedError):
            est.predict(np.zeros((4, 1, 4, 4), np.float32))

    def test_fit_requires_base_model(self):
        est = ErasureCodeEstimator()
        with pytest.raises(ConfigurationError):
            est.fit(np.zeros((16, 1, 4, 4), np.float32))


class TestFit:
    def test_fit_returns_self_and_sets_state(self, fitted):
        _, _, est = fitted
        assert hasattr(est, "trained_code_")
        assert hasattr(est, "encoder_")
        assert hasattr(est, "decoder_")
        assert est.config_.k == 2
        assert est.history_

    def test_geometry_checked_against_base(self):
        base = make_toy_base(n=4, m=3)
        est = ErasureCodeEstimator(base_model=base, epochs=1, batch_samples=4)
        with pytest.raises(ConfigurationError):
            est.fit(np.zeros((32, 1, 8, 8), np.float32))


class TestTransformPredictScore:
    def test_transform_shapes(self, fitted):
        _, ds, est = fitted
        parities = est.transform(ds.images[:20])
        assert parities.shape == (10, 1, 1, 8, 8)

    def test_predict_labels(self, fitted):
        _, ds, est = fitted
        pred = est.predict(ds.images[:40])
        assert pred.shape == (40,)
        assert set(np.unique(pred)).issubset(set(range(4)))

    def test_group_multiple_enforced(self, fitted):
        _, ds, est = fitted
        with pytest.raises(ConfigurationError, match="multiple"):
            est.predict(ds.images[:41])

    def test_score_overall_matches_manual(self, fitted):
        _, ds, est = fitted
        X, y = ds.images[:60], ds.labels[:60]
        assert est.score(X, y) == pytest.approx((est.predict(X) == y).mean())

    def test_score_without_labels_is_recovery(self, fitted):
        base, ds, est = fitted
        X = ds.images[:60]
        score = est.score(X)
        base_pred = base.predict_scores(X).argmax(axis=1)
        assert score == pytest.approx((est.predict(X) == base_pred).mean())

    def test_predict_consistent_with_evaluate_for_r1(self, fitted):
        base, ds, est = fitted
        usable = (len(ds) // 2) * 2
        X = ds.images[:usable]
        # per-position own-erasure equals the r=1 scenario sweep
        report = ci.evaluate(est.trained_code_, base, ds)
        assert est.score(X) == pytest.approx(report.recovery_accuracy, abs=1e-9)
