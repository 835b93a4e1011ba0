"""Failure injection, conservation, limit cases, and closed-form accuracy."""

import numpy as np
import pytest

import codedinference as ci
from codedinference import (CodeConfig, CompatibilityError, ConfigurationError,
                            SimConfig, TrainConfig, expected_accuracy, simulate)

from .conftest import make_labeled_dataset, make_toy_base


@pytest.fixture(scope="module")
def sim_setup():
    base = make_toy_base(n=8, m=4, seed=11)
    dataset = make_labeled_dataset(base, 400, seed=2)
    cfg = CodeConfig(k=2, r=1, n=8, m=4)
    trained = ci.train(dataset, base, cfg,
                       TrainConfig(epochs=2, batch_samples=16, seed=0),
                       architecture="mlp")
    return base, dataset, trained


class TestExpectedAccuracy:
    def test_no_code_figure(self):
        assert expected_accuracy(0.9347, 0.0, 0.1) == pytest.approx(0.8412, abs=1e-4)

    def test_with_code_figure(self):
        assert expected_accuracy(0.9347, 0.6466, 0.1) == pytest.approx(0.9059, abs=1e-4)

    def test_p_zero_identity(self):
        assert expected_accuracy(0.77, 0.5, 0.0) == 0.77

    def test_p_one(self):
        assert expected_accuracy(0.9, 0.6, 1.0) == pytest.approx(0.6)


class TestSimConfig:
    def test_p_out_of_range(self):
        with pytest.raises(ConfigurationError):
            SimConfig(p=1.5)
        with pytest.raises(ConfigurationError):
            SimConfig(p=-0.1)

    def test_unknown_model(self):
        with pytest.raises(ConfigurationError):
            SimConfig(p=0.1, failure_model="chaos")

    def test_unknown_policy(self):
        with pytest.raises(ConfigurationError):
            SimConfig(p=0.1, unrecoverable="shrug")


class TestLimitCases:
    def test_p_zero_equals_base_accuracy(self, sim_setup):
        base, dataset, trained = sim_setup
        result = simulate(dataset, base, trained,
                          SimConfig(p=0.0, requests=2000, seed=1))
        assert result.accuracy_with_code == result.accuracy_without_code
        assert result.recovered == 0 and result.unrecoverable == 0
        # labels equal the base argmax by construction, so base accuracy is 1
        assert result.accuracy_with_code == 1.0

    def test_p_one_bernoulli_loses_everything(self, sim_setup):
        base, dataset, trained = sim_setup
        result = simulate(dataset, base, trained,
                          SimConfig(p=1.0, requests=1000, seed=1,
                                    failure_model="independent-bernoulli"))
        assert result.accuracy_with_code == 0.0
        assert result.accuracy_without_code == 0.0
        assert result.available == 0 and result.recovered == 0
        assert result.unrecoverable == result.requests


class TestConservation:
    @pytest.mark.parametrize("model", ["per-group-capped", "independent-bernoulli"])
    @pytest.mark.parametrize("seed", [0, 1, 7])
    def test_counters_sum_to_requests(self, sim_setup, model, seed):
        base, dataset, trained = sim_setup
        result = simulate(dataset, base, trained,
                          SimConfig(p=0.2, requests=1500, seed=seed,
                                    failure_model=model))
        assert result.available + result.recovered + result.unrecoverable \
            == result.requests

    def test_requests_rounded_up_to_groups(self, sim_setup):
        base, dataset, trained = sim_setup
        result = simulate(dataset, base, trained,
                          SimConfig(p=0.1, requests=101, seed=0))
        assert result.requests == 102  # k=2


class TestCappedModel:
    def test_cap_binds_warning(self, sim_setup):
        base, dataset, trained = sim_setup
        with pytest.warns(UserWarning, match="cap binds"):
            simulate(dataset, base, trained,
                     SimConfig(p=0.9, requests=300, seed=0))

    def test_never_exceeds_resilience(self, sim_setup):
        base, dataset, trained = sim_setup
        result = simulate(dataset, base, trained,
                          SimConfig(p=0.3, requests=3000, seed=3))
        assert result.unrecoverable == 0

    def test_unavailability_fraction_converges_to_p(self, sim_setup):
        base, dataset, trained = sim_setup
        p = 0.12
        result = simulate(dataset, base, trained,
                          SimConfig(p=p, requests=100_000, seed=5))
        lost_fraction = result.recovered / result.requests
        assert lost_fraction == pytest.approx(p, abs=0.005)

    def test_with_code_beats_without(self, sim_setup):
        base, dataset, trained = sim_setup
        result = simulate(dataset, base, trained,
                          SimConfig(p=0.15, requests=20_000, seed=9))
        assert result.accuracy_with_code >= result.accuracy_without_code


class TestMonteCarloConvergence:
    def test_matches_closed_form_at_1e5_requests(self, sim_setup):
        base, dataset, trained = sim_setup
        report = ci.evaluate(trained, base, dataset)
        base_scores = base.predict_scores(dataset.images)
        base_acc = float((base_scores.argmax(1) == dataset.labels).mean())
        p = 0.1
        result = simulate(dataset, base, trained,
                          SimConfig(p=p, requests=100_000, seed=13))
        want_with = expected_accuracy(base_acc, report.overall_accuracy, p)
        want_without = expected_accuracy(base_acc, 0.0, p)
        assert result.accuracy_with_code == pytest.approx(want_with, abs=0.005)
        assert result.accuracy_without_code == pytest.approx(want_without, abs=0.005)


class TestPolicies:
    def test_random_guess_policy(self, sim_setup):
        base, dataset, trained = sim_setup
        result = simulate(dataset, base, trained,
                          SimConfig(p=1.0, requests=40_000, seed=2,
                                    failure_model="independent-bernoulli",
                                    unrecoverable="random-guess"))
        # every prediction is a uniform guess over m=4 classes
        assert result.accuracy_with_code == pytest.approx(0.25, abs=0.01)

    def test_digest_mismatch(self, sim_setup):
        base, dataset, trained = sim_setup
        other = make_toy_base(n=8, m=4, seed=55)
        with pytest.raises(CompatibilityError):
            simulate(dataset, other, trained, SimConfig(p=0.1, requests=100))

    def test_needs_labels(self, sim_setup):
        base, _, trained = sim_setup
        unlabeled = ci.synthesize(base, ci.data.uniform_sampler(), 64, seed=0)
        with pytest.raises(ConfigurationError, match="label"):
            simulate(unlabeled, base, trained, SimConfig(p=0.1, requests=100))

    def test_result_json(self, sim_setup):
        base, dataset, trained = sim_setup
        result = simulate(dataset, base, trained, SimConfig(p=0.1, requests=200))
        import json
        payload = json.loads(result.to_json())
        assert payload["requests"] == result.requests
        assert payload["failure_model"] == "per-group-capped"
