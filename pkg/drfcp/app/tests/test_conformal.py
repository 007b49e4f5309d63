import json
import math
from fractions import Fraction

import numpy as np
import pandas as pd
import pytest

from drfcp.app.exceptions import DataError, EstimatorError
from drfcp.app.learning.conformal import (
    Calibration,
    ConstantEstimator,
    DrfStdEstimator,
    McDropoutEstimator,
    OracleEstimator,
    PredictionInterval,
    QuantileMode,
    ResidualForestEstimator,
    calibrate,
    interval_constant,
    interval_normalized,
    normalized_score,
    quantile_rank,
    run_icp,
    score,
    sigma_drf,
    sigma_mcd,
    write_intervals_csv,
)
from drfcp.app.learning.dataset import Dataset, synth_heteroskedastic, synthetic_mean, synthetic_noise_std
from drfcp.app.learning.drf import DeepRegressionTree, Forest, TreeTopology, ensemble_variance, forest_variance
from drfcp.app.learning.nn import MlpConfig, MlpModel
from drfcp.app.learning.rf import RfConfig, rf_fit


class TrueMean:
    """Point model that returns the noiseless synthetic signal."""

    def __init__(self, shift=0.0):
        self.shift = shift

    def predict(self, features):
        return synthetic_mean(features) + self.shift


def shifted(ds, c):
    return Dataset(ds.features, ds.targets + c, ids=ds.ids)


def cal_and_test(seed, n_cal=500, n_test=500):
    data = synth_heteroskedastic(n_cal + n_test, seed=seed, noise_features=1)
    return data.subset(np.arange(n_cal)), data.subset(np.arange(n_cal, n_cal + n_test))


def dropout_net(seed=0, p=0.2):
    return MlpModel.initialize(MlpConfig(layer_sizes=(16, 8, 1), dropout_prob=p, seed=seed), 3)


def flat_tree(routing, mu, sigma2=1.0):
    return DeepRegressionTree(TreeTopology(1, routing), [mu, mu], [sigma2, sigma2])


def two_input_forest(trees):
    model = MlpModel.initialize(MlpConfig(layer_sizes=(2,), dropout_prob=0.0), 2)
    model.params["W0"] = np.eye(2)
    return Forest(model, tuple(trees))


# -------------------------
# SCORES
# -------------------------

def test_score_examples():
    assert score(1.0, 1.0) == 0.0
    assert score(1.0, 3.5) == 2.5
    assert score(3.5, 1.0) == score(1.0, 3.5)


def test_normalized_score_examples():
    assert normalized_score(1.0, 2.0, 0.5) == pytest.approx(2.0)
    assert normalized_score(1.0, 2.0, 0.0, beta=0.1) == pytest.approx(10.0)
    with pytest.raises(EstimatorError, match="sigma \\+ beta must be positive"):
        normalized_score(1.0, 2.0, 0.0, beta=0.0)


# -------------------------
# CALIBRATION
# -------------------------

def test_calibrate_finite_sample_example():
    scores = np.arange(1, 11) / 10
    calibration = calibrate(scores, 0.2)
    assert calibration.k == 9
    assert calibration.q_hat == pytest.approx(0.9)


def test_calibrate_plain_example():
    assert calibrate(np.arange(1, 11) / 10, 0.2, QuantileMode.PLAIN).q_hat == pytest.approx(0.8)


def test_calibrate_single_score():
    assert calibrate([0.37], 0.6).q_hat == 0.37


def test_calibrate_is_order_free_and_allows_duplicates():
    assert calibrate([3.0, 1.0, 1.0, 2.0], 0.5).q_hat == calibrate([1.0, 2.0, 1.0, 3.0], 0.5).q_hat


def test_small_calibration_set_is_unbounded(caplog):
    calibration = calibrate([0.1, 0.2, 0.3, 0.4, 0.5], 0.1)
    assert calibration.k == 6
    assert math.isinf(calibration.q_hat)
    assert not calibration.bounded
    assert "intervals are unbounded" in caplog.text


@pytest.mark.parametrize("scores, alpha", [
    ([], 0.1),
    ([0.1, math.nan], 0.1),
    ([-0.5], 0.1),
    ([0.1], 0.0),
    ([0.1], 1.0),
])
def test_calibrate_rejects_bad_input(scores, alpha):
    with pytest.raises(DataError):
        calibrate(scores, alpha)


def test_calibrate_matches_sort_and_index_oracle():
    rng = np.random.default_rng(0)
    alphas = ["0.05", "0.1", "0.2", "0.25", "0.3", "0.5", "0.9"]
    for _ in range(10_000):
        m = int(rng.integers(1, 201))
        scores = rng.exponential(size=m).round(int(rng.integers(1, 4)))
        alpha = alphas[int(rng.integers(len(alphas)))]
        mode = QuantileMode.PLAIN if rng.random() < 0.5 else QuantileMode.FINITE_SAMPLE
        count = m + 1 if mode is QuantileMode.FINITE_SAMPLE else m
        k = max(1, math.ceil(count * (1 - Fraction(alpha))))
        expected = sorted(scores.tolist())[k - 1] if k <= m else math.inf
        assert calibrate(scores, float(alpha), mode).q_hat == expected


def test_q_hat_grows_as_alpha_shrinks():
    scores = np.random.default_rng(1).exponential(size=200)
    q = [calibrate(scores, alpha).q_hat for alpha in (0.5, 0.3, 0.2, 0.1, 0.05, 0.01)]
    assert q == sorted(q)


def test_quantile_rank_tolerates_float_products():
    # (m + 1) * 0.8 is not exact in binary
    assert quantile_rank(10, 0.2) == 9
    assert quantile_rank(19, 0.2) == 16
    assert quantile_rank(3, 0.9, QuantileMode.PLAIN) == 1


def test_calibration_payload():
    calibration = calibrate([0.4, 0.1, 0.3], 0.5, beta=0.2)
    payload = json.loads(json.dumps(calibration.to_dict()))
    assert payload["scores"] == [0.1, 0.3, 0.4]
    assert (payload["m"], payload["k"], payload["mode"]) == (3, 2, "finite_sample")
    assert Calibration.from_dict(payload).q_hat == calibration.q_hat
    unbounded = calibrate([0.1], 0.1).to_dict(include_scores=False)
    assert unbounded["q_hat"] is None and unbounded["bounded"] is False
    assert "scores" not in unbounded


# -------------------------
# INTERVALS
# -------------------------

def test_interval_constant_examples():
    interval = interval_constant(1.0, 0.5)
    assert (interval.lower, interval.upper) == (0.5, 1.5)
    assert interval.width == 1.0
    point = interval_constant(2.0, 0.0)
    assert point.lower == point.upper == 2.0
    unbounded = interval_constant(2.0, math.inf)
    assert not unbounded.bounded
    assert unbounded.contains(1e300)


def test_interval_normalized_examples():
    interval = interval_normalized(1.0, 0.3, 2.0, beta=0.1)
    assert interval.lower == pytest.approx(0.2)
    assert interval.upper == pytest.approx(1.8)
    point = interval_normalized(1.0, 0.0, 2.0)
    assert point.width == 0.0
    assert not interval_normalized(1.0, 0.0, math.inf).bounded


def test_interval_width_is_linear_in_scale():
    sigma = np.array([0.2, 0.5, 1.0])
    single = interval_normalized(np.zeros(3), sigma, 1.7, beta=0.05)
    double = interval_normalized(np.zeros(3), 2 * sigma, 1.7, beta=0.1)
    np.testing.assert_allclose(double.width, 2 * single.width, rtol=1e-15)


def test_intervals_reject_negative_quantile():
    with pytest.raises(DataError):
        interval_constant(0.0, -1.0)
    with pytest.raises(DataError):
        interval_normalized(0.0, 1.0, -0.1)


def test_interval_bounds_must_be_ordered():
    with pytest.raises(DataError):
        PredictionInterval(2.0, 1.0)
    assert PredictionInterval(1.0, 3.0).center == 2.0


def test_batch_intervals_index_to_single_interval():
    intervals = interval_constant(np.array([0.0, 10.0]), 1.0)
    assert len(intervals) == 2
    assert intervals[1] == PredictionInterval(9.0, 11.0)
    np.testing.assert_array_equal(intervals.covers([0.5, 12.0]), [True, False])


# -------------------------
# SIGMA SOURCES
# -------------------------

def test_sigma_mcd_of_a_zero_network_is_zero():
    model = dropout_net()
    for name in model.params:
        model.params[name] = np.zeros_like(model.params[name])
    np.testing.assert_array_equal(sigma_mcd(model, np.ones((4, 3)), passes=10), 0.0)


def test_sigma_mcd_is_seeded():
    model = dropout_net(1)
    x = np.random.default_rng(1).normal(size=(6, 3))
    np.testing.assert_array_equal(sigma_mcd(model, x, 20, seed=4), sigma_mcd(model, x, 20, seed=4))
    assert np.all(sigma_mcd(model, x, 20, seed=4) >= 0)


def test_sigma_mcd_rejects_dropout_free_networks():
    with pytest.raises(EstimatorError, match="dropout_prob > 0"):
        sigma_mcd(dropout_net(p=0.0), np.ones((2, 3)))
    with pytest.raises(EstimatorError, match="at least 2 passes"):
        sigma_mcd(dropout_net(), np.ones((2, 3)), passes=1)


def test_sigma_mcd_converges_across_seeds():
    model = dropout_net(2, p=0.3)
    x = np.random.default_rng(2).normal(size=(3, 3))
    a = sigma_mcd(model, x, 10_000, seed=1)
    b = sigma_mcd(model, x, 10_000, seed=2)
    np.testing.assert_allclose(a, b, rtol=0.05)


def test_sigma_drf_with_identical_trees_has_no_ensemble_term():
    forest = two_input_forest([flat_tree([0], 1.0, 0.5)] * 3)
    x = np.random.default_rng(0).normal(size=(4, 2))
    np.testing.assert_allclose(sigma_drf(forest, x, include_ensemble=True), np.sqrt(forest_variance(forest, x)))


def test_sigma_drf_ensemble_term_is_additive():
    forest = two_input_forest([flat_tree([0], 1.0), flat_tree([1], 4.0, 2.0)])
    x = np.random.default_rng(1).normal(size=(5, 2))
    difference = sigma_drf(forest, x, True) - sigma_drf(forest, x, False)
    np.testing.assert_allclose(difference, np.sqrt(ensemble_variance(forest, x)))


def test_sigma_drf_of_unit_variance_leaves_is_one():
    forest = two_input_forest([flat_tree([0], 3.0), flat_tree([1], 3.0)])
    np.testing.assert_allclose(sigma_drf(forest, np.zeros((3, 2))), 1.0)


# -------------------------
# ESTIMATORS
# -------------------------

def test_estimator_names_and_flags():
    forest = two_input_forest([flat_tree([0], 0.0)])
    assert ConstantEstimator().normalized is False
    np.testing.assert_array_equal(ConstantEstimator().sigma(np.zeros((3, 2))), 1.0)
    assert DrfStdEstimator(forest).name == "drf_std"
    assert DrfStdEstimator(forest, include_ensemble=True).name == "drf_std_plus_ensemble"
    assert McDropoutEstimator(dropout_net()).name == "mcd"


def test_estimator_rejects_negative_sigma():
    estimator = OracleEstimator(lambda features: features[:, 0])
    with pytest.raises(EstimatorError, match="oracle"):
        estimator.sigma(np.array([[1.0], [-1.0]]))


def test_residual_forest_estimator_uses_forest_predictions():
    X = np.random.default_rng(3).normal(size=(30, 2))
    forest = rf_fit(X, np.abs(X[:, 0]), RfConfig(n_trees=3))
    np.testing.assert_array_equal(ResidualForestEstimator(forest).sigma(X), forest.predict(X))


def test_mc_dropout_calibration_and_test_sigma_use_separate_streams():
    model = dropout_net(3)
    cal, _ = cal_and_test(4, 40, 1)
    estimator = McDropoutEstimator(model, 20, seed=5, calibration_seed=9)
    # same rows on both sides, so only the seeds tell calibration and test apart
    result = run_icp(model, estimator, cal, cal, 0.2, beta=0.01)
    cal_sigma = sigma_mcd(model, cal.features, 20, seed=9)
    np.testing.assert_array_equal(result.sigma, sigma_mcd(model, cal.features, 20, seed=5))
    assert not np.array_equal(result.sigma, cal_sigma)
    expected = normalized_score(np.asarray(model.predict(cal.features)).reshape(-1), cal.targets, cal_sigma, 0.01)
    np.testing.assert_array_equal(result.calibration.scores, np.sort(expected))


def test_mc_dropout_streams_must_differ():
    assert McDropoutEstimator(dropout_net(), seed=3).calibration_seed == 4
    with pytest.raises(EstimatorError, match="different seeds"):
        McDropoutEstimator(dropout_net(), seed=3, calibration_seed=3)


# -------------------------
# ICP
# -------------------------

def test_constant_estimator_is_traditional_icp():
    cal, test = cal_and_test(0, 50, 20)
    model = TrueMean()
    result = run_icp(model, ConstantEstimator(), cal, test, alpha=0.1, beta=3.0)
    q_hat = calibrate(score(model.predict(cal.features), cal.targets), 0.1).q_hat
    assert result.calibration.q_hat == q_hat
    assert result.calibration.beta == 0.0
    np.testing.assert_allclose(result.intervals.width, 2 * q_hat, rtol=1e-12)


def test_shifting_targets_and_predictions_shifts_intervals():
    cal, test = cal_and_test(1, 100, 50)
    estimator = OracleEstimator(synthetic_noise_std)
    base = run_icp(TrueMean(), estimator, cal, test, 0.2)
    moved = run_icp(TrueMean(7.5), estimator, shifted(cal, 7.5), shifted(test, 7.5), 0.2)
    assert moved.calibration.q_hat == pytest.approx(base.calibration.q_hat, rel=1e-12)
    np.testing.assert_allclose(moved.intervals.lower, base.intervals.lower + 7.5, atol=1e-12)
    np.testing.assert_array_equal(moved.covered(), base.covered())


def test_scaling_sigma_leaves_normalized_intervals_unchanged():
    cal, test = cal_and_test(2, 100, 50)
    base = run_icp(TrueMean(), OracleEstimator(synthetic_noise_std), cal, test, 0.1)
    scaled = run_icp(TrueMean(), OracleEstimator(lambda x: 4.0 * synthetic_noise_std(x)), cal, test, 0.1)
    assert scaled.calibration.q_hat == pytest.approx(base.calibration.q_hat / 4.0, rel=1e-12)
    np.testing.assert_allclose(scaled.intervals.lower, base.intervals.lower, rtol=1e-12)
    np.testing.assert_allclose(scaled.intervals.upper, base.intervals.upper, rtol=1e-12)


def test_zero_sigma_without_beta_fails_calibration():
    cal, test = cal_and_test(3, 20, 5)
    with pytest.raises(EstimatorError):
        run_icp(TrueMean(), OracleEstimator(lambda x: np.zeros(len(x))), cal, test, 0.1)


def test_empty_calibration_set():
    _, test = cal_and_test(3, 20, 5)
    empty = Dataset(np.zeros((0, test.n_features)), np.zeros(0))
    with pytest.raises(DataError, match="calibration set is empty"):
        run_icp(TrueMean(), ConstantEstimator(), empty, test, 0.1)


@pytest.mark.parametrize("alpha", [0.1, 0.2, 0.3])
def test_marginal_coverage_holds_on_exchangeable_data(alpha):
    coverages = []
    for seed in range(20):
        cal, test = cal_and_test(100 + seed)
        result = run_icp(TrueMean(), ConstantEstimator(), cal, test, alpha)
        coverages.append(result.covered().mean())
    assert np.mean(coverages) >= 1 - alpha - 0.03


def test_oracle_sigma_gives_conditional_coverage_across_noise_levels():
    # bins over the true noise scale: low, middle and high heteroskedasticity
    per_bin = {0: [], 1: [], 2: []}
    for seed in range(20):
        cal, test = cal_and_test(200 + seed)
        result = run_icp(TrueMean(), OracleEstimator(synthetic_noise_std), cal, test, 0.1)
        bins = np.digitize(synthetic_noise_std(test.features), [0.6, 1.1])
        covered = result.covered()
        for b in per_bin:
            per_bin[b].append(covered[bins == b].mean())
    for b, values in per_bin.items():
        assert np.mean(values) == pytest.approx(0.9, abs=0.05), b


# -------------------------
# OUTPUT
# -------------------------

def test_result_frames_and_csv(tmp_path):
    cal, test = cal_and_test(4, 30, 6)
    result = run_icp(TrueMean(), OracleEstimator(synthetic_noise_std), cal, test, 0.2)
    frame = result.to_frame()
    assert list(frame.columns) == ["id", "prediction", "sigma", "lower", "upper", "target", "covered"]
    assert set(frame["covered"]) <= {0, 1}

    plot = result.plot_frame()
    assert list(plot["rank"]) == list(range(6))
    assert plot["prediction"].is_monotonic_increasing

    path = write_intervals_csv(result, tmp_path / "intervals.csv")
    assert path.read_text().splitlines()[0] == "id,prediction,sigma,lower,upper,target,covered"
    restored = pd.read_csv(path, float_precision="round_trip")
    np.testing.assert_array_equal(restored["upper"].to_numpy(), result.intervals.upper)
