"""Tests for distances, SNR, the initialization check and aggregation."""

import math

import numpy as np
import pytest

from src.exceptions import ContractViolation
from src.metrics import (
    EstimatorOutcome,
    ReplicationSummary,
    aggregate,
    align_labels,
    approximation_error,
    best_label_order,
    condition1_radius_check,
    condition1_terms,
    d2_full,
    d2_site,
    snr,
)
from src.model import Covariance, ModelParams


def params(mu0, mu1, lambdas):
    return ModelParams.two_class(mu0, mu1, lambdas)


def test_d2_of_identical_parameters_is_zero():
    """Test that a parameter set is at distance zero from itself."""
    theta = params([1.0, 2.0], [3.0, 4.0], [0.3, 0.6])

    assert d2_full(theta, theta) == 0.0


def test_d2_single_lambda_difference():
    """Test that one lambda off by delta gives d2 = delta."""
    a = params([0.0], [5.0], [0.3, 0.6])
    b = params([0.0], [5.0], [0.3, 0.65])

    assert d2_full(a, b) == pytest.approx(0.05, abs=1e-15)


def test_d2_matches_hand_oracle():
    """Test d2 on a worked example."""
    a = params([3.0, 4.0], [1.0, 1.0], [0.4, 0.5])
    b = params([0.0, 0.0], [1.0, 1.0], [0.3, 0.3])

    assert d2_full(a, b, align=False) == pytest.approx(math.sqrt(0.01 + 0.04) + 5.0)


def test_d2_aligns_swapped_labels():
    """Test that a label-swapped copy is at distance zero after alignment."""
    theta = params([0.0, 0.0], [3.0, 3.0], [0.3])

    assert d2_full(theta.swap_labels(), theta) == pytest.approx(0.0, abs=1e-15)
    assert d2_full(theta.swap_labels(), theta, align=False) > 0.0
    assert np.array_equal(align_labels(theta.swap_labels(), theta).means, theta.means)


def test_two_class_alignment_compares_summed_distances():
    """Test that two classes are matched on summed distances, not squared ones."""
    reference = np.array([[0.0, 0.0], [1.0, 0.0]])
    means = np.array([[-1.41, -2.53], [-1.25, 0.08]])
    theta = ModelParams(means, [[0.3, 0.7]])
    theta_ref = ModelParams(reference, [[0.3, 0.7]])

    assert best_label_order(means, reference) == [1, 0]
    assert d2_full(theta, theta_ref) == pytest.approx(d2_full(theta.swap_labels(), theta_ref, align=False))
    outcome = EstimatorOutcome.from_estimate("pooled", means, theta_ref)
    assert outcome.means.tolist() == means[::-1].tolist()


def test_two_class_alignment_swaps_on_ties():
    """Test that equal summed distances swap the labels."""
    assert best_label_order(np.array([[1.0], [1.0]]), np.array([[0.0], [2.0]])) == [1, 0]
    assert best_label_order(np.array([[0.1], [1.9]]), np.array([[0.0], [2.0]])) == [0, 1]


def test_three_class_alignment_searches_permutations():
    """Test that larger models pick the closest permutation."""
    reference = np.array([[0.0], [5.0], [10.0]])

    assert best_label_order(np.array([[10.2], [0.1], [4.9]]), reference) == [1, 2, 0]


def test_d2_is_a_metric():
    """Test symmetry and the triangle inequality on random parameters."""
    rng = np.random.default_rng(0)
    thetas = [params(rng.normal(size=3), rng.normal(size=3), rng.uniform(0.1, 0.9, size=4)) for _ in range(3)]
    a, b, c = thetas

    assert d2_full(a, b, align=False) == pytest.approx(d2_full(b, a, align=False))
    assert d2_full(a, c, align=False) <= d2_full(a, b, align=False) + d2_full(b, c, align=False) + 1e-12


def test_d2_site_needs_single_site_views():
    """Test the per-site distance and its shape requirement."""
    a = params([0.0], [2.0], [0.3, 0.4])
    b = params([0.0], [2.5], [0.5, 0.4])

    assert d2_site(a.site_view(0), b.site_view(0)) == pytest.approx(0.2 + 0.5)
    with pytest.raises(ContractViolation):
        d2_site(a, b)


def test_d2_rejects_mismatched_shapes():
    """Test that parameters of different shapes cannot be compared."""
    with pytest.raises(ContractViolation):
        d2_full(params([0.0], [1.0], [0.5]), params([0.0], [1.0], [0.5, 0.5]))


def test_approximation_error():
    """Test the relative error and its zero-reference guard."""
    mu_hat = np.array([[1.0, 2.0], [3.0, 4.0]])

    assert approximation_error(2 * mu_hat, mu_hat) == pytest.approx(1.0)
    assert approximation_error(mu_hat, mu_hat) == 0.0
    assert approximation_error(7 * (mu_hat + 0.1), 7 * mu_hat) == pytest.approx(
        approximation_error(mu_hat + 0.1, mu_hat))
    with pytest.raises(ContractViolation):
        approximation_error(mu_hat, np.zeros((2, 2)))


def test_snr():
    """Test the Mahalanobis separation on simple and study settings."""
    assert snr(np.array([1.0, 0.0]), np.zeros(2), np.eye(2)) == pytest.approx(1.0)
    assert snr(np.full(5, 5.0), np.full(5, 4.0), 2.5 * np.eye(5)) == pytest.approx(math.sqrt(2.0))


def test_snr_is_rotation_invariant():
    """Test that rotating the means and covariance leaves the SNR unchanged."""
    rng = np.random.default_rng(1)
    q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    a = rng.normal(size=(3, 3))
    sigma = a @ a.T + np.eye(3)
    mu1, mu0 = rng.normal(size=3), rng.normal(size=3)

    rotated = snr(q @ mu1, q @ mu0, q @ sigma @ q.T)

    assert rotated == pytest.approx(snr(mu1, mu0, sigma), rel=1e-10)


def test_condition1_passes_at_truth():
    """Test that the true parameters always satisfy the radius check."""
    truth = params(np.full(5, 4.0), np.full(5, 5.0), [0.45, 0.55])
    cov = Covariance.isotropic(2.5, 5, 2)

    report = condition1_radius_check(truth, truth, cov, c0=0.05, c1=0.75, cw=0.1)

    assert report.passed
    assert report.distance == 0.0
    assert report.snr == pytest.approx(math.sqrt(2.0))
    assert report.radius == pytest.approx(min(report.terms.values()))
    assert report.threshold == pytest.approx(report.radius * report.snr)
    assert set(report.as_row()) >= {"snr", "init_d2", "radius", "threshold", "passed", "term_means"}


def test_condition1_fails_far_from_truth():
    """Test that a distant start fails the radius check without raising."""
    truth = params(np.full(2, 4.0), np.full(2, 5.0), [0.5])
    start = params(np.full(2, -10.0), np.full(2, 20.0), [0.5])

    report = condition1_radius_check(start, truth, np.eye(2) * 2.5, c0=0.05, c1=0.75, cw=0.1, eigen_bound=2.5)

    assert not report.passed


def test_condition1_rejects_bad_constants():
    """Test that constants outside 0 < c0 <= cw < 1/2 < c1 < 1 are rejected."""
    with pytest.raises(ContractViolation):
        condition1_terms(0.2, 0.75, 0.1, 2.0, 1.0)
    with pytest.raises(ContractViolation):
        condition1_terms(0.1, 0.4, 0.2, 2.0, 1.0)
    with pytest.raises(ContractViolation):
        condition1_terms(0.1, 0.75, 0.2, 0.5, 1.0)
    with pytest.raises(ContractViolation):
        condition1_terms(0.1, 0.75, 0.2, 2.0, 0.0)


def summaries(estimates, truth, name="pooled"):
    return [
        ReplicationSummary(r, {name: EstimatorOutcome.from_estimate(name, means, truth)})
        for r, means in enumerate(estimates)
    ]


def test_aggregate_constant_estimates():
    """Test that identical estimates give their bias, zero variance and matching MSE."""
    truth = params([0.0, 0.0], [5.0, 5.0], [0.5])
    estimate = np.array([[0.2, 0.0], [5.0, 5.0]])

    stats = aggregate(summaries([estimate] * 4, truth))["pooled"]

    assert stats.bias == pytest.approx(0.2)
    assert stats.variance == 0.0
    assert stats.mse == pytest.approx(0.04 / 4)
    assert stats.replications == 4 and stats.failures == 0


def test_aggregate_two_point_variance():
    """Test the unbiased variance of two tracked values."""
    truth = params([0.0], [5.0], [0.5])

    stats = aggregate(summaries([np.array([[1.0], [5.0]]), np.array([[-1.0], [5.0]])], truth))["pooled"]

    assert stats.bias == 0.0
    assert stats.variance == pytest.approx(2.0)


def test_aggregate_matches_numpy_oracle():
    """Test five replications against numpy mean and ddof=1 variance."""
    rng = np.random.default_rng(2)
    truth = params(np.zeros(3), np.full(3, 6.0), [0.5])
    estimates = [truth.means + rng.normal(size=(2, 3)) * 0.1 for _ in range(5)]

    stats = aggregate(summaries(estimates, truth))["pooled"]

    tracked = np.array([e[0, 0] for e in estimates])
    assert stats.bias == pytest.approx(tracked.mean())
    assert stats.variance == pytest.approx(tracked.var(ddof=1))
    assert stats.mse == pytest.approx(np.mean([np.mean((e - truth.means) ** 2) for e in estimates]))


def test_aggregate_aligns_labels_and_counts_failures():
    """Test that swapped estimates are aligned and failures are excluded."""
    truth = params([0.0], [5.0], [0.5])
    good = summaries([np.array([[5.0], [0.5]]), np.array([[0.5], [5.0]])], truth)
    failed = ReplicationSummary(2, {"pooled": EstimatorOutcome.failure("pooled", "DegenerateClassError")})

    stats = aggregate(good + [failed])["pooled"]

    assert stats.bias == pytest.approx(0.5)
    assert stats.replications == 2 and stats.failures == 1


def test_aggregate_needs_two_replications():
    """Test that a single replication cannot be aggregated."""
    truth = params([0.0], [5.0], [0.5])

    with pytest.raises(ContractViolation):
        aggregate(summaries([truth.means], truth))


def test_outcome_records_truth_distance():
    """Test that an outcome with proportions carries d2 to the truth."""
    truth = params([0.0], [5.0], [0.4])

    outcome = EstimatorOutcome.from_estimate("distributed", [[5.0], [0.0]], truth, proportions=[[0.4, 0.6]])

    assert outcome.means.tolist() == [[0.0], [5.0]]
    assert outcome.truth_distance == pytest.approx(0.0, abs=1e-15)
