"""Tests for site messages, the transport and the round protocol."""

import numpy as np
import pytest

from src.exceptions import ContractViolation, IncompleteRoundError, TransportError
from src.federation import Federation, MessageLog, ReplayTransport
from src.messages import (
    KIND_BROADCAST,
    KIND_REPORT,
    GradientReport,
    MeanBroadcast,
    broadcast_size,
    decode,
    encode,
    peek,
    report_size,
)
from src.model import Covariance, ModelParams, SiteDataset, local_q_gradient
from src.pooled_em import EmConfig
from src.surrogate_em import plugin_proportions, run_distributed_em, update_proportions


def make_sites(n_sites=3, n=60, dim=2, seed=0):
    rng = np.random.default_rng(seed)
    datasets = []
    for j in range(n_sites):
        labels = rng.random(n) < 0.3 + 0.1 * j
        y = rng.normal(size=(n, dim)) + np.where(labels[:, None], 4.0, 0.0)
        datasets.append(SiteDataset(j, y))
    theta = ModelParams.two_class(np.full(dim, 0.5), np.full(dim, 3.5), np.linspace(0.35, 0.6, n_sites))
    return datasets, theta, Covariance.isotropic(1.0, dim, n_sites)


def test_report_shapes_and_sizes():
    """Test report and broadcast layouts for K=3 sites in d=5."""
    datasets, theta, cov = make_sites(n_sites=3, dim=5)
    fed = Federation.in_process(datasets, cov)
    fed.seed(theta)

    reports = fed.round_collect(1, theta)

    assert [r.site_id for r in reports] == [0, 1, 2]
    for report in reports:
        assert report.gradient.shape == (2, 5)
        assert report.lambda_update.shape == (1,)
        assert report.proportions.sum() == pytest.approx(1.0)
        assert len(encode(report)) == report_size(2, 5) == 32 + 8 * 11
    assert len(encode(MeanBroadcast(1, theta.means))) == broadcast_size(2, 5) == 24 + 8 * 10


def test_reports_match_direct_site_computation():
    """Test that decoded reports carry exactly the site's own update and gradient."""
    datasets, theta, cov = make_sites()
    fed = Federation.in_process(datasets, cov)
    fed.seed(theta)

    reports = fed.round_collect(1, theta)

    for j, (dataset, report) in enumerate(zip(datasets, reports)):
        view = theta.site_view(j)
        assert report.round_index == 1 and report.n_obs == dataset.n_obs
        assert np.array_equal(report.lambda_update, update_proportions(dataset, view, cov.site(j))[1:])
        assert np.array_equal(report.grad_mu, local_q_gradient(dataset, view, view, cov.site(j)))


def test_ledger_counts_every_frame():
    """Test cumulative byte counts against the fixed message sizes."""
    datasets, theta, cov = make_sites(n_sites=4, dim=3)
    fed = Federation.in_process(datasets, cov)

    trace = run_distributed_em(fed, theta, EmConfig(max_iterations=6, stop_on_convergence=False))

    assert trace.iterations == 6
    for record in trace.records[1:]:
        assert record.uplink_bytes == record.iteration * 4 * report_size(2, 3)
        assert record.downlink_bytes == record.iteration * 4 * broadcast_size(2, 3)
    rows = fed.ledger.rows()
    assert [row["round"] for row in rows] == [1, 2, 3, 4, 5, 6]
    assert all(row["uplink_messages"] == 4 and row["downlink_messages"] == 4 for row in rows)


def test_message_sizes_do_not_depend_on_sample_size():
    """Test that reports from 10 and 1000 observations are the same size."""
    sizes = []
    for n in (10, 1000):
        datasets, theta, cov = make_sites(n=n)
        fed = Federation.in_process(datasets, cov)
        run_distributed_em(fed, theta, EmConfig(max_iterations=3, stop_on_convergence=False))
        sizes.append((fed.ledger.uplink_bytes, fed.ledger.downlink_bytes))

    assert sizes[0] == sizes[1]


def test_frames_carry_no_observation_bytes(tmp_path):
    """Test that no raw observation value appears in any exchanged frame."""
    datasets, theta, cov = make_sites(n=40)
    log_path = tmp_path / "messages.bin"
    fed = Federation.in_process(datasets, cov, log_path=log_path)

    run_distributed_em(fed, theta, EmConfig(max_iterations=4, stop_on_convergence=False))

    frames = list(MessageLog(log_path).frames())
    assert len(frames) == 4 * (3 + 1)
    for dataset in datasets[1:]:
        for value in dataset.observations.ravel():
            needle = np.float64(value).astype("<f8").tobytes()
            assert not any(needle in frame for frame in frames)


def test_replay_reproduces_the_trace(tmp_path):
    """Test that replaying a message log at the lead site gives the identical trace."""
    datasets, theta, cov = make_sites()
    log_path = tmp_path / "messages.bin"
    live = run_distributed_em(Federation.in_process(datasets, cov, log_path=log_path), theta, EmConfig())

    replay = Federation(datasets[0], cov, ReplayTransport(MessageLog(log_path)))
    replayed = run_distributed_em(replay, theta, EmConfig())

    assert replayed.iterations == live.iterations
    for a, b in zip(live.records, replayed.records):
        assert np.array_equal(a.params.means, b.params.means)
        assert np.array_equal(a.params.proportions, b.params.proportions)


def test_threaded_sites_give_the_same_trace():
    """Test that running site handlers on a thread pool changes nothing."""
    datasets, theta, cov = make_sites(n_sites=5)

    serial = run_distributed_em(Federation.in_process(datasets, cov), theta, EmConfig(max_iterations=20))
    threaded = run_distributed_em(Federation.in_process(datasets, cov, site_workers=4), theta,
                                  EmConfig(max_iterations=20))

    assert serial.iterations == threaded.iterations
    for a, b in zip(serial.records, threaded.records):
        assert np.array_equal(a.params.means, b.params.means)


def test_repeated_broadcast_is_idempotent():
    """Test that delivering the same broadcast twice leaves the sites unchanged."""
    datasets, theta, cov = make_sites()
    new_means = theta.means + 0.25

    frames = []
    for copies in (1, 2):
        fed = Federation.in_process(datasets, cov)
        fed.seed(theta)
        fed.round_collect(1, theta)
        for _ in range(copies):
            assert fed.round_broadcast(MeanBroadcast(1, new_means)) == 3
        frames.append([encode(report) for report in fed.round_collect(2, theta.with_means(new_means))])

    assert frames[0] == frames[1]


def test_broadcast_dimension_mismatch_names_site():
    """Test that means of the wrong dimension are rejected by the receiving site."""
    datasets, theta, cov = make_sites()
    fed = Federation.in_process(datasets, cov)
    fed.seed(theta)

    with pytest.raises(ContractViolation) as excinfo:
        fed.round_broadcast(MeanBroadcast(0, np.zeros((2, 3))))
    assert excinfo.value.context["site_id"] == 0


def test_broadcast_must_follow_collect():
    """Test that a broadcast for a round that was not collected is rejected."""
    datasets, theta, cov = make_sites()
    fed = Federation.in_process(datasets, cov)
    fed.seed(theta)

    with pytest.raises(ContractViolation):
        fed.round_broadcast(MeanBroadcast(1, theta.means))


def test_failed_site_aborts_round():
    """Test that a site failing mid-run raises an incomplete-round error naming it."""
    datasets, theta, cov = make_sites()
    fed = Federation.in_process(datasets, cov, failures={2: 3})

    with pytest.raises(IncompleteRoundError) as excinfo:
        run_distributed_em(fed, theta, EmConfig(max_iterations=10, stop_on_convergence=False))

    assert excinfo.value.round_index == 3
    assert excinfo.value.missing == [2]


def test_initialize_uses_site_plugin_proportions():
    """Test that round 0 returns each site's own plug-in proportions."""
    datasets, theta, cov = make_sites()
    fed = Federation.in_process(datasets, cov)

    theta0 = fed.initialize(theta.means, "plugin")

    for j, dataset in enumerate(datasets):
        expected = plugin_proportions(dataset, theta.means, cov.site(j))
        assert theta0.lambdas[j] == pytest.approx(expected[1], abs=1e-15)
    assert fed.ledger.rows()[0]["round"] == 0
    with pytest.raises(ContractViolation):
        fed.initialize(theta.means, "random")


def test_non_first_lead_site():
    """Test that any site can act as the lead site."""
    datasets, theta, cov = make_sites()
    first = run_distributed_em(Federation.in_process(datasets, cov), theta, EmConfig())
    other = run_distributed_em(Federation.in_process(datasets, cov, lead_index=1), theta, EmConfig())

    assert first.converged and other.converged
    assert np.allclose(first.final.means, other.final.means, atol=1e-5)


def test_duplicate_site_ids_rejected():
    """Test that two sites with the same id cannot join one federation."""
    datasets, _, cov = make_sites(n_sites=2)

    with pytest.raises(ContractViolation):
        Federation.in_process([datasets[0], SiteDataset(0, datasets[1].observations)], cov)


def test_codec_rejects_malformed_frames():
    """Test that short, foreign or truncated frames raise transport errors."""
    report = GradientReport.from_proportions(4, 7, 30, np.array([0.4, 0.6]), np.arange(4.0))
    frame = encode(report)

    assert peek(frame) == (KIND_REPORT, 7)
    assert peek(encode(MeanBroadcast(2, np.ones((2, 2)))))[0] == KIND_BROADCAST
    decoded = decode(frame)
    assert decoded.site_id == 4 and decoded.n_obs == 30
    with pytest.raises(TransportError):
        decode(b"FDEM")
    with pytest.raises(TransportError):
        decode(b"XXXX" + frame[4:])
    with pytest.raises(TransportError):
        decode(frame[:-8])
    with pytest.raises(TransportError):
        decode(frame[:4] + b"\x09\x00" + frame[6:])


def test_report_validation():
    """Test that reports with inconsistent lengths are rejected."""
    with pytest.raises(ContractViolation):
        GradientReport(0, 1, 10, np.array([0.5, 0.1]), np.zeros(4))
    with pytest.raises(ContractViolation):
        GradientReport(0, 1, 10, np.array([0.5]), np.zeros(3))
    with pytest.raises(ContractViolation):
        GradientReport(0, 1, 0, np.array([0.5]), np.zeros(4))


def test_message_log_rejects_truncation(tmp_path):
    """Test that a truncated log and an empty replay are reported."""
    path = tmp_path / "log.bin"
    log = MessageLog(path)
    log.append(encode(MeanBroadcast(0, np.ones((2, 1)))))
    with open(path, "ab") as f:
        f.write(b"\x00\x00\x01")

    with pytest.raises(TransportError):
        list(log.frames())

    empty = MessageLog(tmp_path / "empty.bin")
    empty.path.write_bytes(b"")
    with pytest.raises(TransportError):
        ReplayTransport(empty)


def test_collect_after_broadcast_uses_new_means():
    """Test that reports after a broadcast are computed at the broadcast means."""
    datasets, theta, cov = make_sites()
    fed = Federation.in_process(datasets, cov)
    fed.seed(theta)
    first = fed.round_collect(1, theta)
    new_means = theta.means + np.array([[0.2, -0.1], [0.0, 0.3]])
    fed.round_broadcast(MeanBroadcast(1, new_means))

    reports = fed.round_collect(2, theta)

    for j, (dataset, report) in enumerate(zip(datasets, reports)):
        current = ModelParams(new_means, first[j].proportions[np.newaxis, :])
        assert np.array_equal(report.grad_mu, local_q_gradient(dataset, current, current, cov.site(j)))
