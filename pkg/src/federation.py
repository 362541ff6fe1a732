"""
Simulated multi-site topology.

The lead site holds its raw data; every other site is reachable only
through encoded messages carried by a transport. Every message crosses the
byte encoding, even in-process, and the ledger counts the bytes.
"""

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence

import numpy as np

from .exceptions import ContractViolation, FederationError, IncompleteRoundError, TransportError
from .logs import get_logger
from .messages import (
    KIND_REPORT,
    GradientReport,
    MeanBroadcast,
    decode,
    encode,
    peek,
)
from .model import Covariance, ModelParams, SiteCovariance, SiteDataset, site_round_statistics
from .surrogate_em import initial_proportions

logger = get_logger(__name__)

_FRAME_LENGTH = struct.Struct(">I")

MODE_ROUND = "round"
MODE_PLUGIN = "plugin"
MODE_PROFILE = "profile"


@dataclass
class RoundTraffic:
    uplink_bytes: int = 0
    downlink_bytes: int = 0
    uplink_messages: int = 0
    downlink_messages: int = 0


@dataclass
class CommLedger:
    """Per-round byte and message counts, in both directions."""

    rounds: Dict[int, RoundTraffic] = field(default_factory=dict)

    def _round(self, round_index: int) -> RoundTraffic:
        return self.rounds.setdefault(round_index, RoundTraffic())

    def record_uplink(self, round_index: int, frames: Sequence[bytes]) -> None:
        traffic = self._round(round_index)
        traffic.uplink_bytes += sum(len(frame) for frame in frames)
        traffic.uplink_messages += len(frames)

    def record_downlink(self, round_index: int, frame: bytes, copies: int) -> None:
        traffic = self._round(round_index)
        traffic.downlink_bytes += len(frame) * copies
        traffic.downlink_messages += copies

    @property
    def uplink_bytes(self) -> int:
        return sum(t.uplink_bytes for t in self.rounds.values())

    @property
    def downlink_bytes(self) -> int:
        return sum(t.downlink_bytes for t in self.rounds.values())

    def rows(self) -> List[Dict[str, int]]:
        return [
            {
                "round": round_index,
                "uplink_bytes": t.uplink_bytes,
                "downlink_bytes": t.downlink_bytes,
                "uplink_messages": t.uplink_messages,
                "downlink_messages": t.downlink_messages,
            }
            for round_index, t in sorted(self.rounds.items())
        ]


class SiteFailure(FederationError):
    """Injected failure of one site handler."""


class SiteNode:
    """
    A participating site: owns its dataset, caches the broadcast means and
    its own proportions, and answers collect requests with a report.

    The proportion update computed for round t is committed when the round-t
    broadcast arrives, so repeated collects within a round agree.
    """

    def __init__(self, dataset: SiteDataset, site_cov: SiteCovariance, fail_on_round: Optional[int] = None):
        self.dataset = dataset
        self.site_cov = site_cov
        self.fail_on_round = fail_on_round
        self._means: Optional[np.ndarray] = None
        self._proportions: Optional[np.ndarray] = None
        self._pending: Dict[int, np.ndarray] = {}

    @property
    def site_id(self) -> int:
        return self.dataset.site_id

    def configure(self, means: np.ndarray, proportions: np.ndarray) -> None:
        self._means = np.array(means, dtype=float)
        self._proportions = np.array(proportions, dtype=float)
        self._pending.clear()

    def handle_broadcast(self, frame: bytes) -> None:
        message = decode(frame)
        if not isinstance(message, MeanBroadcast):
            raise TransportError(f"site {self.site_id} expected a broadcast", round_index=message.round_index)
        if message.means.shape[1] != self.dataset.dim:
            raise ContractViolation(
                f"site {self.site_id}: broadcast dimension {message.means.shape[1]} != data dimension {self.dataset.dim}",
                site_id=self.site_id,
            )
        if message.round_index in self._pending:
            self._proportions = self._pending.pop(message.round_index)
        self._means = message.means.copy()

    def handle_collect(self, round_index: int, mode: str = MODE_ROUND) -> bytes:
        if self.fail_on_round is not None and round_index == self.fail_on_round:
            raise SiteFailure(f"site {self.site_id} failed", round_index=round_index, site_id=self.site_id)
        if self._means is None:
            raise FederationError(f"site {self.site_id} has no means yet", round_index=round_index)

        if mode == MODE_ROUND:
            if self._proportions is None:
                raise FederationError(f"site {self.site_id} has no proportions yet", round_index=round_index)
            current = ModelParams(self._means, self._proportions)
            proportions, gradient = site_round_statistics(self.dataset, current, self.site_cov)
            report = GradientReport.from_proportions(
                self.site_id, round_index, self.dataset.n_obs, proportions, gradient
            )
            self._pending = {round_index: report.proportions}
        else:
            initial = initial_proportions(self.dataset, self._means, self.site_cov, mode)
            report = GradientReport.from_proportions(
                self.site_id, round_index, self.dataset.n_obs, initial, np.zeros(self._means.size)
            )
            self._proportions = report.proportions
        return encode(report)


class MessageLog:
    """Append-only file of length-prefixed frames."""

    def __init__(self, path):
        self.path = Path(path)

    def append(self, frame: bytes) -> None:
        with open(self.path, "ab") as f:
            f.write(_FRAME_LENGTH.pack(len(frame)))
            f.write(frame)

    def frames(self) -> Iterator[bytes]:
        with open(self.path, "rb") as f:
            while True:
                prefix = f.read(_FRAME_LENGTH.size)
                if not prefix:
                    return
                if len(prefix) < _FRAME_LENGTH.size:
                    raise TransportError(f"truncated frame length in {self.path}")
                (length,) = _FRAME_LENGTH.unpack(prefix)
                frame = f.read(length)
                if len(frame) < length:
                    raise TransportError(f"truncated frame in {self.path}")
                yield frame


class InProcessTransport:
    """Delivers frames to SiteNode handlers in this process, optionally on a thread pool."""

    def __init__(self, nodes: Sequence[SiteNode], site_workers: int = 1, log: Optional[MessageLog] = None):
        self.nodes = list(nodes)
        self.site_workers = max(1, site_workers)
        self.log = log

    @property
    def site_ids(self) -> List[int]:
        return [node.site_id for node in self.nodes]

    def configure(self, theta: ModelParams) -> None:
        for j, node in enumerate(self.nodes):
            node.configure(theta.means, theta.proportions[j])

    def broadcast(self, frame: bytes) -> None:
        if self.log is not None:
            self.log.append(frame)
        for node in self.nodes:
            node.handle_broadcast(frame)

    def collect(self, round_index: int, mode: str = MODE_ROUND) -> Dict[int, bytes]:
        def call(node: SiteNode):
            try:
                return node.site_id, node.handle_collect(round_index, mode)
            except SiteFailure as e:
                logger.warning("%s", e)
                return node.site_id, None

        if self.site_workers > 1:
            with ThreadPoolExecutor(max_workers=self.site_workers) as pool:
                results = list(pool.map(call, self.nodes))
        else:
            results = [call(node) for node in self.nodes]

        frames = {site_id: frame for site_id, frame in results if frame is not None}
        if self.log is not None:
            for site_id in self.site_ids:
                if site_id in frames:
                    self.log.append(frames[site_id])
        return frames


class ReplayTransport:
    """Serves the report frames recorded in a message log, without any site data."""

    def __init__(self, log: MessageLog):
        self._reports: Dict[int, Dict[int, bytes]] = {}
        for frame in log.frames():
            kind, round_index = peek(frame)
            if kind == KIND_REPORT:
                report = decode(frame)
                self._reports.setdefault(round_index, {})[report.site_id] = frame
        if not self._reports:
            raise TransportError(f"no reports recorded in {log.path}")
        first = min(self._reports)
        self._site_ids = list(self._reports[first])

    @property
    def site_ids(self) -> List[int]:
        return list(self._site_ids)

    def configure(self, theta: ModelParams) -> None:
        pass

    def broadcast(self, frame: bytes) -> None:
        pass

    def collect(self, round_index: int, mode: str = MODE_ROUND) -> Dict[int, bytes]:
        return dict(self._reports.get(round_index, {}))


class Federation:
    """
    The lead site's view of the network: its own data, every site's
    covariance, a transport to the sites and the communication ledger.
    """

    def __init__(self, lead: SiteDataset, covariance: Covariance, transport, lead_index: int = 0):
        self.lead = lead
        self.covariance = covariance
        self.transport = transport
        self.lead_index = lead_index
        self.ledger = CommLedger()
        self._last_collected = 0
        if covariance.n_sites != len(transport.site_ids):
            raise ContractViolation(
                f"{covariance.n_sites} covariances for {len(transport.site_ids)} sites"
            )
        if transport.site_ids[lead_index] != lead.site_id:
            raise ContractViolation(f"site at position {lead_index} is not the lead site {lead.site_id}")

    @classmethod
    def in_process(
        cls,
        datasets: Sequence[SiteDataset],
        covariance: Covariance,
        lead_index: int = 0,
        site_workers: int = 1,
        log_path=None,
        failures: Optional[Dict[int, int]] = None,
    ) -> "Federation":
        """
        Build a federation whose sites run in this process.

        Args:
            datasets: One dataset per site, in site order
            covariance: Known per-site covariances
            lead_index: Position of the lead site
            site_workers: Threads used for site handlers each round
            log_path: Optional message-log file recording every frame
            failures: Optional {site_id: round} failure injection
        """
        failures = failures or {}
        ids = [d.site_id for d in datasets]
        if len(set(ids)) != len(ids):
            raise ContractViolation(f"site ids must be unique, got {ids}")
        nodes = [
            SiteNode(dataset, covariance.site(j), failures.get(dataset.site_id))
            for j, dataset in enumerate(datasets)
        ]
        log = MessageLog(log_path) if log_path is not None else None
        return cls(datasets[lead_index], covariance, InProcessTransport(nodes, site_workers, log), lead_index)

    @property
    def site_ids(self) -> List[int]:
        return self.transport.site_ids

    @property
    def n_sites(self) -> int:
        return len(self.site_ids)

    def seed(self, theta: ModelParams) -> None:
        """Give every site the agreed starting point theta0 (its own proportion row and the means)."""
        if theta.n_sites != self.n_sites:
            raise ContractViolation(f"theta has {theta.n_sites} rows for {self.n_sites} sites")
        self.transport.configure(theta)
        self._last_collected = 0

    def initialize(self, means0: np.ndarray, mode: str = MODE_PLUGIN) -> ModelParams:
        """
        Round 0: broadcast mu0 and let each site choose its own starting proportions.

        Returns:
            theta0 assembled from the sites' initial proportion reports
        """
        if mode not in (MODE_PLUGIN, MODE_PROFILE):
            raise ContractViolation(f"unknown lambda init mode {mode!r}")
        self._last_collected = 0
        self.round_broadcast(MeanBroadcast(0, means0))
        reports = self._collect(0, mode)
        return ModelParams(means0, np.vstack([report.proportions for report in reports]))

    def round_collect(self, round_index: int, theta: ModelParams) -> List[GradientReport]:
        """Collect one report per site for the given round, in site order."""
        if theta.n_sites != self.n_sites:
            raise ContractViolation(f"theta has {theta.n_sites} rows for {self.n_sites} sites")
        return self._collect(round_index, MODE_ROUND)

    def _collect(self, round_index: int, mode: str) -> List[GradientReport]:
        frames = self.transport.collect(round_index, mode)
        missing = [site for site in self.site_ids if site not in frames]
        if missing:
            raise IncompleteRoundError(round_index, missing)
        ordered = [frames[site] for site in self.site_ids]
        reports = []
        for site, frame in zip(self.site_ids, ordered):
            report = decode(frame)
            if not isinstance(report, GradientReport) or report.site_id != site or report.round_index != round_index:
                raise TransportError(f"unexpected frame from site {site}", round_index=round_index, site_id=site)
            reports.append(report)
        self.ledger.record_uplink(round_index, ordered)
        self._last_collected = round_index
        return reports

    def round_broadcast(self, msg: MeanBroadcast) -> int:
        """Send new means to every site; returns how many sites received them."""
        if msg.round_index != self._last_collected:
            raise ContractViolation(
                f"broadcast for round {msg.round_index} after collecting round {self._last_collected}"
            )
        frame = encode(msg)
        self.transport.broadcast(frame)
        self.ledger.record_downlink(msg.round_index, frame, self.n_sites)
        return self.n_sites
