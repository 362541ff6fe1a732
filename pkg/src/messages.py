"""
Typed round messages and their canonical byte encoding.

Layout (little-endian):
    common header  16 bytes  magic "FDEM", version u16, kind u16, round u64
    report header  16 bytes  site_id u32, n_obs u32, classes u16, dim u16, reserved u32
    report payload           (classes - 1) proportions then classes * dim gradient, f8
    broadcast header 8 bytes classes u16, dim u16, reserved u32
    broadcast payload        classes * dim means, f8
"""

import struct
from dataclasses import dataclass
from typing import Union

import numpy as np

from .exceptions import ContractViolation, TransportError

MAGIC = b"FDEM"
VERSION = 1
KIND_REPORT = 1
KIND_BROADCAST = 2

_HEADER = struct.Struct("<4sHHQ")
_REPORT_HEADER = struct.Struct("<IIHHI")
_BROADCAST_HEADER = struct.Struct("<HHI")
_FLOAT = np.dtype("<f8")


def _frozen_vector(values, name: str) -> np.ndarray:
    array = np.array(values, dtype=float).ravel()
    if not np.all(np.isfinite(array)):
        raise ContractViolation(f"{name} must be finite")
    array.setflags(write=False)
    return array


@dataclass(frozen=True)
class GradientReport:
    """What one site sends the lead site each round: its proportion update and Q gradient."""

    site_id: int
    round_index: int
    n_obs: int
    lambda_update: np.ndarray
    grad_mu: np.ndarray
    n_classes: int = 2

    def __post_init__(self):
        lambda_update = _frozen_vector(self.lambda_update, "lambda_update")
        grad_mu = _frozen_vector(self.grad_mu, "grad_mu")
        if lambda_update.size != self.n_classes - 1:
            raise ContractViolation(f"lambda_update needs {self.n_classes - 1} entries, got {lambda_update.size}")
        if grad_mu.size == 0 or grad_mu.size % self.n_classes:
            raise ContractViolation(f"grad_mu length {grad_mu.size} is not a multiple of {self.n_classes}")
        if self.n_obs < 1:
            raise ContractViolation(f"site {self.site_id} reported n_obs={self.n_obs}")
        object.__setattr__(self, "lambda_update", lambda_update)
        object.__setattr__(self, "grad_mu", grad_mu)

    @classmethod
    def from_proportions(cls, site_id: int, round_index: int, n_obs: int, proportions: np.ndarray,
                         gradient: np.ndarray) -> "GradientReport":
        proportions = np.asarray(proportions, dtype=float)
        return cls(site_id, round_index, n_obs, proportions[1:], gradient, n_classes=proportions.size)

    @property
    def dim(self) -> int:
        return self.grad_mu.size // self.n_classes

    @property
    def proportions(self) -> np.ndarray:
        """The full proportion row; class 0 takes the remainder."""
        return np.concatenate([[1.0 - self.lambda_update.sum()], self.lambda_update])

    @property
    def gradient(self) -> np.ndarray:
        return self.grad_mu.reshape(self.n_classes, self.dim)


@dataclass(frozen=True)
class MeanBroadcast:
    """Updated class means sent from the lead site to every site."""

    round_index: int
    means: np.ndarray

    def __post_init__(self):
        means = np.array(self.means, dtype=float)
        if means.ndim != 2 or means.shape[0] < 2 or means.shape[1] < 1:
            raise ContractViolation(f"broadcast means must be (S, d), got shape {means.shape}")
        if not np.all(np.isfinite(means)):
            raise ContractViolation("broadcast means must be finite")
        means.setflags(write=False)
        object.__setattr__(self, "means", means)


Message = Union[GradientReport, MeanBroadcast]


def report_size(n_classes: int, dim: int) -> int:
    return _HEADER.size + _REPORT_HEADER.size + _FLOAT.itemsize * ((n_classes - 1) + n_classes * dim)


def broadcast_size(n_classes: int, dim: int) -> int:
    return _HEADER.size + _BROADCAST_HEADER.size + _FLOAT.itemsize * n_classes * dim


def encode(message: Message) -> bytes:
    if isinstance(message, GradientReport):
        header = _HEADER.pack(MAGIC, VERSION, KIND_REPORT, message.round_index)
        sub = _REPORT_HEADER.pack(message.site_id, message.n_obs, message.n_classes, message.dim, 0)
        payload = np.concatenate([message.lambda_update, message.grad_mu]).astype(_FLOAT).tobytes()
        return header + sub + payload
    if isinstance(message, MeanBroadcast):
        n_classes, dim = message.means.shape
        header = _HEADER.pack(MAGIC, VERSION, KIND_BROADCAST, message.round_index)
        sub = _BROADCAST_HEADER.pack(n_classes, dim, 0)
        return header + sub + message.means.astype(_FLOAT).tobytes()
    raise ContractViolation(f"cannot encode {type(message).__name__}")


def peek(frame: bytes):
    """(kind, round_index) of an encoded frame."""
    if len(frame) < _HEADER.size:
        raise TransportError(f"frame of {len(frame)} bytes is shorter than the header")
    magic, version, kind, round_index = _HEADER.unpack_from(frame)
    if magic != MAGIC:
        raise TransportError(f"bad magic {magic!r}")
    if version != VERSION:
        raise TransportError(f"unsupported message version {version}")
    if kind not in (KIND_REPORT, KIND_BROADCAST):
        raise TransportError(f"unknown message kind {kind}")
    return kind, round_index


def decode(frame: bytes) -> Message:
    """Inverse of encode; malformed frames raise TransportError."""
    kind, round_index = peek(frame)
    offset = _HEADER.size
    try:
        if kind == KIND_REPORT:
            site_id, n_obs, n_classes, dim, _ = _REPORT_HEADER.unpack_from(frame, offset)
            expected = report_size(n_classes, dim)
            if len(frame) != expected:
                raise TransportError(f"report frame is {len(frame)} bytes, expected {expected}")
            values = np.frombuffer(frame, dtype=_FLOAT, offset=offset + _REPORT_HEADER.size)
            return GradientReport(
                site_id, round_index, n_obs, values[:n_classes - 1], values[n_classes - 1:], n_classes
            )
        n_classes, dim, _ = _BROADCAST_HEADER.unpack_from(frame, offset)
        expected = broadcast_size(n_classes, dim)
        if len(frame) != expected:
            raise TransportError(f"broadcast frame is {len(frame)} bytes, expected {expected}")
        values = np.frombuffer(frame, dtype=_FLOAT, offset=offset + _BROADCAST_HEADER.size)
        return MeanBroadcast(round_index, values.reshape(n_classes, dim))
    except (struct.error, ContractViolation) as e:
        raise TransportError(f"malformed frame: {e}", round_index=round_index) from e
