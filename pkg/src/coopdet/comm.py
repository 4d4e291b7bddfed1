"""Inter-agent transmission: frame transforms, wire format, byte accounting.

Wire layout (little-endian): header [sender: u32][timestamp_ms: u64]
[count: u32], then per entry [idx_row: f32][idx_col: f32][feature: f32 x C]
[confidence: f32]. The payload (entry section) is exactly
count * (C + 3) * 4 bytes.

Byte accounting reports two numbers per frame. ``ab_paper`` counts
(C + 2) float32 values per entry -- index plus feature, the convention
used for cross-method comparison tables. ``ab_wire`` counts the (C + 3)
values actually on the wire, confidence included. Both are log2 of the
per-frame byte total.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation, PacketDecodeError
from .extractor import SemDB
from .grid import VoxelSpec, wrap_pi

HEADER = struct.Struct("<IQI")
HEADER_BYTES = HEADER.size  # 16


@dataclass(frozen=True)
class Pose:
    """2D rigid pose: position in meters, heading in radians, (-pi, pi]."""

    x: float
    y: float
    heading: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y) and math.isfinite(self.heading)):
            raise ContractViolation("pose must be finite")
        if not -math.pi < self.heading <= math.pi:
            raise ContractViolation("heading must be normalized to (-pi, pi]")

    def to_world(self, xy: np.ndarray) -> np.ndarray:
        xy = np.asarray(xy, np.float64)
        c, s = math.cos(self.heading), math.sin(self.heading)
        out = np.empty_like(xy)
        out[..., 0] = xy[..., 0] * c - xy[..., 1] * s + self.x
        out[..., 1] = xy[..., 0] * s + xy[..., 1] * c + self.y
        return out

    def to_local(self, xy: np.ndarray) -> np.ndarray:
        xy = np.asarray(xy, np.float64)
        c, s = math.cos(self.heading), math.sin(self.heading)
        dx = xy[..., 0] - self.x
        dy = xy[..., 1] - self.y
        out = np.empty_like(xy)
        out[..., 0] = dx * c + dy * s
        out[..., 1] = -dx * s + dy * c
        return out


def transform_to_ego(
    semdbs: list[SemDB], sender_pose: Pose, ego_pose: Pose, spec: VoxelSpec
) -> list[SemDB]:
    """Re-express SemDB positions in the ego frame; features untouched.

    Positions landing outside the ego's grid are dropped.
    """
    h, w = spec.shape
    out = []
    for db in semdbs:
        xy_sender = spec.to_metric(db.index)
        xy_ego = ego_pose.to_local(sender_pose.to_world(xy_sender))
        rc = spec.to_base_units(xy_ego)
        if 0.0 <= rc[0] < h and 0.0 <= rc[1] < w:
            out.append(
                SemDB(rc, db.confidence, db.feature, db.source_agent, db.timestamp_ms)
            )
    return out


@dataclass(frozen=True)
class CommPacket:
    """Serialized SemDB set from one agent at one timestamp."""

    sender: int
    timestamp_ms: int
    indices: np.ndarray  # (n, 2) float32
    features: np.ndarray  # (n, C) float32
    confidences: np.ndarray  # (n,) float32

    def __post_init__(self):
        idx = np.ascontiguousarray(self.indices, np.float32).reshape(-1, 2)
        feats = np.ascontiguousarray(self.features, np.float32)
        conf = np.ascontiguousarray(self.confidences, np.float32).ravel()
        if feats.ndim != 2 or feats.shape[0] != idx.shape[0] or conf.shape[0] != idx.shape[0]:
            raise ContractViolation("packet arrays disagree in length")
        if idx.size and not (
            np.isfinite(idx).all() and np.isfinite(feats).all() and np.isfinite(conf).all()
        ):
            raise ContractViolation("packet entries must be finite")
        for a in (idx, feats, conf):
            a.flags.writeable = False
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "confidences", conf)

    @property
    def n_entries(self) -> int:
        return self.indices.shape[0]

    @property
    def channels(self) -> int:
        return self.features.shape[1]

    @property
    def payload_bytes(self) -> int:
        return self.n_entries * (self.channels + 2 + 1) * 4

    def entry_bytes(self) -> bytes:
        """The payload section: one (row, col, feature..., conf) record per entry."""
        block = np.concatenate(
            [self.indices, self.features, self.confidences[:, None]], axis=1
        ).astype(np.float32)
        return block.tobytes(order="C")

    def to_bytes(self) -> bytes:
        return HEADER.pack(self.sender, self.timestamp_ms, self.n_entries) + self.entry_bytes()

    @classmethod
    def from_bytes(cls, buf: bytes, channels: int) -> "CommPacket":
        if len(buf) < HEADER_BYTES:
            raise PacketDecodeError(len(buf), "truncated header")
        sender, ts, count = HEADER.unpack_from(buf, 0)
        rec = channels + 3
        expected = HEADER_BYTES + count * rec * 4
        if len(buf) != expected:
            raise PacketDecodeError(
                min(len(buf), expected), f"expected {expected} bytes, got {len(buf)}"
            )
        block = np.frombuffer(buf, np.dtype("<f4"), offset=HEADER_BYTES).reshape(count, rec)
        if count and not np.isfinite(block).all():
            bad = int(np.argwhere(~np.isfinite(block))[0, 0])
            raise PacketDecodeError(HEADER_BYTES + bad * rec * 4, "non-finite entry")
        return cls(sender, ts, block[:, :2], block[:, 2:2 + channels], block[:, 2 + channels])


def serialize(semdbs: list[SemDB], sender: int, timestamp_ms: int, channels: int | None = None) -> CommPacket:
    """Pack SemDBs into a float32 packet."""
    if semdbs:
        channels = semdbs[0].feature.shape[0]
    elif channels is None:
        raise ContractViolation("channel count needed for an empty packet")
    n = len(semdbs)
    idx = np.zeros((n, 2), np.float32)
    feats = np.zeros((n, channels), np.float32)
    conf = np.zeros(n, np.float32)
    for i, db in enumerate(semdbs):
        idx[i] = db.index
        feats[i] = db.feature
        conf[i] = db.confidence
    return CommPacket(sender, timestamp_ms, idx, feats, conf)


def deserialize(packet: CommPacket) -> list[SemDB]:
    """Unpack a packet back into SemDBs (float32 precision)."""
    return [
        SemDB(
            packet.indices[i].astype(np.float64),
            float(packet.confidences[i]),
            packet.features[i].astype(np.float64),
            packet.sender,
            packet.timestamp_ms,
        )
        for i in range(packet.n_entries)
    ]


@dataclass(frozen=True)
class FrameCost:
    """Per-frame communication volume on the log2-bytes scale."""

    total_bytes_paper: int
    total_bytes_wire: int
    ab_paper: float
    ab_wire: float
    no_communication: bool


def frame_cost_from_counts(entries: list[tuple[int, int]]) -> FrameCost:
    """Cost of one frame given (n_entries, channels) per collaborator packet."""
    paper = sum(m * (c + 2) * 4 for m, c in entries)
    wire = sum(m * (c + 3) * 4 for m, c in entries)
    if wire == 0:
        return FrameCost(0, 0, 0.0, 0.0, True)
    return FrameCost(paper, wire, math.log2(paper), math.log2(wire), False)


def transmission_cost(packets: list[CommPacket]) -> FrameCost:
    """Cost of one frame's incoming collaborator packets."""
    return frame_cost_from_counts([(p.n_entries, p.channels) for p in packets])


def dataset_ab(costs: list[FrameCost]) -> tuple[float, float, bool]:
    """Mean per-frame AB over communicating frames.

    Returns (ab_paper, ab_wire, no_communication); frames with zero bytes
    are excluded from the mean and flagged if nothing communicates.
    """
    live = [c for c in costs if not c.no_communication]
    if not live:
        return 0.0, 0.0, True
    return (
        sum(c.ab_paper for c in live) / len(live),
        sum(c.ab_wire for c in live) / len(live),
        False,
    )


class Channel:
    """One directional link with constant latency and FIFO delivery.

    A packet sent at t is deliverable from t + latency_ms onward and
    carries its original data timestamp, so staleness stays visible to
    the receiver.
    """

    def __init__(self, latency_ms: int):
        if latency_ms < 0:
            raise ContractViolation("latency must be >= 0")
        self.latency_ms = latency_ms
        self._queue: list[tuple[int, CommPacket]] = []
        self._clock = -(10 ** 18)

    def _advance(self, now_ms: int) -> None:
        if now_ms < self._clock:
            raise ContractViolation("channel clock must be monotone non-decreasing")
        self._clock = now_ms

    def send(self, packet: CommPacket, now_ms: int) -> None:
        self._advance(now_ms)
        self._queue.append((now_ms + self.latency_ms, packet))

    def poll(self, now_ms: int) -> list[CommPacket]:
        self._advance(now_ms)
        ready = [p for t, p in self._queue if t <= now_ms]
        self._queue = [(t, p) for t, p in self._queue if t > now_ms]
        return ready
