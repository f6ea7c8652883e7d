"""XR traffic model: downlink frame bursts, sync packets, uplink pose packets.

All times are integer microseconds. Frame sizes are deterministic functions of
the target bitrate and the GOP pattern unless size noise is switched on.
"""

from __future__ import annotations

import csv
import enum
import math
import struct
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from xrsim.media import DomainError

US_PER_MS = 1000
US_PER_S = 1_000_000

DEFAULT_MTU_PAYLOAD = 1500 - 40
DEFAULT_SYNC_BYTES = 8
DEFAULT_UPLINK_HZ = 500.0
DEFAULT_WEIGHTS = (4.0, 2.0, 1.0)
POSE_MIN_BYTES = 16
POSE_MAX_BYTES = 400


class Flow(enum.IntEnum):
    DOWNLINK = 0
    UPLINK = 1
    SYNC = 2
    CROSS = 3


class Eye(enum.IntEnum):
    LEFT = 0
    RIGHT = 1
    NA = 2


class FrameType(enum.IntEnum):
    I = 0  # noqa: E741
    P = 1
    B = 2
    NA = 3

    @classmethod
    def parse(cls, ch: str) -> "FrameType":
        try:
            return cls[ch.strip().upper()]
        except KeyError:
            raise DomainError(f"unknown frame type {ch!r}") from None


@dataclass(frozen=True)
class GopPattern:
    """A closed group of pictures, e.g. ``GopPattern("IBBPBBP")``."""

    sequence: tuple

    def __init__(self, sequence: "str | Sequence"):
        types = tuple(t if isinstance(t, FrameType) else FrameType.parse(t) for t in sequence)
        object.__setattr__(self, "sequence", types)
        err = gop_error(types)
        if err:
            raise DomainError(err)

    @property
    def gop_length(self) -> int:
        return len(self.sequence)

    def __str__(self):
        return "".join(t.name for t in self.sequence)

    def __len__(self):
        return len(self.sequence)

    def __getitem__(self, i):
        return self.sequence[i]


def gop_error(types: Sequence[FrameType], closed: bool = True) -> str | None:
    if not types:
        return "GOP pattern is empty"
    if types[0] != FrameType.I:
        return f"GOP pattern must start with I, got {types[0].name}"
    if sum(t == FrameType.I for t in types) != 1:
        return "GOP pattern must contain exactly one I frame"
    if any(t == FrameType.NA for t in types):
        return "GOP pattern may only contain I, P and B"
    if closed and types[-1] == FrameType.B:
        return "trailing B frames have no following anchor inside the GOP"
    return None


@dataclass
class FrameSizeModel:
    target_bitrate: float
    fps: float
    pattern: GopPattern = field(default_factory=lambda: GopPattern("I"))
    weights: tuple = DEFAULT_WEIGHTS

    def __post_init__(self):
        w_i, w_p, w_b = self.weights
        if not (w_i >= w_p >= w_b > 0):
            raise DomainError(f"frame weights must satisfy w_I >= w_P >= w_B > 0, got {self.weights}")
        if self.target_bitrate < 0:
            raise DomainError(f"target_bitrate must be >= 0, got {self.target_bitrate}")
        if not self.fps > 0:
            raise DomainError(f"fps must be > 0, got {self.fps}")

    def weight(self, ftype: FrameType) -> float:
        return self.weights[int(ftype)]

    @property
    def gop_weight(self) -> float:
        return sum(self.weight(t) for t in self.pattern.sequence)


def frame_bytes(model: FrameSizeModel, ftype: FrameType) -> int:
    """Bytes of one frame of ``ftype`` so that a GOP carries exactly its bitrate share."""
    mean = model.target_bitrate / (8.0 * model.fps)
    return int(round(mean * model.weight(ftype) * model.pattern.gop_length / model.gop_weight))


@dataclass(slots=True)
class FramePacket:
    flow: Flow
    frame_id: int
    eye: Eye
    frame_type: FrameType
    seq: int
    total: int
    payload_bytes: int
    created_at: int  # us
    uid: int = -1
    payload: bytes | None = None

    @property
    def created_ms(self) -> float:
        return self.created_at / US_PER_MS


def packetize_frame(nbytes: int, mtu_payload: int = DEFAULT_MTU_PAYLOAD, *, flow=Flow.DOWNLINK,
                    frame_id=0, eye=Eye.NA, frame_type=FrameType.NA, created_at=0) -> list[FramePacket]:
    """Split a frame into MTU-sized packets sharing one creation time."""
    if mtu_payload <= 0:
        raise DomainError(f"mtu_payload must be > 0, got {mtu_payload}")
    if nbytes < 0:
        raise DomainError(f"frame bytes must be >= 0, got {nbytes}")
    total = -(-nbytes // mtu_payload)
    packets = []
    for seq in range(total):
        size = mtu_payload if seq < total - 1 else nbytes - mtu_payload * (total - 1)
        packets.append(FramePacket(flow, frame_id, eye, frame_type, seq, total, size, created_at))
    return packets


def frame_time_us(index: int, fps: float) -> int:
    """Start of frame slot ``index``; computed from the index so the grid never drifts."""
    return int(round(index * US_PER_S / fps))


@dataclass(frozen=True)
class ScheduledFrame:
    time_us: int
    frame_id: int
    eye: Eye
    frame_type: FrameType


def _eyes(eyes: int) -> tuple:
    if eyes == 1:
        return (Eye.NA,)
    if eyes == 2:
        return (Eye.LEFT, Eye.RIGHT)
    raise DomainError(f"eyes must be in {{1, 2}}, got {eyes}")


def build_gop_schedule(pattern: GopPattern, fps: float, duration_s: float, eyes: int = 2) -> list[ScheduledFrame]:
    if not isinstance(pattern, GopPattern):
        pattern = GopPattern(pattern)
    if not fps > 0:
        raise DomainError(f"fps must be > 0, got {fps}")
    n = math.ceil(duration_s * fps - 1e-9)
    out = []
    for i in range(n):
        t = frame_time_us(i, fps)
        ftype = pattern[i % pattern.gop_length]
        out.extend(ScheduledFrame(t, i, eye, ftype) for eye in _eyes(eyes))
    return out


def downlink_burst_at(t_us: int, schedule: Sequence[ScheduledFrame], model: FrameSizeModel,
                      mtu_payload: int = DEFAULT_MTU_PAYLOAD) -> list[list[FramePacket]]:
    """One packet burst per eye for the frame slot starting exactly at ``t_us``."""
    frames = [f for f in schedule if f.time_us == t_us]
    if not frames:
        raise DomainError(f"t={t_us} us is not on the frame grid")
    return [
        packetize_frame(frame_bytes(model, f.frame_type), mtu_payload, flow=Flow.DOWNLINK,
                        frame_id=f.frame_id, eye=f.eye, frame_type=f.frame_type, created_at=t_us)
        for f in frames
    ]


@dataclass(frozen=True)
class PoseSample:
    """6-DoF headset pose. Serialises to 16 bytes of fixed-point fields."""

    position: tuple = (0.0, 0.0, 0.0)  # metres
    orientation: tuple = (0.0, 0.0, 0.0)  # degrees (yaw, pitch, roll)
    timestamp_ms: int = 0

    _FMT = "<6hI"

    def serialize(self) -> bytes:
        pos = [int(round(max(-32.768, min(32.767, p)) * 1000)) for p in self.position]
        ang = [int(round(((a + 180.0) % 360.0 - 180.0) * 100)) for a in self.orientation]
        ang = [max(-32768, min(32767, a)) for a in ang]
        return struct.pack(self._FMT, *pos, *ang, self.timestamp_ms & 0xFFFFFFFF)

    @classmethod
    def deserialize(cls, data: bytes) -> "PoseSample":
        vals = struct.unpack_from(cls._FMT, data)
        return cls(tuple(v / 1000 for v in vals[:3]), tuple(v / 100 for v in vals[3:6]), vals[6])


@dataclass(frozen=True)
class UplinkSizeModel:
    """Constant (``low == high``) or uniform uplink payload size, in bytes."""

    low: int = 100
    high: int = 100

    def __post_init__(self):
        if not (POSE_MIN_BYTES <= self.low <= self.high <= POSE_MAX_BYTES):
            raise DomainError(
                f"uplink size must lie within [{POSE_MIN_BYTES}, {POSE_MAX_BYTES}] bytes, got [{self.low}, {self.high}]"
            )

    def sample(self, rng: np.random.Generator | None) -> int:
        if self.low == self.high or rng is None:
            return self.low
        return int(rng.integers(self.low, self.high + 1))


def uplink_time_us(index: int, pose_rate_hz: float) -> int:
    return int(round(index * US_PER_S / pose_rate_hz))


def uplink_packet_at(t_us: int, pose_rate_hz: float, size_model: UplinkSizeModel, *, index: int = 0,
                     pose: PoseSample | None = None, rng=None) -> FramePacket:
    if not pose_rate_hz > 0:
        raise DomainError(f"pose_rate_hz must be > 0, got {pose_rate_hz}")
    if not isinstance(size_model, UplinkSizeModel):
        size_model = UplinkSizeModel(*size_model)
    pose = pose or PoseSample(timestamp_ms=t_us // US_PER_MS)
    body = pose.serialize()
    size = size_model.sample(rng)
    # pose first, controller/sync state padded after it
    payload = body + bytes(size - len(body))
    return FramePacket(Flow.UPLINK, index, Eye.NA, FrameType.NA, 0, 1, size, t_us, payload=payload)


def sync_packet_at(t_us: int, fps: float, *, index: int = 0, size: int = DEFAULT_SYNC_BYTES) -> FramePacket:
    if not fps > 0:
        raise DomainError(f"fps must be > 0, got {fps}")
    return FramePacket(Flow.SYNC, index, Eye.NA, FrameType.NA, 0, 1, size, t_us)


class XrSource:
    """Stateful generator of one headset's XR flows.

    ``frames_until``/``uplink_until``/``sync_until`` advance internal indices and
    return every packet created before the given time, so calling them in
    arbitrary chunks yields the same stream.
    """

    def __init__(self, *, fps: float, eyes: int = 2, pattern: GopPattern | str = "IPPP",
                 bitrate: float = 20e6, weights=DEFAULT_WEIGHTS, mtu_payload: int = DEFAULT_MTU_PAYLOAD,
                 sync_bytes: int = DEFAULT_SYNC_BYTES, uplink_hz: float = DEFAULT_UPLINK_HZ,
                 uplink_size: UplinkSizeModel | None = None, size_noise: float = 0.0,
                 rng: np.random.Generator | None = None):
        if not isinstance(pattern, GopPattern):
            pattern = GopPattern(pattern)
        if mtu_payload <= 0:
            raise DomainError(f"mtu_payload must be > 0, got {mtu_payload}")
        self.fps = fps
        self.eyes = _eyes(eyes)
        self.model = FrameSizeModel(bitrate, fps, pattern, tuple(weights))
        self.mtu_payload = mtu_payload
        self.sync_bytes = sync_bytes
        self.uplink_hz = uplink_hz
        self.uplink_size = uplink_size or UplinkSizeModel()
        self.size_noise = size_noise
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.next_frame = 0
        self.next_uplink = 0
        self.next_sync = 0

    @property
    def pattern(self) -> GopPattern:
        return self.model.pattern

    def set_bitrate(self, bitrate: float) -> None:
        self.model.target_bitrate = bitrate

    def frame_type(self, frame_id: int) -> FrameType:
        return self.model.pattern[frame_id % self.model.pattern.gop_length]

    def next_frame_time(self) -> int:
        return frame_time_us(self.next_frame, self.fps)

    def frame_burst(self) -> list[FramePacket]:
        """Packets of the next frame slot, all eyes, in eye order."""
        i = self.next_frame
        t = frame_time_us(i, self.fps)
        ftype = self.frame_type(i)
        size = frame_bytes(self.model, ftype)
        if self.size_noise > 0:
            size = max(1, int(round(size * math.exp(self.size_noise * self.rng.standard_normal()))))
        out = []
        for eye in self.eyes:
            out.extend(packetize_frame(size, self.mtu_payload, flow=Flow.DOWNLINK, frame_id=i, eye=eye,
                                       frame_type=ftype, created_at=t))
        self.next_frame += 1
        return out

    def next_uplink_time(self) -> int:
        return uplink_time_us(self.next_uplink, self.uplink_hz)

    def uplink_packet(self) -> FramePacket:
        t = self.next_uplink_time()
        pkt = uplink_packet_at(t, self.uplink_hz, self.uplink_size, index=self.next_uplink, rng=self.rng)
        self.next_uplink += 1
        return pkt

    def next_sync_time(self) -> int:
        return frame_time_us(self.next_sync, self.fps)

    def sync_packet(self) -> FramePacket:
        t = self.next_sync_time()
        pkt = sync_packet_at(t, self.fps, index=self.next_sync, size=self.sync_bytes)
        self.next_sync += 1
        return pkt

    def packets_until(self, t_end_us: int, *, uplink: bool = True, sync: bool = True) -> list[FramePacket]:
        """All packets created strictly before ``t_end_us``, in creation order."""
        out = []
        while self.next_frame_time() < t_end_us:
            t = self.next_frame_time()
            if sync:
                while self.next_sync_time() <= t:
                    out.append(self.sync_packet())
            out.extend(self.frame_burst())
            if uplink:
                while self.next_uplink_time() <= t:
                    out.append(self.uplink_packet())
        if sync:
            while self.next_sync_time() < t_end_us:
                out.append(self.sync_packet())
        if uplink:
            while self.next_uplink_time() < t_end_us:
                out.append(self.uplink_packet())
        out.sort(key=lambda p: p.created_at)
        return out


TRACE_COLUMNS = ("time_ms", "flow", "frame_id", "eye", "frame_type", "seq", "total", "bytes")


def write_packet_csv(path, packets: Iterable[FramePacket]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_COLUMNS)
        for p in packets:
            w.writerow([f"{p.created_at / US_PER_MS:.3f}", p.flow.name, p.frame_id, p.eye.name,
                        p.frame_type.name, p.seq, p.total, p.payload_bytes])
