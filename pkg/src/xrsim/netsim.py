"""Discrete-event network core: one bottleneck downlink, one reverse uplink.

The clock runs in integer microseconds. Events at equal times fire in the
order they were scheduled.
"""

from __future__ import annotations

import csv
import enum
import heapq
import math
from collections import deque
from dataclasses import dataclass
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np

from xrsim.media import DomainError
from xrsim.traffic import US_PER_MS, US_PER_S, Eye, Flow, FramePacket, FrameType, XrSource

DOWNLINK = 0
UPLINK = 1

XR_FLOWS = (Flow.DOWNLINK, Flow.SYNC)


class SimulationError(RuntimeError):
    """Internal inconsistency; indicates a bug rather than bad input."""


# ---------------------------------------------------------------- links


class Jitter:
    """No jitter. Subclasses return a signed offset in microseconds."""

    def sample(self) -> int:
        return 0


class UniformJitter(Jitter):
    def __init__(self, bound_us: int, rng: np.random.Generator):
        if bound_us < 0:
            raise DomainError(f"jitter bound must be >= 0, got {bound_us}")
        self.bound_us = int(bound_us)
        self.rng = rng

    def sample(self) -> int:
        return int(self.rng.integers(-self.bound_us, self.bound_us + 1))


class RandomWalkJitter(Jitter):
    """Reflected random walk inside [-bound, bound] with uniform steps of at most ``step_us``."""

    def __init__(self, bound_us: int, step_us: int, rng: np.random.Generator):
        if bound_us < 0 or step_us < 0:
            raise DomainError("random-walk jitter bound and step must be >= 0")
        self.bound_us = int(bound_us)
        self.step_us = int(step_us)
        self.rng = rng
        self.offset = 0

    def sample(self) -> int:
        x = self.offset + int(self.rng.integers(-self.step_us, self.step_us + 1))
        b = self.bound_us
        while x > b or x < -b:
            x = 2 * b - x if x > b else -2 * b - x
        self.offset = x
        return x


class Link:
    """Serialising link with a piecewise-constant (optionally cyclic) capacity.

    ``capacity_pattern`` is a sequence of ``(bits_per_s, duration_us)`` phases
    repeated forever; a bare ``capacity_bps`` is a single endless phase.
    """

    def __init__(self, capacity_bps: float | None = None, propagation_us: int = 0, jitter: Jitter | None = None,
                 capacity_pattern: Sequence[tuple] | None = None):
        if capacity_pattern is None:
            if capacity_bps is None:
                raise DomainError("link needs capacity_bps or capacity_pattern")
            capacity_pattern = [(capacity_bps, 0)]
        phases = [(float(c), int(d)) for c, d in capacity_pattern]
        if not phases or any(not c > 0 for c, _ in phases):
            raise DomainError(f"link capacity must be > 0, got {phases}")
        if len(phases) > 1 and any(d <= 0 for _, d in phases):
            raise DomainError("every phase of a cyclic capacity pattern needs a positive duration")
        if propagation_us < 0:
            raise DomainError(f"propagation delay must be >= 0, got {propagation_us}")
        self.phases = phases
        self.cycle_us = sum(d for _, d in phases)
        self.propagation_us = int(propagation_us)
        self.jitter = jitter or Jitter()

    def capacity_at(self, t_us: int) -> float:
        if len(self.phases) == 1:
            return self.phases[0][0]
        r = t_us % self.cycle_us
        for cap, dur in self.phases:
            if r < dur:
                return cap
            r -= dur
        return self.phases[-1][0]

    def mean_capacity(self, t0_us: int, t1_us: int) -> float:
        """Time-averaged capacity over [t0, t1)."""
        if t1_us <= t0_us:
            return self.capacity_at(t0_us)
        if len(self.phases) == 1:
            return self.phases[0][0]
        total = 0.0
        t = t0_us
        while t < t1_us:
            r = t % self.cycle_us
            acc = 0
            for cap, dur in self.phases:
                if r < acc + dur:
                    end = min(t1_us, t + (acc + dur - r))
                    total += cap * (end - t)
                    t = end
                    break
                acc += dur
        return total / (t1_us - t0_us)

    def serialization_us(self, nbytes: int, t_us: int) -> int:
        return math.ceil(nbytes * 8 * US_PER_S / self.capacity_at(t_us))

    def transmit(self, nbytes: int, start_us: int) -> tuple[int, int]:
        """(departure, delivery) times for a packet whose service starts at ``start_us``."""
        depart = start_us + self.serialization_us(nbytes, start_us)
        return depart, depart + max(0, self.propagation_us + self.jitter.sample())


def link_transmit(pkt: FramePacket, link: Link, start_us: int) -> int:
    """Delivery time of ``pkt`` when serialisation begins at ``start_us``."""
    return link.transmit(pkt.payload_bytes, start_us)[1]


# ---------------------------------------------------------------- queue + AQM


class Discipline(enum.Enum):
    DROP_TAIL = "droptail"
    FRAME_AWARE = "frameaware"

    @classmethod
    def parse(cls, value) -> "Discipline":
        if isinstance(value, Discipline):
            return value
        key = str(value).strip().lower().replace("_", "").replace("-", "")
        for d in cls:
            if d.value == key:
                return d
        raise DomainError(f"unknown queue discipline {value!r}")


DEFAULT_DROP_PRIORITY = (FrameType.P, FrameType.B, FrameType.I)
FRAME_CLASSES = (FrameType.I, FrameType.P, FrameType.B)


class EnqueueResult(NamedTuple):
    admitted: bool
    dropped: list  # packets removed: evicted queue members and/or the arrival
    oversize: bool = False


class PacketQueue:
    """Byte-bounded FIFO with drop-tail or frame-aware admission.

    Frame-aware mode starts shedding once occupancy would pass ``threshold_bytes``.
    The victim class is the first class in ``drop_priority`` that is present
    among the queued packets and the arrival; the arrival is preferred when it
    belongs to that class, otherwise the newest queued packet of the class is
    evicted. I-frame packets are shed only on hard overflow with no P or B
    packet left to shed. Packets without a frame class (sync, cross traffic)
    rank ahead of every frame class: they are refused above the threshold and,
    with ``evict_unclassified``, evicted to make room for frame packets.
    """

    def __init__(self, capacity_bytes: int, discipline="droptail", drop_priority=DEFAULT_DROP_PRIORITY,
                 threshold_bytes: int | None = None, allow_eviction: bool = True,
                 evict_unclassified: bool = True):
        self.capacity_bytes = int(capacity_bytes)
        self.discipline = Discipline.parse(discipline)
        self.drop_priority = tuple(t if isinstance(t, FrameType) else FrameType.parse(t) for t in drop_priority)
        if sorted(self.drop_priority) != sorted(FRAME_CLASSES):
            raise DomainError(f"drop_priority must be a permutation of I, P, B; got {drop_priority}")
        if self.capacity_bytes <= 0:
            raise DomainError(f"queue capacity must be > 0, got {capacity_bytes}")
        if threshold_bytes is None:
            threshold_bytes = int(0.8 * self.capacity_bytes)
        if not 0 < threshold_bytes <= self.capacity_bytes:
            raise DomainError(f"threshold must lie in (0, capacity], got {threshold_bytes}")
        self.threshold_bytes = int(threshold_bytes)
        self.allow_eviction = allow_eviction
        self.evict_unclassified = evict_unclassified
        self.occupancy = 0
        self._fifo: deque = deque()
        self._by_class = {t: deque() for t in FrameType}
        self._evicted: set = set()

    def __len__(self):
        return len(self._fifo) - len(self._evicted)

    def packets(self) -> list:
        return [p for p in self._fifo if id(p) not in self._evicted]

    def _admit(self, pkt):
        self._fifo.append(pkt)
        self._by_class[pkt.frame_type].append(pkt)
        self.occupancy += pkt.payload_bytes

    def _evict_newest(self, cls):
        victim = self._by_class[cls].pop()
        self._evicted.add(id(victim))
        self.occupancy -= victim.payload_bytes
        return victim

    def pop(self):
        """Oldest queued packet, or None."""
        fifo = self._fifo
        while fifo:
            pkt = fifo.popleft()
            if self._evicted and id(pkt) in self._evicted:
                self._evicted.discard(id(pkt))
                continue
            head = self._by_class[pkt.frame_type].popleft()
            if head is not pkt:
                raise SimulationError("class index out of step with FIFO order")
            self.occupancy -= pkt.payload_bytes
            return pkt
        return None

    def enqueue(self, pkt: FramePacket) -> EnqueueResult:
        b = pkt.payload_bytes
        if b > self.capacity_bytes:
            return EnqueueResult(False, [pkt], True)
        cls = pkt.frame_type
        if self.discipline is Discipline.DROP_TAIL or cls is FrameType.NA:
            limit = self.capacity_bytes if self.discipline is Discipline.DROP_TAIL else self.threshold_bytes
            if self.occupancy + b > limit:
                return EnqueueResult(False, [pkt])
            self._admit(pkt)
            return EnqueueResult(True, [])

        by_class = self._by_class
        dropped = []
        if self.evict_unclassified and self.allow_eviction:
            na = by_class[FrameType.NA]
            while na and self.occupancy + b > self.threshold_bytes:
                dropped.append(self._evict_newest(FrameType.NA))
        while self.occupancy + b > self.threshold_bytes:
            hard = self.occupancy + b > self.capacity_bytes
            has_pb = cls is not FrameType.I or bool(by_class[FrameType.P]) or bool(by_class[FrameType.B])
            victim_cls = None
            for c in self.drop_priority:
                if c is FrameType.I:
                    # last resort only; with no P/B around the arrival itself is I
                    if hard and not has_pb:
                        victim_cls = c
                        break
                elif c is cls or by_class[c]:
                    victim_cls = c
                    break
            if victim_cls is None:
                break
            if victim_cls is cls:
                dropped.append(pkt)
                return EnqueueResult(False, dropped)
            if not self.allow_eviction:
                if cls is FrameType.I and not hard:
                    break
                dropped.append(pkt)
                return EnqueueResult(False, dropped)
            dropped.append(self._evict_newest(victim_cls))
        self._admit(pkt)
        return EnqueueResult(True, dropped)


def enqueue_aqm(pkt: FramePacket, queue: PacketQueue) -> EnqueueResult:
    return queue.enqueue(pkt)


# ---------------------------------------------------------------- decodability


def _pattern_types(gop) -> list:
    seq = gop.sequence if hasattr(gop, "sequence") else gop
    types = [t if isinstance(t, FrameType) else FrameType.parse(t) for t in seq]
    if not types or types[0] is not FrameType.I or types.count(FrameType.I) != 1:
        raise DomainError("GOP must start with its single I frame")
    if FrameType.NA in types:
        raise DomainError("GOP may only contain I, P and B")
    return types


def decodable_set(gop, delivered, first_frame_id: int = 0, next_anchor_decodable: bool = True) -> set:
    """Frame ids of one GOP that can be decoded.

    ``delivered`` maps frame id to "all packets arrived" (a sequence is read as
    ids ``first_frame_id, first_frame_id + 1, ...``). A trailing B frame leans on
    the next GOP's I frame, whose state is ``next_anchor_decodable``.
    """
    types = _pattern_types(gop)
    n = len(types)
    ids = range(first_frame_id, first_frame_id + n)
    if isinstance(delivered, Mapping):
        unknown = set(delivered) - set(ids)
        if unknown:
            raise DomainError(f"unknown frame ids {sorted(unknown)}")
        missing = set(ids) - set(delivered)
        if missing:
            raise DomainError(f"no delivery flag for frames {sorted(missing)}")
        flags = [bool(delivered[i]) for i in ids]
    else:
        flags = [bool(x) for x in delivered]
        if len(flags) != n:
            raise DomainError(f"expected {n} delivery flags, got {len(flags)}")

    ok = [False] * n
    prev_anchor_ok = False
    pending_b = []
    for i, t in enumerate(types):
        if t is FrameType.B:
            pending_b.append(i)
            continue
        if t is FrameType.I:
            ok[i] = flags[i]
        else:
            ok[i] = flags[i] and prev_anchor_ok
        for j in pending_b:
            ok[j] = flags[j] and prev_anchor_ok and ok[i]
        pending_b = []
        prev_anchor_ok = ok[i]
    for j in pending_b:
        ok[j] = flags[j] and prev_anchor_ok and next_anchor_decodable
    return {first_frame_id + i for i in range(n) if ok[i]}


# ---------------------------------------------------------------- measurement


class Vantage(enum.Enum):
    END_HOST = "endhost"
    IN_NETWORK = "innetwork"


class Ev(enum.IntEnum):
    ENQUEUE = 0
    DROP = 1
    DEPART = 2
    DELIVER = 3


class TraceRecord(NamedTuple):
    time_us: int
    event: Ev
    link: int
    flow: Flow
    frame_id: int
    eye: Eye
    frame_type: FrameType
    seq: int
    nbytes: int
    occupancy: int
    created_us: int


@dataclass(frozen=True)
class NetMeasurement:
    t_start_ms: float
    interval_ms: float
    throughput: float  # bits/s
    latency: float | None  # ms
    jitter: float | None  # ms
    loss_rate: float
    vantage: Vantage
    packets: int = 0
    dropped: int = 0


def measure_interval(trace: Iterable[TraceRecord], t0_us: int, t1_us: int, vantage=Vantage.END_HOST,
                     link: int = DOWNLINK) -> NetMeasurement:
    """XR-flow metrics over [t0, t1) as seen at the receiver or at the bottleneck.

    Cross traffic occupies the queue but is excluded from every metric.
    """
    if t1_us <= t0_us:
        raise DomainError("measurement interval must have positive length")
    vantage = vantage if isinstance(vantage, Vantage) else Vantage(vantage)
    seen_ev = Ev.DELIVER if vantage is Vantage.END_HOST else Ev.DEPART
    bits = 0
    lats = []
    drops = 0
    for r in trace:
        t = r[0]
        if t < t0_us or t >= t1_us or r[2] != link or r[3] not in XR_FLOWS:
            continue
        ev = r[1]
        if ev == seen_ev:
            bits += 8 * r[8]
            lats.append(t - r[10])
        elif ev == Ev.DROP:
            drops += 1
    span_s = (t1_us - t0_us) / US_PER_S
    resolved = len(lats) + drops
    latency = jitter = None
    if lats:
        latency = sum(lats) / len(lats) / US_PER_MS
        if len(lats) > 1:
            jitter = sum(abs(a - b) for a, b in zip(lats[1:], lats[:-1])) / (len(lats) - 1) / US_PER_MS
        else:
            jitter = 0.0
    return NetMeasurement(
        t_start_ms=t0_us / US_PER_MS,
        interval_ms=(t1_us - t0_us) / US_PER_MS,
        throughput=bits / span_s,
        latency=latency,
        jitter=jitter,
        loss_rate=drops / resolved if resolved else 0.0,
        vantage=vantage,
        packets=len(lats),
        dropped=drops,
    )


# ---------------------------------------------------------------- engine


class Kind(enum.IntEnum):
    FRAME = 0
    SYNC = 1
    POSE = 2
    CROSS = 3
    DEPART = 4
    DELIVER = 5
    CALL = 6


@dataclass
class FrameRecord:
    frame_id: int
    eye: Eye
    frame_type: FrameType
    created_us: int
    total: int
    nbytes: int
    delivered: int = 0
    dropped: int = 0
    completed_us: int | None = None

    @property
    def complete(self) -> bool:
        return self.delivered == self.total


@dataclass(frozen=True)
class Microburst:
    t_start_us: int
    duration_us: int
    rate_bps: float
    pkt_bytes: int

    @property
    def gap_us(self) -> float:
        return self.pkt_bytes * 8 * US_PER_S / self.rate_bps

    def arrival_times(self) -> list:
        if self.rate_bps <= 0:
            return []
        out = []
        k = 0
        while True:
            t = self.t_start_us + int(round(k * self.gap_us))
            if t >= self.t_start_us + self.duration_us:
                return out
            out.append(t)
            k += 1

    def offered_bits(self, t0_us: int, t1_us: int) -> float:
        lo = max(t0_us, self.t_start_us)
        hi = min(t1_us, self.t_start_us + self.duration_us)
        return max(0, hi - lo) * self.rate_bps / US_PER_S


class _Port:
    __slots__ = ("queue", "link", "busy")

    def __init__(self, queue, link):
        self.queue = queue
        self.link = link
        self.busy = False


class Simulator:
    """XR cloud -> bottleneck queue/link -> headset, plus the reverse uplink path."""

    def __init__(self, downlink: Link, queue: PacketQueue, uplink: Link | None = None,
                 uplink_queue: PacketQueue | None = None, record_trace: bool = True):
        self.clock = 0
        self._heap: list = []
        self._seq = 0
        self.ports = [_Port(queue, downlink)]
        if uplink is not None:
            self.ports.append(_Port(uplink_queue or PacketQueue(10**9), uplink))
        self.record_trace = record_trace
        self.trace: list = []
        self.frames: dict = {}
        self.bursts: list = []
        self.source: XrSource | None = None
        self._uid = 0
        self.generated = 0
        self.delivered = 0
        self.dropped = 0
        self.oversize = 0
        self.sync_downlink = True
        self.sync_uplink = True

    # -- scheduling
    def schedule(self, t_us: int, kind: Kind, obj=None) -> None:
        if t_us < self.clock:
            raise SimulationError(f"event at {t_us} us scheduled in the past (clock {self.clock} us)")
        heapq.heappush(self._heap, (t_us, self._seq, kind, obj))
        self._seq += 1

    def call_at(self, t_us: int, fn) -> None:
        self.schedule(t_us, Kind.CALL, fn)

    def attach_source(self, source: XrSource, *, uplink: bool = True, sync_downlink: bool = True,
                      sync_uplink: bool = True) -> None:
        if uplink or sync_uplink:
            if len(self.ports) < 2:
                raise DomainError("uplink flows need an uplink link")
        self.source = source
        self.sync_downlink = sync_downlink
        self.sync_uplink = sync_uplink
        self.schedule(source.next_frame_time(), Kind.FRAME)
        if sync_downlink or sync_uplink:
            self.schedule(source.next_sync_time(), Kind.SYNC)
        if uplink:
            self.schedule(source.next_uplink_time(), Kind.POSE)

    def inject_microburst(self, t_start_us: int, duration_us: int, rate_bps: float,
                          pkt_bytes: int = 1500) -> Microburst:
        """Cross traffic at ``rate_bps`` into the bottleneck during [t_start, t_start + duration)."""
        if duration_us <= 0:
            raise DomainError(f"microburst duration must be > 0, got {duration_us}")
        if rate_bps < 0:
            raise DomainError(f"microburst rate must be >= 0, got {rate_bps}")
        burst = Microburst(int(t_start_us), int(duration_us), float(rate_bps), int(pkt_bytes))
        self.bursts.append(burst)
        if rate_bps > 0:
            self.schedule(burst.t_start_us, Kind.CROSS, (burst, 0))
        return burst

    def available_capacity(self, t0_us: int, t1_us: int) -> float:
        """Mean bottleneck capacity over [t0, t1) less the cross traffic offered in it."""
        cap = self.ports[DOWNLINK].link.mean_capacity(t0_us, t1_us)
        span = (t1_us - t0_us) / US_PER_S
        cross = sum(b.offered_bits(t0_us, t1_us) for b in self.bursts) / span if span > 0 else 0.0
        return max(0.0, cap - cross)

    # -- packet path
    def send(self, pkt: FramePacket, link_id: int = DOWNLINK) -> None:
        """Hand a packet to the ingress queue of ``link_id`` at the current clock."""
        pkt.uid = self._uid
        self._uid += 1
        if pkt.flow is not Flow.CROSS:
            self.generated += 1
        if link_id == DOWNLINK and pkt.flow is Flow.DOWNLINK:
            key = (pkt.frame_id, pkt.eye)
            if key not in self.frames:
                self.frames[key] = FrameRecord(pkt.frame_id, pkt.eye, pkt.frame_type, pkt.created_at,
                                               pkt.total, 0)
            self.frames[key].nbytes += pkt.payload_bytes
        port = self.ports[link_id]
        res = port.queue.enqueue(pkt)
        now = self.clock
        trace = self.trace if self.record_trace else None
        for victim in res.dropped:
            self._on_drop(victim, link_id, port.queue.occupancy, res.oversize and victim is pkt)
        if res.admitted:
            if trace is not None:
                trace.append(TraceRecord(now, Ev.ENQUEUE, link_id, pkt.flow, pkt.frame_id, pkt.eye,
                                         pkt.frame_type, pkt.seq, pkt.payload_bytes, port.queue.occupancy,
                                         pkt.created_at))
            if not port.busy:
                self._start_service(link_id)

    def _on_drop(self, pkt, link_id, occupancy, oversize=False):
        if pkt.flow is not Flow.CROSS:
            self.dropped += 1
        if oversize:
            self.oversize += 1
        if link_id == DOWNLINK and pkt.flow is Flow.DOWNLINK:
            self.frames[(pkt.frame_id, pkt.eye)].dropped += 1
        if self.record_trace:
            self.trace.append(TraceRecord(self.clock, Ev.DROP, link_id, pkt.flow, pkt.frame_id, pkt.eye,
                                          pkt.frame_type, pkt.seq, pkt.payload_bytes, occupancy, pkt.created_at))

    def _start_service(self, link_id):
        port = self.ports[link_id]
        pkt = port.queue.pop()
        if pkt is None:
            port.busy = False
            return
        port.busy = True
        depart, deliver = port.link.transmit(pkt.payload_bytes, self.clock)
        self.schedule(depart, Kind.DEPART, (link_id, pkt, deliver))

    def _on_depart(self, link_id, pkt, deliver_us):
        port = self.ports[link_id]
        if self.record_trace:
            self.trace.append(TraceRecord(self.clock, Ev.DEPART, link_id, pkt.flow, pkt.frame_id, pkt.eye,
                                          pkt.frame_type, pkt.seq, pkt.payload_bytes, port.queue.occupancy,
                                          pkt.created_at))
        self.schedule(deliver_us, Kind.DELIVER, (link_id, pkt))
        self._start_service(link_id)

    def _on_deliver(self, link_id, pkt):
        if pkt.flow is not Flow.CROSS:
            self.delivered += 1
        if link_id == DOWNLINK and pkt.flow is Flow.DOWNLINK:
            rec = self.frames[(pkt.frame_id, pkt.eye)]
            rec.delivered += 1
            if rec.delivered == rec.total:
                rec.completed_us = self.clock
        if self.record_trace:
            self.trace.append(TraceRecord(self.clock, Ev.DELIVER, link_id, pkt.flow, pkt.frame_id, pkt.eye,
                                          pkt.frame_type, pkt.seq, pkt.payload_bytes,
                                          self.ports[link_id].queue.occupancy, pkt.created_at))

    # -- main loop
    def run_until(self, t_end_us: int) -> list:
        """Process every event with time <= ``t_end_us``; the clock ends at ``t_end_us``."""
        if t_end_us < self.clock:
            raise DomainError(f"t_end {t_end_us} us is before the clock ({self.clock} us)")
        heap = self._heap
        pop = heapq.heappop
        src = self.source
        while heap and heap[0][0] <= t_end_us:
            t, _, kind, obj = pop(heap)
            if t < self.clock:
                raise SimulationError("event queue produced a time in the past")
            self.clock = t
            if kind == Kind.DEPART:
                self._on_depart(*obj)
            elif kind == Kind.DELIVER:
                self._on_deliver(*obj)
            elif kind == Kind.FRAME:
                for pkt in src.frame_burst():
                    self.send(pkt, DOWNLINK)
                self.schedule(src.next_frame_time(), Kind.FRAME)
            elif kind == Kind.SYNC:
                pkt = src.sync_packet()
                if self.sync_downlink:
                    self.send(pkt, DOWNLINK)
                if self.sync_uplink:
                    up = FramePacket(Flow.SYNC, pkt.frame_id, Eye.NA, FrameType.NA, 0, 1, pkt.payload_bytes,
                                     pkt.created_at)
                    self.send(up, UPLINK)
                self.schedule(src.next_sync_time(), Kind.SYNC)
            elif kind == Kind.POSE:
                self.send(src.uplink_packet(), UPLINK)
                self.schedule(src.next_uplink_time(), Kind.POSE)
            elif kind == Kind.CROSS:
                burst, k = obj
                pkt = FramePacket(Flow.CROSS, k, Eye.NA, FrameType.NA, 0, 1, burst.pkt_bytes, t)
                self.send(pkt, DOWNLINK)
                nxt = burst.t_start_us + int(round((k + 1) * burst.gap_us))
                if nxt < burst.t_start_us + burst.duration_us:
                    self.schedule(nxt, Kind.CROSS, (burst, k + 1))
            elif kind == Kind.CALL:
                obj(self)
        self.clock = t_end_us
        return self.trace

    def in_flight(self) -> int:
        """XR packets queued, in service, or propagating."""
        n = 0
        for port in self.ports:
            n += sum(1 for p in port.queue.packets() if p.flow is not Flow.CROSS)
        for _, _, kind, obj in self._heap:
            if kind in (Kind.DEPART, Kind.DELIVER) and obj[1].flow is not Flow.CROSS:
                n += 1
        return n

    def drain(self) -> None:
        """Stop all sources and run until no packet is left in the network."""
        self._heap = [e for e in self._heap if e[2] in (Kind.DEPART, Kind.DELIVER)]
        heapq.heapify(self._heap)
        self.source = None
        while self._heap:
            self.run_until(max(e[0] for e in self._heap))

    # -- per-frame outcome
    def frame_status(self, pattern, horizon_frames: int | None = None) -> list:
        """(FrameRecord, decodable) for every downlink frame, GOP by GOP and eye by eye.

        Frames whose forward reference lies past the last generated frame are
        left out: their fate is not decided yet.
        """
        types = _pattern_types(pattern)
        glen = len(types)
        if horizon_frames is None:
            horizon_frames = 1 + max((fid for fid, _ in self.frames), default=-1)
        by_eye: dict = {}
        for (fid, eye), rec in self.frames.items():
            by_eye.setdefault(eye, {})[fid] = rec
        out = []
        for eye in sorted(by_eye):
            recs = by_eye[eye]
            for g0 in range(0, horizon_frames, glen):
                n = min(glen, horizon_frames - g0)
                flags = [recs[g0 + i].complete if (g0 + i) in recs else False for i in range(n)]
                sub = types[:n]
                # trim trailing B frames of a truncated GOP: their anchor was never sent
                while n < glen and sub and sub[-1] is FrameType.B:
                    sub = sub[:-1]
                    flags = flags[:-1]
                    n -= 1
                if not sub:
                    continue
                ok = decodable_set(sub, flags, g0, next_anchor_decodable=False)
                for i in range(n):
                    fid = g0 + i
                    if fid in recs:
                        out.append((recs[fid], fid in ok))
        out.sort(key=lambda x: (x[0].frame_id, x[0].eye))
        return out


# ---------------------------------------------------------------- CSV


EVENT_CSV_COLUMNS = ("time_ms", "event", "flow", "frame_id", "frame_type", "bytes", "queue_occupancy_bytes")
MEASUREMENT_CSV_COLUMNS = ("t_start_ms", "vantage", "throughput_bps", "latency_ms", "jitter_ms", "loss_rate")


def fmt_ms(t_us: int) -> str:
    return f"{t_us / US_PER_MS:.3f}"


def write_event_csv(path, trace: Iterable[TraceRecord], link: int = DOWNLINK) -> None:
    names = {Ev.ENQUEUE: "enqueue", Ev.DROP: "drop", Ev.DELIVER: "deliver"}
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EVENT_CSV_COLUMNS)
        for r in trace:
            if r.event in names and r.link == link:
                w.writerow([fmt_ms(r.time_us), names[r.event], r.flow.name.lower(), r.frame_id,
                            r.frame_type.name, r.nbytes, r.occupancy])


def _opt(x) -> str:
    return "" if x is None else repr(float(x))


def measurement_row(m: NetMeasurement) -> list:
    return [f"{m.t_start_ms:.3f}", m.vantage.value, repr(float(m.throughput)), _opt(m.latency), _opt(m.jitter),
            repr(float(m.loss_rate))]


def write_measurement_csv(path, measurements: Iterable[NetMeasurement]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MEASUREMENT_CSV_COLUMNS)
        for m in measurements:
            w.writerow(measurement_row(m))
