"""Closed-loop XR streaming environment: one bitrate decision per measurement interval."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from xrsim.media import DomainError
from xrsim.netsim import (
    Link,
    NetMeasurement,
    PacketQueue,
    RandomWalkJitter,
    Simulator,
    UniformJitter,
    Vantage,
    measure_interval,
)
from xrsim.qoe import RewardParams, step_reward
from xrsim.traffic import US_PER_MS, GopPattern, UplinkSizeModel, XrSource


@dataclass(frozen=True)
class Burst:
    start_ms: float
    duration_ms: float
    rate_bps: float


@dataclass(frozen=True)
class RandomBursts:
    """``count`` bursts per run (inclusive range), uniform start, rate and duration."""

    count: tuple = (1, 3)
    rate_bps: tuple = (0.0, 0.0)
    duration_ms: tuple = (20.0, 200.0)


@dataclass(frozen=True)
class StreamSpec:
    fps: float = 60.0
    eyes: int = 2
    pattern: str = "IPPPPP"
    weights: tuple = (4, 2, 1)
    mtu_payload: int = 1460
    sync_bytes: int = 8
    uplink: bool = True
    uplink_hz: float = 500.0
    uplink_bytes: tuple = (100, 100)
    sync_uplink: bool = True
    size_noise: float = 0.0

    def errors(self) -> list[str]:
        errs = []
        if not self.fps > 0:
            errs.append("fps must be > 0")
        if self.eyes not in (1, 2):
            errs.append(f"eyes must be 1 or 2, got {self.eyes}")
        try:
            GopPattern(self.pattern)
        except DomainError as e:
            errs.append(str(e))
        w = self.weights
        if len(w) != 3 or not (w[0] >= w[1] >= w[2] > 0):
            errs.append(f"weights must satisfy I >= P >= B > 0, got {w}")
        if self.mtu_payload <= 0:
            errs.append("mtu must be > 0")
        if self.sync_bytes < 0:
            errs.append("sync_bytes must be >= 0")
        if self.uplink and not self.uplink_hz > 0:
            errs.append("uplink_hz must be > 0")
        lo, hi = self.uplink_bytes
        if not 16 <= lo <= hi <= 400:
            errs.append(f"uplink packet sizes must satisfy 16 <= min <= max <= 400, got {self.uplink_bytes}")
        if not 0 <= self.size_noise < 1:
            errs.append("size_noise must lie in [0, 1)")
        return errs


@dataclass(frozen=True)
class NetworkSpec:
    capacity_bps: float = 100e6
    capacity_pattern: tuple = ()  # ((bits_per_s, duration_ms), ...) repeated
    random_phase: bool = False
    propagation_ms: float = 5.0
    jitter: str = "none"
    jitter_ms: float = 0.0
    jitter_step_ms: float = 0.1
    queue_bytes: int = 1_000_000
    discipline: str = "droptail"
    drop_priority: tuple = ("P", "B", "I")
    threshold: float = 0.8
    eviction: bool = True
    evict_unclassified: bool = True
    uplink_capacity_bps: float = 10e6
    uplink_propagation_ms: float = 5.0
    uplink_queue_bytes: int = 1_000_000
    bursts: tuple = ()
    random_bursts: RandomBursts | None = None

    def phases_us(self) -> list:
        if self.capacity_pattern:
            return [(float(c), int(round(d * US_PER_MS))) for c, d in self.capacity_pattern]
        return [(float(self.capacity_bps), 0)]

    def peak_capacity(self) -> float:
        return max(c for c, _ in self.phases_us())

    def errors(self) -> list[str]:
        errs = []
        phases = self.phases_us()
        if any(not c > 0 for c, _ in phases):
            errs.append("capacity must be > 0")
        if len(phases) > 1 and any(d <= 0 for _, d in phases):
            errs.append("every capacity phase needs a positive duration")
        if self.propagation_ms < 0:
            errs.append("propagation delay must be >= 0")
        if self.uplink_propagation_ms < 0:
            errs.append("uplink propagation delay must be >= 0")
        if self.jitter not in ("none", "uniform", "randomwalk"):
            errs.append(f"jitter must be none, uniform or randomwalk, got {self.jitter!r}")
        if self.jitter_ms < 0 or self.jitter_step_ms < 0:
            errs.append("jitter bounds must be >= 0")
        if self.queue_bytes <= 0:
            errs.append("queue capacity must be > 0")
        if self.uplink_queue_bytes <= 0:
            errs.append("uplink queue capacity must be > 0")
        if self.discipline not in ("droptail", "frameaware"):
            errs.append(f"discipline must be droptail or frameaware, got {self.discipline!r}")
        if sorted(self.drop_priority) != ["B", "I", "P"]:
            errs.append(f"drop_priority must be a permutation of I, P, B, got {self.drop_priority}")
        if not 0 < self.threshold <= 1:
            errs.append("threshold must lie in (0, 1]")
        if self.uplink_capacity_bps < 0:
            errs.append("uplink capacity must be >= 0")
        for b in self.bursts:
            if b.duration_ms <= 0 or b.rate_bps < 0 or b.start_ms < 0:
                errs.append(f"bad microburst {b}")
        rb = self.random_bursts
        if rb is not None:
            if not 0 <= rb.count[0] <= rb.count[1]:
                errs.append("random burst count range must be 0 <= min <= max")
            if not 0 <= rb.rate_bps[0] <= rb.rate_bps[1]:
                errs.append("random burst rate range must be 0 <= min <= max")
            if not 0 < rb.duration_ms[0] <= rb.duration_ms[1]:
                errs.append("random burst duration range must be 0 < min <= max")
        return errs


def rotate_phases(phases: list, offset_us: int) -> list:
    """Cyclic capacity pattern as seen from ``offset_us`` into its cycle."""
    offset_us %= sum(d for _, d in phases)
    for i, (c, d) in enumerate(phases):
        if offset_us < d:
            tail = [(c, offset_us)] if offset_us else []
            return [(c, d - offset_us)] + phases[i + 1:] + phases[:i] + tail
        offset_us -= d
    return list(phases)


def build_simulator(stream: StreamSpec, network: NetworkSpec, bitrate_bps: float, seed, horizon_ms: float,
                    record_trace: bool = True) -> tuple[Simulator, XrSource]:
    """Seeded simulator plus source; ``bitrate_bps`` is the total downlink video rate (all eyes)."""
    ss = np.random.SeedSequence(seed)
    r_src, r_jit, r_bursts, r_phase = (np.random.default_rng(s) for s in ss.spawn(4))
    phases = network.phases_us()
    if len(phases) > 1 and network.random_phase:
        phases = rotate_phases(phases, int(r_phase.integers(0, sum(d for _, d in phases))))
    jitter = None
    if network.jitter == "uniform":
        jitter = UniformJitter(int(round(network.jitter_ms * US_PER_MS)), r_jit)
    elif network.jitter == "randomwalk":
        jitter = RandomWalkJitter(int(round(network.jitter_ms * US_PER_MS)),
                                  int(round(network.jitter_step_ms * US_PER_MS)), r_jit)
    downlink = Link(capacity_pattern=phases, propagation_us=int(round(network.propagation_ms * US_PER_MS)),
                    jitter=jitter)
    queue = PacketQueue(network.queue_bytes, network.discipline, network.drop_priority,
                        int(network.threshold * network.queue_bytes), network.eviction, network.evict_unclassified)
    has_up = stream.uplink or stream.sync_uplink
    uplink = uq = None
    if has_up:
        if not network.uplink_capacity_bps > 0:
            raise DomainError("uplink flows are enabled but the uplink capacity is 0")
        uplink = Link(network.uplink_capacity_bps, int(round(network.uplink_propagation_ms * US_PER_MS)))
        uq = PacketQueue(network.uplink_queue_bytes)
    sim = Simulator(downlink, queue, uplink, uq, record_trace=record_trace)
    src = XrSource(fps=stream.fps, eyes=stream.eyes, pattern=stream.pattern, bitrate=bitrate_bps / stream.eyes,
                   weights=stream.weights, mtu_payload=stream.mtu_payload, sync_bytes=stream.sync_bytes,
                   uplink_hz=stream.uplink_hz, uplink_size=UplinkSizeModel(*stream.uplink_bytes),
                   size_noise=stream.size_noise, rng=r_src)
    sim.attach_source(src, uplink=stream.uplink, sync_uplink=stream.sync_uplink)
    for b in network.bursts:
        sim.inject_microburst(int(round(b.start_ms * US_PER_MS)), int(round(b.duration_ms * US_PER_MS)), b.rate_bps)
    rb = network.random_bursts
    if rb is not None:
        horizon_us = int(horizon_ms * US_PER_MS)
        for _ in range(int(r_bursts.integers(rb.count[0], rb.count[1] + 1))):
            start = int(r_bursts.integers(0, max(horizon_us, 1)))
            dur = int(round(r_bursts.uniform(*rb.duration_ms) * US_PER_MS))
            sim.inject_microburst(start, max(dur, 1), float(r_bursts.uniform(*rb.rate_bps)))
    return sim, src


@dataclass(frozen=True)
class StateBounds:
    throughput_bps: float
    latency_ms: float
    jitter_ms: float

    def errors(self) -> list[str]:
        return [f"state bound {n} must be > 0" for n in ("throughput_bps", "latency_ms", "jitter_ms")
                if not getattr(self, n) > 0]


def measurement_features(m: NetMeasurement | None, bounds: StateBounds) -> tuple:
    """(throughput, latency, jitter, loss) scaled to [0, 1]; a missing latency reads as worst."""
    if m is None:
        return (0.0, 0.0, 0.0, 0.0)
    lat = 1.0 if m.latency is None else min(1.0, m.latency / bounds.latency_ms)
    jit = 0.0 if m.jitter is None else min(1.0, m.jitter / bounds.jitter_ms)
    return (min(1.0, m.throughput / bounds.throughput_bps), lat, jit, m.loss_rate)


@dataclass
class IntervalRecord:
    index: int
    t0_us: int
    t1_us: int
    level: int
    prev_level: int
    measurement: NetMeasurement
    latency_ms: float  # as used by the reward
    reward: float
    available_bps: float


@dataclass
class Episode:
    seed: tuple
    sim: Simulator
    source: XrSource
    records: list = field(default_factory=list)


class XrStreamingEnv:
    """Bitrate-ladder control of the XR downlink.

    State: the last ``k`` measurements (throughput, latency, jitter, loss) plus
    the previous level, all in [0, 1]. Each step applies a level for one
    measurement interval and returns the reward of that interval. Episodes last
    ``episode_intervals`` steps; the env then flags ``truncated`` and the next
    ``reset`` starts a fresh, independently seeded episode.
    """

    def __init__(self, stream: StreamSpec, network: NetworkSpec, ladder: Sequence[float], reward: RewardParams,
                 *, k: int = 8, interval_ms: float = 1000.0, episode_intervals: int = 60,
                 bounds: StateBounds | None = None, seed: int = 0, keep_trace: bool = False,
                 vantage: Vantage = Vantage.END_HOST):
        self.ladder = tuple(float(b) for b in ladder)
        if len(self.ladder) < 2 or any(b <= a for a, b in zip(self.ladder, self.ladder[1:])):
            raise DomainError(f"ladder must be strictly increasing with at least 2 levels, got {ladder}")
        if len(reward.quality_map) != len(self.ladder):
            raise DomainError("quality_map needs one value per ladder level")
        if k < 1 or episode_intervals < 1 or not interval_ms > 0:
            raise DomainError("k, episode_intervals and interval_ms must be positive")
        self.stream, self.network, self.reward_params = stream, network, reward
        self.k = k
        self.interval_us = int(round(interval_ms * US_PER_MS))
        self.episode_intervals = episode_intervals
        self.bounds = bounds or StateBounds(network.peak_capacity(), 4 * reward.deadline_ms, reward.deadline_ms)
        self.seed = seed
        self.keep_trace = keep_trace
        self.vantage = vantage
        self.state_dim = 4 * k + 1
        self.n_actions = len(self.ladder)
        self.episodes = 0
        self.episode: Episode | None = None
        self.truncated = False

    # -- episode control
    def reset(self) -> np.ndarray:
        key = (self.seed, self.episodes)
        self.episodes += 1
        horizon_ms = self.episode_intervals * self.interval_us / US_PER_MS
        sim, src = build_simulator(self.stream, self.network, self.ladder[0], key, horizon_ms)
        self.episode = Episode(key, sim, src)
        self.window = [None] * self.k
        self.level = 0
        self.t_us = 0
        self.truncated = False
        return self.state()

    def state(self) -> np.ndarray:
        feats = [x for m in self.window for x in measurement_features(m, self.bounds)]
        feats.append(self.level / (self.n_actions - 1))
        return np.array(feats, dtype=np.float64)

    @property
    def sim(self) -> Simulator:
        return self.episode.sim

    def previous_available_capacity(self) -> float:
        """Available bottleneck capacity over the last interval (at t = 0, the instantaneous value)."""
        if self.t_us == 0:
            return max(0.0, self.sim.available_capacity(0, 1))
        return self.sim.available_capacity(self.t_us - self.interval_us, self.t_us)

    def step(self, action: int) -> tuple:
        if self.episode is None:
            raise DomainError("reset() before step()")
        if not 0 <= action < self.n_actions:
            raise DomainError(f"action {action} outside the ladder")
        sim = self.sim
        t0, t1 = self.t_us, self.t_us + self.interval_us
        self.episode.source.set_bitrate(self.ladder[action] / self.stream.eyes)
        start = len(sim.trace)
        sim.run_until(t1 - 1)
        m = measure_interval(sim.trace[start:], t0, t1, self.vantage)
        latency = m.latency if m.latency is not None else self.interval_us / US_PER_MS
        r = step_reward(action, self.level, latency, self.reward_params)
        self.episode.records.append(IntervalRecord(len(self.episode.records), t0, t1, action, self.level, m,
                                                   latency, r, sim.available_capacity(t0, t1)))
        if not self.keep_trace:
            sim.trace.clear()
        self.window = self.window[1:] + [m]
        self.level = action
        self.t_us = t1
        self.truncated = len(self.episode.records) >= self.episode_intervals
        return self.state(), r, False
