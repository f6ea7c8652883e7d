import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import DropTailModel, all_gop_patterns, closure_decodable
from xrsim.media import DomainError
from xrsim.netsim import (
    DOWNLINK,
    Ev,
    Link,
    PacketQueue,
    RandomWalkJitter,
    SimulationError,
    Simulator,
    TraceRecord,
    UniformJitter,
    Vantage,
    decodable_set,
    enqueue_aqm,
    link_transmit,
    measure_interval,
    write_event_csv,
    write_measurement_csv,
)
from xrsim.traffic import Eye, Flow, FramePacket, FrameType, XrSource


def pkt(ftype=FrameType.P, size=100, flow=Flow.DOWNLINK, fid=0, seq=0, t=0):
    return FramePacket(flow, fid, Eye.LEFT, ftype, seq, 1, size, t)


def idle_sim(capacity=12e6, prop_us=5000, queue_bytes=100_000, discipline="droptail"):
    return Simulator(Link(capacity, prop_us), PacketQueue(queue_bytes, discipline))


# ---------------------------------------------------------------- engine


def test_run_without_sources_is_empty():
    sim = idle_sim()
    assert sim.run_until(10_000_000) == []
    assert sim.clock == 10_000_000


def test_single_packet_delivery_time():
    sim = idle_sim()
    sim.call_at(2000, lambda s: s.send(pkt(size=1500)))
    sim.run_until(100_000)
    deliver = [r for r in sim.trace if r.event == Ev.DELIVER]
    # 1500 B * 8 / 12 Mb/s = 1 ms serialisation, plus 5 ms propagation
    assert [r.time_us for r in deliver] == [2000 + 1000 + 5000]


def test_equal_time_events_fire_in_insertion_order():
    sim = idle_sim()
    seen = []
    for k in range(5):
        sim.call_at(500, lambda s, k=k: seen.append(k))
    sim.run_until(1000)
    assert seen == [0, 1, 2, 3, 4]


def test_scheduling_in_the_past_is_a_bug():
    sim = idle_sim()
    sim.run_until(1000)
    with pytest.raises(SimulationError):
        sim.call_at(10, lambda s: None)
    with pytest.raises(DomainError):
        sim.run_until(500)


def test_link_transmit_examples():
    link = Link(12e6, 5000)
    assert link_transmit(pkt(size=1500), link, 10_000) == 10_000 + 6000
    assert link_transmit(pkt(size=0), link, 10_000) == 10_000 + 5000


def test_uniform_jitter_reproducible():
    def deliveries(seed):
        link = Link(12e6, 5000, UniformJitter(1000, np.random.default_rng(seed)))
        return [link_transmit(pkt(size=1500), link, 0) for _ in range(50)]

    a = deliveries(5)
    assert a == deliveries(5)
    assert all(5000 <= d <= 7000 for d in a)
    assert len(set(a)) > 1


def test_random_walk_jitter_stays_bounded():
    j = RandomWalkJitter(500, 200, np.random.default_rng(0))
    xs = [j.sample() for _ in range(5000)]
    assert max(xs) <= 500 and min(xs) >= -500
    assert max(abs(a - b) for a, b in zip(xs, xs[1:])) <= 400


def test_capacity_pattern_cycles():
    link = Link(capacity_pattern=[(20e6, 10_000_000), (60e6, 10_000_000)])
    assert link.capacity_at(0) == 20e6
    assert link.capacity_at(10_000_000) == 60e6
    assert link.capacity_at(25_000_000) == 20e6
    assert link.mean_capacity(5_000_000, 15_000_000) == pytest.approx(40e6)


# ---------------------------------------------------------------- AQM


def test_aqm_drops_arriving_p_over_threshold_when_queue_holds_only_i():
    q = PacketQueue(1000, "frameaware", threshold_bytes=800)
    for _ in range(8):
        assert enqueue_aqm(pkt(FrameType.I, 100), q).admitted
    arrival = pkt(FrameType.P, 100)
    res = enqueue_aqm(arrival, q)
    assert not res.admitted and res.dropped == [arrival]
    assert len(q) == 8


def test_aqm_empty_queue_admits():
    for disc in ("droptail", "frameaware"):
        q = PacketQueue(1000, disc)
        assert enqueue_aqm(pkt(FrameType.B, 500), q).admitted


def test_aqm_oversize_always_dropped():
    q = PacketQueue(1000, "frameaware")
    res = enqueue_aqm(pkt(FrameType.I, 1001), q)
    assert not res.admitted and res.oversize


def test_aqm_evicts_newest_p_to_admit_i():
    q = PacketQueue(1000, "frameaware", threshold_bytes=800)
    first, second = pkt(FrameType.P, 400, seq=0), pkt(FrameType.P, 400, seq=1)
    q.enqueue(first)
    q.enqueue(second)
    arrival = pkt(FrameType.I, 300)
    res = q.enqueue(arrival)
    assert res.admitted and res.dropped == [second]
    assert q.packets() == [first, arrival]
    assert q.occupancy == 700


def test_aqm_b_arrival_displaces_p_with_default_priority():
    q = PacketQueue(1000, "frameaware", threshold_bytes=500)
    q.enqueue(pkt(FrameType.P, 400))
    res = q.enqueue(pkt(FrameType.B, 400))
    assert res.admitted and res.dropped[0].frame_type == FrameType.P


def test_aqm_priority_is_configurable():
    q = PacketQueue(1000, "frameaware", drop_priority="BPI", threshold_bytes=500)
    q.enqueue(pkt(FrameType.P, 400))
    b = pkt(FrameType.B, 400)
    assert q.enqueue(b).dropped == [b]


def test_aqm_without_eviction_drops_arrival():
    q = PacketQueue(1000, "frameaware", threshold_bytes=500, allow_eviction=False)
    q.enqueue(pkt(FrameType.P, 400))
    b = pkt(FrameType.B, 400)
    assert q.enqueue(b).dropped == [b]
    i = pkt(FrameType.I, 400)
    assert q.enqueue(i).admitted


def test_aqm_unclassified_refused_over_threshold():
    q = PacketQueue(1000, "frameaware", threshold_bytes=500)
    q.enqueue(pkt(FrameType.P, 400))
    na = pkt(FrameType.NA, 200, flow=Flow.CROSS)
    assert q.enqueue(na).dropped == [na]


def test_aqm_evicts_newest_unclassified_before_frame_packets():
    q = PacketQueue(1000, "frameaware", threshold_bytes=800)
    p = pkt(FrameType.P, 300)
    old, new = pkt(FrameType.NA, 200, flow=Flow.CROSS, seq=0), pkt(FrameType.NA, 200, flow=Flow.CROSS, seq=1)
    for x in (p, old, new):
        assert q.enqueue(x).admitted
    b = pkt(FrameType.B, 200)
    res = q.enqueue(b)
    assert res.admitted and res.dropped == [new]
    assert q.packets() == [p, old, b]


def test_aqm_unclassified_eviction_can_be_disabled():
    q = PacketQueue(1000, "frameaware", threshold_bytes=800, evict_unclassified=False)
    p = pkt(FrameType.P, 300)
    na = pkt(FrameType.NA, 400, flow=Flow.CROSS)
    q.enqueue(p)
    q.enqueue(na)
    b = pkt(FrameType.B, 200)
    assert q.enqueue(b).dropped == [p]


def test_queue_rejects_bad_priority():
    with pytest.raises(DomainError):
        PacketQueue(1000, "frameaware", drop_priority="PPI")


def _run_ops(queue_offer, queue_pop, ops):
    out = []
    for op in ops:
        if op is None:
            out.append(("pop", queue_pop()))
        else:
            out.append(("offer", queue_offer(op)))
    return out


@pytest.mark.parametrize("cls", [FrameType.P, FrameType.B])
def test_single_class_frameaware_equals_droptail_at_threshold(cls):
    # exhaustive over short operation sequences: offers of size 1..3 or pops
    capacity, threshold = 8, 5
    alphabet = [1, 2, 3, None]
    for n in range(1, 7):
        for ops in itertools.product(alphabet, repeat=n):
            fa = PacketQueue(capacity, "frameaware", threshold_bytes=threshold)
            model = DropTailModel(threshold)
            ids = itertools.count()

            def offer_fa(size):
                return fa.enqueue(pkt(cls, size)).admitted

            def pop_fa():
                p = fa.pop()
                return None if p is None else p.payload_bytes

            sizes = {}

            def offer_model_sized(size):
                k = next(ids)
                sizes[k] = size
                return model.offer(k, size)

            def pop_model():
                k = model.pop()
                return None if k is None else sizes[k]

            assert _run_ops(offer_fa, pop_fa, ops) == _run_ops(offer_model_sized, pop_model, ops), ops


def test_single_class_i_behaves_like_droptail_at_capacity():
    rng = np.random.default_rng(1)
    for _ in range(200):
        fa = PacketQueue(20, "frameaware", threshold_bytes=10)
        model = DropTailModel(20)
        for k in range(30):
            if rng.random() < 0.3:
                a, b = fa.pop(), model.pop()
                assert (a is None) == (b is None)
            else:
                size = int(rng.integers(1, 6))
                assert fa.enqueue(pkt(FrameType.I, size)).admitted == model.offer(k, size)


op = st.one_of(
    st.none(),
    st.tuples(st.sampled_from([FrameType.I, FrameType.P, FrameType.B, FrameType.NA]), st.integers(1, 400)),
)


@settings(max_examples=300, deadline=None)
@given(ops=st.lists(op, max_size=60), prio=st.permutations([FrameType.I, FrameType.P, FrameType.B]),
       threshold=st.integers(100, 1000))
def test_i_never_dropped_while_p_or_b_droppable(ops, prio, threshold):
    q = PacketQueue(1000, "frameaware", drop_priority=prio, threshold_bytes=threshold)
    for o in ops:
        if o is None:
            q.pop()
            continue
        cls, size = o
        before = {p.frame_type for p in q.packets()}
        occ = q.occupancy
        res = q.enqueue(pkt(cls, size))
        assert 0 <= q.occupancy <= q.capacity_bytes
        assert q.occupancy == sum(p.payload_bytes for p in q.packets())
        if any(p.frame_type == FrameType.I for p in res.dropped):
            assert not ({FrameType.P, FrameType.B} & before)
            assert cls == FrameType.I
            assert occ + size > q.capacity_bytes


# ---------------------------------------------------------------- microbursts


def test_zero_rate_microburst_has_no_events():
    sim = idle_sim()
    burst = sim.inject_microburst(0, 100_000, 0)
    assert burst.arrival_times() == []
    sim.run_until(200_000)
    assert sim.trace == []


def test_microburst_rejects_empty_duration():
    with pytest.raises(DomainError):
        idle_sim().inject_microburst(0, 0, 1e6)


def _xr_sim(capacity, queue_bytes, discipline="droptail", bitrate=10e6):
    src = XrSource(fps=50, eyes=1, pattern="IPPPP", bitrate=bitrate, mtu_payload=1000, sync_bytes=8)
    sim = Simulator(Link(capacity, 1000), PacketQueue(queue_bytes, discipline))
    sim.attach_source(src, uplink=False, sync_uplink=False)
    return sim


def test_microburst_filling_residual_capacity_delays_without_drops():
    # XR offers 10 Mb/s (+ sync 3.2 kb/s) on 20 Mb/s; cross traffic takes the other ~10 Mb/s.
    base = _xr_sim(20e6, 2_000_000)
    base.run_until(1_000_000)
    sim = _xr_sim(20e6, 2_000_000)
    sim.inject_microburst(200_000, 400_000, 20e6 - 10e6 - 3200, pkt_bytes=1000)
    sim.run_until(1_000_000)
    assert sim.dropped == 0
    lat_base = measure_interval(base.trace, 200_000, 600_000).latency
    lat = measure_interval(sim.trace, 200_000, 600_000).latency
    assert lat > lat_base


def test_microburst_far_above_capacity_causes_loss():
    sim = _xr_sim(20e6, 60_000)
    sim.inject_microburst(200_000, 200_000, 200e6, pkt_bytes=1500)
    sim.run_until(1_000_000)
    m = measure_interval(sim.trace, 200_000, 400_000)
    assert m.loss_rate > 0
    assert measure_interval(sim.trace, 0, 200_000).loss_rate == 0


def test_overlapping_bursts_add_up():
    sim = idle_sim(capacity=100e6)
    sim.inject_microburst(0, 100_000, 10e6)
    sim.inject_microburst(50_000, 100_000, 10e6)
    assert sim.available_capacity(50_000, 100_000) == pytest.approx(80e6)


# ---------------------------------------------------------------- decodability


def test_decodable_all_complete():
    assert decodable_set("IBBPBBP", [True] * 7) == set(range(7))


def test_decodable_lost_i_kills_gop():
    assert decodable_set("IPPBP", [False, True, True, True, True]) == set()


def test_decodable_open_gop_example():
    # I P1 P2 B, with B anchored on P2 and the next GOP's I; P1 lost
    assert decodable_set("IPPB", [True, False, True, True]) == {0}


def test_decodable_flag_errors():
    with pytest.raises(DomainError):
        decodable_set("IPP", {0: True, 1: True, 7: True})
    with pytest.raises(DomainError):
        decodable_set("IPP", {0: True, 1: True})
    assert decodable_set("IPP", {10: True, 11: False, 12: True}, first_frame_id=10) == {10}


def test_decodable_matches_closure_oracle_small():
    for pattern in all_gop_patterns(6):
        n = len(pattern)
        for flags in itertools.product([False, True], repeat=n):
            for next_ok in (False, True):
                assert decodable_set(pattern, flags, next_anchor_decodable=next_ok) == \
                    closure_decodable(pattern, flags, next_ok), (pattern, flags, next_ok)


# ---------------------------------------------------------------- measurement


def _rec(t, ev, nbytes=100, created=0, flow=Flow.DOWNLINK):
    return TraceRecord(t, ev, DOWNLINK, flow, 0, Eye.LEFT, FrameType.P, 0, nbytes, 0, created)


def test_measure_lossless_idle_link():
    sim = idle_sim()
    sim.call_at(0, lambda s: s.send(pkt(size=1500)))
    sim.run_until(100_000)
    m = measure_interval(sim.trace, 0, 100_000)
    assert m.loss_rate == 0
    assert m.latency == pytest.approx(6.0)
    assert m.throughput == pytest.approx(1500 * 8 / 0.1)


def test_measure_no_traffic():
    m = measure_interval([], 0, 1_000_000)
    assert m.throughput == 0 and m.loss_rate == 0 and m.latency is None


def test_measure_loss_ratio():
    trace = [_rec(10 * k, Ev.DELIVER) for k in range(9)] + [_rec(95, Ev.DROP)]
    assert measure_interval(trace, 0, 1000).loss_rate == pytest.approx(0.1)


def test_measure_excludes_cross_traffic():
    trace = [_rec(10, Ev.DELIVER, 1000), _rec(20, Ev.DELIVER, 5000, flow=Flow.CROSS)]
    assert measure_interval(trace, 0, 1_000_000).throughput == pytest.approx(8000)


def test_measure_jitter_is_mean_abs_delta():
    trace = [_rec(1000, Ev.DELIVER, created=0), _rec(4000, Ev.DELIVER, created=1000),
             _rec(5000, Ev.DELIVER, created=4000)]
    m = measure_interval(trace, 0, 10_000)
    # latencies 1, 3, 1 ms
    assert m.latency == pytest.approx(5 / 3)
    assert m.jitter == pytest.approx(2.0)


def test_in_network_vantage_matches_end_host_without_propagation():
    sim = _xr_sim(40e6, 500_000)
    sim.run_until(2_000_000)
    host = measure_interval(sim.trace, 500_000, 1_500_000, Vantage.END_HOST)
    net = measure_interval(sim.trace, 500_000, 1_500_000, Vantage.IN_NETWORK)
    assert host.loss_rate == net.loss_rate == 0
    assert host.latency - net.latency == pytest.approx(1.0, abs=0.05)
    assert net.throughput == pytest.approx(host.throughput, rel=0.02)


# ---------------------------------------------------------------- whole-run properties


def _congested(discipline, seed, jitter=False, bitrate=8e6):
    rng = np.random.default_rng(seed)
    src = XrSource(fps=60, eyes=2, pattern="IPPPPP", bitrate=bitrate, mtu_payload=1460, rng=rng)
    jit = UniformJitter(500, np.random.default_rng(seed + 1)) if jitter else None
    sim = Simulator(Link(30e6, 2000, jit), PacketQueue(80_000, discipline), Link(10e6, 2000))
    sim.attach_source(src)
    for _ in range(3):
        sim.inject_microburst(int(rng.integers(0, 800_000)), int(rng.integers(20_000, 120_000)),
                              float(rng.uniform(20e6, 120e6)))
    return sim


@pytest.mark.parametrize("discipline", ["droptail", "frameaware"])
def test_packet_conservation(discipline):
    sim = _congested(discipline, 4, bitrate=18e6)
    sim.run_until(700_000)
    assert sim.dropped > 0
    assert sim.generated == sim.delivered + sim.dropped + sim.in_flight()
    sim.drain()
    assert sim.in_flight() == 0
    assert sim.generated == sim.delivered + sim.dropped


def test_trace_determinism():
    a = _congested("frameaware", 9, jitter=True)
    b = _congested("frameaware", 9, jitter=True)
    assert a.run_until(1_000_000) == b.run_until(1_000_000)


def test_work_conservation():
    sim = _congested("droptail", 2)
    sim.run_until(1_000_000)
    link = sim.ports[DOWNLINK].link
    departs = [r for r in sim.trace if r.event == Ev.DEPART and r.link == DOWNLINK]
    for prev, nxt in zip(departs, departs[1:]):
        if prev.occupancy > 0:
            # queue non-empty at departure: the next packet goes straight into service
            assert nxt.time_us - prev.time_us == link.serialization_us(nxt.nbytes, 0)


def test_event_and_measurement_csv(tmp_path):
    sim = _congested("frameaware", 1)
    sim.run_until(500_000)
    write_event_csv(tmp_path / "events.csv", sim.trace)
    lines = (tmp_path / "events.csv").read_text().splitlines()
    assert lines[0] == "time_ms,event,flow,frame_id,frame_type,bytes,queue_occupancy_bytes"
    assert {ln.split(",")[1] for ln in lines[1:]} <= {"enqueue", "drop", "deliver"}
    ms = [measure_interval(sim.trace, t, t + 100_000) for t in range(0, 500_000, 100_000)]
    write_measurement_csv(tmp_path / "m.csv", ms)
    rows = (tmp_path / "m.csv").read_text().splitlines()
    assert rows[0] == "t_start_ms,vantage,throughput_bps,latency_ms,jitter_ms,loss_rate"
    assert len(rows) == 6


def test_throughput_never_exceeds_capacity():
    sim = _congested("droptail", 3)
    sim.run_until(1_000_000)
    for t in range(0, 1_000_000, 100_000):
        m = measure_interval(sim.trace, t, t + 100_000, Vantage.IN_NETWORK)
        assert m.throughput <= 30e6 * 1.0001
