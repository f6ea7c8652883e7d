import dataclasses
import filecmp

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xrsim import harness
from xrsim.config import parse_config_text
from xrsim.media import DomainError
from xrsim.rl import load_checkpoint, save_checkpoint

SMALL = """\
[media]
width = 2160
height = 1200
fps = 30
eyes = 2

[traffic]
mtu = 8960
uplink = no
sync_uplink = no

[network]
capacity = {capacity}
queue_bytes = 200000
discipline = {discipline}

[rl]
ladder = 8e6, 16e6, 32e6
k = 3
hidden = 8, 8
steps = 400
sync_period = 100
seed = 3

[run]
duration_s = 3
interval_ms = 250
episode_intervals = 12
eval_seeds = 2
"""


def cfg(capacity="100e6", discipline="droptail", extra=""):
    return parse_config_text(SMALL.format(capacity=capacity, discipline=discipline) + extra)


def test_lowest_fixed_level_on_uncongested_link_is_clean():
    report, _ = harness.run_scenario(cfg(), harness.FixedBitrate(0))
    agg = report.aggregates
    assert agg.loss_rate == 0.0
    assert agg.decodable_ratio == 1.0
    assert all(r["loss_rate"] == 0.0 and r["dropped_pkts"] == 0 for r in report.intervals)
    assert len(report.frames) == 3 * 30 * 2


def test_fixed_above_capacity_under_droptail_loses_frames():
    report, _ = harness.run_scenario(cfg(capacity="10e6"), harness.FixedBitrate(2))
    assert report.aggregates.decodable_ratio < 1.0
    assert report.aggregates.loss_rate > 0.0


def test_oracle_on_constant_channel_equals_best_feasible_fixed():
    config = cfg(capacity="20e6")
    oracle, _ = harness.run_scenario(config, harness.Oracle())
    fixed, _ = harness.run_scenario(config, harness.FixedBitrate(1))
    assert [r["level"] for r in oracle.intervals] == [1] * config.intervals
    assert oracle.intervals == fixed.intervals
    assert oracle.aggregates == fixed.aggregates


def test_framerate_and_stall_come_from_decodable_frames():
    report, _ = harness.run_scenario(cfg(), harness.FixedBitrate(0))
    # 7.5 frames per eye per 250 ms interval: counts alternate between 16 and 14
    assert sum(r["frames"] for r in report.intervals) == 3 * 30 * 2
    for r in report.intervals:
        assert r["frames"] == r["decodable_frames"] in (14, 16)
        # framerate is capped at fps, so the 16-frame intervals do not score above 1
        expect_mqi = 0.4 * min(1.0, r["decodable_frames"] / 2 / 0.25 / 30)
        assert r["mqi"] == pytest.approx(expect_mqi)


def test_indexes_and_qoe_in_unit_range():
    report, _ = harness.run_scenario(cfg(capacity="10e6"), harness.FixedBitrate(2))
    for r in report.intervals:
        for k in ("mqi", "iqi", "pqi", "qoe"):
            assert 0.0 <= r[k] <= 1.0


def test_same_seed_byte_identical_outputs(tmp_path):
    config = cfg(capacity="12e6", discipline="frameaware")
    for d in ("a", "b"):
        report, env = harness.run_scenario(config, harness.Oracle(), keep_trace=True)
        harness.write_report(report, tmp_path / d, env)
    names = ["intervals.csv", "frames.csv", "qoe.csv", "events.csv", "measurements.csv", "summary.txt"]
    match, mismatch, errors = filecmp.cmpfiles(tmp_path / "a", tmp_path / "b", names, shallow=False)
    assert match == names, (mismatch, errors)


def test_different_seeds_differ():
    config = cfg(capacity="12e6")
    config = config.replace(stream=dataclasses.replace(config.stream, size_noise=0.2))
    a, _ = harness.run_scenario(config, harness.FixedBitrate(1), seed=1)
    b, _ = harness.run_scenario(config, harness.FixedBitrate(1), seed=2)
    assert a.frames != b.frames


@pytest.mark.parametrize("capacity,level", [("100e6", 0), ("10e6", 2), ("12e6", 1)])
def test_csv_round_trip_reproduces_aggregates(tmp_path, capacity, level):
    report, env = harness.run_scenario(cfg(capacity=capacity, discipline="frameaware"),
                                       harness.FixedBitrate(level), keep_trace=True)
    harness.write_report(report, tmp_path, env)
    assert harness.read_rows(tmp_path / "intervals.csv") == report.intervals
    assert harness.read_rows(tmp_path / "frames.csv") == report.frames
    assert harness.reaggregate(tmp_path) == report.aggregates


def test_summary_lists_aggregates(tmp_path):
    report, _ = harness.run_scenario(cfg(), harness.FixedBitrate(0))
    harness.write_report(report, tmp_path)
    text = (tmp_path / "summary.txt").read_text()
    for key in harness.SUMMARY_KEYS:
        assert f"{key}: " in text
    assert report.config_hash in text


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(0, 1e4, allow_nan=False), min_size=1, max_size=40), st.floats(0.1, 100))
def test_nearest_rank_matches_numpy(values, pct):
    assert harness.percentile_nearest_rank(values, pct) == np.percentile(values, pct, method="inverted_cdf")


def test_percentile_of_nothing():
    assert harness.percentile_nearest_rank([], 95) is None


def test_parse_policy():
    config = cfg()
    assert harness.parse_policy("oracle", config) == harness.Oracle()
    assert harness.parse_policy("fixed:2", config) == harness.FixedBitrate(2)
    for bad in ("fixed:3", "fixed:x", "greedy", "trained:"):
        with pytest.raises(DomainError):
            harness.parse_policy(bad, config)


def test_zero_steps_checkpoint_equals_initialization(tmp_path):
    config = cfg()
    out = harness.train(config, tmp_path, steps=0)
    ck = load_checkpoint(out.checkpoint)
    assert ck.steps == 0
    np.testing.assert_array_equal(ck.theta, harness.init_net(config).theta)
    assert (tmp_path / "train_log.csv").read_text().strip() == ",".join(harness.LOG_COLUMNS)


def test_multi_agent_training_reproducible(tmp_path):
    config = cfg()
    config = config.replace(rl=dataclasses.replace(config.rl, agents=4))
    a = harness.train(config, tmp_path / "a", steps=200)
    b = harness.train(config, tmp_path / "b", steps=200)
    assert (tmp_path / "a" / "policy.ckpt").read_bytes() == (tmp_path / "b" / "policy.ckpt").read_bytes()
    assert (tmp_path / "a" / "train_log.csv").read_bytes() == (tmp_path / "b" / "train_log.csv").read_bytes()
    assert a.steps == 200
    rows = (tmp_path / "a" / "train_log.csv").read_text().splitlines()[1:]
    assert sorted({r.split(",")[1] for r in rows}) == ["0", "1", "2", "3"]


def test_resume_continues_step_count(tmp_path):
    config = cfg()
    first = harness.train(config, tmp_path / "one", steps=200)
    second = harness.train(config, tmp_path / "two", resume=first.checkpoint, steps=400)
    assert second.steps == 400
    assert load_checkpoint(second.checkpoint).steps == 400
    steps = [int(r.split(",")[0]) for r in second.log.read_text().splitlines()[1:]]
    assert steps == [100, 200, 300, 400]
    assert not np.array_equal(load_checkpoint(first.checkpoint).theta, second.net.theta)


def test_trained_policy_runs_and_mismatch_is_named(tmp_path):
    config = cfg()
    out = harness.train(config, tmp_path, steps=100)
    policy = harness.parse_policy(f"trained:{out.checkpoint}", config)
    report, _ = harness.run_scenario(config, policy)
    assert report.policy == "trained"
    other = cfg().replace(ladder=(8e6, 16e6, 40e6))
    with pytest.raises(DomainError, match="ladder"):
        harness.check_compatible(load_checkpoint(out.checkpoint), other)
    save_checkpoint(tmp_path / "wide.ckpt", harness.PolicyNet((13, 4, 3)), 3, config.ladder)
    with pytest.raises(DomainError, match="layer sizes"):
        harness.parse_policy(f"trained:{tmp_path / 'wide.ckpt'}", config)


def test_compare_table_covers_every_policy(tmp_path):
    config = cfg(capacity="20e6")
    out = harness.train(config, tmp_path, steps=100)
    table = harness.compare_baselines(config, out.checkpoint)
    assert [r["policy"] for r in table] == ["trained", "fixed:0", "fixed:1", "fixed:2", "oracle"]
    assert all(r["runs"] == 2 for r in table)
    by = {r["policy"]: r for r in table}
    assert by["oracle"]["mean_reward"] == by["fixed:1"]["mean_reward"]
    assert "±" in harness.format_table(table)


def test_eval_seeds_are_offset_from_training():
    config = cfg()
    assert harness.eval_seeds(config) == [3 + 10**6, 3 + 10**6 + 1]


def test_zero_margin_config_still_produces_a_table():
    # capacity exactly equals the top ladder rate: every level is "feasible", the top one has no headroom
    config = cfg(capacity="32e6")
    table = harness.compare_baselines(config)
    assert len(table) == 4
    for r in table:
        assert np.isfinite(r["mean_qoe"]) and np.isfinite(r["mean_reward"])
