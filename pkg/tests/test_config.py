import random
from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xrsim.config import ConfigError, parse_config, parse_config_text

ROOT = Path(__file__).resolve().parents[1]
DEFAULT = ROOT / "configs" / "default.ini"

BASE = """\
[media]
width = 2160
height = 1200
fps = 60
eyes = 2

[network]
capacity = 100e6
queue_bytes = 1000000
discipline = frameaware

[rl]
ladder = 20e6, 40e6, 60e6
seed = 7

[run]
duration_s = 4
output_dir = somewhere
"""


def errors_of(text):
    with pytest.raises(ConfigError) as info:
        parse_config_text(text, "t.ini")
    return info.value.errors


def test_shipped_configs_parse():
    for path in sorted((ROOT / "configs").glob("*.ini")):
        parse_config(path)


def test_defaults_fill_in():
    cfg = parse_config_text("[rl]\nladder = 1e6, 2e6\n")
    assert cfg.stream.pattern == "IPPPPP"
    assert cfg.qoe.reward.deadline_ms == pytest.approx(1000 / 60)
    assert cfg.bounds.throughput_bps == cfg.network.capacity_bps
    assert cfg.intervals == 20


def test_hash_stable_across_parses():
    assert parse_config_text(BASE).hash() == parse_config_text(BASE).hash()
    assert parse_config(DEFAULT).hash() == parse_config(DEFAULT).hash()


def test_hash_ignores_comments_order_and_output_dir():
    a = parse_config_text(BASE)
    reordered = BASE.replace("fps = 60\neyes = 2", "eyes = 2   # both eyes\n; a note\nfps = 60")
    reordered = reordered.replace("somewhere", "elsewhere")
    assert parse_config_text(reordered).hash() == a.hash()


def test_hash_ignores_spelling_of_the_same_value():
    a = parse_config_text(BASE)
    assert parse_config_text(BASE.replace("capacity = 100e6", "capacity = 100000000")).hash() == a.hash()


@pytest.mark.parametrize("old,new", [
    ("fps = 60", "fps = 90"),
    ("capacity = 100e6", "capacity = 90e6"),
    ("discipline = frameaware", "discipline = droptail"),
    ("seed = 7", "seed = 8"),
    ("ladder = 20e6, 40e6, 60e6", "ladder = 20e6, 40e6, 70e6"),
    ("duration_s = 4", "duration_s = 5"),
])
def test_hash_changes_with_meaningful_keys(old, new):
    assert parse_config_text(BASE.replace(old, new)).hash() != parse_config_text(BASE).hash()


def test_hash_changes_when_a_default_is_made_different():
    a = parse_config_text(BASE)
    b = parse_config_text(BASE + "\n[qoe]\nalpha = 2\n")
    c = parse_config_text(BASE + "\n[qoe]\nalpha = 1\n")
    assert a.hash() != b.hash()
    assert a.hash() == c.hash()


def _shuffled(text, rnd):
    sections = []
    for block in text.strip().split("\n\n"):
        head, *lines = block.split("\n")
        rnd.shuffle(lines)
        sections.append("\n".join([head] + [f"# note {rnd.random()}"] + lines))
    rnd.shuffle(sections)
    return "\n\n".join(sections) + "\n"


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6))
def test_hash_invariant_under_reordering(seed):
    rnd = random.Random(seed)
    assert parse_config_text(_shuffled(BASE, rnd)).hash() == parse_config_text(BASE).hash()


def test_eyes_three_is_an_error_with_line():
    errs = errors_of(BASE.replace("eyes = 2", "eyes = 3"))
    assert len(errs) == 1
    assert "[media] eyes (line 5)" in errs[0]


def test_two_errors_reported_together():
    errs = errors_of(BASE.replace("eyes = 2", "eyes = 3").replace("queue_bytes = 1000000", "queue_bytes = -5"))
    assert len(errs) == 2
    assert any("eyes" in e for e in errs) and any("queue_bytes" in e for e in errs)


def test_unknown_key_and_section():
    errs = errors_of(BASE + "\n[bogus]\nx = 1\n[run]\n".replace("[run]\n", "") + "")
    assert any("bogus" in e for e in errs)
    errs = errors_of(BASE.replace("fps = 60", "fps = 60\nfsp = 1"))
    assert any("fsp" in e for e in errs)


def test_bad_number_names_key():
    errs = errors_of(BASE.replace("capacity = 100e6", "capacity = fast"))
    assert any("capacity" in e and "line" in e for e in errs)


def test_ladder_must_increase():
    errs = errors_of(BASE.replace("20e6, 40e6, 60e6", "40e6, 20e6"))
    assert any("ladder" in e for e in errs)


def test_weights_must_sum_to_one():
    errs = errors_of(BASE + "\n[qoe]\nindex_weights = 0.5, 0.5, 0.5\n")
    assert any("index_weights" in e for e in errs)


def test_custom_factor_tree():
    text = BASE + """
[qoe]
tree.mqi = res:1
tree.iqi = lat:1
tree.pqi = loss:0.5, lat:0.5
leaf.res = delivered_resolution_level, 0, 2
leaf.lat = end_to_end_latency, 50, 0
leaf.loss = loss_rate, 0.2, 0
"""
    tree = parse_config_text(text).qoe.tree
    assert set(tree.leaves) == {"res", "lat", "loss"}
    errs = errors_of(text.replace("tree.iqi = lat:1", "tree.iqi = lat:0.9"))
    assert any("iqi" in e for e in errs)


def test_missing_file():
    with pytest.raises(ConfigError):
        parse_config("/nonexistent/x.ini")


def test_lr_schedule_key():
    assert parse_config_text(BASE.replace("seed = 7", "seed = 7\nlr_schedule = Linear")).rl.lr_schedule == "linear"
    errs = errors_of(BASE.replace("seed = 7", "seed = 7\nlr_schedule = cosine"))
    assert any("lr_schedule" in e for e in errs)
