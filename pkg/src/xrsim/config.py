"""Experiment configuration: sectioned ``key = value`` files (see docs/config_grammar.md).

Parsing never stops at the first problem. Every syntax error, unknown key and
invariant violation is collected with its section, key and line number, and
:class:`ConfigError` carries the whole list.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
import re
from dataclasses import dataclass
from pathlib import Path

from xrsim.env import Burst, NetworkSpec, RandomBursts, StateBounds, StreamSpec
from xrsim.media import Codec, DomainError, MediaSpec
from xrsim.netsim import Vantage
from xrsim.qoe import (
    INDEXES,
    KPI_FIELDS,
    FactorTree,
    Leaf,
    Node,
    RewardParams,
    check_weights,
    default_tree,
    linear_quality,
)
from xrsim.rl import RLParams


class ConfigError(ValueError):
    def __init__(self, errors: list[str]):
        self.errors = list(errors)
        super().__init__("\n".join(self.errors))


@dataclass(frozen=True)
class QoeConfig:
    tree: FactorTree
    index_weights: tuple
    reward: RewardParams


@dataclass(frozen=True)
class RunSpec:
    duration_s: float = 20.0
    interval_ms: float = 1000.0
    output_dir: str = "out"
    vantage: str = "endhost"
    episode_intervals: int = 60
    eval_seeds: int = 10
    initial_level: int = 0


@dataclass(frozen=True)
class ExperimentConfig:
    media: MediaSpec
    stream: StreamSpec
    network: NetworkSpec
    qoe: QoeConfig
    rl: RLParams
    ladder: tuple
    seed: int
    bounds: StateBounds
    run: RunSpec
    path: str = ""

    @property
    def intervals(self) -> int:
        return max(1, int(round(self.run.duration_s * 1000 / self.run.interval_ms)))

    def canonical(self) -> dict:
        """Every semantically meaningful value, with defaults filled in (output paths excluded)."""
        tree = self.qoe.tree
        return {
            "media": _plain(self.media),
            "stream": _plain(self.stream),
            "network": _plain(self.network),
            "qoe": {
                "nodes": {n: [list(c) for c in node.children] for n, node in sorted(tree.nodes.items())},
                "leaves": {n: _plain(leaf) for n, leaf in sorted(tree.leaves.items())},
                "index_weights": list(self.qoe.index_weights),
                "reward": _plain(self.qoe.reward),
            },
            "rl": _plain(self.rl),
            "ladder": list(self.ladder),
            "seed": self.seed,
            "bounds": _plain(self.bounds),
            "run": {k: v for k, v in _plain(self.run).items() if k != "output_dir"},
        }

    def hash(self) -> str:
        blob = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


def _plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_plain(x) for x in obj]
    if isinstance(obj, Codec):
        return obj.value
    if isinstance(obj, float) and obj.is_integer():
        return int(obj)
    return obj


# ---------------------------------------------------------------- value readers


class _Section:
    """Typed access to one section, recording errors instead of raising."""

    def __init__(self, name, items: dict, lines: dict, errors: list, allowed: set, prefixes=()):
        self.name = name
        self.items = items
        self.lines = lines
        self.errors = errors
        for key in items:
            if key not in allowed and not any(key.startswith(p) for p in prefixes):
                self.err(key, f"unknown key (allowed: {', '.join(sorted(allowed))})")

    def where(self, key=None):
        if key is None:
            return f"[{self.name}]"
        line = self.lines.get((self.name, key))
        return f"[{self.name}] {key}" + (f" (line {line})" if line else "")

    def err(self, key, msg):
        self.errors.append(f"{self.where(key)}: {msg}")

    def has(self, key):
        return key in self.items

    def _get(self, key, default, conv, what):
        if key not in self.items:
            return default
        raw = self.items[key].strip()
        try:
            return conv(raw)
        except (ValueError, DomainError) as e:
            detail = "" if "could not convert" in str(e) else f" ({e})"
            self.err(key, f"expected {what}, got {raw!r}{detail}")
            return default

    def float(self, key, default=None):
        return self._get(key, default, _float, "a number")

    def int(self, key, default=None):
        return self._get(key, default, _int, "an integer")

    def bool(self, key, default=None):
        return self._get(key, default, _bool, "yes/no")

    def str(self, key, default=None):
        return self._get(key, default, lambda s: s, "text")

    def floats(self, key, default=None, n=None):
        def conv(s):
            vals = tuple(_float(x) for x in _split(s))
            if n is not None and len(vals) != n:
                raise ValueError(f"need {n} values")
            return vals
        return self._get(key, default, conv, "a comma-separated list of numbers" if n is None else f"{n} numbers")

    def words(self, key, default=None):
        return self._get(key, default, lambda s: tuple(_split(s)), "a comma-separated list")


def _split(s):
    parts = [p.strip() for p in s.split(",")]
    if not s.strip() or any(not p for p in parts):
        raise ValueError("empty list item")
    return parts


def _float(s):
    v = float(s)
    if v != v or v in (float("inf"), float("-inf")):
        raise ValueError("must be finite")
    return v


def _int(s):
    v = _float(s)
    if not v.is_integer():
        raise ValueError("must be whole")
    return int(v)


_BOOLS = {"yes": True, "true": True, "on": True, "1": True, "no": False, "false": False, "off": False, "0": False}


def _bool(s):
    try:
        return _BOOLS[s.lower()]
    except KeyError:
        raise ValueError("not a boolean") from None


# ---------------------------------------------------------------- sections

SECTIONS = ("media", "traffic", "network", "qoe", "rl", "run")
MEDIA_KEYS = {"bits", "fps", "eyes", "codec", "width", "height", "fov_width", "fov_height", "ppd"}
TRAFFIC_KEYS = {"pattern", "weights", "mtu", "sync_bytes", "uplink", "uplink_hz", "uplink_bytes", "sync_uplink",
                "size_noise"}
NETWORK_KEYS = {"capacity", "capacity_pattern", "random_phase", "propagation_ms", "jitter", "jitter_ms",
                "jitter_step_ms", "queue_bytes", "discipline", "drop_priority", "threshold", "eviction",
                "evict_unclassified", "uplink_capacity", "uplink_propagation_ms", "uplink_queue_bytes",
                "microbursts", "burst_count", "burst_rate", "burst_duration_ms"}
QOE_KEYS = {"index_weights", "alpha", "beta", "gamma", "deadline_ms", "quality_map", "latency_worst_ms",
            "loss_worst"}
RL_KEYS = {"ladder", "k", "hidden", "discount", "actor_lr", "critic_lr", "epsilon_start", "epsilon_end",
           "epsilon_anneal", "sync_period", "batch_size", "entropy_coef", "optimizer", "lr_schedule", "agents", "steps",
           "seed",
           "throughput_bound", "latency_bound_ms", "jitter_bound_ms"}
RUN_KEYS = {"duration_s", "interval_ms", "output_dir", "vantage", "episode_intervals", "eval_seeds",
            "initial_level"}


def _media(s: _Section):
    kw = dict(bits_per_channel=s.int("bits", 8), refresh_rate_fps=s.float("fps", 60.0), eyes=s.int("eyes", 2),
              codec=s.str("codec", "h264"))
    if s.has("width") or s.has("height") or not (s.has("fov_width") or s.has("fov_height") or s.has("ppd")):
        kw.update(width_px=s.int("width", 2160), height_px=s.int("height", 1200))
    else:
        kw.update(fov_width_deg=s.float("fov_width"), fov_height_deg=s.float("fov_height"), ppd=s.float("ppd"))
    try:
        kw["codec"] = Codec.parse(kw["codec"])
    except DomainError as e:
        s.err("codec", str(e))
        kw["codec"] = Codec.H264
    try:
        return MediaSpec(**kw)
    except DomainError as e:
        for msg in str(e).split("; "):
            s.err(_media_key(msg), msg)
    return MediaSpec(width_px=2160, height_px=1200)


def _media_key(msg):
    for key, field_name in (("eyes", "eyes"), ("fps", "refresh_rate_fps"), ("bits", "bits_per_channel"),
                            ("width", "width_px"), ("height", "height_px"), ("ppd", "ppd"),
                            ("fov_width", "fov_width_deg"), ("fov_height", "fov_height_deg")):
        if msg.startswith(field_name):
            return key
    return None


def _check(s: _Section, spec, key_of):
    for msg in spec.errors():
        s.err(key_of(msg), msg)


def _key_matcher(pairs):
    def key_of(msg):
        for needle, key in pairs:
            if needle in msg:
                return key
        return None
    return key_of


def _traffic(s: _Section, media: MediaSpec):
    ub = s.floats("uplink_bytes", (100, 100), 2)
    w = s.floats("weights", (4, 2, 1), 3)
    spec = StreamSpec(
        fps=media.refresh_rate_fps, eyes=media.eyes, pattern=s.str("pattern", "IPPPPP").upper(),
        weights=tuple(w), mtu_payload=s.int("mtu", 1460), sync_bytes=s.int("sync_bytes", 8),
        uplink=s.bool("uplink", True), uplink_hz=s.float("uplink_hz", 500.0),
        uplink_bytes=(int(ub[0]), int(ub[1])), sync_uplink=s.bool("sync_uplink", True),
        size_noise=s.float("size_noise", 0.0))
    _check(s, spec, _key_matcher([("GOP", "pattern"), ("pattern", "pattern"), ("weights", "weights"),
                                  ("mtu", "mtu"), ("sync_bytes", "sync_bytes"), ("uplink_hz", "uplink_hz"),
                                  ("uplink packet", "uplink_bytes"), ("size_noise", "size_noise")]))
    return spec


def _pairs(s: _Section, key, default=()):
    def conv(raw):
        out = []
        for item in _split(raw):
            parts = item.split(":")
            out.append(tuple(_float(p) for p in parts))
        return tuple(out)
    return s._get(key, default, conv, "a comma-separated list of colon-separated numbers")


def _network(s: _Section):
    pattern = _pairs(s, "capacity_pattern")
    if any(len(p) != 2 for p in pattern):
        s.err("capacity_pattern", "each phase is capacity_bps:duration_ms")
        pattern = ()
    if pattern and s.has("capacity"):
        s.err("capacity", "give capacity or capacity_pattern, not both")
    bursts = _pairs(s, "microbursts")
    if any(len(b) != 3 for b in bursts):
        s.err("microbursts", "each burst is start_ms:duration_ms:rate_bps")
        bursts = ()
    rb = None
    if s.has("burst_count"):
        cnt = s.floats("burst_count", (1, 1), 2)
        rb = RandomBursts((int(cnt[0]), int(cnt[1])), s.floats("burst_rate", (0.0, 0.0), 2),
                          s.floats("burst_duration_ms", (20.0, 200.0), 2))
    elif s.has("burst_rate") or s.has("burst_duration_ms"):
        s.err("burst_count", "burst_rate/burst_duration_ms need burst_count")
    prio = tuple(p.upper() for p in s.words("drop_priority", ("P", "B", "I")))
    spec = NetworkSpec(
        capacity_bps=s.float("capacity", 100e6), capacity_pattern=tuple(pattern),
        random_phase=s.bool("random_phase", False), propagation_ms=s.float("propagation_ms", 5.0),
        jitter=s.str("jitter", "none").lower(), jitter_ms=s.float("jitter_ms", 0.0),
        jitter_step_ms=s.float("jitter_step_ms", 0.1), queue_bytes=s.int("queue_bytes", 1_000_000),
        discipline=s.str("discipline", "droptail").lower(), drop_priority=prio,
        threshold=s.float("threshold", 0.8), eviction=s.bool("eviction", True),
        evict_unclassified=s.bool("evict_unclassified", True),
        uplink_capacity_bps=s.float("uplink_capacity", 10e6),
        uplink_propagation_ms=s.float("uplink_propagation_ms", 5.0),
        uplink_queue_bytes=s.int("uplink_queue_bytes", 1_000_000),
        bursts=tuple(Burst(*b) for b in bursts), random_bursts=rb)
    _check(s, spec, _key_matcher([("uplink queue", "uplink_queue_bytes"), ("queue capacity", "queue_bytes"),
                                  ("uplink capacity", "uplink_capacity"), ("uplink propagation", "uplink_propagation_ms"),
                                  ("capacity must", "capacity"), ("phase", "capacity_pattern"),
                                  ("propagation", "propagation_ms"), ("jitter must", "jitter"),
                                  ("jitter bounds", "jitter_ms"),
                                  ("discipline", "discipline"), ("drop_priority", "drop_priority"),
                                  ("threshold", "threshold"),
                                  ("microburst", "microbursts"), ("random burst count", "burst_count"),
                                  ("random burst rate", "burst_rate"),
                                  ("random burst duration", "burst_duration_ms")]))
    return spec


def _ladder_ok(ladder) -> bool:
    return len(ladder) >= 2 and ladder[0] > 0 and all(b > a for a, b in zip(ladder, ladder[1:]))


def _qoe(s: _Section, ladder, fps):
    levels = len(ladder)
    nodes, leaves = {}, {}
    for key in s.items:
        if key.startswith("tree."):
            name = key[5:]
            def conv(raw):
                kids = []
                for item in _split(raw):
                    child, sep, w = item.partition(":")
                    if not sep:
                        raise ValueError("child:weight")
                    kids.append((child.strip(), _float(w)))
                return tuple(kids)
            kids = s._get(key, None, conv, "a list of child:weight")
            if kids is not None:
                nodes[name] = Node(kids)
        elif key.startswith("leaf."):
            name = key[5:]
            parts = s.words(key)
            if parts is None:
                continue
            if len(parts) != 3:
                s.err(key, "expected kpi, worst, best")
                continue
            kpi, worst, best = parts
            if kpi not in KPI_FIELDS:
                s.err(key, f"unknown KPI {kpi!r} (known: {', '.join(KPI_FIELDS)})")
                continue
            try:
                leaves[name] = Leaf(kpi, _float(worst), _float(best))
            except ValueError:
                s.err(key, "worst and best must be numbers")
    tree = None
    if nodes or leaves:
        try:
            tree = FactorTree(nodes, leaves)
        except DomainError as e:
            for msg in str(e).split("; "):
                node = re.search(r"node (\S+)|leaf (\S+)|no (\w+) node", msg)
                key = None
                if node:
                    if node.group(1):
                        key = "tree." + node.group(1)
                    elif node.group(2):
                        key = "leaf." + node.group(2)
                    else:
                        key = "tree." + node.group(3)
                s.err(key, msg)
    if tree is None:
        tree = default_tree(levels, fps, s.float("latency_worst_ms", 100.0), s.float("loss_worst", 0.1))
    elif s.has("latency_worst_ms") or s.has("loss_worst"):
        s.err("latency_worst_ms", "only applies to the built-in factor tree")
    weights = s.floats("index_weights", (0.4, 0.3, 0.3), 3)
    try:
        weights = check_weights(weights)
    except DomainError as e:
        s.err("index_weights", str(e))
    qmap = s.str("quality_map", "linear")
    if not _ladder_ok(ladder):
        q = tuple(i / (levels - 1) for i in range(levels)) if levels > 1 else (1.0,)  # ladder error already reported
    elif qmap.strip().lower() == "linear":
        q = linear_quality(ladder)
    else:
        q = s.floats("quality_map", ())
        if len(q) != levels:
            s.err("quality_map", f"needs one value per ladder level ({levels}), got {len(q)}")
    kw = dict(quality_map=q, deadline_ms=s.float("deadline_ms", round(1000.0 / fps, 6)),
              alpha=s.float("alpha", 1.0), beta=s.float("beta", 1.0), gamma=s.float("gamma", 1.0))
    try:
        reward = RewardParams(**kw)
    except DomainError as e:
        for msg in str(e).split("; "):
            s.err(next((k for k in ("alpha", "beta", "gamma", "deadline_ms", "quality_map") if k in msg), None), msg)
        reward = RewardParams((0.0, 1.0), 1.0)
    return QoeConfig(tree, tuple(weights), reward)


def _rl(s: _Section):
    ladder = s.floats("ladder", (8e6, 16e6, 32e6, 48e6))
    if not _ladder_ok(ladder):
        s.err("ladder", f"must be strictly increasing positive bitrates with at least 2 levels, got {ladder}")
    hidden = s.floats("hidden", (64, 64))
    params = RLParams(
        k=s.int("k", 8), hidden=tuple(int(h) for h in hidden), discount=s.float("discount", 0.95),
        actor_lr=s.float("actor_lr", 1e-4), critic_lr=s.float("critic_lr", 1e-3),
        epsilon_start=s.float("epsilon_start", 1.0), epsilon_end=s.float("epsilon_end", 0.05),
        epsilon_anneal=s.float("epsilon_anneal", 0.2), sync_period=s.int("sync_period", 1000),
        batch_size=s.int("batch_size", 32), entropy_coef=s.float("entropy_coef", 0.0),
        optimizer=s.str("optimizer", "adam").lower(), lr_schedule=s.str("lr_schedule", "constant").lower(),
        agents=s.int("agents", 1), steps=s.int("steps", 50_000))
    _check(s, params, lambda msg: msg.split()[0] if msg.split()[0] in RL_KEYS else
           ("hidden" if "hidden" in msg else ("epsilon_start" if "epsilon" in msg else None)))
    return params, tuple(ladder), s.int("seed", 1)


def _run(s: _Section):
    spec = RunSpec(duration_s=s.float("duration_s", 20.0), interval_ms=s.float("interval_ms", 1000.0),
                   output_dir=s.str("output_dir", "out"), vantage=s.str("vantage", "endhost").lower(),
                   episode_intervals=s.int("episode_intervals", 60), eval_seeds=s.int("eval_seeds", 10),
                   initial_level=s.int("initial_level", 0))
    if not spec.duration_s > 0:
        s.err("duration_s", "must be > 0")
    if not spec.interval_ms > 0:
        s.err("interval_ms", "must be > 0")
    elif spec.interval_ms * 1000 != int(spec.interval_ms * 1000):
        s.err("interval_ms", "must be a whole number of microseconds")
    if spec.vantage not in {v.value for v in Vantage}:
        s.err("vantage", f"must be one of {', '.join(v.value for v in Vantage)}")
    if spec.episode_intervals < 1:
        s.err("episode_intervals", "must be >= 1")
    if spec.eval_seeds < 1:
        s.err("eval_seeds", "must be >= 1")
    return spec


def _line_index(text: str) -> dict:
    """(section, key) -> 1-based line number, following configparser's key normalisation."""
    out = {}
    section = None
    for n, line in enumerate(text.splitlines(), 1):
        m = re.match(r"\s*\[([^\]]+)\]", line)
        if m:
            section = m.group(1).strip()
            out[(section, None)] = n
            continue
        m = re.match(r"([^\s#;=:][^=:]*?)\s*[=:]", line)
        if m and section is not None and not line[:1].isspace():
            out.setdefault((section, m.group(1).strip().lower()), n)
    return out


def parse_config_text(text: str, path: str = "<config>") -> ExperimentConfig:
    errors: list[str] = []
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"), strict=True,
                                   default_section="__defaults__")
    try:
        cp.read_string(text, source=path)
    except configparser.MissingSectionHeaderError as e:
        raise ConfigError([f"{path}: line {e.lineno}: key outside any [section]"]) from None
    except configparser.DuplicateSectionError as e:
        raise ConfigError([f"{path}: line {e.lineno}: section [{e.section}] appears twice"]) from None
    except configparser.DuplicateOptionError as e:
        raise ConfigError([f"{path}: line {e.lineno}: [{e.section}] {e.option} appears twice"]) from None
    except configparser.ParsingError as e:
        raise ConfigError([f"{path}: line {n}: cannot parse {line.strip()!r}" for n, line in e.errors]) from None
    lines = _line_index(text)
    for name in cp.sections():
        if name not in SECTIONS:
            ln = lines.get((name, None))
            errors.append(f"[{name}]" + (f" (line {ln})" if ln else "") +
                          f": unknown section (allowed: {', '.join(SECTIONS)})")

    def section(name, allowed, prefixes=()):
        items = dict(cp.items(name)) if cp.has_section(name) else {}
        return _Section(name, items, lines, errors, allowed, prefixes)

    media = _media(section("media", MEDIA_KEYS))
    stream = _traffic(section("traffic", TRAFFIC_KEYS), media)
    network = _network(section("network", NETWORK_KEYS))
    rl_sec = section("rl", RL_KEYS)
    rl, ladder, seed = _rl(rl_sec)
    fps = media.refresh_rate_fps if media.refresh_rate_fps and media.refresh_rate_fps > 0 else 60.0
    qoe = _qoe(section("qoe", QOE_KEYS, ("tree.", "leaf.")), ladder, fps)
    run = _run(section("run", RUN_KEYS))
    if not 0 <= run.initial_level < max(len(ladder), 1):
        errors.append(f"[run] initial_level: must index the ladder (0..{len(ladder) - 1})")
    defaults = {"throughput_bound": max(_peak(network), 1.0), "latency_bound_ms": 4 * qoe.reward.deadline_ms,
                "jitter_bound_ms": qoe.reward.deadline_ms}
    vals = {}
    for key, default in defaults.items():
        vals[key] = rl_sec.float(key, default)
        if not vals[key] > 0:
            rl_sec.err(key, "must be > 0")
            vals[key] = default
    bounds = StateBounds(vals["throughput_bound"], vals["latency_bound_ms"], vals["jitter_bound_ms"])
    if errors:
        raise ConfigError([f"{path}: {e}" for e in errors])
    return ExperimentConfig(media, stream, network, qoe, rl, ladder, seed, bounds, run, path)


def _peak(network: NetworkSpec) -> float:
    try:
        return network.peak_capacity()
    except (ValueError, TypeError):
        return 1.0


def parse_config(path) -> ExperimentConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError([f"{path}: no such config file"])
    return parse_config_text(p.read_text(), str(path))


__all__ = ["ConfigError", "ExperimentConfig", "QoeConfig", "RunSpec", "parse_config", "parse_config_text",
           "INDEXES"]
