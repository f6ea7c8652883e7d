"""Scenario runs, training orchestration and baseline comparison, with CSV output."""

from __future__ import annotations

import csv
import dataclasses
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from xrsim.config import ExperimentConfig
from xrsim.env import XrStreamingEnv
from xrsim.media import DomainError
from xrsim.netsim import Vantage, write_event_csv, write_measurement_csv
from xrsim.qoe import KpiSample, kpi_to_indexes, qoe_score
from xrsim.rl import (
    LOG_COLUMNS,
    Checkpoint,
    PolicyNet,
    greedy_action,
    load_checkpoint,
    save_checkpoint,
    train_agents,
    worker_count,
)
from xrsim.traffic import US_PER_MS

EVAL_SEED_OFFSET = 1_000_000


# ---------------------------------------------------------------- policies


@dataclass(frozen=True)
class FixedBitrate:
    level: int

    @property
    def name(self):
        return f"fixed:{self.level}"

    def choose(self, env: XrStreamingEnv, state) -> int:
        return self.level


@dataclass(frozen=True)
class Oracle:
    """Highest level whose bitrate fits the available capacity measured over the previous interval."""

    name = "oracle"

    def choose(self, env: XrStreamingEnv, state) -> int:
        cap = env.previous_available_capacity()
        fit = [i for i, b in enumerate(env.ladder) if b <= cap]
        return fit[-1] if fit else 0


@dataclass
class Trained:
    checkpoint: Checkpoint
    label: str = "trained"

    def __post_init__(self):
        self.net = self.checkpoint.net()

    @property
    def name(self):
        return self.label

    def choose(self, env: XrStreamingEnv, state) -> int:
        return greedy_action(self.net, state)


def check_compatible(ck: Checkpoint, config: ExperimentConfig) -> None:
    bad = []
    if tuple(ck.ladder) != tuple(config.ladder):
        bad.append(f"ladder (checkpoint {list(ck.ladder)}, config {list(config.ladder)})")
    if ck.k != config.rl.k:
        bad.append(f"k (checkpoint {ck.k}, config {config.rl.k})")
    sizes = (4 * config.rl.k + 1, *config.rl.hidden, len(config.ladder))
    if tuple(ck.sizes) != sizes:
        bad.append(f"layer sizes (checkpoint {list(ck.sizes)}, config {list(sizes)})")
    if bad:
        raise DomainError("checkpoint does not match the config: " + "; ".join(bad))


def parse_policy(text: str, config: ExperimentConfig):
    """``fixed:N``, ``oracle`` or ``trained:PATH``."""
    kind, _, arg = text.partition(":")
    kind = kind.strip().lower()
    if kind == "oracle" and not arg:
        return Oracle()
    if kind == "fixed":
        try:
            level = int(arg)
        except ValueError:
            raise DomainError(f"fixed policy needs a ladder index, got {arg!r}") from None
        if not 0 <= level < len(config.ladder):
            raise DomainError(f"fixed level {level} outside the ladder (0..{len(config.ladder) - 1})")
        return FixedBitrate(level)
    if kind == "trained" and arg:
        ck = load_checkpoint(arg)
        check_compatible(ck, config)
        return Trained(ck)
    raise DomainError(f"unknown policy {text!r}; use fixed:N, oracle or trained:PATH")


# ---------------------------------------------------------------- reports

INTERVAL_COLUMNS = ("t_ms", "level", "bitrate_bps", "available_bps", "throughput_bps", "latency_ms", "jitter_ms",
                    "loss_rate", "delivered_pkts", "dropped_pkts", "frames", "decodable_frames", "mqi", "iqi",
                    "pqi", "qoe", "reward")
FRAME_COLUMNS = ("frame_id", "eye", "frame_type", "created_ms", "latency_ms", "decodable")
QOE_COLUMNS = ("t_ms", "mqi", "iqi", "pqi", "qoe", "reward")
SUMMARY_KEYS = ("mean_qoe", "mean_reward", "decodable_ratio", "loss_rate", "p95_latency_ms")


@dataclass
class Aggregates:
    mean_qoe: float
    mean_reward: float
    decodable_ratio: float
    loss_rate: float
    p95_latency_ms: float | None

    def as_dict(self):
        return {k: getattr(self, k) for k in SUMMARY_KEYS}


@dataclass
class RunReport:
    policy: str
    seed: int
    config_hash: str
    intervals: list  # dicts keyed by INTERVAL_COLUMNS
    frames: list  # dicts keyed by FRAME_COLUMNS
    aggregates: Aggregates
    diagnostics: list = field(default_factory=list)


def percentile_nearest_rank(values, pct: float):
    if not values:
        return None
    xs = sorted(values)
    rank = max(1, math.ceil(pct / 100 * len(xs)))
    return xs[rank - 1]


def aggregate(intervals: list, frames: list) -> Aggregates:
    """Run aggregates from interval and frame rows (the same arithmetic is used on re-parsed CSVs)."""
    n = len(intervals)
    mean_qoe = sum(r["qoe"] for r in intervals) / n if n else 0.0
    mean_reward = sum(r["reward"] for r in intervals) / n if n else 0.0
    dec = sum(1 for f in frames if f["decodable"])
    delivered = sum(r["delivered_pkts"] for r in intervals)
    dropped = sum(r["dropped_pkts"] for r in intervals)
    lats = [f["latency_ms"] for f in frames if f["latency_ms"] is not None]
    return Aggregates(mean_qoe, mean_reward, dec / len(frames) if frames else 0.0,
                      dropped / (dropped + delivered) if dropped + delivered else 0.0,
                      percentile_nearest_rank(lats, 95))


def make_env(config: ExperimentConfig, seed: int, *, episode_intervals: int | None = None,
             keep_trace: bool = False) -> XrStreamingEnv:
    return XrStreamingEnv(config.stream, config.network, config.ladder, config.qoe.reward, k=config.rl.k,
                          interval_ms=config.run.interval_ms,
                          episode_intervals=episode_intervals or config.run.episode_intervals,
                          bounds=config.bounds, seed=seed, keep_trace=keep_trace,
                          vantage=Vantage(config.run.vantage))


def run_scenario(config: ExperimentConfig, policy, seed: int | None = None, keep_trace: bool = False):
    """One seeded run of ``policy`` for the configured duration. Returns (RunReport, env)."""
    seed = config.seed if seed is None else seed
    if isinstance(policy, Trained):
        check_compatible(policy.checkpoint, config)
    n = config.intervals
    env = make_env(config, seed, episode_intervals=n, keep_trace=keep_trace)
    state = env.reset()
    env.level = config.run.initial_level
    state = env.state()
    for _ in range(n):
        level = policy.choose(env, state)
        state, _, _ = env.step(level)
    sim = env.sim
    horizon_us = env.t_us
    sim.drain()

    fps = config.stream.fps
    eyes = config.stream.eyes
    status = sim.frame_status(config.stream.pattern)
    frames = []
    per_interval = [[0, 0] for _ in range(n)]
    for rec, ok in status:
        if rec.created_us >= horizon_us:
            continue
        lat = (rec.completed_us - rec.created_us) / US_PER_MS if rec.complete else None
        frames.append({"frame_id": rec.frame_id, "eye": int(rec.eye), "frame_type": rec.frame_type.name,
                       "created_ms": rec.created_us / US_PER_MS, "latency_ms": lat, "decodable": ok})
        slot = per_interval[rec.created_us // env.interval_us]
        slot[0] += 1
        slot[1] += ok

    tree, weights = config.qoe.tree, config.qoe.index_weights
    rows, diagnostics = [], []
    span_s = env.interval_us / 1e6
    for rec, (nframes, ndec) in zip(env.episode.records, per_interval):
        m = rec.measurement
        kpi = KpiSample(
            delivered_resolution_level=rec.level,
            framerate_effective=min(fps, ndec / eyes / span_s),
            end_to_end_latency=rec.latency_ms,
            loss_rate=m.loss_rate,
            stall_ratio=1.0 - ndec / nframes if nframes else 0.0,
        )
        diag = []
        mqi, iqi, pqi = kpi_to_indexes(kpi, tree, diag)
        diagnostics.extend(f"t={rec.t0_us / US_PER_MS:g} ms: {d}" for d in diag)
        rows.append({
            "t_ms": rec.t0_us / US_PER_MS, "level": rec.level, "bitrate_bps": env.ladder[rec.level],
            "available_bps": rec.available_bps, "throughput_bps": m.throughput, "latency_ms": m.latency,
            "jitter_ms": m.jitter, "loss_rate": m.loss_rate, "delivered_pkts": m.packets,
            "dropped_pkts": m.dropped, "frames": nframes, "decodable_frames": ndec,
            "mqi": mqi, "iqi": iqi, "pqi": pqi, "qoe": qoe_score((mqi, iqi, pqi), weights), "reward": rec.reward,
        })
    report = RunReport(policy.name, seed, config.hash(), rows, frames, aggregate(rows, frames), diagnostics)
    return report, env


# ---------------------------------------------------------------- CSV I/O


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_rows(path, columns, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_cell(r[c]) for c in columns])


_INT_COLS = {"level", "delivered_pkts", "dropped_pkts", "frames", "decodable_frames", "frame_id", "eye"}


def read_rows(path) -> list:
    out = []
    with open(path, newline="") as f:
        for r in csv.DictReader(f):
            row = {}
            for k, v in r.items():
                if k == "frame_type":
                    row[k] = v
                elif k == "decodable":
                    row[k] = v == "1"
                elif v == "":
                    row[k] = None
                elif k in _INT_COLS:
                    row[k] = int(v)
                else:
                    row[k] = float(v)
            out.append(row)
    return out


def write_report(report: RunReport, out_dir, env: XrStreamingEnv | None = None, prefix: str = "") -> dict:
    """intervals.csv, frames.csv, qoe.csv, summary.txt (and the event/measurement traces when ``env`` kept them)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {name: out / f"{prefix}{name}" for name in ("intervals.csv", "frames.csv", "qoe.csv", "summary.txt")}
    write_rows(paths["intervals.csv"], INTERVAL_COLUMNS, report.intervals)
    write_rows(paths["frames.csv"], FRAME_COLUMNS, report.frames)
    write_rows(paths["qoe.csv"], QOE_COLUMNS, report.intervals)
    if env is not None and env.keep_trace:
        paths["events.csv"] = out / f"{prefix}events.csv"
        paths["measurements.csv"] = out / f"{prefix}measurements.csv"
        write_event_csv(paths["events.csv"], env.sim.trace)
        write_measurement_csv(paths["measurements.csv"], [r.measurement for r in env.episode.records])
    lines = [f"policy: {report.policy}", f"seed: {report.seed}", f"config_hash: {report.config_hash}",
             f"intervals: {len(report.intervals)}", f"frames: {len(report.frames)}"]
    lines += [f"{k}: {_cell(v)}" for k, v in report.aggregates.as_dict().items()]
    lines.append(f"clamped_kpis: {len(report.diagnostics)}")
    paths["summary.txt"].write_text("\n".join(lines) + "\n")
    return paths


def reaggregate(out_dir, prefix: str = "") -> Aggregates:
    out = Path(out_dir)
    return aggregate(read_rows(out / f"{prefix}intervals.csv"), read_rows(out / f"{prefix}frames.csv"))


# ---------------------------------------------------------------- training


@dataclass
class TrainOutput:
    checkpoint: Path
    log: Path
    steps: int
    net: PolicyNet


def init_net(config: ExperimentConfig) -> PolicyNet:
    sizes = (4 * config.rl.k + 1, *config.rl.hidden, len(config.ladder))
    return PolicyNet(sizes, rng=np.random.default_rng(np.random.SeedSequence([config.seed, 0xC0FFEE])))


def train(config: ExperimentConfig, out_dir, resume=None, steps: int | None = None) -> TrainOutput:
    """Train ``config.rl.agents`` actors for ``steps`` per actor (default ``rl.steps``).

    Writes policy.ckpt and train_log.csv to ``out_dir``. With ``resume``, starts
    from that checkpoint's parameters and step count and appends to its log.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ck_path, log_path = out / "policy.ckpt", out / "train_log.csv"
    total = config.rl.steps if steps is None else steps
    step0 = 0
    previous_rows = []
    if resume is not None:
        ck = load_checkpoint(resume)
        check_compatible(ck, config)
        net = ck.net()
        step0 = ck.steps
        old_log = Path(resume).with_name("train_log.csv")
        if old_log.is_file():
            with open(old_log, newline="") as f:
                previous_rows = [r for r in csv.reader(f)][1:]
            previous_rows = [r for r in previous_rows if int(r[0]) <= step0]
    else:
        net = init_net(config)
    envs = [make_env(config, config.seed + i) for i in range(config.rl.agents)]
    params = dataclasses.replace(config.rl, steps=total)
    if step0 < total:
        # a resumed run draws fresh randomness keyed on where it picks up
        seed = config.seed if step0 == 0 else [config.seed, step0]
        result = train_agents(net, envs, params, seed=seed, steps=total, step0=step0)
        rows, done = result.log, result.steps
    else:
        rows, done = [], step0
    save_checkpoint(ck_path, net, config.rl.k, config.ladder, steps=done)
    with open(log_path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        w.writerows(previous_rows)
        for r in rows:
            w.writerow([r.step, r.agent_id, repr(r.epsilon), repr(r.reward), repr(r.td_error_mean),
                        repr(r.critic_loss)])
    return TrainOutput(ck_path, log_path, done, net)


# ---------------------------------------------------------------- comparison


def eval_seeds(config: ExperimentConfig) -> list:
    return [config.seed + EVAL_SEED_OFFSET + j for j in range(config.run.eval_seeds)]


def _run_summary(args):
    config, policy, seed = args
    report, _ = run_scenario(config, policy, seed)
    return report.aggregates


def run_many(jobs: list) -> list:
    workers = worker_count(len(jobs))
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            return list(pool.map(_run_summary, jobs))
    return [_run_summary(j) for j in jobs]


COMPARE_COLUMNS = ("policy", "runs", "mean_qoe", "std_qoe", "mean_reward", "std_reward", "decodable_ratio",
                   "loss_rate")


def compare_baselines(config: ExperimentConfig, checkpoint=None, seeds=None) -> list:
    """Trained (if given), every FixedBitrate level and Oracle on the same held-out seeds."""
    seeds = eval_seeds(config) if seeds is None else list(seeds)
    policies = []
    if checkpoint is not None:
        ck = checkpoint if isinstance(checkpoint, Checkpoint) else load_checkpoint(checkpoint)
        check_compatible(ck, config)
        policies.append(Trained(ck))
    policies += [FixedBitrate(i) for i in range(len(config.ladder))] + [Oracle()]
    jobs = [(config, p, s) for p in policies for s in seeds]
    results = run_many(jobs)
    table = []
    for i, p in enumerate(policies):
        aggs = results[i * len(seeds):(i + 1) * len(seeds)]
        q = np.array([a.mean_qoe for a in aggs])
        r = np.array([a.mean_reward for a in aggs])
        table.append({"policy": p.name, "runs": len(aggs), "mean_qoe": float(q.mean()), "std_qoe": float(q.std()),
                      "mean_reward": float(r.mean()), "std_reward": float(r.std()),
                      "decodable_ratio": float(np.mean([a.decodable_ratio for a in aggs])),
                      "loss_rate": float(np.mean([a.loss_rate for a in aggs]))})
    return table


def format_table(table: list) -> str:
    head = f"{'policy':<12} {'runs':>4} {'qoe':>15} {'reward':>17} {'decodable':>9} {'loss':>7}"
    lines = [head]
    for r in table:
        lines.append(f"{r['policy']:<12} {r['runs']:>4} {r['mean_qoe']:>7.4f} ±{r['std_qoe']:<6.4f} "
                     f"{r['mean_reward']:>8.4f} ±{r['std_reward']:<7.4f} {r['decodable_ratio']:>9.4f} "
                     f"{r['loss_rate']:>7.4f}")
    return "\n".join(lines)


def thread_cap() -> int | None:
    v = os.environ.get("XRSIM_THREADS")
    return int(v) if v and v.isdigit() else None
