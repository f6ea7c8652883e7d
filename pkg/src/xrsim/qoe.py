"""KPI -> KQI -> {MQI, IQI, PQI} -> QoE, and the per-step reward used by the ABR agent."""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Sequence

from xrsim.media import DomainError

INDEXES = ("mqi", "iqi", "pqi")
WEIGHT_TOL = 1e-9


@dataclass(frozen=True)
class KpiSample:
    delivered_resolution_level: float
    framerate_effective: float
    end_to_end_latency: float  # ms
    loss_rate: float
    stall_ratio: float


KPI_FIELDS = tuple(f.name for f in fields(KpiSample))


@dataclass(frozen=True)
class Leaf:
    """A KPI normalised linearly so that ``worst`` maps to 0 and ``best`` to 1."""

    kpi: str
    worst: float
    best: float

    def value(self, kpi: KpiSample) -> tuple[float, bool]:
        x = getattr(kpi, self.kpi)
        v = (x - self.worst) / (self.best - self.worst)
        if v < 0.0:
            return 0.0, True
        if v > 1.0:
            return 1.0, True
        return v, False


@dataclass(frozen=True)
class Node:
    children: tuple  # ((name, weight), ...)


class FactorTree:
    """Weighted factor tree rooted at the three quality indexes.

    ``nodes`` maps node names to :class:`Node`; child names resolve to nodes
    first, then to ``leaves``. Roots are the nodes named mqi, iqi and pqi.
    """

    def __init__(self, nodes: dict, leaves: dict):
        self.nodes = dict(nodes)
        self.leaves = dict(leaves)
        errs = self.errors()
        if errs:
            raise DomainError("; ".join(errs))

    def errors(self) -> list[str]:
        errs = []
        for root in INDEXES:
            if root not in self.nodes:
                errs.append(f"factor tree has no {root} node")
        for name, node in self.nodes.items():
            if not node.children:
                errs.append(f"node {name} has no children")
                continue
            ws = [w for _, w in node.children]
            if any(w < 0 for w in ws):
                errs.append(f"node {name} has a negative weight")
            if abs(sum(ws) - 1.0) > WEIGHT_TOL:
                errs.append(f"weights of node {name} sum to {sum(ws)!r}, not 1")
            for child, _ in node.children:
                if child not in self.nodes and child not in self.leaves:
                    errs.append(f"node {name} refers to unknown factor {child!r}")
        for name, leaf in self.leaves.items():
            if leaf.kpi not in KPI_FIELDS:
                errs.append(f"leaf {name} maps to unknown KPI {leaf.kpi!r}")
            if leaf.worst == leaf.best:
                errs.append(f"leaf {name} has equal worst and best bounds")
        if not errs:
            errs.extend(self._cycle_errors())
        return errs

    def _cycle_errors(self):
        state = {}

        def visit(n):
            if state.get(n) == 1:
                return True
            if state.get(n) == 2 or n not in self.nodes:
                return False
            state[n] = 1
            if any(visit(c) for c, _ in self.nodes[n].children):
                return True
            state[n] = 2
            return False

        return [f"factor tree has a cycle through {n}" for n in self.nodes if visit(n)][:1]

    def evaluate(self, name: str, kpi: KpiSample, diagnostics: list | None = None) -> float:
        if name in self.nodes:
            return sum(w * self.evaluate(c, kpi, diagnostics) for c, w in self.nodes[name].children)
        v, clamped = self.leaves[name].value(kpi)
        if clamped and diagnostics is not None:
            diagnostics.append(f"{name}: {self.leaves[name].kpi}={getattr(kpi, self.leaves[name].kpi)!r} clamped")
        return v

    def rescaled(self, node: str, factor: float) -> "FactorTree":
        """Copy with every weight at ``node`` multiplied by ``factor`` (not renormalised)."""
        nodes = dict(self.nodes)
        nodes[node] = Node(tuple((c, w * factor) for c, w in self.nodes[node].children))
        out = object.__new__(FactorTree)
        out.nodes, out.leaves = nodes, dict(self.leaves)
        return out

    def normalized(self) -> "FactorTree":
        nodes = {}
        for name, node in self.nodes.items():
            total = sum(w for _, w in node.children)
            nodes[name] = Node(tuple((c, w / total) for c, w in node.children))
        return FactorTree(nodes, self.leaves)


def default_tree(levels: int, fps: float, latency_worst_ms: float = 100.0, loss_worst: float = 0.1) -> FactorTree:
    """MQI from resolution and frame rate, IQI from latency and stalls, PQI from loss and latency."""
    leaves = {
        "resolution": Leaf("delivered_resolution_level", 0.0, float(max(levels - 1, 1))),
        "framerate": Leaf("framerate_effective", 0.0, float(fps)),
        "latency": Leaf("end_to_end_latency", latency_worst_ms, 0.0),
        "stall": Leaf("stall_ratio", 1.0, 0.0),
        "loss": Leaf("loss_rate", loss_worst, 0.0),
    }
    nodes = {
        "mqi": Node((("resolution", 0.6), ("framerate", 0.4))),
        "iqi": Node((("latency", 0.5), ("stall", 0.5))),
        "pqi": Node((("loss", 0.7), ("latency", 0.3))),
    }
    return FactorTree(nodes, leaves)


def kpi_to_indexes(kpi: KpiSample, tree: FactorTree, diagnostics: list | None = None) -> tuple:
    """(mqi, iqi, pqi), each in [0, 1]. Out-of-bounds KPIs are clamped and noted in ``diagnostics``."""
    return tuple(tree.evaluate(root, kpi, diagnostics) for root in INDEXES)


def check_weights(weights: Sequence[float], what: str = "index weights") -> tuple:
    ws = tuple(float(w) for w in weights)
    if len(ws) != 3 or any(w < 0 for w in ws) or abs(sum(ws) - 1.0) > WEIGHT_TOL:
        raise DomainError(f"{what} must be three non-negative numbers summing to 1, got {ws}")
    return ws


def qoe_score(indexes: Sequence[float], weights: Sequence[float]) -> float:
    ws = check_weights(weights)
    return sum(w * x for w, x in zip(ws, indexes))


@dataclass(frozen=True)
class RewardParams:
    quality_map: tuple  # q(level), non-decreasing, in [0, 1]
    deadline_ms: float
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "quality_map", tuple(float(q) for q in self.quality_map))
        errs = self.errors()
        if errs:
            raise DomainError("; ".join(errs))

    def errors(self) -> list[str]:
        errs = []
        for name in ("alpha", "beta", "gamma"):
            if getattr(self, name) < 0:
                errs.append(f"{name} must be >= 0")
        q = self.quality_map
        if not q:
            errs.append("quality_map is empty")
        if any(b < a for a, b in zip(q, q[1:])):
            errs.append("quality_map must be non-decreasing")
        if any(not 0.0 <= x <= 1.0 for x in q):
            errs.append("quality_map values must lie in [0, 1]")
        if not self.deadline_ms > 0:
            errs.append("deadline_ms must be > 0")
        return errs


def linear_quality(ladder: Sequence[float]) -> tuple:
    """q(level) = bitrate / top bitrate."""
    top = max(ladder)
    return tuple(b / top for b in ladder)


def step_reward(level: int, prev_level: int, latency_ms: float, params: RewardParams) -> float:
    """Quality minus switching cost minus the deadline overshoot, relative to the deadline."""
    q = params.quality_map
    if not (0 <= level < len(q) and 0 <= prev_level < len(q)):
        raise DomainError(f"level out of ladder range: {level}, {prev_level}")
    overshoot = max(0.0, latency_ms - params.deadline_ms) / params.deadline_ms
    return params.alpha * q[level] - params.beta * abs(q[level] - q[prev_level]) - params.gamma * overshoot


@dataclass(frozen=True)
class QoeSample:
    mqi: float
    iqi: float
    pqi: float
    qoe: float
    reward: float

    def __post_init__(self):
        for name in INDEXES + ("qoe",):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0) or math.isnan(v):
                raise DomainError(f"{name} must lie in [0, 1], got {v}")


def best_level(prev_level: int, params: RewardParams) -> int:
    """Reward-maximizing level given the previous one (latency only shifts the reward).

    Above q(prev) the reward slope is alpha - beta, below it alpha + beta >= 0, so
    the optimum is the top level when alpha > beta and the previous level when
    alpha < beta. Ties resolve to the lowest index.
    """
    q = params.quality_map
    if params.alpha > params.beta:
        return q.index(q[-1])
    if params.alpha == params.beta == 0:
        return 0
    return q.index(q[prev_level])
