"""Multi-agent advantage actor-critic for discrete bitrate ladders.

The network is a small fully connected model written directly on numpy:
a shared ReLU trunk with a softmax policy head and a scalar value head.
All parameters live in one flat float64 vector so that checkpoints,
policy syncs and finite-difference checks operate on a single array.
"""

from __future__ import annotations

import math
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import NamedTuple, Protocol, Sequence

import numpy as np

from xrsim.media import DomainError


class TrainingError(RuntimeError):
    pass


class Env(Protocol):
    state_dim: int
    n_actions: int

    def reset(self) -> np.ndarray: ...

    def step(self, action: int) -> tuple: ...  # (next_state, reward, terminal)

    # an env may also expose ``truncated``: the episode hit its time limit, so the
    # actor resets without treating the last transition as terminal


class Experience(NamedTuple):
    state: np.ndarray
    action: int
    reward: float
    next_state: np.ndarray
    terminal: bool
    agent_id: int = 0


class PolicyNet:
    """Dense ReLU trunk with policy-logit and value heads.

    ``sizes`` is (input, hidden..., n_actions). Output heads are zero-initialised,
    so a fresh net is uniform over actions and predicts value 0.
    """

    def __init__(self, sizes: Sequence[int], theta: np.ndarray | None = None, rng=None):
        sizes = tuple(int(s) for s in sizes)
        if len(sizes) < 2 or any(s <= 0 for s in sizes):
            raise DomainError(f"layer sizes must be positive, got {sizes}")
        self.sizes = sizes
        self.shapes = []
        for a, b in zip(sizes[:-2], sizes[1:-1]):
            self.shapes += [(a, b), (b,)]
        h = sizes[-2]
        self.shapes += [(h, sizes[-1]), (sizes[-1],), (h, 1), (1,)]
        n = sum(math.prod(s) for s in self.shapes)
        if theta is None:
            theta = np.zeros(n)
            rng = rng if rng is not None else np.random.default_rng(0)
            off = 0
            for shape in self.shapes[:-4]:
                size = math.prod(shape)
                if len(shape) == 2:
                    bound = math.sqrt(6.0 / shape[0])
                    theta[off:off + size] = rng.uniform(-bound, bound, size)
                off += size
        theta = np.ascontiguousarray(theta, dtype=np.float64)
        if theta.shape != (n,):
            raise DomainError(f"parameter vector has {theta.size} entries, layer sizes need {n}")
        self.theta = theta
        self._bind()

    def _bind(self):
        self.params = []
        off = 0
        for shape in self.shapes:
            size = math.prod(shape)
            self.params.append(self.theta[off:off + size].reshape(shape))
            off += size

    @property
    def input_dim(self):
        return self.sizes[0]

    @property
    def n_actions(self):
        return self.sizes[-1]

    def copy(self) -> "PolicyNet":
        return PolicyNet(self.sizes, self.theta.copy())

    def load(self, theta: np.ndarray):
        self.theta[:] = theta

    def forward(self, x: np.ndarray):
        """Batched forward pass. Returns (logits, values, cache)."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            x = x[None, :]
        if x.shape[1] != self.input_dim:
            raise DomainError(f"state has dimension {x.shape[1]}, net expects {self.input_dim}")
        acts = [x]
        p = self.params
        h = x
        for i in range(0, len(p) - 4, 2):
            h = np.maximum(h @ p[i] + p[i + 1], 0.0)
            acts.append(h)
        logits = h @ p[-4] + p[-3]
        values = (h @ p[-2] + p[-1])[:, 0]
        return logits, values, acts

    def backward(self, acts, d_logits: np.ndarray, d_values: np.ndarray) -> np.ndarray:
        """Gradient of a scalar loss w.r.t. theta given its gradients w.r.t. the head outputs."""
        p = self.params
        grads = [None] * len(p)
        h = acts[-1]
        grads[-4] = h.T @ d_logits
        grads[-3] = d_logits.sum(axis=0)
        dv = d_values[:, None]
        grads[-2] = h.T @ dv
        grads[-1] = dv.sum(axis=0)
        dh = d_logits @ p[-4].T + dv @ p[-2].T
        for i in range(len(p) - 6, -1, -2):
            dz = dh * (acts[i // 2 + 1] > 0)
            grads[i] = acts[i // 2].T @ dz
            grads[i + 1] = dz.sum(axis=0)
            if i:
                dh = dz @ p[i].T
        return np.concatenate([g.ravel() for g in grads])


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def forward_policy(net: PolicyNet, state: np.ndarray) -> tuple:
    """(action probabilities, value) for a single state."""
    logits, values, _ = net.forward(state)
    return softmax(logits)[0], float(values[0])


def select_action(probs: np.ndarray, epsilon: float, rng: np.random.Generator) -> int:
    """Greedy on ``probs`` (lowest index on ties) with probability 1 - epsilon, else uniform."""
    if not 0.0 <= epsilon <= 1.0:
        raise DomainError(f"epsilon must lie in [0, 1], got {epsilon}")
    if epsilon > 0.0 and rng.random() < epsilon:
        return int(rng.integers(len(probs)))
    return int(np.argmax(probs))


def td_error(exp: Experience, net: PolicyNet, discount: float) -> float:
    if not 0.0 <= discount < 1.0:
        raise DomainError(f"discount must lie in [0, 1), got {discount}")
    _, v = forward_policy(net, exp.state)
    _, v_next = forward_policy(net, exp.next_state)
    return exp.reward + discount * v_next * (1.0 - float(exp.terminal)) - v


def actor_critic_losses(net: PolicyNet, states, actions, advantages, targets, entropy_coef: float = 0.0):
    """Actor and critic losses with their gradients w.r.t. theta.

    ``advantages`` and ``targets`` are treated as constants (no gradient flows
    through them). Critic loss is mean (V(s) - target)^2, which equals mean
    delta^2 for TD targets.
    """
    logits, values, acts = net.forward(states)
    n = len(values)
    actions = np.asarray(actions)
    adv = np.asarray(advantages, dtype=np.float64)
    logp = log_softmax(logits)
    probs = np.exp(logp)
    rows = np.arange(n)
    entropy = -(probs * logp).sum(axis=1)
    actor_loss = -np.mean(logp[rows, actions] * adv) - entropy_coef * np.mean(entropy)
    diff = values - np.asarray(targets, dtype=np.float64)
    critic_loss = np.mean(diff * diff)

    onehot = np.zeros_like(probs)
    onehot[rows, actions] = 1.0
    d_logits = -(onehot - probs) * adv[:, None] / n
    if entropy_coef:
        # dH/dz_j = -p_j (log p_j + H)
        d_logits += entropy_coef * probs * (logp + entropy[:, None]) / n
    zeros_v = np.zeros(n)
    g_actor = net.backward(acts, d_logits, zeros_v)
    g_critic = net.backward(acts, np.zeros_like(d_logits), 2.0 * diff / n)
    return float(actor_loss), float(critic_loss), g_actor, g_critic


class Adam:
    def __init__(self, size: int, lr: float, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, grad: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad * grad
        mh = self.m / (1 - self.b1 ** self.t)
        vh = self.v / (1 - self.b2 ** self.t)
        return self.lr * mh / (np.sqrt(vh) + self.eps)


class Sgd:
    def __init__(self, size: int, lr: float):
        self.lr = lr

    def step(self, grad):
        return self.lr * grad


OPTIMIZERS = {"adam": Adam, "sgd": Sgd}
LR_SCHEDULES = ("constant", "linear")


@dataclass
class UpdateDiagnostics:
    actor_loss: float
    critic_loss: float
    td_errors: np.ndarray
    skipped: bool = False


def make_optimizers(net: PolicyNet, learning_rates, kind: str = "adam"):
    if kind not in OPTIMIZERS:
        raise DomainError(f"unknown optimizer {kind!r}; expected one of {sorted(OPTIMIZERS)}")
    lr_a, lr_c = learning_rates
    return OPTIMIZERS[kind](net.theta.size, lr_a), OPTIMIZERS[kind](net.theta.size, lr_c)


def update_actor_critic(net: PolicyNet, batch: Sequence[Experience], learning_rates=(1e-4, 1e-3),
                        discount: float = 0.95, entropy_coef: float = 0.0, optimizers=None) -> UpdateDiagnostics:
    """One gradient step on the actor loss and one on the critic loss.

    ``optimizers`` is an (actor, critic) pair; plain SGD with ``learning_rates``
    is used when it is omitted. A non-finite loss or gradient leaves theta
    untouched and sets ``skipped``.
    """
    if not batch:
        raise DomainError("empty batch")
    if not 0.0 <= discount < 1.0:
        raise DomainError(f"discount must lie in [0, 1), got {discount}")
    states = np.array([e.state for e in batch], dtype=np.float64)
    nexts = np.array([e.next_state for e in batch], dtype=np.float64)
    actions = np.array([e.action for e in batch])
    if actions.min() < 0 or actions.max() >= net.n_actions:
        raise DomainError("action index outside the ladder")
    rewards = np.array([e.reward for e in batch], dtype=np.float64)
    alive = 1.0 - np.array([e.terminal for e in batch], dtype=np.float64)
    # overflow is caught by the finiteness check below, not reported as a warning
    with np.errstate(over="ignore", invalid="ignore"):
        _, v_next, _ = net.forward(nexts)
        _, v_now, _ = net.forward(states)
        targets = rewards + discount * v_next * alive
        deltas = targets - v_now
        a_loss, c_loss, g_a, g_c = actor_critic_losses(net, states, actions, deltas, targets, entropy_coef)
    diag = UpdateDiagnostics(a_loss, c_loss, deltas)
    if not (math.isfinite(a_loss) and math.isfinite(c_loss) and np.isfinite(g_a).all() and np.isfinite(g_c).all()):
        diag.skipped = True
        return diag
    if optimizers is None:
        optimizers = (Sgd(0, learning_rates[0]), Sgd(0, learning_rates[1]))
    opt_a, opt_c = optimizers
    net.theta -= opt_a.step(g_a) + opt_c.step(g_c)
    return diag


# ---------------------------------------------------------------- multi-agent training


@dataclass(frozen=True)
class RLParams:
    k: int = 8
    hidden: tuple = (64, 64)
    discount: float = 0.95
    actor_lr: float = 1e-4
    critic_lr: float = 1e-3
    epsilon_start: float = 1.0
    epsilon_end: float = 0.05
    epsilon_anneal: float = 0.2  # fraction of the run
    sync_period: int = 1000
    batch_size: int = 32
    entropy_coef: float = 0.0
    optimizer: str = "adam"
    lr_schedule: str = "constant"  # or "linear": decay to 0 at ``steps``
    agents: int = 1
    steps: int = 50_000

    def errors(self) -> list[str]:
        errs = []
        if self.k < 1:
            errs.append("k must be >= 1")
        if not self.hidden or any(h < 1 for h in self.hidden):
            errs.append("hidden sizes must be positive")
        if not 0.0 <= self.discount < 1.0:
            errs.append("discount must lie in [0, 1)")
        if self.actor_lr < 0 or self.critic_lr < 0:
            errs.append("learning rates must be >= 0")
        for name in ("epsilon_start", "epsilon_end", "epsilon_anneal"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                errs.append(f"{name} must lie in [0, 1]")
        if self.sync_period < 1:
            errs.append("sync_period must be > 0")
        if self.batch_size < 1:
            errs.append("batch_size must be > 0")
        if self.entropy_coef < 0:
            errs.append("entropy_coef must be >= 0")
        if self.optimizer not in OPTIMIZERS:
            errs.append(f"optimizer must be one of {sorted(OPTIMIZERS)}")
        if self.lr_schedule not in LR_SCHEDULES:
            errs.append(f"lr_schedule must be one of {list(LR_SCHEDULES)}")
        if self.agents < 1:
            errs.append("agents must be >= 1")
        if self.steps < 0:
            errs.append("steps must be >= 0")
        return errs

    def epsilon(self, step: int) -> float:
        span = self.epsilon_anneal * self.steps
        if span <= 0 or step >= span:
            return self.epsilon_end
        return self.epsilon_start + (self.epsilon_end - self.epsilon_start) * step / span

    def lr_scale(self, step: int) -> float:
        if self.lr_schedule == "constant" or self.steps <= 0:
            return 1.0
        return max(0.0, 1.0 - step / self.steps)


class Actor:
    """Runs one environment with a private policy snapshot."""

    def __init__(self, agent_id: int, env: Env, net: PolicyNet, rng: np.random.Generator):
        self.agent_id = agent_id
        self.env = env
        self.net = net
        self.rng = rng
        self.state = env.reset()

    def collect(self, n: int, params: RLParams, step0: int) -> tuple[list, float]:
        out = []
        eps = params.epsilon(step0)
        for i in range(n):
            eps = params.epsilon(step0 + i)
            probs, _ = forward_policy(self.net, self.state)
            a = select_action(probs, eps, self.rng)
            nxt, r, term = self.env.step(a)
            out.append(Experience(self.state, a, float(r), nxt, bool(term), self.agent_id))
            self.state = self.env.reset() if term or getattr(self.env, "truncated", False) else nxt
        return out, eps


@dataclass
class LogRow:
    step: int
    agent_id: int
    epsilon: float
    reward: float
    td_error_mean: float
    critic_loss: float


LOG_COLUMNS = ("step", "agent_id", "epsilon", "reward", "td_error_mean", "critic_loss")


class Critic:
    """Central learner: applies minibatch updates to the shared parameters, strictly in order."""

    def __init__(self, net: PolicyNet, params: RLParams, rng: np.random.Generator):
        self.net = net
        self.params = params
        self.rng = rng
        self.optimizers = make_optimizers(net, (params.actor_lr, params.critic_lr), params.optimizer)
        self.skipped = 0

    def learn(self, experience: list[Experience], step: int = 0) -> np.ndarray:
        """Update on one period of experience gathered from ``step`` on; returns each item's TD error."""
        p = self.params
        scale = p.lr_scale(step)
        self.optimizers[0].lr = p.actor_lr * scale
        self.optimizers[1].lr = p.critic_lr * scale
        deltas = np.zeros(len(experience))
        order = self.rng.permutation(len(experience))
        for s in range(0, len(order), p.batch_size):
            idx = order[s:s + p.batch_size]
            diag = update_actor_critic(self.net, [experience[i] for i in idx], None, p.discount,
                                       p.entropy_coef, self.optimizers)
            if diag.skipped:
                self.skipped += 1
                raise TrainingError(f"non-finite loss after {self.skipped} updates "
                                    f"(actor {diag.actor_loss!r}, critic {diag.critic_loss!r})")
            deltas[idx] = diag.td_errors
        return deltas


def worker_count(n_agents: int) -> int:
    cap = os.environ.get("XRSIM_THREADS")
    try:
        limit = int(cap) if cap else os.cpu_count() or 1
    except ValueError:
        raise DomainError(f"XRSIM_THREADS must be an integer, got {cap!r}") from None
    return max(1, min(n_agents, limit))


def share_and_sync(actors: Sequence[Actor], critic: Critic, period: int, step0: int = 0,
                   pool: ThreadPoolExecutor | None = None) -> list[LogRow]:
    """One sync period: actors gather ``period`` steps, the critic learns, actors take its theta.

    Actors run concurrently; experience is merged in agent order so the result
    does not depend on scheduling.
    """
    if period <= 0:
        raise DomainError(f"sync period must be > 0, got {period}")
    params = critic.params
    if pool is not None and len(actors) > 1:
        results = list(pool.map(lambda a: a.collect(period, params, step0), actors))
    else:
        results = [a.collect(period, params, step0) for a in actors]
    merged = [e for exp, _ in results for e in exp]
    deltas = critic.learn(merged, step0)
    rows = []
    for i, (actor, (exp, eps)) in enumerate(zip(actors, results)):
        d = deltas[i * period:(i + 1) * period]
        rows.append(LogRow(step0 + period, actor.agent_id, eps, float(np.mean([e.reward for e in exp])),
                           float(d.mean()), float((d * d).mean())))
        actor.net.load(critic.net.theta)
    return rows


@dataclass
class TrainResult:
    net: PolicyNet
    log: list = field(default_factory=list)
    steps: int = 0


def train_agents(net: PolicyNet, envs: Sequence[Env], params: RLParams, seed: int, steps: int | None = None,
                 step0: int = 0, on_round=None) -> TrainResult:
    """Train ``net`` in place with one actor per environment for ``steps`` steps per actor."""
    errs = params.errors()
    if errs:
        raise DomainError("; ".join(errs))
    total = params.steps if steps is None else steps
    ss = np.random.SeedSequence(seed)
    children = ss.spawn(len(envs) + 1)
    critic = Critic(net, params, np.random.default_rng(children[0]))
    actors = [Actor(i, env, net.copy(), np.random.default_rng(c)) for i, (env, c) in enumerate(zip(envs, children[1:]))]
    result = TrainResult(net, steps=step0)
    done = step0
    with ThreadPoolExecutor(worker_count(len(actors))) as pool:
        while done < total:
            n = min(params.sync_period, total - done)
            rows = share_and_sync(actors, critic, n, done, pool)
            done += n
            result.log.extend(rows)
            result.steps = done
            if on_round is not None:
                on_round(result)
    return result


def greedy_action(net: PolicyNet, state) -> int:
    probs, _ = forward_policy(net, state)
    return int(np.argmax(probs))


# ---------------------------------------------------------------- checkpoints

MAGIC = b"XRPN"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    sizes: tuple
    k: int
    ladder: tuple
    theta: np.ndarray
    steps: int = 0

    def net(self) -> PolicyNet:
        return PolicyNet(self.sizes, self.theta.copy())


def save_checkpoint(path, net: PolicyNet, k: int, ladder: Sequence[float], steps: int = 0):
    """Header (magic, version, steps, layer sizes, k, ladder), then little-endian float64 theta."""
    head = [MAGIC, struct.pack("<HQI", FORMAT_VERSION, steps, len(net.sizes)),
            struct.pack(f"<{len(net.sizes)}I", *net.sizes), struct.pack("<II", k, len(ladder)),
            struct.pack(f"<{len(ladder)}d", *ladder)]
    with open(path, "wb") as f:
        f.write(b"".join(head))
        f.write(net.theta.astype("<f8").tobytes())


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != MAGIC:
        raise DomainError(f"{path}: not a policy checkpoint")
    off = 4
    version, steps, n = struct.unpack_from("<HQI", data, off)
    off += struct.calcsize("<HQI")
    if version != FORMAT_VERSION:
        raise DomainError(f"{path}: unsupported checkpoint version {version}")
    sizes = struct.unpack_from(f"<{n}I", data, off)
    off += 4 * n
    k, m = struct.unpack_from("<II", data, off)
    off += 8
    ladder = struct.unpack_from(f"<{m}d", data, off)
    off += 8 * m
    theta = np.frombuffer(data, dtype="<f8", offset=off).astype(np.float64)
    net = PolicyNet(sizes, theta)  # validates the parameter count
    return Checkpoint(tuple(sizes), k, tuple(ladder), net.theta, steps)
