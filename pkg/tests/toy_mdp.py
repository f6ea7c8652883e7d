"""Three-state, two-action MDP whose optimal policy needs lookahead, plus value iteration."""

import numpy as np

# (next_state, reward) for every (state, action)
TRANSITIONS = {
    (0, 0): (1, 0.0), (0, 1): (0, 0.2),
    (1, 0): (2, 0.0), (1, 1): (0, 0.2),
    (2, 0): (2, 0.0), (2, 1): (0, 1.0),
}
N_STATES, N_ACTIONS = 3, 2
DISCOUNT = 0.9


def value_iteration(discount=DISCOUNT, tol=1e-12):
    v = np.zeros(N_STATES)
    while True:
        q = np.array([[r + discount * v[s2] for s2, r in (TRANSITIONS[s, a] for a in range(N_ACTIONS))]
                      for s in range(N_STATES)])
        new = q.max(axis=1)
        if np.abs(new - v).max() < tol:
            return new, tuple(int(a) for a in q.argmax(axis=1))
        v = new


class ToyMdp:
    state_dim = N_STATES
    n_actions = N_ACTIONS

    def __init__(self, start=0):
        self.start = start
        self.s = start

    def _obs(self):
        x = np.zeros(N_STATES)
        x[self.s] = 1.0
        return x

    def reset(self):
        self.s = self.start
        return self._obs()

    def step(self, action):
        self.s, r = TRANSITIONS[self.s, int(action)]
        return self._obs(), r, False

    @staticmethod
    def observations():
        return np.eye(N_STATES)
