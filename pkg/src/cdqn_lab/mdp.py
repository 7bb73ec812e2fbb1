"""Deterministic tabular MDPs, the gridworld environments and a value-iteration oracle.

State-action pairs are stored flat. Pairs are ordered by state, so the legal
actions of state ``s`` occupy the contiguous pair range ``offsets[s]:offsets[s+1]``.
This layout is shared by the tabular learners and the compiled kernels.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

# cliff-walking action ids
UP, DOWN, LEFT, RIGHT = 0, 1, 2, 3
_MOVES = {UP: (0, 1), DOWN: (0, -1), LEFT: (-1, 0), RIGHT: (1, 0)}

# one-way cliff action ids
ADVANCE, JUMP = 0, 1


class ConvergenceError(RuntimeError):
    """An iterative solver hit its iteration cap."""


def _readonly(a):
    a = np.array(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class MdpSpec:
    """Deterministic MDP over integer states.

    Attributes:
        n_states: number of states.
        legal: per-state tuple of legal action ids (empty for terminal states).
        next_state: flat array over pairs giving s'.
        rewards: flat array over pairs giving r(s, a).
        terminal: boolean per state.
        start_state: initial state id.
        unreachable: states that cannot be reached from ``start_state``.
            Computed when omitted, checked when given.
    """

    n_states: int
    legal: tuple
    next_state: np.ndarray
    rewards: np.ndarray
    terminal: np.ndarray
    start_state: int = 0
    unreachable: frozenset | None = None
    name: str = "mdp"
    offsets: np.ndarray = field(init=False, repr=False)
    pair_state: np.ndarray = field(init=False, repr=False)
    pair_action: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        n = int(self.n_states)
        if n < 1:
            raise ValueError(f"n_states must be >= 1, got {n}")
        legal = tuple(tuple(int(a) for a in acts) for acts in self.legal)
        if len(legal) != n:
            raise ValueError(f"legal has {len(legal)} entries for {n} states")
        term = np.asarray(self.terminal, dtype=bool)
        if term.shape != (n,):
            raise ValueError("terminal must have one flag per state")
        counts = [len(a) for a in legal]
        for s, acts in enumerate(legal):
            if term[s] and acts:
                raise ValueError(f"terminal state {s} has legal actions")
            if not term[s] and not acts:
                raise ValueError(f"non-terminal state {s} has no legal action")
            if len(set(acts)) != len(acts):
                raise ValueError(f"duplicate action ids at state {s}")
        offsets = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
        k = int(offsets[-1])
        nxt = np.asarray(self.next_state, dtype=np.int64)
        rew = np.asarray(self.rewards, dtype=float)
        if nxt.shape != (k,) or rew.shape != (k,):
            raise ValueError(f"next_state/rewards must have one entry per legal pair ({k})")
        if k and (nxt.min() < 0 or nxt.max() >= n):
            raise ValueError("next_state out of range")
        if not np.all(np.isfinite(rew)):
            raise ValueError("rewards must be finite")
        if not 0 <= self.start_state < n:
            raise ValueError("start_state out of range")
        pair_state = np.repeat(np.arange(n), counts).astype(np.int64)
        pair_action = np.array([a for acts in legal for a in acts], dtype=np.int64)
        set_ = object.__setattr__
        set_(self, "n_states", n)
        set_(self, "legal", legal)
        set_(self, "terminal", _readonly(term))
        set_(self, "next_state", _readonly(nxt))
        set_(self, "rewards", _readonly(rew))
        set_(self, "offsets", _readonly(offsets))
        set_(self, "pair_state", _readonly(pair_state))
        set_(self, "pair_action", _readonly(pair_action))
        found = frozenset(range(n)) - self._reachable()
        if self.unreachable is None:
            set_(self, "unreachable", found)
        elif frozenset(self.unreachable) != found:
            raise ValueError(
                f"unreachable flags {sorted(self.unreachable)} disagree with reachability {sorted(found)}")

    def _reachable(self):
        seen = {self.start_state}
        stack = [self.start_state]
        while stack:
            s = stack.pop()
            for k in range(self.offsets[s], self.offsets[s + 1]):
                t = int(self.next_state[k])
                if t not in seen:
                    seen.add(t)
                    stack.append(t)
        return seen

    @property
    def n_pairs(self) -> int:
        return int(self.offsets[-1])

    @property
    def n_actions(self) -> int:
        return int(self.pair_action.max()) + 1 if self.n_pairs else 0

    def actions(self, s: int) -> tuple:
        return self.legal[s]

    def is_terminal(self, s: int) -> bool:
        return bool(self.terminal[s])

    def pair(self, s: int, a: int) -> int:
        """Flat index of the legal pair (s, a)."""
        try:
            return int(self.offsets[s]) + self.legal[s].index(a)
        except (ValueError, IndexError):
            raise KeyError(f"({s}, {a}) is not a legal pair") from None

    def next(self, s: int, a: int) -> int:
        return int(self.next_state[self.pair(s, a)])

    def reward(self, s: int, a: int) -> float:
        return float(self.rewards[self.pair(s, a)])

    def transition(self, s: int, a: int) -> "Transition":
        k = self.pair(s, a)
        sn = int(self.next_state[k])
        return Transition(s, a, float(self.rewards[k]), sn, bool(self.terminal[sn]))

    def transitions(self) -> list:
        """One transition per legal pair, in pair order."""
        return [Transition(int(s), int(a), float(r), int(sn), bool(self.terminal[sn]))
                for s, a, r, sn in zip(self.pair_state, self.pair_action, self.rewards, self.next_state)]

    def next_pair_ranges(self):
        """Per pair: (lo, hi) range of the successor's pairs; (0, 0) when the successor is terminal."""
        sn = self.next_state
        return self.offsets[sn], self.offsets[sn + 1]


@dataclass(frozen=True)
class Transition:
    s: int
    a: int
    r: float
    s_next: int
    terminal: bool


@dataclass(frozen=True)
class Episode:
    """Ordered rewards of one episode. ``truncated`` marks a step-cap cut."""

    rewards: tuple
    truncated: bool = False

    def __post_init__(self):
        r = tuple(float(x) for x in self.rewards)
        if len(r) < 1:
            raise ValueError("an episode needs at least one reward")
        object.__setattr__(self, "rewards", r)

    @property
    def length(self) -> int:
        return len(self.rewards)

    def array(self) -> np.ndarray:
        return np.array(self.rewards, dtype=float)


class QTable:
    """Q-values over the legal pairs of an MDP.

    ``values`` is the flat pair array; ``q[s, a]`` indexes by state and action.
    """

    def __init__(self, mdp: MdpSpec, values=None):
        self.mdp = mdp
        if values is None:
            values = np.zeros(mdp.n_pairs)
        values = np.array(values, dtype=float)
        if values.shape != (mdp.n_pairs,):
            raise ValueError(f"expected {mdp.n_pairs} values, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError("Q-values must be finite")
        self.values = values

    def __getitem__(self, sa):
        s, a = sa
        return float(self.values[self.mdp.pair(s, a)])

    def __setitem__(self, sa, v):
        s, a = sa
        self.values[self.mdp.pair(s, a)] = v

    def row(self, s: int) -> np.ndarray:
        o = self.mdp.offsets
        return self.values[o[s]:o[s + 1]]

    def max_value(self, s: int) -> float:
        """max_a Q(s, a), taken as 0 for terminal states."""
        if self.mdp.terminal[s]:
            return 0.0
        return float(self.row(s).max())

    def greedy_actions(self, s: int) -> list:
        row = self.row(s)
        acts = self.mdp.legal[s]
        return [acts[i] for i in np.flatnonzero(row == row.max())]

    def copy(self) -> "QTable":
        return QTable(self.mdp, self.values.copy())

    def as_dict(self) -> dict:
        return {(int(s), int(a)): float(v)
                for s, a, v in zip(self.mdp.pair_state, self.mdp.pair_action, self.values)}


# ---------------------------------------------------------------- builders

def build_mdp(n_states, transitions: dict, terminal, start_state=0, name="mdp") -> MdpSpec:
    """Build from ``{(s, a): (s_next, r)}``."""
    legal = [[] for _ in range(n_states)]
    for s, a in sorted(transitions):
        legal[s].append(a)
    nxt, rew = [], []
    for s in range(n_states):
        for a in legal[s]:
            sn, r = transitions[(s, a)]
            nxt.append(sn)
            rew.append(r)
    return MdpSpec(n_states, tuple(tuple(x) for x in legal), np.array(nxt, dtype=np.int64),
                   np.array(rew, dtype=float), np.asarray(terminal, dtype=bool), start_state, name=name)


def cliff_state(x, y, width):
    """State id of grid cell (x, y); y = 0 is the bottom row."""
    return y * width + x


def build_cliff_walking(width: int, height: int) -> MdpSpec:
    """Cliff-walking grid.

    The agent starts at the lower-left cell and the goal is the lower-right
    cell. Bottom-row cells strictly between them are cliff. Entering a white
    cell gives -1, entering the cliff gives -100 and terminates, entering the
    goal gives 0 and terminates. Moves into walls are not legal actions.
    """
    if int(width) != width or int(height) != height:
        raise ValueError("width and height must be integers")
    if width < 2 or height < 2:
        raise ValueError(f"cliff walking needs width >= 2 and height >= 2, got ({width}, {height})")
    n = width * height
    goal = cliff_state(width - 1, 0, width)
    cliff = {cliff_state(x, 0, width) for x in range(1, width - 1)}
    terminal = np.zeros(n, dtype=bool)
    terminal[list(cliff | {goal})] = True
    trans = {}
    for y in range(height):
        for x in range(width):
            s = cliff_state(x, y, width)
            if terminal[s]:
                continue
            for a, (dx, dy) in _MOVES.items():
                nx, ny = x + dx, y + dy
                if not (0 <= nx < width and 0 <= ny < height):
                    continue
                sn = cliff_state(nx, ny, width)
                r = -100.0 if sn in cliff else (0.0 if sn == goal else -1.0)
                trans[(s, a)] = (sn, r)
    return build_mdp(n, trans, terminal, start_state=0, name=f"cliff_walking({width},{height})")


def build_one_way_cliff(length: int) -> MdpSpec:
    """Chain of ``length`` cells.

    From each cell, ADVANCE moves right with reward +2 and JUMP moves up with
    reward -1 and terminates. Cell ``length`` is the terminal goal and state
    ``length + 1`` is the terminal state reached by jumping.
    """
    if int(length) != length or length < 1:
        raise ValueError(f"one-way cliff needs length >= 1, got {length}")
    goal, fell = length, length + 1
    trans = {}
    for s in range(length):
        trans[(s, ADVANCE)] = (s + 1, 2.0)
        trans[(s, JUMP)] = (fell, -1.0)
    terminal = np.zeros(length + 2, dtype=bool)
    terminal[[goal, fell]] = True
    return build_mdp(length + 2, trans, terminal, name=f"one_way_cliff({length})")


def build_cycle_chain(n: int, rewards) -> MdpSpec:
    """Single-action cycle s_0 -> s_1 -> ... -> s_{n-1} -> s_0 with the given edge rewards."""
    if int(n) != n or n < 2:
        raise ValueError(f"cycle chain needs n >= 2, got {n}")
    rewards = list(rewards)
    if len(rewards) != n:
        raise ValueError(f"expected {n} rewards, got {len(rewards)}")
    trans = {(s, 0): ((s + 1) % n, float(rewards[s])) for s in range(n)}
    return build_mdp(n, trans, np.zeros(n, dtype=bool), name=f"cycle({n})")


def random_mdp(rng: np.random.Generator, n_states=(3, 20), n_actions=(2, 4), terminal_prob=0.15,
               reward_scale=1.0) -> MdpSpec:
    """Random deterministic MDP. Ranges are inclusive (lo, hi) pairs or fixed ints.

    State 0 is the start and never terminal. Unreachable states are flagged.
    """
    def draw(v):
        return int(rng.integers(v[0], v[1] + 1)) if isinstance(v, tuple) else int(v)

    n, na = draw(n_states), draw(n_actions)
    terminal = rng.random(n) < terminal_prob
    terminal[0] = False
    if terminal.all():
        terminal[0] = False
    nxt = rng.integers(0, n, size=(n, na))
    rew = rng.normal(scale=reward_scale, size=(n, na))
    trans = {(s, a): (int(nxt[s, a]), float(rew[s, a]))
             for s in range(n) if not terminal[s] for a in range(na)}
    return build_mdp(n, trans, terminal, name=f"random({n},{na})")


# ---------------------------------------------------------------- solvers

def bellman_backup(mdp: MdpSpec, values: np.ndarray, gamma: float) -> np.ndarray:
    """(T Q)(s,a) = r + gamma max_a' Q(s',a'); terminal successors give r."""
    vmax = np.zeros(mdp.n_states)
    live = ~mdp.terminal
    if mdp.n_pairs:
        starts = mdp.offsets[:-1][live]
        vmax[live] = np.maximum.reduceat(values, starts)
    return mdp.rewards + gamma * vmax[mdp.next_state]


def value_iteration(mdp: MdpSpec, gamma: float, tol: float = 1e-10, max_iter: int | None = None) -> QTable:
    """Q* by synchronous value iteration.

    Returns Q with sup-norm Bellman residual at most ``tol``. With gamma = 1 the
    iteration cap defaults to 10 * n_states * n_states (a path bound), and an
    improper instance raises ConvergenceError instead of looping.
    """
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma must lie in [0, 1], got {gamma}")
    if tol <= 0:
        raise ValueError("tol must be positive")
    if max_iter is None:
        max_iter = 10 * mdp.n_states * mdp.n_states
        if gamma < 1.0:
            scale = float(np.abs(mdp.rewards).max(initial=0.0)) + 1.0
            need = math.log(tol * (1 - gamma) / scale) / math.log(gamma) if gamma > 0 else 1
            max_iter = max(max_iter, int(2 * need) + 10)
    q = np.zeros(mdp.n_pairs)
    for _ in range(max_iter + 1):
        tq = bellman_backup(mdp, q, gamma)
        if np.max(np.abs(tq - q), initial=0.0) <= tol:
            return QTable(mdp, q)
        q = tq
    raise ConvergenceError(f"value iteration did not reach tol={tol} in {max_iter} sweeps (gamma={gamma})")


def bellman_residual(q: QTable, gamma: float) -> float:
    return float(np.max(np.abs(bellman_backup(q.mdp, q.values, gamma) - q.values), initial=0.0))


def greedy_action(q: QTable, s: int, rng: np.random.Generator) -> int:
    """Greedy action with ties broken uniformly at random."""
    row = q.row(s)
    best = np.flatnonzero(row == row.max())
    i = best[0] if len(best) == 1 else best[rng.integers(len(best))]
    return q.mdp.legal[s][i]


def rollout(mdp: MdpSpec, q: QTable, epsilon: float, seed=None, max_steps: int | None = None):
    """Run one epsilon-greedy episode from the start state.

    Returns (Episode, undiscounted return). A start state that is terminal
    yields no reward; that case is reported as a zero-reward one-step episode.
    """
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError("epsilon must lie in [0, 1]")
    if max_steps is None:
        max_steps = 10 * mdp.n_states
    if max_steps < 1:
        raise ValueError("max_steps must be >= 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    s = mdp.start_state
    rewards = []
    truncated = True
    for _ in range(max_steps):
        if mdp.terminal[s]:
            truncated = False
            break
        acts = mdp.legal[s]
        if epsilon > 0 and rng.random() < epsilon:
            a = acts[rng.integers(len(acts))]
        else:
            a = greedy_action(q, s, rng)
        k = mdp.pair(s, a)
        rewards.append(float(mdp.rewards[k]))
        s = int(mdp.next_state[k])
    else:
        truncated = not mdp.terminal[s]
    if not rewards:
        rewards = [0.0]
    ep = Episode(tuple(rewards), truncated=truncated)
    return ep, float(sum(rewards))
