"""Replay memory with FIFO or random replacement and lower-bounded prioritized sampling.

Every stored transition gets a unique id (its push number). A slot can be
reused, so an id is stale once its slot has been overwritten; stale ids are
skipped silently by priority updates.
"""
from __future__ import annotations

import enum
import math

import numpy as np

from .mdp import Transition

DISCARDED = None


class Strategy(enum.Enum):
    FIFO = "fifo"
    RANDOM_REPLACE = "random_replace"


class SumTree:
    """Binary sum tree over ``capacity`` leaves, padded to a power of two.

    Parents are recomputed as left + right on every write, so internal sums
    never accumulate drift from incremental changes.
    """

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.size = 1 << max(0, math.ceil(math.log2(capacity)))
        self.tree = np.zeros(2 * self.size)

    def __getitem__(self, i):
        return self.tree[self.size + i]

    def leaves(self) -> np.ndarray:
        return self.tree[self.size:self.size + self.capacity]

    @property
    def total(self) -> float:
        return float(self.tree[1])

    def set(self, i: int, value: float):
        if not 0 <= i < self.capacity:
            raise IndexError(i)
        j = self.size + i
        self.tree[j] = value
        j //= 2
        while j >= 1:
            self.tree[j] = self.tree[2 * j] + self.tree[2 * j + 1]
            j //= 2

    def find(self, u: float) -> int:
        """Smallest leaf i with cumulative sum through i greater than u."""
        j = 1
        while j < self.size:
            left = self.tree[2 * j]
            if u < left or self.tree[2 * j + 1] <= 0.0:
                j = 2 * j
            else:
                u -= left
                j = 2 * j + 1
        return j - self.size


class PrioritySampler:
    """Lower-bounded priorities p = max((|delta| + eps_p)^alpha_p, mean(p)/c_p)."""

    def __init__(self, capacity: int, alpha_p: float = 0.6, c_p: float = 10.0, eps_p: float = 1e-10,
                 initial_priority: float = 100.0):
        if not alpha_p >= 0:
            raise ValueError("alpha_p must be >= 0")
        if not c_p > 1:
            raise ValueError(f"c_p must exceed 1, got {c_p}")
        if not eps_p > 0 or not initial_priority > 0:
            raise ValueError("eps_p and initial_priority must be positive")
        self.tree = SumTree(capacity)
        self.alpha_p, self.c_p, self.eps_p = alpha_p, c_p, eps_p
        self.initial_priority = initial_priority
        self.max_seen_priority = None  # None until the first computed priority

    def new_priority(self) -> float:
        return self.initial_priority if self.max_seen_priority is None else self.max_seen_priority


class ReplayMemory:
    def __init__(self, capacity: int, strategy="fifo", discard_prob: float = 0.0, seed=None,
                 sampler: PrioritySampler | None = None, prioritized: bool = True, **sampler_kw):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        if not 0.0 <= discard_prob < 1.0:
            raise ValueError(f"discard_prob must lie in [0, 1), got {discard_prob}")
        self.capacity = capacity
        self.strategy = Strategy(strategy)
        self.discard_prob = discard_prob
        self.rng = np.random.default_rng(seed)
        if sampler is None and prioritized:
            sampler = PrioritySampler(capacity, **sampler_kw)
        self.sampler = sampler
        self.store = [None] * capacity
        self.uid = np.full(capacity, -1, dtype=np.int64)
        self.pred = np.full(capacity, -1, dtype=np.int64)   # uid of predecessor
        self.succ = np.full(capacity, -1, dtype=np.int64)   # slot of the successor linking here
        self.size = 0
        self.n_pushed = 0
        self.n_discarded = 0
        self._lookup = {}  # uid -> slot, random replacement only
        self._last = -1  # uid of the last stored transition of the running episode

    def __len__(self):
        return self.size

    def slot_of(self, uid: int):
        """Slot holding ``uid`` or None if it was evicted."""
        if uid is None or uid < 0:
            return None
        s = int(uid % self.capacity) if self.strategy is Strategy.FIFO else self._lookup.get(uid)
        if s is None or self.uid[s] != uid:
            return None
        return s

    def predecessor(self, uid: int):
        s = self.slot_of(uid)
        if s is None:
            return None
        p = int(self.pred[s])
        return p if p >= 0 and self.slot_of(p) is not None else None

    def end_episode(self):
        self._last = -1

    def _evict(self, slot):
        old = int(self.uid[slot])
        if old < 0:
            return
        nxt = int(self.succ[slot])
        if nxt >= 0 and self.pred[nxt] == old:
            self.pred[nxt] = -1
        p = self.slot_of(int(self.pred[slot]))
        if p is not None and self.succ[p] == slot:
            self.succ[p] = -1
        if self.strategy is Strategy.RANDOM_REPLACE:
            self._lookup.pop(old, None)
        if self._last == old:
            self._last = -1

    def push(self, t: Transition):
        """Store ``t`` (or drop it with probability discard_prob). Returns its id or DISCARDED."""
        if self.discard_prob > 0 and self.rng.random() < self.discard_prob:
            self.n_discarded += 1
            self._last = -1
            return DISCARDED
        uid = self.n_pushed
        if self.strategy is Strategy.FIFO:
            slot = uid % self.capacity
        elif self.size < self.capacity:
            slot = self.size
        else:
            slot = int(self.rng.integers(self.capacity))
        self._evict(slot)
        pred_slot = self.slot_of(self._last)
        self.store[slot] = t
        self.uid[slot] = uid
        self.pred[slot] = self._last if pred_slot is not None else -1
        self.succ[slot] = -1
        if pred_slot is not None:
            self.succ[pred_slot] = slot
        if self.strategy is Strategy.RANDOM_REPLACE:
            self._lookup[uid] = slot
        if self.size < self.capacity:
            self.size += 1
        self.n_pushed += 1
        self._last = -1 if t.terminal else uid
        if self.sampler is not None:
            self.sampler.tree.set(slot, self.sampler.new_priority())
        return uid

    def ids(self) -> list:
        return [int(u) for u in self.uid if u >= 0]

    def transitions(self) -> list:
        return [self.store[s] for s in range(self.capacity) if self.uid[s] >= 0]


def push(mem: ReplayMemory, t: Transition):
    return mem.push(t)


def beta_at(progress: float) -> float:
    """Importance exponent annealed linearly from 0.4 to 1."""
    if not 0.0 <= progress <= 1.0:
        raise ValueError(f"progress must lie in [0, 1], got {progress}")
    return 0.4 + 0.6 * progress


def sampling_probabilities(sampler: PrioritySampler, mem: ReplayMemory) -> np.ndarray:
    leaves = sampler.tree.leaves()
    return leaves / leaves.sum()


def is_weights(sampler: PrioritySampler, mem: ReplayMemory, slots, beta: float) -> np.ndarray:
    """w_i = ((sum p / N) / p_i)^beta, capped at 2 c_p."""
    tree = sampler.tree
    pbar = tree.total / mem.size
    p = np.array([tree[s] for s in slots])
    return np.minimum((pbar / p) ** beta, 2.0 * sampler.c_p)


def sample_batch(sampler: PrioritySampler, mem: ReplayMemory, batch_size: int, seed=None, beta: float = 0.4):
    """Stratified proportional sampling. Returns [(id, Transition, is_weight)]."""
    if mem.size == 0:
        raise ValueError("cannot sample from an empty memory")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    tree = sampler.tree
    total = tree.total
    seg = total / batch_size
    slots = []
    for i in range(batch_size):
        u = min((i + rng.random()) * seg, np.nextafter(total, 0.0))
        s = tree.find(u)
        if mem.uid[s] < 0:
            # rounding at the edge of the occupied range
            s = int(np.flatnonzero(mem.uid >= 0)[-1])
        slots.append(s)
    w = is_weights(sampler, mem, slots, beta)
    return [(int(mem.uid[s]), mem.store[s], float(wi)) for s, wi in zip(slots, w)]


def sample_uniform(mem: ReplayMemory, batch_size: int, seed=None):
    """Uniform sampling with unit weights."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    occ = np.flatnonzero(mem.uid >= 0)
    slots = occ[rng.integers(len(occ), size=batch_size)]
    return [(int(mem.uid[s]), mem.store[s], 1.0) for s in slots]


def update_priorities(sampler: PrioritySampler, mem: ReplayMemory, items):
    """Set p_i = max((|delta_i| + eps_p)^alpha_p, pbar/c_p), then raise predecessors.

    ``items`` is [(id, |delta|)]. Each live id's predecessor (one hop) is
    raised to at least (|delta|/2 + eps_p)^alpha_p. pbar is the mean priority
    after this update, so every priority written here satisfies
    p_i >= pbar/c_p exactly. The floor only applies to the updated slots, not
    to raised predecessors.
    """
    tree = sampler.tree
    ap, eps = sampler.alpha_p, sampler.eps_p
    raw = {}
    for uid, mag in items:
        s = mem.slot_of(uid)
        if s is None:
            continue
        v = (abs(float(mag)) + eps) ** ap
        raw[s] = max(raw.get(s, 0.0), v)
    if not raw:
        return
    raise_to = {}
    for uid, mag in items:
        s = mem.slot_of(uid)
        if s is None:
            continue
        p = mem.predecessor(uid)
        if p is None:
            continue
        ps = mem.slot_of(p)
        lb = (abs(float(mag)) / 2 + eps) ** ap
        raise_to[ps] = max(raise_to.get(ps, 0.0), lb)
    # updated slots: value max(a_s, m/c) with a_s including any raise on the same slot
    a = {s: max(v, raise_to.get(s, 0.0)) for s, v in raw.items()}
    # raised predecessors outside the updated set: fixed values
    fixed = {s: max(float(tree[s]), lb) for s, lb in raise_to.items() if s not in a}
    n = mem.size
    c = sampler.c_p
    rest = tree.total - sum(float(tree[s]) for s in a) - sum(float(tree[s]) for s in fixed)
    rest += sum(fixed.values())
    vals = np.sort(np.array(list(a.values())))
    # m = (rest + sum_{a_i >= m/c} a_i + L m/c) / n, with L the number floored
    suffix = np.concatenate([np.cumsum(vals[::-1])[::-1], [0.0]])
    m = None
    for L in range(len(vals) + 1):
        cand = (rest + suffix[L]) / (n - L / c)
        lo = vals[L - 1] if L > 0 else -np.inf
        hi = vals[L] if L < len(vals) else np.inf
        if lo <= cand / c <= hi:
            m = cand
            break
    if m is None:  # unreachable for c > 1; guard against rounding at a breakpoint
        m = (rest + suffix[0]) / n
    floor = m / c
    for s, v in a.items():
        p = max(v, floor)
        tree.set(s, p)
        sampler.max_seen_priority = p if sampler.max_seen_priority is None else max(sampler.max_seen_priority, p)
    for s, v in fixed.items():
        tree.set(s, v)
