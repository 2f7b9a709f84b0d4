"""Replay storage for the critic (prioritized, with hindsight copies) and the action classifier."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .coordinator import CoordinationFeatures
from .sim.world import HeightmapState, MotionCommand, MotionOutcome, WorldState, object_masks, observe, render

LEGAL_REWARDS = (0.0, 0.25, 0.5, 1.0)
PRIORITY_OMEGA = 0.6
PRIORITY_EPS = 1e-3
RECENT_PROB = 0.5


@dataclass
class Transition:
    """One executed motion.

    States are kept as worlds and rendered on demand; ``target_id`` selects the
    object whose mask conditions the critic (the grasped object for hindsight
    copies). ``next_target_id`` conditions the next state when it differs, as
    after a successful grasp when a new target is appointed.
    """

    world_t: WorldState
    action: MotionCommand
    reward: float
    world_next: WorldState
    terminal: bool
    target_id: int
    surprise: float = 1.0
    hindsight: bool = False
    uid: int = -1
    next_target_id: int | None = None

    def __post_init__(self):
        if self.reward not in LEGAL_REWARDS:
            raise ValueError(f"illegal reward {self.reward}")

    @property
    def s_t(self) -> HeightmapState:
        return observe(dataclasses.replace(self.world_t, target_id=self.target_id))

    @property
    def s_next(self) -> HeightmapState:
        nxt = self.target_id if self.next_target_id is None else self.next_target_id
        return observe(dataclasses.replace(self.world_next, target_id=nxt))

    @property
    def hindsight_mask(self) -> np.ndarray | None:
        return self.s_t.mask if self.hindsight else None

    @property
    def hindsight_reward(self) -> float | None:
        return self.reward if self.hindsight else None


def hindsight_relabel(t: Transition, outcome: MotionOutcome) -> Transition | None:
    """Copy of a wrong-object grasp conditioned on the grasped object, rewarded 1.

    The next state stays conditioned on the real target, as if it had been
    appointed after the relabelled success.
    """
    if t.action.kind != "grasp" or outcome.grasped_object_id is None or outcome.target_grasped:
        return None
    oid = outcome.grasped_object_id
    if oid not in object_masks(t.world_t, render(t.world_t)[2]):
        return None  # too little of it was visible to form a mask
    nxt = t.target_id if t.next_target_id is None else t.next_target_id
    return dataclasses.replace(t, reward=1.0, target_id=oid, next_target_id=nxt, hindsight=True,
                               uid=-1)


class ReplayBuffer:
    """Bounded FIFO with surprise-prioritized sampling."""

    def __init__(self, capacity: int, omega: float = PRIORITY_OMEGA, eps: float = PRIORITY_EPS,
                 recent_prob: float = RECENT_PROB):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.omega = omega
        self.eps = eps
        self.recent_prob = recent_prob
        self.items: list[Transition] = []
        self._next_uid = 0

    def __len__(self):
        return len(self.items)

    def add(self, t: Transition) -> Transition:
        t.uid = self._next_uid
        self._next_uid += 1
        if self.items:
            t.surprise = max(x.surprise for x in self.items)
        self.items.append(t)
        if len(self.items) > self.capacity:
            self.items.pop(0)
        return t

    def weights(self) -> np.ndarray:
        s = np.array([t.surprise for t in self.items], dtype=np.float64)
        w = (s + self.eps) ** self.omega
        return w / w.sum()

    def sample_indices(self, batch_size: int, rng: np.random.Generator) -> list[int]:
        if not self.items:
            raise ValueError("cannot sample from an empty buffer")
        n = len(self.items)
        idx = []
        if rng.random() < self.recent_prob:
            idx.append(n - 1)
        rest = batch_size - len(idx)
        if rest > 0:
            idx.extend(int(i) for i in rng.choice(n, size=rest, p=self.weights()))
        return idx

    def sample(self, batch_size: int, rng: np.random.Generator) -> list[Transition]:
        return [self.items[i] for i in self.sample_indices(batch_size, rng)]


def sample_prioritized(buffer: ReplayBuffer, batch_size: int, seed: int) -> list[Transition]:
    return buffer.sample(batch_size, np.random.default_rng(seed))


@dataclass(frozen=True)
class ClassifierSample:
    feats: CoordinationFeatures
    label: int


def classifier_label(cmd: MotionCommand, s_t: HeightmapState, outcome: MotionOutcome) -> int | None:
    """1 for a target grasp, 0 for a failed grasp inside the mask, otherwise no sample."""
    if cmd.kind != "grasp":
        return None
    if outcome.target_grasped:
        return 1
    if s_t.mask[cmd.pixel]:
        return 0
    return None


class ClassifierBuffer:
    """Cyclic buffer of labelled coordination features."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.items: list[ClassifierSample] = []

    def __len__(self):
        return len(self.items)

    def add(self, sample: ClassifierSample) -> None:
        self.items.append(sample)
        if len(self.items) > self.capacity:
            self.items.pop(0)

    def arrays(self, idx=None) -> tuple[np.ndarray, np.ndarray]:
        items = self.items if idx is None else [self.items[i] for i in idx]
        x = np.stack([s.feats.vector() for s in items])
        y = np.array([s.label for s in items], dtype=np.float32)
        return x, y
