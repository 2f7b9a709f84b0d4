"""Push-or-grasp coordination for a visible target."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from . import critic
from .net import ActionClassifier
from .reward import BorderStats, border_stats
from .sim.world import HeightmapState, MotionCommand, MotionOutcome

GRASP_THRESHOLD = 0.5


@dataclass(frozen=True)
class CoordinationFeatures:
    q_p: float
    q_g: float
    r_b: float
    n_b: float
    c_g: int

    def __post_init__(self):
        if self.c_g < 0:
            raise ValueError("c_g must be >= 0")

    def vector(self) -> np.ndarray:
        return np.array([self.q_p, self.q_g, self.r_b, self.n_b, self.c_g], dtype=np.float32)


def features(push_q: critic.QMapStack, grasp_q: critic.QMapStack, stats: BorderStats,
             c_g: int) -> CoordinationFeatures:
    _, q_p = critic.select(push_q)
    _, q_g = critic.select(grasp_q)
    return CoordinationFeatures(q_p=q_p, q_g=q_g, r_b=float(stats.r_b), n_b=float(stats.n_b),
                                c_g=int(c_g))


def grasp_probability(clf: ActionClassifier, feats: CoordinationFeatures) -> float:
    was_training = clf.training
    clf.eval()
    try:
        with torch.no_grad():
            y = clf(torch.from_numpy(feats.vector()[None]))
    finally:
        clf.train(was_training)
    return float(y[0])


def decide(clf: ActionClassifier, feats: CoordinationFeatures) -> str:
    return "grasp" if grasp_probability(clf, feats) >= GRASP_THRESHOLD else "push"


@dataclass
class GraspFailureCounter:
    """Consecutive grasp failures within one episode."""

    c_g: int = 0
    reset_on_push: bool = False

    def update(self, cmd: MotionCommand, outcome: MotionOutcome) -> int:
        if cmd.kind == "grasp":
            self.c_g = 0 if outcome.target_grasped else self.c_g + 1
        elif self.reset_on_push:
            self.c_g = 0
        return self.c_g


@dataclass
class CoordinationStep:
    command: MotionCommand
    decision: str
    feats: CoordinationFeatures
    y: float


def coordinate_step(model, clf: ActionClassifier, s: HeightmapState, c_g: int,
                    channel_mask=critic.ALL_CHANNELS) -> CoordinationStep:
    if not s.target_visible:
        raise ValueError("coordination needs a visible target")
    push_q, grasp_q = critic.predict(model, s, channel_mask)
    feats = features(push_q, grasp_q, border_stats(s), c_g)
    y = grasp_probability(clf, feats)
    decision = "grasp" if y >= GRASP_THRESHOLD else "push"
    cmd, _ = critic.select(grasp_q if decision == "grasp" else push_q)
    return CoordinationStep(cmd, decision, feats, y)
