"""Rewards for pushes and grasps, and the border-occupancy features around the target."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import grid
from .sim.physics import PUSH_LEN
from .sim.world import GROUND_EPS, HeightmapState, MotionCommand, MotionOutcome

OCC_DROP = 10  # pixels
PUSH_LEN_PX = int(round(PUSH_LEN / grid.PIXEL_SIZE))

PUSH_REWARDS = (0.0, 0.25, 0.5)
GRASP_REWARDS = (0.0, 0.5, 1.0)


@dataclass(frozen=True)
class BorderStats:
    o_b: int
    r_b: float
    n_b: float
    border_mask: np.ndarray


def border_stats(s: HeightmapState) -> BorderStats:
    mask = np.asarray(s.mask, dtype=bool)
    ring = grid.dilate(mask, grid.BORDER_RADIUS)
    o_b = int(np.count_nonzero(ring & (s.depth > GROUND_EPS)))
    ring_size = int(ring.sum())
    mask_size = int(mask.sum())
    r_b = o_b / ring_size if ring_size else 0.0
    n_b = o_b / mask_size if mask_size else 0.0
    return BorderStats(o_b=o_b, r_b=r_b, n_b=n_b, border_mask=ring)


def push_segment(cmd: MotionCommand, length_px: int = PUSH_LEN_PX) -> np.ndarray:
    """Pixels swept by the push start point, as a boolean raster."""
    u = grid.direction(cmd.orientation)
    t = np.linspace(0.0, float(length_px), 2 * length_px + 1)
    rows = np.floor(cmd.pixel[0] + 0.5 + t * u[1]).astype(int)
    cols = np.floor(cmd.pixel[1] + 0.5 + t * u[0]).astype(int)
    keep = (rows >= 0) & (rows < grid.GRID_DIM) & (cols >= 0) & (cols < grid.GRID_DIM)
    out = np.zeros((grid.GRID_DIM, grid.GRID_DIM), dtype=bool)
    out[rows[keep], cols[keep]] = True
    return out


def push_reward(s_t: HeightmapState, cmd: MotionCommand, s_next: HeightmapState) -> float:
    if cmd.kind != "push":
        raise ValueError("push_reward needs a push command")
    mask = np.asarray(s_t.mask, dtype=bool)
    if not mask.any():
        return 0.0
    seg = push_segment(cmd)
    if s_next.target_visible:
        drop = border_stats(s_t).o_b - border_stats(s_next).o_b
        if drop >= OCC_DROP and (seg & grid.grow(mask, PUSH_LEN_PX)).any():
            return 0.5
    if (seg & mask).any():
        return 0.25
    return 0.0


def grasp_reward(s_t: HeightmapState, cmd: MotionCommand, outcome: MotionOutcome) -> float:
    if cmd.kind != "grasp":
        raise ValueError("grasp_reward needs a grasp command")
    if outcome.target_grasped:
        return 1.0
    if s_t.mask[cmd.pixel]:
        return 0.5
    return 0.0


def reward(s_t: HeightmapState, cmd: MotionCommand, s_next: HeightmapState,
           outcome: MotionOutcome) -> float:
    if cmd.kind == "push":
        return push_reward(s_t, cmd, s_next)
    return grasp_reward(s_t, cmd, outcome)
