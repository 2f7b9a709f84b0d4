"""Rotation pipeline from a heightmap observation to push and grasp Q-map stacks.

For each orientation ``k`` the input rasters are expressed in frame ``k`` (where
the push direction is +col), run through the critic, and the output is mapped
back to the workspace frame. Workspace pixels with no counterpart in frame
``k`` get ``-inf`` so an argmax never lands on them.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from . import grid
from .grid import GRID_DIM, N_ROTATIONS
from .net import Critic
from .sim.world import PALETTE, HeightmapState, MotionCommand

DEPTH_SCALE = 0.1  # meters; tallest stacks in the workspace stay below this
CHANNEL_GROUPS = {"color": (0, 1, 2), "depth": (3,), "mask": (4,)}
ALL_CHANNELS = np.ones(5, dtype=np.float32)


class NoValidAction(RuntimeError):
    pass


def parse_channels(spec: str | None) -> np.ndarray:
    """``"color,depth,mask"`` style list -> 5-element 0/1 channel mask."""
    if spec is None:
        return ALL_CHANNELS.copy()
    out = np.zeros(5, dtype=np.float32)
    names = [n.strip() for n in spec.split(",") if n.strip()]
    if not names:
        raise ValueError("empty channel list")
    for n in names:
        if n not in CHANNEL_GROUPS:
            raise ValueError(f"unknown channel group {n!r}; expected color, depth or mask")
        out[list(CHANNEL_GROUPS[n])] = 1.0
    return out


def channels_name(channel_mask) -> str:
    cm = np.asarray(channel_mask)
    return ",".join(n for n, idx in CHANNEL_GROUPS.items() if cm[list(idx)].all())


@dataclass
class QMapStack:
    primitive: str
    maps: np.ndarray  # (N_ROTATIONS, GRID_DIM, GRID_DIM), workspace frame, -inf = invalid

    def max(self) -> float:
        return float(np.max(self.maps))


def encode(s: HeightmapState, mask: np.ndarray | None = None) -> np.ndarray:
    """Workspace-frame input planes ``(5, H, W)``: RGB, scaled depth, target mask."""
    color = np.asarray(s.color)
    rgb = PALETTE[color].astype(np.float32) / 255.0
    m = s.mask if mask is None else mask
    return np.concatenate([
        np.moveaxis(rgb, -1, 0),
        (np.asarray(s.depth, dtype=np.float32) / DEPTH_SCALE)[None],
        np.asarray(m, dtype=np.float32)[None],
    ])


def rotate_planes(x: np.ndarray, k: int) -> np.ndarray:
    """Express a ``(C, H, W)`` input in frame ``k``; outside pixels read as bare ground."""
    if k == 0:
        return x.copy()
    src_r, src_c, inside = grid._source_index(x.shape[1:], k)
    out = x[:, src_r, src_c]
    out[:, ~inside] = 0.0
    return out


def frame_inputs(s: HeightmapState, channel_mask=ALL_CHANNELS, mask: np.ndarray | None = None,
                 orientations=range(N_ROTATIONS)) -> np.ndarray:
    x = encode(s, mask) * np.asarray(channel_mask, dtype=np.float32)[:, None, None]
    return np.stack([rotate_planes(x, k) for k in orientations])


def to_workspace(out: np.ndarray) -> np.ndarray:
    """``(N, H, W)`` frame-k outputs -> workspace frame with ``-inf`` outside."""
    maps = np.empty(out.shape, dtype=np.float32)
    for k in range(out.shape[0]):
        maps[k] = grid.rotate(out[k], grid.inverse_index(k), fill=-np.inf)
    return maps


def run_frames(model: Critic, x: np.ndarray) -> np.ndarray:
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            out = model(torch.from_numpy(np.ascontiguousarray(x)))
    finally:
        model.train(was_training)
    return out.numpy()


def predict(model: Critic, s: HeightmapState, channel_mask=ALL_CHANNELS,
            mask: np.ndarray | None = None) -> tuple[QMapStack, QMapStack]:
    """Push and grasp Q stacks for every orientation, in the workspace frame."""
    if np.shape(s.depth) != (GRID_DIM, GRID_DIM):
        raise ValueError(f"expected {GRID_DIM}x{GRID_DIM} rasters")
    out = run_frames(model, frame_inputs(s, channel_mask, mask))
    return QMapStack("push", to_workspace(out[:, 0])), QMapStack("grasp", to_workspace(out[:, 1]))


def agnostic_push_maps(model: Critic, s: HeightmapState, channel_mask=ALL_CHANNELS) -> QMapStack:
    """Push stack with the target mask replaced by all ones (target-agnostic pushes)."""
    ones = np.ones((GRID_DIM, GRID_DIM), dtype=bool)
    return predict(model, s, channel_mask, mask=ones)[0]


def select(q: QMapStack | np.ndarray, primitive: str | None = None) -> tuple[MotionCommand, float]:
    """Global argmax; ties go to the smallest ``(k, row, col)``."""
    maps = q.maps if isinstance(q, QMapStack) else np.asarray(q)
    kind = primitive or (q.primitive if isinstance(q, QMapStack) else "push")
    flat = maps.reshape(-1)
    i = int(np.argmax(flat))  # first occurrence in C order = lexicographic tie-break
    best = float(flat[i])
    if not np.isfinite(best):
        raise NoValidAction(f"no finite cell in the {kind} stack")
    k, row, col = np.unravel_index(i, maps.shape)
    return MotionCommand(kind, (int(row), int(col)), int(k)), best


def normalize(maps: np.ndarray) -> np.ndarray:
    """Min-max scale the finite cells into [0, 1]; invalid cells become 0."""
    finite = np.isfinite(maps)
    out = np.zeros(maps.shape, dtype=np.float64)
    if not finite.any():
        return out
    lo, hi = float(maps[finite].min()), float(maps[finite].max())
    if hi > lo:
        out[finite] = (maps[finite] - lo) / (hi - lo)
    else:
        out[finite] = 1.0
    return out
