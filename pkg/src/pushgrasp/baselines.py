"""Comparison policies for the coordination subtask."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import critic, grid
from .coordinator import CoordinationFeatures, features
from .grid import GRID_DIM, N_ROTATIONS
from .reward import border_stats
from .sim.world import HeightmapState, MotionCommand


@dataclass
class HeuristicConfig:
    epsilon_0: float = 0.5
    alpha: float = 1e-2
    t_low: float = 0.3
    t_high: float = 0.7
    push_cap: int = 3
    # grasp Q is mapped to a quality in [0, 1] with these fixed bounds
    quality_lo: float = 0.5
    quality_hi: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.epsilon_0 <= 1.0:
            raise ValueError("epsilon_0 must lie in [0, 1]")
        if self.t_low > self.t_high:
            raise ValueError("t_low must not exceed t_high")


# --- RAND -------------------------------------------------------------------

def rand_step(s: HeightmapState, rng: np.random.Generator) -> MotionCommand:
    cells = np.argwhere(np.asarray(s.mask, dtype=bool))
    if len(cells) == 0:
        raise ValueError("rand_step needs a nonempty target mask")
    kind = "push" if rng.random() < 0.5 else "grasp"
    k = int(rng.integers(N_ROTATIONS))
    row, col = cells[int(rng.integers(len(cells)))]
    return MotionCommand(kind, (int(row), int(col)), k)


# --- Border-Heuristic ---------------------------------------------------------

def push_rate(feats: CoordinationFeatures, cfg: HeuristicConfig = HeuristicConfig()) -> float:
    denom_occ = feats.r_b + feats.n_b
    if denom_occ == 0:
        return cfg.epsilon_0
    value = cfg.epsilon_0 - cfg.alpha * (feats.q_g - feats.q_p) / ((feats.c_g + 1) * denom_occ)
    return min(1.0, max(0.0, value))


def heuristic_decision(feats: CoordinationFeatures, cfg: HeuristicConfig,
                       rng: np.random.Generator) -> str:
    """Push/grasp choice of the border heuristic (two uniform draws at most)."""
    eps = push_rate(feats, cfg)
    y = "push" if rng.random() < eps else "grasp"
    if y == "grasp" and feats.c_g != 0:
        if feats.c_g < 2:
            if rng.random() < feats.r_b:
                y = "push"
        else:
            y = "push"
    return y


def heuristic_push_probability(feats: CoordinationFeatures, cfg: HeuristicConfig) -> float:
    """Closed-form probability that ``heuristic_decision`` returns push."""
    eps = push_rate(feats, cfg)
    if feats.c_g == 0:
        return eps
    if feats.c_g < 2:
        return eps + (1.0 - eps) * feats.r_b
    return 1.0


def border_heuristic_step(model, s: HeightmapState, c_g: int, cfg: HeuristicConfig,
                          rng: np.random.Generator, channel_mask=critic.ALL_CHANNELS) -> MotionCommand:
    if not s.target_visible:
        raise ValueError("border heuristic needs a visible target")
    push_q, grasp_q = critic.predict(model, s, channel_mask)
    feats = features(push_q, grasp_q, border_stats(s), c_g)
    y = heuristic_decision(feats, cfg, rng)
    cmd, _ = critic.select(grasp_q if y == "grasp" else push_q)
    return cmd


# --- mask-filtered target-agnostic critic ---------------------------------------

def mask_filtered_maps(model, s: HeightmapState, channel_mask=critic.ALL_CHANNELS):
    mask = np.asarray(s.mask, dtype=bool)
    ones = np.ones((GRID_DIM, GRID_DIM), dtype=bool)
    push_q, grasp_q = critic.predict(model, s, channel_mask, mask=ones)
    push_keep = grid.grow(mask, grid.BORDER_RADIUS)
    push = np.where(push_keep[None], push_q.maps, -np.inf)
    grasp = np.where(mask[None], grasp_q.maps, -np.inf)
    return push, grasp


def mask_filtered_step(model, s: HeightmapState, channel_mask=critic.ALL_CHANNELS) -> MotionCommand:
    push, grasp = mask_filtered_maps(model, s, channel_mask)
    have_push = np.isfinite(push).any()
    have_grasp = np.isfinite(grasp).any()
    if not (have_push or have_grasp):
        raise critic.NoValidAction("both filtered stacks are empty")
    best_push = float(push.max()) if have_push else -np.inf
    best_grasp = float(grasp.max()) if have_grasp else -np.inf
    if best_grasp >= best_push:
        return critic.select(grasp, "grasp")[0]
    return critic.select(push, "push")[0]


# --- Mechanical-Search action criterion ----------------------------------------

@dataclass
class MechSearchState:
    """Per-episode push counts keyed by object id."""

    pushes: dict = field(default_factory=dict)


@dataclass(frozen=True)
class MechAction:
    kind: str  # "grasp" | "push" | "failure"
    object_id: int | None = None
    command: MotionCommand | None = None
    quality: float | None = None


def action_criterion(quality: float, is_target: bool, pushing_enabled: bool,
                     push_available: bool, times_pushed: int, cfg: HeuristicConfig) -> str:
    """Grasp, push or fail for one object of the priority list."""
    t_grasp = cfg.t_low if (is_target or not pushing_enabled) else cfg.t_high
    if quality > t_grasp:
        return "grasp"
    if pushing_enabled and push_available and times_pushed < cfg.push_cap:
        return "push"
    return "failure"


def grasp_quality(grasp_maps: np.ndarray, obj_mask: np.ndarray, cfg: HeuristicConfig) -> float:
    inside = np.where(obj_mask[None], grasp_maps, -np.inf)
    best = float(inside.max())
    if not np.isfinite(best):
        return 0.0
    return float(np.clip((best - cfg.quality_lo) / (cfg.quality_hi - cfg.quality_lo), 0.0, 1.0))


def mech_search_step(object_masks: dict[int, np.ndarray], target_flags: dict[int, bool],
                     cfg: HeuristicConfig, state: MechSearchState, proposals,
                     pushing_enabled: bool = True) -> MechAction:
    """Walk the objects largest-first and return the first non-failure action.

    ``proposals(mask)`` returns ``(push_stack, grasp_stack)`` for an object mask.
    """
    order = sorted(object_masks, key=lambda oid: (-int(object_masks[oid].sum()), oid))
    for oid in order:
        m = object_masks[oid]
        push_q, grasp_q = proposals(m)
        quality = grasp_quality(grasp_q.maps, m, cfg)
        grasp_maps = np.where(m[None], grasp_q.maps, -np.inf)
        push_ok = bool(np.isfinite(push_q.maps).any())
        choice = action_criterion(quality, bool(target_flags.get(oid, False)), pushing_enabled,
                                  push_ok, state.pushes.get(oid, 0), cfg)
        if choice == "grasp":
            return MechAction("grasp", oid, critic.select(grasp_maps, "grasp")[0], quality)
        if choice == "push":
            state.pushes[oid] = state.pushes.get(oid, 0) + 1
            return MechAction("push", oid, critic.select(push_q)[0], quality)
    return MechAction("failure")
