"""Push-only exploration for an invisible target.

The posterior over pushes is a product of three maps: a clutter prior from
height edges, the critic's target-agnostic push values, and a failure
likelihood that damps the neighbourhood of recent unsuccessful pushes.
"""
from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import critic, grid
from .grid import GRID_DIM, N_ROTATIONS
from .reward import PUSH_LEN_PX
from .sim.world import HeightmapState, MotionCommand

log = logging.getLogger(__name__)

VARIANTS = ("clutter-prior", "agnostic-push", "clutter-agnostic", "full-bayesian")
PRIOR_OFFSET = 25  # pixels, about twice the gripper width
PRIOR_BOX = 25
MEMORY = 3


@dataclass
class ExplorerConfig:
    variant: str = "full-bayesian"
    s_scale: float = 0.75
    gaussian_sigma: float = float(PUSH_LEN_PX)

    def __post_init__(self):
        self.variant = self.variant.replace("+", "-")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown explorer variant {self.variant!r}")
        if not 0.0 < self.s_scale < 1.0:
            raise ValueError("s_scale must lie in (0, 1)")


@dataclass
class FailureMemory:
    recent_failures: deque = field(default_factory=lambda: deque(maxlen=MEMORY))

    def __len__(self):
        return len(self.recent_failures)


def record_failure(mem: FailureMemory, cmd: MotionCommand, found: bool) -> FailureMemory:
    if found:
        mem.recent_failures.clear()
    else:
        mem.recent_failures.appendleft((tuple(cmd.pixel), int(cmd.orientation)))
    return mem


def clutter_prior(depth: np.ndarray) -> np.ndarray:
    """``(N, H, W)`` edge-approach probability per orientation."""
    out = np.empty((N_ROTATIONS, *np.shape(depth)))
    for k in range(N_ROTATIONS):
        out[k] = grid.box_filter(grid.shift_diff(depth, k, PRIOR_OFFSET), PRIOR_BOX)
    return out


def _gaussian(pixel, sigma: float, shape=(GRID_DIM, GRID_DIM)) -> np.ndarray:
    rows, cols = np.indices(shape, dtype=np.float64)
    d2 = (rows - pixel[0]) ** 2 + (cols - pixel[1]) ** 2
    return np.exp(-d2 / (2.0 * sigma * sigma))


def failure_likelihood_2d(mem: FailureMemory, cfg: ExplorerConfig) -> np.ndarray:
    out = np.ones((GRID_DIM, GRID_DIM))
    for pixel, _k in mem.recent_failures:
        g = _gaussian(pixel, cfg.gaussian_sigma)
        out *= 1.0 - (1.0 - cfg.s_scale) * g / g.max()
    return out


def failure_likelihood(mem: FailureMemory, cfg: ExplorerConfig) -> np.ndarray:
    """Same spatial map for every orientation, shape ``(N, H, W)``."""
    return np.broadcast_to(failure_likelihood_2d(mem, cfg), (N_ROTATIONS, GRID_DIM, GRID_DIM))


@dataclass
class ExplorationMaps:
    clutter: np.ndarray | None
    agnostic: np.ndarray | None
    failure: np.ndarray
    posterior: np.ndarray
    valid: np.ndarray


def posterior(model, s: HeightmapState, mem: FailureMemory, cfg: ExplorerConfig,
              channel_mask=critic.ALL_CHANNELS) -> ExplorationMaps:
    valid = np.stack([grid.validity_mask(k) for k in range(N_ROTATIONS)])
    cp = ap = None
    post = valid.astype(np.float64)
    if cfg.variant != "agnostic-push":
        cp = clutter_prior(s.depth)
        post = post * cp
    if cfg.variant != "clutter-prior":
        ap = critic.normalize(critic.agnostic_push_maps(model, s, channel_mask).maps)
        post = post * ap
    fp = failure_likelihood(mem, cfg)
    if cfg.variant == "full-bayesian":
        post = post * fp
    return ExplorationMaps(cp, ap, np.asarray(fp), post, valid)


def random_push(rng: np.random.Generator) -> MotionCommand:
    while True:
        k = int(rng.integers(N_ROTATIONS))
        r, c = (int(v) for v in rng.integers(GRID_DIM, size=2))
        if grid.validity_mask(k)[r, c]:
            return MotionCommand("push", (r, c), k)


def explore_step(model, s: HeightmapState, mem: FailureMemory, cfg: ExplorerConfig,
                 rng: np.random.Generator | None = None, channel_mask=critic.ALL_CHANNELS,
                 info: dict | None = None) -> MotionCommand:
    maps = posterior(model, s, mem, cfg, channel_mask)
    if not (maps.posterior > 0).any():
        rng = rng if rng is not None else np.random.default_rng(0)
        cmd = random_push(rng)
        log.info("flat exploration posterior; random push %s", cmd)
        if info is not None:
            info["fallback"] = True
        return cmd
    cmd, _ = critic.select(np.where(maps.valid, maps.posterior, -np.inf), "push")
    if info is not None:
        info["fallback"] = False
    return cmd
