"""Scene objects, plan-view geometry and the top-down observation model."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from ..grid import GRID_DIM, GROUND_HEIGHT, N_ROTATIONS, PIXEL_SIZE, WORKSPACE_SIZE

CONTACT_EPS = 0.002
SUPPORT_FRAC = 0.5
VIS_THRESH = 10  # pixels
GROUND_EPS = 0.005
HEIGHT_TOL = 1e-6

# color id -> RGB; 0 is the bare workspace
PALETTE = np.array([
    [0, 0, 0],
    [184, 179, 168],
    [255, 0, 0],
    [255, 127, 0],
    [255, 255, 0],
    [0, 200, 0],
    [0, 0, 255],
    [75, 0, 130],
    [148, 0, 211],
], dtype=np.uint8)
N_COLORS = len(PALETTE)

_rows, _cols = np.indices((GRID_DIM, GRID_DIM), dtype=np.float64)
PIXEL_X = (_cols + 0.5) * PIXEL_SIZE
PIXEL_Y = (_rows + 0.5) * PIXEL_SIZE
del _rows, _cols


class Shape2D(NamedTuple):
    """Plan-view footprint. Discs use ``hx == hy == radius``."""

    kind: str
    x: float
    y: float
    yaw: float
    hx: float
    hy: float

    def moved(self, dx: float, dy: float) -> "Shape2D":
        return self._replace(x=self.x + dx, y=self.y + dy)


@dataclass(frozen=True)
class SceneObject:
    id: int
    shape: str  # "rectangle" | "disc"
    pose: tuple[float, float, float]
    body_height: float
    base_height: float = 0.0
    half_extents: tuple[float, float] | None = None
    radius: float | None = None
    color_id: int = 1
    is_target_candidate: bool = False

    def __post_init__(self):
        if self.shape == "rectangle":
            if self.half_extents is None or min(self.half_extents) <= 0:
                raise ValueError("rectangle needs positive half_extents")
        elif self.shape == "disc":
            if self.radius is None or self.radius <= 0:
                raise ValueError("disc needs a positive radius")
        else:
            raise ValueError(f"unknown shape {self.shape!r}")
        if self.body_height <= 0 or self.base_height < 0:
            raise ValueError("heights must satisfy body_height > 0, base_height >= 0")

    @property
    def top(self) -> float:
        return self.base_height + self.body_height

    def plan(self) -> Shape2D:
        x, y, yaw = self.pose
        if self.shape == "disc":
            return Shape2D("disc", x, y, 0.0, self.radius, self.radius)
        return Shape2D("rectangle", x, y, yaw, self.half_extents[0], self.half_extents[1])


@dataclass(frozen=True)
class WorldState:
    objects: tuple[SceneObject, ...]
    target_id: int = -1
    rng_seed: int = 0

    def get(self, object_id: int) -> SceneObject:
        for o in self.objects:
            if o.id == object_id:
                return o
        raise KeyError(object_id)

    @property
    def target(self) -> SceneObject | None:
        for o in self.objects:
            if o.id == self.target_id:
                return o
        return None


@dataclass(frozen=True)
class MotionCommand:
    kind: str  # "push" | "grasp"
    pixel: tuple[int, int]
    orientation: int

    def __post_init__(self):
        if self.kind not in ("push", "grasp"):
            raise ValueError(f"unknown primitive {self.kind!r}")
        if not 0 <= self.orientation < N_ROTATIONS:
            raise ValueError(f"orientation {self.orientation} out of range")
        object.__setattr__(self, "pixel", (int(self.pixel[0]), int(self.pixel[1])))
        object.__setattr__(self, "orientation", int(self.orientation))


@dataclass(frozen=True)
class MotionOutcome:
    kind: str
    moved_object_ids: frozenset = frozenset()
    grasped_object_id: int | None = None
    target_grasped: bool = False
    scene_changed: bool = False


@dataclass
class HeightmapState:
    """Observation ``(color, depth, mask)`` on the workspace grid."""

    color: np.ndarray  # uint8 color ids
    depth: np.ndarray  # float32 meters
    mask: np.ndarray  # bool target mask
    extras: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def target_visible(self) -> bool:
        return bool(self.mask.any())


# --- plan-view geometry ----------------------------------------------------

def _axes(s: Shape2D) -> tuple[np.ndarray, np.ndarray]:
    c, sn = np.cos(s.yaw), np.sin(s.yaw)
    return np.array([c, sn]), np.array([-sn, c])


def half_width(s: Shape2D, axis: np.ndarray) -> float:
    """Half of the footprint's extent projected on the unit vector ``axis``."""
    if s.kind == "disc":
        return s.hx
    ax, ay = _axes(s)
    return abs(s.hx * float(ax @ axis)) + abs(s.hy * float(ay @ axis))


def _disc_rect(d: Shape2D, r: Shape2D) -> float:
    c, sn = np.cos(r.yaw), np.sin(r.yaw)
    dx, dy = d.x - r.x, d.y - r.y
    lx, ly = c * dx + sn * dy, -sn * dx + c * dy
    ox, oy = abs(lx) - r.hx, abs(ly) - r.hy
    if ox > 0 or oy > 0:
        return d.hx - float(np.hypot(max(ox, 0.0), max(oy, 0.0)))
    return d.hx + min(-ox, -oy)


def penetration(a: Shape2D, b: Shape2D) -> float:
    """Overlap depth of two footprints; negative values are (approximate) gaps."""
    if a.kind == "disc" and b.kind == "disc":
        return a.hx + b.hx - float(np.hypot(a.x - b.x, a.y - b.y))
    if a.kind == "disc":
        return _disc_rect(a, b)
    if b.kind == "disc":
        return _disc_rect(b, a)
    centre = np.array([b.x - a.x, b.y - a.y])
    best = np.inf
    for axis in (*_axes(a), *_axes(b)):
        overlap = half_width(a, axis) + half_width(b, axis) - abs(float(centre @ axis))
        best = min(best, overlap)
    return float(best)


def in_bounds(s: Shape2D, tol: float = 1e-9) -> bool:
    ex = half_width(s, np.array([1.0, 0.0]))
    ey = half_width(s, np.array([0.0, 1.0]))
    return (s.x - ex >= -tol and s.x + ex <= WORKSPACE_SIZE + tol
            and s.y - ey >= -tol and s.y + ey <= WORKSPACE_SIZE + tol)


def footprint_mask(s: Shape2D) -> np.ndarray:
    """Pixels whose centres lie inside the footprint."""
    if s.kind == "disc":
        return (PIXEL_X - s.x) ** 2 + (PIXEL_Y - s.y) ** 2 <= s.hx ** 2 + 1e-12
    c, sn = np.cos(s.yaw), np.sin(s.yaw)
    dx, dy = PIXEL_X - s.x, PIXEL_Y - s.y
    lx = c * dx + sn * dy
    ly = -sn * dx + c * dy
    return (np.abs(lx) <= s.hx + 1e-9) & (np.abs(ly) <= s.hy + 1e-9)


def pixel_to_world(pixel: tuple[int, int]) -> tuple[float, float]:
    row, col = pixel
    return (col + 0.5) * PIXEL_SIZE, (row + 0.5) * PIXEL_SIZE


def world_to_pixel(x: float, y: float) -> tuple[int, int]:
    col = int(np.floor(x / PIXEL_SIZE))
    row = int(np.floor(y / PIXEL_SIZE))
    return min(max(row, 0), GRID_DIM - 1), min(max(col, 0), GRID_DIM - 1)


def in_grid(pixel: tuple[int, int]) -> bool:
    row, col = pixel
    return 0 <= row < GRID_DIM and 0 <= col < GRID_DIM


# --- observation ------------------------------------------------------------

def render(world: WorldState) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Top surface height, colour id and object id (-1 = ground) per pixel."""
    depth = np.full((GRID_DIM, GRID_DIM), GROUND_HEIGHT, dtype=np.float64)
    color = np.zeros((GRID_DIM, GRID_DIM), dtype=np.uint8)
    ids = np.full((GRID_DIM, GRID_DIM), -1, dtype=np.int64)
    for o in sorted(world.objects, key=lambda o: (o.top, o.id)):
        fp = footprint_mask(o.plan())
        paint = fp & (o.top >= depth)
        depth[paint] = o.top
        color[paint] = o.color_id
        ids[paint] = o.id
    return depth, color, ids


def object_masks(world: WorldState, ids: np.ndarray | None = None) -> dict[int, np.ndarray]:
    """Oracle segmentation: visible pixels of every object with at least VIS_THRESH of them."""
    if ids is None:
        ids = render(world)[2]
    out = {}
    for o in world.objects:
        m = ids == o.id
        if int(m.sum()) >= VIS_THRESH:
            out[o.id] = m
    return out


def observe(world: WorldState) -> HeightmapState:
    depth, color, ids = render(world)
    mask = ids == world.target_id if world.target_id >= 0 else np.zeros_like(ids, dtype=bool)
    if int(mask.sum()) < VIS_THRESH:
        mask = np.zeros_like(mask)
    return HeightmapState(color=color, depth=depth.astype(np.float32), mask=mask,
                          extras={"ids": ids})


def target_visible(world: WorldState) -> bool:
    return observe(world).target_visible
