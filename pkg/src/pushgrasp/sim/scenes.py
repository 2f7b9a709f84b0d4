"""Random scene generation, the fixed evaluation arrangements, and cluster counting."""
from __future__ import annotations

import dataclasses

import numpy as np

from ..grid import WORKSPACE_SIZE
from .physics import SimulationError, settle, support_state, support_violations
from .world import (CONTACT_EPS, HEIGHT_TOL, SceneObject, WorldState, footprint_mask, in_bounds,
                    observe, penetration)

N_EXPLORATION_CASES = 4
N_COORDINATION_CASES = 8
N_FULL_CASES = 4
MAX_ATTEMPTS = 50
CENTRE = WORKSPACE_SIZE / 2
DEFAULT_DROP_HALF = 0.11  # half side of the central drop square, meters


def _random_object(rng: np.random.Generator, oid: int, candidate: bool) -> SceneObject:
    height = float(rng.uniform(0.025, 0.05))
    color = int(rng.integers(2, 9)) if candidate else 1
    if rng.random() < 0.25:
        return SceneObject(id=oid, shape="disc", radius=float(rng.uniform(0.015, 0.022)),
                           pose=(0.0, 0.0, 0.0), body_height=height, color_id=color,
                           is_target_candidate=candidate)
    short = float(rng.uniform(0.015, 0.0225))
    long = float(rng.uniform(short, 0.03))
    return SceneObject(id=oid, shape="rectangle", half_extents=(long, short),
                       pose=(0.0, 0.0, 0.0), body_height=height, color_id=color,
                       is_target_candidate=candidate)


def _overlapping(obj: SceneObject, placed: list[SceneObject]) -> list[SceneObject]:
    s = obj.plan()
    return [o for o in placed if penetration(s, o.plan()) > CONTACT_EPS]


def _place_touching(obj: SceneObject, placed: list[SceneObject],
                    rng: np.random.Generator) -> SceneObject | None:
    """Slide ``obj`` out of the objects it overlaps until it rests on the ground beside them."""
    x, y, yaw = obj.pose
    hits = _overlapping(obj, placed)
    ref = np.mean([[o.pose[0], o.pose[1]] for o in hits], axis=0) if hits else np.array([x, y])
    first = np.arctan2(y - ref[1], x - ref[0]) if hits else rng.uniform(0, 2 * np.pi)
    for turn in range(8):
        a = first + turn * np.pi / 4
        d = np.array([np.cos(a), np.sin(a)])
        probe = obj
        for _ in range(300):
            if not in_bounds(probe.plan()):
                break
            if not _overlapping(probe, placed):
                return dataclasses.replace(probe, base_height=0.0)
            px, py, _ = probe.pose
            probe = dataclasses.replace(probe, pose=(px + 0.001 * d[0], py + 0.001 * d[1], yaw))
    return None


def spawn_random(n_targets: int, m_basics: int, seed: int,
                 drop_half: float = DEFAULT_DROP_HALF) -> WorldState:
    """Drop ``n_targets`` candidates and ``m_basics`` plain objects at random poses.

    An object landing on others is stacked if the surface under it is flat,
    otherwise its pose is resampled; after MAX_ATTEMPTS it is slid out beside
    the objects it hits.
    """
    if n_targets < 0 or m_basics < 0:
        raise ValueError("object counts must be >= 0")
    rng = np.random.default_rng(seed)
    kinds = [True] * n_targets + [False] * m_basics
    rng.shuffle(kinds)
    placed: list[SceneObject] = []
    lo, hi = CENTRE - drop_half, CENTRE + drop_half
    for oid, candidate in enumerate(kinds):
        proto = _random_object(rng, oid, candidate)
        chosen = None
        obj = proto
        for _ in range(MAX_ATTEMPTS):
            pose = (float(rng.uniform(lo, hi)), float(rng.uniform(lo, hi)),
                    float(rng.uniform(0, np.pi)))
            obj = dataclasses.replace(proto, pose=pose)
            if not in_bounds(obj.plan()):
                continue
            if not _overlapping(obj, placed):
                chosen = obj
                break
            rest, frac = support_state(dataclasses.replace(obj, base_height=1.0), placed)
            if rest > 0 and frac >= 1.0 - 1e-9:
                chosen = dataclasses.replace(obj, base_height=rest)
                break
        if chosen is None:
            chosen = _place_touching(obj, placed, rng)
            if chosen is None:
                raise SimulationError("workspace capacity exceeded")
        placed.append(chosen)
    placed = settle(placed)
    world = WorldState(objects=tuple(placed), target_id=-1, rng_seed=int(seed))
    candidates = [o.id for o in placed if o.is_target_candidate]
    if not candidates:
        return world
    return dataclasses.replace(world, target_id=pick_target(world, rng))


def pick_target(world: WorldState, rng: np.random.Generator) -> int:
    """A random visible candidate, or any candidate if none is visible (-1 if none left)."""
    candidates = [o.id for o in world.objects if o.is_target_candidate]
    if not candidates:
        return -1
    visible = [c for c in candidates
               if observe(dataclasses.replace(world, target_id=c)).target_visible]
    pool = visible or candidates
    return int(pool[int(rng.integers(len(pool)))])


# --- fixed arrangements -----------------------------------------------------------

S = 0.04  # standard block side
H = 0.03  # standard block height


class _Layout:
    """Collects objects in arrangement coordinates (metres relative to its centre)."""

    def __init__(self):
        self.items: list[dict] = []

    def block(self, x, y, w=S, d=S, h=H, base=0.0, yaw=0.0, color=1, target=False):
        self.items.append(dict(shape="rectangle", x=x, y=y, yaw=yaw, half=(w / 2, d / 2),
                               h=h, base=base, color=color, target=target))

    def disc(self, x, y, r, h=H, base=0.0, color=1, target=False):
        self.items.append(dict(shape="disc", x=x, y=y, yaw=0.0, r=r, h=h, base=base,
                               color=color, target=target))

    def build(self, cx, cy, rot, start_id=0):
        c, s = np.cos(rot), np.sin(rot)
        out = []
        for i, it in enumerate(self.items):
            x = cx + c * it["x"] - s * it["y"]
            y = cy + s * it["x"] + c * it["y"]
            common = dict(id=start_id + i, pose=(float(x), float(y), float(it["yaw"] + rot)),
                          body_height=it["h"], base_height=it["base"], color_id=it["color"],
                          is_target_candidate=it["target"])
            if it["shape"] == "disc":
                out.append(SceneObject(shape="disc", radius=it["r"], **common))
            else:
                out.append(SceneObject(shape="rectangle", half_extents=it["half"], **common))
        return out


TARGET_COLOR = 5


def _pyramid(L: _Layout, x=0.0, y=0.0):
    L.block(x - S, y)
    L.block(x, y, color=TARGET_COLOR, target=True)
    L.block(x + S, y)
    L.block(x, y, w=2 * S, d=1.5 * S, base=H, color=3)
    L.block(x, y, base=2 * H, color=6)


def _cross(L: _Layout, x=0.0, y=0.0):
    L.block(x, y, color=TARGET_COLOR, target=True)
    L.block(x, y, base=H, color=4)
    for dx, dy in ((S, 0), (-S, 0), (0, S), (0, -S)):
        L.block(x + dx, y + dy, h=2 * H, color=2)


def _mound(L: _Layout, x=0.0, y=0.0):
    """Target under a lid flanked by two tall pillars."""
    L.block(x, y, color=TARGET_COLOR, target=True)
    L.block(x, y, w=1.2 * S, d=1.2 * S, base=H, h=0.02, color=7)
    L.block(x - 1.1 * S, y, d=1.6 * S, h=2.5 * H, color=2)
    L.block(x + 1.1 * S, y, d=1.6 * S, h=2.5 * H, color=2)


def _decoy_pair(L: _Layout, x, y):
    L.block(x - S / 2, y, color=6)
    L.block(x + S / 2, y, color=3)
    L.block(x, y, w=S, base=H, color=8)


def _decoy_single(L: _Layout, x, y, h=H, color=4):
    L.block(x, y, h=h, color=color)


def _exploration_layout(index: int) -> _Layout:
    L = _Layout()
    if index == 0:
        _pyramid(L)
    elif index == 1:
        _cross(L)
        _decoy_pair(L, 0.0, 0.13)
    elif index == 2:
        _pyramid(L, -0.05, -0.06)
        _decoy_pair(L, 0.08, 0.07)
        _decoy_single(L, -0.09, 0.10, h=2 * H)
    else:
        _mound(L, 0.04, 0.0)
        _decoy_pair(L, -0.11, -0.06)
    return L


def _coordination_layout(index: int) -> _Layout:
    L = _Layout()
    t = dict(color=TARGET_COLOR, target=True)
    if index == 0:  # U-shape, open below
        L.block(0, 0, **t)
        L.block(-S, 0)
        L.block(S, 0)
        L.block(0, -S, w=3 * S)
    elif index == 1:  # boxed in on four sides
        L.block(0, 0, **t)
        L.block(-S, 0, d=3 * S)
        L.block(S, 0, d=3 * S)
        L.block(0, -S)
        L.block(0, S)
    elif index == 2:  # long bars on both flanks and one end
        L.block(0, 0, w=0.03, **t)
        L.block(-0.035, 0, w=0.03, d=2.5 * S, color=2)
        L.block(0.035, 0, w=0.03, d=2.5 * S, color=2)
        L.block(0, -S, w=0.04, d=S)
    elif index == 3:  # cylinder in a ring of blocks
        L.disc(0, 0, 0.02, **t)
        for dx, dy in ((S, 0), (-S, 0), (0, S)):
            L.block(dx, dy, color=6)
    elif index == 4:  # centre of a 3x3 grid
        for i in (-1, 0, 1):
            for j in (-1, 0, 1):
                if i == 0 and j == 0:
                    L.block(0, 0, **t)
                elif (i, j) != (0, 1):
                    L.block(i * S, j * S, color=1 + (i + j) % 2)
    elif index == 5:  # taller neighbours
        L.block(0, 0, **t)
        L.block(-S, 0, h=2 * H, color=3)
        L.block(S, 0, h=2 * H, color=3)
        L.block(0, S, h=1.5 * H, color=4)
    elif index == 6:  # diagonal target with bars flush on three faces
        q = np.pi / 4
        L.block(0, 0, w=0.035, d=0.035, yaw=q, **t)
        for a, w in ((q, 0.06), (q + np.pi / 2, 0.035), (q + np.pi, 0.06)):
            r = 0.0355
            L.block(r * np.cos(a), r * np.sin(a), w=0.036, d=w, yaw=a, color=2)
    else:  # long target between a wall of blocks and a bar
        L.block(0, 0, w=1.5 * S, d=0.03, **t)
        L.block(0, 0.035, w=2.5 * S, d=S, color=7)
        L.block(0, -0.035, w=2.5 * S, d=S, color=7)
        L.block(-1.25 * S, 0, w=S, d=0.03)
    return L


def _jitter(rng: np.random.Generator, offset: float, rot: float) -> tuple[float, float, float]:
    return (CENTRE + float(rng.uniform(-offset, offset)),
            CENTRE + float(rng.uniform(-offset, offset)),
            float(rng.uniform(-rot, rot)))


def _finish(objects: list[SceneObject], seed: int) -> WorldState:
    target = next(o.id for o in objects if o.is_target_candidate)
    objects = settle(objects)
    return WorldState(objects=tuple(objects), target_id=target, rng_seed=int(seed))


def test_case(suite: str, index: int, seed: int) -> WorldState:
    """One of the fixed evaluation arrangements, jittered by ``seed``.

    Exploration arrangements bury the target; coordination arrangements enclose
    a visible target on three or more sides.
    """
    if suite not in ("exploration", "coordination", "full"):
        raise ValueError(f"unknown suite {suite!r}")
    if index < 0:
        raise IndexError(f"{suite} case {index} out of range")
    rng = np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, index, 17])
    if suite == "exploration":
        if not 0 <= index < N_EXPLORATION_CASES:
            raise IndexError(f"exploration case {index} out of range")
        layout = _exploration_layout(index)
        cx, cy, rot = _jitter(rng, 0.02, np.pi / 8)
    elif suite == "coordination":
        if not 0 <= index < N_COORDINATION_CASES:
            raise IndexError(f"coordination case {index} out of range")
        layout = _coordination_layout(index)
        cx, cy, rot = _jitter(rng, 0.03, np.pi)
    elif suite == "full":
        if not 0 <= index < N_FULL_CASES:
            raise IndexError(f"full case {index} out of range")
        return composite_case(index, seed)
    else:
        raise ValueError(f"unknown suite {suite!r}")
    return _finish(layout.build(cx, cy, rot), seed)


test_case.__test__ = False  # keep pytest from collecting it


def composite_case(index: int, seed: int) -> WorldState:
    """Target buried under a lid inside an enclosure: exploration then coordination."""
    if not 0 <= index < N_FULL_CASES:
        raise IndexError(f"full case {index} out of range")
    rng = np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, index, 29])
    L = _coordination_layout([0, 1, 5, 6][index])
    target = next(it for it in L.items if it["target"])
    L.block(0.0, 0.0, w=S, d=S, base=target["h"], h=0.02, color=4)
    if index % 2 == 1:
        _decoy_pair(L, 0.0, 0.14)
    cx, cy, rot = _jitter(rng, 0.02, np.pi)
    return _finish(L.build(cx, cy, rot), seed)


def cluster_count(world: WorldState) -> int:
    """Connected components of the plan-view contact graph."""
    objs = list(world.objects)
    parent = list(range(len(objs)))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(len(objs)):
        for j in range(i + 1, len(objs)):
            if penetration(objs[i].plan(), objs[j].plan()) > -CONTACT_EPS:
                parent[find(i)] = find(j)
    return len({find(i) for i in range(len(objs))})


def check_invariants(world: WorldState) -> list[str]:
    """Human-readable violations of the world invariants (empty when valid)."""
    problems = []
    ids = [o.id for o in world.objects]
    if len(set(ids)) != len(ids):
        problems.append("duplicate object ids")
    if world.target_id >= 0:
        tgt = [o for o in world.objects if o.id == world.target_id]
        if len(tgt) != 1 or not tgt[0].is_target_candidate:
            problems.append("target id does not name exactly one candidate")
    for o in world.objects:
        if not in_bounds(o.plan(), tol=1e-6):
            problems.append(f"object {o.id} outside the workspace")
    for oid in support_violations(world):
        problems.append(f"object {oid} unsupported")
    objs = list(world.objects)
    for i, a in enumerate(objs):
        for b in objs[i + 1:]:
            vertical = min(a.top, b.top) - max(a.base_height, b.base_height)
            if vertical > HEIGHT_TOL and penetration(a.plan(), b.plan()) > CONTACT_EPS:
                problems.append(f"objects {a.id} and {b.id} interpenetrate")
    return problems


def visible_pixels(world: WorldState) -> int:
    return int(observe(world).mask.sum())


__all__ = [
    "spawn_random", "pick_target", "test_case", "composite_case", "cluster_count",
    "check_invariants", "visible_pixels",
]
