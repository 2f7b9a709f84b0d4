"""Quasi-static push and grasp primitives.

Pushing is translation-only: the closed gripper sweeps a straight line and every
object it touches (directly, through a chain of contacts, or by resting on a
moving object) is translated along the push direction. Objects left with too
little support slide off their supporters and drop to the highest surface below.
"""
from __future__ import annotations

import dataclasses

import numpy as np

from .. import grid
from ..grid import GROUND_HEIGHT
from .world import (HEIGHT_TOL, SUPPORT_FRAC, MotionCommand, MotionOutcome, SceneObject,
                    Shape2D, WorldState, footprint_mask, half_width, in_bounds, in_grid, penetration,
                    pixel_to_world, render)

PUSH_LEN = 0.10
GRIP_W = 0.05
GRIP_T = 0.02  # closed gripper thickness along the push direction
FINGER_W = 0.02
FINGER_L = 0.02  # finger size perpendicular to the closing axis
OPEN_W = 0.07
CLEAR_EPS = 0.005
TOOL_OFFSET = 0.01  # tool descends this far below the observed surface
PUSH_STEP = 0.002
SLIDE_STEP = 0.001
MAX_SLIDE = 0.15


class SimulationError(RuntimeError):
    pass


def _check_pixel(cmd: MotionCommand) -> None:
    if not in_grid(cmd.pixel):
        raise SimulationError(f"pixel {cmd.pixel} outside the workspace")


def _vertical_overlap(a: SceneObject, b: SceneObject) -> bool:
    return min(a.top, b.top) - max(a.base_height, b.base_height) > HEIGHT_TOL


def _support_fractions(objects: list[SceneObject], masks: list[np.ndarray]) -> dict:
    """(rider, supporter) -> fraction of the rider's footprint resting on the supporter."""
    out = {}
    for j, oj in enumerate(objects):
        if oj.base_height <= HEIGHT_TOL:
            continue
        area = max(int(masks[j].sum()), 1)
        for i, oi in enumerate(objects):
            if i != j and abs(oi.top - oj.base_height) <= HEIGHT_TOL:
                shared = int((masks[i] & masks[j]).sum())
                if shared:
                    out[(j, i)] = shared / area
    return out


def push(world: WorldState, cmd: MotionCommand) -> tuple[WorldState, MotionOutcome]:
    if cmd.kind != "push":
        raise ValueError("push() needs a push command")
    _check_pixel(cmd)
    depth, _, _ = render(world)
    objects = list(world.objects)
    n = len(objects)
    if n == 0:
        return world, MotionOutcome(kind="push")

    z_tool = max(GROUND_HEIGHT, float(depth[cmd.pixel]) - TOOL_OFFSET)
    u = grid.direction(cmd.orientation)
    x0, y0 = pixel_to_world(cmd.pixel)
    tool = Shape2D("rectangle", x0, y0, grid.angle(cmd.orientation), GRIP_T / 2, GRIP_W / 2)
    shapes = [o.plan() for o in objects]
    masks = [footprint_mask(s) for s in shapes]
    riding = _support_fractions(objects, masks)
    contactable = [o.top > z_tool + HEIGHT_TOL for o in objects]
    engaged = {i for i in range(n) if contactable[i] and penetration(tool, shapes[i]) > 0}

    step = PUSH_STEP * u
    displacement = np.zeros((n, 2))
    for _ in range(int(round(PUSH_LEN / PUSH_STEP))):
        tool_next = tool.moved(*step)
        movers = set(engaged)
        for i in range(n):
            if i in movers or not contactable[i]:
                continue
            before = max(penetration(tool, shapes[i]), 0.0)
            if penetration(tool_next, shapes[i]) > before + 1e-9:
                movers.add(i)
        queue = list(movers)
        while queue:
            i = queue.pop()
            moved = shapes[i].moved(*step)
            for j in range(n):
                if j in movers:
                    continue
                hit = False
                if _vertical_overlap(objects[i], objects[j]):
                    before = max(penetration(shapes[i], shapes[j]), 0.0)
                    hit = penetration(moved, shapes[j]) > before + 1e-9
                if not hit and (j, i) in riding:
                    carried = sum(f for (r, s), f in riding.items() if r == j and s in movers)
                    hit = carried >= SUPPORT_FRAC
                if hit:
                    movers.add(j)
                    queue.append(j)
        if any(not in_bounds(shapes[i].moved(*step)) for i in movers):
            break  # something is pressed against a wall: the sweep stalls
        for i in movers:
            shapes[i] = shapes[i].moved(*step)
            displacement[i] += step
        tool = tool_next

    for i in range(n):
        if displacement[i].any():
            x, y, yaw = objects[i].pose
            objects[i] = dataclasses.replace(objects[i], pose=(shapes[i].x, shapes[i].y, yaw))
    objects = settle(objects)
    moved_ids = frozenset(o.id for o, old in zip(objects, world.objects) if o != old)
    new_world = dataclasses.replace(world, objects=tuple(objects))
    return new_world, MotionOutcome(kind="push", moved_object_ids=moved_ids,
                                    scene_changed=bool(moved_ids))


def grasp_axis(k: int) -> np.ndarray:
    """Closing axis of the fingers: perpendicular to the orientation direction."""
    a = grid.angle(k)
    return np.array([-np.sin(a), np.cos(a)])


def finger_footprints(cmd: MotionCommand) -> list[Shape2D]:
    x0, y0 = pixel_to_world(cmd.pixel)
    axis = grasp_axis(cmd.orientation)
    off = OPEN_W / 2 + FINGER_W / 2
    yaw = grid.angle(cmd.orientation)
    return [Shape2D("rectangle", x0 + sgn * off * axis[0], y0 + sgn * off * axis[1], yaw,
                    FINGER_L / 2, FINGER_W / 2) for sgn in (-1.0, 1.0)]


def grasp_blocker(world: WorldState, cmd: MotionCommand,
                  rendered: tuple | None = None) -> tuple[int | None, str | None]:
    """Object a grasp would lift, or the reason it fails."""
    depth, _, ids = rendered if rendered is not None else render(world)
    oid = int(ids[cmd.pixel])
    if oid < 0:
        return None, "empty"
    obj = world.get(oid)
    if 2 * half_width(obj.plan(), grasp_axis(cmd.orientation)) > OPEN_W + 1e-9:
        return None, "too wide"
    limit = obj.base_height + CLEAR_EPS
    for finger in finger_footprints(cmd):
        fm = footprint_mask(finger)
        if fm.any() and float(depth[fm].max()) > limit:
            return None, "fingers blocked"
    return oid, None


def grasp(world: WorldState, cmd: MotionCommand) -> tuple[WorldState, MotionOutcome]:
    if cmd.kind != "grasp":
        raise ValueError("grasp() needs a grasp command")
    _check_pixel(cmd)
    oid, _ = grasp_blocker(world, cmd)
    if oid is None:
        return world, MotionOutcome(kind="grasp")
    remaining = [o for o in world.objects if o.id != oid]
    settled = settle(remaining)
    moved = frozenset(o.id for o, old in zip(settled, remaining) if o != old)
    new_world = dataclasses.replace(world, objects=tuple(settled))
    return new_world, MotionOutcome(kind="grasp", moved_object_ids=moved | {oid},
                                    grasped_object_id=oid,
                                    target_grasped=oid == world.target_id,
                                    scene_changed=True)


def execute(world: WorldState, cmd: MotionCommand) -> tuple[WorldState, MotionOutcome]:
    return push(world, cmd) if cmd.kind == "push" else grasp(world, cmd)


# --- support ------------------------------------------------------------------

def surface_below(obj: SceneObject, fp: np.ndarray, others: list[SceneObject],
                  other_masks: list[np.ndarray]) -> np.ndarray:
    """Height of the highest lower object under each footprint pixel of ``obj``."""
    under = np.full(int(fp.sum()), GROUND_HEIGHT)
    for o, m in zip(others, other_masks):
        if o.id == obj.id or o.base_height >= obj.base_height - HEIGHT_TOL:
            continue
        shared = m[fp]
        if shared.any():
            under[shared] = np.maximum(under[shared], o.top)
    return under


def support_state(obj: SceneObject, others: list[SceneObject],
                  other_masks: list[np.ndarray] | None = None) -> tuple[float, float]:
    """Resting height under ``obj`` and the fraction of its footprint at that height."""
    if other_masks is None:
        other_masks = [footprint_mask(o.plan()) for o in others]
    fp = footprint_mask(obj.plan())
    if not fp.any():
        return GROUND_HEIGHT, 1.0
    under = surface_below(obj, fp, others, other_masks)
    rest = float(under.max())
    if rest <= GROUND_HEIGHT + HEIGHT_TOL:
        return GROUND_HEIGHT, 1.0
    return rest, float(np.mean(under >= rest - HEIGHT_TOL))


def _slide_direction(obj: SceneObject, others, other_masks) -> np.ndarray:
    fp = footprint_mask(obj.plan())
    under = surface_below(obj, fp, others, other_masks)
    rest = under.max()
    pts = np.argwhere(fp)
    held = pts[under >= rest - HEIGHT_TOL]
    v = pts.mean(axis=0) - held.mean(axis=0)  # (row, col)
    vec = np.array([v[1], v[0]], dtype=np.float64)
    norm = np.hypot(*vec)
    if norm < 1e-9:
        return np.array([1.0, 0.0])
    return vec / norm


def settle(objects: list[SceneObject] | tuple[SceneObject, ...]) -> list[SceneObject]:
    """Drop floating objects and slide partially supported ones off their supporters."""
    objs = list(objects)
    for _ in range(2 * len(objs) + 2):
        changed = False
        order = sorted(range(len(objs)), key=lambda i: (objs[i].base_height, objs[i].id))
        masks = [footprint_mask(o.plan()) for o in objs]
        for i in order:
            obj = objs[i]
            rest, frac = support_state(obj, objs, masks)
            if rest > GROUND_HEIGHT and frac < SUPPORT_FRAC:
                direction = _slide_direction(dataclasses.replace(obj, base_height=rest),
                                             objs, masks)
                probe = obj
                travelled = 0.0
                while travelled < MAX_SLIDE:
                    x, y, yaw = probe.pose
                    nxt = dataclasses.replace(probe, pose=(x + SLIDE_STEP * direction[0],
                                                           y + SLIDE_STEP * direction[1], yaw))
                    if not in_bounds(nxt.plan()):
                        break
                    probe = nxt
                    travelled += SLIDE_STEP
                    rest, frac = support_state(probe, objs, masks)
                    if rest <= GROUND_HEIGHT or frac >= SUPPORT_FRAC:
                        break
                obj = probe
                rest, frac = support_state(obj, objs, masks)
            if abs(rest - obj.base_height) > HEIGHT_TOL or obj is not objs[i]:
                objs[i] = dataclasses.replace(obj, base_height=rest)
                masks[i] = footprint_mask(objs[i].plan())
                changed = True
        if not changed:
            break
    return objs


def support_violations(world: WorldState) -> list[int]:
    """Ids of objects that float or rest on less than SUPPORT_FRAC of their footprint."""
    objs = list(world.objects)
    masks = [footprint_mask(o.plan()) for o in objs]
    bad = []
    for o in objs:
        rest, frac = support_state(o, objs, masks)
        if abs(rest - o.base_height) > HEIGHT_TOL or (rest > GROUND_HEIGHT and frac < SUPPORT_FRAC):
            bad.append(o.id)
    return bad
