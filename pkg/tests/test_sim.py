import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pushgrasp import grid
from pushgrasp.reward import border_stats
from pushgrasp.sim import (OPEN_W, PUSH_LEN, MotionCommand, SceneObject, SimulationError,
                           WorldState, check_invariants, cluster_count, execute, grasp,
                           load_scene, observe, push, save_scene, spawn_random, test_case,
                           world_to_pixel)
from pushgrasp.sim.scenes import N_COORDINATION_CASES, N_EXPLORATION_CASES, N_FULL_CASES
from pushgrasp.sim.world import (PIXEL_X, PIXEL_Y, footprint_mask, object_masks, penetration,
                                 render)

C = grid.WORKSPACE_SIZE / 2


def block(oid, x, y, side=0.03, h=0.03, base=0.0, yaw=0.0, target=False, color=1):
    return SceneObject(id=oid, shape="rectangle", pose=(x, y, yaw), body_height=h,
                       base_height=base, half_extents=(side / 2, side / 2), color_id=color,
                       is_target_candidate=target)


def world_of(*objs, target=0):
    return WorldState(objects=tuple(objs), target_id=target)


# --- observe --------------------------------------------------------------------

def test_observe_empty_world():
    s = observe(WorldState(objects=()))
    assert not s.depth.any() and not s.mask.any() and not s.color.any()


def test_observe_single_block_rasterization():
    w = world_of(block(0, C, C, side=0.04, target=True))
    s = observe(w)
    # oracle: pixel centres inside the axis-aligned square
    inside = (np.abs(PIXEL_X - C) <= 0.02 + 1e-9) & (np.abs(PIXEL_Y - C) <= 0.02 + 1e-9)
    assert np.array_equal(s.mask, inside)
    assert np.allclose(s.depth[inside], 0.03) and not s.depth[~inside].any()


def test_observe_buried_target_invisible():
    w = world_of(block(0, C, C, side=0.03, target=True),
                 block(1, C, C, side=0.05, h=0.02, base=0.03))
    assert not observe(w).target_visible


def test_visibility_threshold():
    # a sliver of fewer than 10 visible pixels counts as hidden
    w = world_of(block(0, C, C, side=0.03, target=True),
                 SceneObject(id=1, shape="rectangle", pose=(C + 0.002, C, 0), body_height=0.02,
                             base_height=0.03, half_extents=(0.015, 0.02)))
    visible = int((render(w)[2] == 0).sum())
    assert 0 < visible < 10
    assert not observe(w).target_visible


# --- push --------------------------------------------------------------------------

def test_push_through_empty_space():
    w = world_of(block(0, 0.1, 0.1, target=True))
    w2, out = push(w, MotionCommand("push", world_to_pixel(0.3, 0.3), 0))
    assert w2 == w and not out.scene_changed and not out.moved_object_ids


@pytest.mark.parametrize("k", [0, 3, 4, 9])
def test_push_isolated_block_moves_push_length(k):
    w = world_of(block(0, C, C, target=True))
    u = grid.direction(k)
    start = np.array([C, C]) - 0.03 * u
    w2, out = push(w, MotionCommand("push", world_to_pixel(*start), k))
    x, y, _ = w2.objects[0].pose
    moved = np.array([x - C, y - C])
    # analytic: displacement along u = push length minus the gap closed before contact
    sx, sy = (np.array(world_to_pixel(*start))[::-1] + 0.5) * grid.PIXEL_SIZE
    gap = (np.array([C, C]) - np.array([sx, sy])) @ u - 0.01 - 0.015 * (abs(u[0]) + abs(u[1]))
    assert out.moved_object_ids == {0}
    assert abs(moved @ np.array([-u[1], u[0]])) < 1e-9
    assert moved @ u == pytest.approx(PUSH_LEN - max(gap, 0.0), abs=0.0025)


def test_push_stops_at_wall():
    w = world_of(block(0, grid.WORKSPACE_SIZE - 0.03, C, target=True))
    w2, _ = push(w, MotionCommand("push", world_to_pixel(grid.WORKSPACE_SIZE - 0.06, C), 0))
    x = w2.objects[0].pose[0]
    assert x + 0.015 <= grid.WORKSPACE_SIZE + 1e-9
    assert x > grid.WORKSPACE_SIZE - 0.03


def test_push_outside_workspace():
    w = world_of(block(0, C, C, target=True))
    with pytest.raises(SimulationError):
        push(w, MotionCommand("push", (200, 5), 0))


def test_push_cascades_through_contacts():
    w = world_of(block(0, C, C, target=True), block(1, C + 0.031, C))
    w2, out = push(w, MotionCommand("push", world_to_pixel(C - 0.03, C), 0))
    assert out.moved_object_ids == {0, 1}


def test_push_uncovers_buried_target():
    # pyramid: a slab over three blocks with the target in the middle
    w = test_case("exploration", 0, 0)
    assert not observe(w).target_visible
    t = w.target
    slab = max(w.objects, key=lambda o: o.half_extents[0] * o.half_extents[1]
               if o.shape == "rectangle" and o.base_height > 0 else 0)
    # start on the slab away from its centre and push across the target
    d, _, ids = render(w)
    pix = np.argwhere(ids == slab.id)
    tx, ty, _ = t.pose
    start = None
    for k in range(16):
        u = grid.direction(k)
        cand = world_to_pixel(tx - 0.025 * u[0], ty - 0.025 * u[1])
        if ids[cand] == slab.id:
            start = (cand, k)
            break
    assert start is not None and len(pix)
    w2, _ = push(w, MotionCommand("push", *start))
    assert observe(w2).target_visible


def test_ground_push_moves_whole_pile():
    w = test_case("exploration", 0, 0)
    t = w.target
    x, y, _ = t.pose
    w2, out = push(w, MotionCommand("push", world_to_pixel(x - 0.1, y + 0.002), 0))
    assert not observe(w2).target_visible or out.scene_changed


def test_toppling_to_rest():
    # pushing the lower block out from under a rider leaves the rider on the ground
    w = world_of(block(0, C, C, target=True), block(1, C, C, side=0.03, h=0.02, base=0.03))
    w2, out = push(w, MotionCommand("push", world_to_pixel(C - 0.03, C), 0))
    assert out.scene_changed
    assert not check_invariants(w2)


# --- grasp ---------------------------------------------------------------------------

def test_grasp_empty_pixel():
    w = world_of(block(0, C, C, target=True))
    w2, out = grasp(w, MotionCommand("grasp", (3, 3), 0))
    assert w2 == w and out.grasped_object_id is None and not out.target_grasped


@pytest.mark.parametrize("k", range(0, 16, 3))
def test_grasp_isolated_cube(k):
    w = world_of(block(0, C, C, side=0.03, target=True))
    assert 0.03 < OPEN_W
    w2, out = grasp(w, MotionCommand("grasp", world_to_pixel(C, C), k))
    assert out.target_grasped and out.grasped_object_id == 0 and not w2.objects


def test_grasp_blocked_by_flush_neighbours():
    w = world_of(block(0, C, C, side=0.03, target=True), block(1, C, C - 0.03), block(2, C, C + 0.03))
    _, out = grasp(w, MotionCommand("grasp", world_to_pixel(C, C), 0))  # fingers along y
    assert not out.target_grasped
    _, out = grasp(w, MotionCommand("grasp", world_to_pixel(C, C), 4))  # fingers along x
    assert out.target_grasped


def test_grasp_too_wide():
    w = world_of(SceneObject(id=0, shape="rectangle", pose=(C, C, 0), body_height=0.03,
                             half_extents=(0.02, 0.04), is_target_candidate=True))
    _, out = grasp(w, MotionCommand("grasp", world_to_pixel(C, C), 0))  # closing along y: 0.08 wide
    assert not out.target_grasped
    _, out = grasp(w, MotionCommand("grasp", world_to_pixel(C, C), 4))
    assert out.target_grasped


def test_grasp_only_topmost():
    w = world_of(block(0, C, C, side=0.04, target=True), block(1, C, C, side=0.02, base=0.03))
    _, out = grasp(w, MotionCommand("grasp", world_to_pixel(C, C), 0))
    assert out.grasped_object_id == 1 and not out.target_grasped


# --- scenes ---------------------------------------------------------------------------

def test_spawn_single_visible():
    for seed in range(5):
        w = spawn_random(1, 0, seed)
        assert len(w.objects) == 1 and observe(w).target_visible


def test_spawn_deterministic():
    assert spawn_random(1, 3, 42) == spawn_random(1, 3, 42)


@pytest.mark.parametrize("seed", range(8))
def test_spawn_invariants(seed):
    w = spawn_random(2, 8, seed)
    assert check_invariants(w) == []
    assert sum(o.id == w.target_id and o.is_target_candidate for o in w.objects) == 1


def test_spawn_capacity():
    with pytest.raises(SimulationError):
        spawn_random(10, 300, 0)
    with pytest.raises(ValueError):
        spawn_random(-1, 0, 0)


@pytest.mark.parametrize("case", range(N_EXPLORATION_CASES))
def test_exploration_cases_hide_target(case):
    for seed in range(3):
        w = test_case("exploration", case, seed)
        assert not observe(w).target_visible
        assert check_invariants(w) == []


@pytest.mark.parametrize("case", range(N_COORDINATION_CASES))
def test_coordination_cases_enclose_target(case):
    for seed in range(3):
        w = test_case("coordination", case, seed)
        s = observe(w)
        assert s.target_visible
        assert border_stats(s).r_b >= 0.5
        assert check_invariants(w) == []


@pytest.mark.parametrize("case", range(N_FULL_CASES))
def test_full_cases_start_hidden(case):
    w = test_case("full", case, 1)
    assert not observe(w).target_visible and check_invariants(w) == []


def test_test_case_deterministic_and_checked():
    assert test_case("coordination", 3, 9) == test_case("coordination", 3, 9)
    assert test_case("coordination", 3, 9) != test_case("coordination", 3, 10)
    with pytest.raises(IndexError):
        test_case("exploration", 4, 0)
    with pytest.raises(IndexError):
        test_case("coordination", -1, 0)
    with pytest.raises(ValueError):
        test_case("nope", 0, 0)


def _components(world):
    # independent oracle: BFS over pairwise footprint proximity
    objs = list(world.objects)
    seen, count = set(), 0
    for i in range(len(objs)):
        if i in seen:
            continue
        count += 1
        stack = [i]
        seen.add(i)
        while stack:
            a = stack.pop()
            for b in range(len(objs)):
                if b not in seen and penetration(objs[a].plan(), objs[b].plan()) > -0.002:
                    seen.add(b)
                    stack.append(b)
    return count


def test_cluster_count():
    assert cluster_count(WorldState(objects=())) == 0
    w = world_of(block(0, 0.1, 0.1, target=True), block(1, 0.13, 0.1), block(2, 0.35, 0.35))
    assert cluster_count(w) == 2
    assert cluster_count(test_case("exploration", 0, 0)) == 1
    for case in range(N_EXPLORATION_CASES):
        w = test_case("exploration", case, 5)
        assert cluster_count(w) == _components(w)


# --- properties -----------------------------------------------------------------------

commands = st.builds(lambda kind, r, c, k: MotionCommand(kind, (r, c), k),
                     st.sampled_from(["push", "grasp"]), st.integers(20, 91), st.integers(20, 91),
                     st.integers(0, 15))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2 ** 31), cmd=commands)
def test_motion_determinism_and_conservation(seed, cmd):
    w = spawn_random(2, 4, seed)
    a, out_a = execute(w, cmd)
    b, out_b = execute(w, cmd)
    assert a == b and out_a == out_b
    ids_before = {o.id for o in w.objects}
    ids_after = {o.id for o in a.objects}
    if cmd.kind == "push":
        assert ids_after == ids_before
    else:
        assert ids_after <= ids_before and len(ids_before - ids_after) <= 1
        assert (out_a.grasped_object_id is None) == (ids_after == ids_before)
    assert out_a.target_grasped == (out_a.grasped_object_id == w.target_id)
    problems = check_invariants(a)
    if out_a.target_grasped:
        # the target left the scene, so only its id check may complain
        problems = [p for p in problems if not p.startswith("target id")]
    assert problems == []


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2 ** 31), cmd=commands)
def test_support_closure_after_motion(seed, cmd):
    from pushgrasp.sim import support_violations
    w = spawn_random(2, 6, seed)
    a, _ = execute(w, cmd)
    assert support_violations(a) == []


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2 ** 31), pick=st.integers(0, 100))
def test_removing_non_target_never_hides_more(seed, pick):
    w = spawn_random(2, 6, seed)
    others = [o for o in w.objects if o.id != w.target_id]
    victim = others[pick % len(others)]
    from pushgrasp.sim import settle
    rest = settle([o for o in w.objects if o.id != victim.id])
    w2 = dataclasses.replace(w, objects=tuple(rest))
    assert observe(w2).mask.sum() >= observe(w).mask.sum()


# --- scene files -----------------------------------------------------------------------

def test_scene_file_round_trip(tmp_path):
    w = test_case("coordination", 2, 3)
    p = tmp_path / "scene.json"
    save_scene(w, p)
    first = p.read_bytes()
    w2 = load_scene(p)
    assert w2 == w
    save_scene(w2, p)
    assert p.read_bytes() == first


def test_object_masks_threshold():
    w = test_case("coordination", 0, 0)
    masks = object_masks(w)
    assert all(m.sum() >= 10 for m in masks.values())
    assert w.target_id in masks


def test_footprint_disc():
    from pushgrasp.sim.world import Shape2D
    m = footprint_mask(Shape2D("disc", C, C, 0.0, 0.02, 0.02))
    expected = (PIXEL_X - C) ** 2 + (PIXEL_Y - C) ** 2 <= 0.02 ** 2
    assert np.array_equal(m, expected)
