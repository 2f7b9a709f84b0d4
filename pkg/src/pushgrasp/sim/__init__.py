"""Deterministic top-down push/grasp simulator."""
from .physics import (CLEAR_EPS, FINGER_W, GRIP_W, OPEN_W, PUSH_LEN, SimulationError, execute,
                      grasp, push, settle, support_violations)
from .io import load_scene, save_scene
from .scenes import (N_COORDINATION_CASES, N_EXPLORATION_CASES, N_FULL_CASES, check_invariants,
                     cluster_count, composite_case, pick_target, spawn_random, test_case)
from .world import (CONTACT_EPS, GROUND_EPS, SUPPORT_FRAC, VIS_THRESH, HeightmapState,
                    MotionCommand, MotionOutcome, SceneObject, WorldState, object_masks, observe,
                    pixel_to_world, render, world_to_pixel)
