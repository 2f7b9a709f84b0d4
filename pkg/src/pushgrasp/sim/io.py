"""Scene files: one JSON document per world, written with sorted keys so bytes are stable."""
from __future__ import annotations

import json
from pathlib import Path

from .world import SceneObject, WorldState

FORMAT = "pushgrasp-scene"
VERSION = 1


def world_to_dict(world: WorldState) -> dict:
    objects = []
    for o in world.objects:
        objects.append({
            "id": o.id,
            "shape": o.shape,
            "pose": [float(v) for v in o.pose],
            "body_height": float(o.body_height),
            "base_height": float(o.base_height),
            "half_extents": None if o.half_extents is None else [float(v) for v in o.half_extents],
            "radius": None if o.radius is None else float(o.radius),
            "color_id": int(o.color_id),
            "is_target_candidate": bool(o.is_target_candidate),
        })
    return {"format": FORMAT, "version": VERSION, "target_id": int(world.target_id),
            "seed": int(world.rng_seed), "objects": objects}


def world_from_dict(doc: dict) -> WorldState:
    if doc.get("format") != FORMAT:
        raise ValueError("not a scene document")
    if doc.get("version") != VERSION:
        raise ValueError(f"unsupported scene version {doc.get('version')}")
    objects = []
    for d in doc["objects"]:
        objects.append(SceneObject(
            id=int(d["id"]), shape=d["shape"], pose=tuple(float(v) for v in d["pose"]),
            body_height=float(d["body_height"]), base_height=float(d["base_height"]),
            half_extents=None if d["half_extents"] is None else tuple(float(v) for v in d["half_extents"]),
            radius=None if d["radius"] is None else float(d["radius"]),
            color_id=int(d["color_id"]), is_target_candidate=bool(d["is_target_candidate"])))
    return WorldState(objects=tuple(objects), target_id=int(doc["target_id"]),
                      rng_seed=int(doc["seed"]))


def dumps(world: WorldState) -> str:
    return json.dumps(world_to_dict(world), sort_keys=True, indent=1) + "\n"


def save_scene(world: WorldState, path) -> None:
    Path(path).write_text(dumps(world))


def load_scene(path) -> WorldState:
    return world_from_dict(json.loads(Path(path).read_text()))
