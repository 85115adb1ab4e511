"""Scene layout sampling: table, resting objects, held object and camera.

Every random quantity comes from ``numpy.random.default_rng([seed, attempt])``
(PCG64). Draw order within one attempt:

1. table size x, table size y (uniform)
2. object count (integers, inclusive range)
3. per object: kind (uniform < 0.5 is a box), dimensions, yaw, then
   (x, y) pairs until the footprint fits (rejection, up to ``max_placement_tries``)
4. held object: kind, dimensions, yaw
5. camera: distance, elevation, azimuth, look-at x, look-at y
6. occluder (only when enabled): fraction along the view ray, size, yaw
7. point subsampling permutation used before furthest point sampling
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from ..geometry import DEFAULT_GRIPPER, GraspParams, Pose, reconstruct_grasp_pose
from ..primitives import Box, Cylinder, footprint_distances, footprint_inside_rect, upright_pose


class PlacementExhausted(RuntimeError):
    """Rejection sampling could not place an object."""


@dataclass
class GenConfig:
    num_points: int = 1024
    object_count: tuple = (1, 6)
    table_size_x: tuple = (0.45, 0.65)
    table_size_y: tuple = (0.4, 0.55)
    table_thickness: float = 0.05
    box_side: tuple = (0.03, 0.08)
    box_height: tuple = (0.03, 0.14)
    cylinder_radius: tuple = (0.015, 0.035)
    cylinder_height: tuple = (0.04, 0.15)
    held_box_side: tuple = (0.03, 0.06)
    held_box_height: tuple = (0.04, 0.10)
    held_cylinder_radius: tuple = (0.015, 0.03)
    held_cylinder_height: tuple = (0.04, 0.10)
    held_height: float = 0.35
    min_gap: float = 0.005
    table_margin: float = 0.02
    max_placement_tries: int = 1000
    max_scene_attempts: int = 50
    resolution: int = 512
    fov_deg: float = 55.0
    camera_distance: tuple = (0.55, 0.8)
    camera_elevation_deg: tuple = (35.0, 80.0)
    lookat_fraction: float = 0.25
    occluder: bool = False
    presample_factor: int = 8
    num_bins: int = 8
    object_points: int = 256
    grasps_per_object: int = 64
    clearance: float = 0.005
    friction_mu: float = 0.5
    snap_radius: float = 0.02

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, list):
                setattr(self, f.name, tuple(v))
        lo, hi = self.object_count
        if not 1 <= lo <= hi:
            raise ValueError(f"invalid object count range {self.object_count}")
        if self.num_points < 1 or self.num_bins < 1:
            raise ValueError("num_points and num_bins must be positive")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "GenConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown data config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class ObjectInstance:
    id: int
    kind: str           # "box" (dims = x, y, z sizes) or "cylinder" (dims = radius, height)
    dims: tuple
    pose: Pose
    category: str = ""

    @property
    def shape(self):
        if self.kind == "box":
            return Box(tuple(self.dims), self.pose)
        if self.kind == "cylinder":
            return Cylinder(float(self.dims[0]), float(self.dims[1]), self.pose)
        raise ValueError(f"unknown shape kind {self.kind!r}")

    @property
    def height(self) -> float:
        return float(self.dims[2] if self.kind == "box" else self.dims[1])

    def with_pose(self, pose: Pose) -> "ObjectInstance":
        return ObjectInstance(self.id, self.kind, self.dims, pose, self.category)

    def to_dict(self) -> dict:
        return {"id": self.id, "kind": self.kind, "dims": [float(x) for x in self.dims],
                "category": self.category, "pose": pose_to_list(self.pose)}

    @classmethod
    def from_dict(cls, d: dict) -> "ObjectInstance":
        return cls(int(d["id"]), d["kind"], tuple(float(x) for x in d["dims"]),
                   pose_from_list(d["pose"]), d.get("category", ""))


@dataclass(frozen=True)
class Table:
    size_x: float
    size_y: float
    thickness: float = 0.05

    @property
    def half_extent(self) -> tuple:
        return (0.5 * self.size_x, 0.5 * self.size_y)

    @property
    def shape(self) -> Box:
        return Box((self.size_x, self.size_y, self.thickness), upright_pose(0.0, 0.0, -0.5 * self.thickness))


@dataclass
class Layout:
    table: Table
    instances: list
    held: ObjectInstance
    attempt: int = 0


def pose_to_list(pose: Pose) -> list:
    return [float(x) for x in pose.rotation.ravel()] + [float(x) for x in pose.translation]


def pose_from_list(v) -> Pose:
    v = np.asarray(v, dtype=np.float64)
    return Pose(v[:9].reshape(3, 3), v[9:12])


def scene_rng(seed: int, attempt: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(attempt)])


def _uniform(rng, bounds):
    return float(rng.uniform(bounds[0], bounds[1]))


def _sample_shape(rng, box_side, box_height, cyl_radius, cyl_height):
    if rng.random() < 0.5:
        dims = (_uniform(rng, box_side), _uniform(rng, box_side), _uniform(rng, box_height))
        return "box", dims
    return "cylinder", (_uniform(rng, cyl_radius), _uniform(rng, cyl_height))


def _sample_objects(rng, cfg: GenConfig, table: Table) -> list:
    n = int(rng.integers(cfg.object_count[0], cfg.object_count[1] + 1))
    placed = []
    hx, hy = table.half_extent
    for k in range(n):
        kind, dims = _sample_shape(rng, cfg.box_side, cfg.box_height, cfg.cylinder_radius, cfg.cylinder_height)
        yaw = float(rng.uniform(0.0, 2 * np.pi))
        height = dims[2] if kind == "box" else dims[1]
        probe = ObjectInstance(k + 1, kind, dims, upright_pose(0.0, 0.0, 0.5 * height, yaw), kind).shape
        for _ in range(cfg.max_placement_tries):
            xy = rng.uniform([-hx, -hy], [hx, hy])
            ok = footprint_inside_rect(probe, xy[None], yaw, (hx, hy), cfg.table_margin)[0]
            if ok:
                ok = all(footprint_distances(probe, xy[None], yaw, other.shape)[0] >= cfg.min_gap
                         for other in placed)
            if ok:
                break
        else:
            raise PlacementExhausted(f"object {k + 1} of {n} could not be placed")
        placed.append(ObjectInstance(k + 1, kind, dims, upright_pose(xy[0], xy[1], 0.5 * height, yaw), kind))
    return placed


def _sample_held(rng, cfg: GenConfig, n_objects: int) -> ObjectInstance:
    kind, dims = _sample_shape(rng, cfg.held_box_side, cfg.held_box_height,
                               cfg.held_cylinder_radius, cfg.held_cylinder_height)
    yaw = float(rng.uniform(0.0, 2 * np.pi))
    height = dims[2] if kind == "box" else dims[1]
    return ObjectInstance(n_objects + 1, kind, dims, upright_pose(0.0, 0.0, cfg.held_height + 0.5 * height, yaw),
                          kind)


def sample_layout(seed: int, cfg: GenConfig, attempt: int = 0, rng: np.random.Generator | None = None) -> Layout:
    """Table, resting objects and held object for one attempt (draw steps 1-4)."""
    rng = scene_rng(seed, attempt) if rng is None else rng
    table = Table(_uniform(rng, cfg.table_size_x), _uniform(rng, cfg.table_size_y), cfg.table_thickness)
    instances = _sample_objects(rng, cfg, table)
    held = _sample_held(rng, cfg, len(instances))
    return Layout(table, instances, held, attempt)


def held_grasp_pose(held: ObjectInstance, gripper=DEFAULT_GRIPPER, depth: float = 0.015) -> Pose:
    """Top-down grasp on the held object closing along its local x axis."""
    R = held.pose.rotation
    c = R[:, 0]
    a = np.array([0.0, 0.0, 1.0])
    half_w = 0.5 * held.dims[0] if held.kind == "box" else held.dims[0]
    top = held.pose.translation[2] + 0.5 * held.height
    p = held.pose.translation - half_w * c
    p = np.array([p[0], p[1], top - depth])
    return reconstruct_grasp_pose(p, GraspParams(c, a, 2 * half_w), gripper)

