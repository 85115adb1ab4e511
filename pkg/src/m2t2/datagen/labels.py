"""Analytic grasp and placement annotation."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from ..collision import DenseScene, gripper_shape_collisions, grasped_object
from ..geometry import (DEFAULT_GRIPPER, GripperModel, Pose, bottom_center, check_antipodal_stability,
                        gripper_collision_mask, reconstruct_grasp_poses, rotation_z)
from ..primitives import footprint_distances, footprint_inside_rect, sample_surface
from .scene import ObjectInstance, Table

WIDTH_MARGIN = 0.015        # labelled widths stay below max width minus this margin
ENTRY_DEPTHS = (0.01, 0.02)  # contact depth below the face the gripper enters from
FACE_OFFSETS = (-0.25, 0.0, 0.25)
CYLINDER_ANGLES = 8


@dataclass
class SceneGeometry:
    """Everything the labelers and evaluators need about one scene."""
    table: Table | None
    instances: list
    points: np.ndarray = None       # visible cloud [N, 3] (float64 copy of the stored float32)
    point_ids: np.ndarray = None    # [N]
    dense: DenseScene = field(init=False, repr=False)

    def __post_init__(self):
        self.dense = DenseScene([inst.shape for inst in self.instances])

    def obstacles(self) -> list:
        shapes = [inst.shape for inst in self.instances]
        if self.table is not None:
            shapes.append(self.table.shape)
        return shapes

    def index_of(self, obj_id: int) -> int:
        for i, inst in enumerate(self.instances):
            if inst.id == obj_id:
                return i
        raise KeyError(obj_id)


@dataclass
class GraspCandidates:
    contacts: np.ndarray    # [m, 3] world
    contact_dirs: np.ndarray
    approach_dirs: np.ndarray
    widths: np.ndarray


def _box_candidates(inst: ObjectInstance, max_width: float):
    h = 0.5 * np.asarray(inst.dims, dtype=np.float64)
    out = []
    for i in range(3):
        if 2 * h[i] > max_width:
            continue
        for j in range(3):
            if j == i:
                continue
            k = 3 - i - j
            for sa in (1.0, -1.0):
                for depth in ENTRY_DEPTHS:
                    dj = min(depth, h[j])
                    for off in FACE_OFFSETS:
                        for sc in (1.0, -1.0):
                            p = np.zeros(3)
                            p[i] = -sc * h[i]
                            p[j] = sa * (h[j] - dj)
                            p[k] = off * 2 * h[k]
                            c = np.zeros(3)
                            c[i] = sc
                            a = np.zeros(3)
                            a[j] = sa
                            out.append((p, c, a, 2 * h[i]))
    return out


def _cylinder_candidates(inst: ObjectInstance, max_width: float):
    r, height = inst.dims
    hz = 0.5 * height
    if 2 * r > max_width:
        return []
    out = []
    z = np.array([0.0, 0.0, 1.0])
    for n in range(CYLINDER_ANGLES):
        ang = 2 * np.pi * n / CYLINDER_ANGLES
        c = np.array([np.cos(ang), np.sin(ang), 0.0])
        # across the top rim
        for depth in ENTRY_DEPTHS:
            p = -r * c + (hz - min(depth, hz)) * z
            out.append((p, c, z.copy(), 2 * r))
        # diametral grasps from the side at several heights
        side = np.cross(z, c)
        for sa in (1.0, -1.0):
            for off in FACE_OFFSETS:
                p = -r * c + off * height * z
                out.append((p, c, sa * side, 2 * r))
    return out


def grasp_candidates(inst: ObjectInstance, gripper: GripperModel = DEFAULT_GRIPPER) -> GraspCandidates:
    """Enumerate antipodal candidates in the object frame and move them to the world."""
    max_width = gripper.max_width - WIDTH_MARGIN
    raw = _box_candidates(inst, max_width) if inst.kind == "box" else _cylinder_candidates(inst, max_width)
    if not raw:
        e = np.zeros((0, 3))
        return GraspCandidates(e, e, e, np.zeros(0))
    R, t = inst.pose.rotation, inst.pose.translation
    p = np.array([x[0] for x in raw]) @ R.T + t
    c = np.array([x[1] for x in raw]) @ R.T
    a = np.array([x[2] for x in raw]) @ R.T
    w = np.array([x[3] for x in raw])
    return GraspCandidates(p, c, a, w)


def quantize_pose(R, t):
    return R.astype(np.float32).astype(np.float64), t.astype(np.float32).astype(np.float64)


def label_grasps(inst: ObjectInstance, scene: SceneGeometry, gripper: GripperModel = DEFAULT_GRIPPER,
                 clearance: float = 0.005, friction_mu: float = 0.5, snap_radius: float = 0.02,
                 max_labels: int = 64):
    """Collision-free, antipodally stable grasps on ``inst`` with a visible contact point.

    Returns a list of (Pose, contact index). Poses are rounded to float32 before
    they are validated, so the stored labels are exactly the validated ones.
    """
    cand = grasp_candidates(inst, gripper)
    if len(cand.widths) == 0:
        return []
    R, t, valid = reconstruct_grasp_poses(cand.contacts, cand.contact_dirs, cand.approach_dirs,
                                          cand.widths, gripper.base_to_baseline)
    R, t = quantize_pose(R, t)
    keep = valid & ~gripper_shape_collisions(R, t, scene.obstacles(), gripper, clearance)
    if scene.points is not None:
        idx = np.nonzero(keep)[0]
        keep[idx] &= ~gripper_collision_mask(R[idx], t[idx], scene.points, gripper, clearance)
    own = scene.index_of(inst.id)
    pts, nrm = scene.dense.samples(own)
    for i in np.nonzero(keep)[0]:
        pose = Pose(R[i], t[i])
        keep[i] = (grasped_object(pose, scene.dense, gripper) == own
                   and check_antipodal_stability(pose, pts, nrm, gripper, friction_mu))
    if scene.points is None:
        labels = [(Pose(R[i], t[i]), -1) for i in np.nonzero(keep)[0]]
    else:
        mine = np.nonzero(scene.point_ids == inst.id)[0]
        if len(mine) == 0:
            return []
        tree = cKDTree(scene.points[mine])
        labels = []
        for i in np.nonzero(keep)[0]:
            d, j = tree.query(cand.contacts[i])
            if d <= snap_radius:
                labels.append((Pose(R[i], t[i]), int(mine[j])))
    # evenly spaced subset so every face pair stays represented
    if len(labels) > max_labels:
        pick = np.linspace(0, len(labels) - 1, max_labels).round().astype(np.int64)
        labels = [labels[i] for i in pick]
    return labels


# ---- placement -------------------------------------------------------------------

def held_object_cloud(held: ObjectInstance, n_points: int = 256) -> np.ndarray:
    """Deterministic analytic point cloud of the held object."""
    from ..geometry import furthest_point_sample
    pts, _ = sample_surface(held.shape, 0.004)
    return pts[furthest_point_sample(pts, min(n_points, len(pts)))]


def held_yaw(held: ObjectInstance) -> float:
    R = held.pose.rotation
    return float(np.arctan2(R[1, 0], R[0, 0]))


def placement_candidates(held: ObjectInstance, ee_pose: Pose, bottom, points, num_bins: int):
    """For each bin and point: placed object centre, yaw and the gripper pose."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    bottom = np.asarray(bottom, dtype=np.float64)
    n = len(pts)
    centers, yaws, rots, trans = [], [], [], []
    for i in range(num_bins):
        Rb = rotation_z(2 * np.pi * i / num_bins)
        centers.append(pts + Rb @ (held.pose.translation - bottom))
        yaws.append(np.full(n, held_yaw(held) + 2 * np.pi * i / num_bins))
        rots.append(np.broadcast_to(Rb @ ee_pose.rotation, (n, 3, 3)))
        trans.append(pts + Rb @ (ee_pose.translation - bottom))
    return (np.stack(centers), np.stack(yaws), np.stack(rots), np.stack(trans))


def label_placements(held: ObjectInstance, held_cloud, ee_pose: Pose, scene: SceneGeometry,
                     num_bins: int = 8, gripper: GripperModel = DEFAULT_GRIPPER,
                     clearance: float = 0.005) -> np.ndarray:
    """Binary masks [P, N]: placing the rotated object with its bottom centre at a
    visible table point keeps it on the table, away from other objects, and the
    gripper collision-free."""
    n = len(scene.points)
    masks = np.zeros((num_bins, n), dtype=np.uint8)
    table_idx = np.nonzero(scene.point_ids == 0)[0]
    if len(table_idx) == 0:
        return masks
    b = bottom_center(held_cloud)
    centers, yaws, rots, trans = placement_candidates(held, ee_pose, b, scene.points[table_idx], num_bins)
    shape = held.shape
    hx, hy = scene.table.half_extent
    flat_c = centers.reshape(-1, 3)[:, :2]
    flat_y = yaws.ravel()
    ok = footprint_inside_rect(shape, flat_c, flat_y, (hx, hy))
    for inst in scene.instances:
        ok &= footprint_distances(shape, flat_c, flat_y, inst.shape) >= clearance
    idx = np.nonzero(ok)[0]
    if len(idx):
        hit = gripper_shape_collisions(rots.reshape(-1, 3, 3)[idx], trans.reshape(-1, 3)[idx],
                                       scene.obstacles(), gripper, clearance)
        ok[idx[hit]] = False
    masks[:, table_idx] = ok.reshape(num_bins, len(table_idx)).astype(np.uint8)
    return masks


def placed_object_pose(pose: Pose, ee_pose: Pose, held: ObjectInstance) -> Pose:
    """Object pose implied by releasing the held object at gripper pose ``pose``."""
    return pose @ ee_pose.inverse() @ held.pose
