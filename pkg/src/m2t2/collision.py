"""Analytic collision and grasp-quality predicates shared by labeling and evaluation."""
from __future__ import annotations

import numpy as np

from .geometry import (DEFAULT_GRIPPER, AABox, GripperModel, Pose, check_antipodal_stability, rotation_z,
                       to_gripper_frame)
from .primitives import Box, gjk_intersect, sample_surface

DENSE_SPACING = 0.002


def _subtract(box: AABox, cut: AABox) -> list:
    """Split ``box`` minus ``cut`` into at most six boxes."""
    lo = np.array(box.lo, dtype=np.float64)
    hi = np.array(box.hi, dtype=np.float64)
    clo, chi = np.asarray(cut.lo), np.asarray(cut.hi)
    if np.any(hi <= clo) or np.any(lo >= chi):
        return [box]
    pieces = []
    for ax in range(3):
        if lo[ax] < clo[ax]:
            h = hi.copy()
            h[ax] = clo[ax]
            pieces.append(AABox(tuple(lo), tuple(h)))
            lo[ax] = clo[ax]
        if hi[ax] > chi[ax]:
            l_ = lo.copy()
            l_[ax] = chi[ax]
            pieces.append(AABox(tuple(l_), tuple(hi)))
            hi[ax] = chi[ax]
    return pieces


def collision_volume(gripper: GripperModel = DEFAULT_GRIPPER, clearance: float = 0.005) -> list:
    """Gripper-frame boxes covering every body box grown by ``clearance``, minus the
    exempt closing region. A surface point flagged by the point-based check lies
    in one of these boxes."""
    out = []
    for b in gripper.collision_boxes:
        grown = AABox(tuple(np.asarray(b.lo) - clearance), tuple(np.asarray(b.hi) + clearance))
        out.extend(_subtract(grown, gripper.closing_region))
    return out


def _volume_arrays(gripper, clearance):
    vol = collision_volume(gripper, clearance)
    centers = np.array([v.center for v in vol])
    halves = np.array([0.5 * v.size for v in vol])
    return centers, halves


def obbs_overlap_box(centers, rotations, halves, box: Box) -> np.ndarray:
    """Vectorised separating-axis test of many oriented boxes against one box."""
    centers = np.asarray(centers, dtype=np.float64)
    Ra = np.asarray(rotations, dtype=np.float64)
    ha = np.asarray(halves, dtype=np.float64)
    Rb = box.pose.rotation
    hb = box.half
    m = len(centers)
    axes = [Ra[:, :, i] for i in range(3)] + [np.broadcast_to(Rb[:, i], (m, 3)) for i in range(3)]
    for i in range(3):
        for j in range(3):
            c = np.cross(Ra[:, :, i], Rb[:, j][None, :])
            n = np.linalg.norm(c, axis=1, keepdims=True)
            axes.append(np.where(n > 1e-9, c / np.maximum(n, 1e-12), 0.0))
    L = np.stack(axes, axis=1)                                  # [m, 15, 3]
    t = box.center[None, :] - centers                           # [m, 3]
    ra = np.sum(ha[:, None, :] * np.abs(np.einsum("mkd,mdi->mki", L, Ra)), axis=2)
    rb = np.sum(hb[None, None, :] * np.abs(L @ Rb), axis=2)
    proj = np.abs(np.einsum("mkd,md->mk", L, t))
    valid = np.linalg.norm(L, axis=2) > 0.5
    separated = np.any(valid & (proj > ra + rb), axis=1)
    return ~separated


def gripper_shape_collisions(rotations, translations, shapes, gripper: GripperModel = DEFAULT_GRIPPER,
                             clearance: float = 0.005) -> np.ndarray:
    """For each gripper pose, whether its clearance-grown body touches any shape."""
    R = np.asarray(rotations, dtype=np.float64).reshape(-1, 3, 3)
    t = np.asarray(translations, dtype=np.float64).reshape(-1, 3)
    centers, halves = _volume_arrays(gripper, clearance)
    k = len(centers)
    wc = np.einsum("mij,kj->mki", R, centers) + t[:, None, :]   # [m, k, 3]
    reach = float(np.max(np.linalg.norm(np.abs(centers) + halves, axis=1)))
    hit = np.zeros(len(R), dtype=bool)
    for shape in shapes:
        near = np.linalg.norm(t - shape.center, axis=1) <= reach + shape.bounding_radius
        near &= ~hit
        idx = np.nonzero(near)[0]
        if len(idx) == 0:
            continue
        flat_c = wc[idx].reshape(-1, 3)
        flat_R = np.repeat(R[idx], k, axis=0)
        flat_h = np.tile(halves, (len(idx), 1))
        if shape.kind == "box":
            ov = obbs_overlap_box(flat_c, flat_R, flat_h, shape)
        else:
            # the cylinder lies inside both its square hull and the hull turned by 45 degrees
            hull = Box((2 * shape.radius, 2 * shape.radius, shape.height), shape.pose)
            ov = obbs_overlap_box(flat_c, flat_R, flat_h, hull)
            turned = Box(hull.size, Pose(shape.pose.rotation @ rotation_z(np.pi / 4), shape.pose.translation))
            sub = np.nonzero(ov)[0]
            ov[sub] = obbs_overlap_box(flat_c[sub], flat_R[sub], flat_h[sub], turned)
            for j in np.nonzero(ov)[0]:
                ov[j] = gjk_intersect(Box(tuple(2 * flat_h[j]), Pose(flat_R[j], flat_c[j])), shape)
        hit[idx] |= ov.reshape(len(idx), k).any(axis=1)
    return hit


class DenseScene:
    """Cached dense analytic surface samples of a set of shapes."""

    def __init__(self, shapes, spacing: float = DENSE_SPACING):
        self.shapes = list(shapes)
        self.spacing = spacing
        self._samples = {}

    def samples(self, i: int):
        if i not in self._samples:
            self._samples[i] = sample_surface(self.shapes[i], self.spacing)
        return self._samples[i]


def grasped_object(pose: Pose, dense: DenseScene, gripper: GripperModel = DEFAULT_GRIPPER):
    """Index of the single shape inside the closing region, or None when there is
    no such shape or more than one."""
    reach = float(np.max(np.abs(np.vstack([gripper.closing_region.lo, gripper.closing_region.hi]))) * 2)
    found = []
    for i, shape in enumerate(dense.shapes):
        if np.linalg.norm(shape.center - pose.translation) > reach + gripper.base_to_baseline + shape.bounding_radius:
            continue
        pts, _ = dense.samples(i)
        q = to_gripper_frame(pts, pose.rotation, pose.translation)
        if gripper.closing_region.contains(q).any():
            found.append(i)
    return found[0] if len(found) == 1 else None


def grasp_is_stable(pose: Pose, dense: DenseScene, gripper: GripperModel = DEFAULT_GRIPPER,
                    friction_mu: float = 0.5) -> bool:
    i = grasped_object(pose, dense, gripper)
    if i is None:
        return False
    pts, nrm = dense.samples(i)
    return check_antipodal_stability(pose, pts, nrm, gripper, friction_mu)


def grasp_succeeds(pose: Pose, shapes, dense: DenseScene, gripper: GripperModel = DEFAULT_GRIPPER,
                   clearance: float = 0.005, friction_mu: float = 0.5) -> bool:
    """Collision-free against every analytic shape and antipodally stable on exactly one object."""
    if gripper_shape_collisions([pose.rotation], [pose.translation], shapes, gripper, clearance)[0]:
        return False
    return grasp_is_stable(pose, dense, gripper, friction_mu)
