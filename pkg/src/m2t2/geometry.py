"""Rigid transforms, the parallel-jaw gripper model and point-cloud utilities.

World frame convention: z is up and the table top is the plane z = 0.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class DegenerateDirectionError(ValueError):
    """Contact direction is (nearly) parallel to the approach direction."""


@dataclass(frozen=True)
class Pose:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64).reshape(3, 3))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, T) -> "Pose":
        T = np.asarray(T, dtype=np.float64)
        return cls(T[:3, :3], T[:3, 3])

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def inverse(self) -> "Pose":
        Rt = self.rotation.T
        return Pose(Rt, -Rt @ self.translation)

    def __matmul__(self, other: "Pose") -> "Pose":
        return Pose(self.rotation @ other.rotation,
                    self.rotation @ other.translation + self.translation)

    def apply(self, points) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation.T + self.translation

    def is_valid(self, tol: float = 1e-6) -> bool:
        R = self.rotation
        return (np.all(np.isfinite(R)) and np.all(np.isfinite(self.translation))
                and np.abs(R.T @ R - np.eye(3)).max() <= tol
                and abs(np.linalg.det(R) - 1.0) <= tol)

    def __eq__(self, other):
        if not isinstance(other, Pose):
            return NotImplemented
        return (np.array_equal(self.rotation, other.rotation)
                and np.array_equal(self.translation, other.translation))

    __hash__ = None


@dataclass(frozen=True)
class GraspParams:
    contact_dir: np.ndarray
    approach_dir: np.ndarray
    width: float


@dataclass(frozen=True)
class AABox:
    """Axis-aligned box in the gripper frame."""
    lo: tuple
    hi: tuple

    def contains(self, q: np.ndarray, margin: float = 0.0) -> np.ndarray:
        lo = np.asarray(self.lo) - margin
        hi = np.asarray(self.hi) + margin
        return np.all((q >= lo) & (q <= hi), axis=-1)

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (np.asarray(self.lo) + np.asarray(self.hi))

    @property
    def size(self) -> np.ndarray:
        return np.asarray(self.hi, dtype=np.float64) - np.asarray(self.lo)


@dataclass(frozen=True)
class GripperModel:
    """Parallel-jaw gripper.

    The gripper frame has its origin at the base (wrist), the x axis along the
    closing line and z along the approach direction ``a``. Because a grasp is
    reconstructed as ``t = p + (w/2) c + d a``, the fingers sit at ``z = -d``
    and the body of the gripper occupies ``z > -d``. The gripper is always
    checked at its maximum opening.
    """
    key_points: np.ndarray
    base_to_baseline: float
    max_width: float
    collision_boxes: tuple
    closing_region: AABox
    pad_region: AABox

    def __post_init__(self):
        kp = np.asarray(self.key_points, dtype=np.float64)
        if kp.shape != (5, 3):
            raise ValueError("gripper needs exactly 5 key points")
        if self.base_to_baseline <= 0 or self.max_width <= 0:
            raise ValueError("gripper dimensions must be positive")
        object.__setattr__(self, "key_points", kp)


def make_gripper(max_width: float = 0.08, depth: float = 0.10, finger_length: float = 0.045,
                 finger_thickness: float = 0.01, finger_depth: float = 0.02,
                 tip_extension: float = 0.01, palm_height: float = 0.02) -> GripperModel:
    half = max_width / 2
    fy = finger_depth / 2
    z_tip = -depth - tip_extension
    z_knuckle = -depth + finger_length
    z_palm = z_knuckle + palm_height
    boxes = (
        AABox((half, -fy, z_tip), (half + finger_thickness, fy, z_knuckle)),
        AABox((-half - finger_thickness, -fy, z_tip), (-half, fy, z_knuckle)),
        AABox((-half - finger_thickness, -2 * fy, z_knuckle), (half + finger_thickness, 2 * fy, z_palm)),
        AABox((-2 * fy, -2 * fy, z_palm), (2 * fy, 2 * fy, 0.02)),
    )
    key_points = np.array([
        [0.0, 0.0, 0.0],
        [half, 0.0, z_knuckle],
        [-half, 0.0, z_knuckle],
        [half, 0.0, -depth],
        [-half, 0.0, -depth],
    ])
    closing = AABox((-half, -fy, z_tip), (half, fy, z_knuckle))
    pad = AABox((-half, -fy, -depth - tip_extension), (half, fy, -depth + 0.02))
    return GripperModel(key_points, depth, max_width, boxes, closing, pad)


DEFAULT_GRIPPER = make_gripper()


@dataclass(frozen=True)
class PlanarRotationBin:
    index: int
    num_bins: int

    def __post_init__(self):
        if not 0 <= self.index < self.num_bins:
            raise ValueError(f"bin index {self.index} outside [0, {self.num_bins})")

    @property
    def angle(self) -> float:
        return 2.0 * np.pi * self.index / self.num_bins

    @property
    def rotation(self) -> np.ndarray:
        return rotation_z(self.angle)


def rotation_z(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _unit(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


def orthonormal_grasp_frame(c, a) -> np.ndarray:
    """Rotation with columns [c, a x c, a] after re-orthogonalising c against a."""
    a = _unit(a)
    c = np.asarray(c, dtype=np.float64)
    c = c - np.dot(c, a) * a
    n = np.linalg.norm(c)
    if n < 1e-6:
        raise DegenerateDirectionError("contact direction parallel to approach direction")
    c = c / n
    return np.column_stack([c, np.cross(a, c), a])


def reconstruct_grasp_pose(p, params: GraspParams, gripper: GripperModel = DEFAULT_GRIPPER) -> Pose:
    R = orthonormal_grasp_frame(params.contact_dir, params.approach_dir)
    c, a = R[:, 0], R[:, 2]
    t = np.asarray(p, dtype=np.float64) + 0.5 * params.width * c + gripper.base_to_baseline * a
    return Pose(R, t)


def reconstruct_grasp_poses(points, contact_dirs, approach_dirs, widths, depth: float):
    """Vectorised grasp reconstruction. Returns (R [n,3,3], t [n,3], valid [n])."""
    a = np.asarray(approach_dirs, dtype=np.float64)
    a = a / np.linalg.norm(a, axis=1, keepdims=True)
    c = np.asarray(contact_dirs, dtype=np.float64)
    c = c - np.sum(c * a, axis=1, keepdims=True) * a
    n = np.linalg.norm(c, axis=1)
    valid = n >= 1e-6
    c = c / np.where(valid, n, 1.0)[:, None]
    R = np.stack([c, np.cross(a, c), a], axis=2)
    t = np.asarray(points, dtype=np.float64) + 0.5 * np.asarray(widths).reshape(-1, 1) * c + depth * a
    return R, t, valid


def reconstruct_placement_pose(p, rotation_bin: PlanarRotationBin, ee_pose: Pose, bottom) -> Pose:
    Rp = rotation_bin.rotation
    t = np.asarray(p, dtype=np.float64) + Rp @ (ee_pose.translation - np.asarray(bottom, dtype=np.float64))
    return Pose(Rp @ ee_pose.rotation, t)


def bottom_center(points) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise ValueError("bottom_center of an empty cloud")
    return np.array([pts[:, 0].mean(), pts[:, 1].mean(), pts[:, 2].min()])


def gripper_key_points(pose: Pose, gripper: GripperModel = DEFAULT_GRIPPER) -> np.ndarray:
    return pose.apply(gripper.key_points)


def adds_distance(pred: Pose, gt: Pose, gripper: GripperModel = DEFAULT_GRIPPER) -> float:
    diff = gripper_key_points(pred, gripper) - gripper_key_points(gt, gripper)
    return float(np.linalg.norm(diff, axis=1).sum())


def furthest_point_sample(points, m: int, seed_index: int = 0) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    n = len(pts)
    if not 1 <= m <= n:
        raise ValueError(f"cannot sample {m} of {n} points")
    idx = np.empty(m, dtype=np.int64)
    idx[0] = seed_index
    dist = np.sum((pts - pts[seed_index]) ** 2, axis=1)
    for i in range(1, m):
        # argmax returns the first maximum: ties go to the lowest index
        nxt = int(np.argmax(dist))
        idx[i] = nxt
        np.minimum(dist, np.sum((pts - pts[nxt]) ** 2, axis=1), out=dist)
    return idx


def pairwise_distances(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.sqrt(np.sum((a[:, None, :] - b[None, :, :]) ** 2, axis=-1))


def knn(reference, queries, k: int):
    """k nearest reference points per query (ties by lowest index)."""
    d = pairwise_distances(queries, reference)
    order = np.argsort(d, axis=1, kind="stable")[:, :k]
    return order, np.take_along_axis(d, order, axis=1)


def interpolation_weights(coarse_points, fine_points, k: int = 3):
    """Indices [n,k] and normalised inverse-distance weights [n,k]."""
    if k > len(coarse_points):
        raise ValueError("k exceeds number of coarse points")
    idx, d = knn(coarse_points, fine_points, k)
    w = 1.0 / (d + 1e-8)
    w = w / w.sum(axis=1, keepdims=True)
    exact = d[:, 0] == 0.0
    w[exact] = 0.0
    w[exact, 0] = 1.0
    return idx, w


def interpolate_features(coarse_points, coarse_features, fine_points, k: int = 3) -> np.ndarray:
    idx, w = interpolation_weights(coarse_points, fine_points, k)
    feats = np.asarray(coarse_features, dtype=np.float64)
    return np.einsum("nk,nkf->nf", w, feats[idx])


def ball_query(points, centers, radius: float, max_neighbors: int) -> np.ndarray:
    """Up to ``max_neighbors`` nearest points within ``radius`` of each center.

    Short groups are padded by repeating the nearest neighbor, so each center
    (which is itself in ``points``) always has a full group.
    """
    d = pairwise_distances(centers, points)
    k = min(max_neighbors, len(points))
    order = np.argsort(d, axis=1, kind="stable")[:, :k]
    dk = np.take_along_axis(d, order, axis=1)
    inside = dk <= radius
    inside[:, 0] = True
    out = np.where(inside, order, order[:, :1])
    if k < max_neighbors:
        out = np.concatenate([out, np.repeat(out[:, :1], max_neighbors - k, axis=1)], axis=1)
    return out


def to_gripper_frame(points, rotation, translation) -> np.ndarray:
    return (np.asarray(points, dtype=np.float64) - translation) @ rotation


def gripper_collision_mask(rotations, translations, scene_points, gripper: GripperModel = DEFAULT_GRIPPER,
                           clearance: float = 0.005) -> np.ndarray:
    """Batched point-vs-box collision check for many gripper poses."""
    pts = np.asarray(scene_points, dtype=np.float64).reshape(-1, 3)
    out = np.zeros(len(rotations), dtype=bool)
    if len(pts) == 0:
        return out
    reach = np.linalg.norm(np.abs(np.vstack([np.asarray(b.lo) for b in gripper.collision_boxes]
                                            + [np.asarray(b.hi) for b in gripper.collision_boxes])), axis=1).max()
    reach += clearance
    for i, (R, t) in enumerate(zip(rotations, translations)):
        near = np.sum((pts - t) ** 2, axis=1) <= reach * reach
        if not near.any():
            continue
        q = to_gripper_frame(pts[near], R, t)
        hit = np.zeros(len(q), dtype=bool)
        for box in gripper.collision_boxes:
            hit |= box.contains(q, clearance)
        hit &= ~gripper.closing_region.contains(q)
        out[i] = bool(hit.any())
    return out


def check_gripper_collision(pose: Pose, scene_points, gripper: GripperModel = DEFAULT_GRIPPER,
                            clearance: float = 0.005) -> bool:
    if clearance < 0:
        raise ValueError("clearance must be non-negative")
    return bool(gripper_collision_mask([pose.rotation], [pose.translation], scene_points,
                                       gripper, clearance)[0])


def check_antipodal_stability(pose: Pose, object_points, object_normals, gripper: GripperModel = DEFAULT_GRIPPER,
                              friction_mu: float = 0.5, layer: float = 0.004) -> bool:
    """Antipodal friction-cone test on the points swept by the finger pads.

    Each finger touches the outermost layer of object points along the
    closing line; some point of each layer must have an outward normal within
    the friction cone of that finger's closing direction.
    """
    if friction_mu <= 0:
        raise ValueError("friction coefficient must be positive")
    pts = np.asarray(object_points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        return False
    q = to_gripper_frame(pts, pose.rotation, pose.translation)
    inside = gripper.pad_region.contains(q)
    if not inside.any():
        return False
    q = q[inside]
    n = np.asarray(object_normals, dtype=np.float64).reshape(-1, 3)[inside] @ pose.rotation
    x = q[:, 0]
    hi, lo = x.max(), x.min()
    if hi - lo <= layer:
        return False
    cos_cone = np.cos(np.arctan(friction_mu))
    plus = (x >= hi - layer) & (n[:, 0] >= cos_cone)
    minus = (x <= lo + layer) & (n[:, 0] <= -cos_cone)
    return bool(plus.any() and minus.any())


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def fourier_features(xyz, num_frequencies: int = 6) -> np.ndarray:
    """sin/cos features of each coordinate at log-spaced frequencies.

    Layout per frequency f: [sin(f x), sin(f y), sin(f z), cos(f x), cos(f y), cos(f z)].
    """
    xyz = np.asarray(xyz, dtype=np.float64)
    freqs = fourier_frequencies(num_frequencies)
    ang = xyz[:, None, :] * freqs[None, :, None]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=2).reshape(len(xyz), -1)


def fourier_frequencies(num_frequencies: int) -> np.ndarray:
    return 2.0 * np.pi * 2.0 ** np.arange(num_frequencies)


def shift_fourier_features(features, shift, num_frequencies: int = 6) -> np.ndarray:
    """Encoding of ``x + shift`` computed from the encoding of ``x`` alone."""
    f = np.asarray(features, dtype=np.float64).reshape(len(features), num_frequencies, 2, 3)
    ang = fourier_frequencies(num_frequencies)[:, None] * np.asarray(shift, dtype=np.float64)[None, :]
    s, c = f[:, :, 0, :], f[:, :, 1, :]
    out = np.stack([s * np.cos(ang) + c * np.sin(ang), c * np.cos(ang) - s * np.sin(ang)], axis=2)
    return out.reshape(len(features), -1)
