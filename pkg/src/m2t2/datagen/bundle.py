"""Scene generation driver and the on-disk scene bundle format.

Layout of a bundle directory::

    manifest.json   version, seed, table, camera, instances, held object, labels summary, checksums
    points.bin      u32 count, count * 3 f32 xyz, count * u32 object ids
    grasps.bin      records of u32 object id, u32 contact index, 12 f32 (rotation row-major, translation)
    placemask.bin   u32 P, u32 N, P * N bytes of 0/1

All multi-byte values are little-endian.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..geometry import DEFAULT_GRIPPER, Pose
from .labels import SceneGeometry, held_object_cloud, label_grasps, label_placements
from .render import RenderError, VirtualCamera, render_pointcloud, sample_camera, sample_occluder
from .scene import (GenConfig, ObjectInstance, PlacementExhausted, Table, held_grasp_pose, pose_from_list,
                    pose_to_list, sample_layout, scene_rng)

BUNDLE_VERSION = 1
BIN_FILES = ("points.bin", "grasps.bin", "placemask.bin")


class BundleError(RuntimeError):
    """A bundle on disk is malformed, truncated or fails its checksum."""


class GenerationError(RuntimeError):
    pass


@dataclass
class SceneBundle:
    seed: int
    attempt: int
    config: GenConfig
    table: Table
    instances: list
    held: ObjectInstance
    ee_pose: Pose
    camera: VirtualCamera
    points: np.ndarray              # [N, 3] float32
    point_ids: np.ndarray           # [N] uint32
    grasp_object_ids: np.ndarray    # [K] uint32
    grasp_contacts: np.ndarray      # [K] uint32
    grasp_poses: np.ndarray         # [K, 12] float32, rotation row-major then translation
    placement_masks: np.ndarray     # [P, N] uint8

    @property
    def num_points(self) -> int:
        return len(self.points)

    def grasp_pose(self, k: int) -> Pose:
        v = self.grasp_poses[k].astype(np.float64)
        return Pose(v[:9].reshape(3, 3), v[9:])

    def grasp_rotations(self) -> np.ndarray:
        return self.grasp_poses[:, :9].astype(np.float64).reshape(-1, 3, 3)

    def grasp_translations(self) -> np.ndarray:
        return self.grasp_poses[:, 9:].astype(np.float64)

    def held_cloud(self) -> np.ndarray:
        return held_object_cloud(self.held, self.config.object_points)

    def geometry(self) -> SceneGeometry:
        return SceneGeometry(self.table, list(self.instances), self.points.astype(np.float64),
                             self.point_ids.astype(np.int64))

    def equals(self, other: "SceneBundle") -> bool:
        arrays = ("points", "point_ids", "grasp_object_ids", "grasp_contacts", "grasp_poses", "placement_masks")
        return (all(np.array_equal(getattr(self, a), getattr(other, a)) for a in arrays)
                and _manifest_body(self) == _manifest_body(other))


# ---- generation --------------------------------------------------------------------

def generate_scene(seed: int, cfg: GenConfig | None = None, gripper=DEFAULT_GRIPPER) -> SceneBundle:
    """Deterministic scene for ``seed``; failed attempts move on to the next sub-seed."""
    cfg = cfg or GenConfig()
    last = None
    for attempt in range(cfg.max_scene_attempts):
        rng = scene_rng(seed, attempt)
        try:
            layout = sample_layout(seed, cfg, attempt, rng)
            camera = sample_camera(rng, layout.table, cfg)
            occluder = None
            if cfg.occluder:
                target = camera.pose.translation + camera.pose.rotation[:, 2]
                occluder = sample_occluder(rng, camera, target)
            pts, ids = render_pointcloud(layout.instances, layout.table, camera, cfg.num_points, rng,
                                         cfg.presample_factor, occluder)
        except (PlacementExhausted, RenderError) as exc:
            last = exc
            continue
        return _annotate(seed, attempt, cfg, layout, camera, pts, ids, gripper)
    raise GenerationError(f"seed {seed}: no valid scene after {cfg.max_scene_attempts} attempts ({last})")


def _annotate(seed, attempt, cfg, layout, camera, pts, ids, gripper) -> SceneBundle:
    points = pts.astype(np.float32)
    geom = SceneGeometry(layout.table, layout.instances, points.astype(np.float64), ids.astype(np.int64))
    obj_ids, contacts, poses = [], [], []
    for inst in layout.instances:
        for pose, contact in label_grasps(inst, geom, gripper, cfg.clearance, cfg.friction_mu,
                                          cfg.snap_radius, cfg.grasps_per_object):
            obj_ids.append(inst.id)
            contacts.append(contact)
            poses.append(np.concatenate([pose.rotation.ravel(), pose.translation]))
    ee = held_grasp_pose(layout.held, gripper)
    ee = Pose(ee.rotation.astype(np.float32).astype(np.float64), ee.translation.astype(np.float32).astype(np.float64))
    cloud = held_object_cloud(layout.held, cfg.object_points)
    masks = label_placements(layout.held, cloud, ee, geom, cfg.num_bins, gripper, cfg.clearance)
    return SceneBundle(
        seed=int(seed), attempt=int(attempt), config=cfg, table=layout.table, instances=list(layout.instances),
        held=layout.held, ee_pose=ee, camera=camera, points=points, point_ids=ids.astype(np.uint32),
        grasp_object_ids=np.array(obj_ids, dtype=np.uint32), grasp_contacts=np.array(contacts, dtype=np.uint32),
        grasp_poses=np.array(poses, dtype=np.float32).reshape(-1, 12), placement_masks=masks)


# ---- serialization -------------------------------------------------------------------

def _points_bytes(b: SceneBundle) -> bytes:
    n = len(b.points)
    return (struct.pack("<I", n) + np.ascontiguousarray(b.points, dtype="<f4").tobytes()
            + np.ascontiguousarray(b.point_ids, dtype="<u4").tobytes())


def _grasps_bytes(b: SceneBundle) -> bytes:
    rec = np.zeros(len(b.grasp_poses), dtype=[("obj", "<u4"), ("contact", "<u4"), ("pose", "<f4", (12,))])
    rec["obj"] = b.grasp_object_ids
    rec["contact"] = b.grasp_contacts
    rec["pose"] = b.grasp_poses
    return rec.tobytes()


def _mask_bytes(b: SceneBundle) -> bytes:
    P, N = b.placement_masks.shape
    return struct.pack("<II", P, N) + np.ascontiguousarray(b.placement_masks, dtype=np.uint8).tobytes()


def _manifest_body(b: SceneBundle) -> dict:
    counts = {str(inst.id): int(np.sum(b.grasp_object_ids == inst.id)) for inst in b.instances}
    return {
        "version": BUNDLE_VERSION,
        "seed": b.seed,
        "attempt": b.attempt,
        "config": b.config.to_dict(),
        "table": {"size_x": b.table.size_x, "size_y": b.table.size_y, "thickness": b.table.thickness},
        "camera": b.camera.to_dict(),
        "instances": [inst.to_dict() for inst in b.instances],
        "held_object": b.held.to_dict(),
        "ee_pose": pose_to_list(b.ee_pose),
        "num_points": int(len(b.points)),
        "grasp_counts": counts,
        "num_bins": int(b.placement_masks.shape[0]),
    }


def serialize(bundle: SceneBundle, path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    payloads = {"points.bin": _points_bytes(bundle), "grasps.bin": _grasps_bytes(bundle),
                "placemask.bin": _mask_bytes(bundle)}
    manifest = _manifest_body(bundle)
    manifest["checksums"] = {k: hashlib.sha256(v).hexdigest() for k, v in payloads.items()}
    for name, data in payloads.items():
        (path / name).write_bytes(data)
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return path


def _read_checked(path: Path, name: str, expected: str) -> bytes:
    f = path / name
    if not f.exists():
        raise BundleError(f"{f}: missing")
    data = f.read_bytes()
    if hashlib.sha256(data).hexdigest() != expected:
        raise BundleError(f"{f}: checksum mismatch")
    return data


def deserialize(path) -> SceneBundle:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except FileNotFoundError:
        raise BundleError(f"{path}: no manifest.json") from None
    except json.JSONDecodeError as exc:
        raise BundleError(f"{path}: unreadable manifest ({exc})") from None
    if manifest.get("version") != BUNDLE_VERSION:
        raise BundleError(f"{path}: bundle version {manifest.get('version')} != {BUNDLE_VERSION}")
    sums = manifest.get("checksums", {})
    raw = {name: _read_checked(path, name, sums.get(name, "")) for name in BIN_FILES}

    data = raw["points.bin"]
    if len(data) < 4:
        raise BundleError("points.bin truncated")
    (n,) = struct.unpack_from("<I", data, 0)
    if len(data) != 4 + 16 * n:
        raise BundleError("points.bin truncated")
    points = np.frombuffer(data, dtype="<f4", count=3 * n, offset=4).reshape(n, 3).astype(np.float32)
    ids = np.frombuffer(data, dtype="<u4", count=n, offset=4 + 12 * n).astype(np.uint32)

    data = raw["grasps.bin"]
    if len(data) % 56:
        raise BundleError("grasps.bin truncated")
    rec = np.frombuffer(data, dtype=[("obj", "<u4"), ("contact", "<u4"), ("pose", "<f4", (12,))])

    data = raw["placemask.bin"]
    if len(data) < 8:
        raise BundleError("placemask.bin truncated")
    P, N = struct.unpack_from("<II", data, 0)
    if len(data) != 8 + P * N:
        raise BundleError("placemask.bin truncated")
    masks = np.frombuffer(data, dtype=np.uint8, offset=8).reshape(P, N).copy()
    if N != n:
        raise BundleError("placement masks and point cloud disagree on N")
    if len(rec) and int(rec["contact"].max()) >= n:
        raise BundleError("grasp contact index out of range")

    cfg = GenConfig.from_dict(manifest["config"])
    t = manifest["table"]
    return SceneBundle(
        seed=int(manifest["seed"]), attempt=int(manifest["attempt"]), config=cfg,
        table=Table(float(t["size_x"]), float(t["size_y"]), float(t["thickness"])),
        instances=[ObjectInstance.from_dict(d) for d in manifest["instances"]],
        held=ObjectInstance.from_dict(manifest["held_object"]),
        ee_pose=pose_from_list(manifest["ee_pose"]),
        camera=VirtualCamera.from_dict(manifest["camera"]),
        points=points, point_ids=ids,
        grasp_object_ids=rec["obj"].astype(np.uint32), grasp_contacts=rec["contact"].astype(np.uint32),
        grasp_poses=rec["pose"].astype(np.float32).reshape(-1, 12), placement_masks=masks)


def bundle_checksums(path) -> dict:
    path = Path(path)
    return {name: hashlib.sha256((path / name).read_bytes()).hexdigest()
            for name in ("manifest.json",) + BIN_FILES}


def list_bundles(root) -> list:
    root = Path(root)
    return sorted(p for p in root.iterdir() if (p / "manifest.json").exists())
