"""Procedural tabletop scenes with analytic grasp and placement labels."""
from .bundle import (BUNDLE_VERSION, BundleError, GenerationError, SceneBundle, bundle_checksums, deserialize,
                     generate_scene, list_bundles, serialize)
from .labels import (SceneGeometry, grasp_candidates, held_object_cloud, label_grasps, label_placements,
                     placed_object_pose)
from .render import RenderError, VirtualCamera, look_at, render_pointcloud
from .scene import GenConfig, Layout, ObjectInstance, PlacementExhausted, Table, sample_layout

__all__ = [
    "BUNDLE_VERSION", "BundleError", "GenerationError", "SceneBundle", "bundle_checksums", "deserialize",
    "generate_scene", "list_bundles", "serialize", "SceneGeometry", "grasp_candidates", "held_object_cloud",
    "label_grasps", "label_placements", "placed_object_pose", "RenderError", "VirtualCamera", "look_at",
    "render_pointcloud", "GenConfig", "Layout", "ObjectInstance", "PlacementExhausted", "Table", "sample_layout",
]
