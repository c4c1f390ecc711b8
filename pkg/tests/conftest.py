"""Shared scene fixtures."""

from pathlib import Path

import numpy as np
import pytest

from src.exceptions import SynthesisError
from src.models import CameraIntrinsics, Frame, PointCloud, Pose, Scene, SyntheticSpec
from src.synth import synth_scene

SMALL_SPEC = {"object_count": 3, "frame_count": 6, "resolution": (320, 240)}


def make_synthetic_scene(root: Path, first_seed: int = 0, **overrides) -> Path:
    """First satisfiable small synthetic scene at or after ``first_seed``."""
    params = {**SMALL_SPEC, **overrides}
    for seed in range(first_seed, first_seed + 25):
        try:
            return synth_scene(SyntheticSpec(seed=seed, **params), root / f"scene_{seed:04d}")
        except SynthesisError:
            continue
    raise RuntimeError("no satisfiable synthetic scene")


def grid_scene(scene_id: str = "tiny") -> Scene:
    """
    8x6 camera two metres above a z = 0 grid with one point per pixel, plus
    one raised point at (0.1, 0.1, 1) occluding the grid point (0.3, 0.1, 0).
    """
    k = CameraIntrinsics(fx=10.0, fy=10.0, cx=4.0, cy=3.0, width=8, height=6)
    pose = Pose.look_at(np.array([0.0, 0.0, 2.0]), np.zeros(3), up=(0.0, 1.0, 0.0))
    xs = np.round(np.arange(-0.7, 0.71, 0.2), 10)
    ys = np.round(np.arange(-0.5, 0.51, 0.2), 10)
    gx, gy = np.meshgrid(xs, ys)
    grid = np.column_stack([gx.ravel(), gy.ravel(), np.zeros(gx.size)])
    positions = np.vstack([grid, [[0.1, 0.1, 1.0]]])
    rng = np.random.default_rng(0)
    colors = rng.integers(0, 256, size=(len(positions), 3))
    frame = Frame(
        frame_id=0,
        rgb=rng.integers(0, 256, size=(6, 8, 3)),
        depth=np.full((6, 8), 2.0),
        pose=pose,
        intrinsics=k,
    )
    cloud = PointCloud(positions=positions, colors=colors)
    return Scene(cloud=cloud, frames=[frame], scene_id=scene_id)


@pytest.fixture
def tiny_scene() -> Scene:
    return grid_scene()


@pytest.fixture(scope="session")
def synthetic_scene(tmp_path_factory) -> Path:
    """A small synthetic scene directory shared by the whole session."""
    return make_synthetic_scene(tmp_path_factory.mktemp("synthetic"))


@pytest.fixture(scope="session")
def segmented_scene(synthetic_scene):
    """Pipeline and Stage-1 result for :func:`synthetic_scene`."""
    from src.pipeline import GroundingPipeline

    pipeline = GroundingPipeline()
    return pipeline, pipeline.load(synthetic_scene)
