import numpy as np
import pytest

from scaffold4d.distill import TaskSpec
from scaffold4d.se3 import Quaternion, SE3Pose
from scaffold4d.worldgen import (
    ObjectSpec,
    OrbitSpec,
    SyntheticSceneSpec,
    make_linear_track,
    make_static_track,
)


def random_pose(rng) -> SE3Pose:
    axis = rng.normal(size=3)
    angle = rng.uniform(-np.pi, np.pi)
    return SE3Pose(Quaternion.from_axis_angle(axis, angle), rng.normal(size=3))


def tiny_spec(seed=0, frames=4, counts=(60, 60), moving=True, dim=8, task_dim=8) -> SyntheticSceneSpec:
    """Small two-object scene for fast tests."""
    objects = [
        ObjectSpec("sphere", "apple", (0.8, 0.2, 0.2), counts[0], 1.2,
                   make_linear_track((-2.0, 0.0, 0.0), (1.6, 0.5, 0.0), frames) if moving
                   else make_static_track((-2.0, 0.0, 0.0), frames)),
        ObjectSpec("box", "crate", (0.2, 0.7, 0.3), counts[1], (0.9, 0.9, 0.9),
                   make_static_track((1.8, 0.4, -1.0), frames)),
    ]
    return SyntheticSceneSpec(
        seed=seed, objects=objects, frames=frames, orbit=OrbitSpec(),
        tasks=[TaskSpec("main", task_dim, 48, 48, "bilinear")],
        width=48, height=48, latent_dim=dim, k=3, nodes_per_object=5,
    )


@pytest.fixture(scope="session")
def tiny_world():
    from scaffold4d.worldgen import generate

    spec = tiny_spec()
    scene, scaffold, gt, cams = generate(spec)
    return spec, scene, scaffold, gt, cams
