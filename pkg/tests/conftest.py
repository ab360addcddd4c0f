"""Shared builders for seeded test problems."""

import numpy as np
import pytest

from poselift.geometry import (
    CameraIntrinsics,
    RigidPose,
    axis_angle_matrix,
    geodesic_distance,
    project,
    random_rotation,
    spherical_to_pose,
    unproject,
)
from poselift.refinement import Correspondence2D3D, RefinementProblem
from poselift.synth import (
    DEFAULT_INTRINSICS_KWARGS,
    GridSpec,
    SphericalCamera,
    random_scene,
    render_depth,
    sample_reference_cameras,
)


@pytest.fixture
def intrinsics() -> CameraIntrinsics:
    return CameraIntrinsics(**DEFAULT_INTRINSICS_KWARGS)


def make_rng(*seed_parts) -> np.random.Generator:
    return np.random.default_rng(list(seed_parts))


def random_pose(rng, distance_range=(2.0, 3.0)) -> RigidPose:
    """Random rotation with the object kept in front of the camera."""
    R = random_rotation(rng)
    t = np.array([rng.uniform(-0.1, 0.1), rng.uniform(-0.1, 0.1),
                  rng.uniform(*distance_range)])
    return RigidPose(R, t)


def perturbed_pose(pose: RigidPose, rng, rot_deg: float, trans_frac: float) -> RigidPose:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    dR = axis_angle_matrix(axis, np.radians(rot_deg))
    dt = rng.normal(size=3)
    dt *= trans_frac * np.linalg.norm(pose.translation) / np.linalg.norm(dt)
    return RigidPose(dR @ pose.rotation, pose.translation + dt)


def exact_point_problem(K, rng, n_points=30, rot_deg=15.0, trans_frac=0.05):
    """Noise-free 2D-3D problem: random points projected with a known pose.

    Returns (problem, ground-truth pose). The initial pose is the ground
    truth perturbed by rot_deg / trans_frac.
    """
    gt = random_pose(rng)
    X = rng.uniform(-0.5, 0.5, size=(n_points, 3))
    px = project(K, gt, X)
    corrs = tuple(
        Correspondence2D3D(tuple(p), tuple(x)) for p, x in zip(px, X)
    )
    init = perturbed_pose(gt, rng, rot_deg, trans_frac)
    return RefinementProblem(K, corrs, init), gt


def scene_view_problem(K, seed, rot_deg=15.0, trans_frac=0.05, n_refs=50,
                       grid=None, min_corrs=20):
    """Noise-free scene problem lifted from a rendered reference depth map.

    Samples n_refs reference cameras, takes the one closest to a random
    query pose, lifts its grid-cell pixels through its depth map, and
    projects the lifted points into the query with the ground-truth pose.
    Returns (problem, ground-truth query pose, reference pose).
    """
    scene = random_scene(seed)
    rng = make_rng(seed, 900)
    cams = sample_reference_cameras(n_refs, rng)
    q_cam = SphericalCamera(
        theta=rng.uniform(0.25 * np.pi, 0.75 * np.pi),
        phi=rng.uniform(0.0, 2.0 * np.pi),
        radius=rng.uniform(2.35, 2.65),
    )
    q_pose = spherical_to_pose(q_cam)
    poses = [spherical_to_pose(c) for c in cams]
    ref_pose = min(poses, key=lambda p: geodesic_distance(p.rotation, q_pose.rotation))
    depth = render_depth(scene, K, ref_pose)
    grid = grid or GridSpec.default(K)
    centers = grid.cell_center_pixels().reshape(grid.grid_height, grid.grid_width, 2)

    corrs = []
    for x, y in centers[::2, ::2].reshape(-1, 2):
        d = depth.at_pixel((x, y))
        if d <= 0.0:
            continue
        world = unproject((float(x), float(y)), d, K, ref_pose)
        q_px = project(K, q_pose, world)
        if 0 <= q_px[0] < K.width and 0 <= q_px[1] < K.height:
            corrs.append(Correspondence2D3D(tuple(q_px), tuple(world)))
    if len(corrs) < min_corrs:
        raise AssertionError(f"scene {seed} produced only {len(corrs)} correspondences")
    init = perturbed_pose(q_pose, rng, rot_deg, trans_frac)
    return RefinementProblem(K, corrs, init), q_pose, ref_pose
