"""Rotation parameterization and camera geometry walkthrough.

Shows the 6D rotation encoding round-tripping through Gram-Schmidt, the
geodesic metric used for every angle report, and the pinhole camera model
with its project/unproject round trip.
"""

import numpy as np

from poselift.geometry import (
    CameraIntrinsics,
    RigidPose,
    Rotation6D,
    SphericalCamera,
    geodesic_distance,
    matrix_to_rot6d,
    project,
    random_rotation,
    relative_spherical,
    rot6d_to_matrix,
    spherical_to_pose,
    unproject,
)

rng = np.random.default_rng(7)

# --- 6D rotation encoding ------------------------------------------------
# A rotation is stored as its first two matrix columns; Gram-Schmidt
# recovers the matrix. The encoding is continuous, which is what lets a
# first-order optimizer walk through it without hitting parameterization
# seams.
R = random_rotation(rng)
r6 = matrix_to_rot6d(R)
back = rot6d_to_matrix(r6)
print("round trip geodesic error:", geodesic_distance(R, back), "rad")

# Any positive rescaling of the two columns, and any shear of the second
# along the first, lands on the same rotation.
warped = Rotation6D(3.0 * r6.a1, 0.25 * r6.a2 + 1.5 * r6.a1)
print("scale/shear drift:", np.abs(rot6d_to_matrix(warped) - back).max())

# The geodesic metric is the rotation angle between two frames.
Rz10 = rot6d_to_matrix(
    matrix_to_rot6d(
        np.array(
            [
                [np.cos(np.radians(10)), -np.sin(np.radians(10)), 0],
                [np.sin(np.radians(10)), np.cos(np.radians(10)), 0],
                [0, 0, 1],
            ]
        )
    )
)
print("10 deg z-rotation measures:", np.degrees(geodesic_distance(np.eye(3), Rz10)))

# --- Viewing-sphere cameras ----------------------------------------------
# Reference views live on a sphere around the object: (theta, phi, radius)
# maps to a look-at pose with x_cam = R @ X_world + t.
cam = SphericalCamera(theta=0.6 * np.pi, phi=1.0, radius=2.5)
pose = spherical_to_pose(cam)
print("camera center distance:", np.linalg.norm(pose.rotation.T @ -pose.translation))

# relative_spherical gives (d_theta, d_phi, d_radius) between viewpoints.
cam2 = SphericalCamera(theta=0.6 * np.pi, phi=1.3, radius=2.5)
d_theta, d_phi, d_radius = relative_spherical(cam, cam2)
print("azimuth offset:", np.degrees(d_phi), "deg, radius offset:", d_radius)
pose2 = spherical_to_pose(cam2)
print("pose geodesic:", np.degrees(geodesic_distance(pose.rotation, pose2.rotation)), "deg")

# --- Pinhole projection --------------------------------------------------
K = CameraIntrinsics(fx=140.0, fy=140.0, cx=63.5, cy=63.5, width=128, height=128)
X = rng.uniform(-0.4, 0.4, size=(5, 3))
px = project(K, pose, X)
print("projected pixels:\n", np.round(px, 2))

# Unprojecting each pixel at its camera-frame depth reproduces the points.
depths = (pose.transform(X))[:, 2]
X_back = np.array([unproject(p, d, K, pose) for p, d in zip(px, depths)])
print("unprojection max error:", np.abs(X_back - X).max())

# A pose built from an identity rotation at the origin makes unproject
# return camera-frame points directly; that is how lifted query points are
# expressed before alignment.
identity = RigidPose(np.eye(3), np.zeros(3))
print("camera-frame lift of first pixel:", unproject(px[0], depths[0], K, identity))
