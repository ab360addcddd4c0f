"""Camera models, rotation parameterizations and rigid-body geometry.

Conventions used throughout the package:

* Extrinsics are world-to-camera: ``x_cam = R @ X_world + t``. The camera
  looks down its own +z axis, +x is right and +y is down in the image.
* Pixel coordinates are (x, y) with integer coordinates at pixel centers,
  x in [0, width - 1] and y in [0, height - 1].
* Spherical camera coordinates (theta, phi, radius) place the camera at
  ``(r sin(theta) cos(phi), r sin(theta) sin(phi), r cos(theta))`` looking
  at the world origin, with roll fixed by the world +z up vector (world +x
  at the poles).
* Angles are radians unless a function name says otherwise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "CameraIntrinsics",
    "RigidPose",
    "SphericalCamera",
    "Rotation6D",
    "rot6d_to_matrix",
    "matrix_to_rot6d",
    "geodesic_distance",
    "axis_angle_matrix",
    "random_rotation",
    "spherical_to_pose",
    "pose_to_spherical",
    "relative_spherical",
    "project",
    "unproject",
    "umeyama_align",
    "wrap_angle",
]

# Per-entry tolerance for R^T R = I and |det(R) - 1|.
ROTATION_ATOL = 1e-9

# Norm floor below which the Gram-Schmidt step is considered degenerate.
DEGENERACY_EPS = 1e-12


def _as_float_array(x, shape, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=float)
    if arr.shape != shape:
        raise ValueError(f"{name} must have shape {shape}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} must be finite")
    return arr


def _check_rotation(R: np.ndarray, name: str = "rotation") -> np.ndarray:
    R = _as_float_array(R, (3, 3), name)
    err = np.abs(R.T @ R - np.eye(3)).max()
    if err > ROTATION_ATOL:
        raise ValueError(f"{name} is not orthonormal (max |R^T R - I| = {err:.3e})")
    det = np.linalg.det(R)
    if abs(det - 1.0) > ROTATION_ATOL:
        raise ValueError(f"{name} must have det +1, got {det!r}")
    return R


def wrap_angle(angle: float) -> float:
    """Wrap an angle to the canonical range [-pi, pi)."""
    return float((angle + math.pi) % (2.0 * math.pi) - math.pi)


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics. Focal lengths and principal point in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    def matrix(self) -> np.ndarray:
        """3x3 calibration matrix."""
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )


@dataclass(frozen=True)
class RigidPose:
    """World-to-camera rigid transform: ``x_cam = rotation @ X + translation``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = _check_rotation(self.rotation)
        t = _as_float_array(self.translation, (3,), "translation")
        R = R.copy()
        t = t.copy()
        R.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    def camera_center(self) -> np.ndarray:
        """Camera center in world coordinates, -R^T t."""
        return -self.rotation.T @ self.translation

    def forward_axis(self) -> np.ndarray:
        """Optical axis (+z of the camera frame) in world coordinates."""
        return self.rotation[2, :].copy()

    def transform(self, points: np.ndarray) -> np.ndarray:
        """Map world points (3,) or (n, 3) into the camera frame."""
        pts = np.asarray(points, dtype=float)
        return pts @ self.rotation.T + self.translation


@dataclass(frozen=True)
class SphericalCamera:
    """Object-centric camera position: polar angle, azimuth, distance to origin.

    ``phi`` is canonicalized into [-pi, pi) on construction.
    """

    theta: float
    phi: float
    radius: float

    def __post_init__(self):
        if not np.isfinite([self.theta, self.phi, self.radius]).all():
            raise ValueError("spherical coordinates must be finite")
        if not 0.0 <= self.theta <= math.pi:
            raise ValueError(f"theta must be in [0, pi], got {self.theta!r}")
        if not self.radius > 0.0:
            raise ValueError(f"radius must be positive, got {self.radius!r}")
        object.__setattr__(self, "phi", wrap_angle(self.phi))

    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        st = math.sin(self.theta)
        return self.radius * np.array(
            [st * math.cos(self.phi), st * math.sin(self.phi), math.cos(self.theta)]
        )


@dataclass(frozen=True)
class Rotation6D:
    """Continuous two-vector rotation parameterization.

    The rotation is recovered by Gram-Schmidt: normalize ``a1``, orthogonalize
    ``a2`` against it, complete with the cross product. Unconstrained values
    are valid as long as ``a1`` is nonzero and not collinear with ``a2``.
    """

    a1: np.ndarray
    a2: np.ndarray

    def __post_init__(self):
        a1 = _as_float_array(self.a1, (3,), "a1").copy()
        a2 = _as_float_array(self.a2, (3,), "a2").copy()
        if np.linalg.norm(a1) <= DEGENERACY_EPS:
            raise ValueError("a1 is numerically zero")
        if np.linalg.norm(np.cross(a1, a2)) <= DEGENERACY_EPS:
            raise ValueError("a1 and a2 are numerically collinear")
        a1.flags.writeable = False
        a2.flags.writeable = False
        object.__setattr__(self, "a1", a1)
        object.__setattr__(self, "a2", a2)

    def as_vector(self) -> np.ndarray:
        """Concatenated (a1, a2) as a 6-vector."""
        return np.concatenate([self.a1, self.a2])

    @classmethod
    def from_vector(cls, v) -> "Rotation6D":
        v = _as_float_array(v, (6,), "rotation 6-vector")
        return cls(v[:3], v[3:])


def rot6d_to_matrix(r: Rotation6D) -> np.ndarray:
    """Gram-Schmidt a two-vector parameterization into a rotation matrix.

    Columns of the result are (b1, b2, b1 x b2) with b1 = a1/|a1| and b2 the
    unit residual of a2 after removing its b1 component.
    """
    b1 = r.a1 / np.linalg.norm(r.a1)
    u = r.a2 - np.dot(b1, r.a2) * b1
    nu = np.linalg.norm(u)
    if nu <= DEGENERACY_EPS:
        raise ValueError("a1 and a2 are numerically collinear")
    b2 = u / nu
    b3 = np.cross(b1, b2)
    return np.column_stack([b1, b2, b3])


def matrix_to_rot6d(R: np.ndarray) -> Rotation6D:
    """Inverse of :func:`rot6d_to_matrix`: read off the first two columns."""
    R = _check_rotation(R)
    return Rotation6D(R[:, 0], R[:, 1])


def geodesic_distance(R1: np.ndarray, R2: np.ndarray) -> float:
    """Angle of the relative rotation between two rotation matrices, in [0, pi].

    atan2 of (sin, cos) read off the relative rotation: the skew part keeps
    full precision near 0 where arccos of the clamped trace loses ~1e-8.
    """
    R1 = _check_rotation(R1, "R1")
    R2 = _check_rotation(R2, "R2")
    R = R1.T @ R2
    cos_angle = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    sin_angle = 0.5 * math.sqrt(
        (R[2, 1] - R[1, 2]) ** 2 + (R[0, 2] - R[2, 0]) ** 2 + (R[1, 0] - R[0, 1]) ** 2
    )
    return float(math.atan2(sin_angle, cos_angle))


def axis_angle_matrix(axis, angle: float) -> np.ndarray:
    """Rotation matrix for a rotation of ``angle`` radians about ``axis``.

    Rodrigues formula; the axis need not be unit length but must be nonzero.
    """
    axis = _as_float_array(axis, (3,), "axis")
    n = np.linalg.norm(axis)
    if n <= DEGENERACY_EPS:
        raise ValueError("rotation axis is numerically zero")
    x, y, z = axis / n
    K = np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])
    return np.eye(3) + math.sin(angle) * K + (1.0 - math.cos(angle)) * (K @ K)


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Haar-uniform random rotation matrix from a normalized quaternion."""
    q = rng.normal(size=4)
    w, x, y, z = q / np.linalg.norm(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def _look_at_rotation(center: np.ndarray) -> np.ndarray:
    """World-to-camera rotation for a camera at ``center`` looking at the origin.

    Roll convention: world +z is up in the image; when the optical axis is
    parallel to +z (camera at a pole) the up vector falls back to world +x.
    """
    radius = np.linalg.norm(center)
    forward = -center / radius
    up = np.array([0.0, 0.0, 1.0])
    right = np.cross(forward, up)
    if np.linalg.norm(right) < 1e-12:
        up = np.array([1.0, 0.0, 0.0])
        right = np.cross(forward, up)
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    return np.vstack([right, down, forward])


def spherical_to_pose(s: SphericalCamera) -> RigidPose:
    """Build the origin-looking world-to-camera pose of a spherical camera."""
    center = s.center()
    R = _look_at_rotation(center)
    return RigidPose(R, -R @ center)


def pose_to_spherical(p: RigidPose, axis_tol: float = 1e-6) -> SphericalCamera:
    """Recover spherical coordinates from an origin-looking pose.

    The optical axis must pass through the world origin within ``axis_tol``
    radians; roll is discarded, so the inverse map restores the pose exactly
    only for the canonical roll produced by :func:`spherical_to_pose`.
    """
    center = p.camera_center()
    radius = float(np.linalg.norm(center))
    if radius <= 0.0:
        raise ValueError("camera center coincides with the origin")
    forward = p.forward_axis()
    misalignment = math.acos(min(1.0, max(-1.0, float(np.dot(forward, -center / radius)))))
    if misalignment > axis_tol:
        raise ValueError(
            f"optical axis misses the origin by {misalignment:.3e} rad "
            f"(tolerance {axis_tol:.1e})"
        )
    theta = math.acos(min(1.0, max(-1.0, center[2] / radius)))
    phi = math.atan2(center[1], center[0])
    return SphericalCamera(theta=theta, phi=phi, radius=radius)


def relative_spherical(
    s1: SphericalCamera, s2: SphericalCamera
) -> tuple[float, float, float]:
    """Relative camera transform (d_theta, d_phi, d_radius) from s1 to s2.

    The azimuth difference is wrapped into [-pi, pi).
    """
    return (s2.theta - s1.theta, wrap_angle(s2.phi - s1.phi), s2.radius - s1.radius)


MIN_PROJECT_DEPTH = 1e-9


def project(K: CameraIntrinsics, p: RigidPose, X) -> np.ndarray:
    """Project world point(s) to pixel coordinates with perspective division.

    Accepts a single (3,) point or an (n, 3) batch and returns matching
    (2,) or (n, 2) pixels. Raises if any camera-frame depth is <= 1e-9.
    """
    X = np.asarray(X, dtype=float)
    single = X.ndim == 1
    pts = np.atleast_2d(X)
    if pts.shape[-1] != 3:
        raise ValueError(f"expected 3D points, got shape {X.shape}")
    cam = p.transform(pts)
    z = cam[:, 2]
    if np.any(z <= MIN_PROJECT_DEPTH):
        raise ValueError("point at or behind the camera (depth <= 1e-9)")
    px = np.column_stack(
        [K.fx * cam[:, 0] / z + K.cx, K.fy * cam[:, 1] / z + K.cy]
    )
    return px[0] if single else px


def unproject(x, depth, K: CameraIntrinsics, p: RigidPose) -> np.ndarray:
    """Lift pixel(s) at known camera-frame depth(s) back to world points.

    ``depth`` is the z coordinate in the camera frame (the depth-map value),
    not the distance along the ray. Inverse of :func:`project` wherever both
    are defined.
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    px = np.atleast_2d(x)
    if px.shape[-1] != 2:
        raise ValueError(f"expected 2D pixels, got shape {x.shape}")
    d = np.atleast_1d(np.asarray(depth, dtype=float))
    if d.shape != (px.shape[0],):
        raise ValueError("depth must provide one value per pixel")
    if not np.all(np.isfinite(d)) or np.any(d <= 0.0):
        raise ValueError("depth values must be finite and positive")
    if np.any(px[:, 0] < 0) or np.any(px[:, 0] > K.width - 1) or np.any(
        px[:, 1] < 0
    ) or np.any(px[:, 1] > K.height - 1):
        raise ValueError("pixel outside image bounds")
    cam = np.column_stack(
        [(px[:, 0] - K.cx) / K.fx * d, (px[:, 1] - K.cy) / K.fy * d, d]
    )
    world = (cam - p.translation) @ p.rotation
    return world[0] if single else world


def umeyama_align(
    A, B, with_scale: bool = False
) -> tuple[np.ndarray, np.ndarray, float]:
    """Closed-form least-squares similarity transform mapping A onto B.

    Returns (R, t, s) minimizing sum_i |s R a_i + t - b_i|^2, with the
    reflection case excluded by sign-correcting the smallest singular value.
    With ``with_scale`` off the scale is fixed at 1.

    Requires at least 3 non-collinear point pairs.
    """
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    if A.ndim != 2 or A.shape[1] != 3 or B.shape != A.shape:
        raise ValueError(f"expected matching (n, 3) point sets, got {A.shape} vs {B.shape}")
    n = A.shape[0]
    if n < 3:
        raise ValueError("need at least 3 correspondences")
    if not (np.all(np.isfinite(A)) and np.all(np.isfinite(B))):
        raise ValueError("point sets must be finite")

    mu_a = A.mean(axis=0)
    mu_b = B.mean(axis=0)
    Ac = A - mu_a
    Bc = B - mu_b

    cov = Bc.T @ Ac / n
    U, D, Vt = np.linalg.svd(cov)
    # Rank < 2 means the points are collinear (or coincident): rotation about
    # the common axis is unobservable.
    if D[1] <= 1e-12 * max(1.0, D[0]):
        raise ValueError("degenerate point configuration (collinear or coincident)")

    S = np.ones(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2] = -1.0
    R = U @ np.diag(S) @ Vt

    if with_scale:
        var_a = (Ac**2).sum() / n
        s = float((D * S).sum() / var_a)
    else:
        s = 1.0
    t = mu_b - s * R @ mu_a
    return R, t, s
