"""Gradient-based 6D pose refinement from 2D-3D correspondences.

The pose is parameterized as a two-vector (Gram-Schmidt) rotation plus an
Euclidean translation and fitted by minimizing the summed (smoothed) L2
reprojection error of the lifted 3D reference points against the matched 2D
query pixels, using full-batch adaptive-moment updates with early stopping.
The returned translation inherits whatever scale the 3D points carry.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import (
    CameraIntrinsics,
    RigidPose,
    Rotation6D,
    matrix_to_rot6d,
    rot6d_to_matrix,
    unproject,
)

__all__ = [
    "Correspondence2D3D",
    "RefinementProblem",
    "OptimizerConfig",
    "RefinementResult",
    "DivergenceError",
    "reprojection_loss",
    "loss_gradient",
    "refine_pose",
    "lift_pixel_pairs",
    "recover_scale",
]

# Camera-frame depth is clamped here during projection; points behind the
# camera additionally pay a linear hinge penalty so the loss stays finite and
# keeps a restoring gradient.
DEPTH_CLAMP = 1e-6
BEHIND_CAMERA_PENALTY = 1e3

DIVERGENCE_LOSS = 1e12


class DivergenceError(RuntimeError):
    """Optimizer loss exceeded the divergence threshold."""


@dataclass(frozen=True)
class Correspondence2D3D:
    """A query pixel paired with a 3D point from the reference model."""

    query_px: tuple[float, float]
    ref_world: tuple[float, float, float]

    def __post_init__(self):
        qp = (float(self.query_px[0]), float(self.query_px[1]))
        rw = tuple(float(c) for c in self.ref_world)
        if len(rw) != 3:
            raise ValueError("ref_world must be a 3-vector")
        if not all(np.isfinite(qp)) or not all(np.isfinite(rw)):
            raise ValueError("correspondence components must be finite")
        object.__setattr__(self, "query_px", qp)
        object.__setattr__(self, "ref_world", rw)


@dataclass(frozen=True)
class RefinementProblem:
    """Correspondences, query intrinsics and the coarse starting pose."""

    intrinsics_q: CameraIntrinsics
    correspondences: tuple[Correspondence2D3D, ...]
    initial_pose: RigidPose
    min_correspondences: int = 4

    def __post_init__(self):
        corrs = tuple(self.correspondences)
        if len(corrs) < self.min_correspondences:
            raise ValueError(
                f"need at least {self.min_correspondences} correspondences, "
                f"got {len(corrs)}"
            )
        object.__setattr__(self, "correspondences", corrs)

    def points_3d(self) -> np.ndarray:
        return np.array([c.ref_world for c in self.correspondences], dtype=float)

    def pixels_2d(self) -> np.ndarray:
        return np.array([c.query_px for c in self.correspondences], dtype=float)


@dataclass(frozen=True)
class OptimizerConfig:
    """Adaptive-moment optimizer settings with loss-plateau early stopping."""

    max_iters: int = 1000
    learning_rate: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    early_stop_rel_tol: float = 1e-6
    early_stop_patience: int = 20
    loss_smoothing_eps: float = 1e-12

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        for name in ("learning_rate", "eps_adam", "early_stop_rel_tol", "loss_smoothing_eps"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ValueError("beta1 and beta2 must be in (0, 1)")
        if self.early_stop_patience < 1:
            raise ValueError("early_stop_patience must be >= 1")


@dataclass(frozen=True)
class RefinementResult:
    """Refined pose plus the optimizer trace.

    ``pose`` is the best-loss iterate, not necessarily the last one. The
    translation is metric only if the 3D points were metric; otherwise it is
    correct up to the model's global scale (see :func:`recover_scale`).
    """

    pose: RigidPose
    loss_trace: np.ndarray
    iterations_run: int
    converged: bool
    best_loss: float
    best_iteration: int
    scale_note: str = "translation inherits the scale of the reference 3D points"

    def __post_init__(self):
        trace = np.asarray(self.loss_trace, dtype=float)
        trace.flags.writeable = False
        object.__setattr__(self, "loss_trace", trace)
        if len(trace) != self.iterations_run:
            raise ValueError("loss_trace length must equal iterations_run")
        if len(trace) and self.best_loss > trace[0]:
            raise ValueError("best loss cannot exceed the initial loss")


def _loss_and_grad(
    theta: np.ndarray,
    X: np.ndarray,
    px: np.ndarray,
    K: CameraIntrinsics,
    smoothing_eps: float,
    want_grad: bool,
) -> tuple[float, np.ndarray | None]:
    """Smoothed reprojection loss and its gradient wrt (a1, a2, t).

    Vectorized over correspondences. Depth is clamped at DEPTH_CLAMP inside
    the projection; points behind that plane add a hinge penalty with a
    constant restoring gradient instead of raising.
    """
    a1, a2, t = theta[0:3], theta[3:6], theta[6:9]

    # Gram-Schmidt with intermediates kept for the backward pass.
    n1 = np.linalg.norm(a1)
    if n1 <= 1e-12:
        raise ValueError("a1 is numerically zero")
    b1 = a1 / n1
    dot12 = np.dot(b1, a2)
    u = a2 - dot12 * b1
    nu = np.linalg.norm(u)
    if nu <= 1e-12:
        raise ValueError("a1 and a2 are numerically collinear")
    b2 = u / nu
    b3 = np.cross(b1, b2)
    R = np.column_stack([b1, b2, b3])

    cam = X @ R.T + t
    z = cam[:, 2]
    z_eff = np.maximum(z, DEPTH_CLAMP)
    u_px = K.fx * cam[:, 0] / z_eff + K.cx
    v_px = K.fy * cam[:, 1] / z_eff + K.cy
    res = np.column_stack([u_px, v_px]) - px
    per_point = np.sqrt(np.einsum("ij,ij->i", res, res) + smoothing_eps)

    behind = z < DEPTH_CLAMP
    penalty = BEHIND_CAMERA_PENALTY * np.maximum(0.0, DEPTH_CLAMP - z)
    loss = float(per_point.sum() + penalty.sum())
    if not want_grad:
        return loss, None

    # d(loss)/d(residual), then through the pinhole Jacobian to camera points.
    g_res = res / per_point[:, None]
    gx = K.fx * g_res[:, 0] / z_eff
    gy = K.fy * g_res[:, 1] / z_eff
    gz = np.where(
        behind,
        0.0,
        -(K.fx * cam[:, 0] * g_res[:, 0] + K.fy * cam[:, 1] * g_res[:, 1]) / z_eff**2,
    )
    gz = gz - BEHIND_CAMERA_PENALTY * behind
    g_cam = np.column_stack([gx, gy, gz])

    g_t = g_cam.sum(axis=0)
    G = g_cam.T @ X  # d(loss)/dR, columns are gradients wrt b1, b2, b3
    g_b1 = G[:, 0]
    g_b2 = G[:, 1]
    g_b3 = G[:, 2]

    # b3 = b1 x b2
    g_b1 = g_b1 + np.cross(b2, g_b3)
    g_b2 = g_b2 + np.cross(g_b3, b1)

    # b2 = u / |u|
    g_u = (g_b2 - np.dot(g_b2, b2) * b2) / nu

    # u = a2 - (b1 . a2) b1
    g_a2 = g_u - np.dot(g_u, b1) * b1
    g_b1 = g_b1 - np.dot(g_u, b1) * a2 - dot12 * g_u

    # b1 = a1 / |a1|
    g_a1 = (g_b1 - np.dot(g_b1, b1) * b1) / n1

    return loss, np.concatenate([g_a1, g_a2, g_t])


def reprojection_loss(
    rot: Rotation6D,
    t,
    prob: RefinementProblem,
    smoothing_eps: float = OptimizerConfig.loss_smoothing_eps,
) -> float:
    """Sum over correspondences of sqrt(|pi(R X + t) - x_q|^2 + eps), pixels."""
    t = np.asarray(t, dtype=float).reshape(3)
    theta = np.concatenate([rot.a1, rot.a2, t])
    loss, _ = _loss_and_grad(
        theta, prob.points_3d(), prob.pixels_2d(), prob.intrinsics_q,
        smoothing_eps, want_grad=False,
    )
    return loss


def loss_gradient(
    rot: Rotation6D,
    t,
    prob: RefinementProblem,
    smoothing_eps: float = OptimizerConfig.loss_smoothing_eps,
) -> np.ndarray:
    """Analytic gradient of :func:`reprojection_loss` wrt (a1, a2, t), a 9-vector."""
    t = np.asarray(t, dtype=float).reshape(3)
    theta = np.concatenate([rot.a1, rot.a2, t])
    _, grad = _loss_and_grad(
        theta, prob.points_3d(), prob.pixels_2d(), prob.intrinsics_q,
        smoothing_eps, want_grad=True,
    )
    return grad


def refine_pose(prob: RefinementProblem, cfg: OptimizerConfig | None = None) -> RefinementResult:
    """Minimize the reprojection loss over rotation and translation.

    Starts from the problem's coarse pose, runs adaptive-moment updates with
    bias correction, stops early once the per-iteration relative loss
    improvement stays below ``early_stop_rel_tol`` for
    ``early_stop_patience`` consecutive iterations, and returns the
    best-loss iterate. Deterministic for identical inputs and config.
    """
    if cfg is None:
        cfg = OptimizerConfig()

    X = prob.points_3d()
    px = prob.pixels_2d()
    K = prob.intrinsics_q

    rot0 = matrix_to_rot6d(prob.initial_pose.rotation)
    theta = np.concatenate([rot0.a1, rot0.a2, prob.initial_pose.translation])

    m = np.zeros(9)
    v = np.zeros(9)
    trace = []
    best_loss = np.inf
    best_theta = theta.copy()
    best_iteration = 0
    prev_loss = np.inf
    stall = 0
    converged = False

    for it in range(1, cfg.max_iters + 1):
        loss, grad = _loss_and_grad(theta, X, px, K, cfg.loss_smoothing_eps, True)
        if not np.isfinite(loss) or loss > DIVERGENCE_LOSS:
            raise DivergenceError(
                f"loss {loss:.3e} exceeded {DIVERGENCE_LOSS:.0e} at iteration {it}"
            )
        trace.append(loss)

        # Improvement is measured against the previous iteration; increases
        # count as stalls, but the descending half of an oscillation resets.
        if prev_loss - loss > cfg.early_stop_rel_tol * max(prev_loss, 1e-30):
            stall = 0
        else:
            stall += 1
        prev_loss = loss
        if loss < best_loss:
            best_loss = loss
            best_theta = theta.copy()
            best_iteration = it
        if stall >= cfg.early_stop_patience:
            converged = True
            break

        m = cfg.beta1 * m + (1.0 - cfg.beta1) * grad
        v = cfg.beta2 * v + (1.0 - cfg.beta2) * grad * grad
        m_hat = m / (1.0 - cfg.beta1**it)
        v_hat = v / (1.0 - cfg.beta2**it)
        theta = theta - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.eps_adam)

    pose = RigidPose(
        rotation=rot6d_to_matrix(Rotation6D(best_theta[0:3], best_theta[3:6])),
        translation=best_theta[6:9],
    )
    return RefinementResult(
        pose=pose,
        loss_trace=np.array(trace),
        iterations_run=len(trace),
        converged=converged,
        best_loss=float(best_loss),
        best_iteration=best_iteration,
    )


def lift_pixel_pairs(pairs, depth, K: CameraIntrinsics, ref_pose: RigidPose):
    """Lift matched (query_px, ref_px) pairs into 2D-3D correspondences.

    ``depth`` is the reference view's depth map; each reference pixel is
    rounded to the nearest integer pixel and unprojected at that pixel's
    depth. Pairs whose reference pixel has no surface depth are dropped.
    """
    out = []
    for query_px, ref_px in pairs:
        u = round(float(ref_px[0]))
        v = round(float(ref_px[1]))
        d = depth.at_pixel((u, v))
        if d <= 0.0:
            continue
        X = unproject(np.array([u, v], dtype=float), d, K, ref_pose)
        out.append(
            Correspondence2D3D((float(query_px[0]), float(query_px[1])), tuple(X))
        )
    return tuple(out)


def recover_scale(
    result: RefinementResult,
    query_depth_samples,
    prob: RefinementProblem,
    pixel_tol: float = 1e-6,
) -> float:
    """Global scale factor from metric query depth samples.

    Each sample is (pixel, measured depth in meters); the pixel must coincide
    (within ``pixel_tol``) with a correspondence in the problem. Returns the
    median over samples of measured depth / predicted camera-frame depth.
    Multiplying the translation and the model points by this factor makes the
    predicted depths match the measurements in the median.
    """
    samples = list(query_depth_samples)
    if not samples:
        raise ValueError("need at least one depth sample")

    R = result.pose.rotation
    t = result.pose.translation
    pixels = prob.pixels_2d()
    points = prob.points_3d()
    pred_z = points @ R[2, :] + t[2]

    ratios = []
    for px, measured in samples:
        px = np.asarray(px, dtype=float).reshape(2)
        measured = float(measured)
        if not np.isfinite(measured) or measured <= 0:
            continue
        dists = np.abs(pixels - px).max(axis=1)
        idx = int(np.argmin(dists))
        if dists[idx] > pixel_tol:
            continue
        if pred_z[idx] <= 0:
            continue
        ratios.append(measured / pred_z[idx])
    if not ratios:
        raise ValueError("no usable depth samples (unmatched pixels or non-positive predicted depth)")
    return float(np.median(ratios))
