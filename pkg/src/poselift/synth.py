"""Analytic synthetic scenes with known poses, depth and matchable features.

Stands in for the learned parts of a real pipeline (novel-view synthesis,
dense feature extraction, depth reconstruction) at desk scale: spheres and
axis-aligned boxes are ray-cast in closed form, and every surface point
carries a deterministic descriptor of its canonical coordinates. Two views of
the same surface point therefore produce (noiselessly) identical descriptors,
so ground-truth correspondences exist by construction and every downstream
stage can be checked against an oracle.

A per-instance warp remaps world points to canonical coordinates, emulating
geometric variation within a category: the same canonical coordinate sits at
different 3D points on differently-warped instances.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .geometry import CameraIntrinsics, RigidPose, SphericalCamera, spherical_to_pose
from .matching import FeatureMap

__all__ = [
    "Sphere",
    "Box",
    "WarpParams",
    "SyntheticScene",
    "DepthMap",
    "GridSpec",
    "ReferenceView",
    "QueryView",
    "DatasetManifest",
    "canonical_coordinates",
    "surface_descriptors",
    "render_depth",
    "render_features",
    "sample_reference_cameras",
    "random_scene",
    "make_dataset",
    "DEFAULT_INTRINSICS",
]

# Scale of the random projection inside the descriptor embedding; larger
# values make descriptors vary faster across the surface.
DESCRIPTOR_BANDWIDTH = 3.0

# Fixed direction of the warp's driving sinusoid.
_WARP_DIRECTION = np.array([1.0, 2.0, 3.0]) / math.sqrt(14.0)

# Hits closer than this along the ray are treated as misses (near clip).
RAY_EPS = 1e-9

DEFAULT_DESCRIPTOR_DIM = 64
# 64 cells over a 128 px image gives stride-2 grids; correspondence
# quantization at stride 4 dominates the refinement error budget.
DEFAULT_GRID_CELLS = 64

DEFAULT_INTRINSICS_KWARGS = dict(
    fx=140.0, fy=140.0, cx=63.5, cy=63.5, width=128, height=128
)


@dataclass(frozen=True)
class Sphere:
    center: tuple[float, float, float]
    radius: float

    def __post_init__(self):
        c = tuple(float(v) for v in self.center)
        r = float(self.radius)
        if len(c) != 3 or not all(np.isfinite(c)):
            raise ValueError("sphere center must be a finite 3-vector")
        if not (np.isfinite(r) and r > 0):
            raise ValueError("sphere radius must be positive")
        if math.hypot(*c) + r > 1.0 + 1e-9:
            raise ValueError("sphere must fit inside the unit ball")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "radius", r)


@dataclass(frozen=True)
class Box:
    """Axis-aligned box given by its center and positive half-extents."""

    center: tuple[float, float, float]
    half_extents: tuple[float, float, float]

    def __post_init__(self):
        c = tuple(float(v) for v in self.center)
        h = tuple(float(v) for v in self.half_extents)
        if len(c) != 3 or not all(np.isfinite(c)):
            raise ValueError("box center must be a finite 3-vector")
        if len(h) != 3 or not all(np.isfinite(h)) or min(h) <= 0:
            raise ValueError("box half-extents must be positive and finite")
        if math.hypot(*c) + math.hypot(*h) > 1.0 + 1e-9:
            raise ValueError("box must fit inside the unit ball")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "half_extents", h)


@dataclass(frozen=True)
class WarpParams:
    """Smooth radial deformation: scale by 1 + amplitude*sin(frequency * p.u).

    Amplitude 0 is the identity. Amplitude must stay below 1 so the scale
    factor is positive everywhere.
    """

    amplitude: float = 0.0
    frequency: float = 0.0

    def __post_init__(self):
        a, f = float(self.amplitude), float(self.frequency)
        if not (np.isfinite(a) and 0.0 <= a < 1.0):
            raise ValueError("warp amplitude must be in [0, 1)")
        if not (np.isfinite(f) and f >= 0.0):
            raise ValueError("warp frequency must be non-negative")
        object.__setattr__(self, "amplitude", a)
        object.__setattr__(self, "frequency", f)


@dataclass(frozen=True)
class SyntheticScene:
    """Analytic solids plus the descriptor embedding that textures them."""

    primitives: tuple
    descriptor_dim: int = DEFAULT_DESCRIPTOR_DIM
    descriptor_seed: int = 0
    warp: WarpParams = WarpParams()

    def __post_init__(self):
        prims = tuple(self.primitives)
        if not prims:
            raise ValueError("scene needs at least one primitive")
        for p in prims:
            if not isinstance(p, (Sphere, Box)):
                raise ValueError(f"unsupported primitive type {type(p).__name__}")
        if self.descriptor_dim < 1:
            raise ValueError("descriptor_dim must be >= 1")
        if self.descriptor_seed < 0:
            raise ValueError("descriptor_seed must be non-negative")
        object.__setattr__(self, "primitives", prims)


@dataclass(frozen=True)
class DepthMap:
    """Per-pixel camera-frame z depth; 0 marks pixels where no surface is hit.

    Metric depth is ``values * scale``; renderers write scale 1.
    """

    values: np.ndarray
    scale: float = 1.0

    def __post_init__(self):
        v = np.ascontiguousarray(np.asarray(self.values), dtype=np.float32)
        if v.ndim != 2:
            raise ValueError(f"depth values must be 2D, got shape {v.shape}")
        if not np.all(np.isfinite(v)) or np.any(v < 0):
            raise ValueError("depth values must be finite and >= 0")
        if not (np.isfinite(self.scale) and self.scale > 0):
            raise ValueError("depth scale must be positive")
        v.flags.writeable = False
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "scale", float(self.scale))

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    def at_pixel(self, px) -> float:
        """Metric depth at an integer pixel (x, y); 0 means no hit."""
        u, v = float(px[0]), float(px[1])
        iu, iv = round(u), round(v)
        if abs(u - iu) > 1e-6 or abs(v - iv) > 1e-6:
            raise ValueError(f"pixel {px!r} is not integer-valued")
        if not (0 <= iu < self.width and 0 <= iv < self.height):
            raise ValueError(f"pixel {px!r} outside {self.width}x{self.height} map")
        return float(self.values[iv, iu]) * self.scale


@dataclass(frozen=True)
class GridSpec:
    """Feature-grid geometry: cell (i, j) is centered at pixel
    (pixel_offset + j*pixel_stride, pixel_offset + i*pixel_stride)."""

    grid_height: int
    grid_width: int
    pixel_stride: float
    pixel_offset: float

    def __post_init__(self):
        if self.grid_height < 1 or self.grid_width < 1:
            raise ValueError("grid dimensions must be >= 1")
        if not self.pixel_stride >= 1:
            raise ValueError("pixel_stride must be >= 1")
        if not self.pixel_offset >= 0:
            raise ValueError("pixel_offset must be >= 0")

    @classmethod
    def default(cls, K: CameraIntrinsics, cells: int = DEFAULT_GRID_CELLS) -> "GridSpec":
        stride = max(1, min(K.width, K.height) // cells)
        return cls(cells, cells, float(stride), float(stride // 2))

    def cell_center_pixels(self) -> np.ndarray:
        """(grid_height*grid_width, 2) array of (x, y) centers, row-major."""
        xs = self.pixel_offset + self.pixel_stride * np.arange(self.grid_width)
        ys = self.pixel_offset + self.pixel_stride * np.arange(self.grid_height)
        u, v = np.meshgrid(xs, ys)
        return np.column_stack([u.ravel(), v.ravel()])

    def validate_against(self, K: CameraIntrinsics) -> None:
        max_x = self.pixel_offset + self.pixel_stride * (self.grid_width - 1)
        max_y = self.pixel_offset + self.pixel_stride * (self.grid_height - 1)
        if max_x > K.width - 1 or max_y > K.height - 1:
            raise ValueError(
                f"grid cell centers extend to ({max_x}, {max_y}), beyond the "
                f"{K.width}x{K.height} image"
            )


@dataclass(frozen=True)
class ReferenceView:
    view_id: str
    camera: SphericalCamera
    depth_file: str
    feature_file: str


@dataclass(frozen=True, eq=False)
class QueryView:
    view_id: str
    pose: RigidPose
    feature_file: str
    depth_file: str | None = None


@dataclass(frozen=True, eq=False)
class DatasetManifest:
    """Index of a generated dataset; file paths are relative to ``root``."""

    scene: SyntheticScene
    intrinsics: CameraIntrinsics
    grid: GridSpec
    noise_sd: float
    category: str
    references: tuple
    queries: tuple
    query_warp: WarpParams | None = None
    root: Path | None = None

    def resolve(self, relpath: str) -> Path:
        if self.root is None:
            return Path(relpath)
        return Path(self.root) / relpath

    def reference_by_id(self, view_id: str) -> ReferenceView:
        for r in self.references:
            if r.view_id == view_id:
                return r
        raise KeyError(f"no reference view with id {view_id!r}")

    def query_by_id(self, view_id: str) -> QueryView:
        for q in self.queries:
            if q.view_id == view_id:
                return q
        raise KeyError(f"no query view with id {view_id!r}")


def canonical_coordinates(points, warp: WarpParams) -> np.ndarray:
    """Map world points (n, 3) to the instance's canonical coordinates.

    The warp scales each point radially by 1 + amplitude*sin(frequency * p.u)
    for a fixed direction u; zero amplitude is the exact identity.
    """
    p = np.asarray(points, dtype=float)
    along = (
        p[:, 0] * _WARP_DIRECTION[0]
        + p[:, 1] * _WARP_DIRECTION[1]
        + p[:, 2] * _WARP_DIRECTION[2]
    )
    factor = 1.0 + warp.amplitude * np.sin(warp.frequency * along)
    return p * factor[:, None]


def _descriptor_basis(dim: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    W = rng.normal(0.0, DESCRIPTOR_BANDWIDTH, size=(dim, 3))
    b = rng.uniform(0.0, 2.0 * math.pi, size=dim)
    return W, b


def surface_descriptors(points, scene: SyntheticScene) -> np.ndarray:
    """Noiseless descriptors (n, descriptor_dim) for world surface points.

    Descriptors depend only on the canonical coordinates, so instances that
    share canonical coordinates produce matching descriptors across views.
    """
    c = canonical_coordinates(points, scene.warp)
    W, b = _descriptor_basis(scene.descriptor_dim, scene.descriptor_seed)
    return np.sin(c @ W.T + b)


def _ray_directions(K: CameraIntrinsics, pose: RigidPose, pixels: np.ndarray):
    """World-frame origin and per-pixel ray directions with dz_cam = 1.

    Directions are not normalized: the hit parameter along them equals the
    camera-frame z depth. All arithmetic is elementwise so results for a
    pixel do not depend on which other pixels are in the batch.
    """
    u = pixels[:, 0]
    v = pixels[:, 1]
    dcx = (u - K.cx) / K.fx
    dcy = (v - K.cy) / K.fy
    R = pose.rotation
    dx = R[0, 0] * dcx + R[1, 0] * dcy + R[2, 0]
    dy = R[0, 1] * dcx + R[1, 1] * dcy + R[2, 1]
    dz = R[0, 2] * dcx + R[1, 2] * dcy + R[2, 2]
    return pose.camera_center(), np.column_stack([dx, dy, dz])


def _cast_rays(scene: SyntheticScene, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    """Nearest hit parameter per ray; +inf where nothing is hit."""
    dx, dy, dz = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    ox, oy, oz = (float(origin[0]), float(origin[1]), float(origin[2]))
    best = np.full(len(dirs), np.inf)

    # NaNs from misses (negative discriminants, 0/0 slab corners) are routed
    # to False by the comparisons below; silence the transient warnings.
    with np.errstate(divide="ignore", invalid="ignore"):
        for prim in scene.primitives:
            if isinstance(prim, Sphere):
                cx, cy, cz = prim.center
                ocx, ocy, ocz = ox - cx, oy - cy, oz - cz
                a = dx * dx + dy * dy + dz * dz
                b = 2.0 * (ocx * dx + ocy * dy + ocz * dz)
                c0 = ocx * ocx + ocy * ocy + ocz * ocz - prim.radius * prim.radius
                sq = np.sqrt(b * b - 4.0 * a * c0)
                s_near = (-b - sq) / (2.0 * a)
                s_far = (-b + sq) / (2.0 * a)
                s = np.where(s_near > RAY_EPS, s_near, s_far)
                hit = s > RAY_EPS
            else:
                cx, cy, cz = prim.center
                hx, hy, hz = prim.half_extents
                t1x = (cx - hx - ox) / dx
                t2x = (cx + hx - ox) / dx
                t1y = (cy - hy - oy) / dy
                t2y = (cy + hy - oy) / dy
                t1z = (cz - hz - oz) / dz
                t2z = (cz + hz - oz) / dz
                t_near = np.maximum(
                    np.maximum(np.minimum(t1x, t2x), np.minimum(t1y, t2y)),
                    np.minimum(t1z, t2z),
                )
                t_far = np.minimum(
                    np.minimum(np.maximum(t1x, t2x), np.maximum(t1y, t2y)),
                    np.maximum(t1z, t2z),
                )
                s = np.where(t_near > RAY_EPS, t_near, t_far)
                hit = (t_near <= t_far) & (t_far > RAY_EPS) & (s > RAY_EPS)
            s = np.where(hit, s, np.inf)
            best = np.minimum(best, s)
    return best


def render_depth(scene: SyntheticScene, K: CameraIntrinsics, p: RigidPose) -> DepthMap:
    """Ray-cast the scene into a full-resolution z-depth map (0 = no hit)."""
    u, v = np.meshgrid(np.arange(K.width, dtype=float), np.arange(K.height, dtype=float))
    pixels = np.column_stack([u.ravel(), v.ravel()])
    origin, dirs = _ray_directions(K, p, pixels)
    s = _cast_rays(scene, origin, dirs)
    values = np.where(np.isfinite(s), s, 0.0).reshape(K.height, K.width)
    return DepthMap(values)


def render_features(
    scene: SyntheticScene,
    K: CameraIntrinsics,
    p: RigidPose,
    noise_sd: float = 0.0,
    grid: GridSpec | tuple | None = None,
    rng: np.random.Generator | None = None,
) -> FeatureMap:
    """Descriptor grid for a view; cells whose center ray misses are masked.

    Casts the center ray of each grid cell with the same arithmetic as
    :func:`render_depth`, so a cell is foreground exactly when the rendered
    depth at its center pixel is positive. Descriptor noise is drawn from
    ``rng`` (seeded from the scene's descriptor seed when omitted); pass
    independent generators to decorrelate noise across views.
    """
    if scene.descriptor_dim < 8:
        raise ValueError("descriptor_dim must be >= 8 for usable matching")
    if noise_sd < 0 or not np.isfinite(noise_sd):
        raise ValueError("noise_sd must be finite and >= 0")
    if grid is None:
        grid = GridSpec.default(K)
    elif not isinstance(grid, GridSpec):
        gh, gw, stride, offset = grid
        grid = GridSpec(int(gh), int(gw), float(stride), float(offset))
    grid.validate_against(K)

    pixels = grid.cell_center_pixels()
    origin, dirs = _ray_directions(K, p, pixels)
    s = _cast_rays(scene, origin, dirs)
    hit = np.isfinite(s)

    n_cells = grid.grid_height * grid.grid_width
    data = np.zeros((n_cells, scene.descriptor_dim))
    idx = np.flatnonzero(hit)
    if idx.size:
        points = origin + s[idx, None] * dirs[idx]
        data[idx] = surface_descriptors(points, scene)
    if noise_sd > 0.0:
        if rng is None:
            rng = np.random.default_rng(scene.descriptor_seed)
        noise = rng.normal(0.0, noise_sd, size=data.shape)
        data[idx] += noise[idx]

    return FeatureMap(
        data=data.reshape(grid.grid_height, grid.grid_width, scene.descriptor_dim),
        pixel_stride=grid.pixel_stride,
        pixel_offset=grid.pixel_offset,
        mask=hit.reshape(grid.grid_height, grid.grid_width),
    )


def sample_reference_cameras(
    n: int,
    rng: np.random.Generator,
    theta_band: tuple[float, float] = (0.2 * math.pi, 0.8 * math.pi),
    radius_range: tuple[float, float] = (2.3, 2.7),
) -> list[SphericalCamera]:
    """Viewing-sphere cameras stratified over theta bands and phi sectors."""
    if n < 1:
        raise ValueError("need at least one camera")
    lo_t, hi_t = theta_band
    if not 0.0 <= lo_t < hi_t <= math.pi:
        raise ValueError("theta_band must be an increasing range within [0, pi]")
    n_theta = max(1, round(math.sqrt(n / 2.0)))
    n_phi = math.ceil(n / n_theta)
    cams = []
    for ti in range(n_theta):
        for pi_ in range(n_phi):
            if len(cams) == n:
                break
            theta = rng.uniform(
                lo_t + (hi_t - lo_t) * ti / n_theta,
                lo_t + (hi_t - lo_t) * (ti + 1) / n_theta,
            )
            phi = rng.uniform(
                -math.pi + 2.0 * math.pi * pi_ / n_phi,
                -math.pi + 2.0 * math.pi * (pi_ + 1) / n_phi,
            )
            cams.append(SphericalCamera(theta, phi, rng.uniform(*radius_range)))
    return cams


def random_scene(
    seed: int,
    n_primitives: int | None = None,
    descriptor_dim: int = DEFAULT_DESCRIPTOR_DIM,
    descriptor_seed: int | None = None,
    warp: WarpParams = WarpParams(),
) -> SyntheticScene:
    """Seeded random arrangement of 1-3 primitives inside the unit ball."""
    rng = np.random.default_rng(seed)
    n = int(n_primitives) if n_primitives is not None else int(rng.integers(2, 4))
    if n < 1:
        raise ValueError("need at least one primitive")
    prims = []
    for _ in range(n):
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        if rng.random() < 0.5:
            center = direction * rng.uniform(0.0, 0.45)
            prims.append(Sphere(tuple(center), rng.uniform(0.25, 0.5)))
        else:
            center = direction * rng.uniform(0.0, 0.3)
            prims.append(Box(tuple(center), tuple(rng.uniform(0.15, 0.35, size=3))))
    return SyntheticScene(
        primitives=tuple(prims),
        descriptor_dim=descriptor_dim,
        descriptor_seed=seed if descriptor_seed is None else descriptor_seed,
        warp=warp,
    )


def make_dataset(
    scene: SyntheticScene,
    out_dir,
    n_refs: int = 50,
    n_queries: int = 10,
    noise_sd: float = 0.0,
    seed: int = 0,
    intrinsics: CameraIntrinsics | None = None,
    grid: GridSpec | None = None,
    theta_band: tuple[float, float] = (0.2 * math.pi, 0.8 * math.pi),
    radius_range: tuple[float, float] = (2.3, 2.7),
    category: str = "synthetic",
    query_warp: WarpParams | None = None,
    query_depth: bool = True,
) -> DatasetManifest:
    """Render and write a full dataset; reproducible bit-for-bit from seed.

    Reference views are stratified over the viewing sphere and store both
    depth and features; query views are sampled uniformly within the same
    bands and store features (plus depth when ``query_depth``). When
    ``query_warp`` is given, query descriptors use that warp instead of the
    scene's, emulating a different instance of the same category.
    """
    from . import io as pio

    if n_refs < 1 or n_queries < 1:
        raise ValueError("n_refs and n_queries must be >= 1")
    if seed < 0:
        raise ValueError("seed must be non-negative")
    K = intrinsics if intrinsics is not None else CameraIntrinsics(**DEFAULT_INTRINSICS_KWARGS)
    if grid is None:
        grid = GridSpec.default(K)
    grid.validate_against(K)

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    rng_cam = np.random.default_rng([seed, 0])
    ref_cams = sample_reference_cameras(n_refs, rng_cam, theta_band, radius_range)
    query_cams = [
        SphericalCamera(
            rng_cam.uniform(*theta_band),
            rng_cam.uniform(-math.pi, math.pi),
            rng_cam.uniform(*radius_range),
        )
        for _ in range(n_queries)
    ]
    scene_q = replace(scene, warp=query_warp) if query_warp is not None else scene

    references = []
    for i, cam in enumerate(ref_cams):
        vid = f"ref_{i:03d}"
        pose = spherical_to_pose(cam)
        depth_file = f"{vid}_depth.zpkt"
        feat_file = f"{vid}_feat.zpkt"
        pio.write_depth_map(out_dir / depth_file, render_depth(scene, K, pose))
        feats = render_features(
            scene, K, pose, noise_sd, grid, rng=np.random.default_rng([seed, 1, i])
        )
        pio.write_feature_map(out_dir / feat_file, feats)
        references.append(ReferenceView(vid, cam, depth_file, feat_file))

    queries = []
    for j, cam in enumerate(query_cams):
        vid = f"query_{j:03d}"
        pose = spherical_to_pose(cam)
        feat_file = f"{vid}_feat.zpkt"
        feats = render_features(
            scene_q, K, pose, noise_sd, grid, rng=np.random.default_rng([seed, 2, j])
        )
        pio.write_feature_map(out_dir / feat_file, feats)
        depth_file = None
        if query_depth:
            depth_file = f"{vid}_depth.zpkt"
            pio.write_depth_map(out_dir / depth_file, render_depth(scene_q, K, pose))
        queries.append(QueryView(vid, pose, feat_file, depth_file))

    manifest = DatasetManifest(
        scene=scene,
        intrinsics=K,
        grid=grid,
        noise_sd=float(noise_sd),
        category=category,
        references=tuple(references),
        queries=tuple(queries),
        query_warp=query_warp,
        root=out_dir,
    )
    pio.write_manifest(out_dir / "manifest.json", manifest)
    return manifest
