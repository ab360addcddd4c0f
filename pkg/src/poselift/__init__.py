"""Reference-view matching, 2D-3D lifting and gradient-based pose refinement.

The package covers the stages of a category-level pose pipeline that sit
downstream of image models: cyclical-distance feature matching and best
reference-view selection, lifting matches through reference depth, reprojection
optimization over a continuous two-vector rotation parameterization, a
rotation-error evaluation protocol, an analytic synthetic-scene oracle, and
bit-exact file formats with a batch CLI.
"""

from .evaluation import (
    DEFAULT_THRESHOLDS,
    EvalRecord,
    EvalSummary,
    format_results_table,
    summarize,
    summarize_by_category,
)
from .geometry import (
    CameraIntrinsics,
    RigidPose,
    Rotation6D,
    SphericalCamera,
    axis_angle_matrix,
    geodesic_distance,
    matrix_to_rot6d,
    pose_to_spherical,
    project,
    random_rotation,
    relative_spherical,
    rot6d_to_matrix,
    spherical_to_pose,
    umeyama_align,
    unproject,
    wrap_angle,
)
from .io import (
    ChecksumError,
    DimensionError,
    FileFormatError,
    HeaderError,
    MagicError,
    SchemaError,
    TruncationError,
    VersionError,
    read_depth_map,
    read_feature_map,
    read_manifest,
    write_depth_map,
    write_feature_map,
    write_manifest,
    write_results,
)
from .matching import (
    DEFAULT_TOP_K,
    FeatureMap,
    Match,
    MatchSet,
    best_view,
    cyclical_distance,
    nn_coordinate,
    top_k_matches,
)
from .refinement import (
    Correspondence2D3D,
    DivergenceError,
    OptimizerConfig,
    RefinementProblem,
    RefinementResult,
    lift_pixel_pairs,
    loss_gradient,
    recover_scale,
    refine_pose,
    reprojection_loss,
)
from .synth import (
    Box,
    DatasetManifest,
    DepthMap,
    GridSpec,
    QueryView,
    ReferenceView,
    Sphere,
    SyntheticScene,
    WarpParams,
    canonical_coordinates,
    make_dataset,
    random_scene,
    render_depth,
    render_features,
    sample_reference_cameras,
    surface_descriptors,
)

__version__ = "0.1.0"
