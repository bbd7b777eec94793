"""Shape-from-template with generalized cameras.

Convex relaxations for registering a low-rank deformable template to 2D
keypoints seen from several viewpoints, with known or unknown camera
placement, plus silhouette-boosted refinement and an experiment harness.
"""

from .errors import (
    ConfigInfeasible,
    DegenerateCloud,
    DegenerateConfiguration,
    DegenerateMatrix,
    DimensionMismatch,
    GensftError,
    GimbalWarning,
    HighRankWarning,
    InconsistentPointCounts,
    InsufficientSamples,
    NonConvergenceWarning,
    NonPositiveDepth,
    ParseError,
    SignAmbiguityWarning,
    SolverInfeasible,
    ZeroVarianceWarning,
)
from .geometry import (
    Ray,
    RigidTransform,
    Rotation,
    Viewpoint,
    moment_vector,
    nearest_rotation,
    point_to_ray_residual,
    project_perspective,
    rays_from_keypoints,
    rigid_align,
)
from .harness import (
    MetricReport,
    chamfer,
    emit_report,
    geodesic_rotation_deg,
    procrustes_rmse,
    read_report,
    rmse,
    rotation_error_deg,
    run_experiment,
    translation_error,
)
from .lifting import (
    ConicProblem,
    CvxpyBackend,
    GramLift,
    LiftSolution,
    ProblemBuilder,
    RankDiagnostics,
    extract_solution,
    lift_dimension,
    lift_from_parameters,
    omega_a,
    omega_b,
    omega_c,
    omega_d,
    polar_rotation,
    residual_system,
    so3_lift_rows,
)
from .ns import (
    CorrespondenceSet,
    NsProblem,
    NsSolution,
    analytic_cost,
    reduce_to_single_view,
    solve_ns,
    solve_ns_weighted,
)
from .nsc import (
    NscProblem,
    NscSolution,
    anchor_reconstruction,
    recover_viewpoint_poses,
    solve_nsc,
    verify_gauge_freedom,
)
from .shape_model import (
    ShapeInstance,
    ShapeModel,
    build_ssm,
    deform,
    instantiate,
    load_model,
    save_model,
)
from .silhouette import (
    BoostResult,
    ModelSilhouette,
    SilhouetteCorrespondence,
    SilhouetteObservation,
    alpha_silhouette,
    load_observations,
    match_silhouettes,
    model_silhouette,
    resolve_alpha,
    solve_silhouette_boosted_ns,
)
from .synth import (
    Scenario,
    ScenarioConfig,
    densify_for_silhouette,
    generate_population,
    generate_scenario,
    ladder_config,
    load_config,
    save_config,
    save_scenario,
)

__version__ = "0.1.0"
