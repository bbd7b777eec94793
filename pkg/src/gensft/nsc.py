"""Joint shape and per-viewpoint pose estimation (the NSC problem).

Unknown extrinsics are gauge-fixed by pinning every camera center at the
origin of its own frame: each view gets its own lift Delta_x and free
translation tau_x, the camera-frame point is R_x Q_j + tau_x, and the
views are tied together by equating the weight reads of consecutive
lifts. A depth floor tau_{x,3} >= f_x keeps the object in front of each
camera and blocks the shrink-toward-center family that trace
minimization would otherwise reward.
"""

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import lifting
from .errors import DimensionMismatch, SignAmbiguityWarning, SolverInfeasible
from .geometry import RigidTransform
from .shape_model import deform

WEIGHT_AGREEMENT_TOL = 1e-4  # larger per-view spread downgrades the status
DEFAULT_MIN_DEPTH = 0.1


@dataclass(frozen=True)
class NscProblem:
    """Per-view local sightlines (origins at zero) with unknown poses."""

    model: object
    views: tuple  # P tuples of Ray, camera frame each
    correspondences: tuple
    min_depths: tuple
    trace_weight: float = 1e-3

    def __post_init__(self):
        views = tuple(tuple(v) for v in self.views)
        corrs = tuple(self.correspondences)
        depths = tuple(float(f) for f in self.min_depths)
        if not views or len(views) != len(corrs) or len(views) != len(depths):
            raise DimensionMismatch("views, correspondences and min_depths must align, P >= 1")
        n = self.model.n_points
        for rays, corr, f in zip(views, corrs, depths):
            for ray in rays:
                if np.any(ray.origin != 0.0):
                    raise ValueError("gauge fixing requires every ray origin at 0")
            for j, jp in corr.pairs:
                if not (0 <= j < n) or not (0 <= jp < len(rays)):
                    raise DimensionMismatch(f"correspondence ({j},{jp}) out of range")
            if f <= 0.0:
                raise ValueError("min depth must be positive")
        object.__setattr__(self, "views", views)
        object.__setattr__(self, "correspondences", corrs)
        object.__setattr__(self, "min_depths", depths)

    @property
    def n_views(self):
        return len(self.views)


@dataclass(frozen=True)
class NscSolution:
    weights: np.ndarray  # shared shape weights (mean of per-view reads)
    per_view_weights: tuple
    transforms: tuple  # object frame -> camera-x frame
    poses: tuple  # camera-x in the object frame (inverses of transforms)
    relative_poses: tuple  # camera-x frame -> anchor (view 1) frame
    objective: float
    status: str
    diagnostics: tuple  # per-view RankDiagnostics


def _view_cost(rays, corr, model, rotation_matrix, weights, translation):
    shape = rotation_matrix @ deform(model, weights) + translation.reshape(3, 1)
    cost = 0.0
    for j, jp in corr.pairs:
        cost += np.abs(np.cross(shape[:, j], rays[jp].direction)).sum()
    return cost


def analytic_cost(problem, world_points, camera_transforms, weights):
    """Unlifted NSC objective: per-view trace surrogate + L1 residuals.

    `world_points` is the object in a common frame; `camera_transforms`
    map that frame into each camera frame (where the stored rays live).
    Residuals are evaluated in camera frames, which is what makes the
    cost exactly invariant under joint rigid remapping of the common
    frame.
    """
    w = np.asarray(weights, dtype=float).reshape(-1)
    cost = problem.n_views * problem.trace_weight * (4.0 + w @ w)
    for rays, corr, g in zip(problem.views, problem.correspondences, camera_transforms):
        local = g.apply(world_points)
        for j, jp in corr.pairs:
            cost += np.abs(np.cross(local[:, j], rays[jp].direction)).sum()
    return float(cost)


def verify_gauge_freedom(problem, candidate, transform):
    """Absolute cost change under a joint rigid remap of object and cameras."""
    points = deform(problem.model, candidate.weights)
    base = analytic_cost(problem, points, candidate.transforms, candidate.weights)
    inv = transform.inverse()
    moved_points = transform.apply(points)
    moved_transforms = tuple(g.compose(inv) for g in candidate.transforms)
    moved = analytic_cost(problem, moved_points, moved_transforms, candidate.weights)
    return abs(moved - base)


def recover_viewpoint_poses(transforms):
    """Camera-in-object poses: the componentwise rigid inverses."""
    return tuple(g.inverse() for g in transforms)


def _weight_chain_rows(n_weights, dd):
    # entry (0, 10+i) of each lift holds w_i
    cols = 10 + np.arange(n_weights)
    vals = np.ones(n_weights)
    rows = np.arange(n_weights)
    return sp.coo_matrix((vals, (rows, cols)), shape=(n_weights, dd * dd)).tocsr()


def solve_nsc(problem, backend=None):
    """Solve the unknown-pose registration SDP; one lift per viewpoint."""
    backend = backend or lifting.CvxpyBackend()
    model = problem.model
    m = model.n_bases
    dd = lifting.lift_dimension(m)
    p = problem.n_views

    builder = lifting.ProblemBuilder()
    so3_rows, so3_rhs = lifting.so3_lift_rows(m)
    trace = lifting.trace_row(m)
    for x in range(p):
        builder.add_psd(f"delta_{x}", dd)
        builder.add_free(f"t_{x}", 3)
    for x in range(p):
        builder.add_equality({f"delta_{x}": so3_rows}, so3_rhs)
        builder.add_objective(f"delta_{x}", problem.trace_weight * trace)
        builder.add_inequality({f"t_{x}": np.array([[0.0, 0.0, 1.0]])},
                               np.array([problem.min_depths[x]]))
        corr = problem.correspondences[x]
        rays = problem.views[x]
        js = corr.template_indices()
        jps = corr.ray_indices()
        dirs = np.array([rays[jp].direction for jp in jps]).T
        a_mat, b_mat, const = lifting.residual_system(
            model.mean[:, js],
            [b[:, js] for b in model.bases],
            np.zeros((3, len(js))),
            dirs,
        )
        builder.add_l1_epigraph({f"delta_{x}": a_mat, f"t_{x}": b_mat}, const)
    chain = _weight_chain_rows(m, dd)
    for x in range(p - 1):
        builder.add_equality({f"delta_{x}": chain, f"delta_{x+1}": -chain}, np.zeros(m))

    result = backend.solve(builder.build())
    if result.status not in ("optimal", "near_optimal"):
        raise SolverInfeasible(f"backend returned status {result.status!r}")

    transforms, per_weights, diags = [], [], []
    for x in range(p):
        delta = lifting.GramLift(result.values[f"delta_{x}"])
        tau = result.values[f"t_{x}"]
        rotation, wx, diag = lifting.extract_solution(delta)
        if diag.sign_ambiguous:
            rotation, tau = _resolve_view_sign(problem, x, delta, rotation, wx, tau)
        transforms.append(RigidTransform(rotation, tau))
        per_weights.append(wx)
        diags.append(diag)

    weights = np.mean(per_weights, axis=0)
    status = result.status
    spread = max(
        (np.abs(a - b).max() for a in per_weights for b in per_weights), default=0.0
    )
    if spread > WEIGHT_AGREEMENT_TOL and status == "optimal":
        status = "near_optimal"

    poses = recover_viewpoint_poses(transforms)
    anchor = transforms[0]
    relative = tuple(anchor.compose(pose) for pose in poses)
    return NscSolution(
        weights=weights,
        per_view_weights=tuple(per_weights),
        transforms=tuple(transforms),
        poses=poses,
        relative_poses=relative,
        objective=result.objective,
        status=status,
        diagnostics=tuple(diags),
    )


def _resolve_view_sign(problem, x, delta, rotation, weights, tau):
    putative = delta.matrix[0, 1:10].reshape(3, 3)
    flipped = lifting.polar_rotation(-putative)
    rays, corr = problem.views[x], problem.correspondences[x]
    cost = _view_cost(rays, corr, problem.model, rotation.matrix, weights, tau)
    cost_f = _view_cost(rays, corr, problem.model, flipped.matrix, weights, -tau)
    if cost_f < cost:
        warnings.warn(
            f"view {x}: negative-determinant rotation block; flipped (R, t) kept",
            SignAmbiguityWarning,
            stacklevel=3,
        )
        return flipped, -tau
    warnings.warn(
        f"view {x}: negative-determinant rotation block; original (R, t) kept",
        SignAmbiguityWarning,
        stacklevel=3,
    )
    return rotation, tau


def anchor_reconstruction(problem, solution):
    """Recovered shape expressed in the anchor (view 1) camera frame."""
    return solution.transforms[0].apply(deform(problem.model, solution.weights))
