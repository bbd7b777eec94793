"""SfT with known viewpoint poses (the NS problem).

One Gram lift plus one free translation; the objective is the trace
surrogate eps' * tr(Delta) plus the L1 sum of lifted cross-product
residuals over all correspondences of all viewpoints. With known poses
the viewpoints collapse into a single generalized camera, which
reduce_to_single_view makes explicit.
"""

import warnings
from dataclasses import dataclass

import numpy as np

from . import lifting
from .errors import DimensionMismatch, SignAmbiguityWarning, SolverInfeasible
from .geometry import Ray, RigidTransform, Viewpoint, point_to_ray_residual
from .shape_model import ShapeInstance, deform, instantiate

DEFAULT_TRACE_WEIGHT = 1e-3


@dataclass(frozen=True)
class CorrespondenceSet:
    """Pairs (template index j, ray index j') for one viewpoint."""

    pairs: tuple

    def __post_init__(self):
        object.__setattr__(self, "pairs", tuple((int(j), int(jp)) for j, jp in self.pairs))

    def __len__(self):
        return len(self.pairs)

    def template_indices(self):
        return np.array([j for j, _ in self.pairs], dtype=int)

    def ray_indices(self):
        return np.array([jp for _, jp in self.pairs], dtype=int)


@dataclass(frozen=True)
class NsProblem:
    model: object
    viewpoints: tuple
    correspondences: tuple
    trace_weight: float = DEFAULT_TRACE_WEIGHT

    def __post_init__(self):
        object.__setattr__(self, "viewpoints", tuple(self.viewpoints))
        object.__setattr__(self, "correspondences", tuple(self.correspondences))
        if len(self.viewpoints) != len(self.correspondences) or not self.viewpoints:
            raise DimensionMismatch("need equally many viewpoints and correspondence sets, P >= 1")
        n = self.model.n_points
        total = 0
        for view, corr in zip(self.viewpoints, self.correspondences):
            for j, jp in corr.pairs:
                if not (0 <= j < n) or not (0 <= jp < len(view.rays)):
                    raise DimensionMismatch(f"correspondence ({j},{jp}) out of range")
            total += len(corr)
        if total < 4:
            raise DimensionMismatch(f"need at least 4 correspondences in total, got {total}")

    @property
    def n_views(self):
        return len(self.viewpoints)


@dataclass(frozen=True)
class NsSolution:
    instance: ShapeInstance
    reconstruction: np.ndarray
    objective: float
    status: str
    diagnostics: lifting.RankDiagnostics
    residuals: tuple  # per view, L2 norms of the point-to-ray cross residuals


def _gather(problem):
    """Template columns and rays of every correspondence, stacked."""
    model = problem.model
    means, bases, origins, dirs = [], [[] for _ in model.bases], [], []
    for view, corr in zip(problem.viewpoints, problem.correspondences):
        for j, jp in corr.pairs:
            ray = view.rays[jp]
            means.append(model.mean[:, j])
            for i, b in enumerate(model.bases):
                bases[i].append(b[:, j])
            origins.append(ray.origin)
            dirs.append(ray.direction)
    means = np.array(means).T
    origins = np.array(origins).T
    dirs = np.array(dirs).T
    bases = [np.array(b).T for b in bases]
    return means, bases, origins, dirs


def analytic_cost(problem, rotation, weights, translation):
    """The unlifted objective at (R, w, t): trace surrogate + L1 residuals.

    On a rank-1 lift this equals the SDP objective exactly, which makes it
    the arbiter for sign-ambiguity resolution and gauge checks.
    """
    w = np.asarray(weights, dtype=float).reshape(-1)
    shape = rotation.matrix @ deform(problem.model, w) + np.asarray(translation).reshape(3, 1)
    cost = problem.trace_weight * (4.0 + w @ w)
    for view, corr in zip(problem.viewpoints, problem.correspondences):
        for j, jp in corr.pairs:
            cost += np.abs(point_to_ray_residual(shape[:, j], view.rays[jp])).sum()
    return float(cost)


def _residual_norms(problem, shape):
    out = []
    for view, corr in zip(problem.viewpoints, problem.correspondences):
        norms = np.array([
            np.linalg.norm(point_to_ray_residual(shape[:, j], view.rays[jp]))
            for j, jp in corr.pairs
        ])
        out.append(norms)
    return tuple(out)


def _resolve_sign(problem, delta, rotation, weights, translation):
    """Pick between (R, t) and the flipped candidate by analytic cost."""
    putative = delta.matrix[0, 1:10].reshape(3, 3)
    flipped = lifting.polar_rotation(-putative)
    cost = analytic_cost(problem, rotation, weights, translation)
    cost_flipped = analytic_cost(problem, flipped, weights, -translation)
    if cost_flipped < cost:
        warnings.warn(
            "negative-determinant rotation block; flipped (R, t) had lower cost",
            SignAmbiguityWarning,
            stacklevel=3,
        )
        return flipped, -np.asarray(translation)
    warnings.warn(
        "negative-determinant rotation block; original (R, t) kept",
        SignAmbiguityWarning,
        stacklevel=3,
    )
    return rotation, translation


def solve_ns(problem, backend=None):
    """Solve the known-pose registration SDP and extract (R, w, t)."""
    return solve_ns_weighted(problem, backend=backend)


def solve_ns_weighted(problem, corr_weight=1.0, extra_terms=(), backend=None):
    """NS solve with weighted correspondence terms and optional extra rays.

    `extra_terms` is an iterable of (template_indices, rays, weight)
    blocks; each contributes weight * |omega_b|_1 residual terms on the
    given template rows, sharing the problem's lift and translation. The
    silhouette-boosted iteration passes its matched boundary rays here,
    with corr_weight = lambda and silhouette weight = 1 - lambda. With
    corr_weight = 1 and no extra terms this is exactly the plain solve.
    """
    backend = backend or lifting.CvxpyBackend()
    model = problem.model
    m = model.n_bases
    dd = lifting.lift_dimension(m)

    builder = lifting.ProblemBuilder()
    builder.add_psd("delta", dd)
    builder.add_free("t", 3)
    rows, rhs = lifting.so3_lift_rows(m)
    builder.add_equality({"delta": rows}, rhs)
    builder.add_objective("delta", problem.trace_weight * lifting.trace_row(m))
    means, bases, origins, dirs = _gather(problem)
    a_mat, b_mat, const = lifting.residual_system(means, bases, origins, dirs)
    builder.add_l1_epigraph({"delta": a_mat, "t": b_mat}, const, weight=corr_weight)
    for indices, rays, weight in extra_terms:
        indices = np.asarray(indices, dtype=int)
        if indices.size == 0:
            continue
        a_x, b_x, c_x = lifting.residual_system(
            model.mean[:, indices],
            [b[:, indices] for b in model.bases],
            np.array([r.origin for r in rays]).T,
            np.array([r.direction for r in rays]).T,
        )
        builder.add_l1_epigraph({"delta": a_x, "t": b_x}, c_x, weight=weight)

    result = backend.solve(builder.build())
    if result.status not in ("optimal", "near_optimal"):
        raise SolverInfeasible(f"backend returned status {result.status!r}")

    delta = lifting.GramLift(result.values["delta"])
    translation = result.values["t"]
    rotation, weights, diag = lifting.extract_solution(delta)
    if diag.sign_ambiguous:
        rotation, translation = _resolve_sign(problem, delta, rotation, weights, translation)

    instance = ShapeInstance(weights=weights, pose=RigidTransform(rotation, translation))
    shape = instantiate(problem.model, instance)
    return NsSolution(
        instance=instance,
        reconstruction=shape,
        objective=result.objective,
        status=result.status,
        diagnostics=diag,
        residuals=_residual_norms(problem, shape),
    )


def reduce_to_single_view(problem):
    """Pool all sightlines into one generalized viewpoint (anchor frame).

    Every ray is rewritten in the first viewpoint's local frame; the
    pooled viewpoint gets the identity pose. A solution of the reduced
    problem maps back through the inverse of the anchor pose. Objectives
    of the two solves coincide at noise-free optima, where the residual
    terms vanish and only the frame-invariant trace term remains.
    """
    if problem.n_views == 1:
        return problem
    anchor = problem.viewpoints[0].pose
    a_rot = anchor.rotation.matrix
    rays, pairs = [], []
    offset = 0
    for view, corr in zip(problem.viewpoints, problem.correspondences):
        for j, jp in corr.pairs:
            pairs.append((j, offset + jp))
        for ray in view.rays:
            rays.append(Ray(anchor.apply(ray.origin), a_rot @ ray.direction))
        offset += len(view.rays)
    pooled = Viewpoint(rays=tuple(rays), pose=RigidTransform.identity(), projection="generalized")
    return NsProblem(
        model=problem.model,
        viewpoints=(pooled,),
        correspondences=(CorrespondenceSet(tuple(pairs)),),
        trace_weight=problem.trace_weight,
    )
