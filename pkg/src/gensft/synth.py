"""Synthetic scenario generation at desk scale.

A scenario is a shape model, a ground-truth instance, a constellation of
viewpoints looking at it, and the per-view ray/correspondence data for
the known-pose and unknown-pose solvers, optionally with dense interior
points and silhouette observations. Everything is a pure function of the
configuration, so identical configs give bit-identical scenarios.
"""

import json
from dataclasses import dataclass, asdict, replace

import numpy as np
from scipy.spatial import cKDTree

from .errors import ConfigInfeasible, ParseError
from .geometry import (
    Ray,
    RigidTransform,
    Rotation,
    Viewpoint,
    project_perspective,
    rays_from_keypoints,
)
from .ns import CorrespondenceSet, NsProblem
from .nsc import NscProblem
from .shape_model import ShapeInstance, ShapeModel, build_ssm, instantiate, save_model
from .silhouette import SilhouetteObservation, alpha_silhouette

CAMERA_DISTANCE_FACTOR = 3.0  # sphere radius in units of the shape's bbox diagonal
CAMERA_DISTANCE_JITTER = 0.3

# Per-viewpoint correspondence counts of the standard five-step ladders;
# both always sum to one hundred.
NS_LADDER = {
    1: (50, 50),
    2: (33, 33, 34),
    3: (25, 25, 25, 25),
    4: (10,) * 10,
    5: (1,) * 100,
}
NSC_LADDER = {**NS_LADDER, 5: (5,) * 20}


@dataclass(frozen=True)
class ScenarioConfig:
    seed: int = 0
    n_points: int = 120
    n_bases: int = 3
    corr_counts: tuple = (50, 50)
    projections: tuple = "perspective"  # one label, or one per view
    euler_range_deg: float = 90.0
    translation_range: float = 1.0
    weight_range: tuple = (0.0, 1.0)
    noise_sd: float = 0.0
    density: int = 0  # > n_points turns on interior densification
    deformation_scale: float = 0.15
    trace_weight: float = 1e-3
    config_id: str = "custom"

    def __post_init__(self):
        counts = tuple(int(c) for c in np.atleast_1d(self.corr_counts))
        if sum(counts) < 4:
            raise ValueError("need at least 4 correspondences in total")
        proj = self.projections
        if isinstance(proj, str):
            proj = (proj,) * len(counts)
        proj = tuple(proj)
        if len(proj) != len(counts):
            raise ValueError("projections must match the number of viewpoints")
        if not 0.0 <= self.euler_range_deg <= 180.0:
            raise ValueError("euler_range_deg must lie in [0, 180]")
        object.__setattr__(self, "corr_counts", counts)
        object.__setattr__(self, "projections", proj)
        object.__setattr__(self, "weight_range", tuple(self.weight_range))
        object.__setattr__(self, "config_id", str(self.config_id))

    @property
    def n_views(self):
        return len(self.corr_counts)


def ladder_config(config_id, variant="ns", **overrides):
    """Preset for one rung of the five-configuration ladder."""
    table = NS_LADDER if variant == "ns" else NSC_LADDER
    if config_id not in table:
        raise ValueError(f"config_id must be 1..5, got {config_id}")
    base = ScenarioConfig(corr_counts=table[config_id], config_id=str(config_id))
    return replace(base, **overrides)


@dataclass(frozen=True)
class Scenario:
    config: ScenarioConfig
    model: ShapeModel
    gt_instance: ShapeInstance
    gt_points: np.ndarray  # clean world-frame shape
    viewpoint_poses: tuple  # world -> camera maps
    ns_problem: NsProblem
    nsc_problem: object  # None when any view is orthographic
    observations: object  # tuple of SilhouetteObservation, or None


def generate_population(seed, n_points, n_bases, deformation_scale):
    """Base cloud in the unit cube plus smooth trigonometric deformations.

    Returns 2*(n_bases+1) samples: the base shape displaced by random
    mixtures of n_bases low-frequency fields. Scale zero collapses all
    samples onto the base shape.
    """
    if n_points < 4 or n_bases < 1:
        raise ValueError("need n_points >= 4 and n_bases >= 1")
    rng = np.random.default_rng(seed)
    base = rng.uniform(0.0, 1.0, (3, n_points))
    fields = []
    for _ in range(n_bases):
        freq = rng.uniform(1.0, 2.5, (3, 3))
        phase = rng.uniform(0.0, 2.0 * np.pi, 3)
        amp = rng.uniform(0.5, 1.0, 3) * deformation_scale
        field = np.array([amp[a] * np.sin(freq[a] @ base + phase[a]) for a in range(3)])
        fields.append(field - field.mean(axis=1, keepdims=True))
    n_samples = 2 * (n_bases + 1)
    coeffs = rng.uniform(-1.0, 1.0, (n_samples, n_bases))
    return [base + sum(c[i] * fields[i] for i in range(n_bases)) for c in coeffs]


def _interior_combinations(model, count, rng):
    """Convex-combination recipe for `count` interior points.

    Each new point mixes a random anchor point with its 3 nearest mean-shape
    neighbors using Dirichlet weights; applying the same recipe to the mean
    and every basis keeps deformation linear in the weights.
    """
    tree = cKDTree(model.mean.T)
    anchors = rng.integers(0, model.n_points, count)
    _, neighbors = tree.query(model.mean[:, anchors].T, k=4)
    lambdas = rng.dirichlet(np.ones(4), size=count)
    return neighbors, lambdas


def densify_for_silhouette(model, target_n, rng=None):
    """Pad the model with interior points up to target_n total."""
    if target_n < model.n_points:
        raise ValueError("target_n must be at least the current point count")
    if target_n == model.n_points:
        return model
    rng = rng if rng is not None else np.random.default_rng(0)
    neighbors, lambdas = _interior_combinations(model, target_n - model.n_points, rng)

    def pad(field):
        interior = np.einsum("kq,kqd->dk", lambdas, field.T[neighbors])
        return np.hstack([field, interior])

    return ShapeModel(pad(model.mean), tuple(pad(b) for b in model.bases))


def _look_at_pose(center, target, rng):
    z = target - center
    z = z / np.linalg.norm(z)
    up = rng.normal(size=3)
    up -= (up @ z) * z
    up /= np.linalg.norm(up)
    x = np.cross(up, z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    rot = Rotation(np.stack([x, y, z]))
    return RigidTransform(rot, -rot.matrix @ center)


def generate_scenario(config):
    """Instantiate one full scenario from a configuration."""
    rng = np.random.default_rng(config.seed)
    samples = generate_population(config.seed, config.n_points, config.n_bases,
                                  config.deformation_scale)
    model = build_ssm(samples, variance_fraction=1.0)
    if config.density > config.n_points:
        model = densify_for_silhouette(model, config.density, rng)
    n = model.n_points
    if sum(config.corr_counts) > n:
        raise ConfigInfeasible(
            f"{sum(config.corr_counts)} disjoint correspondences exceed {n} points")

    weights = rng.uniform(config.weight_range[0], config.weight_range[1], model.n_bases)
    angles = np.radians(rng.uniform(-config.euler_range_deg, config.euler_range_deg, 3))
    pose_rot = _euler_zyx_matrix(angles)
    translation = rng.uniform(-config.translation_range, config.translation_range, 3)
    gt_instance = ShapeInstance(weights, RigidTransform(Rotation(pose_rot), translation))
    gt_points = instantiate(model, gt_instance)
    noisy = gt_points
    if config.noise_sd > 0.0:
        noisy = gt_points + rng.normal(0.0, config.noise_sd, gt_points.shape)

    centroid = gt_points.mean(axis=1)
    diag = np.linalg.norm(gt_points.max(axis=1) - gt_points.min(axis=1))
    order = rng.permutation(n)

    viewpoints, corrs, poses = [], [], []
    local_rays, min_depths = [], []
    offset = 0
    all_perspective = all(p == "perspective" for p in config.projections)
    for x, (count, projection) in enumerate(zip(config.corr_counts, config.projections)):
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        radius = CAMERA_DISTANCE_FACTOR * diag * rng.uniform(
            1.0 - CAMERA_DISTANCE_JITTER, 1.0 + CAMERA_DISTANCE_JITTER)
        pose = _look_at_pose(centroid + direction * radius, centroid, rng)
        js = order[offset:offset + count]
        offset += count
        observed = noisy[:, js]
        if projection == "perspective":
            keypoints = project_perspective(observed, pose)
        else:
            keypoints = pose.apply(observed)[:2]
        rays = rays_from_keypoints(keypoints, pose, projection)
        viewpoints.append(Viewpoint(tuple(rays), pose, projection))
        corrs.append(CorrespondenceSet(tuple((int(j), k) for k, j in enumerate(js))))
        poses.append(pose)
        if all_perspective:
            cam = pose.apply(observed)
            local_rays.append(tuple(Ray(np.zeros(3), cam[:, k]) for k in range(count)))
            # depth of the object-frame origin: keeps the depth floor
            # informative, which the trace objective needs to stay tight
            min_depths.append(float(pose.apply(translation)[2]))

    ns_problem = NsProblem(model, tuple(viewpoints), tuple(corrs), config.trace_weight)
    nsc_problem = None
    if all_perspective:
        nsc_problem = NscProblem(model, tuple(local_rays), tuple(corrs),
                                 tuple(min_depths), config.trace_weight)

    observations = None
    if config.density > config.n_points:
        obs = []
        for pose in poses:
            image = project_perspective(gt_points, pose)
            boundary = alpha_silhouette(image, "auto")
            dirs = np.vstack([image[:, boundary], np.ones(len(boundary))])
            obs.append(SilhouetteObservation(dirs / np.linalg.norm(dirs, axis=0)))
        observations = tuple(obs)

    return Scenario(
        config=config,
        model=model,
        gt_instance=gt_instance,
        gt_points=gt_points,
        viewpoint_poses=tuple(poses),
        ns_problem=ns_problem,
        nsc_problem=nsc_problem,
        observations=observations,
    )


def _euler_zyx_matrix(angles):
    """Rotation from intrinsic z-y-x Euler angles (radians)."""
    cz, sz = np.cos(angles[0]), np.sin(angles[0])
    cy, sy = np.cos(angles[1]), np.sin(angles[1])
    cx, sx = np.cos(angles[2]), np.sin(angles[2])
    rz = np.array([[cz, -sz, 0.0], [sz, cz, 0.0], [0.0, 0.0, 1.0]])
    ry = np.array([[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]])
    rx = np.array([[1.0, 0.0, 0.0], [0.0, cx, -sx], [0.0, sx, cx]])
    return rz @ ry @ rx


# ---------------------------------------------------------------------------
# Config and scenario files.


def save_config(config, path):
    doc = asdict(config)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)


def load_config(path):
    try:
        with open(path) as fh:
            doc = json.load(fh)
        return ScenarioConfig(**doc)
    except (OSError, json.JSONDecodeError, TypeError, ValueError) as exc:
        raise ParseError(f"{path}: bad scenario config ({exc})") from exc


def _pose_doc(pose):
    return {"rotation": pose.rotation.matrix.tolist(),
            "translation": pose.translation.tolist()}


def _pose_from_doc(doc):
    return RigidTransform(Rotation(np.asarray(doc["rotation"], dtype=float)),
                          np.asarray(doc["translation"], dtype=float))


def save_scenario(scenario, outdir):
    """Write model/rays/correspondences/GT (and silhouettes) files."""
    outdir = str(outdir)
    save_model(scenario.model, f"{outdir}/model.json")
    views = []
    for x, view in enumerate(scenario.ns_problem.viewpoints):
        doc = {
            "origin": view.center().tolist(),
            "rays": [{"o": r.origin.tolist(), "d": r.direction.tolist()} for r in view.rays],
            "pose": _pose_doc(view.pose),
            "projection": view.projection,
        }
        if scenario.nsc_problem is not None:
            doc["min_depth"] = scenario.nsc_problem.min_depths[x]
        views.append(doc)
    with open(f"{outdir}/rays.json", "w") as fh:
        json.dump({"views": views}, fh)
    with open(f"{outdir}/correspondences.json", "w") as fh:
        json.dump({"views": [[[j, jp] for j, jp in corr.pairs]
                             for corr in scenario.ns_problem.correspondences]}, fh)
    gt = {
        "weights": scenario.gt_instance.weights.tolist(),
        "pose": _pose_doc(scenario.gt_instance.pose),
        "view_poses": [_pose_doc(p) for p in scenario.viewpoint_poses],
        "points": scenario.gt_points.T.tolist(),
    }
    with open(f"{outdir}/gt.json", "w") as fh:
        json.dump(gt, fh)
    if scenario.observations is not None:
        with open(f"{outdir}/silhouettes.json", "w") as fh:
            json.dump({"views": [{"directions": o.directions.T.tolist()}
                                 for o in scenario.observations]}, fh)


def load_views(path):
    """Viewpoints plus optional per-view min depths from a rays file."""
    try:
        with open(path) as fh:
            doc = json.load(fh)
        viewpoints, depths = [], []
        for v in doc["views"]:
            rays = tuple(Ray(np.asarray(r["o"], dtype=float), np.asarray(r["d"], dtype=float))
                         for r in v["rays"])
            pose = _pose_from_doc(v["pose"]) if "pose" in v else RigidTransform.identity()
            viewpoints.append(Viewpoint(rays, pose, v.get("projection", "perspective")))
            depths.append(float(v["min_depth"]) if "min_depth" in v else None)
        return tuple(viewpoints), tuple(depths)
    except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"{path}: bad rays file ({exc})") from exc


def load_correspondences(path):
    try:
        with open(path) as fh:
            doc = json.load(fh)
        return tuple(CorrespondenceSet(tuple((int(j), int(jp)) for j, jp in view))
                     for view in doc["views"])
    except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"{path}: bad correspondences file ({exc})") from exc


def load_gt(path):
    try:
        with open(path) as fh:
            doc = json.load(fh)
        return {
            "weights": np.asarray(doc["weights"], dtype=float),
            "pose": _pose_from_doc(doc["pose"]),
            "view_poses": tuple(_pose_from_doc(p) for p in doc["view_poses"]),
            "points": np.asarray(doc["points"], dtype=float).T,
        }
    except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"{path}: bad ground-truth file ({exc})") from exc
