"""Euclidean primitives: rays, rotations, rigid transforms, projections.

Every cost in this package reduces to the cross-product residual
(point - origin) x direction. Its L2 norm equals the perpendicular
point-to-line distance exactly because ray directions are unit length,
which is why normalization happens once, at Ray construction, and
never at use sites.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DegenerateConfiguration,
    DegenerateMatrix,
    DimensionMismatch,
    NonPositiveDepth,
)

DEPTH_EPS = 1e-9  # front-of-camera check for perspective projection


def _as_vec3(v, name):
    a = np.asarray(v, dtype=float)
    if a.shape != (3,):
        raise DimensionMismatch(f"{name} must be a 3-vector, got shape {a.shape}")
    return a


@dataclass(frozen=True)
class Ray:
    """A sightline: origin plus unit direction, both in one fixed frame."""

    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        o = _as_vec3(self.origin, "origin")
        d = _as_vec3(self.direction, "direction")
        n = np.linalg.norm(d)
        if n == 0.0 or not np.isfinite(n):
            raise ValueError("ray direction must be a nonzero finite vector")
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", d / n)


@dataclass(frozen=True)
class Rotation:
    """A proper rotation matrix, validated at construction."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=float)
        if m.shape != (3, 3):
            raise DimensionMismatch(f"rotation must be 3x3, got {m.shape}")
        if np.abs(m @ m.T - np.eye(3)).max() > 1e-9:
            raise ValueError("matrix is not orthonormal within 1e-9")
        if abs(np.linalg.det(m) - 1.0) > 1e-9:
            raise ValueError("matrix determinant is not +1 within 1e-9")
        object.__setattr__(self, "matrix", m)

    @staticmethod
    def identity():
        return Rotation(np.eye(3))


@dataclass(frozen=True)
class RigidTransform:
    """p -> R p + t. Used both for object poses and world-to-camera maps."""

    rotation: Rotation
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "translation", _as_vec3(self.translation, "translation"))

    @staticmethod
    def identity():
        return RigidTransform(Rotation.identity(), np.zeros(3))

    def apply(self, points):
        """Transform a 3-vector or a 3xk matrix of column points."""
        p = np.asarray(points, dtype=float)
        if p.ndim == 1:
            return self.rotation.matrix @ p + self.translation
        return self.rotation.matrix @ p + self.translation[:, None]

    def inverse(self):
        rt = self.rotation.matrix.T
        return RigidTransform(Rotation(rt), -rt @ self.translation)

    def compose(self, other):
        """self o other: apply `other` first, then `self`."""
        r = self.rotation.matrix @ other.rotation.matrix
        t = self.rotation.matrix @ other.translation + self.translation
        return RigidTransform(Rotation(r), t)


@dataclass(frozen=True)
class Viewpoint:
    """A group of sightlines sharing one known pose.

    Rays are stored in the world frame; `pose` maps world to the
    viewpoint's local frame and is what projections and the single-view
    reduction need. Perspective viewpoints share a single ray origin
    (the camera center), orthographic ones have per-ray origins on the
    camera's XY plane.
    """

    rays: tuple
    pose: RigidTransform = field(default_factory=RigidTransform.identity)
    projection: str = "perspective"

    def __post_init__(self):
        object.__setattr__(self, "rays", tuple(self.rays))
        # "generalized" labels pooled ray sets with mixed origins (the
        # single-view reduction produces these); no projection op applies.
        if self.projection not in ("perspective", "orthographic", "generalized"):
            raise ValueError(f"unknown projection model {self.projection!r}")

    def center(self):
        """Camera center in the world frame."""
        return self.pose.inverse().translation


def moment_vector(ray, point_on_ray):
    """Moment of the line through `point_on_ray` with the ray's direction."""
    p = _as_vec3(point_on_ray, "point_on_ray")
    return np.cross(ray.direction, p)


def point_to_ray_residual(point, ray):
    """(point - origin) x direction; L2 norm = perpendicular distance."""
    p = _as_vec3(point, "point")
    return np.cross(p - ray.origin, ray.direction)


def project_perspective(points, transform):
    """Normalized image coordinates (X/Z, Y/Z) of transformed points.

    Raises NonPositiveDepth if any transformed Z is <= the depth epsilon;
    points are required to sit strictly in front of the camera.
    """
    p = np.asarray(points, dtype=float)
    if p.ndim != 2 or p.shape[0] != 3:
        raise DimensionMismatch(f"points must be 3xk, got {p.shape}")
    q = transform.apply(p)
    if q.shape[1] and q[2].min() <= DEPTH_EPS:
        raise NonPositiveDepth(f"min transformed depth {q[2].min():.3e} <= {DEPTH_EPS}")
    return q[:2] / q[2]


def rays_from_keypoints(keypoints, viewpoint_pose, model="perspective"):
    """World-frame sightlines through normalized image keypoints.

    Perspective: all rays start at the camera center with direction
    (u, v, 1) rotated to the world. Orthographic: each ray starts at the
    keypoint lifted onto the camera's XY plane and runs along the camera
    Z axis.
    """
    k = np.asarray(keypoints, dtype=float)
    if k.ndim != 2 or k.shape[0] != 2:
        raise DimensionMismatch(f"keypoints must be 2xk, got {k.shape}")
    inv = viewpoint_pose.inverse()
    if model == "perspective":
        center = inv.translation
        dirs_cam = np.vstack([k, np.ones(k.shape[1])])
        dirs_world = inv.rotation.matrix @ dirs_cam
        return [Ray(center, dirs_world[:, j]) for j in range(k.shape[1])]
    if model == "orthographic":
        axis = inv.rotation.matrix[:, 2]  # camera Z axis in the world
        lifted = inv.apply(np.vstack([k, np.zeros(k.shape[1])]))
        return [Ray(lifted[:, j], axis) for j in range(k.shape[1])]
    raise ValueError(f"unknown projection model {model!r}")


def nearest_rotation(matrix):
    """Closest rotation in Frobenius norm, det forced to +1 via SVD."""
    m = np.asarray(matrix, dtype=float)
    if m.shape != (3, 3) or not np.isfinite(m).all():
        raise DimensionMismatch("input must be a finite 3x3 matrix")
    u, s, vt = np.linalg.svd(m)
    if s[1] <= 1e-12 * max(s[0], 1.0):
        # two vanishing singular values leave a one-parameter family
        raise DegenerateMatrix("nearest rotation is ambiguous (rank < 2)")
    sign = np.sign(np.linalg.det(u @ vt))
    return Rotation(u @ np.diag([1.0, 1.0, sign]) @ vt)


def rigid_align(source, target):
    """Least-squares rigid transform mapping source points onto target.

    Closed form: match centroids, then project the cross-covariance onto
    SO(3). Raises DegenerateConfiguration for collinear point sets.
    """
    s = np.asarray(source, dtype=float)
    t = np.asarray(target, dtype=float)
    if s.shape != t.shape or s.ndim != 2 or s.shape[0] != 3:
        raise DimensionMismatch(f"point sets must share shape 3xk, got {s.shape} vs {t.shape}")
    if s.shape[1] < 3:
        raise DegenerateConfiguration("need at least 3 points")
    sc = s - s.mean(axis=1, keepdims=True)
    tc = t - t.mean(axis=1, keepdims=True)
    cov = tc @ sc.T
    try:
        rot = nearest_rotation(cov)
    except DegenerateMatrix as exc:
        raise DegenerateConfiguration("points are collinear") from exc
    trans = t.mean(axis=1) - rot.matrix @ s.mean(axis=1)
    return RigidTransform(rot, trans)
