"""Silhouette boundaries, direction matching, and boosted registration.

The observed silhouette of a view is a sequence of unit sightline
directions along the object's outline. The model-side counterpart is
formed by projecting the current dense reconstruction, tracing its
alpha-shape boundary, and lifting the boundary pixels back to unit
directions. Matched pairs become extra reprojection terms and the NS
program is re-solved until the pair set stops growing.
"""

import warnings
from dataclasses import dataclass
import json

import numpy as np
from scipy.spatial import ConvexHull, Delaunay, QhullError

from .errors import (
    DegenerateCloud,
    DimensionMismatch,
    NonConvergenceWarning,
    NonPositiveDepth,
    ParseError,
)
from .geometry import Ray, project_perspective
from .ns import solve_ns_weighted
from .shape_model import instantiate

MAX_DIRECTIONS = 512  # observed silhouettes are thinned to this many per view
AUTO_BISECTION_STEPS = 20


@dataclass(frozen=True)
class SilhouetteObservation:
    """Ordered unit sightline directions along one view's outline (camera frame)."""

    directions: np.ndarray  # 3 x S

    def __post_init__(self):
        d = np.asarray(self.directions, dtype=float)
        if d.ndim != 2 or d.shape[0] != 3:
            raise DimensionMismatch(f"directions must be 3xS, got {d.shape}")
        if d.shape[1] < 3:
            raise DimensionMismatch("need at least 3 silhouette directions")
        norms = np.linalg.norm(d, axis=0)
        if np.any(norms < 1e-12) or not np.isfinite(norms).all():
            raise ValueError("silhouette directions must be nonzero and finite")
        object.__setattr__(self, "directions", d / norms)

    def __len__(self):
        return self.directions.shape[1]


@dataclass(frozen=True)
class ModelSilhouette:
    """Boundary of the projected model: template indices plus unit directions."""

    indices: np.ndarray  # S' template indices, boundary order
    directions: np.ndarray  # 3 x S', camera frame

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=int)
        d = np.asarray(self.directions, dtype=float)
        if d.shape != (3, idx.shape[0]):
            raise DimensionMismatch("indices and directions disagree on boundary length")
        if len(np.unique(idx)) != idx.shape[0]:
            raise ValueError("boundary indices must be unique")
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "directions", d)


@dataclass(frozen=True)
class SilhouetteCorrespondence:
    """Pairs (boundary position s, observed position s'); each s used once."""

    pairs: tuple

    def __post_init__(self):
        pairs = tuple((int(s), int(sp)) for s, sp in self.pairs)
        if len({s for s, _ in pairs}) != len(pairs):
            raise ValueError("each model boundary position may appear only once")
        object.__setattr__(self, "pairs", pairs)

    def __len__(self):
        return len(self.pairs)

    def canonical(self, model_sil):
        """Iteration-stable form: (template index, observed position) set."""
        return frozenset((int(model_sil.indices[s]), sp) for s, sp in self.pairs)


def load_observations(path):
    """Read per-view silhouette directions from the JSON observation file."""
    try:
        with open(path) as fh:
            doc = json.load(fh)
        views = doc["views"]
        out = []
        for v in views:
            out.append(SilhouetteObservation(np.asarray(v["directions"], dtype=float).T))
        return out
    except (OSError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ParseError(f"{path}: bad silhouette file ({exc})") from exc


def _circumradii(points, simplices):
    a = points[simplices[:, 0]]
    b = points[simplices[:, 1]]
    c = points[simplices[:, 2]]
    la = np.linalg.norm(b - c, axis=1)
    lb = np.linalg.norm(a - c, axis=1)
    lc = np.linalg.norm(a - b, axis=1)
    area2 = np.abs((b - a)[:, 0] * (c - a)[:, 1] - (b - a)[:, 1] * (c - a)[:, 0])
    with np.errstate(divide="ignore", invalid="ignore"):
        r = (la * lb * lc) / (2.0 * area2)
    r[area2 < 1e-300] = np.inf
    return r


def _boundary_cycle(simplices, keep, n_points):
    """Ordered vertex cycle of the kept region, or None if not a single cycle."""
    kept = simplices[keep]
    if kept.shape[0] == 0:
        return None
    edges = {}
    for tri in kept:
        for e in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])):
            key = (min(e), max(e))
            edges[key] = edges.get(key, 0) + 1
    boundary = [e for e, cnt in edges.items() if cnt == 1]
    if not boundary:
        return None
    adjacency = {}
    for u, v in boundary:
        adjacency.setdefault(u, []).append(v)
        adjacency.setdefault(v, []).append(u)
    if any(len(nb) != 2 for nb in adjacency.values()):
        return None
    # region must cover every point, else orphans sit outside the cycle
    if len(np.unique(kept)) != n_points:
        return None
    start = min(adjacency)
    cycle = [start]
    prev, cur = None, start
    while True:
        a, b = adjacency[cur]
        nxt = b if a == prev else a if b == prev else min(a, b)
        if nxt == start:
            break
        cycle.append(nxt)
        prev, cur = cur, nxt
        if len(cycle) > len(adjacency):
            return None
    if len(cycle) != len(adjacency):
        return None
    return cycle


def _triangulated(points2d):
    pts = np.asarray(points2d, dtype=float)
    if pts.ndim != 2 or pts.shape[0] != 2:
        raise DimensionMismatch(f"points must be 2xk, got {pts.shape}")
    # order-preserving dedup: survivors keep their original relative order,
    # so on duplicate-free input the hull path reproduces ConvexHull exactly
    _, first = np.unique(pts.T, axis=0, return_index=True)
    first = np.sort(first)
    uniq = pts.T[first]
    if uniq.shape[0] < 3:
        raise DegenerateCloud("fewer than 3 distinct points")
    try:
        tri = Delaunay(uniq)
    except QhullError as exc:
        raise DegenerateCloud("points are collinear") from exc
    return uniq, first, tri.simplices, _circumradii(uniq, tri.simplices)


def _bisect_spectrum(simplices, radii, n_points):
    """Smallest circumradius threshold giving one all-covering cycle, or inf."""
    spectrum = np.unique(radii[np.isfinite(radii)])
    lo, hi = 0, spectrum.shape[0] - 1
    if hi < 0 or _boundary_cycle(simplices, radii <= spectrum[hi], n_points) is None:
        return np.inf
    for _ in range(AUTO_BISECTION_STEPS):
        if lo >= hi:
            break
        mid = (lo + hi) // 2
        if _boundary_cycle(simplices, radii <= spectrum[mid], n_points) is not None:
            hi = mid
        else:
            lo = mid + 1
    return float(spectrum[hi])


def resolve_alpha(points2d):
    """The alpha that auto mode would use on this cloud (inf = convex hull)."""
    uniq, _, simplices, radii = _triangulated(points2d)
    return _bisect_spectrum(simplices, radii, uniq.shape[0])


def alpha_silhouette(points2d, alpha="auto"):
    """Ordered boundary indices of the alpha-shape of a 2D point set.

    alpha = inf keeps every Delaunay triangle and reduces to the convex
    hull. Auto mode bisects the triangle circumradius spectrum for the
    smallest alpha whose kept region has a single boundary cycle covering
    all points, falling back to the convex hull.
    """
    uniq, first, simplices, radii = _triangulated(points2d)
    n = uniq.shape[0]
    if alpha == "auto":
        alpha = _bisect_spectrum(simplices, radii, n)
    if np.isinf(alpha):
        cycle = _convex_hull_cycle(uniq)
    else:
        cycle = _boundary_cycle(simplices, radii <= float(alpha), n)
        if cycle is None:
            raise DegenerateCloud(f"alpha = {alpha} does not give a single closed boundary")
    return [int(first[v]) for v in cycle]


def _convex_hull_cycle(uniq):
    return list(ConvexHull(uniq).vertices)


def _image_silhouette(image, alpha):
    boundary = alpha_silhouette(image, alpha)
    dirs = np.vstack([image[:, boundary], np.ones(len(boundary))])
    dirs /= np.linalg.norm(dirs, axis=0)
    return ModelSilhouette(indices=np.array(boundary, dtype=int), directions=dirs)


def model_silhouette(model, instance, view_pose, alpha="auto"):
    """Template indices and camera-frame directions of the projected outline."""
    image = project_perspective(instantiate(model, instance), view_pose)
    return _image_silhouette(image, alpha)


def match_silhouettes(model_sil, observed):
    """Each model boundary direction picks the observed direction with the
    smallest cross-product norm; ties go to the smaller observed index."""
    a = model_sil.directions.T  # S' x 3
    b = observed.directions.T  # S x 3
    cross = np.cross(a[:, None, :], b[None, :, :])
    cost = np.linalg.norm(cross, axis=2)
    best = np.argmin(cost, axis=1)  # argmin returns the first (smallest) index on ties
    return SilhouetteCorrespondence(tuple((s, int(best[s])) for s in range(a.shape[0])))


def _thin(observed, cap=MAX_DIRECTIONS):
    """Arc-length thinning to at most `cap` directions; keeps original indices."""
    d = observed.directions
    s = d.shape[1]
    if s <= cap:
        return observed, np.arange(s)
    steps = np.linalg.norm(np.diff(d, axis=1), axis=0)
    arc = np.concatenate([[0.0], np.cumsum(steps)])
    targets = np.linspace(0.0, arc[-1], cap, endpoint=False)
    picks = np.unique(np.searchsorted(arc, targets))
    return SilhouetteObservation(d[:, picks]), picks


@dataclass(frozen=True)
class IterationRecord:
    objective: float
    rmse: float  # nan when no ground truth was supplied
    n_pairs: int


@dataclass(frozen=True)
class BoostResult:
    solution: object  # NsSolution of the returned iterate
    trace: tuple  # IterationRecord per solve, the initial plain NS first
    converged: bool
    iterations: int  # refinement iterations executed


def _rmse_or_nan(recon, gt_points):
    if gt_points is None:
        return float("nan")
    return float(np.sqrt(((recon - gt_points) ** 2).sum(axis=0).mean()))


def solve_silhouette_boosted_ns(problem, observations, lam=0.5, max_iters=50,
                                backend=None, alpha="auto", gt_points=None):
    """Iterative silhouette-boosted registration.

    Starts from the plain NS solution; each iteration projects the dense
    model, matches its boundary directions against the observed ones and
    re-solves with correspondence terms weighted `lam` and silhouette
    terms weighted 1 - lam (omitted entirely at lam = 1). Stops when an
    iteration's matched pair set adds nothing new over the previous one,
    or at `max_iters`, in which case the best iterate by objective is
    returned and a NonConvergenceWarning is issued.
    """
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lam must lie in [0, 1]")
    if len(observations) != problem.n_views:
        raise DimensionMismatch("need one silhouette observation per viewpoint")
    thinned = [_thin(obs) for obs in observations]

    solution = solve_ns_weighted(problem, backend=backend)
    trace = [IterationRecord(solution.objective, _rmse_or_nan(solution.reconstruction, gt_points), 0)]
    iterates = [solution]
    prev_sets = [frozenset() for _ in range(problem.n_views)]
    # Auto alpha is resolved once per view from the first usable projection
    # and then held fixed: re-deriving it every iteration makes the boundary
    # map jump between topologies, which keeps generating novel pairs and
    # the subset stopping rule never fires.
    frozen_alpha = [alpha] * problem.n_views
    converged = False
    iterations = 0

    for _ in range(max_iters):
        iterations += 1
        new_sets, term_blocks, total_pairs = [], [], 0
        skipped_view = False
        dense = instantiate(problem.model, iterates[-1].instance)
        for x, view in enumerate(problem.viewpoints):
            try:
                image = project_perspective(dense, view.pose)
                if isinstance(frozen_alpha[x], str):
                    frozen_alpha[x] = resolve_alpha(image)
                try:
                    msil = _image_silhouette(image, frozen_alpha[x])
                except DegenerateCloud:
                    if alpha != "auto":
                        raise
                    # The frozen alpha stopped giving a single cycle on this
                    # iterate; the convex hull always does.
                    msil = _image_silhouette(image, np.inf)
            except (NonPositiveDepth, DegenerateCloud):
                # A wild intermediate iterate can land partly behind a camera
                # or project degenerately; the view sits this iteration out.
                skipped_view = True
                new_sets.append(frozenset())
                continue
            obs, picks = thinned[x]
            pairs = match_silhouettes(msil, obs)
            new_sets.append(frozenset(
                (int(msil.indices[s]), int(picks[sp])) for s, sp in pairs.pairs
            ))
            total_pairs += len(pairs)
            if lam < 1.0:
                inv = view.pose.inverse()
                rays = tuple(
                    Ray(inv.translation, inv.rotation.matrix @ obs.directions[:, sp])
                    for _, sp in pairs.pairs
                )
                term_blocks.append((msil.indices[[s for s, _ in pairs.pairs]], rays, 1.0 - lam))
        if not skipped_view and all(new <= prev for new, prev in zip(new_sets, prev_sets)):
            converged = True
            break
        prev_sets = new_sets
        solution = solve_ns_weighted(problem, corr_weight=lam, extra_terms=term_blocks,
                                     backend=backend)
        trace.append(IterationRecord(
            solution.objective, _rmse_or_nan(solution.reconstruction, gt_points), total_pairs))
        iterates.append(solution)

    if converged:
        final = iterates[-1]
    else:
        warnings.warn(
            f"silhouette refinement did not settle within {max_iters} iterations; "
            "returning the best iterate by objective",
            NonConvergenceWarning,
            stacklevel=2,
        )
        final = min(iterates, key=lambda s: s.objective)
    return BoostResult(solution=final, trace=tuple(trace), converged=converged,
                       iterations=iterations)
