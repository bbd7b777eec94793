"""Metrics, experiment runner, trivial baseline, report emission, CLI.

The runner executes seeded repeats of one scenario configuration with one
method and emits a stable CSV schema:

    seed, config_id, method, rmse, procrustes_rmse, rot_err_deg,
    trans_err, chamfer, status, iters, wall_ms

Failed repeats keep their row (status tells why, metrics are nan). The
trivial baseline solves each viewpoint independently and averages, which
is exactly the splitting the joint solver is supposed to beat.
"""

import argparse
import csv
import json
import math
import os
import sys
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np
from scipy.spatial import cKDTree

from . import nsc as nsc_mod
from . import synth
from .errors import (
    DimensionMismatch,
    GensftError,
    GimbalWarning,
    ParseError,
    SolverInfeasible,
)
from .geometry import Ray, rigid_align
from .lifting import CvxpyBackend
from .ns import NsProblem, solve_ns
from .nsc import NscProblem, solve_nsc
from .shape_model import build_ssm, load_model, save_model
from .silhouette import load_observations, solve_silhouette_boosted_ns

CSV_COLUMNS = ("seed", "config_id", "method", "rmse", "procrustes_rmse",
               "rot_err_deg", "trans_err", "chamfer", "status", "iters", "wall_ms")
METHODS = ("ns", "nsc", "silhouette_ns", "trivial_repeated_sft")


# ---------------------------------------------------------------------------
# Metrics.


def rmse(recon, gt):
    """Root mean squared per-point Euclidean distance (columns correspond)."""
    a = np.asarray(recon, dtype=float)
    b = np.asarray(gt, dtype=float)
    if a.shape != b.shape or a.ndim != 2 or a.shape[0] != 3:
        raise DimensionMismatch(f"clouds must share shape 3xN, got {a.shape} vs {b.shape}")
    return float(np.sqrt(((a - b) ** 2).sum(axis=0).mean()))


def procrustes_rmse(recon, gt):
    """rmse after the best rigid alignment of recon onto gt."""
    g = rigid_align(recon, gt)
    return rmse(g.apply(recon), gt)


def _euler_zyx_deg(matrix):
    pitch = math.asin(max(-1.0, min(1.0, -matrix[2, 0])))
    if abs(abs(math.degrees(pitch)) - 90.0) < 0.5:
        warnings.warn("Euler decomposition near gimbal lock", GimbalWarning, stacklevel=3)
    roll = math.atan2(matrix[2, 1], matrix[2, 2])
    yaw = math.atan2(matrix[1, 0], matrix[0, 0])
    return np.degrees([yaw, pitch, roll])


def rotation_error_deg(a, b):
    """Mean absolute z-y-x Euler angle of the orientation difference.

    Euler decomposition of a^T b is not symmetric in its arguments, so the
    two orderings are averaged; the result is symmetric by construction
    and agrees with the one-sided value on single-axis differences.
    """
    d1 = np.abs(_euler_zyx_deg(a.matrix.T @ b.matrix)).mean()
    d2 = np.abs(_euler_zyx_deg(b.matrix.T @ a.matrix)).mean()
    return float(0.5 * (d1 + d2))


def geodesic_rotation_deg(a, b):
    """Rotation angle between two rotations, stable near zero."""
    frob = np.linalg.norm(a.matrix - b.matrix)
    return float(np.degrees(2.0 * np.arcsin(min(1.0, frob / (2.0 * np.sqrt(2.0))))))


def translation_error(a, b):
    return float(np.linalg.norm(np.asarray(a, dtype=float) - np.asarray(b, dtype=float)))


def chamfer(a, b):
    """Symmetric mean nearest-neighbor distance.

    Note: conventions for the Chamfer distance differ by constant factors
    across the literature; this is the plain symmetric mean.
    """
    a = np.asarray(a, dtype=float).T
    b = np.asarray(b, dtype=float).T
    d_ab = cKDTree(b).query(a)[0].mean()
    d_ba = cKDTree(a).query(b)[0].mean()
    return float(0.5 * (d_ab + d_ba))


@dataclass(frozen=True)
class MetricReport:
    seed: int
    config_id: str
    method: str
    rmse: float
    procrustes_rmse: float
    rot_err_deg: float
    trans_err: float
    chamfer: float
    status: str
    iters: int
    wall_ms: float
    per_view_rot_err: tuple = ()  # not part of the CSV schema


_NAN_REPORT = dict(rmse=float("nan"), procrustes_rmse=float("nan"),
                   rot_err_deg=float("nan"), trans_err=float("nan"),
                   chamfer=float("nan"))


# ---------------------------------------------------------------------------
# Experiment runner.


def _eval_ns_like(scenario, solution, iters):
    gt = scenario.gt_points
    recon = solution.reconstruction
    rot_err = rotation_error_deg(solution.instance.pose.rotation,
                                 scenario.gt_instance.pose.rotation)
    return dict(
        rmse=rmse(recon, gt),
        procrustes_rmse=procrustes_rmse(recon, gt),
        rot_err_deg=rot_err,
        trans_err=translation_error(solution.instance.pose.translation,
                                    scenario.gt_instance.pose.translation),
        chamfer=chamfer(recon, gt),
        status=solution.status,
        iters=iters,
        per_view_rot_err=(rot_err,),
    )


def _eval_nsc(scenario, solution):
    gt_anchor = scenario.viewpoint_poses[0].apply(scenario.gt_points)
    recon = nsc_mod.anchor_reconstruction(scenario.nsc_problem, solution)
    p = len(scenario.viewpoint_poses)
    rot_errs, trans_errs = [], []
    for x in range(1, p):
        gt_rel = scenario.viewpoint_poses[0].compose(scenario.viewpoint_poses[x].inverse())
        est_rel = solution.relative_poses[x]
        rot_errs.append(rotation_error_deg(est_rel.rotation, gt_rel.rotation))
        trans_errs.append(translation_error(est_rel.translation, gt_rel.translation))
    return dict(
        rmse=rmse(recon, gt_anchor),
        procrustes_rmse=procrustes_rmse(recon, gt_anchor),
        rot_err_deg=float(np.mean(rot_errs)) if rot_errs else 0.0,
        trans_err=float(np.mean(trans_errs)) if trans_errs else 0.0,
        chamfer=chamfer(recon, gt_anchor),
        status=solution.status,
        iters=0,
        per_view_rot_err=tuple(rot_errs),
    )


def _eval_trivial(scenario, backend_factory):
    """P single-view solves; mean per-view accuracy, Euclidean-mean shape."""
    problem = scenario.ns_problem
    gt = scenario.gt_points
    gt_pose = scenario.gt_instance.pose
    recons, per_rmse, rot_errs, trans_errs, statuses = [], [], [], [], []
    for view, corr in zip(problem.viewpoints, problem.correspondences):
        sub = NsProblem(problem.model, (view,), (corr,), problem.trace_weight)
        sol = solve_ns(sub, backend=backend_factory())
        recons.append(sol.reconstruction)
        per_rmse.append(rmse(sol.reconstruction, gt))
        rot_errs.append(rotation_error_deg(sol.instance.pose.rotation, gt_pose.rotation))
        trans_errs.append(translation_error(sol.instance.pose.translation,
                                            gt_pose.translation))
        statuses.append(sol.status)
    combined = np.mean(recons, axis=0)
    status = "optimal" if all(s == "optimal" for s in statuses) else "near_optimal"
    return dict(
        rmse=float(np.mean(per_rmse)),
        procrustes_rmse=procrustes_rmse(combined, gt),
        rot_err_deg=float(np.mean(rot_errs)),
        trans_err=float(np.mean(trans_errs)),
        chamfer=chamfer(combined, gt),
        status=status,
        iters=0,
        per_view_rot_err=tuple(rot_errs),
    )


def _run_one(config, method, lam, max_iters, backend_factory):
    t0 = time.perf_counter()
    fields = dict(_NAN_REPORT, status="failed", iters=0)
    try:
        scenario = synth.generate_scenario(config)
        if method == "ns":
            sol = solve_ns(scenario.ns_problem, backend=backend_factory())
            fields = _eval_ns_like(scenario, sol, iters=0)
        elif method == "nsc":
            if scenario.nsc_problem is None:
                raise DimensionMismatch("scenario has no perspective-only view set")
            sol = solve_nsc(scenario.nsc_problem, backend=backend_factory())
            fields = _eval_nsc(scenario, sol)
        elif method == "silhouette_ns":
            if scenario.observations is None:
                raise DimensionMismatch("config has no density; no silhouettes generated")
            res = solve_silhouette_boosted_ns(
                scenario.ns_problem, scenario.observations, lam=lam,
                max_iters=max_iters, backend=backend_factory())
            fields = _eval_ns_like(scenario, res.solution, iters=res.iterations)
            if not res.converged:
                fields["status"] = "non_converged"
        elif method == "trivial_repeated_sft":
            fields = _eval_trivial(scenario, backend_factory)
        else:
            raise ValueError(f"unknown method {method!r}")
    except DimensionMismatch:
        fields = dict(_NAN_REPORT, status="degenerate", iters=0)
    except GensftError:
        fields = dict(_NAN_REPORT, status="failed", iters=0)
    wall_ms = (time.perf_counter() - t0) * 1e3
    return MetricReport(seed=config.seed, config_id=config.config_id, method=method,
                        wall_ms=wall_ms, **fields)


def run_experiment(config, method, repeats, lam=0.5, max_iters=50,
                   backend_factory=CvxpyBackend, max_workers=None):
    """Seeded repeats of one configuration; one MetricReport per repeat."""
    if method not in METHODS:
        raise ValueError(f"method must be one of {METHODS}")
    configs = [replace(config, seed=config.seed + i) for i in range(repeats)]
    if max_workers is None:
        max_workers = min(len(configs), os.cpu_count() or 1)
    if max_workers <= 1 or len(configs) == 1:
        return [_run_one(c, method, lam, max_iters, backend_factory) for c in configs]
    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        return list(pool.map(
            lambda c: _run_one(c, method, lam, max_iters, backend_factory), configs))


def _cell(value):
    if isinstance(value, float):
        return repr(value)
    return str(value)


def emit_report(reports, path, svg_path=None):
    """Write the CSV (and optionally a single-panel RMSE scatter SVG)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for r in reports:
            writer.writerow([_cell(getattr(r, col)) for col in CSV_COLUMNS])
    if svg_path is not None:
        _scatter_svg(reports, svg_path)
    return path


def read_report(path):
    """Parse a CSV written by emit_report back into dict rows."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for row in rows:
        for key in ("rmse", "procrustes_rmse", "rot_err_deg", "trans_err",
                    "chamfer", "wall_ms"):
            row[key] = float(row[key])
        row["seed"] = int(row["seed"])
        row["iters"] = int(row["iters"])
    return rows


def _scatter_svg(reports, path):
    from matplotlib.figure import Figure

    fig = Figure(figsize=(5, 3.5))
    ax = fig.subplots()
    configs = sorted({r.config_id for r in reports})
    slot = {c: i for i, c in enumerate(configs)}
    methods = sorted({r.method for r in reports})
    for marker, method in zip("ox+sd", methods):
        # nan rmse (failed/degenerate repeats) has no place on a log axis
        pts = [(slot[r.config_id], r.rmse) for r in reports
               if r.method == method and math.isfinite(r.rmse)]
        if pts:
            xs, ys = zip(*pts)
            ax.scatter(xs, ys, marker=marker, label=method, alpha=0.7)
    ax.set_xticks(range(len(configs)), configs)
    ax.set_xlabel("configuration")
    ax.set_ylabel("RMSE (au)")
    if len(methods) > 1:
        ax.legend()
    ax.set_yscale("log")
    fig.tight_layout()
    fig.savefig(path, format="svg")


# ---------------------------------------------------------------------------
# CLI.


def _add_common(parser):
    parser.add_argument("--eps-prime", type=float, default=1e-3,
                        help="trace regularization weight")
    parser.add_argument("--out", default=None, help="output directory")


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="gensft",
        description="Deformable template registration from multi-view sightlines.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate scenario files")
    p.add_argument("--config", default=None, help="scenario config JSON")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)

    p = sub.add_parser("ns", help="known-pose solve from scenario files")
    p.add_argument("scenario", help="directory written by `gensft synth`")
    _add_common(p)

    p = sub.add_parser("nsc", help="unknown-pose solve from scenario files")
    p.add_argument("scenario")
    p.add_argument("--min-depth", type=float, default=None,
                   help="override per-view depth floors")
    _add_common(p)

    p = sub.add_parser("silh-ns", help="silhouette-boosted solve from scenario files")
    p.add_argument("scenario")
    p.add_argument("--lambda", dest="lam", type=float, default=0.5)
    p.add_argument("--max-iters", type=int, default=50)
    _add_common(p)

    p = sub.add_parser("bench", help="run the configuration ladder")
    p.add_argument("--config", default=None, help="base scenario config JSON")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--method", default="ns", choices=METHODS)
    p.add_argument("--out", default=".")

    p = sub.add_parser("ssm", help="shape-model utilities")
    ssm_sub = p.add_subparsers(dest="ssm_command", required=True)
    b = ssm_sub.add_parser("build", help="PCA model from a population file")
    b.add_argument("samples", help='JSON {"samples": [[[x,y,z],...] per sample]}')
    b.add_argument("--variance-fraction", type=float, default=0.99)
    b.add_argument("--out", required=True, help="output model JSON path")

    return parser


def _load_scenario_dir(path):
    model = load_model(os.path.join(path, "model.json"))
    viewpoints, depths = synth.load_views(os.path.join(path, "rays.json"))
    corrs = synth.load_correspondences(os.path.join(path, "correspondences.json"))
    return model, viewpoints, depths, corrs


def _write_json(doc, out, name):
    if out is None:
        print(json.dumps(doc, indent=1))
        return
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, name), "w") as fh:
        json.dump(doc, fh, indent=1)


def _instance_doc(solution):
    return {
        "weights": solution.instance.weights.tolist(),
        "rotation": solution.instance.pose.rotation.matrix.tolist(),
        "translation": solution.instance.pose.translation.tolist(),
        "objective": solution.objective,
        "status": solution.status,
        "rank_ratio": solution.diagnostics.ratio,
    }


def _cmd_synth(args):
    config = synth.load_config(args.config) if args.config else synth.ScenarioConfig()
    if args.seed is not None:
        config = replace(config, seed=args.seed)
    scenario = synth.generate_scenario(config)
    os.makedirs(args.out, exist_ok=True)
    synth.save_scenario(scenario, args.out)
    synth.save_config(config, os.path.join(args.out, "config.json"))
    print(f"scenario written to {args.out}")
    return 0


def _cmd_ns(args):
    model, viewpoints, _, corrs = _load_scenario_dir(args.scenario)
    problem = NsProblem(model, viewpoints, corrs, args.eps_prime)
    solution = solve_ns(problem)
    _write_json(_instance_doc(solution), args.out, "solution.json")
    print(f"status={solution.status} objective={solution.objective:.6e} "
          f"rank_ratio={solution.diagnostics.ratio:.2e}")
    return 0


def _cmd_nsc(args):
    model, viewpoints, depths, corrs = _load_scenario_dir(args.scenario)
    views, resolved = [], []
    for view, depth in zip(viewpoints, depths):
        # Stored rays are world frame; the unknown-pose solver wants them in
        # each camera's own frame, where every sightline passes the origin.
        local = view.pose
        rays = tuple(Ray(np.zeros(3), local.rotation.matrix @ r.direction)
                     for r in view.rays)
        views.append(rays)
        if args.min_depth is not None:
            resolved.append(args.min_depth)
        else:
            resolved.append(depth if depth is not None else nsc_mod.DEFAULT_MIN_DEPTH)
    problem = NscProblem(model, tuple(views), corrs, tuple(resolved), args.eps_prime)
    solution = solve_nsc(problem)
    doc = {
        "weights": solution.weights.tolist(),
        "transforms": [synth._pose_doc(g) for g in solution.transforms],
        "poses": [synth._pose_doc(g) for g in solution.poses],
        "relative_poses": [synth._pose_doc(g) for g in solution.relative_poses],
        "objective": solution.objective,
        "status": solution.status,
        "rank_ratios": [d.ratio for d in solution.diagnostics],
        "scales": [d.scale for d in solution.diagnostics],
    }
    _write_json(doc, args.out, "solution.json")
    print(f"status={solution.status} objective={solution.objective:.6e} "
          f"max_rank_ratio={max(d.ratio for d in solution.diagnostics):.2e}")
    return 0


def _cmd_silh_ns(args):
    model, viewpoints, _, corrs = _load_scenario_dir(args.scenario)
    observations = load_observations(os.path.join(args.scenario, "silhouettes.json"))
    problem = NsProblem(model, viewpoints, corrs, args.eps_prime)
    result = solve_silhouette_boosted_ns(problem, observations, lam=args.lam,
                                         max_iters=args.max_iters)
    doc = _instance_doc(result.solution)
    doc["converged"] = result.converged
    doc["iterations"] = result.iterations
    doc["trace"] = [[r.objective, r.rmse, r.n_pairs] for r in result.trace]
    _write_json(doc, args.out, "solution.json")
    print(f"status={result.solution.status} converged={result.converged} "
          f"iterations={result.iterations}")
    return 0 if result.converged else 4


def _cmd_bench(args):
    base = synth.load_config(args.config) if args.config else None
    variant = "nsc" if args.method == "nsc" else "ns"
    reports = []
    for config_id in (1, 2, 3, 4, 5):
        if base is None:
            config = synth.ladder_config(config_id, variant, seed=args.seed)
        else:
            counts = (synth.NS_LADDER if variant == "ns" else synth.NSC_LADDER)[config_id]
            config = replace(base, corr_counts=counts, projections="perspective",
                             config_id=str(config_id), seed=args.seed)
        reports.extend(run_experiment(config, args.method, args.repeats))
    # The bench artifact must be reproducible from (config, seed) alone, so
    # measured wall time is zeroed; use run_experiment directly for timings.
    reports = [replace(r, wall_ms=0.0) for r in reports]
    os.makedirs(args.out, exist_ok=True)
    csv_path = os.path.join(args.out, "bench.csv")
    emit_report(reports, csv_path, svg_path=os.path.join(args.out, "bench.svg"))
    print(f"wrote {csv_path} ({len(reports)} rows)")
    return 0


def _cmd_ssm_build(args):
    try:
        with open(args.samples) as fh:
            doc = json.load(fh)
        samples = [np.asarray(s, dtype=float).T for s in doc["samples"]]
    except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"{args.samples}: bad population file ({exc})") from exc
    model = build_ssm(samples, variance_fraction=args.variance_fraction)
    save_model(model, args.out)
    print(f"model with {model.n_bases} bases over {model.n_points} points -> {args.out}")
    return 0


def main(argv=None):
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "synth":
            return _cmd_synth(args)
        if args.command == "ns":
            return _cmd_ns(args)
        if args.command == "nsc":
            return _cmd_nsc(args)
        if args.command == "silh-ns":
            return _cmd_silh_ns(args)
        if args.command == "bench":
            return _cmd_bench(args)
        if args.command == "ssm":
            return _cmd_ssm_build(args)
    except ParseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except SolverInfeasible as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except GensftError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
