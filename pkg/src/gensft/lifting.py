"""Gram-matrix lifting of rotation-and-weight polynomials.

The monomial vector is xi = (1, vec(R) row-major, w_1..w_M), so the lift
Delta = xi xi^T is (10+M)x(10+M) PSD with Delta[0,0] = 1. Linear reads of
Delta (the omega operators below) recover the cost and constraint
polynomials: row 0 holds vec(R) and w, row 10+i holds w_i*vec(R), the
diagonal rotation blocks hold row Gram products. Everything downstream
(NS, NSC, silhouette boosting) is assembled from these reads plus free
translation variables, packaged as a ConicProblem and handed to a
backend.
"""

import json
import os
import warnings
from dataclasses import dataclass, field

import cvxpy as cp
import numpy as np
import scipy.sparse as sp

from .errors import DegenerateMatrix, DimensionMismatch, HighRankWarning
from .geometry import Rotation, nearest_rotation

DEFAULT_TOL = 1e-8
RANK1_RATIO = 1e-4  # lambda2/lambda1 above this counts as rank-relaxed
NONNEG = "_nonneg"  # reserved label for the shared L1-epigraph auxiliaries


def skew(v):
    """Cross-product matrix: skew(v) @ u = v x u."""
    return np.array([
        [0.0, -v[2], v[1]],
        [v[2], 0.0, -v[0]],
        [-v[1], v[0], 0.0],
    ])


def lift_dimension(n_weights):
    return 10 + int(n_weights)


@dataclass(frozen=True)
class GramLift:
    """Symmetric (10+M)x(10+M) moment matrix."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=float)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise DimensionMismatch(f"lift must be square, got {m.shape}")
        if m.shape[0] < 11:
            raise DimensionMismatch("lift dimension must be at least 11 (one weight)")
        if not np.isfinite(m).all():
            raise ValueError("lift entries must be finite")
        if np.abs(m - m.T).max() > 1e-10:
            raise ValueError("lift must be symmetric within 1e-10")
        object.__setattr__(self, "matrix", m)

    @property
    def dim(self):
        return self.matrix.shape[0]

    @property
    def n_weights(self):
        return self.matrix.shape[0] - 10


def lift_from_parameters(rotation, weights):
    """Rank-1 lift of (R, w)."""
    w = np.asarray(weights, dtype=float).reshape(-1)
    if w.size < 1:
        raise DimensionMismatch("need at least one weight")
    xi = np.concatenate([[1.0], rotation.matrix.reshape(-1), w])
    return GramLift(np.outer(xi, xi))


def omega_a(delta):
    """Sum of the weight-block diagonal; equals sum(w_i^2) on rank-1 lifts."""
    return float(np.trace(delta.matrix[10:, 10:]))


def _rot_row_slice(r):
    if r not in (1, 2, 3):
        raise ValueError("rotation row index must be 1, 2 or 3")
    return slice(1 + 3 * (r - 1), 4 + 3 * (r - 1))


def omega_c(delta, r):
    """Trace of the r-th rotation-row diagonal block (|row r|^2 on rank-1)."""
    s = _rot_row_slice(r)
    return float(np.trace(delta.matrix[s, s]))


_OFF_PAIRS = {1: (1, 2), 2: (1, 3), 3: (2, 3)}


def omega_d(delta, r):
    """Trace of an off-diagonal row-pair block (row inner product on rank-1)."""
    a, b = _OFF_PAIRS[r] if r in _OFF_PAIRS else (None, None)
    if a is None:
        raise ValueError("row-pair index must be 1, 2 or 3")
    return float(np.trace(delta.matrix[_rot_row_slice(a), _rot_row_slice(b)]))


def omega_b(delta, translation, ray, mean_point, basis_points):
    """Numeric lifted reprojection residual for one correspondence.

    Reassembles the lifted point P_up = R~ @ mean + sum_i W~_i @ basis_i + t,
    where R~ is read from row 0 and W~_i (the w_i R products) from row 10+i,
    and returns (P_up - ray.origin) x ray.direction. On a rank-1 lift of
    (R, w) this equals the analytic residual (R Q_j + t - C) x d exactly.
    """
    m = delta.matrix
    pts = [np.asarray(p, dtype=float).reshape(-1) for p in basis_points]
    if len(pts) != delta.n_weights:
        raise DimensionMismatch(f"expected {delta.n_weights} basis points, got {len(pts)}")
    p_up = m[0, 1:10].reshape(3, 3) @ np.asarray(mean_point, dtype=float).reshape(3)
    for i, q in enumerate(pts):
        if q.shape != (3,):
            raise DimensionMismatch("basis points must be 3-vectors")
        p_up = p_up + m[10 + i, 1:10].reshape(3, 3) @ q
    p_up = p_up + np.asarray(translation, dtype=float).reshape(3)
    return np.cross(p_up - ray.origin, ray.direction)


@dataclass(frozen=True)
class RankDiagnostics:
    """Eigenvalue spectrum and scale-drift read of one solved lift."""

    eigenvalues: np.ndarray  # descending
    ratio: float  # lambda2/lambda1
    scale: float  # cube root of det of the putative rotation block
    sign_ambiguous: bool  # det < 0 before projection

    @property
    def high_rank(self):
        return self.ratio > RANK1_RATIO


def polar_rotation(matrix):
    """Nearest rotation, completed deterministically on rank-deficient input.

    High-rank lifts can average distant rotations into a nearly singular
    putative block; solves must still return a (flagged) solution, so the
    undetermined polar directions are filled from the SVD factors instead
    of raising.
    """
    try:
        return nearest_rotation(matrix)
    except DegenerateMatrix:
        u, _, vt = np.linalg.svd(np.asarray(matrix, dtype=float))
        d = float(np.sign(np.linalg.det(u @ vt)))
        return Rotation(u @ np.diag([1.0, 1.0, d]) @ vt)


def extract_solution(delta, warn=True):
    """Read (Rotation, weights, diagnostics) off a solved lift.

    Row 0 is xi scaled by xi_0, so with Delta[0,0] = 1 it holds vec(R) and w
    directly; the putative rotation is projected to SO(3), which removes any
    uniform scale drift (reported, not corrected, in the diagnostics).
    """
    m = delta.matrix
    if abs(m[0, 0]) < 1e-12:
        raise DegenerateMatrix("lift has vanishing (0,0) entry; no rank-1 read possible")
    evals = np.linalg.eigvalsh(m)[::-1]
    ratio = float(evals[1] / evals[0]) if evals[0] > 0 else np.inf
    row0 = m[0] / m[0, 0]
    putative = row0[1:10].reshape(3, 3)
    det = float(np.linalg.det(putative))
    diag = RankDiagnostics(
        eigenvalues=evals,
        ratio=ratio,
        scale=float(np.cbrt(det)),
        sign_ambiguous=det < 0.0,
    )
    if warn and diag.high_rank:
        warnings.warn(
            f"lift is not rank one (lambda2/lambda1 = {ratio:.2e}); "
            "extracted parameters are approximate",
            HighRankWarning,
            stacklevel=2,
        )
    return polar_rotation(putative), row0[10:].copy(), diag


# ---------------------------------------------------------------------------
# Conic standard-form carrier and assembly helpers.


@dataclass(frozen=True)
class ConicProblem:
    """Standard-form conic program over a single concatenated variable vector.

    Column layout: PSD blocks first (row-major vec, dim^2 columns each, in
    declaration order), then free vectors, then the nonnegative tail. The
    objective is one sparse row; equalities/inequalities are sparse row
    blocks paired with right-hand sides (inequalities mean lhs >= rhs).
    """

    psd_blocks: tuple
    free_vectors: tuple
    nonneg_count: int
    objective: sp.csr_matrix
    equalities: tuple
    inequalities: tuple = ()

    @property
    def n_cols(self):
        n = sum(d * d for _, d in self.psd_blocks) + sum(d for _, d in self.free_vectors)
        return n + self.nonneg_count

    def column_range(self, label):
        ofs = 0
        for lab, d in self.psd_blocks:
            if lab == label:
                return ofs, ofs + d * d
            ofs += d * d
        for lab, d in self.free_vectors:
            if lab == label:
                return ofs, ofs + d
            ofs += d
        if label == NONNEG:
            return ofs, ofs + self.nonneg_count
        raise KeyError(f"undeclared variable {label!r}")

    def validate(self):
        labels = [lab for lab, _ in self.psd_blocks] + [lab for lab, _ in self.free_vectors]
        if len(set(labels)) != len(labels):
            raise ValueError("duplicate variable labels")
        n = self.n_cols
        if self.objective.shape != (1, n):
            raise DimensionMismatch(f"objective width {self.objective.shape} != (1, {n})")
        for mat, rhs in list(self.equalities) + list(self.inequalities):
            if mat.shape[1] != n or mat.shape[0] != rhs.shape[0]:
                raise DimensionMismatch("constraint block width or rhs length mismatch")
        return self


class ProblemBuilder:
    """Incremental ConicProblem assembly with label-local coefficients."""

    def __init__(self):
        self._psd = []
        self._free = []
        self._nonneg = 0
        self._obj = {}  # label -> dense row accumulator
        self._obj_nonneg = []  # (local indices, values)
        self._eq = []  # (coeffs dict, nonneg triplets or None, rhs)
        self._ineq = []

    def add_psd(self, label, dim):
        self._psd.append((label, int(dim)))
        return label

    def add_free(self, label, dim):
        self._free.append((label, int(dim)))
        return label

    def _var_len(self, label):
        for lab, d in self._psd:
            if lab == label:
                return d * d
        for lab, d in self._free:
            if lab == label:
                return d
        raise KeyError(f"undeclared variable {label!r}")

    def add_objective(self, label, row):
        row = np.asarray(row if not sp.issparse(row) else row.toarray(), dtype=float).reshape(-1)
        if row.shape[0] != self._var_len(label):
            raise DimensionMismatch(f"objective row length {row.shape[0]} for {label!r}")
        self._obj[label] = self._obj.get(label, 0.0) + row

    def add_equality(self, coeffs, rhs):
        self._append(self._eq, coeffs, None, rhs)

    def add_inequality(self, coeffs, rhs):
        """lhs >= rhs."""
        self._append(self._ineq, coeffs, None, rhs)

    def _append(self, dest, coeffs, nn_triplets, rhs):
        rhs = np.atleast_1d(np.asarray(rhs, dtype=float))
        blocks = {}
        for label, mat in coeffs.items():
            mat = sp.csr_matrix(mat)
            if mat.shape != (rhs.shape[0], self._var_len(label)):
                raise DimensionMismatch(f"coefficient block for {label!r} has shape {mat.shape}")
            blocks[label] = mat
        dest.append((blocks, nn_triplets, rhs))

    def add_l1_epigraph(self, coeffs, constant, weight=1.0):
        """Add |expr|_1 to the objective where expr = coeffs @ vars + constant.

        Introduces a (u+, u-) pair per row with u+ - u- = expr and puts
        weight * sum(u+ + u-) into the objective; at any optimum the
        contribution equals weight * |expr|_1.
        """
        constant = np.atleast_1d(np.asarray(constant, dtype=float))
        k = constant.shape[0]
        base = self._nonneg
        self._nonneg += 2 * k
        rows = np.concatenate([np.arange(k), np.arange(k)])
        cols = np.arange(2 * k) + base
        vals = np.concatenate([-np.ones(k), np.ones(k)])  # expr - u+ + u- = -const
        self._append(self._eq, coeffs, (rows, cols, vals), -constant)
        self._obj_nonneg.append((np.arange(2 * k) + base, float(weight) * np.ones(2 * k)))
        return base

    def build(self):
        psd = tuple(self._psd)
        free = tuple(self._free)
        n_main = sum(d * d for _, d in psd) + sum(d for _, d in free)
        n_cols = n_main + self._nonneg

        offsets = {}
        ofs = 0
        for lab, d in psd:
            offsets[lab] = ofs
            ofs += d * d
        for lab, d in free:
            offsets[lab] = ofs
            ofs += d

        obj = sp.lil_matrix((1, n_cols))
        for lab, row in self._obj.items():
            lo = offsets[lab]
            obj[0, lo:lo + row.shape[0]] = row
        for idx, vals in self._obj_nonneg:
            for i, v in zip(idx, vals):
                obj[0, n_main + i] += v

        def materialize(entries):
            out = []
            for blocks, nn, rhs in entries:
                parts = []
                for lab, mat in blocks.items():
                    lo = offsets[lab]
                    coo = mat.tocoo()
                    parts.append((coo.row, coo.col + lo, coo.data))
                if nn is not None:
                    r, c, v = nn
                    parts.append((r, c + n_main, v))
                if parts:
                    rows = np.concatenate([p[0] for p in parts])
                    cols = np.concatenate([p[1] for p in parts])
                    vals = np.concatenate([p[2] for p in parts])
                else:
                    rows = cols = vals = np.zeros(0)
                out.append((sp.coo_matrix((vals, (rows, cols)),
                                          shape=(rhs.shape[0], n_cols)).tocsr(), rhs))
            return tuple(out)

        problem = ConicProblem(
            psd_blocks=psd,
            free_vectors=free,
            nonneg_count=self._nonneg,
            objective=obj.tocsr(),
            equalities=materialize(self._eq),
            inequalities=materialize(self._ineq),
        )
        return problem.validate()


def assemble_l1_epigraph(builder, coeffs, constant, weight=1.0):
    return builder.add_l1_epigraph(coeffs, constant, weight)


def so3_lift_rows(n_weights):
    """Equality block pinning Delta[0,0] = 1 and the six R R^T = I reads.

    Returns (coefficient matrix over vec(Delta), rhs). Coefficients touch
    only the upper representative of each symmetric entry pair; the PSD
    variable is symmetric so this is sufficient.
    """
    dd = lift_dimension(n_weights)
    rows, cols, vals, rhs = [], [], [], []

    def entry(r, a, b, v):
        rows.append(r)
        cols.append(a * dd + b)
        vals.append(v)

    entry(0, 0, 0, 1.0)
    rhs.append(1.0)
    r = 1
    for a in (1, 4, 7):  # row-norm blocks
        for k in range(3):
            entry(r, a + k, a + k, 1.0)
        rhs.append(1.0)
        r += 1
    for a, b in ((1, 4), (1, 7), (4, 7)):  # row-pair blocks
        for k in range(3):
            entry(r, a + k, b + k, 1.0)
        rhs.append(0.0)
        r += 1
    mat = sp.coo_matrix((vals, (rows, cols)), shape=(7, dd * dd)).tocsr()
    return mat, np.array(rhs)


def trace_row(n_weights):
    """Objective row reading tr(Delta) off vec(Delta)."""
    dd = lift_dimension(n_weights)
    row = np.zeros(dd * dd)
    row[:: dd + 1] = 1.0
    return row


def residual_system(mean_points, basis_points, origins, directions):
    """Stacked affine residual map for n correspondences.

    Returns (A, B, c) with residuals = A @ vec(Delta) + B @ t + c, three rows
    per correspondence. Column j of each input is one correspondence: the
    template mean point, the M basis points, and the ray (origin, unit
    direction). The rotation read lands on Delta row 0, the coupled basis
    reads on rows 10+i, matching omega_b.
    """
    mean_points = np.asarray(mean_points, dtype=float)
    origins = np.asarray(origins, dtype=float)
    directions = np.asarray(directions, dtype=float)
    bases = [np.asarray(b, dtype=float) for b in basis_points]
    n = mean_points.shape[1]
    m = len(bases)
    dd = lift_dimension(m)
    if origins.shape != (3, n) or directions.shape != (3, n):
        raise DimensionMismatch("origins/directions must be 3xn matching the template columns")
    for b in bases:
        if b.shape != (3, n):
            raise DimensionMismatch("basis point blocks must be 3xn")

    rows, cols, vals = [], [], []
    b_mat = np.zeros((3 * n, 3))
    const = np.zeros(3 * n)
    for j in range(n):
        md = -skew(directions[:, j])  # residual = md @ (P_up - origin)
        for a in range(3):
            for c in range(3):
                coef = md[a, c]
                if coef == 0.0:
                    continue
                for l in range(3):
                    rows.append(3 * j + a)
                    cols.append(1 + 3 * c + l)
                    vals.append(coef * mean_points[l, j])
                    for i in range(m):
                        rows.append(3 * j + a)
                        cols.append((10 + i) * dd + 1 + 3 * c + l)
                        vals.append(coef * bases[i][l, j])
            b_mat[3 * j + a, :] = md[a, :]
        const[3 * j:3 * j + 3] = -md @ origins[:, j]
    a_mat = sp.coo_matrix((vals, (rows, cols)), shape=(3 * n, dd * dd)).tocsr()
    return a_mat, b_mat, const


def dump_problem(problem, path):
    """Self-describing JSON dump of a ConicProblem, for debugging."""

    def block(mat, rhs=None):
        coo = sp.coo_matrix(mat)
        doc = {
            "shape": list(coo.shape),
            "rows": coo.row.tolist(),
            "cols": coo.col.tolist(),
            "vals": coo.data.tolist(),
        }
        if rhs is not None:
            doc["rhs"] = np.asarray(rhs).tolist()
        return doc

    doc = {
        "psd_blocks": [[lab, d] for lab, d in problem.psd_blocks],
        "free_vectors": [[lab, d] for lab, d in problem.free_vectors],
        "nonneg_count": problem.nonneg_count,
        "objective": block(problem.objective),
        "equalities": [block(m, r) for m, r in problem.equalities],
        "inequalities": [block(m, r) for m, r in problem.inequalities],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)


# ---------------------------------------------------------------------------
# Backend.


@dataclass
class BackendResult:
    status: str  # optimal | near_optimal | infeasible | unbounded | numerical_failure
    objective: float
    values: dict = field(default_factory=dict)


_STATUS_MAP = {
    cp.OPTIMAL: "optimal",
    cp.OPTIMAL_INACCURATE: "near_optimal",
    cp.INFEASIBLE: "infeasible",
    cp.INFEASIBLE_INACCURATE: "infeasible",
    cp.UNBOUNDED: "unbounded",
    cp.UNBOUNDED_INACCURATE: "unbounded",
}


class CvxpyBackend:
    """Conic backend on cvxpy; CLARABEL by default.

    Honors GSFT_SOLVER_TOL for the feasibility/gap tolerance when no
    explicit tolerance is given. Tolerance is wired for CLARABEL and SCS;
    other installed solvers run at their own defaults.
    """

    supports_psd = True
    supports_free = True
    supports_nonneg = True

    def __init__(self, solver="CLARABEL", tolerance=None):
        self.solver = solver
        if tolerance is None:
            tolerance = float(os.environ.get("GSFT_SOLVER_TOL", DEFAULT_TOL))
        self.tolerance = tolerance

    def _solver_options(self):
        if self.solver == "CLARABEL":
            return {
                "tol_gap_abs": self.tolerance,
                "tol_gap_rel": self.tolerance,
                "tol_feas": self.tolerance,
            }
        if self.solver == "SCS":
            return {"eps": self.tolerance}
        return {}

    def solve(self, problem):
        parts = {}
        constraints = []
        for label, d in problem.psd_blocks:
            v = cp.Variable((d, d), symmetric=True, name=label)
            constraints.append(v >> 0)
            parts[label] = (v, cp.vec(v, order="C"))
        for label, d in problem.free_vectors:
            v = cp.Variable(d, name=label)
            parts[label] = (v, v)
        if problem.nonneg_count:
            u = cp.Variable(problem.nonneg_count, nonneg=True, name=NONNEG)
            parts[NONNEG] = (u, u)

        def expr_of(mat):
            terms = []
            for label in list(parts):
                lo, hi = problem.column_range(label)
                blk = mat[:, lo:hi]
                if blk.nnz:
                    terms.append(blk @ parts[label][1])
            if not terms:
                return None
            out = terms[0]
            for t in terms[1:]:
                out = out + t
            return out

        for mat, rhs in problem.equalities:
            e = expr_of(mat)
            if e is None:  # all-zero block: feasible iff rhs vanishes
                if np.any(rhs != 0):
                    return BackendResult(status="infeasible", objective=np.nan)
                continue
            constraints.append(e == rhs)
        for mat, rhs in problem.inequalities:
            e = expr_of(mat)
            if e is None:
                if np.any(rhs > 0):
                    return BackendResult(status="infeasible", objective=np.nan)
                continue
            constraints.append(e >= rhs)
        obj_expr = expr_of(problem.objective)
        objective = cp.Minimize(obj_expr if obj_expr is not None else 0.0)

        prob = cp.Problem(objective, constraints)
        try:
            prob.solve(solver=self.solver, **self._solver_options())
        except cp.error.SolverError:
            return BackendResult(status="numerical_failure", objective=np.nan)

        status = _STATUS_MAP.get(prob.status, "numerical_failure")
        values = {}
        if status in ("optimal", "near_optimal"):
            for label, (var, _) in parts.items():
                val = var.value
                if val is None:
                    status = "numerical_failure"
                    break
                if val.ndim == 2:
                    val = 0.5 * (val + val.T)
                values[label] = np.asarray(val, dtype=float)
        obj_val = prob.value if prob.value is not None else np.nan
        return BackendResult(status=status, objective=float(obj_val), values=values)


@dataclass(frozen=True)
class LiftSolution:
    """Solved lifts plus translations, in declaration order."""

    deltas: tuple
    translations: tuple
    objective: float
    status: str
    diagnostics: tuple
