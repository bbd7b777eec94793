"""Lift construction, omega reads, residual assembly, and the conic carrier."""

import json
import time
import warnings

import numpy as np
import pytest
import scipy.sparse as sp
from scipy.spatial.transform import Rotation as ScipyRotation

from gensft.errors import DegenerateMatrix, DimensionMismatch, HighRankWarning
from gensft.geometry import Ray, Rotation
from gensft.lifting import (
    BackendResult,
    ConicProblem,
    CvxpyBackend,
    GramLift,
    ProblemBuilder,
    dump_problem,
    extract_solution,
    lift_dimension,
    lift_from_parameters,
    omega_a,
    omega_b,
    omega_c,
    omega_d,
    polar_rotation,
    residual_system,
    skew,
    so3_lift_rows,
    trace_row,
)


def random_rotation(rng):
    return Rotation(ScipyRotation.random(rng=rng).as_matrix())


def analytic_residual(rotation, weights, translation, ray, mean_point, basis_points):
    """Hand-stacked reprojection residual, written from the definitions only."""
    p = mean_point.copy()
    for wi, bi in zip(weights, basis_points):
        p = p + wi * bi
    world = rotation.matrix @ p + translation
    return np.cross(world - ray.origin, ray.direction)


def random_case(rng, n_weights):
    rot = random_rotation(rng)
    w = rng.standard_normal(n_weights)
    t = rng.standard_normal(3)
    ray = Ray(rng.standard_normal(3), rng.standard_normal(3))
    mean = rng.standard_normal(3)
    bases = [rng.standard_normal(3) for _ in range(n_weights)]
    return rot, w, t, ray, mean, bases


class TestSkew:
    def test_matches_cross_product(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            v, u = rng.standard_normal(3), rng.standard_normal(3)
            assert np.allclose(skew(v) @ u, np.cross(v, u), atol=1e-14)

    def test_antisymmetric(self):
        s = skew(np.array([1.0, 2.0, 3.0]))
        assert np.array_equal(s, -s.T)


class TestGramLift:
    def test_dimension_and_weights(self):
        lift = lift_from_parameters(Rotation.identity(), [0.5, -0.5])
        assert lift.dim == 12
        assert lift.n_weights == 2
        assert lift_dimension(2) == 12

    def test_rejects_non_square(self):
        with pytest.raises(DimensionMismatch):
            GramLift(np.zeros((11, 12)))

    def test_rejects_too_small(self):
        with pytest.raises(DimensionMismatch):
            GramLift(np.eye(10))

    def test_rejects_asymmetric(self):
        m = np.eye(11)
        m[0, 1] = 1e-6
        with pytest.raises(ValueError):
            GramLift(m)

    def test_rejects_non_finite(self):
        m = np.eye(11)
        m[3, 3] = np.inf
        with pytest.raises(ValueError):
            GramLift(m)

    def test_needs_a_weight(self):
        with pytest.raises(DimensionMismatch):
            lift_from_parameters(Rotation.identity(), [])

    def test_identity_lift_entry_positions(self):
        # xi = (1, vecI, w) so row 0 carries vec(R) at 1:10 and w at 10:,
        # and row 10+i carries w_i * xi.
        w = np.array([2.0, -3.0])
        lift = lift_from_parameters(Rotation.identity(), w)
        m = lift.matrix
        vec_i = np.eye(3).reshape(-1)
        assert m[0, 0] == 1.0
        assert np.array_equal(m[0, 1:10], vec_i)
        assert np.array_equal(m[0, 10:], w)
        assert np.array_equal(m[10, 1:10], 2.0 * vec_i)
        assert np.array_equal(m[11, 1:10], -3.0 * vec_i)
        assert np.array_equal(m[10:, 10:], np.outer(w, w))

    def test_rank_one(self):
        rng = np.random.default_rng(1)
        lift = lift_from_parameters(random_rotation(rng), rng.standard_normal(3))
        evals = np.linalg.eigvalsh(lift.matrix)
        assert evals[-2] < 1e-12 * evals[-1]


class TestOmegaReads:
    def test_omega_a_is_weight_energy(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            w = rng.standard_normal(4)
            lift = lift_from_parameters(random_rotation(rng), w)
            assert abs(omega_a(lift) - np.dot(w, w)) < 1e-12

    def test_omega_c_unit_rows(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            lift = lift_from_parameters(random_rotation(rng), rng.standard_normal(2))
            for r in (1, 2, 3):
                assert abs(omega_c(lift, r) - 1.0) < 1e-12

    def test_omega_d_orthogonal_rows(self):
        rng = np.random.default_rng(4)
        for _ in range(100):
            lift = lift_from_parameters(random_rotation(rng), rng.standard_normal(2))
            for r in (1, 2, 3):
                assert abs(omega_d(lift, r)) < 1e-12

    def test_omega_c_scaled_identity(self):
        # A putative block 2*I3 has row norms 4; built directly, not via
        # lift_from_parameters, which would reject the non-rotation.
        xi = np.concatenate([[1.0], (2.0 * np.eye(3)).reshape(-1), [0.0]])
        lift = GramLift(np.outer(xi, xi))
        for r in (1, 2, 3):
            assert omega_c(lift, r) == 4.0

    def test_bad_row_index_raises(self):
        lift = lift_from_parameters(Rotation.identity(), [1.0])
        with pytest.raises(ValueError):
            omega_c(lift, 0)
        with pytest.raises(ValueError):
            omega_d(lift, 4)

    def test_omega_b_keystone(self):
        # The load-bearing identity: on a rank-1 lift the lifted residual
        # read must reproduce the analytic residual to machine precision.
        rng = np.random.default_rng(5)
        worst = 0.0
        start = time.perf_counter()
        for _ in range(1000):
            rot, w, t, ray, mean, bases = random_case(rng, rng.integers(1, 5))
            lift = lift_from_parameters(rot, w)
            got = omega_b(lift, t, ray, mean, bases)
            want = analytic_residual(rot, w, t, ray, mean, bases)
            worst = max(worst, np.abs(got - want).max())
        elapsed = time.perf_counter() - start
        assert worst < 1e-12
        assert elapsed < 1.0

    def test_omega_b_checks_basis_count(self):
        rng = np.random.default_rng(6)
        rot, w, t, ray, mean, bases = random_case(rng, 2)
        lift = lift_from_parameters(rot, w)
        with pytest.raises(DimensionMismatch):
            omega_b(lift, t, ray, mean, bases[:1])


class TestSo3Rows:
    def test_satisfied_by_rank_one_lifts(self):
        rng = np.random.default_rng(7)
        mat, rhs = so3_lift_rows(3)
        assert mat.shape == (7, 13 * 13)
        for _ in range(50):
            lift = lift_from_parameters(random_rotation(rng), rng.standard_normal(3))
            reads = mat @ lift.matrix.reshape(-1)
            assert np.abs(reads - rhs).max() < 1e-12

    def test_rhs_values(self):
        _, rhs = so3_lift_rows(1)
        assert np.array_equal(rhs, np.array([1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0]))

    def test_violated_by_scaled_block(self):
        xi = np.concatenate([[1.0], (2.0 * np.eye(3)).reshape(-1), [0.0]])
        mat, rhs = so3_lift_rows(1)
        reads = mat @ np.outer(xi, xi).reshape(-1)
        assert reads[1] == 4.0  # row-norm read sees the scale


class TestTraceRow:
    def test_reads_trace(self):
        rng = np.random.default_rng(8)
        lift = lift_from_parameters(random_rotation(rng), rng.standard_normal(2))
        assert abs(trace_row(2) @ lift.matrix.reshape(-1) - np.trace(lift.matrix)) < 1e-12


class TestResidualSystem:
    def test_matches_omega_b_stack(self):
        # residual_system is the vectorized assembly; omega_b is its oracle.
        rng = np.random.default_rng(9)
        for _ in range(20):
            n, m = int(rng.integers(1, 6)), int(rng.integers(1, 4))
            rot = random_rotation(rng)
            w = rng.standard_normal(m)
            t = rng.standard_normal(3)
            means = rng.standard_normal((3, n))
            bases = [rng.standard_normal((3, n)) for _ in range(m)]
            origins = rng.standard_normal((3, n))
            dirs = rng.standard_normal((3, n))
            dirs /= np.linalg.norm(dirs, axis=0)
            a_mat, b_mat, const = residual_system(means, bases, origins, dirs)
            lift = lift_from_parameters(rot, w)
            got = a_mat @ lift.matrix.reshape(-1) + b_mat @ t + const
            for j in range(n):
                ray = Ray(origins[:, j], dirs[:, j])
                want = omega_b(lift, t, ray, means[:, j], [b[:, j] for b in bases])
                assert np.abs(got[3 * j:3 * j + 3] - want).max() < 1e-12

    def test_shape_checks(self):
        with pytest.raises(DimensionMismatch):
            residual_system(np.zeros((3, 4)), [np.zeros((3, 3))],
                            np.zeros((3, 4)), np.ones((3, 4)))
        with pytest.raises(DimensionMismatch):
            residual_system(np.zeros((3, 4)), [np.zeros((3, 4))],
                            np.zeros((3, 3)), np.ones((3, 4)))


class TestExtraction:
    def test_round_trip(self):
        rng = np.random.default_rng(10)
        for _ in range(50):
            rot = random_rotation(rng)
            w = rng.standard_normal(3)
            lift = lift_from_parameters(rot, w)
            got_rot, got_w, diag = extract_solution(lift)
            assert np.abs(got_rot.matrix - rot.matrix).max() < 1e-9
            assert np.abs(got_w - w).max() < 1e-12
            assert diag.ratio < 1e-12
            assert not diag.high_rank
            assert abs(diag.scale - 1.0) < 1e-9
            assert not diag.sign_ambiguous

    def test_scaled_lift_reports_drift(self):
        # Uniform scale on the putative block must not disturb the extracted
        # orientation; the drift lands in the diagnostics instead.
        rng = np.random.default_rng(11)
        for _ in range(20):
            rot = random_rotation(rng)
            xi = np.concatenate([[1.0], 1.5 * rot.matrix.reshape(-1), [0.3]])
            got_rot, _, diag = extract_solution(GramLift(np.outer(xi, xi)))
            # sin-based geodesic angle; the arccos form saturates near zero
            frob = np.linalg.norm(got_rot.matrix - rot.matrix)
            angle = np.degrees(2.0 * np.arcsin(min(1.0, frob / (2.0 * np.sqrt(2.0)))))
            assert angle < 1e-9
            assert abs(diag.scale - 1.5) < 0.015

    def test_rank_two_average_warns(self):
        rng = np.random.default_rng(12)
        a = lift_from_parameters(random_rotation(rng), [0.2]).matrix
        b = lift_from_parameters(random_rotation(rng), [-0.4]).matrix
        with pytest.warns(HighRankWarning):
            _, _, diag = extract_solution(GramLift(0.5 * (a + b)))
        assert diag.high_rank
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            extract_solution(GramLift(0.5 * (a + b)), warn=False)

    def test_sign_ambiguous_flag(self):
        rot = Rotation.identity()
        xi = np.concatenate([[1.0], -rot.matrix.reshape(-1), [1.0]])
        _, _, diag = extract_solution(GramLift(np.outer(xi, xi)))
        assert diag.sign_ambiguous

    def test_vanishing_corner_raises(self):
        m = np.zeros((11, 11))
        m[1:10, 1:10] = np.eye(9)
        with pytest.raises(DegenerateMatrix):
            extract_solution(GramLift(m))

    def test_polar_rotation_completes_rank_deficient(self):
        # rank-1 input has no unique nearest rotation; the completion must
        # still be a valid rotation and must be deterministic.
        m = np.outer([1.0, 0.0, 0.0], [0.0, 1.0, 0.0])
        got = polar_rotation(m)
        again = polar_rotation(m)
        assert np.array_equal(got.matrix, again.matrix)
        with pytest.raises(DegenerateMatrix):
            from gensft.geometry import nearest_rotation
            nearest_rotation(m)

    def test_polar_rotation_agrees_on_clean_input(self):
        rng = np.random.default_rng(13)
        rot = random_rotation(rng)
        noisy = rot.matrix + 1e-3 * rng.standard_normal((3, 3))
        from gensft.geometry import nearest_rotation
        assert np.array_equal(polar_rotation(noisy).matrix, nearest_rotation(noisy).matrix)


class TestProblemBuilder:
    def test_l1_epigraph_value(self):
        # min |x - c|_1 with x pinned elsewhere: optimum is |b - c|_1.
        rng = np.random.default_rng(14)
        b_vec = rng.standard_normal(4)
        c_vec = rng.standard_normal(4)
        builder = ProblemBuilder()
        builder.add_free("x", 4)
        builder.add_equality({"x": sp.eye(4)}, b_vec)
        builder.add_l1_epigraph({"x": sp.eye(4)}, -c_vec, weight=1.0)
        problem = builder.build()
        result = CvxpyBackend().solve(problem)
        assert result.status == "optimal"
        assert abs(result.objective - np.abs(b_vec - c_vec).sum()) < 1e-6

    def test_l1_epigraph_weight(self):
        builder = ProblemBuilder()
        builder.add_free("x", 1)
        builder.add_equality({"x": sp.eye(1)}, np.array([2.0]))
        builder.add_l1_epigraph({"x": sp.eye(1)}, np.zeros(1), weight=3.0)
        result = CvxpyBackend().solve(builder.build())
        assert abs(result.objective - 6.0) < 1e-6

    def test_minimal_sdp(self):
        # min tr(Delta) s.t. Delta[0,0] = 1, Delta >> 0 has optimum 1.
        builder = ProblemBuilder()
        builder.add_psd("delta", 11)
        mat, rhs = so3_lift_rows(1)
        builder.add_equality({"delta": mat[0]}, rhs[:1])
        builder.add_objective("delta", trace_row(1))
        result = CvxpyBackend().solve(builder.build())
        assert result.status == "optimal"
        assert abs(result.objective - 1.0) < 1e-6

    def test_inequality_is_lower_bound(self):
        builder = ProblemBuilder()
        builder.add_free("x", 1)
        builder.add_inequality({"x": sp.eye(1)}, np.array([2.5]))
        builder.add_objective("x", np.ones(1))
        result = CvxpyBackend().solve(builder.build())
        assert abs(result.objective - 2.5) < 1e-6

    def test_undeclared_label_raises(self):
        builder = ProblemBuilder()
        builder.add_free("x", 2)
        with pytest.raises(KeyError):
            builder.add_objective("y", np.ones(2))

    def test_wrong_row_length_raises(self):
        builder = ProblemBuilder()
        builder.add_free("x", 2)
        with pytest.raises(DimensionMismatch):
            builder.add_objective("x", np.ones(3))
        with pytest.raises(DimensionMismatch):
            builder.add_equality({"x": sp.eye(3)}, np.zeros(3))


class TestConicProblem:
    def _tiny(self):
        builder = ProblemBuilder()
        builder.add_psd("delta", 11)
        builder.add_free("t", 3)
        builder.add_l1_epigraph({"t": sp.eye(3)}, np.zeros(3))
        builder.add_objective("t", np.zeros(3))
        return builder.build()

    def test_column_layout(self):
        problem = self._tiny()
        assert problem.n_cols == 11 * 11 + 3 + 6
        assert problem.column_range("delta") == (0, 121)
        assert problem.column_range("t") == (121, 124)
        from gensft.lifting import NONNEG
        assert problem.column_range(NONNEG) == (124, 130)
        with pytest.raises(KeyError):
            problem.column_range("missing")

    def test_validate_rejects_duplicates(self):
        problem = self._tiny()
        bad = ConicProblem(
            psd_blocks=(("a", 11), ("a", 11)),
            free_vectors=(),
            nonneg_count=0,
            objective=sp.csr_matrix((1, 2 * 121)),
            equalities=(),
        )
        with pytest.raises(ValueError):
            bad.validate()
        assert problem.validate() is problem

    def test_validate_rejects_bad_widths(self):
        with pytest.raises(DimensionMismatch):
            ConicProblem(
                psd_blocks=(),
                free_vectors=(("x", 2),),
                nonneg_count=0,
                objective=sp.csr_matrix((1, 3)),
                equalities=(),
            ).validate()

    def test_dump_problem(self, tmp_path):
        problem = self._tiny()
        path = tmp_path / "problem.json"
        dump_problem(problem, path)
        doc = json.loads(path.read_text())
        assert doc["psd_blocks"] == [["delta", 11]]
        assert doc["free_vectors"] == [["t", 3]]
        assert doc["nonneg_count"] == 6
        assert doc["objective"]["shape"] == [1, problem.n_cols]
        assert len(doc["equalities"]) == 1


class TestBackend:
    def test_infeasible_equalities(self):
        builder = ProblemBuilder()
        builder.add_free("x", 1)
        builder.add_equality({"x": sp.eye(1)}, np.array([1.0]))
        builder.add_equality({"x": sp.eye(1)}, np.array([2.0]))
        builder.add_objective("x", np.ones(1))
        result = CvxpyBackend().solve(builder.build())
        assert result.status == "infeasible"
        assert isinstance(result, BackendResult)

    def test_zero_row_infeasibility_shortcut(self):
        builder = ProblemBuilder()
        builder.add_free("x", 1)
        builder.add_equality({"x": sp.csr_matrix((1, 1))}, np.array([1.0]))
        builder.add_objective("x", np.zeros(1))
        result = CvxpyBackend().solve(builder.build())
        assert result.status == "infeasible"

    def test_tolerance_from_environment(self, monkeypatch):
        monkeypatch.setenv("GSFT_SOLVER_TOL", "1e-5")
        assert CvxpyBackend().tolerance == 1e-5
        monkeypatch.delenv("GSFT_SOLVER_TOL")
        assert CvxpyBackend(tolerance=1e-7).tolerance == 1e-7

    def test_psd_value_is_symmetrized(self):
        builder = ProblemBuilder()
        builder.add_psd("delta", 11)
        mat, rhs = so3_lift_rows(1)
        builder.add_equality({"delta": mat}, rhs)
        builder.add_objective("delta", trace_row(1))
        result = CvxpyBackend().solve(builder.build())
        val = result.values["delta"]
        assert np.array_equal(val, val.T)
