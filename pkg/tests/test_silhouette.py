"""Alpha-shape boundaries, direction matching, and the boosted iteration."""

import json
import warnings

import numpy as np
import pytest
from scipy.spatial import ConvexHull

from gensft import synth
from gensft.errors import (
    DegenerateCloud,
    DimensionMismatch,
    NonConvergenceWarning,
    ParseError,
)
from gensft.ns import solve_ns
from gensft.silhouette import (
    MAX_DIRECTIONS,
    BoostResult,
    ModelSilhouette,
    SilhouetteCorrespondence,
    SilhouetteObservation,
    _thin,
    alpha_silhouette,
    load_observations,
    match_silhouettes,
    model_silhouette,
    resolve_alpha,
    solve_silhouette_boosted_ns,
)


def l_shape_grid():
    """5x5 integer grid with the top-right 2x2 block removed."""
    pts = [(x, y) for x in range(5) for y in range(5) if not (x >= 3 and y >= 3)]
    return np.array(pts, dtype=float).T


class TestAlphaSilhouette:
    def test_square_grid_boundaries(self):
        g = np.array([(x, y) for x in range(6) for y in range(6)], dtype=float).T
        hull = alpha_silhouette(g, np.inf)
        auto = alpha_silhouette(g, "auto")
        # hull keeps the 4 corners; auto hugs the full 20-point perimeter
        assert len(hull) == 4
        assert len(auto) == 20
        on_edge = (g[0] % 5 == 0) | (g[1] % 5 == 0)
        assert all(on_edge[i] for i in auto)

    def test_infinite_alpha_is_convex_hull(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            pts = rng.standard_normal((2, 40))
            assert alpha_silhouette(pts, np.inf) == list(ConvexHull(pts.T).vertices)

    def test_concave_outline_recovered(self):
        pts = l_shape_grid()
        hull = alpha_silhouette(pts, np.inf)
        auto = alpha_silhouette(pts, "auto")
        assert len(hull) == 5
        assert len(auto) == 15
        assert set(hull) <= set(auto)

    def test_explicit_alpha_matches_resolved(self):
        pts = l_shape_grid()
        alpha = resolve_alpha(pts)
        assert np.isfinite(alpha)
        assert alpha_silhouette(pts, alpha) == alpha_silhouette(pts, "auto")

    def test_annulus_boundary_stays_on_outer_ring(self):
        rng = np.random.default_rng(1)
        theta = rng.uniform(0.0, 2.0 * np.pi, 400)
        r = np.where(rng.uniform(size=400) < 0.5, 1.0, 2.0)
        pts = np.vstack([r * np.cos(theta), r * np.sin(theta)])
        boundary = alpha_silhouette(pts, "auto")
        norms = np.linalg.norm(pts[:, boundary], axis=0)
        assert norms.min() > 1.5

    def test_boundary_is_a_cycle_of_valid_indices(self):
        rng = np.random.default_rng(2)
        pts = rng.standard_normal((2, 60))
        boundary = alpha_silhouette(pts, "auto")
        assert len(boundary) == len(set(boundary))
        assert all(0 <= i < 60 for i in boundary)

    def test_duplicate_points_map_to_first_occurrence(self):
        base = np.array([[0.0, 1.0, 1.0, 0.0, 0.5], [0.0, 0.0, 1.0, 1.0, 0.5]])
        doubled = np.hstack([base, base[:, :2]])
        boundary = alpha_silhouette(doubled, np.inf)
        assert all(i < 5 for i in boundary)

    def test_collinear_cloud_raises(self):
        pts = np.vstack([np.linspace(0, 1, 10), np.linspace(0, 2, 10)])
        with pytest.raises(DegenerateCloud):
            alpha_silhouette(pts)
        with pytest.raises(DegenerateCloud):
            resolve_alpha(pts)

    def test_too_few_distinct_points_raises(self):
        pts = np.array([[0.0, 0.0, 1.0], [0.0, 0.0, 1.0]])
        with pytest.raises(DegenerateCloud):
            alpha_silhouette(pts)

    def test_wrong_shape_raises(self):
        with pytest.raises(DimensionMismatch):
            alpha_silhouette(np.zeros((3, 10)))

    def test_too_small_alpha_raises(self):
        pts = l_shape_grid()
        with pytest.raises(DegenerateCloud):
            alpha_silhouette(pts, 1e-6)

    def test_resolve_alpha_hull_fallback_is_inf(self):
        # two distant blobs never form a single covering cycle below the
        # bridging radius, and at the top of the spectrum they do; a cloud
        # whose full Delaunay boundary is not a simple cycle would fall
        # back. A plain triangle resolves finite.
        tri = np.array([[0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
        assert np.isfinite(resolve_alpha(tri))


class TestObservations:
    def test_directions_are_normalized(self):
        d = np.array([[2.0, 0.0, 0.0], [0.0, 3.0, 0.0], [0.0, 0.0, 4.0]])
        obs = SilhouetteObservation(d)
        assert np.allclose(np.linalg.norm(obs.directions, axis=0), 1.0)
        assert len(obs) == 3

    def test_zero_direction_rejected(self):
        d = np.eye(3)
        d[:, 1] = 0.0
        with pytest.raises(ValueError):
            SilhouetteObservation(d)

    def test_too_few_directions_rejected(self):
        with pytest.raises(DimensionMismatch):
            SilhouetteObservation(np.eye(3)[:, :2])

    def test_load_round_trip(self, tmp_path):
        doc = {"views": [{"directions": [[0.0, 0.0, 1.0], [0.1, 0.0, 1.0],
                                         [0.0, 0.1, 1.0]]}]}
        path = tmp_path / "silhouettes.json"
        path.write_text(json.dumps(doc))
        views = load_observations(path)
        assert len(views) == 1
        assert views[0].directions.shape == (3, 3)
        assert np.allclose(np.linalg.norm(views[0].directions, axis=0), 1.0)

    def test_load_rejects_missing_key(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"frames": []}))
        with pytest.raises(ParseError):
            load_observations(path)

    def test_load_rejects_malformed_json(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{not json")
        with pytest.raises(ParseError):
            load_observations(path)

    def test_thinning_caps_and_keeps_indices(self):
        theta = np.linspace(0.0, 2.0 * np.pi, 2000, endpoint=False)
        d = np.vstack([0.2 * np.cos(theta), 0.2 * np.sin(theta), np.ones_like(theta)])
        obs = SilhouetteObservation(d)
        thinned, picks = _thin(obs)
        assert len(thinned) <= MAX_DIRECTIONS
        assert np.array_equal(np.sort(picks), picks)
        ref = obs.directions[:, picks]
        assert np.allclose(thinned.directions, ref)

    def test_thinning_is_identity_below_cap(self):
        d = np.vstack([np.zeros(5), np.linspace(-0.1, 0.1, 5), np.ones(5)])
        obs = SilhouetteObservation(d)
        thinned, picks = _thin(obs)
        assert thinned is obs
        assert np.array_equal(picks, np.arange(5))


class TestMatching:
    def _fan(self, k, spread=0.5):
        u = np.linspace(-spread, spread, k)
        d = np.vstack([u, np.zeros(k), np.ones(k)])
        return d / np.linalg.norm(d, axis=0)

    def test_identity_match(self):
        d = self._fan(8)
        model = ModelSilhouette(np.arange(8), d)
        pairs = match_silhouettes(model, SilhouetteObservation(d))
        assert pairs.pairs == tuple((s, s) for s in range(8))

    def test_small_rotation_keeps_match(self):
        d = self._fan(8)
        angle = np.radians(0.1)
        rot = np.array([
            [np.cos(angle), 0.0, np.sin(angle)],
            [0.0, 1.0, 0.0],
            [-np.sin(angle), 0.0, np.cos(angle)],
        ])
        pairs = match_silhouettes(ModelSilhouette(np.arange(8), d),
                                  SilhouetteObservation(rot @ d))
        assert pairs.pairs == tuple((s, s) for s in range(8))

    def test_tie_goes_to_smaller_observed_index(self):
        d = self._fan(4)
        observed = np.hstack([d[:, :1], d])  # observed 0 and 1 identical
        pairs = match_silhouettes(ModelSilhouette(np.arange(4), d),
                                  SilhouetteObservation(observed))
        assert pairs.pairs[0] == (0, 0)

    def test_each_model_direction_used_once(self):
        with pytest.raises(ValueError):
            SilhouetteCorrespondence(((0, 1), (0, 2)))

    def test_canonical_uses_template_indices(self):
        model = ModelSilhouette(np.array([7, 3]), self._fan(2))
        corr = SilhouetteCorrespondence(((0, 5), (1, 2)))
        assert corr.canonical(model) == {(7, 5), (3, 2)}

    def test_model_silhouette_shape_checks(self):
        with pytest.raises(DimensionMismatch):
            ModelSilhouette(np.arange(3), np.ones((3, 4)))
        with pytest.raises(ValueError):
            ModelSilhouette(np.array([1, 1]), np.ones((3, 2)))


class TestModelSilhouette:
    def test_projected_outline_properties(self):
        cfg = synth.ScenarioConfig(seed=0, n_points=40, n_bases=1,
                                   corr_counts=(3, 3), density=300)
        scn = synth.generate_scenario(cfg)
        sil = model_silhouette(scn.model, scn.gt_instance, scn.viewpoint_poses[0])
        assert np.allclose(np.linalg.norm(sil.directions, axis=0), 1.0)
        assert len(np.unique(sil.indices)) == sil.indices.shape[0]
        assert sil.indices.max() < scn.model.n_points
        again = model_silhouette(scn.model, scn.gt_instance, scn.viewpoint_poses[0])
        assert np.array_equal(sil.indices, again.indices)


def _boost_scenario(seed=5, counts=(2, 4), density=400):
    cfg = synth.ScenarioConfig(seed=seed, n_points=50, n_bases=1,
                               corr_counts=counts, density=density,
                               deformation_scale=0.08, config_id="silh")
    return synth.generate_scenario(cfg)


class TestBoostedSolve:
    def test_improves_and_converges(self):
        scn = _boost_scenario()
        init = solve_ns(scn.ns_problem)
        res = solve_silhouette_boosted_ns(scn.ns_problem, scn.observations,
                                          gt_points=scn.gt_points)
        assert isinstance(res, BoostResult)
        assert res.converged
        assert res.iterations <= 50
        r0 = float(np.sqrt(((init.reconstruction - scn.gt_points) ** 2).sum(0).mean()))
        r1 = float(np.sqrt(((res.solution.reconstruction - scn.gt_points) ** 2).sum(0).mean()))
        assert r1 <= r0
        assert res.trace[0].n_pairs == 0
        assert all(np.isfinite(rec.rmse) for rec in res.trace)

    def test_gt_free_trace_has_nan_rmse(self):
        scn = _boost_scenario(seed=6)
        res = solve_silhouette_boosted_ns(scn.ns_problem, scn.observations)
        assert all(np.isnan(rec.rmse) for rec in res.trace)

    def test_lambda_one_matches_plain_ns(self):
        scn = _boost_scenario(seed=7)
        plain = solve_ns(scn.ns_problem)
        res = solve_silhouette_boosted_ns(scn.ns_problem, scn.observations, lam=1.0)
        assert res.converged
        assert abs(res.solution.objective - plain.objective) <= 1e-9

    def test_nonconvergence_warns_and_flags(self):
        scn = _boost_scenario(seed=8)
        with pytest.warns(NonConvergenceWarning):
            res = solve_silhouette_boosted_ns(scn.ns_problem, scn.observations,
                                              max_iters=1)
        assert not res.converged
        assert res.iterations == 1

    def test_lambda_range_validated(self):
        scn = _boost_scenario(seed=9)
        with pytest.raises(ValueError):
            solve_silhouette_boosted_ns(scn.ns_problem, scn.observations, lam=1.5)

    def test_observation_count_must_match_views(self):
        scn = _boost_scenario(seed=10)
        with pytest.raises(DimensionMismatch):
            solve_silhouette_boosted_ns(scn.ns_problem, scn.observations[:1])
