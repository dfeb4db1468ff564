import math

import numpy as np
import pytest

from stainforge import color_model
from stainforge.acd import (
    AcdHyperparams,
    AcdParams,
    StainProfile,
    angles_from_unit_vector,
    build_matrix,
    default_init_params,
    fit,
    load_profile,
    objective_and_gradient,
    objective_from_densities,
    recombine,
    sample_tissue_od,
    save_profile,
    separate,
    unit_vector_from_angles,
)
from stainforge.errors import (
    DegenerateStainsError,
    EmptySampleError,
    InsufficientTissueError,
)

from conftest import (
    angle_between_deg,
    matched_hyperparams,
    random_density_field,
    random_truth_profile,
    render_od,
    render_rgb,
)


class TestBuildMatrix:
    def test_canonical_basis_cross_product(self):
        # H -> (1,0,0): theta=pi/2, phi=0; E -> (0,1,0): theta=pi/2, phi=pi/2
        params = AcdParams(math.pi / 2, 0.0, math.pi / 2, math.pi / 2)
        profile = build_matrix(params)
        np.testing.assert_allclose(profile.M[:, 0], [1, 0, 0], atol=1e-15)
        np.testing.assert_allclose(profile.M[:, 1], [0, 1, 0], atol=1e-15)
        np.testing.assert_allclose(profile.M[:, 2], [0, 0, 1], atol=1e-15)

    def test_equal_angles_degenerate(self):
        with pytest.raises(DegenerateStainsError):
            build_matrix(AcdParams(0.8, 0.4, 0.8, 0.4))

    def test_angle_roundtrip_reproduces_standard_vectors(self):
        h = np.array([0.65, 0.70, 0.29])
        e = np.array([0.07, 0.99, 0.11])
        h /= np.linalg.norm(h)
        e /= np.linalg.norm(e)
        params = AcdParams(*angles_from_unit_vector(h), *angles_from_unit_vector(e))
        profile = build_matrix(params)
        np.testing.assert_allclose(profile.M[:, 0], h, atol=1e-9)
        np.testing.assert_allclose(profile.M[:, 1], e, atol=1e-9)

    def test_residual_orthogonal_and_unit(self):
        profile = build_matrix(default_init_params())
        r = profile.M[:, 2]
        assert abs(np.linalg.norm(r) - 1.0) < 1e-12
        assert abs(r @ profile.M[:, 0]) < 1e-12
        assert abs(r @ profile.M[:, 1]) < 1e-12

    def test_weights_from_log_domain(self):
        params = AcdParams(math.pi / 2, 0.0, math.pi / 2, math.pi / 2,
                           log_wh=math.log(2.0), log_we=math.log(0.5))
        profile = build_matrix(params)
        assert profile.wh == pytest.approx(2.0)
        assert profile.we == pytest.approx(0.5)


class TestSeparate:
    def identity_profile(self, wh=1.0, we=1.0):
        return StainProfile(M=np.eye(3), wh=wh, we=we)

    def test_identity_deconvolution(self):
        od = np.array([[0.5, 0.2, 0.1]])
        np.testing.assert_allclose(separate(od, self.identity_profile()), od)

    def test_weight_scales_first_channel(self):
        od = np.array([[0.5, 0.2, 0.1]])
        s = separate(od, self.identity_profile(wh=2.0))
        np.testing.assert_allclose(s, [[1.0, 0.2, 0.1]])

    def test_pure_stain_recovers_density(self):
        profile = build_matrix(default_init_params())
        od = 0.7 * profile.M[:, 0].reshape(1, 3)
        s = separate(od, profile)
        np.testing.assert_allclose(s, [[0.7, 0.0, 0.0]], atol=1e-9)

    def test_linearity(self, rng):
        profile = build_matrix(default_init_params())
        od = rng.uniform(0, 2, size=(40, 3))
        for alpha in (0.0, 0.5, 3.0):
            np.testing.assert_allclose(
                separate(alpha * od, profile), alpha * separate(od, profile),
                atol=1e-12,
            )

    def test_reconstruction_inverts_separation(self, rng):
        truth = random_truth_profile(rng)
        profile = StainProfile(M=truth.M, wh=truth.wh, we=truth.we)
        od = rng.uniform(0, 2, size=(5, 4, 3))
        np.testing.assert_allclose(recombine(separate(od, profile), profile),
                                   od, atol=1e-9)


class TestObjective:
    def test_single_pixel_hand_computed(self):
        # s = (0.4, 0.4, 0): saturation term = 1, balance and intensity zero
        hp = AcdHyperparams(lambda_p=1.0, lambda_b=1.0, lambda_e=1.0,
                            eta=0.5, gamma=0.8)
        b = objective_from_densities(np.array([[0.4, 0.4, 0.0]]), hp)
        assert b.l_p == pytest.approx(1.0)
        assert b.l_b == pytest.approx(0.0, abs=1e-15)
        assert b.l_e == pytest.approx(0.0, abs=1e-15)
        assert b.l_total == pytest.approx(1.0)

    def test_absent_stain_zeroes_saturation(self):
        hp = AcdHyperparams(lambda_p=1.0, eta=0.5, gamma=0.2)
        dens = np.array([[0.4, 0.0, 0.0], [0.1, 0.0, 0.0]])
        assert objective_from_densities(dens, hp).l_p == 0.0

    def test_balanced_stains_zero_balance_term(self, rng):
        hp = AcdHyperparams(eta=0.5, gamma=1.0)
        h = rng.uniform(0.1, 1.0, size=50)
        dens = np.column_stack([h, h[::-1], np.zeros(50)])  # mean(h) == mean(e)
        assert objective_from_densities(dens, hp).l_b == pytest.approx(0.0, abs=1e-30)

    def test_breakdown_combination_exact(self, rng):
        hp = AcdHyperparams(lambda_p=0.01, lambda_b=7.0, lambda_e=3.0,
                            eta=0.3, gamma=0.5)
        dens = rng.uniform(-1, 2, size=(100, 3))
        b = objective_from_densities(dens, hp)
        assert b.l_total == b.l_p + hp.lambda_b * b.l_b + hp.lambda_e * b.l_e

    def test_empty_sample(self):
        with pytest.raises(EmptySampleError):
            objective_from_densities(np.empty((0, 3)), AcdHyperparams())

    def test_saturation_bounds(self, rng):
        # 2he/(h^2+e^2) in [0, 1] for nonnegative densities, =1 iff h == e != 0
        hp = AcdHyperparams(lambda_p=1.0, lambda_b=0.0, lambda_e=0.0)
        for _ in range(50):
            h, e = rng.uniform(0, 3, size=2)
            b = objective_from_densities(np.array([[h, e, 0.0]]), hp)
            assert 0.0 <= b.l_p <= 1.0 + 1e-12
        equal = objective_from_densities(np.array([[0.7, 0.7, 0.0]]), hp)
        assert equal.l_p == pytest.approx(1.0)


def oracle_objective(od_samples, params: AcdParams, hp: AcdHyperparams) -> float:
    """Independent re-derivation of the objective for finite differences:
    builds the stain matrix and every term from scratch."""
    def unit(theta, phi):
        return np.array([math.sin(theta) * math.cos(phi),
                         math.sin(theta) * math.sin(phi),
                         math.cos(theta)])

    h_col = unit(params.theta_h, params.phi_h)
    e_col = unit(params.theta_e, params.phi_e)
    r_col = np.cross(h_col, e_col)
    r_col = r_col / np.linalg.norm(r_col)
    M = np.column_stack([h_col, e_col, r_col])
    W = np.diag([math.exp(params.log_wh), math.exp(params.log_we), 1.0])
    s = od_samples @ np.linalg.inv(M).T @ W.T
    h, e, d = s[:, 0], s[:, 1], s[:, 2]
    sq = h * h + e * e
    sat = np.divide(2 * h * e, sq, out=np.zeros_like(sq), where=sq > 0)
    l_p = np.mean(d * d) + hp.lambda_p * np.mean(sat)
    l_b = ((1 - hp.eta) * h.mean() - hp.eta * e.mean()) ** 2
    l_e = (hp.gamma - (h.mean() + e.mean())) ** 2
    return float(l_p + hp.lambda_b * l_b + hp.lambda_e * l_e)


def oracle_fd_gradient(od_samples, params, hp, step=1e-5):
    base = params.as_vector()
    grad = np.empty(6)
    for i in range(6):
        hi, lo = base.copy(), base.copy()
        hi[i] += step
        lo[i] -= step
        grad[i] = (oracle_objective(od_samples, AcdParams.from_vector(hi), hp)
                   - oracle_objective(od_samples, AcdParams.from_vector(lo), hp)) / (2 * step)
    return grad


class TestGradient:
    def random_point(self, rng):
        od = rng.uniform(0, 1.5, size=(int(rng.integers(20, 200)), 3))
        while True:
            angles = rng.uniform(0.05, math.pi / 2 - 0.05, size=4)
            params = AcdParams(*angles, *rng.uniform(-0.5, 0.5, size=2))
            try:
                profile = build_matrix(params)
            except DegenerateStainsError:
                continue
            if angle_between_deg(profile.M[:, 0], profile.M[:, 1]) > 10:
                return od, params
        raise AssertionError

    def assert_matches_fd(self, od, params, hp):
        _, analytic = objective_and_gradient(od, params, hp)
        numeric = oracle_fd_gradient(od, params, hp)
        for a, f in zip(analytic, numeric):
            if abs(f) < 1e-8:
                assert abs(a - f) < 1e-8
            else:
                assert abs(a - f) / abs(f) < 1e-4

    def test_matches_finite_differences_100_points(self, rng):
        for _ in range(100):
            od, params = self.random_point(rng)
            hp = AcdHyperparams(
                lambda_p=float(rng.uniform(0, 0.01)),
                lambda_b=float(rng.uniform(0.1, 20)),
                lambda_e=float(rng.uniform(0.1, 5)),
                eta=float(rng.uniform(0.2, 0.8)),
                gamma=float(rng.uniform(0.1, 1.0)),
            )
            self.assert_matches_fd(od, params, hp)

    def test_objective_value_matches_oracle(self, rng):
        od, params = self.random_point(rng)
        hp = AcdHyperparams()
        breakdown, _ = objective_and_gradient(od, params, hp)
        assert breakdown.l_total == pytest.approx(
            oracle_objective(od, params, hp), rel=1e-12)

    def test_intensity_term_gradient_zero_at_target(self, rng):
        # when mean(h + e) == gamma the L_e contribution vanishes
        od, params = self.random_point(rng)
        profile = build_matrix(params)
        dens = separate(od, profile)
        target = float(dens[:, 0].mean() + dens[:, 1].mean())
        hp_at_target = AcdHyperparams(lambda_b=0.0, lambda_e=1.0, gamma=target)
        hp_disabled = AcdHyperparams(lambda_b=0.0, lambda_e=0.0, gamma=0.9)
        hp_off_target = AcdHyperparams(lambda_b=0.0, lambda_e=1.0, gamma=0.9)
        b_at, g_at = objective_and_gradient(od, params, hp_at_target)
        _, g_disabled = objective_and_gradient(od, params, hp_disabled)
        _, g_off = objective_and_gradient(od, params, hp_off_target)
        assert b_at.l_e == pytest.approx(0.0, abs=1e-30)
        np.testing.assert_allclose(g_at, g_disabled, atol=1e-12)
        assert np.linalg.norm(g_off - g_disabled) > 1e-6

    def test_zero_density_sample_zero_residual_gradient(self):
        params = default_init_params()
        hp = AcdHyperparams(lambda_p=0.0, lambda_b=0.0, lambda_e=0.0)
        od = np.zeros((10, 3))
        _, grad = objective_and_gradient(od, params, hp)
        np.testing.assert_allclose(grad, np.zeros(6), atol=1e-15)


class TestFit:
    def test_recovers_synthetic_truth(self, rng):
        truth = random_truth_profile(rng)
        dens = random_density_field(rng)
        od = render_od(dens, truth)
        mask = color_model.tissue_mask(od)
        hp = matched_hyperparams(dens, seed=1)
        fitted, _ = fit(od, mask, hp)
        assert angle_between_deg(fitted.M[:, 0], truth.M[:, 0]) < 5.0
        assert angle_between_deg(fitted.M[:, 1], truth.M[:, 1]) < 5.0

    def test_deterministic_given_seed(self, rng):
        truth = random_truth_profile(rng)
        dens = random_density_field(rng)
        img = render_rgb(dens, truth)
        od = color_model.rgb_to_od(img)
        mask = color_model.tissue_mask(od)
        hp = matched_hyperparams(dens, seed=99)
        p1, t1 = fit(od, mask, hp)
        p2, t2 = fit(od, mask, hp)
        assert np.array_equal(p1.M, p2.M)
        assert p1.wh == p2.wh and p1.we == p2.we
        assert [b.l_total for b in t1] == [b.l_total for b in t2]

    def test_returned_profile_has_min_trace_objective(self, rng):
        truth = random_truth_profile(rng)
        dens = random_density_field(rng)
        od = render_od(dens, truth)
        mask = color_model.tissue_mask(od)
        hp = matched_hyperparams(dens, seed=5)
        profile, trace = fit(od, mask, hp)
        best = min(b.l_total for b in trace)
        samples = sample_tissue_od(od, mask, hp)
        refit = objective_from_densities(separate(samples, profile), hp)
        assert refit.l_total == pytest.approx(best, rel=1e-9)

    def test_objective_descends(self, rng):
        truth = random_truth_profile(rng)
        dens = random_density_field(rng)
        od = render_od(dens, truth)
        mask = color_model.tissue_mask(od)
        _, trace = fit(od, mask, matched_hyperparams(dens, seed=2))
        ls = [b.l_total for b in trace]
        running_min = np.minimum.accumulate(ls)
        assert np.all(np.diff(running_min) <= 0)
        assert ls[-1] <= ls[0]

    def test_insufficient_tissue(self):
        od = np.zeros((64, 64, 3))
        mask = np.zeros((64, 64), dtype=bool)
        mask[0, :10] = True
        with pytest.raises(InsufficientTissueError):
            fit(od, mask, AcdHyperparams())

    def test_resamples_with_replacement_when_small(self, rng):
        truth = random_truth_profile(rng)
        dens = random_density_field(rng, size=16)  # 256 tissue pixels max
        od = render_od(dens, truth)
        mask = color_model.tissue_mask(od)
        assert 100 <= mask.sum() < 10_000
        samples = sample_tissue_od(od, mask, AcdHyperparams())
        assert samples.shape == (10_000, 3)


class TestProfileSerialization:
    def test_roundtrip_bit_exact(self, tmp_path, rng):
        truth = random_truth_profile(rng)
        profile = StainProfile(M=truth.M, wh=truth.wh, we=truth.we)
        hp = AcdHyperparams(seed=42)
        path = tmp_path / "profile.txt"
        save_profile(path, profile, hp)
        loaded, loaded_hp, extras = load_profile(path)
        assert np.array_equal(loaded.M, profile.M)
        assert loaded.wh == profile.wh and loaded.we == profile.we
        assert loaded_hp == hp
        assert extras == {}

    def test_byte_stable(self, tmp_path, rng):
        truth = random_truth_profile(rng)
        profile = StainProfile(M=truth.M, wh=truth.wh, we=truth.we)
        hp = AcdHyperparams()
        save_profile(tmp_path / "a.txt", profile, hp)
        save_profile(tmp_path / "b.txt", profile, hp)
        assert (tmp_path / "a.txt").read_bytes() == (tmp_path / "b.txt").read_bytes()

    def test_rejects_unknown_schema(self, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_text("schema_version=99\n")
        with pytest.raises(ValueError):
            load_profile(path)


class TestHyperparamValidation:
    def test_eta_strictly_inside_unit_interval(self):
        with pytest.raises(ValueError):
            AcdHyperparams(eta=0.0)
        with pytest.raises(ValueError):
            AcdHyperparams(eta=1.0)

    def test_sample_n_minimum(self):
        with pytest.raises(ValueError):
            AcdHyperparams(sample_n=50)
