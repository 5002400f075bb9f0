"""Tests for operator assembly, SUPG parameters and backward-Euler transport."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from glymph.errors import ConfigurationError, DomainError
from glymph.forward import (D_FLOOR, ForwardProblem, TransportCoefficients, assemble_operators, peclet,
                            relative_error, stabilization_operators, supg_sigma)
from glymph.phantom import PhantomSpec, interior_support_mask, truth_coefficients
from glymph.spline_space import Field, VectorField, l2_project


def coefficients(domain, D=0.05, gamma=0.01, u=None):
    space = domain.space
    u = VectorField.zeros(space) if u is None else u
    return TransportCoefficients(Field.constant(space, D), u, Field.constant(space, gamma))


def gaussian_tracer(domain, center=(5.5, 5.0, 4.5), width=1.5):
    c = np.asarray(center)
    return l2_project(domain.space, domain,
                      lambda p: 0.1 + np.exp(-np.sum((p - c) ** 2, axis=1) / (2 * width ** 2)))


def random_interior_velocity(domain, seed, scale=0.05):
    """Random coefficients, zero on every basis function touching a cut or outside element."""
    rng = np.random.default_rng(seed)
    coef = rng.normal(scale=scale, size=(3, domain.space.n_cp))
    coef[:, ~interior_support_mask(domain)] = 0.0
    return VectorField(domain.space, coef.ravel())


class TestSupgSigma:
    """Streamline stabilization parameter."""

    def test_diffusive_branch(self):
        assert supg_sigma(1.0, 1.0, 1.0) == pytest.approx(1 / 12, abs=1e-12)
        assert peclet(1.0, 1.0, 1.0) == pytest.approx(0.5)

    def test_advective_branch(self):
        assert supg_sigma(1.0, 100.0, 1.0) == pytest.approx(0.005, abs=1e-12)

    @pytest.mark.parametrize("speed", [0.0, 1e-14, 1e-300])
    def test_zero_speed_limit(self, speed):
        assert supg_sigma(2.0, speed, 0.5) == pytest.approx(4.0 / 6.0, rel=1e-12)

    @settings(max_examples=50)
    @given(h=st.floats(0.1, 5), speed=st.floats(1e-9, 10), D=st.floats(1e-4, 10))
    def test_bounded_by_both_limits(self, h, speed, D):
        s = supg_sigma(h, speed, D)
        assert np.isfinite(s) and s > 0
        assert s <= h / (2 * speed) * (1 + 1e-12)
        assert s <= h ** 2 / (12 * D) * (1 + 1e-12)

    def test_continuous_at_small_peclet(self):
        assert supg_sigma(1.0, 1e-10, 1.0) == pytest.approx(supg_sigma(1.0, 0.0, 1.0), rel=1e-9)


class TestAssembly:
    """Operator structure."""

    def test_zero_velocity_degenerates(self, small_sphere_domain):
        ops = assemble_operators(small_sphere_domain, coefficients(small_sphere_domain), 5.0, "hw")
        for name in ("A_bar", "A_prime", "Ms", "S"):
            assert abs(getattr(ops, name)).max() == 0.0
        ref = ops.M + 5.0 * (ops.K + ops.H)
        assert abs(ops.L - ref).max() == 0.0

    def test_symmetric_parts(self, small_sphere_domain):
        ops = assemble_operators(small_sphere_domain, coefficients(small_sphere_domain), 5.0, "advective")
        for A in (ops.M, ops.K, ops.H):
            assert abs(A - A.T).max() <= 1e-14 * abs(A).max()

    def test_unknown_formulation(self, small_sphere_domain):
        with pytest.raises(ConfigurationError):
            assemble_operators(small_sphere_domain, coefficients(small_sphere_domain), 5.0, "upwind")

    def test_nonpositive_dt(self, small_sphere_domain):
        with pytest.raises(ConfigurationError):
            assemble_operators(small_sphere_domain, coefficients(small_sphere_domain), 0.0, "hw")

    def test_mismatched_spaces(self, small_sphere_domain, box_domain):
        with pytest.raises(ConfigurationError):
            assemble_operators(small_sphere_domain, coefficients(box_domain), 5.0, "hw")

    def test_diffusivity_clamped(self, small_sphere_domain):
        co = coefficients(small_sphere_domain, D=-1.0)
        ops = assemble_operators(small_sphere_domain, co, 5.0, "advective")
        assert ops.n_clamped == len(small_sphere_domain.bulk_weights)
        K = assemble_operators(small_sphere_domain, coefficients(small_sphere_domain, D=D_FLOOR), 5.0, "advective").K
        assert abs(ops.K - K).max() <= 1e-12 * abs(K).max()

    def test_sigma_cap_only_limits(self, small_sphere_domain):
        u = random_interior_velocity(small_sphere_domain, 0)
        co = coefficients(small_sphere_domain, u=u)
        Ms_cap, _ = stabilization_operators(small_sphere_domain, co, 5.0, "advective")
        Ms_raw, _ = stabilization_operators(small_sphere_domain, co, 5.0, "advective", dt_cap=None)
        Ms_big, _ = stabilization_operators(small_sphere_domain, co, 1e6, "advective")
        assert abs(Ms_big - Ms_raw).max() == 0.0
        assert abs(Ms_cap).max() <= abs(Ms_raw).max() * (1 + 1e-12)


class TestStepping:
    """Backward-Euler steps and diagnostics."""

    def test_zero_stays_zero(self, small_sphere_domain):
        prob = ForwardProblem(small_sphere_domain, coefficients(small_sphere_domain), 5.0)
        out = prob.step(Field.zeros(small_sphere_domain.space))
        assert np.all(out.coef == 0.0)

    def test_k_eff_for_constant_concentration(self, small_sphere_domain):
        dom = small_sphere_domain
        prob = ForwardProblem(dom, coefficients(dom, gamma=0.02), 5.0)
        d = prob.diagnostics(0.0, np.full(dom.space.n_cp, 3.0))
        assert d.k_eff == pytest.approx(0.02 * dom.area / dom.volume, rel=1e-10)

    def test_robin_decay(self, small_sphere_domain):
        dom = small_sphere_domain
        prob = ForwardProblem(dom, coefficients(dom, gamma=0.02), 5.0)
        mass = prob.run(gaussian_tracer(dom), 10).column("total_mass")
        assert np.all(np.diff(mass) < 0)

    def test_no_clearance_keeps_mass(self, small_sphere_domain):
        dom = small_sphere_domain
        prob = ForwardProblem(dom, coefficients(dom, gamma=0.0), 5.0)
        mass = prob.run(gaussian_tracer(dom), 5).column("total_mass")
        np.testing.assert_allclose(mass, mass[0], rtol=1e-10)

    @settings(max_examples=5, deadline=None)
    @given(seed=st.integers(0, 1000), form=st.sampled_from(["conservative", "hw"]))
    def test_conservation_for_non_solenoidal_velocity(self, round_domain, seed, form):
        dom = round_domain
        u = random_interior_velocity(dom, seed)
        assert np.any(u.coef != 0)
        traj = ForwardProblem(dom, coefficients(dom, u=u), 5.0, form).run(gaussian_tracer(dom), 4)
        dm = np.abs(traj.column("delta_mass")[1:])
        assert np.all(dm <= 1e-8 * traj.column("total_mass")[1:])

    def test_advective_form_loses_mass_with_divergent_velocity(self, round_domain):
        dom = round_domain
        u = random_interior_velocity(dom, 7)
        runs = {f: ForwardProblem(dom, coefficients(dom, u=u), 5.0, f).run(gaussian_tracer(dom), 6)
                for f in ("advective", "conservative")}
        dm = {f: np.max(np.abs(t.column("delta_mass")[1:])) for f, t in runs.items()}
        total = runs["advective"].column("total_mass")[0]
        assert dm["advective"] > 1e-4 * total
        assert dm["advective"] > 1e4 * dm["conservative"]

    def test_formulations_agree_for_solenoidal_velocity(self, round_domain):
        dom = round_domain
        spec = PhantomSpec(velocity="curl_potential", radius=4.4, box_mm=(10, 10, 10), elements=(10, 10, 10),
                           curl_amplitude=0.2, taper=True)
        u = truth_coefficients(dom, spec).u_bar
        assert np.abs(u.coef).max() > 0.1
        c0 = gaussian_tracer(dom)
        runs = {f: ForwardProblem(dom, coefficients(dom, u=u), 5.0, f).run(c0, 5).fields
                for f in ("advective", "conservative", "hw")}
        # the interpolated curl field is only discretely solenoidal up to O(h^2), so the forms
        # agree to a small fraction of the transport over the run rather than to round-off
        for n in range(1, 6):
            ref = runs["advective"][n]
            moved = np.sqrt(relative_error(ref, c0, dom))
            for f in ("conservative", "hw"):
                assert np.sqrt(relative_error(runs[f][n], ref, dom)) < 0.2 * moved

    def test_trajectory_csv(self, small_sphere_domain, tmp_path):
        dom = small_sphere_domain
        traj = ForwardProblem(dom, coefficients(dom), 5.0).run(gaussian_tracer(dom), 3)
        path = traj.to_csv(tmp_path / "t.csv", include_initial=False)
        lines = open(path).read().splitlines()
        assert lines[0].startswith("step,t_min,total_mass")
        assert len(lines) == 4


class TestRelativeError:
    """Squared relative L2 error."""

    def test_cases(self, small_sphere_domain):
        dom = small_sphere_domain
        c = gaussian_tracer(dom)
        assert relative_error(c, c, dom) == 0.0
        assert relative_error(2 * c, c, dom) == pytest.approx(1.0, rel=1e-12)
        assert relative_error(Field.zeros(dom.space), c, dom) == pytest.approx(1.0, rel=1e-12)

    def test_zero_reference(self, small_sphere_domain):
        z = Field.zeros(small_sphere_domain.space)
        with pytest.raises(DomainError):
            relative_error(z, z, small_sphere_domain)
