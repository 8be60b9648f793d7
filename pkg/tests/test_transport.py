import csv
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import _experiments as ex
from vdarwin.ensemble import Ensemble, read_csv, reference_ball
from vdarwin.errors import SizeMismatch, ThetaOutOfRange, WeightMismatch
from vdarwin.transport import (
    AffineTest,
    BumpTest,
    continuity_residual,
    cost_matrix,
    geodesic_velocity,
    interpolant_density_bound,
    kinetic_energy,
    mccann_interpolant,
    phase_density_linf,
    w2_batch,
    w2_bruteforce,
    w2_exact,
    write_plan_csv,
    write_plan_summary,
)


def uniform_ens(z):
    z = np.asarray(z, dtype=float)
    return Ensemble(z[:, :3], z[:, 3:], np.full(len(z), 1.0 / len(z)))


def random_ens(rng, n, scale=0.5):
    return uniform_ens(rng.uniform(-scale, scale, (n, 6)))


@pytest.fixture(scope="module")
def balls():
    a, b = reference_ball(seed=42), reference_ball(seed=43)
    return a, b, w2_exact(a, b)


class TestExact:
    def test_identical(self):
        a = reference_ball(32)
        plan = w2_exact(a, a)
        assert plan.cost == 0.0
        assert np.array_equal(plan.assignment, np.arange(32))

    def test_translation(self):
        a = reference_ball(32)
        shift = np.array([0.1, 0.0, 0.0, 0.0, 0.2, 0.0])
        b = uniform_ens(a.z + shift)
        plan = w2_exact(a, b)
        assert np.array_equal(plan.assignment, np.arange(32))
        assert plan.cost == pytest.approx(0.05, rel=1e-14)
        assert plan.w2 == pytest.approx(math.sqrt(0.05), rel=1e-14)

    def test_translation_against_bruteforce(self, rng):
        for n in range(2, 9):
            a = random_ens(rng, n)
            d = rng.normal(scale=0.05, size=6)
            b = uniform_ens(a.z + d)
            brute = w2_bruteforce(a, b)
            assert brute.assignment.tolist() == list(range(n))
            assert w2_exact(a, b).cost == brute.cost
            assert brute.cost == pytest.approx(d @ d, rel=1e-12)

    def test_fixture_pair(self):
        a = read_csv(ex.FIXTURES / "pair7_a.csv")
        b = read_csv(ex.FIXTURES / "pair7_b.csv")
        with open(ex.FIXTURES / "pair7_expected.json", encoding="utf-8") as fh:
            expected = json.load(fh)
        plan = w2_exact(a, b)
        assert plan.cost == pytest.approx(expected["cost"], rel=1e-14)
        assert plan.assignment.tolist() == expected["assignment"]
        assert w2_bruteforce(a, b).assignment.tolist() == expected["assignment"]

    def test_matches_bruteforce(self, rng):
        for n in range(1, 8):
            for _ in range(20):
                a, b = random_ens(rng, n), random_ens(rng, n)
                assert w2_exact(a, b).cost == w2_bruteforce(a, b).cost

    def test_bruteforce_limit(self):
        a = reference_ball(10)
        with pytest.raises(ValueError):
            w2_bruteforce(a, a)

    def test_size_mismatch(self):
        with pytest.raises(SizeMismatch):
            w2_exact(reference_ball(4), reference_ball(5))

    def test_weight_mismatch(self):
        a = reference_ball(4)
        b = Ensemble(a.x, a.p, [0.1, 0.2, 0.3, 0.4])
        with pytest.raises(WeightMismatch):
            w2_exact(a, b)

    def test_ties_between_coincident_points(self):
        z = np.zeros((4, 6))
        z[2:, 0] = 1.0
        a = uniform_ens(z)
        b = uniform_ens(z[::-1] + 0.5)
        plan = w2_exact(a, b)
        # coincident sources receive their targets in increasing order
        assert plan.assignment.tolist() == [2, 3, 0, 1]

    def test_cost_matrix(self):
        a = uniform_ens([[0, 0, 0, 0, 0, 0], [1, 0, 0, 0, 0, 0]])
        b = uniform_ens([[0, 0, 0, 0, 0, 2], [0, 0, 0, 0, 0, 0]])
        np.testing.assert_array_equal(cost_matrix(a, b), [[4, 0], [5, 1]])

    def test_per_particle_cost_sums_to_total(self, balls):
        _, _, plan = balls
        assert math.fsum(plan.per_particle_cost()) == plan.cost

    def test_batch(self, rng):
        pairs = [(random_ens(rng, 12), random_ens(rng, 12)) for _ in range(6)]
        serial = [p.cost for p in w2_batch(pairs, threads=1)]
        assert [p.cost for p in w2_batch(pairs, threads=3)] == serial
        assert serial == [w2_exact(a, b).cost for a, b in pairs]


small_ens = st.integers(1, 6).flatmap(
    lambda n: st.tuples(
        *[st.lists(st.floats(-1, 1, allow_nan=False), min_size=6 * n, max_size=6 * n) for _ in range(3)]
    )
)


@settings(max_examples=60, deadline=None)
@given(small_ens)
def test_metric_properties(data):
    a, b, c = (uniform_ens(np.reshape(d, (-1, 6))) for d in data)
    ab, bc, ac = w2_exact(a, b), w2_exact(b, c), w2_exact(a, c)
    assert ab.cost >= 0
    assert abs(ab.cost - w2_exact(b, a).cost) <= 1e-12
    assert ac.w2 <= ab.w2 + bc.w2 + 1e-12
    assert w2_exact(a, a).cost == 0.0


class TestInterpolant:
    def test_endpoints(self, balls):
        a, b, plan = balls
        assert np.array_equal(mccann_interpolant(a, plan, 1.0).ensemble.z, a.z)
        np.testing.assert_allclose(mccann_interpolant(a, plan, 2.0).ensemble.z, b.z[plan.assignment], atol=0)

    def test_midpoint_halves_distance(self, balls):
        a, b, plan = balls
        mid = mccann_interpolant(a, plan, 1.5)
        assert mid.theta == 1.5
        assert w2_exact(a, mid.ensemble).w2 == pytest.approx(plan.w2 / 2, rel=1e-9)

    @pytest.mark.parametrize("theta", [0.99, 2.01, -1.0])
    def test_theta_range(self, balls, theta):
        a, _, plan = balls
        with pytest.raises(ThetaOutOfRange):
            mccann_interpolant(a, plan, theta)

    def test_support_radius(self, balls):
        a, b, plan = balls
        assert mccann_interpolant(a, plan, 1.3).ensemble.support_radius == a.support_radius + b.support_radius


class TestGeodesicVelocity:
    def test_translation_velocity(self):
        a = reference_ball(8)
        shift = np.array([0.0, 0.3, 0.0, 0.1, 0.0, 0.0])
        plan = w2_exact(a, uniform_ens(a.z + shift))
        np.testing.assert_allclose(geodesic_velocity(a, plan), np.tile(shift, (8, 1)), atol=1e-15)

    def test_identical_is_zero(self):
        a = reference_ball(8)
        assert np.array_equal(geodesic_velocity(a, w2_exact(a, a)), np.zeros((8, 6)))

    def test_two_particle_swap(self):
        a = uniform_ens([[0, 0, 0, 0, 0, 0], [1, 0, 0, 0, 0, 0]])
        b = uniform_ens([[1.1, 0, 0, 0, 0, 0], [0.1, 0, 0, 0, 0, 0]])
        plan = w2_exact(a, b)
        assert plan.assignment.tolist() == [1, 0]
        np.testing.assert_allclose(geodesic_velocity(a, plan), [[0.1, 0, 0, 0, 0, 0]] * 2, atol=1e-15)
        assert kinetic_energy(a, geodesic_velocity(a, plan)) == plan.cost

    def test_kinetic_energy_equals_cost(self, balls):
        a, _, plan = balls
        assert kinetic_energy(a, geodesic_velocity(a, plan)) == plan.cost


class TestContinuity:
    def test_affine_test_function_exact(self, balls):
        a, _, plan = balls
        fn = AffineTest((0.3, -0.2, 0.5, 0.1, 0.4, -0.6), const=0.7)
        assert continuity_residual(a, plan, np.linspace(1.1, 1.9, 9), fn) <= 1e-10

    def test_identical_ensembles(self):
        a = reference_ball(16)
        fn = BumpTest((0.0,) * 6, 1.5)
        assert continuity_residual(a, w2_exact(a, a), [1.2, 1.5, 1.8], fn) <= 1e-13

    def test_bump_second_order(self, balls):
        a, _, plan = balls
        fn = BumpTest((0.1, 0.0, -0.1, 0.0, 0.05, 0.0), 1.2)
        grid = np.linspace(1.1, 1.9, 9)
        coarse = continuity_residual(a, plan, grid, fn, dtheta=0.02)
        fine = continuity_residual(a, plan, grid, fn, dtheta=0.01)
        assert 3.5 <= coarse / fine <= 4.5

    def test_bump_gradient(self, rng):
        fn = BumpTest((0.1, 0.0, -0.1, 0.0, 0.05, 0.0), 1.2)
        z = rng.uniform(-0.5, 0.5, (10, 6))
        h = 1e-6
        fd = np.stack([(fn.value(z + h * e) - fn.value(z - h * e)) / (2 * h) for e in np.eye(6)], axis=1)
        np.testing.assert_allclose(fn.grad(z), fd, atol=1e-8)

    def test_affine_gradient_in_transition(self, rng):
        fn = AffineTest((0.3, -0.2, 0.5, 0.1, 0.4, -0.6), const=0.7, plateau=1.0)
        z = rng.normal(size=(10, 6))
        z *= (1.5 / np.linalg.norm(z, axis=1))[:, None]
        h = 1e-6
        fd = np.stack([(fn.value(z + h * e) - fn.value(z - h * e)) / (2 * h) for e in np.eye(6)], axis=1)
        np.testing.assert_allclose(fn.grad(z), fd, atol=1e-7)

    def test_grid_too_short(self, balls):
        a, _, plan = balls
        with pytest.raises(ValueError):
            continuity_residual(a, plan, [1.2, 1.4], AffineTest((1, 0, 0, 0, 0, 0)))


class TestDensityBound:
    def test_endpoint(self, balls):
        a, _, plan = balls
        rep = interpolant_density_bound(mccann_interpolant(a, plan, 1.0), 0.25)
        assert rep.estimate == phase_density_linf(a, 0.25)
        assert rep.ratio <= 1.0

    @pytest.mark.parametrize("cell", [0.25, 0.5])
    def test_interpolants_within_slack(self, balls, cell):
        a, _, plan = balls
        for theta in np.linspace(1.0, 2.0, 11):
            rep = interpolant_density_bound(mccann_interpolant(a, plan, theta), cell)
            assert rep.satisfied, (theta, rep.ratio)

    def test_single_cell(self):
        a = uniform_ens([[0.1] * 6, [0.2] * 6])
        assert phase_density_linf(a, 0.5) == pytest.approx(1.0 / 0.5**6)
        with pytest.raises(ValueError):
            phase_density_linf(a, 0.0)


def test_export(tmp_path, balls):
    _, _, plan = balls
    write_plan_csv(plan, tmp_path / "plan.csv")
    write_plan_summary(plan, tmp_path / "plan.json")
    with open(tmp_path / "plan.csv", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["i", "sigma_i", "cost_i"]
    assert [int(r[1]) for r in rows[1:]] == plan.assignment.tolist()
    assert math.fsum(float(r[2]) for r in rows[1:]) == plan.cost
    summary = json.loads((tmp_path / "plan.json").read_text())
    assert summary == {"n": 512, "cost": plan.cost, "w2": plan.w2}
