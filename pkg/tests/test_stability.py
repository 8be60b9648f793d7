import csv
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vdarwin.dynamics import FlowConfig, run
from vdarwin.ensemble import Ensemble, reference_ball
from vdarwin.errors import LabelMismatch, NonPositiveQ, RegimeViolated
from vdarwin.stability import (
    PerturbSpec,
    dt_halving_study,
    export_trace,
    field_difference_vs_w2,
    gronwall_envelope,
    gronwall_fit,
    jitter_positions,
    label_distance,
    order_table,
    q_between,
    q_functional,
    trace_from_trajectories,
    uniqueness_experiment,
)
from vdarwin.transport import w2_exact

CFG = FlowConfig(dt=0.05, t_end=0.5, eps=0.2, fp_tol=1e-12, seed=7)


@pytest.fixture(scope="module")
def small():
    return reference_ball(16, seed=3)


@pytest.fixture(scope="module")
def base_run(small):
    return run(small, CFG)


def synthetic_q(c, dt=1e-3):
    t_end = min(1.0, 1.0 / c)
    t = np.arange(int(round(t_end / dt)) + 1) * dt
    y0 = 3.0 * math.exp(c * t_end)
    return t, np.exp(1.0 - y0 * np.exp(-c * t))


class TestQ:
    def test_identical(self, small):
        assert q_between(small, small) == 0.0

    def test_shift(self, small):
        moved = Ensemble(small.x + [0.1, 0.0, 0.0], small.p, small.w)
        assert q_between(small, moved) == pytest.approx(0.5 * 0.01, rel=1e-12)
        np.testing.assert_allclose(label_distance(small, moved), 0.1, rtol=1e-12)

    def test_single_particle_example(self):
        a = Ensemble([[0.0, 0, 0]], [[0.0, 0, 0]], [1.0], support_radius=2.0)
        b = Ensemble([[2.0, 0, 0]], [[0.0, 0, 0]], [1.0])
        assert q_between(a, b) == 2.0

    def test_label_mismatch(self, small):
        with pytest.raises(LabelMismatch):
            q_between(small, reference_ball(8))

    def test_functional_on_trajectories(self, small, base_run):
        assert q_functional(small, base_run, base_run, -1) == 0.0
        with pytest.raises(LabelMismatch):
            q_functional(reference_ball(8), base_run, base_run, 0)

    def test_functional_time_mismatch(self, small, base_run):
        other = run(small, CFG.replace(record_every=2))
        with pytest.raises(LabelMismatch):
            q_functional(small, base_run, other, 1)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 7), st.integers(0, 2**32 - 1))
    def test_coupling_dominates_w2(self, n, seed):
        rng = np.random.default_rng(seed)
        a = Ensemble(rng.uniform(-1, 1, (n, 3)), rng.uniform(-0.5, 0.5, (n, 3)), np.full(n, 1.0 / n))
        b = Ensemble(rng.uniform(-1, 1, (n, 3)), rng.uniform(-0.5, 0.5, (n, 3)), np.full(n, 1.0 / n))
        assert w2_exact(a, b).cost <= 2 * q_between(a, b) + 1e-12


class TestGronwallFit:
    def test_constant_q(self):
        fit = gronwall_fit(np.linspace(0, 1, 11), np.full(11, 1e-4))
        assert fit.c == 0.0 and fit.bound_satisfied

    def test_decreasing_q(self):
        c, ok = gronwall_fit([0.0, 0.5, 1.0], [1e-3, 1e-4, 1e-5])
        assert c == 0.0 and ok

    @pytest.mark.parametrize("c", [0.1, 1.0, 10.0])
    def test_synthetic_recovery(self, c):
        t, q = synthetic_q(c)
        fit = gronwall_fit(t, q)
        assert abs(fit.c - c) <= 0.05 * c
        assert fit.bound_satisfied

    @settings(max_examples=25, deadline=None)
    @given(st.floats(0.1, 10.0))
    def test_synthetic_recovery_property(self, c):
        t, q = synthetic_q(c)
        assert abs(gronwall_fit(t, q).c - c) <= 0.05 * c

    def test_all_zero_is_exact_uniqueness(self):
        fit = gronwall_fit([0.0, 1.0], [0.0, 0.0])
        assert fit.exact_uniqueness and fit.c == 0.0 and fit.bound_satisfied

    def test_non_positive(self):
        with pytest.raises(NonPositiveQ):
            gronwall_fit([0.0, 1.0], [1e-3, 0.0])

    def test_q_above_regime(self):
        with pytest.raises(RegimeViolated):
            gronwall_fit([0.0, 1.0], [1e-3, 0.5])

    def test_separation_above_regime(self):
        with pytest.raises(RegimeViolated):
            gronwall_fit([0.0, 1.0], [1e-3, 2e-3], separations=[0.1, 0.4])

    @pytest.mark.parametrize("t,q", [([], []), ([0.0, 1.0], [1e-3]), ([0.0, 0.0], [1e-3, 1e-3])])
    def test_bad_input(self, t, q):
        with pytest.raises(ValueError):
            gronwall_fit(t, q)

    def test_envelope(self):
        t = np.linspace(0, 1, 50)
        env = gronwall_envelope(t, 1e-4, 2.0)
        assert env[0] == pytest.approx(1e-4, rel=1e-14)
        assert np.all(np.diff(env) > 0)
        # env solves Q' = c Q (1 - ln Q)
        h = 1e-6
        d = (gronwall_envelope(0.5 + h, 1e-4, 2.0) - gronwall_envelope(0.5 - h, 1e-4, 2.0)) / (2 * h)
        q = gronwall_envelope(0.5, 1e-4, 2.0)
        assert d == pytest.approx(2.0 * q * (1 - math.log(q)), rel=1e-6)

    @settings(max_examples=50, deadline=None)
    @given(st.floats(1e-12, 0.36), st.floats(0.0, 10.0))
    def test_envelope_nondecreasing(self, q0, c):
        env = gronwall_envelope(np.linspace(0, 1, 101), q0, c)
        assert np.all(np.diff(env) >= 0)

    def test_fitted_envelope_covers_samples(self, rng):
        t = np.linspace(0, 1, 30)
        q = 1e-6 * np.exp(np.cumsum(rng.uniform(0, 0.5, 30)))
        c, ok = gronwall_fit(t, q)
        assert ok
        assert np.all(q <= gronwall_envelope(t, q[0], c) * (1 + 1e-12))


class TestFieldDifference:
    def test_degenerate(self, small):
        rep = field_difference_vs_w2(small, small, grid_n=4)
        assert rep.degenerate and rep.w2 == 0.0 and rep.ratio_phi == 0.0

    def test_translation_invariance(self):
        ens = reference_ball(24, seed=11)
        other = jitter_positions(ens, 0.05, seed=2)
        shift = np.array([3.0, -1.0, 2.0])
        a = field_difference_vs_w2(ens, other, grid_n=8)
        b = field_difference_vs_w2(
            Ensemble(ens.x + shift, ens.p, ens.w), Ensemble(other.x + shift, other.p, other.w), grid_n=8
        )
        for x, y in ((a.ratio_phi, b.ratio_phi), (a.ratio_a, b.ratio_a), (a.ratio_last, b.ratio_last)):
            assert x == pytest.approx(y, rel=1e-10)
        assert a.ratio_phi > 0 and a.ratio_a > 0 and a.ratio_last > 0

    def test_jitter_is_exact(self, small):
        moved = jitter_positions(small, 0.01, seed=5)
        np.testing.assert_allclose(np.linalg.norm(moved.x - small.x, axis=1), 0.01, rtol=1e-12)
        assert np.array_equal(moved.p, small.p)


class TestPerturbSpec:
    def test_validation(self):
        with pytest.raises(ValueError):
            PerturbSpec("shuffle")
        with pytest.raises(ValueError):
            PerturbSpec("jitter", delta=0.0)
        with pytest.raises(ValueError):
            PerturbSpec("fp-tol", tol_factor=1.0)

    def test_json(self):
        assert PerturbSpec("none").to_json() == {"kind": "none"}
        assert PerturbSpec("jitter", delta=1e-3).to_json() == {"kind": "jitter", "delta": 1e-3}
        assert PerturbSpec("fp-tol").to_json() == {"kind": "fp-tol", "tol_factor": 10.0}


class TestUniqueness:
    def test_identical_rerun(self, small):
        tr = uniqueness_experiment(small, CFG, PerturbSpec("none"), threads=1)
        assert tr.exact_uniqueness
        assert tr.q_values == [0.0] * 11
        assert tr.w2_values == [0.0] * 11
        assert tr.gronwall_c == 0.0 and tr.bound_satisfied and tr.regime_valid

    def test_jitter(self, small, base_run):
        tr = uniqueness_experiment(small, CFG, PerturbSpec("jitter", delta=1e-3), reference=base_run)
        assert tr.q_values[0] == pytest.approx(0.5 * 1e-6, rel=1e-9)
        assert tr.regime_valid and tr.bound_satisfied
        assert tr.fit_window == (0, 11)
        assert all(g >= -1e-15 for g in tr.coupling_gaps())

    def test_thread_count_does_not_change_results(self, small):
        spec = PerturbSpec("jitter", delta=1e-3)
        a = uniqueness_experiment(small, CFG, spec, threads=1)
        b = uniqueness_experiment(small, CFG, spec, threads=2)
        assert a.q_values == b.q_values and a.w2_values == b.w2_values

    def test_dt_halving_aligns_snapshots(self, small, base_run):
        tr = uniqueness_experiment(small, CFG, PerturbSpec("dt-halving"), reference=base_run)
        assert np.allclose(tr.times, base_run.times)
        assert tr.q_values[0] == 0.0 and tr.q_values[-1] > 0

    def test_regime_violation_is_flagged(self, small, base_run):
        tr = uniqueness_experiment(small, CFG, PerturbSpec("jitter", delta=0.5), reference=base_run)
        assert not tr.regime_valid
        assert not tr.regime_flags[0]
        assert tr.fit_window == (0, 0)
        assert not tr.bound_satisfied

    def test_mismatched_labels(self, small, base_run):
        with pytest.raises(LabelMismatch):
            trace_from_trajectories(base_run, run(reference_ball(8), CFG), {"kind": "none"})

    def test_export(self, tmp_path, small, base_run):
        tr = uniqueness_experiment(small, CFG, PerturbSpec("fp-tol"), reference=base_run)
        summary = export_trace(tr, tmp_path, extra={"seed": 7})
        with open(tmp_path / "trace.csv", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["t", "Q", "W2", "regime_valid"]
        assert len(rows) == 12
        assert [float(r[1]) for r in rows[1:]] == tr.q_values
        assert json.loads((tmp_path / "trace.json").read_text()) == summary
        assert summary["seed"] == 7 and summary["perturbation"] == {"kind": "fp-tol", "tol_factor": 10.0}


class TestOrderTable:
    def test_structure(self, small):
        rows = dt_halving_study(small, CFG, levels=3, threads=1)
        assert [r["dt"] for r in rows] == [0.05, 0.025, 0.0125]
        assert rows[-1]["terminal_w2_to_next"] is None and rows[-1]["ratio"] is None
        assert rows[1]["ratio"] is None
        assert rows[0]["ratio"] >= 8

    def test_needs_two_levels(self, small):
        with pytest.raises(ValueError):
            dt_halving_study(small, CFG, levels=1)

    def test_zero_distance(self, small):
        rows = order_table([small, small, small], [0.1, 0.05, 0.025])
        assert rows[0]["terminal_w2_to_next"] == 0.0 and rows[0]["ratio"] is None
