"""Label-coupled stability experiments: Q(t), W2 <= sqrt(2 Q), log-Gronwall fits,
and field differences measured against W2.

Two trajectories that carry the same labelled samples define

    Q(t) = 1/2 sum_i w_i |Z1(t, z_i) - Z2(t, z_i)|^2

which dominates W2^2 / 2 because the label coupling is admissible.  While
the sup separation stays below 1/e the log-Gronwall inequality
``Q' <= C Q (1 - ln Q)`` is tested by substituting ``y = 1 - ln Q``, which
turns it into ``y' >= -C y``.
"""

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dynamics import run
from .ensemble import Ensemble
from .errors import LabelMismatch, NonPositiveQ, RegimeViolated
from .fields import (
    Pairs,
    current_velocity,
    solve_vector_potential,
    vector_potential_at,
)
from .transport import w2_exact

REGIME_LIMIT = math.exp(-1.0)
PERTURBATIONS = ("none", "dt-halving", "fp-tol", "jitter")


@dataclass
class StabilityTrace:
    times: list
    q_values: list
    w2_values: list
    separations: list
    regime_flags: list
    gronwall_c: float
    bound_satisfied: bool
    perturbation: dict
    exact_uniqueness: bool = False
    fit_window: tuple = (0, 0)

    @property
    def regime_valid(self):
        return all(self.regime_flags)

    def coupling_gaps(self):
        """``2 Q - W2^2`` at every recorded time (nonnegative up to rounding)."""
        return [2.0 * q - w * w for q, w in zip(self.q_values, self.w2_values)]

    def summary(self):
        return {
            "gronwall_c": self.gronwall_c,
            "bound_satisfied": self.bound_satisfied,
            "regime_valid": self.regime_valid,
            "exact_uniqueness": self.exact_uniqueness,
            "perturbation": self.perturbation,
        }


# -- Q functional --------------------------------------------------------------


def _check_labels(traj1, traj2):
    a, b = traj1.initial, traj2.initial
    if len(a) != len(b) or not np.array_equal(a.w, b.w):
        raise LabelMismatch("trajectories do not carry the same labelled samples")


def label_distance(ens1, ens2):
    """Per-label Euclidean phase-space distances ``|Z1_i - Z2_i|``."""
    if len(ens1) != len(ens2) or not np.array_equal(ens1.w, ens2.w):
        raise LabelMismatch("ensembles do not carry the same labelled samples")
    d = ens1.z - ens2.z
    return np.sqrt(np.einsum("ik,ik->i", d, d))


def q_between(ens1, ens2):
    d = label_distance(ens1, ens2)
    return 0.5 * math.fsum(ens1.w * d * d)


def q_functional(f0, traj1, traj2, t_index):
    """``1/2 sum w_i |Z1(t) - Z2(t)|^2`` at snapshot ``t_index`` of both trajectories."""
    _check_labels(traj1, traj2)
    if len(f0) != len(traj1.initial) or not np.array_equal(f0.w, traj1.initial.w):
        raise LabelMismatch("f0 does not match the trajectories' samples")
    t1, e1 = traj1.snapshots[t_index]
    t2, e2 = traj2.snapshots[t_index]
    if abs(t1 - t2) > 1e-9 * max(1.0, abs(t1)):
        raise LabelMismatch(f"snapshot times differ: {t1} vs {t2}")
    d = label_distance(e1, e2)
    return 0.5 * math.fsum(f0.w * d * d)


# -- Gronwall fit --------------------------------------------------------------


@dataclass(frozen=True)
class GronwallFit:
    c: float
    bound_satisfied: bool
    exact_uniqueness: bool = False

    def __iter__(self):
        yield self.c
        yield self.bound_satisfied


def gronwall_envelope(t, q0, c, t0=0.0):
    """``exp(1 - (1 - ln q0) e^{-c (t - t0)})``: the solution of Q' = c Q (1 - ln Q)."""
    t = np.asarray(t, dtype=float)
    return np.exp(1.0 - (1.0 - math.log(q0)) * np.exp(-c * (t - t0)))


def gronwall_fit(times, q_values, separations=None, rtol=1e-12):
    """Fit the smallest C with ``y(t_{k+1}) >= y(t_k) e^{-C dt}``, y = 1 - ln Q.

    Over each sample interval the comparison ODE ``y' = -C y`` gives
    ``C_k = -ln(y_{k+1} / y_k) / dt_k``; C is the largest of these (and at
    least 0), so the envelope holds at every sample up to rounding.
    """
    t = np.asarray(times, dtype=float)
    q = np.asarray(q_values, dtype=float)
    if len(t) != len(q) or len(t) == 0:
        raise ValueError("times and q_values must be nonempty and of equal length")
    if np.any(np.diff(t) <= 0):
        raise ValueError("times must be strictly increasing")
    if separations is not None and np.any(np.asarray(separations) > REGIME_LIMIT):
        raise RegimeViolated("sup separation exceeds 1/e on the fitted window")
    if np.all(q == 0):
        return GronwallFit(0.0, True, exact_uniqueness=True)
    if np.any(q <= 0):
        raise NonPositiveQ("Q must be positive on the fitted window")
    if np.any(q > REGIME_LIMIT):
        raise RegimeViolated("Q exceeds 1/e on the fitted window")
    y = 1.0 - np.log(q)
    if len(t) == 1:
        return GronwallFit(0.0, True)
    rates = -np.log(y[1:] / y[:-1]) / np.diff(t)
    c = max(0.0, float(rates.max()))
    env = gronwall_envelope(t, q[0], c, t[0])
    ok = bool(np.all(q <= env * (1.0 + rtol)))
    return GronwallFit(c, ok)


# -- field differences vs W2 ------------------------------------------------------


@dataclass(frozen=True)
class FieldDifferenceReport:
    ratio_phi: float
    ratio_a: float
    ratio_last: float
    w2: float
    grid_n: int
    degenerate: bool = False


def _midpoint_grid(lo, hi, n):
    h = (hi - lo) / n
    axes = [lo[k] + (np.arange(n) + 0.5) * h[k] for k in range(3)]
    g = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    return g, float(np.prod(h))


def _grad_fields(ens, state, probes, eps, chunk=1024):
    v = current_velocity(ens, state.values)
    gphi = np.empty((len(probes), 3))
    ga = np.empty((len(probes), 3, 3))
    for i in range(0, len(probes), chunk):
        pairs = Pairs(probes[i : i + chunk], ens.x, ens.w, eps)
        gphi[i : i + chunk] = pairs.grad_phi()
        ga[i : i + chunk] = pairs.grad_kernel(v)
    return gphi, ga


def field_difference_vs_w2(ens1, ens2, grid_n=32, eps=0.05, tol=1e-10, damping=0.75):
    """L2 differences of grad Phi and grad A (midpoint rule on ``grid_n^3`` cells of
    the union bounding box of positions) over W2, and the rho_1 weighted
    ``sum w_i |A1(x_i) - A2(x_i)|^2`` over W2^2.  0/0 is reported as 0 with
    ``degenerate=True``.
    """
    plan = w2_exact(ens1, ens2)
    w2 = plan.w2
    if w2 == 0.0:
        return FieldDifferenceReport(0.0, 0.0, 0.0, 0.0, grid_n, degenerate=True)
    s1 = solve_vector_potential(ens1, eps, tol, damping=damping)
    s2 = solve_vector_potential(ens2, eps, tol, damping=damping)
    lo = np.minimum(ens1.x.min(axis=0), ens2.x.min(axis=0))
    hi = np.maximum(ens1.x.max(axis=0), ens2.x.max(axis=0))
    probes, dv = _midpoint_grid(lo, hi, grid_n)
    gphi1, ga1 = _grad_fields(ens1, s1, probes, eps)
    gphi2, ga2 = _grad_fields(ens2, s2, probes, eps)
    l2_phi = math.sqrt(math.fsum(np.sum((gphi1 - gphi2) ** 2, axis=1)) * dv)
    l2_a = math.sqrt(math.fsum(np.sum((ga1 - ga2) ** 2, axis=(1, 2))) * dv)
    a2_at_1 = vector_potential_at(s2, ens2, ens1.x, eps)
    last = math.fsum(ens1.w * np.sum((s1.values - a2_at_1) ** 2, axis=1))
    return FieldDifferenceReport(l2_phi / w2, l2_a / w2, last / (w2 * w2), w2, grid_n)


def jitter_positions(ens, delta, seed=0):
    """Move every position by exactly ``delta`` in an independent uniform direction."""
    rng = np.random.default_rng(seed)
    u = rng.normal(size=(len(ens), 3))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    return Ensemble(ens.x + delta * u, ens.p, ens.w, ens.time)


# -- uniqueness experiment ----------------------------------------------------------


@dataclass(frozen=True)
class PerturbSpec:
    """How the second run differs from the first.

    none: identical rerun.  dt-halving: second run uses dt / 2.
    fp-tol: second run tightens the fixed-point tolerance by ``tol_factor``.
    jitter: second run starts from positions moved by ``delta``.
    """

    kind: str = "none"
    delta: float = 0.0
    tol_factor: float = 10.0

    def __post_init__(self):
        if self.kind not in PERTURBATIONS:
            raise ValueError(f"unknown perturbation {self.kind!r}; expected one of {PERTURBATIONS}")
        if self.kind == "jitter" and not self.delta > 0:
            raise ValueError("jitter needs delta > 0")
        if not self.tol_factor > 1:
            raise ValueError("tol_factor must exceed 1")

    def to_json(self):
        out = {"kind": self.kind}
        if self.kind == "jitter":
            out["delta"] = self.delta
        if self.kind == "fp-tol":
            out["tol_factor"] = self.tol_factor
        return out


def _second_run(f0, cfg, spec):
    if spec.kind == "jitter":
        return jitter_positions(f0, spec.delta, cfg.seed), cfg
    if spec.kind == "dt-halving":
        return f0, cfg.replace(dt=cfg.dt / 2, record_every=2 * cfg.record_every)
    if spec.kind == "fp-tol":
        return f0, cfg.replace(fp_tol=cfg.fp_tol / spec.tol_factor)
    return f0, cfg


def _run_pair(jobs, threads):
    if threads == 1:
        return [run(f, c) for f, c in jobs]
    with ThreadPoolExecutor(max_workers=threads or None) as pool:
        return list(pool.map(lambda fc: run(*fc), jobs))


def _aligned_indices(traj1, traj2):
    """Snapshot index pairs (k, j) with matching times."""
    t2 = np.asarray(traj2.times)
    out = []
    for k, t in enumerate(traj1.times):
        j = int(np.argmin(np.abs(t2 - t)))
        if abs(t2[j] - t) <= 1e-9 * max(1.0, abs(t)):
            out.append((k, j))
    if not out:
        raise LabelMismatch("trajectories share no snapshot times")
    return out


def trace_from_trajectories(traj1, traj2, perturbation):
    """Q, W2 and regime flags at the snapshot times both trajectories recorded, then the fit."""
    _check_labels(traj1, traj2)
    w = traj1.initial.w
    times, qs, w2s, seps, flags = [], [], [], [], []
    for k, j in _aligned_indices(traj1, traj2):
        e1, e2 = traj1.at(k), traj2.at(j)
        d = label_distance(e1, e2)
        times.append(traj1.snapshots[k][0])
        qs.append(0.5 * math.fsum(w * d * d))
        w2s.append(w2_exact(e1, e2).w2)
        seps.append(float(d.max()))
        flags.append(bool(d.max() <= REGIME_LIMIT))
    fit, window = _fit_window(times, qs, flags)
    return StabilityTrace(
        times, qs, w2s, seps, flags, fit.c, fit.bound_satisfied,
        perturbation, fit.exact_uniqueness, window,
    )


def _fit_window(times, qs, flags):
    """Fit on the leading regime-valid stretch, starting at the first positive Q."""
    end = len(flags)
    for k, ok in enumerate(flags):
        if not ok:
            end = k
            break
    q = np.asarray(qs[:end])
    if end == 0:
        return GronwallFit(0.0, False), (0, 0)
    if np.all(q == 0):
        return GronwallFit(0.0, True, exact_uniqueness=True), (0, end)
    start = int(np.flatnonzero(q > 0)[0])
    if np.any(q[start:] <= 0):
        # Q returned to 0 after being positive: fit only up to that point
        end = start + int(np.flatnonzero(q[start:] <= 0)[0])
    return gronwall_fit(times[start:end], qs[start:end]), (start, end)


def uniqueness_experiment(f0, cfg, perturbation, threads=0, reference=None):
    """Run f0 under ``cfg`` and a perturbed second run; return the stability trace.

    ``reference`` may supply an already computed run of ``f0`` under ``cfg``.
    """
    f0b, cfg_b = _second_run(f0, cfg, perturbation)
    if reference is None:
        traj1, traj2 = _run_pair([(f0, cfg), (f0b, cfg_b)], threads)
    else:
        traj1, traj2 = reference, run(f0b, cfg_b)
    return trace_from_trajectories(traj1, traj2, perturbation.to_json())


def order_table(finals, dts):
    """Rows ``{dt, terminal_w2_to_next, ratio}`` from terminal ensembles at successive dt."""
    levels = len(finals)
    w2s = [w2_exact(finals[k], finals[k + 1]).w2 for k in range(levels - 1)] + [None]
    rows = []
    for k in range(levels):
        nxt = w2s[k + 1] if k + 1 < levels else None
        ratio = w2s[k] / nxt if (w2s[k] is not None and nxt) else None
        rows.append({"dt": dts[k], "terminal_w2_to_next": w2s[k], "ratio": ratio})
    return rows


def dt_halving_study(f0, cfg, levels=3, threads=0):
    """Terminal W2 between runs at dt, dt/2, dt/4, ...; one table row per level.

    Row k holds W2(f_k(t_end), f_{k+1}(t_end)) and its ratio to the next row's
    value (null where undefined).
    """
    if levels < 2:
        raise ValueError("need at least two levels")
    cfgs = [cfg.replace(dt=cfg.dt / 2**k) for k in range(levels)]
    finals = [t.final for t in _run_pair([(f0, c) for c in cfgs], threads)]
    return order_table(finals, [c.dt for c in cfgs])


# -- export -----------------------------------------------------------------------


def export_trace(trace, outdir, extra=None):
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    with open(outdir / "trace.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["t", "Q", "W2", "regime_valid"])
        for t, q, w, ok in zip(trace.times, trace.q_values, trace.w2_values, trace.regime_flags):
            writer.writerow([repr(float(t)), repr(float(q)), repr(float(w)), "true" if ok else "false"])
    summary = trace.summary()
    if extra:
        summary.update(extra)
    with open(outdir / "trace.json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2)
        fh.write("\n")
    return summary
