"""Characteristic flow of the Vlasov-Darwin system for a particle ensemble.

Each particle follows ``x' = v(p - A(x))``, ``p' = -grad Phi + sum_i v_i grad A^i``
with the fields re-solved from the current ensemble at every RK4 stage.
Passive tracers can be carried along; they feel the fields but do not
source them.
"""

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .ensemble import Ensemble, read_csv, write_csv
from .errors import InvalidSpec, NoConvergence
from .fields import Pairs, current_velocity, solve_vector_potential
from .kernels import velocity


@dataclass(frozen=True)
class FlowConfig:
    dt: float = 0.01
    t_end: float = 1.0
    eps: float = 0.05
    fp_tol: float = 1e-10
    fp_max_iter: int = 500
    seed: int = 0
    record_every: int = 1
    damping: float = 0.75

    def __post_init__(self):
        if not self.dt > 0:
            raise InvalidSpec("dt must be positive")
        if self.t_end < 0 or (self.t_end > 0 and self.dt > self.t_end * (1 + 1e-12)):
            raise InvalidSpec("need 0 <= t_end and dt <= t_end")
        if not self.eps > 0:
            raise InvalidSpec("eps must be positive")
        if not self.fp_tol > 0:
            raise InvalidSpec("fp_tol must be positive")
        if self.fp_max_iter < 1 or self.record_every < 1:
            raise InvalidSpec("fp_max_iter and record_every must be >= 1")
        if not 0 < self.damping <= 1:
            raise InvalidSpec("damping must lie in (0, 1]")

    @property
    def n_steps(self):
        n = round(self.t_end / self.dt)
        if abs(n * self.dt - self.t_end) > 1e-9 * max(1.0, self.t_end):
            raise InvalidSpec(f"t_end={self.t_end} is not a multiple of dt={self.dt}")
        return n

    def replace(self, **kw):
        return FlowConfig(**{**asdict(self), **kw})


@dataclass
class Trajectory:
    snapshots: list
    initial: Ensemble
    config: FlowConfig
    step_meta: list = field(default_factory=list)

    @property
    def times(self):
        return [t for t, _ in self.snapshots]

    @property
    def final(self):
        return self.snapshots[-1][1]

    def at(self, index):
        return self.snapshots[index][1]


@dataclass
class _Stage:
    """Fields at one RK stage: source derivatives plus tracer derivatives."""

    xdot: np.ndarray
    pdot: np.ndarray
    a: np.ndarray
    iterations: int
    residual: float
    txdot: np.ndarray = None
    tpdot: np.ndarray = None


def _drive(pairs, v_src, p_probe, a_probe=None):
    """Velocity and momentum drive at the targets of ``pairs``."""
    if a_probe is None:
        a_probe = pairs.apply_kernel(v_src)
    v = velocity(p_probe - a_probe)
    grad_a = pairs.grad_kernel(v_src)
    pdot = -pairs.grad_phi() + np.einsum("jki,ji->jk", grad_a, v)
    return v, pdot


def force_field(ens, state, z, eps=None):
    """Phase-space vector field G = (v_A, -grad Phi + v_A^i grad A^i) at probes z = (x, p)."""
    eps = state.eps if eps is None else eps
    x, p = (np.asarray(c, dtype=float) for c in z)
    single = x.ndim == 1
    x, p = x.reshape(-1, 3), p.reshape(-1, 3)
    pairs = Pairs(x, ens.x, ens.w, eps)
    v, pdot = _drive(pairs, current_velocity(ens, state.values), p)
    return (v[0], pdot[0]) if single else (v, pdot)


def _stage(x, p, w, cfg, a_guess, tracers=None):
    ens = Ensemble(x, p, w)
    pairs = Pairs(x, x, w, cfg.eps)
    state = solve_vector_potential(
        ens, cfg.eps, cfg.fp_tol, cfg.fp_max_iter, cfg.damping, initial=a_guess, pairs=pairs
    )
    v_src = current_velocity(ens, state.values)
    # at the sources A(x_j) is the solved value itself
    xdot, pdot = _drive(pairs, v_src, p, a_probe=state.values)
    out = _Stage(xdot, pdot, state.values, state.iterations, state.residual)
    if tracers is not None:
        tx, tp = tracers
        out.txdot, out.tpdot = _drive(Pairs(tx, x, w, cfg.eps), v_src, tp)
    return out


def _rk4(x, p, w, dt, cfg, a_guess, tracers=None):
    """One classical RK4 step; returns new (x, p), tracers, last A, and solve stats."""
    iters = []
    resid = []

    def shifted(base, k, h):
        return None if base is None else (base[0] + h * k.txdot, base[1] + h * k.tpdot)

    k1 = _stage(x, p, w, cfg, a_guess, tracers)
    k2 = _stage(x + 0.5 * dt * k1.xdot, p + 0.5 * dt * k1.pdot, w, cfg, k1.a, shifted(tracers, k1, 0.5 * dt))
    k3 = _stage(x + 0.5 * dt * k2.xdot, p + 0.5 * dt * k2.pdot, w, cfg, k2.a, shifted(tracers, k2, 0.5 * dt))
    k4 = _stage(x + dt * k3.xdot, p + dt * k3.pdot, w, cfg, k3.a, shifted(tracers, k3, dt))
    ks = (k1, k2, k3, k4)
    for k in ks:
        iters.append(k.iterations)
        resid.append(k.residual)
    x_new = x + dt / 6 * (k1.xdot + 2 * k2.xdot + 2 * k3.xdot + k4.xdot)
    p_new = p + dt / 6 * (k1.pdot + 2 * k2.pdot + 2 * k3.pdot + k4.pdot)
    new_tracers = None
    if tracers is not None:
        new_tracers = (
            tracers[0] + dt / 6 * (k1.txdot + 2 * k2.txdot + 2 * k3.txdot + k4.txdot),
            tracers[1] + dt / 6 * (k1.tpdot + 2 * k2.tpdot + 2 * k3.tpdot + k4.tpdot),
        )
    meta = {"fp_iterations": iters, "fp_residual": max(resid)}
    return x_new, p_new, new_tracers, k4.a, meta


def step(ens, cfg, dt=None, a_guess=None):
    """Advance ``ens`` by one RK4 step (``dt`` may be negative for backward runs)."""
    dt = cfg.dt if dt is None else dt
    try:
        x, p, _, _, _ = _rk4(ens.x, ens.p, ens.w, dt, cfg, a_guess)
    except NoConvergence as exc:
        raise exc.at_time(ens.time)
    return Ensemble(x, p, ens.w, ens.time + dt)


def _integrate(f0, cfg, tracers=None, dt=None):
    dt = cfg.dt if dt is None else dt
    n = cfg.n_steps
    x, p, w = f0.x, f0.p, f0.w
    snapshots = [(f0.time, f0)]
    meta = []
    a = None
    for k in range(1, n + 1):
        try:
            x, p, tracers, a, m = _rk4(x, p, w, dt, cfg, a, tracers)
        except NoConvergence as exc:
            raise exc.at_time(f0.time + (k - 1) * dt)
        meta.append(m)
        if k % cfg.record_every == 0 or k == n:
            t = f0.time + k * dt
            snapshots.append((t, Ensemble(x, p, w, t)))
    return Trajectory(snapshots, f0, cfg, meta), tracers


def run(f0, cfg):
    """Integrate ``f0`` to ``cfg.t_end``; snapshots every ``record_every`` steps and at the end."""
    traj, _ = _integrate(f0, cfg)
    return traj


def run_backward(ens, cfg):
    """Integrate with ``-dt`` for ``cfg.n_steps`` steps (flow inverse check)."""
    traj, _ = _integrate(ens, cfg, dt=-cfg.dt)
    return traj


def flow_with_tracers(f0, cfg, tracers):
    """Run the self-consistent flow and carry passive tracer points z (M, 6) along."""
    tz = np.asarray(tracers)
    if not np.iscomplexobj(tz):
        tz = tz.astype(float)
    traj, (tx, tp) = _integrate(f0, cfg, tracers=(tz[:, :3], tz[:, 3:]))
    return traj, np.hstack([tx, tp])


def volume_preservation_check(traj, sample_count=8, h=None, seed=0, spread=0.02, method="complex-step"):
    """Max ``|det DZ - 1|`` of the flow map at the final time of ``traj``.

    The flow is re-run from ``traj.initial`` with ``traj.config``; see
    :func:`phase_volume_deviation`.
    """
    if len(traj.snapshots) < 2:
        raise ValueError("trajectory needs at least two snapshots")
    dev, _ = phase_volume_deviation(traj.initial, traj.config, sample_count, h, seed, spread, method)
    return dev


def phase_volume_deviation(f0, cfg, sample_count=8, h=None, seed=0, spread=0.02, method="complex-step"):
    """Run ``f0`` with a tracer frame attached; return (max ``|det DZ - 1|``, trajectory).

    Sample points are initial particles jittered by ``spread``.  The Jacobian
    comes from a frame of tracers around each sample pushed through the same
    RK4 stages as the ensemble.  ``method="central"`` uses 12 real tracers
    offset by +/- h (default 1e-4); its O(h^2) truncation error belongs to
    the exact flow and hides the integrator error.  ``method="complex-step"``
    uses 6 tracers offset by ``i h`` (default 1e-30), which differentiates the
    discrete flow to rounding accuracy since every kernel is analytic.
    """
    if method not in ("central", "complex-step"):
        raise ValueError(f"unknown method {method!r}")
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(f0), size=sample_count, replace=sample_count > len(f0))
    centers = f0.z[idx] + rng.normal(0.0, spread, (sample_count, 6))
    if method == "central":
        h = 1e-4 if h is None else h
        offsets = np.vstack([np.eye(6) * h, -np.eye(6) * h])
    else:
        h = 1e-30 if h is None else h
        offsets = 1j * h * np.eye(6)
    frame = (centers[:, None, :] + offsets[None, :, :]).reshape(-1, 6)
    traj, moved = flow_with_tracers(f0, cfg, frame)
    moved = moved.reshape(sample_count, len(offsets), 6)
    if method == "central":
        jac = (moved[:, :6, :] - moved[:, 6:, :]).real / (2 * h)
    else:
        jac = moved.imag / h  # [sample, column k, row]
    dets = np.linalg.det(np.swapaxes(jac, 1, 2))
    return float(np.max(np.abs(dets - 1.0))), traj


def export_trajectory(traj, outdir):
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    for i, (_, ens) in enumerate(traj.snapshots):
        write_csv(ens, outdir / f"t_{i}.csv")
    cfg = traj.config
    meta = {
        "dt": cfg.dt,
        "t_end": cfg.t_end,
        "eps": cfg.eps,
        "fp_tol": cfg.fp_tol,
        "seed": cfg.seed,
        "times": traj.times,
    }
    with open(outdir / "meta.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2)
        fh.write("\n")
    return meta


def load_trajectory(outdir):
    outdir = Path(outdir)
    with open(outdir / "meta.json", encoding="utf-8") as fh:
        meta = json.load(fh)
    snaps = [(t, read_csv(outdir / f"t_{i}.csv", time=t)) for i, t in enumerate(meta["times"])]
    cfg = FlowConfig(
        dt=meta["dt"], t_end=meta["t_end"], eps=meta["eps"], fp_tol=meta["fp_tol"], seed=meta["seed"]
    )
    return Trajectory(snaps, snaps[0][1], cfg)
