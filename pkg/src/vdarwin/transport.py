"""Exact discrete Wasserstein-2 transport between equal-weight ensembles.

With equal counts and equal weights the optimal coupling is a permutation, so
W2^2 is an assignment problem under squared Euclidean cost in phase space
R^6.  The solver is scipy's ``linear_sum_assignment``; a brute-force
permutation search is kept alongside as an independent oracle for small N.
"""

import csv
import itertools
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment

from .ensemble import Ensemble
from .errors import SizeMismatch, ThetaOutOfRange, WeightMismatch

WEIGHT_RTOL = 1e-12
BRUTE_FORCE_MAX_N = 9


@dataclass(frozen=True, eq=False)
class TransportPlan:
    """Optimal permutation ``assignment[i] = sigma(i)`` from ``source`` to ``target``."""

    assignment: np.ndarray
    cost: float
    size: int
    source: Ensemble
    target: Ensemble

    @property
    def w2(self):
        return math.sqrt(self.cost)

    def per_particle_cost(self):
        return self.source.w * _squared_displacements(self.source, self.target, self.assignment)

    def to_json(self):
        return {"n": self.size, "cost": self.cost, "w2": self.w2}


@dataclass(frozen=True, eq=False)
class Interpolant:
    theta: float
    ensemble: Ensemble
    source: Ensemble
    target: Ensemble


def _check_pair(a, b):
    if len(a) != len(b):
        raise SizeMismatch(f"ensembles have {len(a)} and {len(b)} particles")
    w0 = a.w[0]
    tol = WEIGHT_RTOL * abs(w0)
    if np.any(np.abs(a.w - w0) > tol) or np.any(np.abs(b.w - w0) > tol):
        raise WeightMismatch("W2 is implemented for equal uniform weights only")


def cost_matrix(a, b):
    """Squared phase-space distances ``C[i, j] = |z_i - z'_j|^2``."""
    d = a.z[:, None, :] - b.z[None, :, :]
    return np.einsum("ijk,ijk->ij", d, d)


def _squared_displacements(a, b, sigma):
    d = b.z[sigma] - a.z
    return np.einsum("ik,ik->i", d, d)


def _plan_cost(a, b, sigma):
    return math.fsum(a.w * _squared_displacements(a, b, sigma))


def _duplicate_groups(z):
    """Index groups of exactly coincident rows (only groups of size >= 2)."""
    _, inverse, counts = np.unique(z, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    return [np.flatnonzero(inverse == g) for g in np.flatnonzero(counts > 1)]


def _canonicalize(sigma, a, b):
    """Among optimal plans that differ by swaps of coincident points, pick the
    lexicographically smallest.

    Swapping the targets of two identical source points (or the sources of two
    identical target points) leaves the cost unchanged; sorting within each
    group resolves those ties.
    """
    sigma = sigma.copy()
    src_groups = _duplicate_groups(a.z)
    tgt_groups = _duplicate_groups(b.z)
    changed = True
    while changed:
        changed = False
        for g in src_groups:
            cols = np.sort(sigma[g])
            if np.any(cols != sigma[g]):
                sigma[g] = cols
                changed = True
        if tgt_groups:
            inv = np.argsort(sigma)
            for g in tgt_groups:
                rows = np.sort(inv[g])
                if np.any(rows != inv[g]):
                    inv[g] = rows
                    changed = True
            sigma = np.argsort(inv)
    return sigma


def w2_exact(a, b):
    """Optimal transport plan between equal-size, equal-weight ensembles."""
    _check_pair(a, b)
    rows, cols = linear_sum_assignment(cost_matrix(a, b))
    sigma = np.empty(len(a), dtype=np.int64)
    sigma[rows] = cols
    sigma = _canonicalize(sigma, a, b)
    sigma.flags.writeable = False
    return TransportPlan(sigma, _plan_cost(a, b, sigma), len(a), a, b)


def w2_bruteforce(a, b):
    """Exhaustive search over all N! permutations (oracle; N <= 9)."""
    _check_pair(a, b)
    n = len(a)
    if n > BRUTE_FORCE_MAX_N:
        raise ValueError(f"brute force limited to N <= {BRUTE_FORCE_MAX_N}")
    c = cost_matrix(a, b)
    perms = np.array(list(itertools.permutations(range(n))), dtype=np.int64)
    totals = c[np.arange(n), perms].sum(axis=1)
    sigma = perms[int(np.argmin(totals))]
    return TransportPlan(sigma, _plan_cost(a, b, sigma), n, a, b)


def w2_batch(pairs, threads=0):
    """Plans for independent ensemble pairs, optionally on a thread pool (0 = auto)."""
    pairs = list(pairs)
    if threads == 1 or len(pairs) < 2:
        return [w2_exact(a, b) for a, b in pairs]
    with ThreadPoolExecutor(max_workers=threads or None) as pool:
        return list(pool.map(lambda ab: w2_exact(*ab), pairs))


def mccann_interpolant(a, plan, theta):
    """Push ``a`` forward by ``T_theta = (2 - theta) id + (theta - 1) T``, theta in [1, 2]."""
    if not 1.0 <= theta <= 2.0:
        raise ThetaOutOfRange(f"theta must lie in [1, 2], got {theta}")
    b = plan.target
    z = (2.0 - theta) * a.z + (theta - 1.0) * b.z[plan.assignment]
    radius = a.support_radius + b.support_radius
    ens = Ensemble(z[:, :3], z[:, 3:], a.w, a.time, support_radius=radius)
    return Interpolant(float(theta), ens, a, b)


def geodesic_velocity(a, plan):
    """Constant per-particle velocity ``z'_sigma(i) - z_i`` along the geodesic, shape (N, 6)."""
    return plan.target.z[plan.assignment] - a.z


def kinetic_energy(a, u):
    """``sum w_i |u_i|^2``, summed the same way as the plan cost."""
    return math.fsum(a.w * np.einsum("ik,ik->i", u, u))


# -- weak continuity equation -------------------------------------------------


def _smooth_step(t):
    """C^2 step: 1 for t <= 0, 0 for t >= 1."""
    t = np.clip(t, 0.0, 1.0)
    return 1.0 - t**3 * (10.0 - 15.0 * t + 6.0 * t * t)


def _smooth_step_deriv(t):
    inside = (t > 0) & (t < 1)
    t = np.clip(t, 0.0, 1.0)
    return np.where(inside, -30.0 * t * t * (1.0 - t) ** 2, 0.0)


@dataclass(frozen=True)
class AffineTest:
    """``(c . z + b) chi(|z|)`` with chi = 1 on the plateau ``|z| <= plateau`` and 0 beyond ``2 plateau``."""

    coef: tuple
    const: float = 0.0
    plateau: float = 10.0

    def _parts(self, z):
        c = np.asarray(self.coef, dtype=float)
        r = np.linalg.norm(z, axis=-1)
        t = r / self.plateau - 1.0
        lin = z @ c + self.const
        return c, r, t, lin

    def value(self, z):
        _, _, t, lin = self._parts(z)
        return lin * _smooth_step(t)

    def grad(self, z):
        c, r, t, lin = self._parts(z)
        chi = _smooth_step(t)[:, None]
        dchi = _smooth_step_deriv(t)[:, None] / self.plateau
        rhat = z / np.maximum(r, 1e-300)[:, None]
        return c[None, :] * chi + lin[:, None] * dchi * rhat


@dataclass(frozen=True)
class BumpTest:
    """``(1 - |z - center|^2 / radius^2)^4`` inside the ball, 0 outside."""

    center: tuple
    radius: float = 1.0

    def value(self, z):
        q = np.sum((z - np.asarray(self.center)) ** 2, axis=-1) / self.radius**2
        return np.where(q < 1, (1.0 - np.minimum(q, 1.0)) ** 4, 0.0)

    def grad(self, z):
        d = z - np.asarray(self.center)
        q = np.sum(d * d, axis=-1) / self.radius**2
        f = np.where(q < 1, -8.0 * (1.0 - np.minimum(q, 1.0)) ** 3 / self.radius**2, 0.0)
        return f[:, None] * d


def continuity_residual(a, plan, theta_grid, test_fn, dtheta=1e-2):
    """Max over the grid of ``|d/dtheta <phi, f_theta> - <grad phi . u, f_theta>|``.

    The theta derivative is a central difference of width ``2 dtheta``;
    particle paths are straight, so the residual is O(dtheta^2).
    """
    theta_grid = np.asarray(theta_grid, dtype=float)
    if len(theta_grid) < 3:
        raise ValueError("need at least three theta values")
    u = geodesic_velocity(a, plan)
    zb = plan.target.z[plan.assignment]

    def path(theta):
        return (2.0 - theta) * a.z + (theta - 1.0) * zb

    worst = 0.0
    for th in theta_grid:
        lhs = (
            math.fsum(a.w * test_fn.value(path(th + dtheta)))
            - math.fsum(a.w * test_fn.value(path(th - dtheta)))
        ) / (2.0 * dtheta)
        rhs = math.fsum(a.w * np.einsum("ik,ik->i", test_fn.grad(path(th)), u))
        worst = max(worst, abs(lhs - rhs))
    return worst


# -- L-infinity bound on the interpolant --------------------------------------


@dataclass(frozen=True)
class DensityBoundReport:
    estimate: float
    endpoint_max: float
    cell_size: float
    slack: float = 2.0

    @property
    def ratio(self):
        return self.estimate / self.endpoint_max

    @property
    def satisfied(self):
        return self.estimate <= self.slack * self.endpoint_max


def phase_density_linf(ens, cell_size):
    """Histogram L-infinity estimate of f on a 6-D lattice anchored at the origin."""
    if not cell_size > 0:
        raise ValueError("cell_size must be positive")
    keys = np.floor(ens.z / cell_size).astype(np.int64)
    _, inverse = np.unique(keys, axis=0, return_inverse=True)
    cells = np.bincount(inverse.reshape(-1), weights=ens.w)
    return float(cells.max() / cell_size**6)


def interpolant_density_bound(interp, cell_size):
    """Compare the histogram sup of f_theta with the larger endpoint estimate."""
    est = phase_density_linf(interp.ensemble, cell_size)
    ends = max(phase_density_linf(interp.source, cell_size), phase_density_linf(interp.target, cell_size))
    return DensityBoundReport(est, ends, float(cell_size))


# -- export --------------------------------------------------------------------


def write_plan_csv(plan, path):
    per = plan.per_particle_cost()
    with open(Path(path), "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["i", "sigma_i", "cost_i"])
        for i, (j, c) in enumerate(zip(plan.assignment, per)):
            writer.writerow([i, int(j), repr(float(c))])


def write_plan_summary(plan, path):
    with open(Path(path), "w", encoding="utf-8") as fh:
        json.dump(plan.to_json(), fh, indent=2)
        fh.write("\n")
