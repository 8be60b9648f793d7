"""Charge moments, scalar potential, and the self-consistent vector potential.

Sums run over source particles by direct summation with the softened kernels
of :mod:`vdarwin.kernels`.  Probe evaluations are chunked with a fixed chunk
size so results do not depend on how the work is split.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    AprioriBoundViolated,
    DegenerateKernel,
    EmptyEnsemble,
    NoConvergence,
    QuadratureTooCoarse,
)
from .kernels import pallard_constant, velocity

PROBE_CHUNK = 1024


@dataclass(frozen=True)
class DensityEstimate:
    l1_norm: float
    linf_norm: float
    cell_size: float


@dataclass(frozen=True)
class VectorPotentialState:
    """Converged A at the source positions plus solve metadata."""

    values: np.ndarray
    residual: float
    iterations: int
    cbar: float
    eps: float
    tol: float
    iterate_norms: tuple = ()
    residuals: tuple = ()

    def to_json(self):
        return {
            "residual": self.residual,
            "iterations": self.iterations,
            "cbar": self.cbar,
            "eps": self.eps,
            "tol": self.tol,
        }


def default_cell_size(ens):
    return 2.0 * ens.support_radius / 16.0


def charge_density_norms(ens, cell_size=None):
    """L1 norm (exact total weight) and a histogram L-infinity estimate of rho.

    Cells are cubes of side ``cell_size`` on a lattice anchored at the origin.
    """
    if len(ens) == 0:
        raise EmptyEnsemble("empty ensemble")
    if cell_size is None:
        cell_size = default_cell_size(ens)
    if not cell_size > 0:
        raise ValueError("cell_size must be positive")
    idx = np.floor(ens.x / cell_size).astype(np.int64)
    _, inverse = np.unique(idx, axis=0, return_inverse=True)
    cell_weight = np.bincount(inverse.reshape(-1), weights=ens.w)
    return DensityEstimate(
        l1_norm=math.fsum(ens.w),
        linf_norm=float(cell_weight.max() / cell_size**3),
        cell_size=float(cell_size),
    )


def apriori_bound(density):
    """C-bar = 3 (4 pi)^(1/3) |rho|_1^(2/3) |rho|_inf^(1/3)."""
    return 2.0 * pallard_constant(1) * density.l1_norm ** (2 / 3) * density.linf_norm ** (1 / 3)


def gradient_bound(density):
    """Sup bound used for the gradients of Phi and A (6 C(2,1,inf) l1^(1/3) linf^(2/3))."""
    return 6.0 * pallard_constant(2) * density.l1_norm ** (1 / 3) * density.linf_norm ** (2 / 3)


class Pairs:
    """Pairwise geometry between targets (M, 3) and weighted sources (N, 3).

    Coordinates are shifted to the source centroid so that sums expanded
    into matrix products stay translation invariant.
    """

    def __init__(self, targets, sources, w, eps):
        sources = np.asarray(sources, dtype=float).reshape(-1, 3)
        center = sources.mean(axis=0)
        targets = np.asarray(targets)
        if not np.iscomplexobj(targets):
            targets = targets.astype(float)
        # complex targets are allowed for complex-step derivatives
        self.xt = targets.reshape(-1, 3) - center
        self.ys = sources - center
        self.eps = eps
        self.w = np.asarray(w, dtype=float)
        xt, ys = self.xt.T.copy(), self.ys.T.copy()
        s = np.subtract.outer(xt[0], ys[0])
        s *= s
        for k in (1, 2):
            dk = np.subtract.outer(xt[k], ys[k])
            dk *= dk
            s += dk
        if eps == 0 and np.any(s == 0):
            raise DegenerateKernel("probe coincides with a source and eps=0")
        s += eps * eps
        np.sqrt(s, out=s)
        self.s = s
        self.w_inv_s = np.divide(self.w, s)
        np.add(s, eps, out=dk)
        dk *= dk
        dk *= s
        np.divide(self.w, dk, out=dk)
        self.w_gamma = dk
        self._w_inv_s3 = None
        self._w_g1 = None

    @property
    def w_inv_s3(self):
        if self._w_inv_s3 is None:
            out = np.multiply(self.s, self.s)
            np.divide(self.w_inv_s, out, out=out)
            self._w_inv_s3 = out
        return self._w_inv_s3

    @property
    def w_g1(self):
        if self._w_g1 is None:
            s, eps = self.s, self.eps
            den = np.add(s, eps)
            den *= s
            den *= s
            num = np.multiply(s, -3.0)
            num -= eps
            num *= self.w_gamma
            num /= den
            self._w_g1 = num
        return self._w_g1

    def phi(self):
        return self.w_inv_s.sum(axis=1)

    def grad_phi(self):
        # grad_x sum w/s = sum w (y - x) / s^3
        r = self.w_inv_s3 @ np.hstack([self.ys, np.ones((len(self.ys), 1))])
        return r[:, :3] - self.xt * r[:, 3:4]

    def apply_kernel(self, v):
        """``1/2 sum_i w_i K(x_j, y_i) v_i`` for source vectors v (N, 3).

        The d (x) d part is expanded with d = y_i - x_j into one matrix product.
        """
        y, x = self.ys, self.xt
        a = np.einsum("ik,ik->i", y, v)
        vy = (v[:, :, None] * y[:, None, :]).reshape(-1, 9)
        b = np.hstack([a[:, None] * y, a[:, None], vy, v])
        r = self.w_gamma @ b
        out = self.w_inv_s @ v
        out += r[:, 0:3]
        out -= x * r[:, 3:4]
        out -= np.einsum("jl,jlk->jk", x, r[:, 4:13].reshape(-1, 3, 3))
        out += x * np.einsum("jl,jl->j", x, r[:, 13:16])[:, None]
        return 0.5 * out

    def grad_kernel(self, v):
        """Matrix ``G[j, k, i] = d/dx_k of (1/2 sum w K v)_i`` at each target.

        With d = y - x the per-pair derivative contracted with v is
        ``-[-d_k v_i / s^3 + g1 (d.v) d_k d_i + gamma (d.v) delta_ki + gamma d_i v_k]``;
        every sum over sources is expanded into matrix products.
        """
        y, x = self.ys, self.xt
        n = len(y)
        a = np.einsum("ik,ik->i", y, v)
        yv = (y[:, :, None] * v[:, None, :]).reshape(n, 9)  # [k, i] = y_k v_i

        # -sum W3 d_k v_i
        r3 = self.w_inv_s3 @ np.hstack([yv, v])
        t1 = r3[:, :9].reshape(-1, 3, 3) - x[:, :, None] * r3[:, None, 9:12]
        inner = -t1

        # gamma terms: sum G d_i v_k (transposed into [k, i]) and delta_ki sum G (d.v)
        rg = self.w_gamma @ np.hstack([yv, v, a[:, None]])
        s_yv = rg[:, :9].reshape(-1, 3, 3)  # [i, k] = sum G y_i v_k
        s_v = rg[:, 9:12]
        t4 = s_yv - x[:, :, None] * s_v[:, None, :]  # [i, k]
        inner += np.swapaxes(t4, 1, 2)
        dv_sum = rg[:, 12] - np.einsum("jl,jl->j", x, s_v)
        inner += dv_sum[:, None, None] * np.eye(3)

        # g1 (d.v) d_k d_i with d.v = a - x.v
        q = np.hstack([a[:, None], v])  # per-source scalars q_0 = a, q_{1+l} = v_l
        yy = (y[:, :, None] * y[:, None, :]).reshape(n, 9)
        cols = np.hstack([q, (q[:, :, None] * y[:, None, :]).reshape(n, 12),
                          (q[:, :, None] * yy[:, None, :]).reshape(n, 36)])
        r1 = self.w_g1 @ cols
        q0 = r1[:, 0:4]
        q1 = r1[:, 4:16].reshape(-1, 4, 3)
        q2 = r1[:, 16:52].reshape(-1, 4, 3, 3)
        # sum g1 q (y_k - x_k)(y_i - x_i) for each q
        quad = (
            q2
            - x[:, None, :, None] * q1[:, :, None, :]
            - q1[:, :, :, None] * x[:, None, None, :]
            + q0[:, :, None, None] * (x[:, :, None] * x[:, None, :])[:, None]
        )
        inner += quad[:, 0] - np.einsum("jl,jlki->jki", x, quad[:, 1:])
        return -0.5 * inner

    def grad_kernel_direct(self, v):
        d = [self.ys[None, :, k] - self.xt[:, k, None] for k in range(3)]
        m = d[0].shape[0]
        dv = d[0] * v[:, 0] + d[1] * v[:, 1] + d[2] * v[:, 2]
        c2 = self.w_g1 * dv
        c3 = (self.w_gamma * dv).sum(axis=1)
        out = np.empty((m, 3, 3))
        for k in range(3):
            out[:, k, :] = (-self.w_inv_s3 * d[k]) @ v
        for i in range(3):
            out[:, :, i] += (self.w_gamma * d[i]) @ v
        for k in range(3):
            ck = c2 * d[k]
            for i in range(k, 3):
                t2 = (ck * d[i]).sum(axis=1)
                out[:, k, i] += t2
                if i != k:
                    out[:, i, k] += t2
            out[:, k, k] += c3
        return -0.5 * out


def _probe_array(x):
    x = np.asarray(x, dtype=float)
    return x.reshape(-1, 3), x.ndim == 1


def _chunked(x, fn):
    pts, single = _probe_array(x)
    parts = [fn(pts[i : i + PROBE_CHUNK]) for i in range(0, len(pts), PROBE_CHUNK)]
    out = np.concatenate(parts, axis=0)
    return out[0] if single else out


def scalar_potential(ens, x, eps=0.0):
    """``Phi(x) = sum_i w_i / sqrt(|y_i - x|^2 + eps^2)`` at one or many probes."""
    return _chunked(x, lambda pts: Pairs(pts, ens.x, ens.w, eps).phi())


def grad_scalar_potential(ens, x, eps=0.0):
    return _chunked(x, lambda pts: Pairs(pts, ens.x, ens.w, eps).grad_phi())


def current_velocity(ens, values):
    """Relativistic velocity ``v(p - A)`` of each source particle."""
    return velocity(ens.p - values)


def solve_vector_potential(
    ens, eps, tol=1e-10, max_iter=500, damping=1.0, initial=None, strict=False, pairs=None
):
    """Picard iteration ``A <- T[A]`` on the values of A at the source positions.

    Starts from ``initial`` (default zero).  Every iterate's sup norm is
    recorded in ``iterate_norms``; with ``strict=True`` an iterate exceeding
    C-bar raises :class:`AprioriBoundViolated`.  ``damping`` in (0, 1] blends
    each update with the previous iterate.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    if not eps > 0:
        raise ValueError("the discrete fixed point needs eps > 0")
    if not 0 < damping <= 1:
        raise ValueError("damping must lie in (0, 1]")
    if pairs is None:
        pairs = Pairs(ens.x, ens.x, ens.w, eps)
    cbar = apriori_bound(charge_density_norms(ens))
    a = np.zeros((len(ens), 3)) if initial is None else np.array(initial, dtype=float)
    norms, residuals = [], []
    residual = math.inf
    for k in range(1, max_iter + 1):
        a_new = pairs.apply_kernel(velocity(ens.p - a))
        if damping < 1:
            a_new = (1 - damping) * a + damping * a_new
        residual = float(np.max(np.linalg.norm(a_new - a, axis=1)))
        sup = float(np.max(np.linalg.norm(a_new, axis=1)))
        norms.append(sup)
        residuals.append(residual)
        if strict and sup > cbar + 1e-9:
            raise AprioriBoundViolated(f"iterate {k}: sup|A| = {sup} > C-bar = {cbar}")
        a = a_new
        if residual <= tol:
            a.flags.writeable = False
            return VectorPotentialState(
                a, residual, k, cbar, float(eps), float(tol), tuple(norms), tuple(residuals)
            )
    raise NoConvergence(residual, max_iter)


def vector_potential_at(state, ens, x, eps=None):
    """Evaluate A at arbitrary probes from a converged state."""
    eps = state.eps if eps is None else eps
    v = current_velocity(ens, state.values)
    return _chunked(x, lambda pts: Pairs(pts, ens.x, ens.w, eps).apply_kernel(v))


def grad_vector_potential(state, ens, x, eps=None):
    """Matrix gradient with entry ``[k, i] = d A_i / d x_k`` (column i is grad A^i)."""
    eps = state.eps if eps is None else eps
    v = current_velocity(ens, state.values)
    return _chunked(x, lambda pts: Pairs(pts, ens.x, ens.w, eps).grad_kernel(v))


# -- numerical verifiers ---------------------------------------------------------


@dataclass(frozen=True)
class BumpSpec:
    """Polynomial bump ``(1 - |x - center|^2 / radius^2)^4`` on the ball, 0 outside."""

    center: tuple
    radius: float = 1.0


@dataclass(frozen=True)
class QuadSpec:
    """Midpoint rule with cell size ``h`` on the cube around the bump."""

    h: float = 0.05
    max_discrepancy: float = 0.1


@dataclass(frozen=True)
class IdentityReport:
    lhs: np.ndarray
    rhs: np.ndarray
    discrepancy: float
    h: float

    @property
    def trace_gap(self):
        return abs(np.trace(self.lhs) - np.trace(self.rhs))


def _bump_derivatives(bump, x):
    """Second derivatives ``[n, i, k]`` and Laplacian of the bump at points x."""
    r = bump.radius
    u = x - np.asarray(bump.center, dtype=float)
    q = np.sum(u * u, axis=1) / r**2
    inside = q < 1
    a = np.where(inside, 1.0 - q, 0.0)
    hess = -8.0 * (a**3 / r**2)[:, None, None] * np.eye(3)
    hess += 48.0 * (a**2 / r**4)[:, None, None] * (u[:, :, None] * u[:, None, :])
    lap = -24.0 * a**3 / r**2 + 48.0 * q * a**2 / r**2
    return hess, np.where(inside, lap, 0.0)


def verify_kernel_identity(bump, y, quad=QuadSpec()):
    """Both sides of ``int Lap phi (delta_ik - w_i w_k) / |y - x| = 2 int d_k d_i phi / |y - x|``.

    ``w = (y - x) / |y - x|``.  The midpoint grid is centered on the bump; a
    cell center that coincides with y is dropped (the integrand is integrable
    there).  ``discrepancy`` is the largest entrywise gap relative to the
    largest right-hand-side entry.
    """
    h = quad.h
    if not h > 0:
        raise ValueError("quadrature cell size must be positive")
    r = bump.radius
    n = int(math.ceil(2 * r / h - 1e-12))
    offs = (np.arange(n) + 0.5 - n / 2) * h
    center = np.asarray(bump.center, dtype=float)
    y = np.asarray(y, dtype=float)
    lhs = np.zeros((3, 3))
    rhs = np.zeros((3, 3))
    # slab by slab to bound memory
    for ox in offs:
        g = np.stack(np.meshgrid([ox], offs, offs, indexing="ij"), axis=-1).reshape(-1, 3) + center
        hess, lap = _bump_derivatives(bump, g)
        keep = np.abs(lap) + np.abs(hess).sum(axis=(1, 2)) > 0
        g, hess, lap = g[keep], hess[keep], lap[keep]
        d = y - g
        dist = np.linalg.norm(d, axis=1)
        ok = dist > 1e-9 * h
        g, hess, lap, d, dist = g[ok], hess[ok], lap[ok], d[ok], dist[ok]
        om = d / dist[:, None]
        wl = lap / dist
        lhs += np.sum(wl) * np.eye(3) - np.einsum("n,ni,nk->ik", wl, om, om)
        rhs += 2.0 * np.einsum("nik,n->ik", hess, 1.0 / dist)
    lhs *= h**3
    rhs *= h**3
    scale = np.abs(rhs).max()
    disc = float(np.abs(lhs - rhs).max() / scale) if scale > 0 else float(np.abs(lhs - rhs).max())
    report = IdentityReport(lhs, rhs, disc, h)
    if disc > quad.max_discrepancy:
        raise QuadratureTooCoarse(f"relative discrepancy {disc:.3g} at h={h}")
    return report


@dataclass(frozen=True)
class BoundsReport:
    sup_phi: float
    sup_a: float
    sup_grad_a: float
    sup_grad_phi: float
    bound_phi: float
    bound_a: float
    bound_grad: float
    log_lipschitz_ratio: float
    log_lipschitz_ratio_a: float
    pair_count: int

    @property
    def bounds_hold(self):
        return (
            self.sup_phi <= self.bound_phi
            and self.sup_a <= self.bound_a
            and self.sup_grad_a <= self.bound_grad
            and self.sup_grad_phi <= self.bound_grad
        )


def _probe_fields(ens, state, x, eps):
    v = current_velocity(ens, state.values)

    def fn(pts):
        pr = Pairs(pts, ens.x, ens.w, eps)
        return np.hstack([
            pr.phi()[:, None], pr.apply_kernel(v), pr.grad_kernel(v).reshape(-1, 9), pr.grad_phi()
        ])

    out = _chunked(x, fn)
    return out[:, 0], out[:, 1:4], out[:, 4:13].reshape(-1, 3, 3), out[:, 13:16]


def verify_potential_bounds(ens, state, probes, eps=None, pair_count=1000, seed=0, max_sep=0.5):
    """Sup norms of Phi, A, grad A, grad Phi over probes against the explicit bounds,
    and the empirical log-Lipschitz ratio over random probe pairs.

    Pairs are ``(x, x + r u)`` with x drawn from the probes, u a random unit
    vector and r uniform in (0, max_sep].  The ratio is
    ``(|dA| + |d grad A| + |d grad Phi|) / (-r ln r)`` with sup norms.
    """
    eps = state.eps if eps is None else eps
    probes = np.asarray(probes, dtype=float).reshape(-1, 3)
    dens = charge_density_norms(ens)
    phi, a, ga, gphi = _probe_fields(ens, state, probes, eps)

    rng = np.random.default_rng(seed)
    x = probes[rng.integers(0, len(probes), pair_count)]
    u = rng.normal(size=(pair_count, 3))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    r = max_sep * (1.0 - rng.random(pair_count))
    z = x + r[:, None] * u
    _, a1, ga1, gp1 = _probe_fields(ens, state, x, eps)
    _, a2, ga2, gp2 = _probe_fields(ens, state, z, eps)
    modulus = -r * np.log(r)
    da = np.abs(a1 - a2).max(axis=1) + np.abs(ga1 - ga2).max(axis=(1, 2))
    dphi = np.abs(gp1 - gp2).max(axis=1)
    return BoundsReport(
        sup_phi=float(np.abs(phi).max()),
        sup_a=float(np.abs(a).max()),
        sup_grad_a=float(np.abs(ga).max()),
        sup_grad_phi=float(np.abs(gphi).max()),
        bound_phi=pallard_constant(1) * dens.l1_norm ** (2 / 3) * dens.linf_norm ** (1 / 3),
        bound_a=apriori_bound(dens),
        bound_grad=gradient_bound(dens),
        log_lipschitz_ratio=float(np.max((da + dphi) / modulus)),
        log_lipschitz_ratio_a=float(np.max(da / modulus)),
        pair_count=pair_count,
    )
