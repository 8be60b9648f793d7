"""Pointwise kernels: relativistic velocity map, Darwin matrix kernel and its gradient.

Units have c = 1.  All functions broadcast over leading axes: a "vector" is an
array whose last axis has length 3, a "matrix" has trailing shape (3, 3).

Softening
---------
The Darwin kernel ``[id + w (x) w] / |y - x|`` is singular at ``x = y``.  With
``eps > 0`` we use

    K_eps(x, y) = id / s + d (x) d / (s (s + eps)^2),   d = y - x,  s = sqrt(|d|^2 + eps^2)

which is ``(Lap psi) id - Hess psi`` for the radial potential with
``psi'(r) = r / (s + eps)``.  Any kernel of that form is divergence free in
``x``, so the softened vector potential keeps ``div A = 0`` exactly and its
analytic gradient is the true derivative.  At ``eps = 0`` it is the exact
kernel; for ``eps > 0`` every entry is dominated by the unsoftened entry.
"""

import math

import numpy as np

from .errors import DegenerateKernel, InvalidExponents


def _check_eps(eps):
    if eps < 0 or not math.isfinite(eps):
        raise ValueError(f"softening must be a finite nonnegative length, got {eps}")


def velocity(g):
    """Relativistic velocity ``g / sqrt(1 + |g|^2)``; always strictly slower than light.

    Complex input is passed through analytically (used for complex-step derivatives).
    """
    g = np.asarray(g)
    if not np.iscomplexobj(g):
        g = g.astype(float)
    return g / np.sqrt(1.0 + np.sum(g * g, axis=-1, keepdims=True))


def velocity_jacobian(g):
    """Jacobian ``Dv(g) = [id - g (x) g / (1 + |g|^2)] / sqrt(1 + |g|^2)``."""
    g = np.asarray(g, dtype=float)
    q = 1.0 + np.sum(g * g, axis=-1)[..., None, None]
    outer = g[..., :, None] * g[..., None, :]
    return (np.eye(3) - outer / q) / np.sqrt(q)


def velocity_jacobian_min_eigenvalue(g):
    """Lowest eigenvalue of Dv(g), attained along g: ``(1 + |g|^2)^(-3/2)``."""
    g = np.asarray(g, dtype=float)
    return (1.0 + np.sum(g * g, axis=-1)) ** -1.5


def _separation(x, y, eps):
    d = np.asarray(y, dtype=float) - np.asarray(x, dtype=float)
    r2 = np.sum(d * d, axis=-1)
    if eps == 0 and np.any(r2 == 0):
        raise DegenerateKernel("kernel evaluated at coincident points with eps=0")
    s = np.sqrt(r2 + eps * eps)
    return d, s


def darwin_kernel(x, y, eps=0.0):
    """Darwin matrix kernel K(x, y), shape ``(..., 3, 3)``."""
    _check_eps(eps)
    d, s = _separation(x, y, eps)
    gamma = 1.0 / (s * (s + eps) ** 2)
    outer = d[..., :, None] * d[..., None, :]
    return np.eye(3) / s[..., None, None] + gamma[..., None, None] * outer


def darwin_kernel_gradient(x, y, eps=0.0):
    """Gradient of K in ``x``; entry ``[..., i, m, k] = d K_im / d x_k``.

    At eps = 0 this is ``|y-x|^-2 [d_im w_k - d_km w_i - d_ik w_m + 3 w_i w_k w_m]``.
    """
    _check_eps(eps)
    d, s = _separation(x, y, eps)
    a1 = -1.0 / s**3
    gamma = 1.0 / (s * (s + eps) ** 2)
    g1 = -(3.0 * s + eps) / (s**3 * (s + eps) ** 3)
    eye = np.eye(3)
    a1, gamma, g1 = (v[..., None, None, None] for v in (a1, gamma, g1))
    di = d[..., :, None, None]
    dm = d[..., None, :, None]
    dk = d[..., None, None, :]
    # d/dx = -d/dd
    out = a1 * eye[:, :, None] * dk
    out = out + g1 * di * dm * dk
    out = out + gamma * (eye[:, None, :] * dm + eye[None, :, :] * di)
    return -out


def inf_norm(m):
    """Entrywise sup norm over the trailing two (or three) axes."""
    m = np.asarray(m)
    axes = tuple(range(m.ndim - 2, m.ndim)) if m.ndim >= 2 else None
    return np.max(np.abs(m), axis=axes)


def pallard_constant(m, r=1.0, s=math.inf, constant=None):
    """Constant of the interpolation estimate for the Riesz potential ``|y - x|^-m``.

    Only the endpoint ``(r, s) = (1, inf)`` has an explicit value,
    ``3 (4 pi / m)^(m/3) / (3 - m)``.  For other admissible exponent pairs a
    caller-supplied ``constant`` is passed through; without one the pair is
    rejected.
    """
    if m not in (1, 2):
        raise InvalidExponents(f"m must be 1 or 2, got {m}")
    r0 = 3.0 / (3.0 - m)
    if not (r < r0 < s):
        raise InvalidExponents(f"need r < {r0} < s, got r={r}, s={s}")
    if r == 1 and math.isinf(s):
        return 3.0 * (4.0 * math.pi / m) ** (m / 3.0) / (3.0 - m)
    if constant is None:
        raise InvalidExponents(
            f"no explicit constant for (m, r, s) = ({m}, {r}, {s}); supply one"
        )
    if not constant > 0:
        raise InvalidExponents("supplied constant must be positive")
    return float(constant)
