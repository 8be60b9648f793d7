"""Weighted phase-space samples, their CSV format, and initial-data families."""

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import EmptyEnsemble, InvalidSpec

CSV_HEADER = ("x1", "x2", "x3", "p1", "p2", "p3", "w")


@dataclass(frozen=True)
class PhaseParticle:
    x: tuple
    p: tuple
    w: float


@dataclass(frozen=True, eq=False)
class Ensemble:
    """Ordered particles ``(x, p, w)`` at a fixed time.

    Arrays are stored read-only.  ``support_radius`` defaults to the smallest R
    with every ``|x| <= R`` and ``|p| <= R``.
    """

    x: np.ndarray
    p: np.ndarray
    w: np.ndarray
    time: float = 0.0
    support_radius: float = None

    def __post_init__(self):
        x = np.array(self.x, dtype=float).reshape(-1, 3)
        p = np.array(self.p, dtype=float).reshape(-1, 3)
        w = np.array(self.w, dtype=float).reshape(-1)
        if len(x) == 0:
            raise EmptyEnsemble("ensemble has no particles")
        if not (len(x) == len(p) == len(w)):
            raise ValueError("x, p, w lengths differ")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(p)) and np.all(np.isfinite(w))):
            raise ValueError("non-finite particle data")
        if np.any(w <= 0):
            raise ValueError("weights must be positive")
        extent = max(np.linalg.norm(x, axis=1).max(), np.linalg.norm(p, axis=1).max())
        R = self.support_radius
        if R is None:
            R = float(extent)
        elif extent > R * (1 + 1e-12) + 1e-15:
            raise ValueError(f"particles outside support radius {R} (extent {extent})")
        for a in (x, p, w):
            a.flags.writeable = False
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "time", float(self.time))
        object.__setattr__(self, "support_radius", float(R))

    def __len__(self):
        return len(self.w)

    def __iter__(self):
        for xi, pi, wi in zip(self.x, self.p, self.w):
            yield PhaseParticle(tuple(xi), tuple(pi), float(wi))

    @property
    def total_weight(self):
        return math.fsum(self.w)

    @property
    def z(self):
        """Phase-space points, shape (N, 6)."""
        return np.hstack([self.x, self.p])

    def replace(self, x=None, p=None, time=None):
        return Ensemble(
            self.x if x is None else x,
            self.p if p is None else p,
            self.w,
            self.time if time is None else time,
        )

    @classmethod
    def from_particles(cls, particles, time=0.0):
        particles = list(particles)
        return cls(
            [q.x for q in particles], [q.p for q in particles], [q.w for q in particles], time
        )

    @classmethod
    def from_z(cls, z, w, time=0.0):
        z = np.asarray(z, dtype=float)
        return cls(z[:, :3], z[:, 3:], w, time)


def write_csv(ens, path):
    path = Path(path)
    data = np.hstack([ens.x, ens.p, ens.w[:, None]])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for row in data:
            writer.writerow([repr(float(v)) for v in row])


def read_csv(path, time=0.0):
    """Read an ensemble CSV; raises OSError for I/O problems, ValueError for bad content."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != CSV_HEADER:
            raise ValueError(f"{path}: expected header {','.join(CSV_HEADER)}")
        rows = [[float(v) for v in row] for row in reader if row]
    if not rows:
        raise EmptyEnsemble(f"{path}: no particles")
    data = np.array(rows)
    if data.shape[1] != 7:
        raise ValueError(f"{path}: expected 7 columns")
    return Ensemble(data[:, :3], data[:, 3:6], data[:, 6], time)


# -- initial data -----------------------------------------------------------

FAMILIES = ("gaussian-ball", "uniform-ball", "two-stream")


def _rejection(rng, n, radius, draw):
    out = np.empty((0, 3))
    while len(out) < n:
        cand = draw(max(2 * (n - len(out)), 16))
        cand = cand[np.linalg.norm(cand, axis=1) <= radius]
        out = np.vstack([out, cand])
    return out[:n]


def _uniform_ball(rng, n, radius):
    def draw(k):
        return rng.uniform(-radius, radius, size=(k, 3))

    return _rejection(rng, n, radius, draw)


def generate(family, n, radius=1.0, momentum_scale=0.5, seed=0, mass=1.0):
    """Sample ``n`` equal-weight particles with ``|x| <= radius`` and ``|p| <= radius``.

    gaussian-ball: x ~ N(0, (radius/2)^2), p ~ N(0, momentum_scale^2), both truncated.
    uniform-ball: x uniform in the ball, p uniform in the ball of radius
    ``min(momentum_scale, radius)``.
    two-stream: x uniform in the ball, p = +/- momentum_scale e1 plus a thermal
    spread of momentum_scale/10, truncated.
    """
    if family not in FAMILIES:
        raise InvalidSpec(f"unknown family {family!r}; expected one of {FAMILIES}")
    if n < 1 or radius <= 0 or momentum_scale < 0 or mass <= 0:
        raise InvalidSpec("need n >= 1, radius > 0, momentum_scale >= 0, mass > 0")
    rng = np.random.default_rng(seed)
    if family == "gaussian-ball":
        x = _rejection(rng, n, radius, lambda k: rng.normal(0.0, radius / 2, (k, 3)))
        p = _rejection(rng, n, radius, lambda k: rng.normal(0.0, momentum_scale, (k, 3)))
    elif family == "uniform-ball":
        x = _uniform_ball(rng, n, radius)
        p = _uniform_ball(rng, n, min(momentum_scale, radius)) if momentum_scale > 0 else np.zeros((n, 3))
    else:
        if momentum_scale >= radius:
            raise InvalidSpec("two-stream needs momentum_scale < radius")
        x = _uniform_ball(rng, n, radius)
        sign = np.where(np.arange(n) % 2 == 0, 1.0, -1.0)

        def draw(k):
            return rng.normal(0.0, momentum_scale / 10, (k, 3))

        spread = _rejection(rng, n, radius - momentum_scale, draw)
        p = spread + momentum_scale * sign[:, None] * np.array([1.0, 0.0, 0.0])
    w = np.full(n, mass / n)
    return Ensemble(x, p, w, 0.0, support_radius=radius)


def reference_ball(n=512, seed=42):
    """The seed-42 Gaussian ball used throughout the tests (R = 1, unit mass)."""
    return generate("gaussian-ball", n, radius=1.0, momentum_scale=0.5, seed=seed)
