"""Implicit-surface geometry for simulated objects.

Rocks are superellipsoids: smoothly irregular, analytically testable for
inside/outside, with a closed-form volume. Robot parts are unions of boxes,
spheres and cylinders. Every shape supports vectorized ray casting in its
local frame, parametrized so the caller's ray parameter is preserved
(``p(s) = origin + s * direction``; directions need not be unit length).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import beta as beta_fn

from .errors import ValidationError

_MISS = np.inf


def _first_crossing(g_fn, s_lo, s_hi, active, n_samples=48, n_bisect=24):
    """Vectorized first root of g(s) <= 0 on [s_lo, s_hi] for active rays.

    ``g_fn(s, mask)`` evaluates the implicit gap for the masked rays at
    per-ray parameters ``s``. Assumes g > 0 at s_lo for a proper entry hit.
    """
    n = s_lo.shape[0]
    hit_s = np.full(n, _MISS)
    if not np.any(active):
        return hit_s
    idx = np.nonzero(active)[0]
    lo = s_lo[idx].copy()
    hi = s_hi[idx].copy()
    span = hi - lo
    prev = lo.copy()
    found = np.zeros(idx.size, dtype=bool)
    bracket_lo = np.zeros(idx.size)
    bracket_hi = np.zeros(idx.size)
    for i in range(1, n_samples + 1):
        s = lo + span * (i / n_samples)
        todo = ~found
        if not np.any(todo):
            break
        inside = np.zeros(idx.size, dtype=bool)
        inside[todo] = g_fn(s[todo], idx[todo]) <= 0.0
        newly = todo & inside
        bracket_lo[newly] = prev[newly]
        bracket_hi[newly] = s[newly]
        found |= newly
        prev = s
    if not np.any(found):
        return hit_s
    f_idx = np.nonzero(found)[0]
    a = bracket_lo[f_idx]
    b = bracket_hi[f_idx]
    rows = idx[f_idx]
    for _ in range(n_bisect):
        mid = 0.5 * (a + b)
        inside = g_fn(mid, rows) <= 0.0
        b = np.where(inside, mid, b)
        a = np.where(inside, a, mid)
    hit_s[rows] = b
    return hit_s


@dataclass(frozen=True)
class Superellipsoid:
    """Superellipsoid with semi-axes (mm) and shape exponents.

    Inside test: ((|x/ax|^(2/e2) + |y/ay|^(2/e2))^(e2/e1) + |z/az|^(2/e1)) <= 1.
    Exponents in [0.3, 2.0] keep the body convex and rock-like.
    """

    ax: float
    ay: float
    az: float
    e1: float = 1.0
    e2: float = 1.0

    def __post_init__(self):
        if min(self.ax, self.ay, self.az) <= 0:
            raise ValidationError("semi-axes must be > 0")
        if not (0.3 <= self.e1 <= 2.0 and 0.3 <= self.e2 <= 2.0):
            raise ValidationError("shape exponents must lie in [0.3, 2.0]")

    def implicit(self, pts: np.ndarray) -> np.ndarray:
        """Inside-outside function; <= 1 inside, > 1 outside."""
        p = np.asarray(pts, dtype=np.float64)
        x = np.abs(p[..., 0] / self.ax)
        y = np.abs(p[..., 1] / self.ay)
        z = np.abs(p[..., 2] / self.az)
        xy = (x ** (2.0 / self.e2) + y ** (2.0 / self.e2)) ** (self.e2 / self.e1)
        return xy + z ** (2.0 / self.e1)

    def contains(self, pts: np.ndarray) -> np.ndarray:
        return self.implicit(pts) <= 1.0

    @property
    def volume(self) -> float:
        """Closed-form volume via Beta functions, mm^3."""
        return (
            2.0
            * self.ax
            * self.ay
            * self.az
            * self.e1
            * self.e2
            * beta_fn(self.e1 / 2.0 + 1.0, self.e1)
            * beta_fn(self.e2 / 2.0, self.e2 / 2.0)
        )

    @property
    def bounding_radius(self) -> float:
        return math.sqrt(self.ax**2 + self.ay**2 + self.az**2)

    def surface_points(self, n_eta: int = 24, n_omega: int = 48) -> np.ndarray:
        """Deterministic parametric surface grid, shape (n_eta * n_omega, 3)."""
        eta = np.linspace(-math.pi / 2, math.pi / 2, n_eta)
        omega = np.linspace(-math.pi, math.pi, n_omega, endpoint=False)
        ee, ww = np.meshgrid(eta, omega, indexing="ij")
        return self._param_points(ee.ravel(), ww.ravel())

    def _param_points(self, eta: np.ndarray, omega: np.ndarray) -> np.ndarray:
        def sgn_pow(val, expo):
            return np.sign(val) * np.abs(val) ** expo

        ce = sgn_pow(np.cos(eta), self.e1)
        se = sgn_pow(np.sin(eta), self.e1)
        cw = sgn_pow(np.cos(omega), self.e2)
        sw = sgn_pow(np.sin(omega), self.e2)
        return np.stack([self.ax * ce * cw, self.ay * ce * sw, self.az * se], axis=-1)

    def raycast(self, origins: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        """Entry parameter s per ray (local frame), inf for misses."""
        o = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
        d = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
        r = self.bounding_radius
        a = np.sum(d * d, axis=1)
        b = 2.0 * np.sum(o * d, axis=1)
        c = np.sum(o * o, axis=1) - r * r
        disc = b * b - 4.0 * a * c
        ok = disc > 0
        sqrt_disc = np.sqrt(np.where(ok, disc, 0.0))
        s_lo = (-b - sqrt_disc) / (2.0 * a)
        s_hi = (-b + sqrt_disc) / (2.0 * a)
        s_lo = np.maximum(s_lo, 0.0)
        active = ok & (s_hi > 0)

        def gap(s, rows):
            pts = o[rows] + s[:, None] * d[rows]
            return self.implicit(pts) - 1.0

        return _first_crossing(gap, s_lo, s_hi, active)


@dataclass(frozen=True)
class Box:
    """Axis-aligned box in the owning part's local frame."""

    center: np.ndarray
    half_extents: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64).reshape(3))
        he = np.asarray(self.half_extents, dtype=np.float64).reshape(3)
        if np.any(he <= 0):
            raise ValidationError("box half-extents must be > 0")
        object.__setattr__(self, "half_extents", he)

    def contains(self, pts: np.ndarray) -> np.ndarray:
        p = np.asarray(pts, dtype=np.float64)
        return np.all(np.abs(p - self.center) <= self.half_extents + 1e-12, axis=-1)

    def raycast(self, origins: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        o = np.asarray(origins, dtype=np.float64).reshape(-1, 3) - self.center
        d = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = np.where(d != 0, 1.0 / d, np.inf)
        t1 = (-self.half_extents - o) * inv
        t2 = (self.half_extents - o) * inv
        # rays parallel to a slab: hit only if origin inside that slab
        par = d == 0
        inside_slab = np.abs(o) <= self.half_extents
        lo = np.where(par, np.where(inside_slab, -np.inf, np.inf), np.minimum(t1, t2))
        hi = np.where(par, np.where(inside_slab, np.inf, -np.inf), np.maximum(t1, t2))
        t_near = lo.max(axis=1)
        t_far = hi.min(axis=1)
        hit = (t_near <= t_far) & (t_far >= 0) & (t_near >= 0)
        return np.where(hit, t_near, _MISS)

    def surface_points(self, spacing: float = 4.0) -> np.ndarray:
        hx, hy, hz = self.half_extents
        pts = []
        for axis, (ha, hb, hc) in (
            (0, (hx, hy, hz)),
            (1, (hy, hx, hz)),
            (2, (hz, hx, hy)),
        ):
            nb = max(2, int(round(2 * hb / spacing)) + 1)
            nc = max(2, int(round(2 * hc / spacing)) + 1)
            b = np.linspace(-hb, hb, nb)
            c = np.linspace(-hc, hc, nc)
            bb, cc = np.meshgrid(b, c, indexing="ij")
            for sign in (-ha, ha):
                face = np.zeros((bb.size, 3))
                face[:, axis] = sign
                others = [i for i in range(3) if i != axis]
                face[:, others[0]] = bb.ravel()
                face[:, others[1]] = cc.ravel()
                pts.append(face)
        return np.concatenate(pts) + self.center

    @property
    def bounding(self) -> tuple[np.ndarray, float]:
        return self.center, float(np.linalg.norm(self.half_extents))


@dataclass(frozen=True)
class Sphere:
    center: np.ndarray
    radius: float

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64).reshape(3))
        if self.radius <= 0:
            raise ValidationError("sphere radius must be > 0")

    def contains(self, pts: np.ndarray) -> np.ndarray:
        p = np.asarray(pts, dtype=np.float64)
        return np.sum((p - self.center) ** 2, axis=-1) <= self.radius**2 + 1e-9

    def raycast(self, origins: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        o = np.asarray(origins, dtype=np.float64).reshape(-1, 3) - self.center
        d = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
        a = np.sum(d * d, axis=1)
        b = 2.0 * np.sum(o * d, axis=1)
        c = np.sum(o * o, axis=1) - self.radius**2
        disc = b * b - 4.0 * a * c
        ok = disc >= 0
        sqrt_disc = np.sqrt(np.where(ok, disc, 0.0))
        s = (-b - sqrt_disc) / (2.0 * a)
        hit = ok & (s >= 0)
        return np.where(hit, s, _MISS)

    def surface_points(self, spacing: float = 4.0) -> np.ndarray:
        # Fibonacci sphere; deterministic, roughly uniform
        n = max(16, int(4 * math.pi * self.radius**2 / spacing**2))
        i = np.arange(n, dtype=np.float64)
        phi = math.pi * (3.0 - math.sqrt(5.0)) * i
        z = 1.0 - 2.0 * (i + 0.5) / n
        r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
        pts = np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=-1)
        return self.center + self.radius * pts

    @property
    def bounding(self) -> tuple[np.ndarray, float]:
        return self.center, self.radius


@dataclass(frozen=True)
class Cylinder:
    """Finite cylinder from ``base`` along unit ``axis`` for ``length`` mm."""

    base: np.ndarray
    axis: np.ndarray
    length: float
    radius: float

    def __post_init__(self):
        object.__setattr__(self, "base", np.asarray(self.base, dtype=np.float64).reshape(3))
        ax = np.asarray(self.axis, dtype=np.float64).reshape(3)
        n = np.linalg.norm(ax)
        if n < 1e-12:
            raise ValidationError("cylinder axis must be nonzero")
        object.__setattr__(self, "axis", ax / n)
        if self.length <= 0 or self.radius <= 0:
            raise ValidationError("cylinder length and radius must be > 0")

    def contains(self, pts: np.ndarray) -> np.ndarray:
        p = np.asarray(pts, dtype=np.float64) - self.base
        m = p @ self.axis
        radial = p - np.multiply.outer(m, self.axis)
        r2 = np.sum(radial * radial, axis=-1)
        return (m >= -1e-9) & (m <= self.length + 1e-9) & (r2 <= self.radius**2 + 1e-9)

    def raycast(self, origins: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        o = np.asarray(origins, dtype=np.float64).reshape(-1, 3) - self.base
        d = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
        w = self.axis
        om = o @ w
        dm = d @ w
        o_perp = o - np.multiply.outer(om, w)
        d_perp = d - np.multiply.outer(dm, w)
        a = np.sum(d_perp * d_perp, axis=1)
        b = 2.0 * np.sum(o_perp * d_perp, axis=1)
        c = np.sum(o_perp * o_perp, axis=1) - self.radius**2
        best = np.full(o.shape[0], _MISS)
        # side surface
        nontrivial = a > 1e-14
        disc = b * b - 4.0 * a * c
        ok = nontrivial & (disc >= 0)
        sqrt_disc = np.sqrt(np.where(ok, disc, 0.0))
        denom = np.where(nontrivial, 2.0 * a, 1.0)
        for sgn in (-1.0, 1.0):
            s = (-b + sgn * sqrt_disc) / denom
            m = om + s * dm
            valid = ok & (s >= 0) & (m >= 0) & (m <= self.length)
            best = np.where(valid & (s < best), s, best)
        # caps
        moving = np.abs(dm) > 1e-14
        for cap_m in (0.0, self.length):
            s = np.where(moving, (cap_m - om) / np.where(moving, dm, 1.0), 0.0)
            p_perp = o_perp + s[:, None] * d_perp
            r2 = np.sum(p_perp * p_perp, axis=1)
            valid = moving & (s >= 0) & (r2 <= self.radius**2)
            best = np.where(valid & (s < best), s, best)
        return best

    def surface_points(self, spacing: float = 4.0) -> np.ndarray:
        w = self.axis
        ref = np.array([1.0, 0.0, 0.0]) if abs(w[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
        u = np.cross(w, ref)
        u /= np.linalg.norm(u)
        v = np.cross(w, u)
        n_ang = max(8, int(round(2 * math.pi * self.radius / spacing)))
        n_len = max(2, int(round(self.length / spacing)) + 1)
        ang = np.linspace(0, 2 * math.pi, n_ang, endpoint=False)
        ring = self.radius * (np.outer(np.cos(ang), u) + np.outer(np.sin(ang), v))
        lengths = np.linspace(0, self.length, n_len)
        side = (ring[None, :, :] + np.multiply.outer(lengths, w)[:, None, :]).reshape(-1, 3)
        caps = []
        n_rad = max(1, int(round(self.radius / spacing)))
        for cap_m in (0.0, self.length):
            for rr in np.linspace(self.radius / n_rad, self.radius, n_rad):
                caps.append(
                    rr * (np.outer(np.cos(ang), u) + np.outer(np.sin(ang), v)) + cap_m * w
                )
            caps.append((cap_m * w)[None, :])
        return np.concatenate([side] + caps) + self.base

    @property
    def bounding(self) -> tuple[np.ndarray, float]:
        center = self.base + 0.5 * self.length * self.axis
        return center, math.sqrt((self.length / 2.0) ** 2 + self.radius**2)


Primitive = Box | Sphere | Cylinder


def union_bounding(primitives) -> tuple[np.ndarray, float]:
    """Center and radius of a sphere enclosing all primitives."""
    centers = []
    radii = []
    for prim in primitives:
        c, r = prim.bounding
        centers.append(c)
        radii.append(r)
    centers = np.asarray(centers)
    mid = centers.mean(axis=0)
    reach = max(
        float(np.linalg.norm(c - mid)) + r for c, r in zip(centers, radii)
    )
    return mid, reach


def union_raycast(primitives, origins: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    """Nearest hit over a union of primitives."""
    best = None
    for prim in primitives:
        s = prim.raycast(origins, dirs)
        best = s if best is None else np.minimum(best, s)
    return best


def union_contains(primitives, pts: np.ndarray) -> np.ndarray:
    mask = None
    for prim in primitives:
        m = prim.contains(pts)
        mask = m if mask is None else (mask | m)
    return mask
