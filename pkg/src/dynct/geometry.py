"""Source trajectories, deformation models, and derived ray geometry.

Conventions used throughout the package:

* time/curve parameter ``s`` is a scalar per call; the curve lives on a
  union of disjoint open intervals,
* spatial points are float64 arrays of shape ``(3,)`` or ``(n, 3)``;
  batched methods preserve the leading shape,
* the deformation ``psi(s, .)`` maps reference coordinates to deformed
  (lab) coordinates, ``nu(s, .)`` is its spatial inverse.
"""

import numpy as np

from .errors import (
    DomainError,
    InsufficientDomainError,
    InvalidDeformationError,
    ValidationError,
)

_EPS = np.finfo(float).eps


def _pts(x):
    """Return (points_2d, was_single) for (3,) or (n, 3) input."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        return x[None, :], True
    return x, False


def _unpack(v, single):
    return v[0] if single else v


def rotation_matrix(axis, angle):
    """Rodrigues rotation about a (not necessarily unit) axis."""
    a = np.asarray(axis, dtype=float)
    n = np.linalg.norm(a)
    if n == 0.0:
        raise ValueError("rotation axis must be nonzero")
    a = a / n
    c, s = np.cos(angle), np.sin(angle)
    K = np.array([[0.0, -a[2], a[1]], [a[2], 0.0, -a[0]], [-a[1], a[0], 0.0]])
    return c * np.eye(3) + s * K + (1.0 - c) * np.outer(a, a)


class Box:
    """Axis-aligned box used for the region of interest and clipping."""

    def __init__(self, lo, hi):
        self.lo = np.asarray(lo, dtype=float)
        self.hi = np.asarray(hi, dtype=float)
        if self.lo.shape != (3,) or self.hi.shape != (3,):
            raise ValidationError("box bounds must be 3-vectors")
        if not np.all(self.lo < self.hi):
            raise ValidationError("box must have positive extent")

    @classmethod
    def cube(cls, half, center=(0.0, 0.0, 0.0)):
        c = np.asarray(center, dtype=float)
        return cls(c - half, c + half)

    @property
    def center(self):
        return 0.5 * (self.lo + self.hi)

    @property
    def radius(self):
        """Radius of the bounding sphere about the box center."""
        return 0.5 * float(np.linalg.norm(self.hi - self.lo))

    def corners(self):
        lo, hi = self.lo, self.hi
        return np.array(
            [[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1]) for z in (lo[2], hi[2])]
        )

    def contains(self, x, pad=0.0):
        p, single = _pts(x)
        ok = np.all((p >= self.lo - pad) & (p <= self.hi + pad), axis=1)
        return _unpack(ok, single)

    def distance(self, x):
        """Euclidean distance from points to the box (0 inside)."""
        p, single = _pts(x)
        d = np.maximum(np.maximum(self.lo - p, p - self.hi), 0.0)
        return _unpack(np.linalg.norm(d, axis=1), single)

    def inflated(self, pad):
        return Box(self.lo - pad, self.hi + pad)

    def union(self, other):
        return Box(np.minimum(self.lo, other.lo), np.maximum(self.hi, other.hi))

    def clip_ray(self, origin, dirs):
        """Slab-clip rays origin + t*dirs; returns (t_lo, t_hi), empty when t_lo >= t_hi."""
        d, single = _pts(dirs)
        o = np.asarray(origin, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / d
            ta = (self.lo[None, :] - o) * inv
            tb = (self.hi[None, :] - o) * inv
        lo = np.where(np.isnan(ta), -np.inf, np.minimum(ta, tb))
        hi = np.where(np.isnan(tb), np.inf, np.maximum(ta, tb))
        # axis-parallel rays: keep the slab only if the origin lies inside it
        par = d == 0.0
        if np.any(par):
            inside = (o[None, :] >= self.lo) & (o[None, :] <= self.hi)
            lo = np.where(par, np.where(inside, -np.inf, np.inf), lo)
            hi = np.where(par, np.where(inside, np.inf, -np.inf), hi)
        t_lo = np.max(lo, axis=1)
        t_hi = np.min(hi, axis=1)
        return _unpack(t_lo, single), _unpack(t_hi, single)


# ---------------------------------------------------------------------------
# trajectories


class Trajectory:
    """Piecewise-smooth source curve z(s) on disjoint open intervals.

    Subclasses implement ``position`` and ``velocity`` for scalar or
    array ``s``.  Construction checks that the speed never vanishes on a
    sample grid.
    """

    def __init__(self, segments, check_speed=True):
        segs = [(float(a), float(b)) for a, b in segments]
        if not segs:
            raise ValidationError("trajectory needs at least one segment")
        for a, b in segs:
            if not b > a:
                raise ValidationError(f"segment ({a}, {b}) is empty")
        for (a0, b0), (a1, b1) in zip(sorted(segs), sorted(segs)[1:]):
            if a1 < b0:
                raise ValidationError("trajectory segments must be disjoint")
        self.segments = segs
        if check_speed:
            s = self.sample(257)
            sp = np.linalg.norm(np.atleast_2d(self.velocity(s)), axis=-1)
            if not np.all(np.isfinite(sp)) or sp.min() <= 0.0:
                raise ValidationError("trajectory speed must be positive and finite")

    def position(self, s):
        raise NotImplementedError

    def velocity(self, s):
        raise NotImplementedError

    def segment_closed(self, k):
        """True when segment k is periodic (position(a) == position(b))."""
        return False

    def segment_of(self, s):
        """Index of the open segment containing s; DomainError otherwise."""
        s = float(s)
        best, best_gap = None, np.inf
        for k, (a, b) in enumerate(self.segments):
            if a < s < b:
                return k
            gap = min(abs(s - a), abs(s - b))
            if gap < best_gap:
                best, best_gap = k, gap
        a, b = self.segments[best]
        raise DomainError(
            f"s={s!r} outside the curve's parameter intervals; nearest segment is ({a}, {b})"
        )

    def source_point(self, s):
        self.segment_of(s)
        return self.position(float(s))

    def sample(self, n_per_segment):
        """Interior sample grid, n points strictly inside every segment."""
        out = []
        for a, b in self.segments:
            h = (b - a) / n_per_segment
            out.append(a + h * (np.arange(n_per_segment) + 0.5))
        return np.concatenate(out)

    def segment_grid(self, k, n):
        a, b = self.segments[k]
        h = (b - a) / n
        return a + h * (np.arange(n) + 0.5)


class CircleTrajectory(Trajectory):
    """Circle of given radius in a coordinate plane ("xy" or "xz")."""

    def __init__(self, radius, plane="xy", center=(0.0, 0.0, 0.0), s0=0.0):
        self.radius = float(radius)
        self.plane = plane
        self.center = np.asarray(center, dtype=float)
        self.s0 = float(s0)
        if plane == "xy":
            self._u1 = np.array([1.0, 0.0, 0.0])
            self._u2 = np.array([0.0, 1.0, 0.0])
        elif plane == "xz":
            self._u1 = np.array([1.0, 0.0, 0.0])
            self._u2 = np.array([0.0, 0.0, 1.0])
        else:
            raise ValidationError(f"unknown circle plane {plane!r}")
        super().__init__([(s0, s0 + 2.0 * np.pi)])

    def _angle(self, s):
        return np.asarray(s, dtype=float) - self.s0

    def position(self, s):
        t = self._angle(s)
        return self.center + self.radius * (
            np.multiply.outer(np.cos(t), self._u1) + np.multiply.outer(np.sin(t), self._u2)
        )

    def velocity(self, s):
        t = self._angle(s)
        return self.radius * (
            np.multiply.outer(-np.sin(t), self._u1) + np.multiply.outer(np.cos(t), self._u2)
        )

    def segment_closed(self, k):
        return True


class TwoCirclesTrajectory(Trajectory):
    """Two orthogonal circles (xy plane and xz plane) of a common radius.

    The second circle occupies a shifted parameter interval so the two
    segments stay disjoint.
    """

    GAP = 10.0

    def __init__(self, radius, center=(0.0, 0.0, 0.0)):
        self.radius = float(radius)
        self.center = np.asarray(center, dtype=float)
        two_pi = 2.0 * np.pi
        super().__init__([(0.0, two_pi), (self.GAP, self.GAP + two_pi)])

    def _split(self, s):
        s = np.asarray(s, dtype=float)
        second = s >= 0.5 * (2.0 * np.pi + self.GAP)
        t = np.where(second, s - self.GAP, s)
        return t, second

    def position(self, s):
        t, second = self._split(s)
        c, sn = np.cos(t), np.sin(t)
        x = self.radius * c
        y = self.radius * np.where(second, 0.0, sn)
        z = self.radius * np.where(second, sn, 0.0)
        return self.center + np.stack(np.broadcast_arrays(x, y, z), axis=-1)

    def velocity(self, s):
        t, second = self._split(s)
        c, sn = np.cos(t), np.sin(t)
        x = -self.radius * sn
        y = self.radius * np.where(second, 0.0, c)
        z = self.radius * np.where(second, c, 0.0)
        return np.stack(np.broadcast_arrays(x, y, z), axis=-1)

    def segment_closed(self, k):
        return True


class LineSegmentTrajectory(Trajectory):
    """Straight source path from point a to point b, s in (0, 1)."""

    def __init__(self, a, b):
        self.a = np.asarray(a, dtype=float)
        self.b = np.asarray(b, dtype=float)
        if np.allclose(self.a, self.b):
            raise ValidationError("line segment endpoints coincide")
        super().__init__([(0.0, 1.0)])

    def position(self, s):
        t = np.asarray(s, dtype=float)
        return self.a + np.multiply.outer(t, self.b - self.a)

    def velocity(self, s):
        t = np.asarray(s, dtype=float)
        return np.broadcast_to(self.b - self.a, t.shape + (3,)).copy()


# ---------------------------------------------------------------------------
# deformations


class Deformation:
    """Time-dependent diffeomorphism psi(s, .) with inverse nu(s, .).

    Attributes
    ----------
    is_identity : bool
        True only for the exact identity map; enables closed-form
        shortcuts downstream.
    analytic : bool
        Jacobians are available in closed form (no finite differences).
    support : Box or None
        Outside this box the map is the identity; None means the fixture
        is global (test-only, relaxes the identity-outside check).
    """

    is_identity = False
    analytic = True
    support = None

    def psi(self, s, x):
        raise NotImplementedError

    def nu(self, s, y):
        raise NotImplementedError

    def d_psi(self, s, x):
        """Spatial Jacobian of psi, shape (n, 3, 3)."""
        raise NotImplementedError

    def d_psi_ds(self, s, x):
        """Time derivative of psi at fixed x, shape (n, 3)."""
        raise NotImplementedError

    def d_psi_ds_dx(self, s, x):
        """Mixed derivative d/ds of the spatial Jacobian; None if unavailable."""
        return None

    # -- batched-in-time entry points ------------------------------------
    # Defaults fall back to a scalar loop; analytic fixtures override with
    # vectorized forms because the root machinery leans on these heavily.

    def psi_many_s(self, svals, x):
        """psi(s_i, x) for one point over many times; (m, 3)."""
        x = np.asarray(x, dtype=float)
        return np.stack([self.psi(float(s), x[None, :])[0] for s in svals])

    def d_psi_many_s(self, svals, x):
        x = np.asarray(x, dtype=float)
        return np.stack([self.d_psi(float(s), x[None, :])[0] for s in svals])

    def psi_pairs(self, svals, xs):
        """psi(s_i, x_i) row by row; (k, 3)."""
        xs = np.asarray(xs, dtype=float)
        return np.stack([self.psi(float(s), xs[i][None, :])[0] for i, s in enumerate(svals)])

    def d_psi_pairs(self, svals, xs):
        xs = np.asarray(xs, dtype=float)
        return np.stack([self.d_psi(float(s), xs[i][None, :])[0] for i, s in enumerate(svals)])

    def nu_pairs(self, svals, ys):
        """nu(s_i, y_i) row by row; (k, 3)."""
        ys = np.asarray(ys, dtype=float)
        return np.stack([self.nu(float(s), ys[i][None, :])[0] for i, s in enumerate(svals)])

    def validate(self, box, n_samples=128, seed=0, tol=1e-9):
        """Sampled invariant checks: inverse round trip, orientation, support."""
        rng = np.random.default_rng(seed)
        pts = rng.uniform(box.lo, box.hi, size=(n_samples, 3))
        svals = rng.uniform(0.0, 1.0, size=4)
        for s in svals:
            y = self.psi(s, pts)
            back = self.nu(s, y)
            err = np.linalg.norm(back - pts, axis=1)
            scale = 1.0 + np.linalg.norm(pts, axis=1)
            if np.any(err > tol * scale):
                raise InvalidDeformationError(
                    f"inverse round trip off by {err.max():.3e} at s={s:.3f}"
                )
            det = np.linalg.det(self.d_psi(s, pts))
            if np.any(det <= 0.0):
                raise InvalidDeformationError("deformation Jacobian determinant must stay positive")
        if self.support is not None:
            shell = box.inflated(1.0 + box.radius).corners()
            for s in svals:
                if np.max(np.abs(self.psi(s, shell) - shell)) > 0.0:
                    raise InvalidDeformationError("deformation must be the identity outside its support")


class IdentityDeformation(Deformation):
    """The trivial deformation; every operation short-circuits on it."""

    is_identity = True

    def psi(self, s, x):
        return np.array(x, dtype=float, copy=True)

    def nu(self, s, y):
        return np.array(y, dtype=float, copy=True)

    def d_psi(self, s, x):
        p, _ = _pts(x)
        return np.broadcast_to(np.eye(3), (p.shape[0], 3, 3)).copy()

    def d_psi_ds(self, s, x):
        p, _ = _pts(x)
        return np.zeros_like(p)

    def d_psi_ds_dx(self, s, x):
        p, _ = _pts(x)
        return np.zeros((p.shape[0], 3, 3))

    def psi_many_s(self, svals, x):
        return np.broadcast_to(np.asarray(x, dtype=float), (len(svals), 3)).copy()

    def d_psi_many_s(self, svals, x):
        return np.broadcast_to(np.eye(3), (len(svals), 3, 3)).copy()

    def psi_pairs(self, svals, xs):
        return np.array(xs, dtype=float, copy=True)

    def d_psi_pairs(self, svals, xs):
        return np.broadcast_to(np.eye(3), (len(svals), 3, 3)).copy()

    def nu_pairs(self, svals, ys):
        return np.array(ys, dtype=float, copy=True)


class AffineDeformation(Deformation):
    """Constant-in-time affine map M x + c.  Test fixture only: it is not
    the identity outside any box, so ``support`` stays None."""

    def __init__(self, matrix, shift=(0.0, 0.0, 0.0)):
        self.M = np.asarray(matrix, dtype=float).reshape(3, 3)
        self.c = np.asarray(shift, dtype=float)
        if np.linalg.det(self.M) <= 0.0:
            raise InvalidDeformationError("affine matrix must be orientation preserving")
        self.Minv = np.linalg.inv(self.M)

    def psi(self, s, x):
        p, single = _pts(x)
        return _unpack(p @ self.M.T + self.c, single)

    def nu(self, s, y):
        p, single = _pts(y)
        return _unpack((p - self.c) @ self.Minv.T, single)

    def d_psi(self, s, x):
        p, _ = _pts(x)
        return np.broadcast_to(self.M, (p.shape[0], 3, 3)).copy()

    def d_psi_ds(self, s, x):
        p, _ = _pts(x)
        return np.zeros_like(p)

    def d_psi_ds_dx(self, s, x):
        p, _ = _pts(x)
        return np.zeros((p.shape[0], 3, 3))

    def psi_many_s(self, svals, x):
        y = np.asarray(x, dtype=float) @ self.M.T + self.c
        return np.broadcast_to(y, (len(svals), 3)).copy()

    def d_psi_many_s(self, svals, x):
        return np.broadcast_to(self.M, (len(svals), 3, 3)).copy()

    def psi_pairs(self, svals, xs):
        return np.asarray(xs, dtype=float) @ self.M.T + self.c

    def d_psi_pairs(self, svals, xs):
        return np.broadcast_to(self.M, (len(svals), 3, 3)).copy()

    def nu_pairs(self, svals, ys):
        return (np.asarray(ys, dtype=float) - self.c) @ self.Minv.T


class RotationDeformation(Deformation):
    """Global rigid rotation about an axis by angle(s) = rate * sin(s - s_ref).

    Volume preserving with an exact inverse; used for change-of-variables
    oracles.  Not identity outside any box (test fixture)."""

    def __init__(self, axis=(0.0, 0.0, 1.0), rate=0.1, s_ref=0.0):
        self.axis = np.asarray(axis, dtype=float)
        self.rate = float(rate)
        self.s_ref = float(s_ref)

    def angle(self, s):
        return self.rate * np.sin(s - self.s_ref)

    def _rot(self, s):
        return rotation_matrix(self.axis, self.angle(s))

    def psi(self, s, x):
        p, single = _pts(x)
        return _unpack(p @ self._rot(s).T, single)

    def nu(self, s, y):
        p, single = _pts(y)
        return _unpack(p @ self._rot(s), single)

    def d_psi(self, s, x):
        p, _ = _pts(x)
        return np.broadcast_to(self._rot(s), (p.shape[0], 3, 3)).copy()

    def d_psi_ds(self, s, x):
        p, _ = _pts(x)
        return p @ self._d_rot(s).T

    def _d_rot(self, s):
        a = self.axis / np.linalg.norm(self.axis)
        K = np.array([[0.0, -a[2], a[1]], [a[2], 0.0, -a[0]], [-a[1], a[0], 0.0]])
        dang = self.rate * np.cos(s - self.s_ref)
        return dang * (K @ self._rot(s))

    def d_psi_ds_dx(self, s, x):
        p, _ = _pts(x)
        return np.broadcast_to(self._d_rot(s), (p.shape[0], 3, 3)).copy()

    def _rot_many(self, svals):
        a = self.axis / np.linalg.norm(self.axis)
        K = np.array([[0.0, -a[2], a[1]], [a[2], 0.0, -a[0]], [-a[1], a[0], 0.0]])
        th = self.angle(np.asarray(svals, dtype=float))
        return (np.eye(3)[None, :, :]
                + np.sin(th)[:, None, None] * K[None, :, :]
                + (1.0 - np.cos(th))[:, None, None] * (K @ K)[None, :, :])

    def psi_many_s(self, svals, x):
        return np.einsum("kij,j->ki", self._rot_many(svals), np.asarray(x, dtype=float))

    def d_psi_many_s(self, svals, x):
        return self._rot_many(svals)

    def psi_pairs(self, svals, xs):
        return np.einsum("kij,kj->ki", self._rot_many(svals), np.asarray(xs, dtype=float))

    def d_psi_pairs(self, svals, xs):
        return self._rot_many(svals)

    def nu_pairs(self, svals, ys):
        return np.einsum("kji,kj->ki", self._rot_many(svals), np.asarray(ys, dtype=float))


class RadialPulseDeformation(Deformation):
    """Compactly supported radial pulsation about a center point.

    psi(s, x) = c + r_vec * (1 + amplitude * m(s) * chi(|r_vec|^2)) with
    r_vec = x - c, chi(u) = (1 - u/R^2)^4 inside the support ball and 0
    outside, and m(s) = sin(freq * s + phase).  The map is a radial
    diffeomorphism for |amplitude| < 1.68; the constructor enforces a
    safe bound.  All Jacobians are closed form; the inverse reduces to a
    scalar Newton solve per point.
    """

    def __init__(self, amplitude, radius=1.3, center=(0.0, 0.0, 0.0), freq=1.0, phase=0.0):
        self.amplitude = float(amplitude)
        self.radius = float(radius)
        self.center = np.asarray(center, dtype=float)
        self.freq = float(freq)
        self.phase = float(phase)
        if abs(self.amplitude) > 0.55:
            # keeps d(r psi_r)/dr >= 1 - 0.5926 |a| > 0.67 with margin
            raise InvalidDeformationError("radial pulse amplitude too large for a diffeomorphism")
        self.support = Box.cube(self.radius, center)
        self._B = self.radius**2

    def m(self, s):
        return np.sin(self.freq * np.asarray(s, dtype=float) + self.phase)

    def dm(self, s):
        return self.freq * np.cos(self.freq * np.asarray(s, dtype=float) + self.phase)

    def _chi(self, u):
        v = np.clip(1.0 - u / self._B, 0.0, None)
        return v**4

    def _dchi(self, u):
        v = np.clip(1.0 - u / self._B, 0.0, None)
        return -4.0 * v**3 / self._B

    def psi(self, s, x):
        p, single = _pts(x)
        r = p - self.center
        u = np.sum(r * r, axis=1)
        g = 1.0 + self.amplitude * self.m(s) * self._chi(u)
        return _unpack(self.center + r * g[:, None], single)

    def nu(self, s, y):
        p, single = _pts(y)
        r = p - self.center
        rho_y = np.linalg.norm(r, axis=1)
        a = self.amplitude * float(self.m(s))
        # solve rho * (1 + a*chi(rho^2)) = rho_y for rho, per point
        rho = rho_y / (1.0 + a * self._chi(rho_y**2))
        for _ in range(60):
            chi = self._chi(rho**2)
            dchi = self._dchi(rho**2)
            f = rho * (1.0 + a * chi) - rho_y
            df = 1.0 + a * (chi + 2.0 * rho**2 * dchi)
            step = f / df
            rho = rho - step
            if np.max(np.abs(step)) < 1e-14 * (1.0 + np.max(rho_y)):
                break
        scale = np.ones_like(rho_y)
        nz = rho_y > 0.0
        scale[nz] = rho[nz] / rho_y[nz]
        return _unpack(self.center + r * scale[:, None], single)

    def d_psi(self, s, x):
        p, _ = _pts(x)
        r = p - self.center
        u = np.sum(r * r, axis=1)
        a = self.amplitude * float(self.m(s))
        g = 1.0 + a * self._chi(u)
        dg = a * self._dchi(u)
        eye = np.broadcast_to(np.eye(3), (p.shape[0], 3, 3))
        return g[:, None, None] * eye + 2.0 * dg[:, None, None] * r[:, :, None] * r[:, None, :]

    def d_psi_ds(self, s, x):
        p, _ = _pts(x)
        r = p - self.center
        u = np.sum(r * r, axis=1)
        return self.amplitude * float(self.dm(s)) * self._chi(u)[:, None] * r

    def d_psi_ds_dx(self, s, x):
        p, _ = _pts(x)
        r = p - self.center
        u = np.sum(r * r, axis=1)
        b = self.amplitude * float(self.dm(s))
        eye = np.broadcast_to(np.eye(3), (p.shape[0], 3, 3))
        return b * (
            self._chi(u)[:, None, None] * eye
            + 2.0 * self._dchi(u)[:, None, None] * r[:, :, None] * r[:, None, :]
        )

    def psi_many_s(self, svals, x):
        r = np.asarray(x, dtype=float) - self.center
        u = float(r @ r)
        g = 1.0 + self.amplitude * self.m(svals) * self._chi(u)
        return self.center + g[:, None] * r

    def d_psi_many_s(self, svals, x):
        r = np.asarray(x, dtype=float) - self.center
        u = float(r @ r)
        a = self.amplitude * self.m(svals)
        g = 1.0 + a * self._chi(u)
        dg = a * self._dchi(u)
        eye = np.broadcast_to(np.eye(3), (len(svals), 3, 3))
        outer = r[None, :, None] * r[None, None, :]
        return g[:, None, None] * eye + 2.0 * dg[:, None, None] * outer

    def psi_pairs(self, svals, xs):
        r = np.asarray(xs, dtype=float) - self.center
        u = np.sum(r * r, axis=1)
        g = 1.0 + self.amplitude * self.m(svals) * self._chi(u)
        return self.center + g[:, None] * r

    def d_psi_pairs(self, svals, xs):
        r = np.asarray(xs, dtype=float) - self.center
        u = np.sum(r * r, axis=1)
        a = self.amplitude * self.m(svals)
        g = 1.0 + a * self._chi(u)
        dg = a * self._dchi(u)
        eye = np.broadcast_to(np.eye(3), (r.shape[0], 3, 3))
        outer = r[:, :, None] * r[:, None, :]
        return g[:, None, None] * eye + 2.0 * dg[:, None, None] * outer

    def nu_pairs(self, svals, ys):
        ys = np.asarray(ys, dtype=float)
        r = ys - self.center
        rho_y = np.linalg.norm(r, axis=1)
        a = self.amplitude * self.m(svals)
        rho = rho_y / (1.0 + a * self._chi(rho_y**2))
        for _ in range(60):
            chi = self._chi(rho**2)
            dchi = self._dchi(rho**2)
            f = rho * (1.0 + a * chi) - rho_y
            df = 1.0 + a * (chi + 2.0 * rho**2 * dchi)
            step = f / df
            rho = rho - step
            if np.max(np.abs(step), initial=0.0) < 1e-14 * (1.0 + np.max(rho_y, initial=0.0)):
                break
        scale = np.ones_like(rho_y)
        nz = rho_y > 0.0
        scale[nz] = rho[nz] / rho_y[nz]
        return self.center + r * scale[:, None]


class GridDeformation(Deformation):
    """Displacement field on a voxel grid, trilinearly interpolated.

    psi(s, x) = x + m(s) * u(x) where u comes from three scalar volumes
    (one per component) sharing one grid.  Spatial Jacobians use central
    differences at half a grid step, the inverse uses a damped Newton
    iteration; both are therefore only as smooth as the interpolant
    (C0 across cell faces).  Analytic fixtures remain the reference for
    accuracy-critical work.
    """

    analytic = False

    def __init__(self, grid_lo, spacing, fields, freq=1.0, phase=0.0, profile="sin"):
        self.lo = np.asarray(grid_lo, dtype=float)
        self.spacing = np.asarray(spacing, dtype=float)
        self.fields = [np.asarray(f, dtype=float) for f in fields]
        if len(self.fields) != 3 or len({f.shape for f in self.fields}) != 1:
            raise ValidationError("grid deformation needs three equally shaped component volumes")
        self.dims = self.fields[0].shape
        self.freq = float(freq)
        self.phase = float(phase)
        if profile not in ("sin", "const"):
            raise ValidationError(f"unknown time profile {profile!r}")
        self.profile = profile
        hi = self.lo + self.spacing * (np.asarray(self.dims) - 1)
        self.support = Box(self.lo, hi)
        self._fd_h = 0.5 * float(np.min(self.spacing))

    def m(self, s):
        if self.profile == "const":
            return 1.0
        return float(np.sin(self.freq * s + self.phase))

    def dm(self, s):
        if self.profile == "const":
            return 0.0
        return self.freq * float(np.cos(self.freq * s + self.phase))

    def _displacement(self, x):
        p, _ = _pts(x)
        g = (p - self.lo) / self.spacing
        out = np.zeros_like(p)
        dims = np.asarray(self.dims)
        inside = np.all((g >= 0.0) & (g <= dims - 1), axis=1)
        if not np.any(inside):
            return out
        gi = g[inside]
        i0 = np.clip(np.floor(gi).astype(int), 0, dims - 2)
        f = gi - i0
        for comp in range(3):
            F = self.fields[comp]
            acc = np.zeros(gi.shape[0])
            for dx in (0, 1):
                for dy in (0, 1):
                    for dz in (0, 1):
                        w = (
                            (f[:, 0] if dx else 1.0 - f[:, 0])
                            * (f[:, 1] if dy else 1.0 - f[:, 1])
                            * (f[:, 2] if dz else 1.0 - f[:, 2])
                        )
                        acc += w * F[i0[:, 0] + dx, i0[:, 1] + dy, i0[:, 2] + dz]
            out[inside, comp] = acc
        return out

    def psi(self, s, x):
        p, single = _pts(x)
        return _unpack(p + self.m(s) * self._displacement(p), single)

    def d_psi_ds(self, s, x):
        p, single = _pts(x)
        return _unpack(self.dm(s) * self._displacement(p), single)

    def d_psi(self, s, x):
        p, _ = _pts(x)
        h = self._fd_h
        J = np.empty((p.shape[0], 3, 3))
        for k in range(3):
            e = np.zeros(3)
            e[k] = h
            J[:, :, k] = (self.psi(s, p + e) - self.psi(s, p - e)) / (2.0 * h)
        return J

    def nu(self, s, y):
        p, single = _pts(y)
        x = p.copy()
        for _ in range(80):
            r = self.psi(s, x) - p
            if np.max(np.abs(r)) < 1e-12:
                break
            J = self.d_psi(s, x)
            try:
                step = np.linalg.solve(J, r[:, :, None])[:, :, 0]
            except np.linalg.LinAlgError as exc:
                raise InvalidDeformationError("singular Jacobian while inverting grid deformation") from exc
            x = x - np.clip(step, -self._fd_h * 4, self._fd_h * 4)
        return _unpack(x, single)

    def validate(self, box, n_samples=128, seed=0, tol=1e-9):
        # interpolated fields cannot hit the analytic round-trip target;
        # check at a tolerance matched to the Newton stop instead
        super().validate(box, n_samples=n_samples, seed=seed, tol=max(tol, 1e-8))


# ---------------------------------------------------------------------------
# attenuation weights


class AttenuationWeight:
    """Strictly positive weight A(s, x) applied to the deformed density."""

    is_one = False

    def value(self, s, x):
        raise NotImplementedError

    def ds(self, s, x):
        raise NotImplementedError

    def value_pairs(self, svals, xs):
        """value(s_i, x_i) row by row; default loops, fixtures vectorize."""
        xs = np.asarray(xs, dtype=float)
        return np.array([self.value(float(s), xs[i]) for i, s in enumerate(svals)])


class ConstantAttenuation(AttenuationWeight):
    def __init__(self, value=1.0):
        self.c = float(value)
        if self.c <= 0.0:
            raise ValidationError("attenuation weight must be positive")
        self.is_one = self.c == 1.0

    def value(self, s, x):
        p, single = _pts(x)
        return _unpack(np.full(p.shape[0], self.c), single)

    def ds(self, s, x):
        p, single = _pts(x)
        return _unpack(np.zeros(p.shape[0]), single)

    def value_pairs(self, svals, xs):
        return np.full(len(svals), self.c)


class PulseAttenuation(AttenuationWeight):
    """A(s, x) = 1 + amplitude * cos(freq*s) * chi(|x - c|^2), bounded away from 0."""

    def __init__(self, amplitude, radius=1.3, center=(0.0, 0.0, 0.0), freq=1.0):
        self.amplitude = float(amplitude)
        self.radius = float(radius)
        self.center = np.asarray(center, dtype=float)
        self.freq = float(freq)
        if abs(self.amplitude) >= 0.9:
            raise ValidationError("attenuation pulse would not stay positive")
        self._B = self.radius**2

    def _chi(self, u):
        v = np.clip(1.0 - u / self._B, 0.0, None)
        return v**4

    def value(self, s, x):
        p, single = _pts(x)
        u = np.sum((p - self.center) ** 2, axis=1)
        return _unpack(1.0 + self.amplitude * np.cos(self.freq * s) * self._chi(u), single)

    def ds(self, s, x):
        p, single = _pts(x)
        u = np.sum((p - self.center) ** 2, axis=1)
        return _unpack(-self.amplitude * self.freq * np.sin(self.freq * s) * self._chi(u), single)

    def value_pairs(self, svals, xs):
        u = np.sum((np.asarray(xs, dtype=float) - self.center) ** 2, axis=1)
        return 1.0 + self.amplitude * np.cos(self.freq * np.asarray(svals)) * self._chi(u)


# ---------------------------------------------------------------------------
# one-parameter families shrinking to the static configuration


class EpsilonFamily:
    """Family eps -> (deformation, attenuation) that is exactly static at eps = 0."""

    def __init__(self, deformation_at, attenuation_at):
        self.deformation_at = deformation_at
        self.attenuation_at = attenuation_at
        d0 = deformation_at(0.0)
        a0 = attenuation_at(0.0)
        if not d0.is_identity:
            raise ValidationError("family must produce the exact identity at eps = 0")
        if not getattr(a0, "is_one", False):
            raise ValidationError("family must produce unit attenuation at eps = 0")

    def __call__(self, eps):
        return self.deformation_at(eps), self.attenuation_at(eps)


def pulse_family(amplitude=1.2, radius=1.3, atten_amplitude=0.3, freq=1.0):
    """Radial-pulse family: displacement and attenuation both scale with eps."""

    def deform(eps):
        if eps == 0.0:
            return IdentityDeformation()
        return RadialPulseDeformation(amplitude * eps, radius=radius, freq=freq)

    def atten(eps):
        if eps == 0.0:
            return ConstantAttenuation(1.0)
        return PulseAttenuation(atten_amplitude * eps, radius=radius, freq=freq)

    return EpsilonFamily(deform, atten)


# ---------------------------------------------------------------------------
# scene bundle and derived ray geometry


class Scene:
    """Trajectory + deformation + attenuation around a region of interest.

    Parameters
    ----------
    trajectory : Trajectory
    deformation : Deformation, optional
        Defaults to the identity.
    attenuation : AttenuationWeight, optional
        Defaults to the constant 1.
    u_box : Box
        Region of interest; the reconstruction grid must stay inside it.
    d_min : float, optional
        Required clearance between the source curve and u_box.  When
        omitted, the measured clearance (with a 5% haircut) is stored.
    validate : bool
        Run the sampled invariant checks at construction.
    """

    def __init__(self, trajectory, deformation=None, attenuation=None, u_box=None,
                 d_min=None, validate=True):
        self.trajectory = trajectory
        self.deformation = deformation if deformation is not None else IdentityDeformation()
        self.attenuation = attenuation if attenuation is not None else ConstantAttenuation(1.0)
        if u_box is None:
            raise ValidationError("scene requires a region-of-interest box")
        self.u_box = u_box

        svals = trajectory.sample(max(2, int(np.ceil(1250 / len(trajectory.segments)))))
        z = np.atleast_2d(trajectory.position(svals))
        clearance = float(np.min(u_box.distance(z)))
        if clearance <= 0.0:
            raise ValidationError("source curve intersects the region of interest")
        if d_min is not None:
            if clearance < d_min:
                raise ValidationError(
                    f"source curve clearance {clearance:.4g} below the declared d_min {d_min:.4g}"
                )
            self.d_min = float(d_min)
        else:
            self.d_min = 0.95 * clearance
        self.clearance = clearance

        if validate:
            self.deformation.validate(u_box)
            rng = np.random.default_rng(1)
            pts = rng.uniform(u_box.lo, u_box.hi, size=(64, 3))
            for s in trajectory.sample(4):
                a = np.atleast_1d(self.attenuation.value(s, pts))
                if not np.all(np.isfinite(a)) or a.min() <= 0.0:
                    raise ValidationError("attenuation weight must stay positive and finite")

    # -- basic maps -------------------------------------------------------

    def world_box(self, extra=None):
        """Box that bounds everything the data can see (ROI plus extras)."""
        box = self.u_box
        if extra is not None:
            box = box.union(extra)
        return box

    def beta(self, s, x):
        """Unit direction from the source z(s) to the deformed point psi(s, x)."""
        p, single = _pts(x)
        z = self.trajectory.source_point(s)
        d = self.deformation.psi(s, p) - z
        n = np.linalg.norm(d, axis=1, keepdims=True)
        if np.any(n <= 0.0):
            raise ValidationError("point coincides with the source position")
        return _unpack(d / n, single)

    def gamma_dot(self, s, x):
        """Tangent of the deformed ray through x at parameter 1: d_psi^{-1} beta."""
        p, single = _pts(x)
        b = np.atleast_2d(self.beta(s, p))
        if self.deformation.is_identity:
            return _unpack(b, single)
        J = self.deformation.d_psi(s, p)
        try:
            g = np.linalg.solve(J, b[:, :, None])[:, :, 0]
        except np.linalg.LinAlgError as exc:
            raise InvalidDeformationError("singular deformation Jacobian") from exc
        return _unpack(g, single)

    def gamma_dot_many_s(self, svals, x):
        """gamma_dot(s_i, x) for one point over many times; (m, 3).

        Times must already lie inside trajectory segments; no per-element
        domain check is performed here (hot path of the root scan).
        """
        svals = np.asarray(svals, dtype=float)
        x = np.asarray(x, dtype=float)
        z = np.atleast_2d(self.trajectory.position(svals))
        d = self.deformation.psi_many_s(svals, x) - z
        n = np.linalg.norm(d, axis=1, keepdims=True)
        if np.any(n <= 0.0):
            raise ValidationError("point coincides with the source position")
        b = d / n
        if self.deformation.is_identity:
            return b
        J = self.deformation.d_psi_many_s(svals, x)
        try:
            return np.linalg.solve(J, b[:, :, None])[:, :, 0]
        except np.linalg.LinAlgError as exc:
            raise InvalidDeformationError("singular deformation Jacobian") from exc

    def gamma_dot_pairs(self, svals, xs):
        """gamma_dot(s_i, x_i) row by row; (k, 3).  Same domain caveat as
        gamma_dot_many_s."""
        svals = np.asarray(svals, dtype=float)
        xs = np.asarray(xs, dtype=float)
        z = np.atleast_2d(self.trajectory.position(svals))
        d = self.deformation.psi_pairs(svals, xs) - z
        n = np.linalg.norm(d, axis=1, keepdims=True)
        if np.any(n <= 0.0):
            raise ValidationError("point coincides with the source position")
        b = d / n
        if self.deformation.is_identity:
            return b
        J = self.deformation.d_psi_pairs(svals, xs)
        try:
            return np.linalg.solve(J, b[:, :, None])[:, :, 0]
        except np.linalg.LinAlgError as exc:
            raise InvalidDeformationError("singular deformation Jacobian") from exc

    def beta_s_deriv(self, s, x):
        """d/ds of beta(s, x) at fixed x (projection of the relative velocity)."""
        p, single = _pts(x)
        z = self.trajectory.source_point(s)
        zdot = np.asarray(self.trajectory.velocity(float(s)), dtype=float)
        d = self.deformation.psi(s, p) - z
        L = np.linalg.norm(d, axis=1, keepdims=True)
        b = d / L
        rel = self.deformation.d_psi_ds(s, p) - zdot
        return _unpack((rel - b * np.sum(b * rel, axis=1, keepdims=True)) / L, single)

    def gamma_dot_s_deriv(self, s, x, h_s=None):
        """d/ds of gamma_dot(s, x) at fixed x.

        Uses closed forms when the deformation supplies the mixed
        derivative of its Jacobian; otherwise a Richardson-extrapolated
        central difference in s.  Raises InsufficientDomainError when s
        sits within the difference step of a segment endpoint.
        """
        p, single = _pts(x)
        if self.deformation.is_identity:
            return _unpack(np.atleast_2d(self.beta_s_deriv(s, p)), single)
        dJds = self.deformation.d_psi_ds_dx(s, p) if self.deformation.analytic else None
        if dJds is not None:
            b_s = np.atleast_2d(self.beta_s_deriv(s, p))
            g = np.atleast_2d(self.gamma_dot(s, p))
            J = self.deformation.d_psi(s, p)
            rhs = b_s - np.einsum("nij,nj->ni", dJds, g)
            out = np.linalg.solve(J, rhs[:, :, None])[:, :, 0]
            return _unpack(out, single)
        k = self.trajectory.segment_of(s)
        a, b = self.trajectory.segments[k]
        h = h_s if h_s is not None else 1e-4 * (b - a)
        if s - h <= a or s + h >= b:
            raise InsufficientDomainError(
                f"s={s:.6g} within the difference step {h:.2g} of a segment endpoint"
            )
        def central(hh):
            return (np.atleast_2d(self.gamma_dot(s + hh, p))
                    - np.atleast_2d(self.gamma_dot(s - hh, p))) / (2.0 * hh)
        d1 = central(h)
        d2 = central(0.5 * h)
        return _unpack((4.0 * d2 - d1) / 3.0, single)

    def deformed_ray_point(self, s, x, t):
        """Point gamma_{s,x}(t) = nu(s, z(s) + t * (psi(s,x) - z(s))).

        ``x`` is a single point, ``t`` a scalar or 1-D array; returns a
        matching (3,) or (m, 3) array.  gamma(1) recovers x itself.
        """
        x = np.asarray(x, dtype=float)
        t = np.asarray(t, dtype=float)
        z = self.trajectory.source_point(s)
        d = self.deformation.psi(s, x[None, :])[0] - z
        y = z + np.multiply.outer(np.atleast_1d(t), d)
        out = self.deformation.nu(s, y)
        return out[0] if t.ndim == 0 else out

    def jacobian_det_nu(self, s, y):
        """|det d_y nu(s, y)|; equals 1 wherever the map is the identity."""
        p, single = _pts(y)
        if self.deformation.is_identity:
            return _unpack(np.ones(p.shape[0]), single)
        if self.deformation.analytic:
            x = self.deformation.nu(s, p)
            det = np.linalg.det(self.deformation.d_psi(s, x))
            if np.any(det <= 0.0):
                raise InvalidDeformationError("deformation Jacobian determinant must stay positive")
            return _unpack(1.0 / det, single)
        h = 1e-4
        J = np.empty((p.shape[0], 3, 3))
        for k in range(3):
            e = np.zeros(3)
            e[k] = h
            J[:, :, k] = (self.deformation.nu(s, p + e) - self.deformation.nu(s, p - e)) / (2.0 * h)
        det = np.linalg.det(J)
        if np.any(det <= 0.0):
            raise InvalidDeformationError("deformation Jacobian determinant must stay positive")
        return _unpack(det, single)

    def attenuation_at(self, s, x):
        return self.attenuation.value(s, x)
