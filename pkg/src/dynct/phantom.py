"""Analytic phantoms with closed-form line, ray and plane integrals.

Two primitive families are supported: isotropic Gaussian blobs and
solid ellipsoids (balls as the special case).  Every primitive knows
its density, its full-line and half-line integrals, and the derivative
of its plane integral, all in closed form, so they serve as exact
oracles for the data pipeline.

Plane integrals are defined for an arbitrary nonzero normal via the
homogeneous extension: rp(alpha, p) = rp(alpha/|alpha|, p/|alpha|)/|alpha|.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.special import erfc

from .errors import AccuracyError, ValidationError
from .geometry import Box, _pts, _unpack

_SQRT_PI = np.sqrt(np.pi)


def _unit(v, axis=-1):
    n = np.linalg.norm(v, axis=axis, keepdims=True)
    return v / n, np.squeeze(n, axis=axis)


@dataclass(frozen=True)
class GaussianBlob:
    """amplitude * exp(-|x - center|^2 / width^2)."""

    is_sharp = False

    center: tuple
    amplitude: float
    width: float

    def __post_init__(self):
        if self.width <= 0.0:
            raise ValidationError("gaussian width must be positive")
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))

    @property
    def c(self):
        return np.asarray(self.center)

    def eval_f(self, x):
        r2 = np.sum((x - self.c) ** 2, axis=-1)
        return self.amplitude * np.exp(-r2 / self.width**2)

    def line_integral(self, p, omega):
        r = self.c - p
        t_star = np.sum(r * omega, axis=-1)
        d2 = np.sum(r * r, axis=-1) - t_star**2
        return self.amplitude * _SQRT_PI * self.width * np.exp(-d2 / self.width**2)

    def ray_integral(self, p, omega):
        r = self.c - p
        t_star = np.sum(r * omega, axis=-1)
        d2 = np.sum(r * r, axis=-1) - t_star**2
        return (
            0.5
            * self.amplitude
            * _SQRT_PI
            * self.width
            * np.exp(-d2 / self.width**2)
            * erfc(-t_star / self.width)
        )

    def _plane_args(self, alpha, p):
        a_hat, a_norm = _unit(np.asarray(alpha, dtype=float))
        q = (np.asarray(p, dtype=float) / a_norm) - np.sum(a_hat * self.c, axis=-1)
        return q, a_norm

    def plane_integral(self, alpha, p):
        q, a_norm = self._plane_args(alpha, p)
        return self.amplitude * np.pi * self.width**2 * np.exp(-(q**2) / self.width**2) / a_norm

    def plane_integral_dp(self, alpha, p):
        q, a_norm = self._plane_args(alpha, p)
        w2 = self.width**2
        return self.amplitude * np.pi * w2 * (-2.0 * q / w2) * np.exp(-(q**2) / w2) / a_norm**2

    def plane_integral_dp2(self, alpha, p):
        q, a_norm = self._plane_args(alpha, p)
        w2 = self.width**2
        return (
            self.amplitude
            * np.pi
            * (4.0 * q**2 / w2 - 2.0)
            * np.exp(-(q**2) / w2)
            / a_norm**3
        )

    def support_radius(self, tol=1e-12):
        # floor of one width keeps a valid box even for a null component
        if self.amplitude == 0.0 or tol >= abs(self.amplitude):
            return self.width
        return self.width * max(np.sqrt(np.log(abs(self.amplitude) / tol)), 1.0)

    def support_box(self, tol=1e-12):
        r = self.support_radius(tol)
        return Box(self.c - r, self.c + r)


@dataclass(frozen=True)
class Ellipsoid:
    """Solid ellipsoid: amplitude where |D^{-1} R (x - center)| <= 1.

    ``rotation`` maps world coordinates into the principal frame; D is
    diag(semi_axes).
    """

    is_sharp = True

    center: tuple
    semi_axes: tuple
    amplitude: float
    rotation: tuple = field(default=((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0)))

    def __post_init__(self):
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        object.__setattr__(self, "semi_axes", tuple(float(a) for a in self.semi_axes))
        R = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        if np.max(np.abs(R @ R.T - np.eye(3))) > 1e-10 or np.linalg.det(R) < 0.0:
            raise ValidationError("ellipsoid rotation must be a proper orthogonal matrix")
        object.__setattr__(self, "rotation", tuple(tuple(row) for row in R))
        if min(self.semi_axes) <= 0.0:
            raise ValidationError("ellipsoid semi-axes must be positive")

    @property
    def c(self):
        return np.asarray(self.center)

    @property
    def R(self):
        return np.asarray(self.rotation)

    def eval_f(self, x):
        u = (x - self.c) @ self.R.T / np.asarray(self.semi_axes)
        return np.where(np.sum(u * u, axis=-1) <= 1.0, self.amplitude, 0.0)

    def inside(self, x):
        u = (x - self.c) @ self.R.T / np.asarray(self.semi_axes)
        return np.sum(u * u, axis=-1) <= 1.0

    def _chord(self, p, omega):
        """Entry/exit parameters of the line p + t omega; (nan, nan) on miss."""
        D_inv = 1.0 / np.asarray(self.semi_axes)
        q = (p - self.c) @ self.R.T * D_inv
        m = omega @ self.R.T * D_inv
        mm = np.sum(m * m, axis=-1)
        qm = np.sum(q * m, axis=-1)
        disc = qm**2 - mm * (np.sum(q * q, axis=-1) - 1.0)
        with np.errstate(invalid="ignore"):
            root = np.sqrt(disc)
            t0 = (-qm - root) / mm
            t1 = (-qm + root) / mm
        miss = disc <= 0.0
        t0 = np.where(miss, np.nan, t0)
        t1 = np.where(miss, np.nan, t1)
        return t0, t1

    def line_integral(self, p, omega):
        t0, t1 = self._chord(p, omega)
        length = np.where(np.isnan(t0), 0.0, t1 - t0)
        return self.amplitude * length

    def ray_integral(self, p, omega):
        t0, t1 = self._chord(p, omega)
        lo = np.maximum(t0, 0.0)
        length = np.where(np.isnan(t0), 0.0, np.maximum(t1 - lo, 0.0))
        return self.amplitude * length

    def _plane_args(self, alpha, p):
        a_hat, a_norm = _unit(np.asarray(alpha, dtype=float))
        m = a_hat @ self.R.T * np.asarray(self.semi_axes)
        m_norm = np.linalg.norm(m, axis=-1)
        q = (np.asarray(p, dtype=float) / a_norm - np.sum(a_hat * self.c, axis=-1)) / m_norm
        return q, m_norm, a_norm

    def plane_integral(self, alpha, p):
        q, m_norm, a_norm = self._plane_args(alpha, p)
        vol = np.prod(self.semi_axes)
        val = np.pi * vol * np.clip(1.0 - q**2, 0.0, None) / m_norm
        return self.amplitude * val / a_norm

    def plane_integral_dp(self, alpha, p):
        q, m_norm, a_norm = self._plane_args(alpha, p)
        vol = np.prod(self.semi_axes)
        inside = np.abs(q) <= 1.0
        val = np.where(inside, -2.0 * np.pi * vol * q / m_norm**2, 0.0)
        return self.amplitude * val / a_norm**2

    def plane_integral_dp2(self, alpha, p):
        # piecewise: constant inside the shadow interval, zero outside;
        # the jump at |q| = 1 is not represented
        q, m_norm, a_norm = self._plane_args(alpha, p)
        vol = np.prod(self.semi_axes)
        inside = np.abs(q) <= 1.0
        val = np.where(inside, -2.0 * np.pi * vol / m_norm**3, 0.0)
        return self.amplitude * val / a_norm**3

    def support_radius(self, tol=1e-12):
        return max(self.semi_axes)

    def support_box(self, tol=1e-12):
        half = np.sqrt(np.sum((self.R.T * np.asarray(self.semi_axes)) ** 2, axis=1))
        return Box(self.c - half, self.c + half)


def ball(center, radius, amplitude=1.0):
    """Solid ball as a degenerate ellipsoid."""
    return Ellipsoid(tuple(center), (radius, radius, radius), amplitude)


class Phantom:
    """Finite sum of analytic primitives.

    Parameters
    ----------
    components : sequence of GaussianBlob / Ellipsoid
    check_box : Box, optional
        When given, the effective support (threshold 1e-12 for
        Gaussians) must lie inside it.
    """

    def __init__(self, components, check_box=None):
        comps = list(components)
        if not comps:
            raise ValidationError("phantom needs at least one component")
        self.components = comps
        if check_box is not None:
            sup = self.support_box(1e-12)
            if not (np.all(sup.lo >= check_box.lo) and np.all(sup.hi <= check_box.hi)):
                raise ValidationError("phantom support extends outside the declared box")

    def _sum(self, method, *args):
        out = None
        for comp in self.components:
            v = getattr(comp, method)(*args)
            out = v if out is None else out + v
        return out

    def eval_f(self, x):
        p, single = _pts(x)
        return _unpack(self._sum("eval_f", p), single)

    def line_integral(self, p, omega):
        """Full-line integral through p with unit direction omega (broadcasts)."""
        p, omega = np.broadcast_arrays(np.asarray(p, dtype=float), np.asarray(omega, dtype=float))
        omega = omega / np.linalg.norm(omega, axis=-1, keepdims=True)
        return self._sum("line_integral", p, omega)

    def ray_integral(self, p, omega):
        """Half-line integral (t >= 0) from p in unit direction omega."""
        p, omega = np.broadcast_arrays(np.asarray(p, dtype=float), np.asarray(omega, dtype=float))
        omega = omega / np.linalg.norm(omega, axis=-1, keepdims=True)
        return self._sum("ray_integral", p, omega)

    def plane_integral(self, alpha, p):
        return self._sum("plane_integral", alpha, p)

    def radon_p_derivative(self, alpha, p):
        """d/dp of the plane integral with normal alpha (need not be unit)."""
        return self._sum("plane_integral_dp", alpha, p)

    def radon_p_second_derivative(self, alpha, p):
        return self._sum("plane_integral_dp2", alpha, p)

    def support_box(self, tol=1e-12):
        box = None
        for comp in self.components:
            b = comp.support_box(tol)
            box = b if box is None else box.union(b)
        return box

    def translated(self, shift):
        shift = np.asarray(shift, dtype=float)
        out = []
        for comp in self.components:
            if isinstance(comp, GaussianBlob):
                out.append(GaussianBlob(tuple(comp.c + shift), comp.amplitude, comp.width))
            else:
                out.append(Ellipsoid(tuple(comp.c + shift), comp.semi_axes, comp.amplitude,
                                     comp.rotation))
        return Phantom(out)

    def rotated(self, Q):
        """Phantom pushed forward by the world rotation x -> Q x (about the origin)."""
        Q = np.asarray(Q, dtype=float)
        out = []
        for comp in self.components:
            c_new = tuple(Q @ comp.c)
            if isinstance(comp, GaussianBlob):
                out.append(GaussianBlob(c_new, comp.amplitude, comp.width))
            else:
                out.append(Ellipsoid(c_new, comp.semi_axes, comp.amplitude,
                                     tuple(map(tuple, comp.R @ Q.T))))
        return Phantom(out)


# ---------------------------------------------------------------------------
# ray data for the deforming object


def dynamic_ray_integrals(scene, phantom, s, dirs, rel_tol=1e-7, initial_step=None,
                          max_doublings=12, on_fail="raise"):
    """Half-line integrals of the deformed, weighted density, batched.

    Integrates A(s, nu(s, y)) * |det d_y nu(s, y)| * f(nu(s, y)) along
    y = z(s) + t * dir for t >= 0, clipped to the world box, with a
    composite Simpson rule refined dyadically until the Richardson error
    estimate meets ``rel_tol`` (relative to the largest value in the
    batch).  ``on_fail`` selects between raising AccuracyError and
    returning the best estimate.
    """
    d, single = _pts(dirs)
    d = d / np.linalg.norm(d, axis=1, keepdims=True)
    z = scene.trajectory.source_point(s)
    box = scene.world_box(phantom.support_box(1e-9))
    t_lo, t_hi = box.clip_ray(z, d)
    t_lo = np.maximum(np.atleast_1d(t_lo), 0.0)
    t_hi = np.atleast_1d(t_hi)
    span = t_hi - t_lo
    hit = span > 0.0
    out = np.zeros(d.shape[0])
    if not np.any(hit):
        return _unpack(out, single)
    dh = d[hit]
    lo = t_lo[hit]
    sp = span[hit]

    deform = scene.deformation
    atten = scene.attenuation

    def integrand(u):
        # u: (m,) nodes on [0, 1]; returns (n_hit, m) values scaled by span
        t = lo[:, None] + u[None, :] * sp[:, None]
        y = z[None, None, :] + t[:, :, None] * dh[:, None, :]
        flat = y.reshape(-1, 3)
        if deform.is_identity:
            vals = phantom.eval_f(flat)
            if not atten.is_one:
                vals = vals * atten.value(s, flat)
        else:
            x = deform.nu(s, flat)
            det = np.linalg.det(deform.d_psi(s, x))
            vals = phantom.eval_f(x) / det
            if not atten.is_one:
                vals = vals * atten.value(s, x)
        return vals.reshape(t.shape) * sp[:, None]

    if initial_step is not None:
        n = int(2 * max(4, np.ceil(np.max(sp) / (2.0 * initial_step))))
    else:
        n = 16

    def simpson(n_panels):
        u = np.linspace(0.0, 1.0, n_panels + 1)
        F = integrand(u)
        w = np.ones(n_panels + 1)
        w[1:-1:2] = 4.0
        w[2:-1:2] = 2.0
        return F @ w / (3.0 * n_panels)

    prev = simpson(n)
    for _ in range(max_doublings):
        n *= 2
        cur = simpson(n)
        scale = max(np.max(np.abs(cur)), 1e-300)
        err = np.abs(cur - prev) / 15.0
        if np.max(err / np.maximum(np.abs(cur), 1e-9 * scale)) <= rel_tol:
            out[hit] = cur
            return _unpack(out, single)
        prev = cur
    if on_fail == "raise":
        raise AccuracyError(
            "ray quadrature did not reach the requested tolerance",
            estimate=prev, achieved_tol=float(np.max(err / np.maximum(np.abs(cur), 1e-9 * scale))),
        )
    out[hit] = prev
    return _unpack(out, single)


def dynamic_ray_integral(scene, phantom, s, beta, **kw):
    """Single-ray convenience wrapper around dynamic_ray_integrals."""
    return float(dynamic_ray_integrals(scene, phantom, s, np.asarray(beta, dtype=float), **kw))
