"""Cone-beam data access, synthesis, and plane-derivative probes.

Data here always means the half-ray transform: the integral of the
attenuation-weighted deformed density from the source position outward
along one direction.  Two backends provide it: an analytic dataset that
quadratures a phantom on demand (the accuracy reference) and a gridded
dataset sampled on a flat virtual detector (the file-backed path).

The probe at the bottom turns that data into derivatives of plane
integrals of the frozen-time density via the Grangeat identity: the
integral of ray values over the great circle of a plane through the
source, differentiated across nearby circles.
"""

import math

import numpy as np

from .errors import (
    AccuracyError,
    CoverageError,
    DomainError,
    FormatError,
    ValidationError,
)
from .geometry import Box

_TAU_DEFAULT = 1e-3


def _unit_rows(v, what="direction"):
    v = np.atleast_2d(np.asarray(v, dtype=float))
    n = np.linalg.norm(v, axis=1, keepdims=True)
    if np.any(n <= 1e-14):
        raise ValidationError(f"zero-length {what}")
    return v / n, n[:, 0]


def _frame_rows(a):
    """Right-handed orthonormal pair completing each unit row of a."""
    pick = np.argmin(np.abs(a), axis=1)
    helper = np.zeros_like(a)
    helper[np.arange(a.shape[0]), pick] = 1.0
    e1 = np.cross(helper, a)
    e1 /= np.linalg.norm(e1, axis=1, keepdims=True)
    e2 = np.cross(a, e1)
    return e1, e2


def _clip_rays_rows(box, origins, dirs):
    """Slab clip with a separate origin per row; returns (t_lo, t_hi)."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        ta = (box.lo[None, :] - origins) * inv
        tb = (box.hi[None, :] - origins) * inv
    lo = np.where(np.isnan(ta), -np.inf, np.minimum(ta, tb))
    hi = np.where(np.isnan(tb), np.inf, np.maximum(ta, tb))
    par = dirs == 0.0
    if np.any(par):
        inside = (origins >= box.lo[None, :]) & (origins <= box.hi[None, :])
        lo = np.where(par, np.where(inside, -np.inf, np.inf), lo)
        hi = np.where(par, np.where(inside, np.inf, -np.inf), hi)
    return np.max(lo, axis=1), np.min(hi, axis=1)


class ConeBeamData:
    """Half-ray transform access for one scene."""

    scene = None

    def eval_dirs(self, s, dirs):
        """Values for many directions at one source time; (n,)."""
        raise NotImplementedError

    def eval_rays_pairs(self, svals, dirs):
        """Values for (time, direction) rows.  The default groups rows by
        time and delegates to eval_dirs; backends override when they can
        do better."""
        svals = np.asarray(svals, dtype=float)
        dirs = np.atleast_2d(np.asarray(dirs, dtype=float))
        out = np.empty(svals.shape[0])
        uniq, inv = np.unique(svals, return_inverse=True)
        for i, s in enumerate(uniq):
            rows = inv == i
            out[rows] = self.eval_dirs(float(s), dirs[rows])
        return out


class AnalyticConeBeamDataset(ConeBeamData):
    """On-demand quadrature of a phantom under the scene's motion.

    Closed forms short-circuit the static unweighted case; everything
    else runs an adaptive composite Simpson rule along each ray with a
    shared dyadic refinement ladder per batch.
    """

    def __init__(self, scene, phantom, rel_tol=1e-7, max_doublings=8, base_intervals=16):
        self.scene = scene
        self.phantom = phantom
        self.rel_tol = float(rel_tol)
        self.max_doublings = int(max_doublings)
        self.base_intervals = int(base_intervals)
        support = phantom.support_box(1e-9)
        self._box = scene.world_box(support)
        self._closed_form = scene.deformation.is_identity and scene.attenuation.is_one

    def eval_dirs(self, s, dirs):
        dirs = np.atleast_2d(np.asarray(dirs, dtype=float))
        svals = np.full(dirs.shape[0], float(s))
        return self.eval_rays_pairs(svals, dirs)

    def eval_rays_pairs(self, svals, dirs, chunk=2048):
        svals = np.asarray(svals, dtype=float)
        d, _ = _unit_rows(dirs)
        z = np.atleast_2d(self.scene.trajectory.position(svals))
        if self._closed_form:
            return self.phantom.ray_integral(z, d)
        out = np.empty(svals.shape[0])
        for i in range(0, svals.shape[0], chunk):
            sl = slice(i, min(i + chunk, svals.shape[0]))
            out[sl] = self._quad_block(svals[sl], z[sl], d[sl])
        return out

    def _integrand(self, svals, pts):
        """Attenuation-weighted deformed density at pairwise (s, point)."""
        scene = self.scene
        if scene.deformation.is_identity:
            x = pts
            vals = self.phantom.eval_f(x)
        else:
            x = scene.deformation.nu_pairs(svals, pts)
            det = np.linalg.det(scene.deformation.d_psi_pairs(svals, x))
            vals = self.phantom.eval_f(x) / det
        if not scene.attenuation.is_one:
            vals = vals * scene.attenuation.value_pairs(svals, x)
        return vals

    def _split_at_edges(self, sv, zv, dv, lo, hi):
        """Split each ray span at sharp support boundaries.

        The piecewise-smooth integrand of a solid component defeats the
        doubling rule, so crossings are located by bisection on the
        reference-space inside test and every smooth piece becomes its
        own row.  Returns (ray_index, seg_lo, seg_width) tables; with
        no sharp components this is one row per ray.
        """
        comps = getattr(self.phantom, "components", [self.phantom])
        sharp = [c for c in comps if getattr(c, "is_sharp", False)]
        n = sv.shape[0]
        if not sharp:
            return np.arange(n), lo, hi - lo
        deform = self.scene.deformation
        m = 129
        uu = np.linspace(0.0, 1.0, m)
        t = lo[:, None] + uu[None, :] * (hi - lo)[:, None]
        pts = (zv[:, None, :] + t[..., None] * dv[:, None, :]).reshape(-1, 3)
        s_rep = np.repeat(sv, m)
        x = pts if deform.is_identity else deform.nu_pairs(s_rep, pts)
        cuts = [[] for _ in range(n)]
        for c in sharp:
            ins = c.inside(x).reshape(n, m)
            ridx, j = np.nonzero(ins[:, 1:] != ins[:, :-1])
            if ridx.size == 0:
                continue
            a = t[ridx, j]
            b = t[ridx, j + 1]
            left_state = ins[ridx, j]
            srow, zrow, drow = sv[ridx], zv[ridx], dv[ridx]
            for _ in range(45):
                mid = 0.5 * (a + b)
                p = zrow + mid[:, None] * drow
                xm = p if deform.is_identity else deform.nu_pairs(srow, p)
                same = c.inside(xm) == left_state
                a = np.where(same, mid, a)
                b = np.where(same, b, mid)
            for rr, tt in zip(ridx, 0.5 * (a + b)):
                cuts[rr].append(float(tt))
        ray = []
        seg_lo = []
        seg_hi = []
        for i in range(n):
            cs = sorted(cuts[i])
            # ends sit a hair inside each piece so endpoint samples never
            # straddle the jump; the skipped slivers are far below rel_tol
            di = 1e-9 * float(hi[i] - lo[i])
            starts = [float(lo[i])] + [c + di for c in cs]
            ends = [c - di for c in cs] + [float(hi[i])]
            for a0, b0 in zip(starts, ends):
                if b0 > a0:
                    ray.append(i)
                    seg_lo.append(a0)
                    seg_hi.append(b0)
        ray = np.asarray(ray, dtype=int)
        seg_lo = np.asarray(seg_lo)
        return ray, seg_lo, np.asarray(seg_hi) - seg_lo

    def _quad_block(self, svals, z, d):
        t0, t1 = _clip_rays_rows(self._box, z, d)
        t0 = np.maximum(t0, 0.0)
        span = t1 - t0
        hit = span > 0.0
        out = np.zeros(svals.shape[0])
        if not np.any(hit):
            return out
        sv, zv, dv = svals[hit], z[hit], d[hit]
        ray, lo, width = self._split_at_edges(sv, zv, dv, t0[hit], t1[hit])
        sv, zv, dv = sv[ray], zv[ray], dv[ray]
        r = sv.shape[0]

        def sample(rows, uu):
            t = lo[rows, None] + uu[None, :] * width[rows, None]
            pts = zv[rows, None, :] + t[:, :, None] * dv[rows, None, :]
            s_rep = np.repeat(sv[rows], uu.shape[0])
            return self._integrand(s_rep, pts.reshape(-1, 3)).reshape(rows.shape[0], -1)

        def simpson(v, rows):
            m = v.shape[1] - 1
            return (width[rows] / (3.0 * m)) * (
                v[:, 0] + v[:, -1] + 4.0 * np.sum(v[:, 1:-1:2], axis=1)
                + 2.0 * np.sum(v[:, 2:-2:2], axis=1)
            )

        n = self.base_intervals
        u = np.linspace(0.0, 1.0, n + 1)
        all_rows = np.arange(r)
        vals = sample(all_rows, u)
        cur = simpson(vals, all_rows)
        active = np.ones(r, dtype=bool)
        worst = np.inf
        for _ in range(self.max_doublings):
            idx = np.flatnonzero(active)
            mids = 0.5 * (u[:-1] + u[1:])
            new_vals = sample(idx, mids)
            merged = np.zeros((r, vals.shape[1] + mids.shape[0]))
            merged[:, 0::2] = vals
            merged[idx, 1::2] = new_vals
            vals = merged
            u = np.sort(np.concatenate([u, mids]))
            refined = simpson(vals[idx], idx)
            err = np.abs(refined - cur[idx]) / 15.0
            cur[idx] = refined
            scale = max(float(np.max(np.abs(cur))), 1e-300)
            rel = err / np.maximum(np.abs(refined), 1e-9 * scale)
            active[idx[rel <= self.rel_tol]] = False
            worst = float(np.max(rel))
            if not np.any(active):
                break
        if np.any(active):
            raise AccuracyError(
                "ray quadrature did not reach the requested tolerance",
                estimate=float(np.max(np.abs(cur[active]))),
                achieved_tol=worst,
            )
        acc = np.zeros(int(np.sum(hit)))
        np.add.at(acc, ray, cur)
        out[hit] = acc
        return out


# ---------------------------------------------------------------------------
# flat virtual detector and gridded datasets


class DetectorGrid:
    """Unit-distance flat detector, one frame family per trajectory segment.

    The optical axis at time s points from the source to the region
    center; the in-plane axes come from a fixed per-segment up vector
    chosen to stay safely non-parallel to the axis over the whole
    segment.  Coordinates (u, v) are tangent-plane offsets at unit
    distance, so the angular size of a cell is about the grid step.
    """

    def __init__(self, scene, n_s, n_u, n_v, u_half=None, margin=1.1):
        self.scene = scene
        self.n_s = int(n_s)
        self.n_u = int(n_u)
        self.n_v = int(n_v)
        if min(self.n_s, self.n_u, self.n_v) < 8:
            raise ValidationError("detector grids need at least 8 samples per axis")
        traj = scene.trajectory
        self.center = scene.u_box.center
        self.s_grids = [traj.segment_grid(k, self.n_s) for k in range(len(traj.segments))]
        self.ups = [self._pick_up(k) for k in range(len(traj.segments))]
        if u_half is None:
            r_cov = 1.3 * scene.u_box.radius
            d_c = self._min_center_distance()
            ratio = min(r_cov / d_c, 0.98)
            u_half = margin * math.tan(math.asin(ratio))
        self.u_half = float(u_half)
        self.u_grid = np.linspace(-self.u_half, self.u_half, self.n_u)
        self.v_grid = np.linspace(-self.u_half, self.u_half, self.n_v)
        self.u_step = self.u_grid[1] - self.u_grid[0]

    def _min_center_distance(self):
        sv = self.scene.trajectory.sample(512)
        z = np.atleast_2d(self.scene.trajectory.position(sv))
        return float(np.min(np.linalg.norm(z - self.center, axis=1)))

    def _pick_up(self, k):
        sv = self.scene.trajectory.segment_grid(k, 64)
        z = np.atleast_2d(self.scene.trajectory.position(sv))
        a = self.center[None, :] - z
        a /= np.linalg.norm(a, axis=1, keepdims=True)
        worst = np.max(np.abs(a), axis=0)
        i = int(np.argmin(worst))
        if worst[i] > 0.9:
            raise ValidationError("no coordinate axis stays transverse to the optical axis")
        up = np.zeros(3)
        up[i] = 1.0
        return up

    def frame(self, segment, s):
        """(axis, e_u, e_v) unit triple at time s."""
        z = self.scene.trajectory.position(float(s))
        a = self.center - np.asarray(z, dtype=float)
        a = a / np.linalg.norm(a)
        up = self.ups[segment]
        e_u = np.cross(up, a)
        e_u = e_u / np.linalg.norm(e_u)
        e_v = np.cross(a, e_u)
        return a, e_u, e_v

    def dirs(self, segment, s):
        """Unit ray directions of the full detector grid; (n_u*n_v, 3)."""
        a, e_u, e_v = self.frame(segment, s)
        uu, vv = np.meshgrid(self.u_grid, self.v_grid, indexing="ij")
        d = a[None, :] + uu.reshape(-1, 1) * e_u[None, :] + vv.reshape(-1, 1) * e_v[None, :]
        return d / np.linalg.norm(d, axis=1, keepdims=True)

    def project(self, segment, s, dirs):
        """Detector coordinates of directions; (u, v, forward mask)."""
        a, e_u, e_v = self.frame(segment, s)
        d = np.atleast_2d(np.asarray(dirs, dtype=float))
        den = d @ a
        fwd = den > 1e-9
        safe = np.where(fwd, den, 1.0)
        return (d @ e_u) / safe, (d @ e_v) / safe, fwd


class GriddedConeBeamDataset(ConeBeamData):
    """Half-ray values tabulated on (time, detector) grids.

    Lookup is linear in s between the two bracketing time samples and
    bilinear on the detector.  Directions outside the tabulated cone read
    zero when the ray provably misses the recorded coverage box or when
    the stored cone boundary is dark, which certifies that everything
    visible was recorded; a bright boundary means real truncation and
    such rays raise CoverageError.
    """

    def __init__(self, scene, detector, values, coverage_box):
        self.scene = scene
        self.detector = detector
        self.values = [np.asarray(v, dtype=float) for v in values]
        if len(self.values) != len(scene.trajectory.segments):
            raise FormatError("one value block per trajectory segment required")
        shape = (detector.n_s, detector.n_u, detector.n_v)
        for v in self.values:
            if v.shape != shape:
                raise FormatError(f"value block shaped {v.shape}, expected {shape}")
        self.coverage_box = coverage_box
        peak = max(float(np.max(np.abs(v))) for v in self.values)
        edge = max(
            max(float(np.max(np.abs(v[:, [0, -1], :]))),
                float(np.max(np.abs(v[:, :, [0, -1]]))))
            for v in self.values
        )
        self._edge_dark = peak == 0.0 or edge <= 1e-6 * peak

    @property
    def natural_tau(self):
        """Angular step matched to the detector cell size."""
        return float(self.detector.u_step)

    @classmethod
    def synthesize(cls, scene, phantom, n_s=48, n_u=96, n_v=96, rel_tol=1e-7,
                   edge_check=True, u_half=None):
        """Sample an analytic dataset onto detector grids."""
        det = DetectorGrid(scene, n_s, n_u, n_v, u_half=u_half)
        src = AnalyticConeBeamDataset(scene, phantom, rel_tol=rel_tol)
        blocks = []
        for k in range(len(scene.trajectory.segments)):
            blk = np.empty((det.n_s, det.n_u, det.n_v))
            for i, s in enumerate(det.s_grids[k]):
                blk[i] = src.eval_dirs(float(s), det.dirs(k, float(s))).reshape(det.n_u, det.n_v)
            blocks.append(blk)
        peak = max(float(np.max(np.abs(b))) for b in blocks)
        if edge_check and peak > 0.0:
            edge = max(float(np.max(np.abs(b[:, [0, -1], :]))) for b in blocks)
            edge = max(edge, max(float(np.max(np.abs(b[:, :, [0, -1]]))) for b in blocks))
            if edge > 1e-6 * peak:
                raise ValidationError(
                    "object not contained in the detector field of view "
                    f"(edge/peak = {edge / peak:.2e})"
                )
        support = phantom.support_box(1e-9)
        coverage = scene.world_box(support)
        return cls(scene, det, blocks, coverage)

    def eval_dirs(self, s, dirs):
        dirs = np.atleast_2d(np.asarray(dirs, dtype=float))
        traj = self.scene.trajectory
        k = traj.segment_of(float(s))
        sg = self.detector.s_grids[k]
        step = sg[1] - sg[0]
        pos = (float(s) - sg[0]) / step
        if pos < -0.5 or pos > len(sg) - 0.5:
            raise CoverageError(
                f"time {float(s):.6g} outside the sampled range of segment {k}"
            )
        i0 = int(np.clip(np.floor(pos), 0, len(sg) - 2))
        w = float(np.clip(pos - i0, 0.0, 1.0))

        # Re-bin through the midpoint of each ray's crossing of the coverage
        # region: neighbor views look up the ray through that anchor point,
        # so the blended rays agree at the object instead of being parallel
        # translates of the query ray.  At a node time the anchor ray is the
        # query ray itself.  Rays that miss the region contribute zero and
        # are never checked against the detector cone.
        z_q = np.asarray(traj.position(float(s)), dtype=float)
        t0, t1 = _clip_rays_rows(self.coverage_box,
                                 np.broadcast_to(z_q, dirs.shape), dirs)
        lo = np.maximum(t0, 0.0)
        hit = lo < t1
        out = np.zeros(dirs.shape[0])
        if not np.any(hit):
            return out
        anchors = z_q + (0.5 * (lo[hit] + t1[hit]))[:, None] * dirs[hit]

        vals = np.zeros(anchors.shape[0])
        for idx, wgt in ((i0, 1.0 - w), (i0 + 1, w)):
            if wgt == 0.0:
                continue
            rb = anchors - np.asarray(traj.position(float(sg[idx])), dtype=float)
            d_k = rb / np.linalg.norm(rb, axis=1, keepdims=True)
            vals += wgt * self._bilinear(k, float(sg[idx]), self.values[k][idx], d_k)
        out[hit] = vals
        return out

    def _bilinear(self, segment, s, block, dirs):
        det = self.detector
        u, v, fwd = det.project(segment, s, dirs)
        vals = np.zeros(dirs.shape[0])
        in_u = (u >= det.u_grid[0]) & (u <= det.u_grid[-1])
        in_v = (v >= det.v_grid[0]) & (v <= det.v_grid[-1])
        ok = fwd & in_u & in_v
        missed = ~ok
        if np.any(missed) and not self._edge_dark:
            z = np.asarray(self.scene.trajectory.position(s), dtype=float)
            d_miss = dirs[missed]
            t0, t1 = _clip_rays_rows(self.coverage_box,
                                     np.broadcast_to(z, d_miss.shape), d_miss)
            if np.any(np.maximum(t0, 0.0) < t1):
                raise CoverageError(
                    "ray through the coverage region falls outside the tabulated detector cone"
                )
        if not np.any(ok):
            return vals
        fi = np.clip((u[ok] - det.u_grid[0]) / det.u_step, 0.0, det.n_u - 1.0 - 1e-12)
        fj = np.clip((v[ok] - det.v_grid[0]) / det.u_step, 0.0, det.n_v - 1.0 - 1e-12)
        i0 = fi.astype(int)
        j0 = fj.astype(int)
        du = fi - i0
        dv = fj - j0
        vals[ok] = (
            block[i0, j0] * (1 - du) * (1 - dv)
            + block[i0 + 1, j0] * du * (1 - dv)
            + block[i0, j0 + 1] * (1 - du) * dv
            + block[i0 + 1, j0 + 1] * du * dv
        )
        return vals


class MaskedConeBeamData(ConeBeamData):
    """Hard angular mask around a designated point, for locality checks.

    Rays whose direction is further than cutoff_angle from the
    source-to-point direction are replaced by zero.
    """

    def __init__(self, base, point, cutoff_angle):
        self.base = base
        self.scene = base.scene
        self.point = np.asarray(point, dtype=float)
        self.cutoff_angle = float(cutoff_angle)

    def _mask(self, svals, dirs):
        z = np.atleast_2d(self.scene.trajectory.position(np.asarray(svals, dtype=float)))
        w = self.point[None, :] - z
        w /= np.linalg.norm(w, axis=1, keepdims=True)
        cosang = np.sum(dirs * w, axis=1)
        return cosang >= math.cos(self.cutoff_angle)

    def eval_dirs(self, s, dirs):
        dirs = np.atleast_2d(np.asarray(dirs, dtype=float))
        vals = self.base.eval_dirs(s, dirs)
        return vals * self._mask(np.full(dirs.shape[0], float(s)), dirs)

    def eval_rays_pairs(self, svals, dirs):
        dirs = np.atleast_2d(np.asarray(dirs, dtype=float))
        vals = self.base.eval_rays_pairs(svals, dirs)
        return vals * self._mask(svals, dirs)


# ---------------------------------------------------------------------------
# smooth directional localization window


class DirectionalCutoff:
    """C-infinity window over ray directions, centered on a target point.

    Degree-zero homogeneous in the direction.  Full weight within the
    inner angle a1 = 2 asin(eps_inner / (2 d_min)) of the source-to-target
    direction, zero beyond a2 = acos(1 - eps_outer), and an infinitely
    smooth monotone ramp in between.
    """

    def __init__(self, d_min, eps_inner=0.05, eps_outer=0.3):
        self.d_min = float(d_min)
        self.eps_inner = float(eps_inner)
        self.eps_outer = float(eps_outer)
        if not (0.0 < eps_outer < 2.0):
            raise ValidationError("outer cutoff parameter must lie in (0, 2)")
        if not (0.0 < eps_inner < 2.0 * self.d_min):
            raise ValidationError("inner cutoff radius must lie in (0, 2*d_min)")
        self.a1 = 2.0 * math.asin(self.eps_inner / (2.0 * self.d_min))
        self.a2 = math.acos(1.0 - self.eps_outer)
        if not self.a1 < self.a2:
            raise ValidationError(
                f"incompatible cutoff sizes: inner angle {self.a1:.4g} must be below "
                f"outer angle {self.a2:.4g}; shrink eps_inner or grow eps_outer"
            )

    @staticmethod
    def _bump_ramp(u):
        """Smooth monotone 0 -> 1 on [0, 1], flat to all orders at both ends."""
        u = np.clip(u, 0.0, 1.0)
        with np.errstate(divide="ignore", over="ignore"):
            ea = np.where(u > 0.0, np.exp(-1.0 / np.maximum(u, 1e-300)), 0.0)
            eb = np.where(u < 1.0, np.exp(-1.0 / np.maximum(1.0 - u, 1e-300)), 0.0)
        return ea / (ea + eb)

    def weight_of_angle(self, ang):
        ang = np.asarray(ang, dtype=float)
        u = (self.a2 - ang) / (self.a2 - self.a1)
        return self._bump_ramp(u)

    def weights(self, z, point, dirs):
        """Window values for rays from source z toward unit dirs."""
        w = np.asarray(point, dtype=float) - np.asarray(z, dtype=float)
        w = w / np.linalg.norm(w)
        cosang = np.clip(np.atleast_2d(dirs) @ w, -1.0, 1.0)
        return self.weight_of_angle(np.arccos(cosang))

    def weights_pairs(self, zs, point, dirs):
        w = np.asarray(point, dtype=float)[None, :] - np.atleast_2d(zs)
        w = w / np.linalg.norm(w, axis=1, keepdims=True)
        cosang = np.clip(np.sum(np.atleast_2d(dirs) * w, axis=1), -1.0, 1.0)
        return self.weight_of_angle(np.arccos(cosang))


# ---------------------------------------------------------------------------
# plane-derivative probes


def grangeat_rows(data, svals, alphas, n_circle=256, tau_h=None, cutoff=None,
                  cutoff_points=None, row_chunk=None, richardson=True):
    """First p-derivative of plane integrals of the frozen-time density,
    one row per (time, plane normal), extracted from ray data.

    For each row the great circles at polar offsets +-tau_h (plus
    +-2*tau_h when richardson is on) around the plane through the source
    are integrated over azimuth; a central difference across them yields
    the derivative, Richardson-extrapolated when four circles are used.
    The normal need not be unit: the result scales with the inverse
    square of its length, matching the homogeneous extension of the
    plane transform.

    cutoff, if given, multiplies ray values by a direction window
    centered on cutoff_points (one target point per row).
    """
    svals = np.asarray(svals, dtype=float)
    a_unit, a_norm = _unit_rows(alphas, what="plane normal")
    r = svals.shape[0]
    if tau_h is None:
        tau_h = getattr(data, "natural_tau", _TAU_DEFAULT)
    tau_h = float(tau_h)
    if not 0.0 < tau_h < 0.2:
        raise ValidationError("circle offset step must lie in (0, 0.2) radians")
    if cutoff is not None:
        pts = np.atleast_2d(np.asarray(cutoff_points, dtype=float))
        if pts.shape[0] == 1:
            pts = np.broadcast_to(pts, (r, 3))
        if pts.shape != (r, 3):
            raise ValidationError("need one cutoff target point per probe row")
    n_tau = 4 if richardson else 2
    if row_chunk is None:
        row_chunk = max(1, 200_000 // (n_tau * n_circle))

    taus = np.array([tau_h, -tau_h, 2.0 * tau_h, -2.0 * tau_h][:n_tau])
    ang = 2.0 * np.pi * np.arange(n_circle) / n_circle
    ca, sa = np.cos(ang), np.sin(ang)
    out = np.empty(r)
    for i0 in range(0, r, row_chunk):
        sl = slice(i0, min(i0 + row_chunk, r))
        au = a_unit[sl]
        sv = svals[sl]
        m = au.shape[0]
        e1, e2 = _frame_rows(au)
        ring = ca[:, None] * e1[:, None, :] + sa[:, None] * e2[:, None, :]  # (m, nc, 3)
        dirs = (np.sin(taus)[None, :, None, None] * au[:, None, None, :]
                + np.cos(taus)[None, :, None, None] * ring[:, None, :, :])
        flat = dirs.reshape(-1, 3)
        s_flat = np.repeat(sv, n_tau * n_circle)
        vals = data.eval_rays_pairs(s_flat, flat)
        if cutoff is not None:
            z_flat = np.atleast_2d(data.scene.trajectory.position(s_flat))
            p_flat = np.repeat(pts[sl], n_tau * n_circle, axis=0)
            w = np.asarray(p_flat) - z_flat
            w /= np.linalg.norm(w, axis=1, keepdims=True)
            cosang = np.clip(np.sum(flat * w, axis=1), -1.0, 1.0)
            vals = vals * cutoff.weight_of_angle(np.arccos(cosang))
        C = vals.reshape(m, n_tau, n_circle).mean(axis=2) * (2.0 * np.pi)
        d1 = (C[:, 0] - C[:, 1]) / (2.0 * tau_h)
        if richardson:
            d2 = (C[:, 2] - C[:, 3]) / (4.0 * tau_h)
            out[sl] = -(4.0 * d1 - d2) / 3.0
        else:
            out[sl] = -d1
    return out / a_norm**2


def grangeat_plane_derivative(data, s, alpha, n_circle=256, tau_h=None, cutoff=None,
                              cutoff_point=None):
    """Scalar probe: -d/dp of the plane integral of the frozen-time
    density at the plane through the source with the given normal."""
    return float(grangeat_rows(
        data,
        np.array([float(s)]),
        np.asarray(alpha, dtype=float)[None, :],
        n_circle=n_circle,
        tau_h=tau_h,
        cutoff=cutoff,
        cutoff_points=None if cutoff_point is None else np.asarray(cutoff_point, dtype=float)[None, :],
    )[0])


def q_dynamic(scene, data, x0, s, theta, n_circle=256, tau_h=None, cutoff=None):
    """Attenuation-compensated plane-derivative value of one root.

    The probe normal is the deformation pullback of theta at (s, x0) and
    the result is divided by the attenuation weight at (s, x0)."""
    x0 = np.asarray(x0, dtype=float)
    theta = np.asarray(theta, dtype=float)
    J = scene.deformation.d_psi(float(s), x0[None, :])[0]
    alpha = np.linalg.solve(J.T, theta)
    val = grangeat_plane_derivative(
        data, s, alpha, n_circle=n_circle, tau_h=tau_h,
        cutoff=cutoff, cutoff_point=x0 if cutoff is not None else None,
    )
    return val / float(scene.attenuation.value(float(s), x0))
