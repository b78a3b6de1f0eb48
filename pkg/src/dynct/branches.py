"""Root branches of the view condition and critical-direction analysis.

For a reconstruction point x0 and a probe direction theta, the usable
source times are the roots s of g(s) = theta . gamma_dot(s, x0), where
gamma_dot is the tangent of the deformed ray through x0.  This module
finds those roots, grades them by transversality margin, distance to
segment endpoints, and angular distance to the critical direction set,
and turns the grades into a smooth partition of unity over the branches.
It also traces the curve of critical directions produced by the motion
(the artifact generator) and its endpoint limit.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ContinuationError,
    CriticalityError,
    DegenerateDirectionError,
    DegenerateLimitError,
    NoAdmissibleRootError,
    ValidationError,
)

_TINY = 1e-300


def smooth_window(d, eps):
    """C1 ramp: 0 for d <= eps, 1 for d >= 2*eps, cubic in between."""
    if eps <= 0.0:
        raise ValidationError("window width must be positive")
    u = np.clip((np.asarray(d, dtype=float) - eps) / eps, 0.0, 1.0)
    out = u * u * (3.0 - 2.0 * u)
    if np.ndim(d) == 0:
        return float(out)
    return out


def antipodal_angle(u, v):
    """Angle between lines spanned by unit vectors (0 .. pi/2)."""
    d = np.abs(np.sum(np.atleast_2d(u) * np.atleast_2d(v), axis=-1))
    a = np.arccos(np.clip(d, 0.0, 1.0))
    return float(a[0]) if np.ndim(u) == 1 and np.ndim(v) == 1 else a


@dataclass
class AdmissibilityParams:
    """Tuning knobs for root admissibility and suppression windows.

    Windows ramp from 0 to 1 over [eps, 2*eps]; a branch scores zero when
    its transversality margin, endpoint distance, or critical-set distance
    falls below the corresponding eps.
    """

    eps_margin: float
    eps_end_frac: float = 0.02
    eps_arc: float = math.radians(3.0)
    scan_nodes: int = 512
    root_tol: float = 1e-10
    guard_cells: float = 5.0
    arc_samples: int = 17
    arc_skip_frac: float = 0.02

    def __post_init__(self):
        if self.eps_margin <= 0.0 or self.eps_end_frac <= 0.0 or self.eps_arc <= 0.0:
            raise ValidationError("window widths must be positive")
        if self.scan_nodes < 8:
            raise ValidationError("root scan needs at least 8 nodes per segment")

    def eps_end(self, trajectory, segment):
        a, b = trajectory.segments[segment]
        return self.eps_end_frac * (b - a)

    @classmethod
    def for_scene(cls, scene, x0=None, n_probe=64, **overrides):
        """Scale the margin width off the typical size of d_s gamma_dot
        at a probe point (the domain center by default)."""
        if "eps_margin" in overrides:
            return cls(**overrides)
        probe = np.asarray(x0, dtype=float) if x0 is not None else scene.u_box.center
        norms = []
        for k, (a, b) in enumerate(scene.trajectory.segments):
            sv = scene.trajectory.segment_grid(k, n_probe)
            h = 1e-4 * (b - a)
            dg = (scene.gamma_dot_many_s(sv + h, probe)
                  - scene.gamma_dot_many_s(sv - h, probe)) / (2.0 * h)
            norms.append(np.linalg.norm(dg, axis=1))
        med = float(np.median(np.concatenate(norms)))
        if med <= 0.0:
            raise ValidationError("degenerate geometry: d_s gamma_dot vanishes identically")
        return cls(eps_margin=0.05 * med, **overrides)


@dataclass
class RootBranch:
    """One admissible root of the view condition for a fixed (x0, theta)."""

    s: float
    segment: int
    ordinal: int
    margin: float
    end_dist: float
    gamma_dot: np.ndarray = field(repr=False)
    gamma_dot_s: np.ndarray = field(repr=False)
    arc_dist: float | None = None


@dataclass
class PartitionWeights:
    """Smooth partition of unity over the admissible branches."""

    branches: list
    weights: np.ndarray
    n_values: np.ndarray
    total: float


class BranchScanner:
    """Per-point root machinery shared by the public helpers and the
    reconstruction engine.

    Tabulates gamma_dot(s, x0) once on a cell-centered grid per segment,
    then finds roots for whole batches of probe directions with one
    bracketing pass and a vectorized bisection polish.
    """

    def __init__(self, scene, x0, params=None):
        self.scene = scene
        self.x0 = np.asarray(x0, dtype=float)
        self.params = params if params is not None else AdmissibilityParams.for_scene(scene, x0)
        n = self.params.scan_nodes
        grids, blocks = [], []
        start = 0
        for k, (a, b) in enumerate(scene.trajectory.segments):
            sv = scene.trajectory.segment_grid(k, n)
            grids.append(sv)
            blocks.append((start, n, a, b, (b - a) / n))
            start += n
        self.s_grid = np.concatenate(grids)
        self.blocks = blocks
        self.gdot = scene.gamma_dot_many_s(self.s_grid, self.x0)
        self._margin_h = [1e-4 * (b - a) for (_, _, a, b, _) in blocks]

    def roots_for(self, thetas):
        """Admissible roots for each probe direction; list of lists of
        RootBranch, outer index matching the rows of thetas."""
        th = np.atleast_2d(np.asarray(thetas, dtype=float))
        n_dir = th.shape[0]
        G = self.gdot @ th.T
        G = np.where(G == 0.0, -_TINY, G)

        cand_cell, cand_dir, cand_seg = [], [], []
        for seg, (start, n, a, b, cell) in enumerate(self.blocks):
            blk = G[start:start + n]
            change = blk[:-1] * blk[1:] < 0.0
            ci, di = np.nonzero(change)
            cand_cell.append(ci + start)
            cand_dir.append(di)
            cand_seg.append(np.full(ci.shape, seg, dtype=int))
        cells = np.concatenate(cand_cell)
        dirs_idx = np.concatenate(cand_dir)
        segs = np.concatenate(cand_seg)
        out = [[] for _ in range(n_dir)]
        if cells.size == 0:
            return out

        lo = self.s_grid[cells]
        hi = self.s_grid[cells + 1]
        th_c = th[dirs_idx]
        glo = G[cells, dirs_idx]
        for _ in range(45):
            mid = 0.5 * (lo + hi)
            gm = np.sum(self.scene.gamma_dot_many_s(mid, self.x0) * th_c, axis=1)
            same = np.sign(gm) == np.sign(glo)
            lo = np.where(same, mid, lo)
            glo = np.where(same, gm, glo)
            hi = np.where(same, hi, mid)
        roots = 0.5 * (lo + hi)

        # transversality margin and segment bookkeeping, batched once
        h = np.array([self._margin_h[s] for s in segs])
        dg = (self.scene.gamma_dot_many_s(roots + h, self.x0)
              - self.scene.gamma_dot_many_s(roots - h, self.x0)) / (2.0 * h[:, None])
        gd = self.scene.gamma_dot_many_s(roots, self.x0)
        margins = np.abs(np.sum(dg * th_c, axis=1))
        seg_a = np.array([self.blocks[s][2] for s in segs])
        seg_b = np.array([self.blocks[s][3] for s in segs])
        end_dist = np.minimum(roots - seg_a, seg_b - roots)
        eps_end = self.params.eps_end_frac * (seg_b - seg_a)

        keep = (margins > self.params.eps_margin) & (end_dist > eps_end)
        order = np.lexsort((roots, dirs_idx))
        min_sep = np.array([self.blocks[s][4] for s in segs]) * 0.5
        last_dir, last_s = -1, None
        for idx in order:
            if not keep[idx]:
                continue
            d = int(dirs_idx[idx])
            s_val = float(roots[idx])
            if d == last_dir and last_s is not None and abs(s_val - last_s) < min_sep[idx]:
                continue
            last_dir, last_s = d, s_val
            out[d].append(RootBranch(
                s=s_val,
                segment=int(segs[idx]),
                ordinal=len(out[d]),
                margin=float(margins[idx]),
                end_dist=float(end_dist[idx]),
                gamma_dot=gd[idx].copy(),
                gamma_dot_s=dg[idx].copy(),
            ))
        return out


def find_admissible_roots(scene, x0, theta, params=None, scanner=None):
    """Roots of theta . gamma_dot(s, x0) = 0 passing the margin and
    endpoint admissibility windows, sorted by s."""
    if scanner is None:
        scanner = BranchScanner(scene, x0, params)
    return scanner.roots_for(np.asarray(theta, dtype=float))[0]


def branch_theta_crit(branch):
    """Critical direction attached to one root, or None when degenerate."""
    c = np.cross(branch.gamma_dot, branch.gamma_dot_s)
    n = float(np.linalg.norm(c))
    ref = float(np.linalg.norm(branch.gamma_dot) * np.linalg.norm(branch.gamma_dot_s))
    if n <= 1e-12 * max(ref, _TINY):
        return None
    return c / n


def theta_crit(scene, s, x0, h_s=None):
    """Unit normal of the osculating plane of the deformed ray tangent:
    gamma_dot x d_s gamma_dot, normalized.  This is where artifact
    directions accumulate as the motion shrinks away."""
    g = scene.gamma_dot(s, np.asarray(x0, dtype=float))
    dg = scene.gamma_dot_s_deriv(s, np.asarray(x0, dtype=float), h_s=h_s)
    c = np.cross(g, dg)
    n = float(np.linalg.norm(c))
    ref = float(np.linalg.norm(g) * np.linalg.norm(dg))
    if n <= 1e-12 * max(ref, _TINY):
        raise DegenerateDirectionError(
            "tangent and its time derivative are parallel; critical direction undefined"
        )
    return c / n


@dataclass
class CriticalArc:
    """Sampled curve of motion-induced singular directions for one root.

    degenerate = True means the defining cross products vanished along the
    whole sampled ray, in which case no direction is preferred and the
    artifact set fills the sphere (zero suppression weight downstream).
    """

    s: float
    x0: np.ndarray
    t_values: np.ndarray
    directions: np.ndarray
    degenerate: bool

    def min_angle_to(self, theta):
        if self.degenerate or self.directions.size == 0:
            return 0.0
        return float(np.min(antipodal_angle(self.directions, np.asarray(theta, dtype=float))))


def xi_crit_arc(scene, s, x0, params=None, n_samples=None):
    """Trace the critical-direction curve of one root.

    Points x_t on the deformed ray through x0 pair with x0 in the normal
    directions xi(t) = d_x psi(s, x0)^T [beta(s, x0) x (d_s beta(s, x_t)
    - d_s beta(s, x0))].  Samples skip a small window around t = 1 where
    the bracket vanishes to first order; the t -> 1 limit is recovered
    separately by arc_endpoint_limit.
    """
    x0 = np.asarray(x0, dtype=float)
    if params is None:
        params = AdmissibilityParams.for_scene(scene, x0)
    n = n_samples if n_samples is not None else params.arc_samples
    z = scene.trajectory.source_point(s)
    y0 = scene.deformation.psi(s, x0)
    d = y0 - z
    box = scene.u_box.inflated(0.05 * float(np.max(scene.u_box.hi - scene.u_box.lo)))
    t0, t1 = box.clip_ray(z, d)
    if not np.isfinite(t0) or not np.isfinite(t1) or t0 >= t1:
        t0, t1 = 0.5, 1.5
    t0 = min(t0, 0.8)
    t1 = max(t1, 1.2)
    ts = np.linspace(t0, t1, n)
    ts = ts[np.abs(ts - 1.0) >= params.arc_skip_frac * (t1 - t0)]
    y_t = z + ts[:, None] * d
    x_t = scene.deformation.nu(s, y_t)
    b0 = d / np.linalg.norm(d)
    v = scene.beta_s_deriv(s, x_t) - scene.beta_s_deriv(s, x0)
    raw = np.cross(b0[None, :], v)
    A = scene.deformation.d_psi(s, x0[None, :])[0]
    xi = raw @ A
    norms = np.linalg.norm(xi, axis=1)
    ref = float(np.max(np.linalg.norm(v, axis=1))) if v.size else 0.0
    scale = float(np.max(norms)) if norms.size else 0.0
    if scale <= 1e-12 * max(ref, _TINY):
        return CriticalArc(float(s), x0, ts, np.zeros((0, 3)), True)
    ok = norms > 1e-9 * scale
    dirs = xi[ok] / norms[ok, None]
    return CriticalArc(float(s), x0, ts[ok], dirs, False)


def arc_endpoint_limit(scene, s, x0, deltas=(1e-2, 1e-3, 1e-4)):
    """Limit direction of the critical arc as the ray point approaches x0.

    Averages the two one-sided samples at t = 1 +- delta (which cancels
    the linear term) and Richardson-extrapolates in delta^2 across the
    given ladder.  The exact limit is gamma_dot x d_s gamma_dot rotated
    by d_x psi^T; agreement with theta_crit is an accuracy check, not an
    assumption.
    """
    x0 = np.asarray(x0, dtype=float)
    z = scene.trajectory.source_point(s)
    y0 = scene.deformation.psi(s, x0)
    d = y0 - z
    b0 = d / np.linalg.norm(d)
    A = scene.deformation.d_psi(s, x0[None, :])[0]
    bs0 = scene.beta_s_deriv(s, x0)

    def xi_at(t):
        y = z + t * d
        x = scene.deformation.nu(s, y[None, :])[0]
        v = scene.beta_s_deriv(s, x) - bs0
        w = np.cross(b0, v) @ A
        nw = np.linalg.norm(w)
        if nw <= _TINY:
            raise DegenerateLimitError("critical arc vanishes identically near its endpoint")
        return w / nw

    seq = []
    for dl in deltas:
        p = xi_at(1.0 + dl)
        m = xi_at(1.0 - dl)
        if np.dot(m, p) < 0.0:
            m = -m
        avg = p + m
        na = np.linalg.norm(avg)
        if na <= _TINY:
            raise DegenerateLimitError("one-sided arc directions cancel; endpoint limit undefined")
        seq.append(avg / na)
    for i in range(1, len(seq)):
        if np.dot(seq[i], seq[0]) < 0.0:
            seq[i] = -seq[i]
    rhos = [(deltas[i] / deltas[i + 1]) ** 2 for i in range(len(deltas) - 1)]
    extr = [(r * seq[i + 1] - seq[i]) / (r - 1.0) for i, r in enumerate(rhos)]
    extr = [e / np.linalg.norm(e) for e in extr]
    if len(extr) >= 2:
        err = antipodal_angle(extr[-1], extr[-2])
        if err > 1e-3:
            raise DegenerateLimitError(
                f"endpoint extrapolation did not settle (residual angle {err:.2e} rad)"
            )
    return extr[-1]


def partition_weights(scene, x0, theta, params=None, scanner=None, roots=None):
    """Smooth partition of unity over the admissible roots of (x0, theta).

    Each branch is weighted by the product of its margin, endpoint, and
    critical-set windows; weights are normalized to sum to one.  Raises
    NoAdmissibleRootError when no branch survives.
    """
    x0 = np.asarray(x0, dtype=float)
    theta = np.asarray(theta, dtype=float)
    if scanner is not None:
        params = scanner.params
    elif params is None:
        params = AdmissibilityParams.for_scene(scene, x0)
    if roots is None:
        roots = find_admissible_roots(scene, x0, theta, params=params, scanner=scanner)
    if not roots:
        raise NoAdmissibleRootError(x0, theta)

    weights = np.zeros(len(roots))
    for j, br in enumerate(roots):
        wm = smooth_window(br.margin, params.eps_margin)
        we = smooth_window(br.end_dist, params.eps_end(scene.trajectory, br.segment))
        tc = branch_theta_crit(br)
        if scene.deformation.is_identity:
            # the arc collapses onto +-theta_crit for a static object
            if tc is None:
                br.arc_dist = 0.0
            else:
                br.arc_dist = antipodal_angle(theta, tc)
        else:
            arc = xi_crit_arc(scene, br.s, x0, params=params)
            if arc.degenerate:
                br.arc_dist = 0.0
            else:
                dist = arc.min_angle_to(theta)
                if tc is not None:
                    dist = min(dist, antipodal_angle(theta, tc))
                br.arc_dist = dist
        wa = smooth_window(br.arc_dist, params.eps_arc)
        weights[j] = wm * we * wa
    total = float(np.sum(weights))
    if total <= 0.0:
        raise NoAdmissibleRootError(
            x0, theta, "every admissible root sits inside a suppression window"
        )
    return PartitionWeights(roots, weights, weights / total, total)


def ds_dt(scene, x0, theta, s, params=None, h=None):
    """Velocity of a root under translation of x0 along theta.

    Implicit differentiation of theta . gamma_dot(s, x) = 0 along
    x_t = x0 + t*theta:  ds/dt = -[theta . (d_x gamma_dot theta)] /
    [theta . d_s gamma_dot].  Raises CriticalityError when the
    denominator falls below the margin width (near-tangential root).
    """
    x0 = np.asarray(x0, dtype=float)
    theta = np.asarray(theta, dtype=float)
    if params is None:
        params = AdmissibilityParams.for_scene(scene, x0)
    denom = float(np.dot(theta, scene.gamma_dot_s_deriv(s, x0)))
    if abs(denom) <= params.eps_margin:
        raise CriticalityError(
            f"root at s={s:.6g} is tangential (|theta . d_s gamma_dot| = {abs(denom):.3e})"
        )
    if h is None:
        h = 1e-5 * float(np.max(scene.u_box.hi - scene.u_box.lo))
    num = float(np.dot(theta, (scene.gamma_dot(s, x0 + h * theta)
                               - scene.gamma_dot(s, x0 - h * theta)) / (2.0 * h)))
    return -num / denom


def continue_roots(scene, seeds, xs, thetas, segments, params, drift_extra=None):
    """Track roots from seed times to nearby points, batched.

    One Newton iteration per pass for every row at once; steps are
    trust-region clipped to one scan cell and the total excursion from
    the seed is capped at guard_cells cells plus the per-seed
    drift_extra allowance (ContinuationError beyond).  Callers that
    translate the base point pass an allowance proportional to the
    translation over the branch margin, since the root velocity grows
    like one over the margin near the admissibility threshold.
    """
    seeds = np.asarray(seeds, dtype=float)
    xs = np.atleast_2d(np.asarray(xs, dtype=float))
    th = np.atleast_2d(np.asarray(thetas, dtype=float))
    segs = np.asarray(segments, dtype=int)
    k = seeds.size
    seg_a = np.array([scene.trajectory.segments[s][0] for s in segs])
    seg_b = np.array([scene.trajectory.segments[s][1] for s in segs])
    cell = (seg_b - seg_a) / params.scan_nodes
    guard = params.guard_cells * cell
    if drift_extra is not None:
        guard = guard + np.asarray(drift_extra, dtype=float)
    # a root drifting further than this is on another branch
    guard = np.minimum(guard, 0.45 * (seg_b - seg_a))
    closed = np.array([scene.trajectory.segment_closed(int(i)) for i in segs])
    span = seg_b - seg_a
    lo = seg_a + 1e-12 * span
    hi = seg_b - 1e-12 * span
    delta = 1e-7 * span

    # steps are cell-clipped, so the budget must cover the guard distance
    n_iter = 50 + min(2000, int(np.ceil(np.max(guard / cell))))
    s = seeds.copy()
    g = np.full(k, np.inf)
    for _ in range(n_iter):
        sv = np.concatenate([s, s + delta, s - delta])
        xv = np.concatenate([xs, xs, xs])
        tv = np.concatenate([th, th, th])
        gd = scene.gamma_dot_pairs(sv, xv)
        gall = np.sum(gd * tv, axis=1)
        g, gp, gm = gall[:k], gall[k:2 * k], gall[2 * k:]
        if np.all(np.abs(g) <= params.root_tol):
            break
        deriv = (gp - gm) / (2.0 * delta)
        bad = np.abs(deriv) <= _TINY
        if np.any(bad & (np.abs(g) > params.root_tol)):
            raise ContinuationError("root continuation hit a tangential point")
        step = np.where(bad, 0.0, -g / np.where(bad, 1.0, deriv))
        step = np.clip(step, -cell, cell)
        # periodic segments wrap through the seam, open ones pin at the ends
        s = np.where(closed, seg_a + np.mod(s + step - seg_a, span), np.clip(s + step, lo, hi))
        s = np.clip(s, lo, hi)
        drift = np.abs(s - seeds)
        off = np.where(closed, np.minimum(drift, span - drift), drift) > guard
        if np.any(off):
            i = int(np.argmax(off))
            raise ContinuationError(
                f"root left its continuation guard (seed s={seeds[i]:.6g}, "
                f"drift {abs(s[i] - seeds[i]):.3e} > {guard[i]:.3e})"
            )
    if np.any(np.abs(g) > 1e3 * params.root_tol):
        i = int(np.argmax(np.abs(g)))
        raise ContinuationError(
            f"root continuation failed to converge near s={seeds[i]:.6g} (|g|={abs(g[i]):.2e})"
        )
    return s


def continue_root(scene, branch, x, theta, params):
    """Scalar convenience wrapper around continue_roots."""
    return float(continue_roots(
        scene,
        np.array([branch.s]),
        np.asarray(x, dtype=float)[None, :],
        np.asarray(theta, dtype=float)[None, :],
        np.array([branch.segment]),
        params,
    )[0])
