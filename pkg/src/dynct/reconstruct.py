"""Approximate inversion of dynamic cone-beam data.

The reconstruction value at a point x0 is a weighted sphere integral:
for each probe direction theta, the admissible roots of the view
condition contribute the translation derivative of their
attenuation-compensated plane-derivative values, blended by the smooth
partition of unity from the branch module, and the sphere integral is
scaled by 1/(8 pi^2).  For a static scene this reproduces the classical
inversion of the Radon plane transform; under motion it is an
order-zero approximation whose leftover singularities the partition
weights suppress.
"""

import math
import os
import time
from dataclasses import dataclass, replace

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy.special import sph_harm_y

from . import branches as _br
from . import data as _dd
from .errors import (
    CoverageError,
    NoAdmissibleRootError,
    ValidationError,
)
from .geometry import Box

EIGHT_PI_SQ = 8.0 * math.pi**2


class VoxelGrid:
    """Cell-centered cubic lattice inside a box.

    Flattened traversal is x-fastest (Fortran order), matching the
    on-disk volume layout.
    """

    def __init__(self, box, dims):
        self.box = box
        self.dims = tuple(int(d) for d in dims)
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise ValidationError("voxel grid needs three positive dimensions")
        extent = box.hi - box.lo
        self.spacing = extent / np.asarray(self.dims, dtype=float)
        self.origin = box.lo + 0.5 * self.spacing

    @classmethod
    def cube(cls, half, n, center=(0.0, 0.0, 0.0)):
        return cls(Box.cube(half, center), (n, n, n))

    @property
    def n_points(self):
        return self.dims[0] * self.dims[1] * self.dims[2]

    def axes(self):
        return tuple(
            self.origin[k] + self.spacing[k] * np.arange(self.dims[k]) for k in range(3)
        )

    def points(self):
        """All centers, x-fastest; (n_points, 3)."""
        ax, ay, az = self.axes()
        X, Y, Z = np.meshgrid(ax, ay, az, indexing="ij")
        return np.stack([
            X.flatten(order="F"), Y.flatten(order="F"), Z.flatten(order="F")
        ], axis=1)

    def reshape(self, flat):
        return np.asarray(flat, dtype=float).reshape(self.dims, order="F")

    def flatten(self, vol):
        return np.asarray(vol, dtype=float).flatten(order="F")


class SphereQuadrature:
    """Product rule on the unit sphere: Gauss-Legendre in the polar
    cosine times uniform azimuth.

    Exact for spherical harmonics up to the requested order; the
    constructor verifies that against scipy's harmonics and refuses to
    return an inaccurate rule.  Node count stays even in both factors so
    the rule is antipodally symmetric with no equator nodes, which makes
    the hemisphere reduction exact for even integrands.
    """

    def __init__(self, order, validate=True, validate_tol=1e-10):
        self.order = int(order)
        if self.order < 1:
            raise ValidationError("sphere quadrature order must be positive")
        n_t = (self.order + 2) // 2
        n_t += n_t % 2
        n_p = self.order + 1
        n_p += n_p % 2
        zs, wz = leggauss(n_t)
        phi = 2.0 * np.pi * np.arange(n_p) / n_p
        st = np.sqrt(1.0 - zs**2)
        dirs = np.empty((n_t * n_p, 3))
        dirs[:, 0] = np.outer(st, np.cos(phi)).ravel()
        dirs[:, 1] = np.outer(st, np.sin(phi)).ravel()
        dirs[:, 2] = np.repeat(zs, n_p)
        self.dirs = dirs
        self.weights = np.repeat(wz, n_p) * (2.0 * np.pi / n_p)
        self.n_theta = n_t
        self.n_phi = n_p
        if validate:
            self._validate(validate_tol)

    def _validate(self, tol):
        theta = np.arccos(np.clip(self.dirs[:, 2], -1.0, 1.0))
        phi = np.arctan2(self.dirs[:, 1], self.dirs[:, 0])
        ref = 4.0 * np.pi
        for n in range(self.order + 1):
            m = np.arange(-n, n + 1)
            y = sph_harm_y(n, m[:, None], theta[None, :], phi[None, :])
            got = y @ self.weights
            want = np.zeros_like(got)
            if n == 0:
                want[0] = ref / math.sqrt(4.0 * math.pi)
            if np.max(np.abs(got - want)) > tol * ref:
                raise ValidationError(
                    f"sphere rule failed harmonic exactness at degree {n} "
                    f"(residual {np.max(np.abs(got - want)) / ref:.2e})"
                )

    def hemisphere(self):
        """Upper-half nodes with doubled weights, for even integrands."""
        keep = self.dirs[:, 2] > 0.0
        return self.dirs[keep], 2.0 * self.weights[keep]


@dataclass
class ReconstructionParams:
    """Discretization knobs for the inversion engine."""

    sphere_order: int = 29
    n_circle: int = 128
    tau_h: float = 1e-3
    fd_step: float | None = None
    deriv_smooth: float | None = None
    deriv_smooth_points: int = 3
    use_hemisphere: bool = True
    richardson_tau: bool = True
    data_rel_tol: float = 1e-7
    admissibility: _br.AdmissibilityParams | None = None
    n_workers: int | None = None
    progress: bool = False

    def resolved_fd_step(self, box):
        if self.fd_step is not None:
            return float(self.fd_step)
        return 0.005 * float(np.max(box.hi - box.lo))

    def deriv_stencil(self, box):
        """Offsets and weights realizing the translation derivative.

        With deriv_smooth unset this is the plain two-point central
        difference. Setting deriv_smooth to a width sigma replaces it by a
        derivative-of-Gaussian filter sampled at deriv_smooth_points offsets
        per side out to 2 sigma. Data whose plane integrals have kinks
        (piecewise-constant phantoms) make the exact translation derivative
        distributional; the filter spreads each kink over sigma so the
        sphere rule can resolve it. Pick sigma around |x| * pi / sphere_order.
        The filter reproduces linear ramps exactly, so piecewise-linear
        intermediates are differentiated without bias away from kinks.
        """
        if self.deriv_smooth is None:
            fd_h = self.resolved_fd_step(box)
            return np.array([fd_h, -fd_h]), None
        sigma = float(self.deriv_smooth)
        m = int(self.deriv_smooth_points)
        if sigma <= 0.0 or m < 1:
            raise ValidationError("deriv_smooth needs a positive width and points")
        tk = (2.0 * sigma / m) * np.arange(1, m + 1)
        tk = np.concatenate([tk, -tk])
        raw = tk * np.exp(-0.5 * (tk / sigma) ** 2)
        return tk, raw / np.dot(raw, tk)


def _partition_arrays(scene, x0, roots_per_node, quad_dirs, params):
    """Flatten per-node root lists into arrays with partition weights.

    Returns (node_idx, s_vals, segs, n_weights); raises
    NoAdmissibleRootError naming the first direction with no usable
    branch.
    """
    adm = params
    node_idx, s_vals, segs = [], [], []
    margins, end_dists, eps_ends = [], [], []
    gdots, gdot_ss = [], []
    for i, roots in enumerate(roots_per_node):
        if not roots:
            raise NoAdmissibleRootError(x0, quad_dirs[i])
        for br in roots:
            node_idx.append(i)
            s_vals.append(br.s)
            segs.append(br.segment)
            margins.append(br.margin)
            end_dists.append(br.end_dist)
            a, b = scene.trajectory.segments[br.segment]
            eps_ends.append(adm.eps_end_frac * (b - a))
            gdots.append(br.gamma_dot)
            gdot_ss.append(br.gamma_dot_s)
    node_idx = np.array(node_idx, dtype=int)
    s_vals = np.array(s_vals)
    segs = np.array(segs, dtype=int)
    margins = np.array(margins)
    end_dists = np.array(end_dists)
    eps_ends = np.array(eps_ends)
    gdots = np.array(gdots)
    gdot_ss = np.array(gdot_ss)

    wm = _br.smooth_window(margins, adm.eps_margin)
    ue = np.clip((end_dists - eps_ends) / eps_ends, 0.0, 1.0)
    we = ue * ue * (3.0 - 2.0 * ue)

    th_rows = quad_dirs[node_idx]
    cr = np.cross(gdots, gdot_ss)
    cr_norm = np.linalg.norm(cr, axis=1)
    ref = np.linalg.norm(gdots, axis=1) * np.linalg.norm(gdot_ss, axis=1)
    tc_ok = cr_norm > 1e-12 * np.maximum(ref, 1e-300)
    arc_dist = np.zeros(len(s_vals))
    if scene.deformation.is_identity:
        # critical set collapses onto +-theta_crit; degenerate rows score 0
        safe = np.where(tc_ok, cr_norm, 1.0)
        tc = cr / safe[:, None]
        dots = np.abs(np.sum(tc * th_rows, axis=1))
        arc_dist = np.where(tc_ok, np.arccos(np.clip(dots, 0.0, 1.0)), 0.0)
    else:
        cache = {}
        for j in range(len(s_vals)):
            key = s_vals[j]
            if key not in cache:
                cache[key] = _br.xi_crit_arc(scene, key, x0, params=adm)
            arc = cache[key]
            if arc.degenerate:
                arc_dist[j] = 0.0
                continue
            dist = arc.min_angle_to(th_rows[j])
            if tc_ok[j]:
                tc_j = cr[j] / cr_norm[j]
                dist = min(dist, _br.antipodal_angle(th_rows[j], tc_j))
            arc_dist[j] = dist
    wa = _br.smooth_window(arc_dist, adm.eps_arc)

    w = wm * we * wa
    totals = np.zeros(quad_dirs.shape[0])
    np.add.at(totals, node_idx, w)
    dead = totals <= 0.0
    if np.any(dead):
        i = int(np.argmax(dead))
        raise NoAdmissibleRootError(
            x0, quad_dirs[i], "every admissible root sits inside a suppression window"
        )
    n_weights = w / totals[node_idx]
    return node_idx, s_vals, segs, n_weights, margins


def point_value(scene, data, x0, quad_dirs, quad_weights, params, cutoff=None,
                scanner=None):
    """Reconstructed density at one point.

    quad_dirs / quad_weights describe the sphere rule (weights summing
    to 4 pi, possibly hemisphere-folded).
    """
    x0 = np.asarray(x0, dtype=float)
    adm = params.admissibility
    if scanner is None:
        scanner = _br.BranchScanner(scene, x0, adm)
    adm = scanner.params
    roots_per_node = scanner.roots_for(quad_dirs)
    node_idx, s_vals, segs, n_w, margins = _partition_arrays(
        scene, x0, roots_per_node, quad_dirs, adm
    )
    # zero-weight branches contribute nothing but can fold away under the
    # fd translation (their margin sits below the window foot), so drop
    # them before continuation
    live = n_w > 0.0
    if not np.all(live):
        node_idx, s_vals, segs = node_idx[live], s_vals[live], segs[live]
        n_w, margins = n_w[live], margins[live]
    n_pairs = len(s_vals)
    offsets, coeffs = params.deriv_stencil(scene.u_box)
    n_off = len(offsets)

    # translated copies of every (node, root) pair, one per stencil offset;
    # the root moves by about t over margin, so thin branches get a wider
    # guard
    th_rows = quad_dirs[node_idx]
    x_rows = np.concatenate([x0[None, :] + t * th_rows for t in offsets])
    s_seeds = np.tile(s_vals, n_off)
    th_all = np.tile(th_rows, (n_off, 1))
    seg_all = np.tile(segs, n_off)
    allow = 6.0 * float(np.max(np.abs(offsets))) / (scene.d_min * margins)
    s_t = _br.continue_roots(scene, s_seeds, x_rows, th_all, seg_all, adm,
                             drift_extra=np.tile(allow, n_off))

    if scene.deformation.is_identity:
        alphas = th_all
    else:
        J = scene.deformation.d_psi_pairs(s_t, x_rows)
        alphas = np.linalg.solve(np.transpose(J, (0, 2, 1)), th_all[:, :, None])[:, :, 0]

    q = _dd.grangeat_rows(
        data, s_t, alphas,
        n_circle=params.n_circle,
        tau_h=params.tau_h,
        cutoff=cutoff,
        cutoff_points=x_rows if cutoff is not None else None,
        richardson=params.richardson_tau,
    )
    if not scene.attenuation.is_one:
        q = q / scene.attenuation.value_pairs(s_t, x_rows)

    if coeffs is None:
        dq = (q[:n_pairs] - q[n_pairs:]) / (2.0 * offsets[0])
    else:
        dq = coeffs @ q.reshape(n_off, n_pairs)
    node_vals = np.zeros(quad_dirs.shape[0])
    np.add.at(node_vals, node_idx, n_w * dq)
    return math.fsum(
        float(quad_weights[i]) * float(node_vals[i]) for i in range(quad_dirs.shape[0])
    ) / EIGHT_PI_SQ


# ---------------------------------------------------------------------------
# volume engine with optional process parallelism

_WORKER = {}


def _worker_init(scene, data, pts, quad_dirs, quad_w, params, cutoff):
    _WORKER.update(scene=scene, data=data, pts=pts, quad_dirs=quad_dirs,
                   quad_w=quad_w, params=params, cutoff=cutoff)


def _worker_chunk(idx):
    w = _WORKER
    vals = np.empty(len(idx))
    for j, i in enumerate(idx):
        vals[j] = point_value(
            w["scene"], w["data"], w["pts"][i], w["quad_dirs"], w["quad_w"],
            w["params"], cutoff=w["cutoff"],
        )
    return idx, vals


def _resolve_workers(params):
    if params.n_workers is not None:
        return max(1, int(params.n_workers))
    env = os.environ.get("DYNCT_THREADS", "")
    try:
        return max(1, int(env)) if env else 1
    except ValueError:
        return 1


def reconstruct_points(scene, data, points, params=None, cutoff=None,
                       progress_cb=None):
    """Reconstruction values at arbitrary points; (n,).

    Results are independent per point, so the worker count changes
    timing only, never values.
    """
    params = params if params is not None else ReconstructionParams()
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if params.admissibility is None:
        adm = _br.AdmissibilityParams.for_scene(scene)
        params = replace(params, admissibility=adm)
    quad = SphereQuadrature(params.sphere_order)
    if params.use_hemisphere:
        quad_dirs, quad_w = quad.hemisphere()
    else:
        quad_dirs, quad_w = quad.dirs, quad.weights

    n = pts.shape[0]
    out = np.empty(n)
    workers = _resolve_workers(params)
    if workers == 1 or n < 4:
        for i in range(n):
            out[i] = point_value(scene, data, pts[i], quad_dirs, quad_w, params,
                                 cutoff=cutoff)
            if progress_cb is not None:
                progress_cb(i + 1, n)
        return out

    import multiprocessing as mp

    chunk = max(1, int(math.ceil(n / (workers * 8))))
    chunks = [np.arange(i, min(i + chunk, n)) for i in range(0, n, chunk)]
    ctx = mp.get_context("fork")
    done = 0
    with ctx.Pool(workers, initializer=_worker_init,
                  initargs=(scene, data, pts, quad_dirs, quad_w, params, cutoff)) as pool:
        for idx, vals in pool.imap_unordered(_worker_chunk, chunks):
            out[idx] = vals
            done += len(idx)
            if progress_cb is not None:
                progress_cb(done, n)
    return out


def reconstruct_volume(scene, data, grid, params=None, cutoff=None,
                       progress_cb=None):
    """Reconstruction on a voxel grid; returns the (nx, ny, nz) volume."""
    flat = reconstruct_points(scene, data, grid.points(), params=params,
                              cutoff=cutoff, progress_cb=progress_cb)
    return grid.reshape(flat)


def reconstruct_static_localized(scene, data, grid_or_points, eps_inner=0.05,
                                 eps_outer=0.3, params=None, progress_cb=None):
    """Localized variant for a static scene: ray data only contributes
    within a smooth cone around each reconstruction point."""
    if not scene.deformation.is_identity:
        raise ValidationError("the localized variant applies to the static configuration")
    cutoff = _dd.DirectionalCutoff(scene.d_min, eps_inner=eps_inner, eps_outer=eps_outer)
    if isinstance(grid_or_points, VoxelGrid):
        return reconstruct_volume(scene, data, grid_or_points, params=params,
                                  cutoff=cutoff, progress_cb=progress_cb)
    return reconstruct_points(scene, data, grid_or_points, params=params,
                              cutoff=cutoff, progress_cb=progress_cb)


# ---------------------------------------------------------------------------
# naive normal-operator comparator

def xstarx_points(scene, phantom, points, n_s=192, n_t=96, taper_frac=0.05,
                  data=None):
    """Unfiltered backprojection of the forward data (X* X f) at points.

    Double quadrature: outer over source time with a smooth endpoint
    taper per segment, inner along the deformed ray through each point
    over the visible span.  No artifact suppression of any kind; this is
    the comparator whose geometry-induced streaks the main operator is
    designed to avoid.  Output scale is arbitrary (normalize before
    comparing).

    With data given, the inner integral is replaced by the recorded ray
    value scaled by the unnormalized direction length, so the comparator
    runs from measurements alone; phantom is ignored in that mode.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    traj = scene.trajectory
    box = None if data is not None else scene.world_box(phantom.support_box(1e-9))
    out = np.zeros(pts.shape[0])
    for k, (a, b) in enumerate(traj.segments):
        sv = traj.segment_grid(k, n_s)
        ds = (b - a) / n_s
        taper = _br.smooth_window(np.minimum(sv - a, b - sv), taper_frac * (b - a))
        for i, s in enumerate(sv):
            if taper[i] == 0.0:
                continue
            z = np.asarray(traj.position(float(s)), dtype=float)
            y0 = scene.deformation.psi(float(s), pts)
            d = y0 - z[None, :]
            if data is not None:
                dist = np.linalg.norm(d, axis=1)
                vals = data.eval_dirs(float(s), d / dist[:, None])
                out += taper[i] * ds * vals / dist
                continue
            t0, t1 = _dd._clip_rays_rows(box, np.broadcast_to(z, d.shape).copy(), d)
            t0 = np.maximum(t0, 0.0)
            span = np.maximum(t1 - t0, 0.0)
            tt = t0[:, None] + (np.arange(n_t)[None, :] + 0.5) / n_t * span[:, None]
            y = z[None, None, :] + tt[:, :, None] * d[:, None, :]
            flat = y.reshape(-1, 3)
            s_rep = np.full(flat.shape[0], float(s))
            x = scene.deformation.nu_pairs(s_rep, flat)
            vals = phantom.eval_f(x).reshape(pts.shape[0], n_t)
            out += taper[i] * ds * np.sum(vals, axis=1) * span / n_t
    return out


def xstarx_volume(scene, phantom, grid, n_s=192, n_t=96, data=None):
    return grid.reshape(xstarx_points(scene, phantom, grid.points(), n_s=n_s,
                                      n_t=n_t, data=data))


# ---------------------------------------------------------------------------
# volume post-processing and artifact metrics

def laplacian_filter(vol, spacing):
    """Six-neighbor discrete Laplacian, zero-gradient boundary."""
    v = np.asarray(vol, dtype=float)
    out = np.zeros_like(v)
    for ax in range(3):
        h2 = float(spacing[ax]) ** 2
        lo = np.concatenate([v.take([0], axis=ax), v], axis=ax)
        hi = np.concatenate([v, v.take([-1], axis=ax)], axis=ax)
        n = v.shape[ax]
        out += (lo.take(range(0, n), axis=ax) - 2.0 * v
                + hi.take(range(1, n + 1), axis=ax)) / h2
    return out


def gradient_energy(vol, spacing, mask=None):
    """Sum of squared central-difference gradients, optionally masked."""
    v = np.asarray(vol, dtype=float)
    total = np.zeros_like(v)
    for ax in range(3):
        g = np.gradient(v, float(spacing[ax]), axis=ax)
        total += g * g
    if mask is not None:
        total = total[mask]
    return float(np.sum(total))


def error_metrics(vol, ref):
    """Relative L2 and max-abs errors between two volumes.

    A zero reference cannot normalize, so the norms come back absolute
    with the "absolute" flag set.
    """
    v = np.asarray(vol, dtype=float)
    r = np.asarray(ref, dtype=float)
    if v.shape != r.shape:
        raise ValidationError(
            f"volume shapes differ: {v.shape} vs {r.shape}")
    l2 = float(np.linalg.norm((v - r).ravel()))
    mx = float(np.max(np.abs(v - r)))
    denom = float(np.linalg.norm(r.ravel()))
    if denom == 0.0:
        out = {"rel_l2": l2, "rel_max": mx, "absolute": True}
    else:
        out = {"rel_l2": l2 / denom, "rel_max": mx / float(np.max(np.abs(r))),
               "absolute": False}
    if v.ndim == 3 and min(v.shape) > 4:
        core = (slice(2, -2),) * 3
        vi, ri = v[core], r[core]
        l2i = float(np.linalg.norm((vi - ri).ravel()))
        mxi = float(np.max(np.abs(vi - ri)))
        di = float(np.linalg.norm(ri.ravel()))
        if out["absolute"] or di == 0.0:
            out["rel_l2_interior"] = l2i
            out["rel_max_interior"] = mxi
        else:
            out["rel_l2_interior"] = l2i / di
            out["rel_max_interior"] = mxi / float(np.max(np.abs(ri)))
    return out


# ---------------------------------------------------------------------------
# critical-direction exposure map

def direction_exposure(scene, x0, dirs, params=None, arc_width=None):
    """Per-direction artifact exposure in [0, 1] at one point.

    1 when every admissible branch for a direction hugs its critical
    set, and also when no branch exists at all (data truly missing);
    0 as soon as one branch is clean; smooth in between.  arc_width
    overrides the critical-set window width.
    """
    x0 = np.asarray(x0, dtype=float)
    dirs = np.atleast_2d(np.asarray(dirs, dtype=float))
    adm = params if params is not None else _br.AdmissibilityParams.for_scene(scene, x0)
    width = float(arc_width) if arc_width is not None else adm.eps_arc
    scanner = _br.BranchScanner(scene, x0, adm)
    roots_per_node = scanner.roots_for(dirs)
    exposure = np.ones(dirs.shape[0])
    cache = {}
    for nidx, roots in enumerate(roots_per_node):
        if not roots:
            exposure[nidx] = 1.0
            continue
        prod = 1.0
        for br in roots:
            if scene.deformation.is_identity:
                tc = _br.branch_theta_crit(br)
                dist = 0.0 if tc is None else _br.antipodal_angle(dirs[nidx], tc)
            else:
                if br.s not in cache:
                    cache[br.s] = _br.xi_crit_arc(scene, br.s, x0, params=adm)
                arc = cache[br.s]
                if arc.degenerate:
                    dist = 0.0
                else:
                    dist = arc.min_angle_to(dirs[nidx])
                    tc = _br.branch_theta_crit(br)
                    if tc is not None:
                        dist = min(dist, _br.antipodal_angle(dirs[nidx], tc))
            prod *= 1.0 - _br.smooth_window(dist, width)
            if prod == 0.0:
                break
        exposure[nidx] = prod
    return exposure


def risk_values(scene, points, sphere_order=11, params=None):
    """Fraction of probe directions with no artifact-clean branch.

    For each point, a direction contributes its quadrature weight times
    its exposure; the result is normalized by 4 pi into [0, 1].  The
    critical-set window is widened to the rule's polar resolution when
    needed, so thin risk bands stay visible on coarse node sets instead
    of slipping between nodes.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    quad = SphereQuadrature(sphere_order)
    dirs, w = quad.hemisphere()
    polar_gap = float(np.arccos(np.clip(np.max(np.abs(quad.dirs[:, 2])), -1.0, 1.0)))
    out = np.zeros(pts.shape[0])
    for i, x0 in enumerate(pts):
        adm = params if params is not None else _br.AdmissibilityParams.for_scene(scene, x0)
        exposure = direction_exposure(scene, x0, dirs, params=adm,
                                      arc_width=max(adm.eps_arc, polar_gap))
        out[i] = float(np.sum(w * exposure)) / (4.0 * math.pi)
    return out


def risk_volume(scene, grid, sphere_order=11, params=None):
    return grid.reshape(risk_values(scene, grid.points(), sphere_order=sphere_order,
                                    params=params))


def convergence_sweep(base_scene, family, phantom, grid, eps_list, params=None,
                      rel_tol=1e-7, progress_cb=None, row_cb=None):
    """Reconstruction error table across a family shrinking to static.

    Each entry swaps the family member at eps into the base scene,
    synthesizes analytic data for the phantom, reconstructs the grid and
    compares against the phantom sampled on the same grid.  The eps = 0
    member is the exact static configuration, so that row doubles as
    the static reference.  Rows keep the order of eps_list and carry
    the reconstructed volume under "volume".
    """
    from .geometry import Scene

    truth = grid.reshape(phantom.eval_f(grid.points()))
    rows = []
    for eps in eps_list:
        deform, atten = family(float(eps))
        scene = Scene(base_scene.trajectory, deform, atten, u_box=base_scene.u_box)
        dataset = _dd.AnalyticConeBeamDataset(scene, phantom, rel_tol=rel_tol)
        t0 = time.time()
        vol = reconstruct_volume(scene, dataset, grid, params=params,
                                 progress_cb=progress_cb)
        met = error_metrics(vol, truth)
        row = {"eps": float(eps), "rel_l2": met["rel_l2"],
               "rel_max": met["rel_max"], "seconds": time.time() - t0,
               "volume": vol}
        rows.append(row)
        if row_cb is not None:
            row_cb(row)
    return rows
