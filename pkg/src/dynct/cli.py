"""Command line front end.

Subcommands cover the full workflow: simulate a gridded dataset,
reconstruct a volume from gridded or analytic data, analyze critical
directions at a point, compare against the naive unfiltered
backprojection, run the motion-amplitude convergence study, and run the
built-in selftest.  All tool errors exit with a one-line
"tag: message" on stderr.
"""

import argparse
import csv
import math
import sys
import time

import numpy as np

from . import config as cfgmod
from . import fileio
from .branches import (
    AdmissibilityParams,
    arc_endpoint_limit,
    find_admissible_roots,
    partition_weights,
    theta_crit,
    xi_crit_arc,
)
from .data import AnalyticConeBeamDataset, GriddedConeBeamDataset, grangeat_plane_derivative
from .errors import ConfigError, DynctError, ValidationError
from .geometry import Box, CircleTrajectory, Scene, pulse_family
from .phantom import GaussianBlob, Phantom
from .reconstruct import (
    ReconstructionParams,
    SphereQuadrature,
    VoxelGrid,
    convergence_sweep,
    error_metrics,
    gradient_energy,
    laplacian_filter,
    reconstruct_static_localized,
    reconstruct_volume,
    risk_volume,
    xstarx_volume,
)

_PARAM_KEYS = {
    "reconstruct.sphere_order": "sphere_order",
    "reconstruct.n_circle": "n_circle",
    "reconstruct.tau_h": "tau_h",
    "reconstruct.fd_step": "fd_step",
    "reconstruct.richardson": "richardson_tau",
    "reconstruct.hemisphere": "use_hemisphere",
    "reconstruct.data_rel_tol": "data_rel_tol",
    "reconstruct.workers": "n_workers",
}


def _params_from(cfg, progress=False):
    kw = {attr: cfg[key] for key, attr in _PARAM_KEYS.items() if key in cfg}
    kw["progress"] = progress
    return ReconstructionParams(**kw)


def _grid_from(cfg, args):
    n = getattr(args, "grid_n", None) or cfg.get("reconstruct.grid_n", 16)
    half = cfg.get("reconstruct.grid_half", cfg.get("scene.box_half", 1.0))
    center = cfg.get("scene.box_center", np.zeros(3))
    return VoxelGrid(Box.cube(half, center), (n, n, n))


def _parse_vec(text, what):
    parts = text.replace(",", " ").split()
    if len(parts) != 3:
        raise ConfigError(f"{what} needs three numbers, got {text!r}")
    try:
        return np.array([float(p) for p in parts])
    except ValueError as exc:
        raise ConfigError(f"malformed {what}: {text!r}") from exc


def _progress_printer(total):
    t0 = time.time()

    def cb(done, n=total):
        dt = time.time() - t0
        rate = done / max(dt, 1e-9)
        remain = (n - done) / max(rate, 1e-9)
        sys.stderr.write(f"\r  {done}/{n} points  {rate:6.1f} pt/s  ~{remain:5.0f}s left")
        sys.stderr.flush()
        if done >= n:
            sys.stderr.write("\n")

    return cb


def _load_data(cfg, args, scene):
    data_path = getattr(args, "data", None)
    if data_path:
        return fileio.read_dataset(data_path, scene)
    phantom = cfgmod.build_phantom(cfg)
    rel = cfg.get("reconstruct.data_rel_tol", 1e-7)
    return AnalyticConeBeamDataset(scene, phantom, rel_tol=rel)


# ---------------------------------------------------------------------------
# subcommands


def cmd_simulate(args):
    cfg = cfgmod.load_config(args.config)
    scene = cfgmod.build_scene(cfg)
    phantom = cfgmod.build_phantom(cfg)
    data = GriddedConeBeamDataset.synthesize(
        scene,
        phantom,
        n_s=cfg.get("simulate.n_s", 48),
        n_u=cfg.get("simulate.n_u", 96),
        n_v=cfg.get("simulate.n_v", 96),
        rel_tol=cfg.get("simulate.rel_tol", 1e-7),
    )
    fileio.write_dataset(args.out, data)
    det = data.detector
    peak = max(float(np.max(np.abs(b))) for b in data.values)
    print(f"wrote {args.out}")
    print(f"  segments {len(data.values)}  time samples {det.n_s}  "
          f"detector {det.n_u}x{det.n_v}  half-width {det.u_half:.4f}")
    print(f"  peak projection value {peak:.6g}")
    return 0


def cmd_reconstruct(args):
    cfg = cfgmod.load_config(args.config)
    scene = cfgmod.build_scene(cfg)
    data = _load_data(cfg, args, scene)
    params = _params_from(cfg, progress=args.progress)
    grid = _grid_from(cfg, args)
    cb = _progress_printer(grid.n_points) if args.progress else None
    t0 = time.time()
    if args.localized:
        vol = reconstruct_static_localized(
            scene, data, grid,
            eps_inner=cfg.get("localize.eps_inner", 0.05),
            eps_outer=cfg.get("localize.eps_outer", 0.3),
            params=params, progress_cb=cb)
    else:
        vol = reconstruct_volume(scene, data, grid, params=params, progress_cb=cb)
    dt = time.time() - t0
    fileio.write_volume(args.out, vol, grid)
    print(f"wrote {args.out}")
    print(f"  grid {grid.dims[0]}x{grid.dims[1]}x{grid.dims[2]}  "
          f"{dt:.1f}s  value range [{vol.min():.4g}, {vol.max():.4g}]")
    if args.slices:
        paths = fileio.write_pgm_slices(args.slices, vol)
        print(f"  {len(paths)} slice previews under {args.slices}_z*.pgm")
    return 0


def cmd_analyze_crit(args):
    cfg = cfgmod.load_config(args.config)
    scene = cfgmod.build_scene(cfg)
    x0 = _parse_vec(args.point, "--point")
    if not scene.u_box.contains(x0):
        raise ValidationError(f"point {x0.tolist()} lies outside the scene box")
    params = AdmissibilityParams.for_scene(scene, x0=x0)
    print(f"admissibility: margin > {params.eps_margin:.4g}, "
          f"endpoint clearance fraction {params.eps_end_frac}")

    rows = []
    if args.theta:
        th = _parse_vec(args.theta, "--theta")
        nrm = float(np.linalg.norm(th))
        if nrm == 0.0:
            raise ConfigError("--theta must be nonzero")
        th = th / nrm
        roots = find_admissible_roots(scene, x0, th, params=params)
        part = partition_weights(scene, x0, th, params=params, roots=roots)
        print(f"\n{len(roots)} admissible source times for plane normal {th.tolist()}:")
        print(f"  {'time':>12} {'seg':>4} {'margin':>10} {'end_dist':>10} {'weight':>8}")
        for br, w in zip(part.branches, part.n_values):
            print(f"  {br.s:12.6f} {br.segment:4d} {br.margin:10.4g} "
                  f"{br.end_dist:10.4g} {w:8.4f}")
        rows = [(br.s, br.segment, br.margin, br.end_dist, w)
                for br, w in zip(part.branches, part.n_values)]
        s_list = [br.s for br in part.branches]
    else:
        s_list = []

    if args.s is not None:
        s_list = [args.s]
    for s in s_list:
        print(f"\ncritical directions at source time {s:.6f}:")
        try:
            tc = theta_crit(scene, s, x0)
            print(f"  point-limit direction  {np.array2string(tc, precision=6)}")
        except DynctError as exc:
            print(f"  point-limit direction  degenerate ({exc})")
            continue
        arc = xi_crit_arc(scene, s, x0)
        if arc.degenerate:
            print("  arc degenerate (defining cross products vanish along the arc)")
        else:
            ang = np.degrees([min(math.acos(min(1.0, abs(float(d @ tc)))) for d in arc.directions),
                              max(math.acos(min(1.0, abs(float(d @ tc)))) for d in arc.directions)])
            print(f"  arc of {len(arc.directions)} directions, angle to point limit "
                  f"{ang[0]:.3f}..{ang[1]:.3f} deg")
            if ang[1] < 1e-6:
                print("  arc collapses to the point-limit direction")
            lim = arc_endpoint_limit(scene, s, x0)
            dev = math.degrees(math.acos(min(1.0, abs(float(lim @ tc)))))
            print(f"  arc endpoint limit vs point limit: {dev:.4f} deg")

    if args.out and rows:
        with open(args.out, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["source_time", "segment", "margin", "endpoint_distance", "weight"])
            w.writerows(rows)
        print(f"\nwrote {args.out}")
    return 0


def cmd_compare_xstarx(args):
    cfg = cfgmod.load_config(args.config)
    scene = cfgmod.build_scene(cfg)
    phantom = cfgmod.build_phantom(cfg)
    data = _load_data(cfg, args, scene)
    params = _params_from(cfg, progress=args.progress)
    grid = _grid_from(cfg, args)
    cb = _progress_printer(grid.n_points) if args.progress else None

    vol = reconstruct_volume(scene, data, grid, params=params, progress_cb=cb)
    naive = xstarx_volume(scene, phantom, grid,
                          n_s=cfg.get("compare.n_s", 192),
                          n_t=cfg.get("compare.n_t", 96))
    risk = risk_volume(scene, grid,
                       sphere_order=cfg.get("compare.risk_order", 29))
    region = risk > 0.5 * float(np.max(risk)) if np.max(risk) > 0 else risk > 1.0

    f_inv = laplacian_filter(vol, grid.spacing)
    f_naive = laplacian_filter(naive, grid.spacing)
    e_inv = float(np.sum(f_inv[region] ** 2))
    e_naive = float(np.sum(f_naive[region] ** 2))

    fileio.write_volume(f"{args.out_prefix}_inversion.dvol", vol, grid)
    fileio.write_volume(f"{args.out_prefix}_backprojection.dvol", naive, grid)
    fileio.write_volume(f"{args.out_prefix}_risk.dvol", risk, grid)
    print(f"wrote {args.out_prefix}_inversion.dvol, _backprojection.dvol, _risk.dvol")
    print(f"  artifact-risk region: {int(np.sum(region))} of {region.size} voxels")
    print(f"  filtered energy in region: inversion {e_inv:.6g}, "
          f"backprojection {e_naive:.6g}")
    if e_naive > 0.0:
        print(f"  suppression ratio {e_inv / e_naive:.4f} (lower is better)")
    return 0


def cmd_converge(args):
    cfg = cfgmod.load_config(args.config)
    base_scene = cfgmod.build_scene(cfg)
    phantom = cfgmod.build_phantom(cfg)
    family = pulse_family(
        amplitude=cfg.get("deformation.amplitude", 1.2),
        radius=cfg.get("deformation.radius", 1.3),
        atten_amplitude=cfg.get("attenuation.amplitude", 0.3),
        freq=cfg.get("deformation.freq", 1.0),
    )
    eps_list = sorted({float(e) for e in args.eps.split(",")}, reverse=True)
    params = _params_from(cfg, progress=args.progress)
    grid = _grid_from(cfg, args)
    cb = _progress_printer(grid.n_points) if args.progress else None

    def show(row):
        print(f"eps {row['eps']:7.4f}  rel L2 {row['rel_l2']:.5f}  "
              f"rel max {row['rel_max']:.5f}  {row['seconds']:.1f}s")

    rows = convergence_sweep(
        base_scene, family, phantom, grid, eps_list, params=params,
        rel_tol=cfg.get("reconstruct.data_rel_tol", 1e-7),
        progress_cb=cb, row_cb=show)
    with open(args.out, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["eps", "rel_l2", "rel_max", "seconds"])
        w.writerows([(r["eps"], r["rel_l2"], r["rel_max"], r["seconds"]) for r in rows])
    print(f"wrote {args.out}")
    return 0


def cmd_selftest(args):
    import tempfile

    failures = []

    def check(name, fn):
        try:
            fn()
        except Exception as exc:
            failures.append(name)
            print(f"FAIL {name}: {exc}")
        else:
            print(f"ok   {name}")

    def sphere_rule():
        q = SphereQuadrature(15)
        if abs(float(np.sum(q.weights)) - 4.0 * math.pi) > 1e-12:
            raise AssertionError("weight sum is off")

    def probe():
        scene = Scene(CircleTrajectory(3.0), u_box=Box.cube(1.0))
        ph = Phantom([GaussianBlob((0.2, -0.1, 0.05), amplitude=1.0, width=0.3)])
        data = AnalyticConeBeamDataset(scene, ph)
        alpha = np.array([0.3, 0.9, 0.2])
        alpha /= np.linalg.norm(alpha)
        s = 1.1
        got = grangeat_plane_derivative(data, s, alpha, n_circle=512, tau_h=1e-3)
        want = -ph.radon_p_derivative(alpha, float(alpha @ scene.trajectory.position(s)))
        if abs(got - want) > 1e-5 * max(1.0, abs(want)):
            raise AssertionError(f"probe {got} vs plane-integral derivative {want}")

    def roundtrip():
        with tempfile.TemporaryDirectory() as d:
            grid = VoxelGrid(Box.cube(0.8, (0.1, -0.2, 0.0)), (5, 4, 3))
            vol = np.arange(60, dtype=float).reshape(5, 4, 3)
            fileio.write_volume(f"{d}/t.dvol", vol, grid)
            back, g2 = fileio.read_volume(f"{d}/t.dvol")
            if not (np.array_equal(back, vol) and g2.dims == grid.dims
                    and np.allclose(g2.origin, grid.origin)):
                raise AssertionError("volume roundtrip mismatch")

    def partition():
        scene = Scene(CircleTrajectory(3.0), u_box=Box.cube(1.0))
        th = np.array([0.3, 0.5, 0.8])
        th /= np.linalg.norm(th)
        part = partition_weights(scene, np.array([0.1, 0.2, -0.1]), th)
        if abs(float(np.sum(part.n_values)) - 1.0) > 1e-12:
            raise AssertionError("partition does not sum to one")

    check("sphere-quadrature", sphere_rule)
    check("plane-derivative-probe", probe)
    check("volume-file-roundtrip", roundtrip)
    check("partition-of-unity", partition)
    if failures:
        print(f"{len(failures)} failed")
        return 1
    print("all checks passed")
    return 0


# ---------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(
        prog="dynct",
        description="Dynamic cone-beam CT: artifact-suppressing approximate inversion.",
    )
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("simulate", help="render a gridded cone-beam dataset")
    sp.add_argument("--config", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_simulate)

    rp = sub.add_parser("reconstruct", help="invert a dataset onto a voxel grid")
    rp.add_argument("--config", required=True)
    rp.add_argument("--out", required=True)
    rp.add_argument("--data", help="gridded dataset file; omitted = analytic data from config")
    rp.add_argument("--grid-n", type=int)
    rp.add_argument("--localized", action="store_true",
                    help="static scenes only: use direction-limited data")
    rp.add_argument("--slices", help="prefix for z-slice PGM previews")
    rp.add_argument("--progress", action="store_true")
    rp.set_defaults(fn=cmd_reconstruct)

    ap = sub.add_parser("analyze-crit", help="critical directions and root branches at a point")
    ap.add_argument("--config", required=True)
    ap.add_argument("--point", required=True, help='"x y z"')
    ap.add_argument("--theta", help='plane normal "x y z" for the root table')
    ap.add_argument("--s", type=float, help="source time for the arc analysis")
    ap.add_argument("--out", help="CSV for the root table")
    ap.set_defaults(fn=cmd_analyze_crit)

    xp = sub.add_parser("compare-xstarx",
                        help="inversion vs naive backprojection artifact energy")
    xp.add_argument("--config", required=True)
    xp.add_argument("--out-prefix", required=True)
    xp.add_argument("--data", help="gridded dataset file; omitted = analytic data")
    xp.add_argument("--grid-n", type=int)
    xp.add_argument("--progress", action="store_true")
    xp.set_defaults(fn=cmd_compare_xstarx)

    cp = sub.add_parser("converge", help="error vs motion amplitude sweep")
    cp.add_argument("--config", required=True)
    cp.add_argument("--eps", required=True, help="comma-separated amplitudes, e.g. 0.2,0.1,0")
    cp.add_argument("--out", required=True)
    cp.add_argument("--grid-n", type=int)
    cp.add_argument("--progress", action="store_true")
    cp.set_defaults(fn=cmd_converge)

    tp = sub.add_parser("selftest", help="run quick internal consistency checks")
    tp.set_defaults(fn=cmd_selftest)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except DynctError as exc:
        print(f"{exc.cli_tag}: {exc}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return 130


if __name__ == "__main__":
    sys.exit(main())
