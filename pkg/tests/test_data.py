import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dynct.data import (
    AnalyticConeBeamDataset,
    DetectorGrid,
    DirectionalCutoff,
    GriddedConeBeamDataset,
    MaskedConeBeamData,
    _frame_rows,
    grangeat_plane_derivative,
    grangeat_rows,
)
from dynct.errors import CoverageError, DomainError, ValidationError
from dynct.geometry import (
    Box,
    CircleTrajectory,
    PulseAttenuation,
    RadialPulseDeformation,
    Scene,
    TwoCirclesTrajectory,
)
from dynct.phantom import GaussianBlob, Phantom


def _unit(v):
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v)


unit_vec = st.tuples(
    st.floats(-1.0, 1.0), st.floats(-1.0, 1.0), st.floats(-1.0, 1.0)
).map(np.array).filter(lambda v: np.linalg.norm(v) > 1e-3).map(_unit)


@given(unit_vec)
def test_frame_rows_orthonormal(a):
    e1, e2 = _frame_rows(a[None, :])
    for v in (e1[0], e2[0]):
        assert np.isclose(np.linalg.norm(v), 1.0, atol=1e-12)
        assert abs(float(v @ a)) < 1e-12
    assert abs(float(e1[0] @ e2[0])) < 1e-12


# -- analytic data ----------------------------------------------------------


def test_identity_dataset_uses_closed_form(circle_scene, blob_phantom):
    data = AnalyticConeBeamDataset(circle_scene, blob_phantom)
    s = 0.8
    z = circle_scene.trajectory.source_point(s)
    dirs = np.array([_unit([-0.9, -0.4, 0.05]), _unit([-1.0, -0.5, -0.1])])
    got = data.eval_dirs(s, dirs)
    want = blob_phantom.ray_integral(z, dirs)
    assert np.array_equal(got, want)


def test_quadrature_path_matches_closed_form(blob_phantom):
    # an attenuation weight forces the quadrature path; with the weight
    # constant 1 in disguise it must agree with the closed form
    scene_q = Scene(CircleTrajectory(3.0), None,
                    PulseAttenuation(1e-12, radius=1.9), u_box=Box.cube(1.0))
    scene_c = Scene(CircleTrajectory(3.0), u_box=Box.cube(1.0))
    dq = AnalyticConeBeamDataset(scene_q, blob_phantom, rel_tol=1e-9)
    dc = AnalyticConeBeamDataset(scene_c, blob_phantom)
    s = 2.1
    rng = np.random.default_rng(4)
    z = scene_q.trajectory.source_point(s)
    aim = -z + rng.normal(scale=0.3, size=(6, 3))
    dirs = aim / np.linalg.norm(aim, axis=1, keepdims=True)
    got = dq.eval_dirs(s, dirs)
    want = dc.eval_dirs(s, dirs)
    assert np.allclose(got, want, rtol=5e-9, atol=1e-13)


def test_eval_rays_pairs_groups_by_time(pulse_scene, blob_phantom):
    data = AnalyticConeBeamDataset(pulse_scene, blob_phantom)
    rng = np.random.default_rng(8)
    svals = np.repeat([0.7, 1.9, 11.0], 3)
    zs = np.atleast_2d(pulse_scene.trajectory.position(svals))
    aim = -zs + rng.normal(scale=0.25, size=(9, 3))
    dirs = aim / np.linalg.norm(aim, axis=1, keepdims=True)
    got = data.eval_rays_pairs(svals, dirs)
    for i in range(9):
        one = data.eval_dirs(svals[i], dirs[i][None, :])[0]
        assert np.isclose(got[i], one, rtol=1e-12)


# -- plane-derivative probe -------------------------------------------------


def test_probe_matches_radon_derivative(circle_scene, blob_phantom):
    data = AnalyticConeBeamDataset(circle_scene, blob_phantom)
    rng = np.random.default_rng(0)
    for _ in range(5):
        s = rng.uniform(0.3, 6.0)
        alpha = _unit(rng.normal(size=3))
        z = circle_scene.trajectory.source_point(s)
        got = grangeat_plane_derivative(data, s, alpha, n_circle=512, tau_h=1e-3)
        want = -blob_phantom.radon_p_derivative(alpha, float(alpha @ z))
        assert np.isclose(got, want, rtol=2e-5, atol=1e-10)


def test_probe_scales_with_inverse_norm_squared(circle_scene, blob_phantom):
    data = AnalyticConeBeamDataset(circle_scene, blob_phantom)
    s = 1.7
    alpha = _unit([0.2, -0.8, 0.5])
    c = 2.7
    a = grangeat_plane_derivative(data, s, alpha, n_circle=256)
    b = grangeat_plane_derivative(data, s, c * alpha, n_circle=256)
    assert np.isclose(b, a / c**2, rtol=1e-10)


def test_probe_richardson_improves_on_plain(circle_scene, blob_phantom):
    data = AnalyticConeBeamDataset(circle_scene, blob_phantom)
    s = 0.6
    alpha = _unit([0.5, 0.6, 0.4])
    z = circle_scene.trajectory.source_point(s)
    want = -blob_phantom.radon_p_derivative(alpha, float(alpha @ z))
    tau = 0.02
    plain = grangeat_rows(data, np.array([s]), alpha[None, :], n_circle=512,
                          tau_h=tau, richardson=False)[0]
    rich = grangeat_rows(data, np.array([s]), alpha[None, :], n_circle=512,
                         tau_h=tau, richardson=True)[0]
    assert abs(rich - want) < abs(plain - want)


def test_probe_rejects_bad_tau(circle_scene, blob_phantom):
    data = AnalyticConeBeamDataset(circle_scene, blob_phantom)
    with pytest.raises(ValidationError):
        grangeat_plane_derivative(data, 1.0, np.array([1.0, 0.0, 0.0]), tau_h=0.5)
    with pytest.raises(ValidationError):
        grangeat_plane_derivative(data, 1.0, np.array([1.0, 0.0, 0.0]), tau_h=0.0)


# -- gridded data -----------------------------------------------------------


@pytest.fixture(scope="module")
def gridded(circle_scene, blob_phantom):
    return GriddedConeBeamDataset.synthesize(circle_scene, blob_phantom,
                                             n_s=32, n_u=72, n_v=72)


def test_detector_projection_roundtrip(circle_scene):
    det = DetectorGrid(circle_scene, 16, 24, 24)
    s = float(det.s_grids[0][5])
    dirs = det.dirs(0, s)
    u, v, fwd = det.project(0, s, dirs.reshape(-1, 3))
    assert np.all(fwd)
    U, V = np.meshgrid(det.u_grid, det.v_grid, indexing="ij")
    assert np.allclose(u.reshape(24, 24), U, atol=1e-12)
    assert np.allclose(v.reshape(24, 24), V, atol=1e-12)


def test_gridded_matches_analytic_at_grid_times(gridded, circle_scene, blob_phantom):
    # at a stored view the only error is detector bilinear interpolation,
    # second order in the pixel size: doubling resolution should cut it
    analytic = AnalyticConeBeamDataset(circle_scene, blob_phantom)
    s = float(gridded.detector.s_grids[0][7])
    rng = np.random.default_rng(2)
    z = circle_scene.trajectory.source_point(s)
    aim = -z + rng.normal(scale=0.2, size=(40, 3))
    dirs = aim / np.linalg.norm(aim, axis=1, keepdims=True)
    want = analytic.eval_dirs(s, dirs)
    scale = float(np.max(np.abs(want)))
    err = float(np.max(np.abs(gridded.eval_dirs(s, dirs) - want)))
    assert err < 5e-2 * scale
    fine = GriddedConeBeamDataset.synthesize(
        circle_scene, blob_phantom, n_s=32, n_u=144, n_v=144)
    err_fine = float(np.max(np.abs(fine.eval_dirs(s, dirs) - want)))
    assert err_fine < 2e-2 * scale
    assert err / err_fine > 2.0


def test_gridded_interpolates_between_times(gridded, circle_scene, blob_phantom):
    # between views the blend rebins through the coverage midpoint, so the
    # residual error is detector-limited, not source-motion-limited
    analytic = AnalyticConeBeamDataset(circle_scene, blob_phantom)
    sg = gridded.detector.s_grids[0]
    s = 0.5 * (sg[3] + sg[4])
    z = circle_scene.trajectory.source_point(s)
    dirs = _unit(-z + np.array([0.1, -0.2, 0.1]))[None, :]
    want = analytic.eval_dirs(s, dirs)[0]
    got = gridded.eval_dirs(s, dirs)[0]
    assert abs(got - want) < 0.1 * abs(want)
    fine = GriddedConeBeamDataset.synthesize(
        circle_scene, blob_phantom, n_s=32, n_u=144, n_v=144)
    got_fine = fine.eval_dirs(s, dirs)[0]
    assert abs(got_fine - want) < 0.03 * abs(want)


def test_gridded_rejects_uncovered_time(gridded):
    # the cell-centered time grid spans each segment, so a time the grid
    # cannot serve is also outside the trajectory's own domain
    sg = gridded.detector.s_grids[0]
    cell = sg[1] - sg[0]
    with pytest.raises(DomainError):
        gridded.eval_dirs(float(sg[0] - 0.6 * cell), np.array([[1.0, 0.0, 0.0]]))


def test_gridded_zero_outside_coverage(gridded, circle_scene):
    s = float(gridded.detector.s_grids[0][3])
    z = circle_scene.trajectory.source_point(s)
    # a ray pointing away from the scene never crosses the coverage box
    away = _unit(z)[None, :]
    assert gridded.eval_dirs(s, away)[0] == 0.0


def test_gridded_flags_visible_but_unrecorded(circle_scene, blob_phantom):
    # detector far too small for the blob: the stored cone boundary is
    # bright, so rays through coverage that leave the cone are truncation
    data = GriddedConeBeamDataset.synthesize(
        circle_scene, blob_phantom, n_s=16, n_u=16, n_v=16,
        u_half=0.05, edge_check=False)
    s = float(data.detector.s_grids[0][4])
    z = circle_scene.trajectory.source_point(s)
    corner = np.array([0.9, 0.9, 0.9])
    d = _unit(corner - z)[None, :]
    with pytest.raises(CoverageError):
        data.eval_dirs(s, d)


def test_gridded_dark_boundary_reads_zero_outside_cone(circle_scene):
    # all-zero recording certifies nothing visible was cut off, so the
    # same out-of-cone query is an honest zero rather than an error
    det = DetectorGrid(circle_scene, 16, 16, 16, u_half=0.05)
    blocks = [np.zeros((16, 16, 16))]
    data = GriddedConeBeamDataset(circle_scene, det, blocks, Box.cube(1.0))
    s = float(det.s_grids[0][4])
    z = circle_scene.trajectory.source_point(s)
    d = _unit(np.array([0.9, 0.9, 0.9]) - z)[None, :]
    assert data.eval_dirs(s, d) == pytest.approx(0.0, abs=0.0)


def test_file_roundtrip_preserves_values(tmp_path, gridded, circle_scene):
    from dynct.fileio import read_dataset, write_dataset

    path = str(tmp_path / "d.cbd")
    write_dataset(path, gridded)
    back = read_dataset(path, circle_scene)
    for a, b in zip(back.values, gridded.values):
        assert np.array_equal(a, b)
    assert back.detector.u_half == gridded.detector.u_half
    assert np.array_equal(back.coverage_box.lo, gridded.coverage_box.lo)


def test_file_rejects_mismatched_scene(tmp_path, gridded):
    from dynct.errors import GridMismatchError
    from dynct.fileio import read_dataset, write_dataset

    path = str(tmp_path / "d.cbd")
    write_dataset(path, gridded)
    # same parameter span, different source curve: caught by the stored
    # source fingerprints, not by the segment table
    other = Scene(CircleTrajectory(4.0), u_box=Box.cube(1.0))
    with pytest.raises(GridMismatchError):
        read_dataset(path, other)
    two = Scene(TwoCirclesTrajectory(3.0), u_box=Box.cube(1.0))
    with pytest.raises(GridMismatchError):
        read_dataset(path, two)


# -- masking and directional cutoff ----------------------------------------


def test_masked_data_zeroes_outside_cone(circle_scene, blob_phantom):
    base = AnalyticConeBeamDataset(circle_scene, blob_phantom)
    point = np.array([0.2, -0.1, 0.05])
    masked = MaskedConeBeamData(base, point, cutoff_angle=0.3)
    s = 1.2
    z = circle_scene.trajectory.source_point(s)
    toward = _unit(point - z)
    off = _unit(toward + 0.8 * np.array([0.0, 0.0, 1.0]))
    vals = masked.eval_dirs(s, np.stack([toward, off]))
    base_vals = base.eval_dirs(s, np.stack([toward, off]))
    assert vals[0] == base_vals[0]
    assert vals[1] == 0.0 and base_vals[1] != 0.0


def test_cutoff_window_profile():
    cut = DirectionalCutoff(2.0, eps_inner=0.05, eps_outer=0.3)
    assert cut.weight_of_angle(0.0) == 1.0
    assert cut.weight_of_angle(cut.a1 * 0.99) == 1.0
    assert cut.weight_of_angle(cut.a2 * 1.01) == 0.0
    mids = np.linspace(cut.a1, cut.a2, 50)
    w = np.array([cut.weight_of_angle(a) for a in mids])
    assert np.all(np.diff(w) <= 1e-12)
    assert w[0] > 0.99 and w[-1] < 0.01


def test_cutoff_rejects_incompatible_sizes():
    with pytest.raises(ValidationError):
        DirectionalCutoff(0.6, eps_inner=0.55, eps_outer=0.05)


def test_cutoff_weights_match_scalar(circle_scene):
    cut = DirectionalCutoff(circle_scene.d_min)
    point = np.array([0.1, 0.3, -0.2])
    rng = np.random.default_rng(6)
    svals = rng.uniform(0.1, 6.1, 12)
    zs = np.atleast_2d(circle_scene.trajectory.position(svals))
    aim = point - zs + rng.normal(scale=0.3, size=(12, 3))
    dirs = aim / np.linalg.norm(aim, axis=1, keepdims=True)
    got = cut.weights_pairs(zs, point, dirs)
    for i in range(12):
        ang = np.arccos(np.clip(float(dirs[i] @ _unit(point - zs[i])), -1.0, 1.0))
        assert np.isclose(got[i], cut.weight_of_angle(ang), atol=1e-12)
