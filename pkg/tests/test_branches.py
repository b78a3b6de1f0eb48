import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dynct.branches import (
    AdmissibilityParams,
    BranchScanner,
    antipodal_angle,
    arc_endpoint_limit,
    branch_theta_crit,
    continue_root,
    continue_roots,
    ds_dt,
    find_admissible_roots,
    partition_weights,
    smooth_window,
    theta_crit,
    xi_crit_arc,
)
from dynct.errors import (
    ContinuationError,
    DegenerateDirectionError,
    NoAdmissibleRootError,
    ValidationError,
)
from dynct.geometry import (
    Box,
    CircleTrajectory,
    LineSegmentTrajectory,
    RadialPulseDeformation,
    Scene,
)

EX = np.array([1.0, 0.0, 0.0])
EZ = np.array([0.0, 0.0, 1.0])


# -- windows and angles -----------------------------------------------------


def test_smooth_window_shape():
    eps = 0.2
    assert smooth_window(0.0, eps) == 0.0
    assert smooth_window(0.19, eps) == 0.0
    assert smooth_window(0.41, eps) == 1.0
    mid = smooth_window(0.3, eps)
    assert 0.0 < mid < 1.0
    assert np.isclose(smooth_window(0.3, eps), 0.5)


def test_smooth_window_is_c1_at_the_seams():
    eps = 0.2

    def slope(edge, d):
        return (smooth_window(edge + d, eps) - smooth_window(edge - d, eps)) / (2 * d)

    for edge in (eps, 2 * eps):
        # the one-sided slope is O(d) at the seams, so the derivative is
        # continuous there; check the decade scaling
        assert abs(slope(edge, 1e-6)) < 0.02 * abs(slope(edge, 1e-4)) + 1e-12


@given(st.floats(0.0, 1.0), st.floats(0.0, 1.0))
def test_smooth_window_monotone(a, b):
    lo, hi = sorted((a, b))
    assert smooth_window(lo, 0.2) <= smooth_window(hi, 0.2) + 1e-15


def test_smooth_window_rejects_bad_eps():
    with pytest.raises(ValidationError):
        smooth_window(0.1, 0.0)


unit_vec = st.tuples(
    st.floats(-1.0, 1.0), st.floats(-1.0, 1.0), st.floats(-1.0, 1.0)
).map(np.array).filter(lambda v: np.linalg.norm(v) > 1e-3).map(
    lambda v: v / np.linalg.norm(v)
)


@given(unit_vec)
def test_antipodal_angle_identifies_opposites(u):
    # arccos loses half the digits near 1, hence the 1e-7
    assert antipodal_angle(u, -u) < 1e-7
    assert antipodal_angle(u, u) < 1e-7


@given(unit_vec, unit_vec)
def test_antipodal_angle_range(u, v):
    a = antipodal_angle(u, v)
    assert -1e-12 <= a <= np.pi / 2 + 1e-12


# -- circle fixture: closed-form roots --------------------------------------
# For the unit-speed-free circle z(s) = 3 (cos s, sin s, 0), x0 = 0 and
# direction e_x: g(s) = e_x . (x0 - z)/|x0 - z| = -cos(s), so the roots
# are exactly pi/2 and 3 pi/2 with |g'| = 1 there.


def test_circle_roots_closed_form(circle_scene):
    x0 = np.zeros(3)
    roots = find_admissible_roots(circle_scene, x0, EX)
    svals = sorted(r.s for r in roots)
    assert len(svals) == 2
    assert np.isclose(svals[0], np.pi / 2, atol=1e-9)
    assert np.isclose(svals[1], 3 * np.pi / 2, atol=1e-9)
    for r in roots:
        assert np.isclose(r.margin, 1.0, atol=1e-6)
        assert np.isclose(r.end_dist, np.pi / 2, atol=1e-9)


def test_scanner_matches_single_direction_api(circle_scene):
    x0 = np.array([0.1, -0.2, 0.05])
    rng = np.random.default_rng(3)
    dirs = rng.normal(size=(6, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    dirs[np.abs(dirs[:, 2]) > 0.8] *= np.array([1.0, 1.0, 0.1])
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    scanner = BranchScanner(circle_scene, x0)
    batched = scanner.roots_for(dirs)
    for i in range(dirs.shape[0]):
        single = find_admissible_roots(circle_scene, x0, dirs[i], scanner=scanner)
        assert len(single) == len(batched[i])
        for a, b in zip(single, batched[i]):
            assert np.isclose(a.s, b.s, atol=1e-12)


def test_root_residuals_are_tiny(circle_scene):
    x0 = np.array([0.3, 0.1, -0.2])
    th = np.array([0.6, -0.5, 0.1])
    th /= np.linalg.norm(th)
    for r in find_admissible_roots(circle_scene, x0, th):
        g = float(th @ circle_scene.gamma_dot(r.s, x0))
        assert abs(g) < 1e-12


def test_theta_crit_closed_form(circle_scene):
    # at s = pi/2, x0 = 0: gamma_dot = (0,-1,0), its s-derivative is
    # tangential, so the critical direction is +-e_z
    tc = theta_crit(circle_scene, np.pi / 2, np.zeros(3))
    assert np.isclose(abs(float(tc @ EZ)), 1.0, atol=1e-10)


def test_theta_crit_degenerate_for_head_on_line():
    # source moving straight toward the point: gamma_dot is constant,
    # its s-derivative vanishes, no critical direction exists
    sc = Scene(LineSegmentTrajectory((0, 0, 5), (0, 0, 3)), u_box=Box.cube(1.0))
    with pytest.raises(DegenerateDirectionError):
        theta_crit(sc, 0.5, np.zeros(3))


def test_zero_function_yields_no_roots():
    # same degenerate geometry: g(s) = theta . e_z vanishes identically
    # for horizontal theta; the scanner must not fabricate roots
    sc = Scene(LineSegmentTrajectory((0, 0, 5), (0, 0, 3)), u_box=Box.cube(1.0))
    # margin auto-calibration rejects the scene outright
    with pytest.raises(ValidationError):
        AdmissibilityParams.for_scene(sc, x0=np.zeros(3))
    params = AdmissibilityParams(eps_margin=0.05)
    with pytest.raises(NoAdmissibleRootError):
        partition_weights(sc, np.zeros(3), EX, params=params)


def test_ds_dt_closed_form(circle_scene):
    # translating x0 along e_x moves the root at pi/2 with ds/dt = -1/3
    val = ds_dt(circle_scene, np.zeros(3), EX, np.pi / 2)
    assert np.isclose(val, -1.0 / 3.0, atol=1e-6)


def test_continuation_reaches_closed_form_root(circle_scene):
    x0 = np.zeros(3)
    roots = find_admissible_roots(circle_scene, x0, EX)
    br = min(roots, key=lambda r: r.s)
    params = AdmissibilityParams.for_scene(circle_scene, x0=x0)
    x1 = np.array([0.1, 0.0, 0.0])
    s1 = continue_root(circle_scene, br, x1, EX, params)
    # plane normal e_x through (0.1, 0, 0): 3 cos s = 0.1
    assert np.isclose(s1, np.arccos(0.1 / 3.0), atol=1e-9)


def test_continuation_guard_trips_on_large_jump(circle_scene):
    x0 = np.zeros(3)
    roots = find_admissible_roots(circle_scene, x0, EX)
    br = min(roots, key=lambda r: r.s)
    params = AdmissibilityParams.for_scene(circle_scene, x0=x0)
    far = np.array([0.9, 0.0, 0.0])
    with pytest.raises(ContinuationError):
        continue_roots(circle_scene, np.array([br.s]), far[None, :], EX[None, :],
                       np.array([br.segment]), params)


# -- admissibility windows --------------------------------------------------


def test_endpoint_window_excludes_near_end_roots(circle_scene):
    x0 = np.zeros(3)
    # pi/2 sits a quarter turn from both segment ends; an endpoint
    # clearance above that must reject every root
    params = AdmissibilityParams.for_scene(circle_scene, x0=x0, eps_end_frac=0.3)
    assert not find_admissible_roots(circle_scene, x0, EX, params=params)


def test_margin_threshold_excludes_grazing_roots(circle_scene):
    x0 = np.zeros(3)
    params = AdmissibilityParams.for_scene(circle_scene, x0=x0)
    # direction almost parallel to the rotation axis: the plane meets
    # the circle at grazing incidence, margins collapse
    th = np.array([0.02, 0.0, 1.0])
    th /= np.linalg.norm(th)
    roots = find_admissible_roots(circle_scene, x0, th, params=params)
    for r in roots:
        assert r.margin > params.eps_margin


def test_partition_weights_symmetric_pair(circle_scene):
    part = partition_weights(circle_scene, np.zeros(3), EX)
    assert len(part.n_values) == 2
    assert np.allclose(part.n_values, 0.5)
    assert np.isclose(part.total, sum(part.n_values) * 0 + part.total)


@given(unit_vec)
def test_partition_sums_to_one(two_circles_scene, th):
    x0 = np.array([0.15, -0.1, 0.2])
    try:
        part = partition_weights(two_circles_scene, x0, th)
    except NoAdmissibleRootError:
        return
    assert np.isclose(float(np.sum(part.n_values)), 1.0, atol=1e-12)
    assert np.all(np.asarray(part.n_values) >= 0.0)


# -- critical arcs ----------------------------------------------------------


def test_static_arc_collapses_to_point_limit(circle_scene):
    x0 = np.array([0.2, 0.1, -0.15])
    s = 1.1
    tc = theta_crit(circle_scene, s, x0)
    arc = xi_crit_arc(circle_scene, s, x0)
    assert not arc.degenerate
    angles = [antipodal_angle(d, tc) for d in arc.directions]
    assert max(angles) < 1e-9


def test_arc_min_angle_zero_when_direction_on_arc(circle_scene):
    x0 = np.array([0.2, 0.1, -0.15])
    arc = xi_crit_arc(circle_scene, 1.1, x0)
    assert arc.min_angle_to(arc.directions[0]) < 1e-12


def test_dynamic_arc_endpoint_matches_point_limit():
    deform = RadialPulseDeformation(0.12, radius=1.9, freq=1.0)
    sc = Scene(CircleTrajectory(3.0), deform, u_box=Box.cube(1.0))
    x0 = np.array([0.25, -0.1, 0.3])
    s = 0.9
    lim = arc_endpoint_limit(sc, s, x0)
    tc = theta_crit(sc, s, x0)
    assert antipodal_angle(lim, tc) < 1e-4


def test_dynamic_arc_spreads_away_from_endpoint():
    deform = RadialPulseDeformation(0.3, radius=1.9, freq=1.0)
    sc = Scene(CircleTrajectory(3.0), deform, u_box=Box.cube(1.0))
    x0 = np.array([0.25, -0.1, 0.3])
    s = 0.9
    tc = theta_crit(sc, s, x0)
    arc = xi_crit_arc(sc, s, x0)
    assert not arc.degenerate
    angles = [antipodal_angle(d, tc) for d in arc.directions]
    # a genuinely moving object produces an extended critical set
    assert max(angles) > 1e-3


def test_branch_theta_crit_matches_function(circle_scene):
    x0 = np.array([0.1, 0.2, -0.1])
    th = np.array([0.3, 0.5, 0.8])
    th /= np.linalg.norm(th)
    for br in find_admissible_roots(circle_scene, x0, th):
        tc_a = branch_theta_crit(br)
        tc_b = theta_crit(circle_scene, br.s, x0)
        assert antipodal_angle(tc_a, tc_b) < 1e-7
