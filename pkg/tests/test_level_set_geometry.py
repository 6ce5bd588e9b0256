import math

import mpmath as mp
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from parabolic_mvf.fields import ExactGaussianField, LevelFunction
from parabolic_mvf.level_set_geometry import (DegenerateBallError, GeometryConfig, ParabolicBall,
                                              check_gradient_estimate, check_inclusion_lemma, ellipsoid_slice,
                                              extract_sphere, in_ellipsoid_set, parabolic_rescale,
                                              parabolic_unscale, sample_ball, write_levelset_csv)
from parabolic_mvf.operator_model import make_operator


def _arc_length_oracle(r):
    mp.mp.dps = 30
    a = mp.mpf(r) ** 2 / (4 * mp.pi)

    def f(s):
        return mp.sqrt(1 + ((mp.log(a / s) - 1) / mp.sqrt(2 * s * mp.log(a / s))) ** 2)
    return float(2 * mp.quad(f, [0, a / mp.e, a]))


def test_ellipsoid_slice_depth(heat1):
    r = 0.8
    depth = (r / 2) ** 2 / (4 * math.pi)
    assert ellipsoid_slice(heat1, [0.0], 0.0, r, -0.999 * depth) is not None
    assert ellipsoid_slice(heat1, [0.0], 0.0, r, -1.001 * depth) is None
    assert ellipsoid_slice(heat1, [0.0], 0.0, r, 0.1) is None
    c, Ainv, rhs = ellipsoid_slice(heat1, [0.0], 0.0, r, -depth / math.e)
    # widest slice of a Gaussian super-level set
    assert rhs == pytest.approx(2 * depth / math.e, rel=1e-12)


def test_ellipsoid_stretches_with_diffusion():
    big = make_operator("scaled_heat", 2, {"scale": 4.0})
    unit = make_operator("heat", 2)
    rng = np.random.default_rng(3)
    x = rng.normal(size=(400, 2)) * 0.1
    t = -rng.uniform(0, 0.02, 400)
    r = 0.6
    # A = 4 I at radius r is the identity set at radius r/2, stretched by 2 in space
    assert np.array_equal(in_ellipsoid_set(big, [0, 0], 0, r, 2 * x, t),
                          in_ellipsoid_set(unit, [0, 0], 0, r / 2, x, t))


@pytest.mark.parametrize("r", [0.5, 1.0])
def test_heat_ball_depth_and_width(heat_field1, r):
    b = ParabolicBall(heat_field1, r)
    assert b.depth == pytest.approx(r ** 2 / (4 * math.pi), rel=1e-12)
    w, s = b.halfwidth()
    assert w == pytest.approx(r / math.sqrt(2 * math.pi * math.e), rel=1e-9)
    assert s == pytest.approx(b.depth / math.e, rel=1e-5)


def test_heat_ball_area_and_arc_length(heat_field1):
    b = ParabolicBall(heat_field1, 1.0)
    _, _, w, _ = b.volume_points()
    mp.mp.dps = 30
    a = 1 / (4 * mp.pi)
    area = float(mp.quad(lambda s: 2 * mp.sqrt(2 * s * mp.log(a / s)), [0, a / mp.e, a]))
    assert w.sum() == pytest.approx(area, rel=1e-8)
    mesh = b.surface_mesh()
    assert mesh.weights.sum() == pytest.approx(_arc_length_oracle(1.0), rel=1e-4)


def test_mesh_points_on_level(heat_field2):
    b = ParabolicBall(heat_field2, 0.7, cfg=GeometryConfig(k_max=12))
    mesh = b.surface_mesh()
    v = heat_field2.value(mesh.points_x, mesh.points_t)
    assert np.allclose(v, b.level, rtol=1e-10)
    assert np.all(mesh.points_t < 0)


def test_widest_point_normal_is_spatial(heat_field1):
    b = ParabolicBall(heat_field1, 1.0)
    w, s = b.halfwidth()
    F = LevelFunction(heat_field1)
    x = np.array([[w]])
    t = np.array([-s])
    g = F.grad_xt(x, t)[0]
    assert abs(g[0]) < 1e-4 * abs(g[1])


def test_nesting_and_shrinking(heat_field1, rng):
    small = ParabolicBall(heat_field1, 0.5)
    large = ParabolicBall(heat_field1, 1.0)
    x, t = sample_ball(small, 500, seed=1)
    assert np.all(large.contains(x, t))
    assert small.depth < large.depth
    assert small.halfwidth()[0] < large.halfwidth()[0]


@pytest.mark.parametrize("field_name", ["heat_field1", "trig_field"])
def test_inclusion_lemma(request, field_name):
    f = request.getfixturevalue(field_name)
    rep = check_inclusion_lemma(f, [0.25, 0.5], 41, 41)
    assert rep.inner_ok == [True, True] and rep.outer_ok == [True, True]
    assert rep.r_hat == 0.5


@settings(max_examples=25, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.floats(-2, 2), st.floats(-2, 2), st.floats(0.1, 5))
def test_rescale_round_trip(x, t, x0, t0, r):
    y, s = parabolic_rescale(np.array([x]), t, np.array([x0]), t0, r)
    xb, tb = parabolic_unscale(y, s, np.array([x0]), t0, r)
    assert xb[0] == pytest.approx(x, abs=1e-12) and tb == pytest.approx(t, abs=1e-12)


def test_rescaled_heat_ball_is_unit_ball(heat_field1):
    b1 = ParabolicBall(heat_field1, 1.0)
    b = ParabolicBall(heat_field1, 0.3)
    x, t = sample_ball(b, 200, seed=4)
    y, s = parabolic_rescale(x, t, heat_field1.x0, heat_field1.t0, 0.3)
    assert np.all(b1.contains(y, s))


def test_gradient_estimate_constant_below_one(heat_field1):
    rep = check_gradient_estimate(heat_field1, 1.0, n=1000)
    # for the heat kernel |d_x G| = |x| / (2 s) G
    assert rep.C_fit <= 1.0


def test_pole_is_on_the_boundary(heat_field1):
    b = ParabolicBall(heat_field1, 1.0)
    assert not b.contains(np.array([[0.0]]), np.array([0.0]))[0]
    # points just below the pole lie inside
    assert b.contains(np.array([[0.0]]), np.array([-1e-8]))[0]


def test_degenerate_radius_rejected(heat_field1):
    with pytest.raises(ValueError):
        ParabolicBall(heat_field1, 0.0)


def test_sphere_export(heat_field1, tmp_path):
    mesh = extract_sphere(heat_field1, 0.5)
    p = tmp_path / "ls.csv"
    write_levelset_csv(mesh, p)
    lines = p.read_text().splitlines()
    assert len(lines) == len(mesh.points_t) + 1
