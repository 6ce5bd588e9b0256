import networkx as nx
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from parabolic_mvf.operator_model import make_operator
from parabolic_mvf.propagation import (DomainError, DomainGrid, _offsets, check_strong_max_principle,
                                       dumbbell_grid, mvf_propagation_step, reachable_set, write_mask_csv)
from parabolic_mvf.scenario_cli import SolutionSpec, build_solution, source_term


def _box(n_x=21, n_t=21, pred=None):
    ts = np.linspace(-2, 0, n_t)
    xs = np.linspace(-1, 1, n_x)
    return DomainGrid.from_predicate(ts, [xs], pred or (lambda X, T: np.ones(T.shape, bool)))


def _graph_oracle(grid, src, v_max, delta):
    """Reachability by networkx over the same jump rule, built edge by edge."""
    k = int(round(delta / grid.dt))
    offs = _offsets(grid.h, v_max * delta)
    n_t, n_x = grid.inside.shape
    G = nx.DiGraph()
    for it in range(k, n_t):
        for ix in range(n_x):
            if not grid.inside[it, ix]:
                continue
            for (o,) in offs:
                jx = ix + o
                if not 0 <= jx < n_x or not grid.inside[it - k, jx]:
                    continue
                mids = [(it - l, int(np.rint(ix + o * l / k))) for l in range(1, k)]
                if all(grid.inside[m] for m in mids):
                    G.add_edge((it, ix), (it - k, jx))
    mask = np.zeros_like(grid.inside)
    mask[src] = True
    if src in G:
        for node in nx.descendants(G, src):
            mask[node] = True
    return mask


def test_box_cone():
    g = _box()
    reg = reachable_set(g, ([0.0], 0.0), 1.0, 0.1)
    it0, ix0 = reg.source
    for it in range(g.inside.shape[0]):
        for ix in range(g.inside.shape[1]):
            assert reg.mask[it, ix] == (it <= it0 and abs(ix - ix0) <= it0 - it)


def test_full_box_reached_at_high_speed():
    g = _box()
    reg = reachable_set(g, ([0.0], 0.0), 10.0, 0.1)
    assert reg.mask[:-1].all()


def test_wall_blocks():
    g = _box(pred=lambda X, T: np.abs(X[..., 0]) > 1e-9)
    reg = reachable_set(g, ([-0.5], 0.0), 1.0, 0.1)
    x, t = reg.points()
    assert np.all(x[:, 0] < 0)


def test_dumbbell_expected_shape():
    g = dumbbell_grid()
    reg = reachable_set(g, ([0.8], 0.0), 1.0, 0.1)
    x, t = reg.points()
    xs = g.axes[0]
    # below the neck the set spreads at unit speed from |x| <= 0.1
    for it, tv in enumerate(g.ts):
        row = reg.mask[it]
        if tv < -1.0 - 1e-9:
            expect = np.abs(xs) <= 0.1 + (-1.0 - tv) + 1e-9
        elif tv > -1.0 + 1e-9:
            expect = np.abs(xs - 0.8) <= -tv + 1e-9
        else:
            expect = np.abs(xs) <= 0.1 + 1e-9
        assert np.array_equal(row, expect), tv


@pytest.mark.parametrize("v,delta", [(1.0, 0.1), (2.0, 0.2), (0.5, 0.3)])
def test_matches_graph_oracle(v, delta):
    g = dumbbell_grid()
    reg = reachable_set(g, ([0.8], 0.0), v, delta)
    assert np.array_equal(reg.mask, _graph_oracle(g, reg.source, v, delta))


@settings(max_examples=20, deadline=None)
@given(st.sampled_from([0.5, 1.0, 2.0]), st.sampled_from([1.5, 2.0, 4.0]), st.sampled_from([1, 2, 4]))
def test_monotone_in_speed_and_step(v, factor, k):
    g = dumbbell_grid()
    z0 = ([0.8], 0.0)
    slow = reachable_set(g, z0, v, 0.1 * k).mask
    fast = reachable_set(g, z0, v * factor, 0.1 * k).mask
    assert np.all(fast[slow])
    if k > 1:
        fine = reachable_set(g, z0, v, 0.1).mask
        assert np.all(fine[slow])


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000))
def test_transitive(seed):
    g = dumbbell_grid()
    reg = reachable_set(g, ([0.8], 0.0), 1.0, 0.1)
    idx = np.argwhere(reg.mask)
    pick = tuple(idx[np.random.default_rng(seed).integers(len(idx))])
    x1, t1 = g.point(pick)
    sub = reachable_set(g, (x1, t1), 1.0, 0.1)
    assert np.all(reg.mask[sub.mask])


def test_curves_are_admissible():
    g = dumbbell_grid()
    reg = reachable_set(g, ([0.8], 0.0), 1.0, 0.1)
    target = (0, 2)
    assert reg.mask[target]
    c = reg.curve_to(target)
    assert c.valid()
    assert c.x[0, 0] == pytest.approx(0.8) and c.t[0] == pytest.approx(0.0)
    assert c.x[-1, 0] == pytest.approx(g.axes[0][2]) and c.t[-1] == pytest.approx(-2.0)
    steps = np.abs(np.diff(c.x[:, 0]))
    assert np.all(steps <= 1.0 * 0.1 + 0.05 + 1e-12)
    assert g.inside[15, 0] and not reg.mask[15, 0]
    with pytest.raises(ValueError):
        reg.curve_to((15, 0))


def test_input_validation():
    g = dumbbell_grid()
    with pytest.raises(ValueError):
        reachable_set(g, ([0.8], 0.0), 1.0, 0.15)
    with pytest.raises(ValueError):
        reachable_set(g, ([0.8], 0.0), 0.0, 0.1)
    with pytest.raises(DomainError):
        reachable_set(g, ([0.85], 0.0), 1.0, 0.1)
    with pytest.raises(DomainError):
        reachable_set(g, ([0.5], -1.0), 1.0, 0.1)


def test_mask_csv(tmp_path):
    g = dumbbell_grid(n_x=5, n_t=5)
    reg = reachable_set(g, ([0.5], 0.0), 1.0, 0.5)
    p = tmp_path / "m.csv"
    write_mask_csv(reg, p)
    rows = p.read_text().splitlines()
    assert rows[0] == "t,x1,reachable"
    assert len(rows) == int(g.inside.sum()) + 1


@pytest.fixture(scope="module")
def dumbbell_region():
    return reachable_set(dumbbell_grid(), ([0.8], 0.0), 1.0, 0.1)


def _sol(op, **kw):
    return build_solution(SolutionSpec(**kw), op)


def test_smp_constant(heat1, dumbbell_region):
    u = _sol(heat1, kind="constant", value=3.0)
    rep = check_strong_max_principle(u, source_term(heat1, u), heat1, dumbbell_region)
    assert rep.precondition_ok and rep.conclusion_holds
    assert rep.max_dev_u == 0.0


def test_smp_precondition_fails_for_non_maximal(heat1, dumbbell_region):
    u = _sol(heat1, kind="caloric_quadratic")
    rep = check_strong_max_principle(u, source_term(heat1, u), heat1, dumbbell_region)
    assert not rep.precondition_ok and rep.conclusion_holds is None
    assert any("maximum" in m for m in rep.precondition_failures)


def test_smp_negative_control(heat1, dumbbell_region):
    # u = t - t0 <= 0 with u(z0) = 0, but L u = -1 violates f >= 0
    u = _sol(heat1, kind="time")
    rep = check_strong_max_principle(u, source_term(heat1, u), heat1, dumbbell_region, mode="zero")
    assert not rep.precondition_ok
    assert any("f >= 0" in m for m in rep.precondition_failures)


def test_smp_zero_mode_holds_for_zero(heat1, dumbbell_region):
    u = _sol(heat1, kind="constant", value=0.0)
    rep = check_strong_max_principle(u, None, heat1, dumbbell_region, mode="zero")
    assert rep.precondition_ok and rep.conclusion_holds


def test_smp_rejects_potential(dumbbell_region):
    op = make_operator("heat", 1, {"potential": 1.0})
    u = _sol(op, kind="constant", value=1.0)
    rep = check_strong_max_principle(u, None, op, dumbbell_region)
    assert "zero-order coefficient is not 0" in rep.precondition_failures


@pytest.mark.parametrize("rho", [0.3, 0.5, 1.0])
def test_propagation_step_constant(heat1, heat_field1, rho):
    u = _sol(heat1, kind="constant", value=2.0)
    rep = mvf_propagation_step(u, heat1, heat_field1, rho, f=lambda x, t: np.ones(np.shape(t)))
    assert abs(rep.deficit) < 1e-10
    assert rep.f_term <= 0
    assert rep.is_local_max and rep.n_deviating == 0


def test_propagation_step_caloric_non_constant(heat1, heat_field1):
    u = _sol(heat1, kind="coordinate")
    rep = mvf_propagation_step(u, heat1, heat_field1, 0.5)
    assert not rep.is_local_max
    assert abs(rep.deficit) < 1e-6
    assert rep.n_deviating > 0
