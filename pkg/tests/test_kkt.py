import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from discopf.discretize import fixed_subproblem
from discopf.kkt import (
    AssemblyError,
    NewtonOptions,
    SubProblem,
    assemble_kkt,
    fraction_to_boundary,
    generation_cost,
    kkt_residual,
    newton_solve,
)
from discopf.network import PrimalDualPoint
from discopf.oracle import DenseBarrierOpf, case_devices, check_derivatives, random_interior_point
from discopf.stage1 import embed, initial_point

from conftest import ALL_FIXTURES, case, network, pipeline


def trivial_solve(name, **kw):
    spb = embed(network(name), 1.0)
    return spb, newton_solve(spb, initial_point(spb), NewtonOptions(**kw))


@pytest.mark.parametrize("name", ALL_FIXTURES)
def test_trivial_solution_residual(name):
    spb, res = trivial_solve(name, tol=1e-10)
    assert res.converged
    assert np.abs(kkt_residual(spb, res.point.vec, res.eps)).max() <= 1e-8


def test_fixed_point_returns_in_zero_iterations():
    spb, res = trivial_solve("t4_tap")
    again = newton_solve(spb, res.point)
    assert again.converged and again.iterations == 0
    assert np.array_equal(again.point.vec, res.point.vec)


def test_iterates_stay_interior_and_eps_is_monotone():
    spb, res = trivial_solve("t14")
    eps = [h["eps"] for h in res.history]
    assert all(b <= a for a, b in zip(eps, eps[1:]))
    assert res.eps <= NewtonOptions.eps_min * (1 + 1e-12)
    assert res.point.mu.min() > 0 and res.point.s.min() > 0


def test_determinism():
    a = trivial_solve("t30")[1]
    b = trivial_solve("t30")[1]
    assert a.iterations == b.iterations
    assert np.array_equal(a.point.vec, b.point.vec)


def test_fixed_setting_opf_matches_oracle():
    net = network("t4_tap")
    spb = fixed_subproblem(net, np.array([1.0]), 1e-8).with_(eps=None)
    res = newton_solve(spb, initial_point(spb))
    assert res.converged
    f = generation_cost(net, res.point.p)
    dev = case_devices(case("t4_tap"))[0].id
    o = DenseBarrierOpf(case("t4_tap")).solve({dev: 1.0})
    assert o.converged
    assert abs(f - o.objective) <= 1e-6 * (1 + abs(o.objective))


def test_stage2_full_offset_cancels_residual():
    r = pipeline("t4_tap")
    res, theta_p = r.residual, r.theta_prime
    spb = res.subproblem.with_(nu2=1.0, offset=res.R)
    G = kkt_residual(spb, theta_p.vec, spb.eps)
    assert np.abs(G).max() <= 1e-10 * (1 + np.abs(res.R).max())


@pytest.mark.parametrize("name", ["t4_tap", "t14"])
def test_jacobian_matches_finite_differences(name):
    rng = np.random.default_rng(3)
    spb = embed(network(name), 0.4)
    for _ in range(3):
        rep = check_derivatives(spb, random_interior_point(spb, rng).vec)
        assert rep.worst <= 1e-6


def test_nonfinite_residual_reports_row():
    spb = embed(network("t4_tap"), 1.0)
    pt = initial_point(spb)
    pt.vec[spb.layout.vr] = 0.0
    pt.vec[spb.layout.vi] = 0.0
    with pytest.raises(AssemblyError) as exc:
        with np.errstate(all="ignore"):
            kkt_residual(spb, pt.vec, 1e-8)
    assert exc.value.row >= 0


def test_point_dimension_checked():
    spb = embed(network("t2"), 1.0)
    other = PrimalDualPoint(network("t4_tap").layout)
    with pytest.raises(ValueError):
        assemble_kkt(spb, other)


def test_positive_start_required():
    spb = embed(network("t2"), 1.0)
    pt = initial_point(spb)
    pt.vec[spb.layout.mu] = 0.0
    with pytest.raises(ValueError):
        newton_solve(spb, pt)


def test_subproblem_validation():
    spb = embed(network("t2"), 1.0)
    with pytest.raises(ValueError):
        spb.with_(nu=1.5)
    with pytest.raises(ValueError):
        spb.with_(k_adj=-1.0)


def test_iteration_cap_reports_failure():
    spb, res = trivial_solve("t14", max_iter=1)
    assert not res.converged and res.status == "max_iter"


arrays = st.lists(st.floats(1e-6, 10.0), min_size=1, max_size=8)


@settings(max_examples=200, deadline=None)
@given(arrays, st.data())
def test_fraction_to_boundary_property(mu, data):
    n = len(mu)
    mu = np.array(mu)
    s = np.array(data.draw(st.lists(st.floats(1e-6, 10.0), min_size=n, max_size=n)))
    dmu = np.array(data.draw(st.lists(st.floats(-100.0, 100.0), min_size=n, max_size=n)))
    ds = np.array(data.draw(st.lists(st.floats(-100.0, 100.0), min_size=n, max_size=n)))
    gamma = 0.995
    a = fraction_to_boundary(mu, dmu, s, ds, gamma)
    assert 0.0 < a <= 1.0
    tol = 1e-12 * (1 + np.abs(mu))
    assert np.all(mu + a * dmu >= (1 - gamma) * mu - tol)
    assert np.all(s + a * ds >= (1 - gamma) * s - 1e-12 * (1 + np.abs(s)))


def test_stage_one_rows_include_every_block():
    spb = embed(network("t4_tap"), 0.5)
    assert isinstance(spb, SubProblem)
    sysm = assemble_kkt(spb, initial_point(spb))
    L = spb.layout
    assert sysm.residual.shape == (L.size,)
    assert sysm.jacobian.shape == (L.size, L.size)
