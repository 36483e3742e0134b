from dataclasses import replace

import numpy as np
import pytest

from discopf.kkt import NewtonOptions, generation_cost, kkt_residual, newton_solve, penalized_objective
from discopf.network import build_network
from discopf.oracle import DenseBarrierOpf
from discopf.stage1 import (
    HomotopyFailure,
    HomotopyOptions,
    StepPolicy,
    TraceRow,
    base_settings,
    continuation,
    embed,
    initial_point,
    solve_stage1,
)
from discopf.kkt import NewtonResult
from discopf.pipeline import PipelineOptions, solve_case

from conftest import ALL_FIXTURES, DEVICE_FIXTURES, case, network, pipeline


def test_nu_zero_is_the_relaxation():
    net = network("t14")
    spb = embed(net, 0.0)
    assert spb.shunt_conductance == 0.0 and spb.adj_weight == 0.0
    assert spb.load_factor == 1.0
    assert np.array_equal(spb.pmin, net.pmin) and np.array_equal(spb.qmax, net.qmax)
    assert np.array_equal(spb.base, net.base_origin())


def test_nu_one_base_is_trivial():
    net = network("t4_tap")
    assert np.array_equal(embed(net, 1.0).base, net.trivial())


def test_nu_half_interpolates_base():
    c = case("t4_tap")
    xf = replace(c.transformers[0], prior_tap=1.04)
    net = build_network(replace(c, transformers=(xf,)))
    assert base_settings(net, 0.5)[0] == pytest.approx(1.02, abs=1e-15)


def test_flat_start_is_strictly_feasible_at_nu_one():
    for name in ALL_FIXTURES:
        spb = embed(network(name), 1.0)
        pt = initial_point(spb)
        L = spb.layout
        assert spb.pmin.max(initial=-1) < 0 < spb.pmax.min(initial=1)
        assert (pt.s > 0).all() and (pt.mu > 0).all()
        assert (pt.vec[L.p] == 0).all()


def test_options_validation():
    with pytest.raises(ValueError):
        StepPolicy(init=2.0)
    with pytest.raises(ValueError):
        StepPolicy(growth=1.0)
    with pytest.raises(ValueError):
        HomotopyOptions(k_slack=0.0)
    with pytest.raises(ValueError):
        embed(network("t2"), -0.1)


@pytest.mark.parametrize("name", ALL_FIXTURES)
def test_trace_invariants(name):
    r = pipeline(name)
    nus = r.stage1.nus
    assert nus[0] == 1.0 and nus[-1] == 0.0
    assert all(b < a for a, b in zip(nus, nus[1:]))
    assert all(np.isfinite(row.max_slack) for row in r.stage1.rows)


@pytest.mark.parametrize("name", ALL_FIXTURES)
def test_final_point_solves_relaxation_without_penalty(name):
    net = network(name)
    r = pipeline(name)
    theta = r.theta_star
    spb = embed(net, 0.0)
    assert np.abs(kkt_residual(spb, theta.vec, NewtonOptions.eps_min)).max() <= 1e-6
    f0 = generation_cost(net, theta.p)
    assert penalized_objective(spb, theta) == pytest.approx(f0 * net.obj_scale, rel=1e-14, abs=1e-14)


@pytest.mark.parametrize("name", DEVICE_FIXTURES)
def test_adjusted_settings_stay_in_range(name):
    net = network(name)
    theta = pipeline(name).theta_star
    d = embed(net, 0.0).settings(theta.vec[net.layout.x])
    assert (d >= net.lower() - 1e-9).all() and (d <= net.upper() + 1e-9).all()


def test_slack_structurally_absent_at_nu_zero():
    spb = embed(network("t14"), 0.0)
    pt = initial_point(spb)
    base = kkt_residual(spb, pt.vec, 1e-8)
    L = spb.layout
    pt.vec[L.isl_re] += 0.3
    pt.vec[L.isl_im] -= 0.2
    moved = kkt_residual(spb, pt.vec, 1e-8)
    rows = np.flatnonzero(base != moved)
    # only the inert slack stationarity rows react
    assert set(rows) <= set(range(L.isl_re.start, L.isl_im.stop))


def test_two_bus_matches_oracle():
    net = network("t2")
    theta, _ = solve_stage1(net)
    f = generation_cost(net, theta.p)
    o = DenseBarrierOpf(case("t2")).solve({})
    assert abs(f - o.objective) <= 1e-6 * (1 + abs(o.objective))


@pytest.mark.parametrize("k_adj", [0.0, 0.1])
def test_final_system_independent_of_kadj(k_adj):
    net = network("t4_tap")
    opts = HomotopyOptions(k_adj=k_adj)
    theta, trace = solve_stage1(net, opts)
    ref = embed(net, 0.0, HomotopyOptions())
    assert trace.nus[-1] == 0.0
    assert np.abs(kkt_residual(ref, theta.vec, NewtonOptions.eps_min)).max() <= 1e-6


def test_step_shrinks_and_fails_below_minimum():
    nus = []

    def solve_at(nu, pt):
        nus.append(nu)
        ok = nu >= 0.5
        return NewtonResult(pt, ok, 1, 0.0 if ok else 1.0, 1e-8, "converged" if ok else "max_iter")

    with pytest.raises(HomotopyFailure) as exc:
        continuation(solve_at, None, StepPolicy(init=0.25, min=1e-3), lambda nu, r: TraceRow(nu, 1, 0.0, 0.0, r.residual))
    assert 0.5 <= exc.value.last_nu < 0.5 + 2e-3
    assert nus[:3] == [1.0, 0.75, 0.375]
    assert len(exc.value.trace.rejected) > 0
    assert all(nu < 0.5 for nu, _ in exc.value.trace.rejected)


def test_trace_csv():
    text = pipeline("t4_tap").stage1.to_csv()
    lines = text.splitlines()
    assert lines[0] == "nu1,iterations,objective,max_slack,residual"
    assert float(lines[1].split(",")[0]) == 1.0


@pytest.mark.parametrize("name", DEVICE_FIXTURES)
def test_warm_start_trivial_solve(name):
    """Warm start from the prior settings: the first solve should take at most 5 iterations."""
    net = network(name)
    opts = HomotopyOptions(warm_start=True)
    spb = embed(net, 1.0, opts)
    res = newton_solve(spb, initial_point(spb))
    assert res.converged
    assert res.iterations <= 5


def test_kadj_path_divergence_on_t30():
    """Distinct k_adj values should reach distinct local optima on the 30-bus case.

    Compared on final polished results: relaxed Stage I points differ only by
    solver tolerance, which is not evidence of a different optimum.
    """
    net = network("t30")
    finals = []
    for k in (0.0, 0.01, 0.1, 1.0, 10.0):
        r = solve_case(net, PipelineOptions(homotopy=HomotopyOptions(k_adj=k)))
        assert r.solution.status == "converged"
        finals.append((r.solution.objective, tuple(dv.setting for dv in r.solution.devices)))
    objs = [f for f, _ in finals]
    spread = max(objs) - min(objs)
    settings_differ = len({d for _, d in finals}) > 1
    assert spread > 1e-8 or settings_differ, f"objective spread {spread:.2e}, settings {finals[0][1]}"
