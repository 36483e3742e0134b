from dataclasses import replace

import numpy as np
import pytest

from discopf.case_io import BranchRecord
from discopf.network import (
    BranchStamp,
    PrimalDualPoint,
    branch_current,
    branch_jet,
    build_network,
    median_setting,
)

from conftest import ALL_FIXTURES, DEVICE_FIXTURES, case, network


def admittance(net, tau, phi, bsh):
    """Bus admittance matrix assembled from unit-voltage probes of each branch."""
    n = net.n_bus
    Y = np.zeros((n, n), dtype=complex)
    for e in range(net.n_branch):
        f, t = net.br_from[e], net.br_to[e]
        st = BranchStamp(net.ys[e], net.bc[e])
        for col, (vf, vt) in ((f, (1.0, 0.0)), (t, (0.0, 1.0))):
            i_f, i_t = branch_current(st, vf, vt, tau[e], phi[e])
            Y[f, col] += i_f
            Y[t, col] += i_t
    Y[np.diag_indices(n)] += net.gs + 1j * net.bs
    for k, b in enumerate(net.sh_bus):
        Y[b, b] += 1j * bsh[k]
    return Y


def test_two_bus_counts():
    net = network("t2")
    lay = net.layout
    assert net.n_d == 0
    assert lay.n_x == 2 * 2 + 2 + 2 * 2
    assert lay.size == lay.n_x + lay.m_eq + 2 * lay.m_in


def test_median_default_without_prior():
    allowed = (0.9, 0.95, 1.0, 1.05, 1.1)
    assert median_setting(allowed) == 1.0
    net = network("t4_tap", priors=False)
    (ctl,) = net.controls
    assert ctl.base_origin == 1.0 and ctl.prior is None
    # even count takes the lower median
    assert median_setting((0.9, 1.0, 1.1, 1.2)) == 1.0


def test_shunt_default_is_switched_off():
    net = network("r5_shunt.raw", priors=False)
    sh = [c for c in net.controls if c.kind == "shunt_susceptance_pu"]
    assert sh and all(c.base_origin == 0.0 for c in sh)


@pytest.mark.parametrize("name", ALL_FIXTURES)
def test_control_invariants(name):
    net = network(name)
    elements = set()
    for c in net.controls:
        assert all(a < b for a, b in zip(c.allowed, c.allowed[1:]))
        assert c.lower <= c.trivial <= c.upper
        assert c.lower <= c.base_origin <= c.upper
        elements.add((c.kind, c.element))
    assert len(elements) == len(net.controls)


@pytest.mark.parametrize("name", ALL_FIXTURES)
def test_index_map_is_bijective(name):
    for lay in (network(name).layout, network(name).fixed_layout):
        cover = np.zeros(lay.size, dtype=int)
        for s in lay.blocks().values():
            cover[s] += 1
        assert (cover == 1).all()
        rows = np.zeros(lay.size, dtype=int)
        for s in lay.row_blocks().values():
            rows[s] += 1
        assert (rows == 1).all()


def test_indexing_is_deterministic():
    a, b = build_network(case("t14")), build_network(case("t14"))
    assert a.hash == b.hash
    assert [c.id for c in a.controls] == [c.id for c in b.controls]
    assert a.layout.blocks() == b.layout.blocks()


def test_identity_device_equals_line():
    st = BranchStamp(1 / complex(0.01, 0.1), 0.02)
    vf, vt = 1.02 + 0.03j, 0.97 - 0.05j
    tap = branch_current(st, vf, vt, 1.0, 0.0)
    y, half = st.ys, 0.5j * st.bc
    assert tap[0] == pytest.approx((y + half) * vf - y * vt, abs=1e-14)
    assert tap[1] == pytest.approx((y + half) * vt - y * vf, abs=1e-14)


def test_equal_voltages_leave_only_charging():
    st = BranchStamp(1 / complex(0.01, 0.1), 0.04)
    v = 1.01 - 0.02j
    i_f, i_t = branch_current(st, v, v)
    assert i_f == pytest.approx(0.02j * v, abs=1e-14)
    assert i_t == pytest.approx(0.02j * v, abs=1e-14)


@pytest.mark.parametrize("tau", [0.0, -1.0])
def test_nonpositive_tap_rejected(tau):
    with pytest.raises(ValueError):
        branch_current(BranchStamp(1 - 10j), 1.0, 1.0, tau)


def test_from_side_self_term_scales_with_inverse_square():
    st = BranchStamp(1 / complex(0.01, 0.1), 0.0)
    base, _ = branch_current(st, 1.0, 0.0, 1.0)
    doubled, _ = branch_current(st, 1.0, 0.0, 2.0)
    assert doubled == pytest.approx(base / 4, rel=1e-14)


def _fd_tau(st, vf, vt, tau, phi, h=1e-6):
    plus = np.array(branch_current(st, vf, vt, tau + h, phi))
    minus = np.array(branch_current(st, vf, vt, tau - h, phi))
    return (plus - minus) / (2 * h)


def test_tap_derivative_at_1_03():
    ys, bc = 1 / complex(0.02, 0.12), 0.03
    vf, vt = 1.03 + 0.02j, 0.98 - 0.07j
    _, J, _ = branch_jet(np.array([ys]), np.array([bc]), np.array([vf]), np.array([vt]), np.array([1.03]), np.array([0.0]))
    fd = _fd_tau(BranchStamp(ys, bc), vf, vt, 1.03, 0.0)
    err = np.abs(fd - J[0, :, 4]) / np.maximum(1.0, np.abs(J[0, :, 4]))
    assert err.max() <= 1e-6


def _lift(I):
    return np.concatenate([I.real, I.imag], axis=-1)


@pytest.mark.parametrize("name", DEVICE_FIXTURES)
def test_stamp_derivatives_random_points(name):
    """First and second derivatives against central differences, 100 points per case."""
    net = network(name)
    rng = np.random.default_rng(7)
    E = net.n_branch
    h = 1e-6
    for _ in range(100):
        k = rng.integers(E)
        ys, bc = net.ys[k : k + 1], net.bc[k : k + 1]
        x = np.concatenate([rng.uniform(0.9, 1.1, 1), rng.uniform(-0.2, 0.2, 1), rng.uniform(0.9, 1.1, 1), rng.uniform(-0.2, 0.2, 1), rng.uniform(0.85, 1.15, 1), rng.uniform(-0.3, 0.3, 1)])

        def jet(z):
            return branch_jet(ys, bc, np.array([z[0] + 1j * z[1]]), np.array([z[2] + 1j * z[3]]), np.array([z[4]]), np.array([z[5]]))

        _, J, H = jet(x)
        for j in range(6):
            d = np.zeros(6)
            d[j] = h
            Ip, Jp, _ = jet(x + d)
            Im, Jm, _ = jet(x - d)
            fd = (Ip - Im) / (2 * h)
            scale = np.maximum(1.0, np.abs(J[0, :, j]))
            assert (np.abs(fd[0] - J[0, :, j]) / scale).max() <= 1e-6
            fd2 = (Jp - Jm) / (2 * h)
            scale2 = np.maximum(1.0, np.abs(H[0, :, :, j]))
            assert (np.abs(fd2[0] - H[0, :, :, j]) / scale2).max() <= 1e-6


@pytest.mark.parametrize("name", DEVICE_FIXTURES)
def test_device_transparency(name):
    c = case(name)
    net = network(name)
    trivial = net.trivial()
    if not all(ctl.trivial == {"tap_ratio": 1.0, "phase_shift_rad": 0.0, "shunt_susceptance_pu": 0.0}[ctl.kind] for ctl in net.controls):
        pytest.skip("a trivial value is clamped into the allowed range")
    fixed_taps = [x for x in c.transformers if (x.tap_set is None and x.tap != 1.0) or (x.shift_set is None and x.shift != 0.0)]
    if fixed_taps:
        pytest.skip("case has off-nominal fixed transformers")
    Y_dev = admittance(net, *net.device_values(trivial))

    plain = replace(
        c,
        branches=c.branches + tuple(BranchRecord(x.from_bus, x.to_bus, x.r, x.x, x.b, x.rate) for x in c.transformers),
        transformers=(),
        shunts=(),
    )
    bare = build_network(plain)
    Y_bare = admittance(bare, *bare.device_values(np.zeros(0)))
    assert np.abs(Y_dev - Y_bare).max() <= 1e-12


def test_point_views_and_length_check():
    lay = network("t4_tap").layout
    pt = PrimalDualPoint(lay)
    pt.vec[lay.vr] = 1.0
    assert (pt.v == 1.0).all()
    with pytest.raises(ValueError):
        PrimalDualPoint(lay, np.zeros(lay.size + 1))
