import csv

import mpmath
import numpy as np
import pytest
import scipy.sparse as sp

from rdoe import cases
from rdoe.exceptions import NonConvergence, PowerFlowError
from rdoe.network import load_bundled
from rdoe.powerflow import (
    InjectionVector,
    PowerFlowSystem,
    assemble_system,
    solve_power_flow,
    voltage_magnitudes,
    write_solution_csv,
)


def two_bus_root(s, z):
    """|V| at bus 2 for Vs = 1 and a load consuming s through series z (exact quadratic)."""
    mpmath.mp.dps = 40
    w = mpmath.mpc(s) * mpmath.conj(mpmath.mpc(z))
    y = w.imag
    x = (1 + mpmath.sqrt(1 - 4 * (y**2 + w.real))) / 2
    return mpmath.mpc(x, y)


def independent_residual(net, sol, inj):
    """Largest mismatch of KVL, KCL and power balance recomputed line by line from the network."""
    sb = net.bases.power_kva
    v = dict(zip(sol.labels, sol.v))
    pf = PowerFlowSystem(net)
    cur = {lab: sol.l[k] for k, lab in enumerate(pf.labels)}
    line_of = dict(zip(pf.labels, pf.line_ids))
    lines = {ln.id: ln for ln in net.lines}
    worst = 0.0
    load = {lab: 0j for lab in pf.labels}
    for c, p, q in zip(net.customers, inj.p, inj.q):
        for ph in c.phases:
            load[(c.bus, ph)] += (p + 1j * q) / sb / len(c.phases)
    children = {lab: [] for lab in pf.labels}
    for (bus, ph), lid in line_of.items():
        ln = lines[lid]
        up = ln.from_bus if ln.to_bus == bus else ln.to_bus
        if (up, ph) in children:
            children[(up, ph)].append((bus, ph))
    for (bus, ph), lid in line_of.items():
        ln = lines[lid]
        up = ln.from_bus if ln.to_bus == bus else ln.to_bus
        z = ln.z
        drop = sum(z["abc".index(ph), "abc".index(p2)] * cur[(bus, p2)]
                   for p2 in "abc" if (bus, p2) in cur and line_of[(bus, p2)] == lid)
        worst = max(worst, abs(v[(up, ph)] - drop - v[(bus, ph)]))
        j = cur[(bus, ph)] - sum(cur[ch] for ch in children[(bus, ph)])
        worst = max(worst, abs(v[(bus, ph)] * np.conj(j) - load[(bus, ph)]))
    return worst


def test_flat_no_load_solution():
    net = load_bundled("five_network")
    pf = assemble_system(net)
    sol = solve_power_flow(pf, InjectionVector.noload(net))
    assert sol.iterations == 1
    assert np.allclose(sol.l, 0)
    assert np.allclose(sol.v[3:], pf.v_slack[pf.phase])
    assert np.allclose(list(voltage_magnitudes(sol).values()), net.source_voltage)


def test_slack_rotation_invariance():
    net = cases.network_from(cases.single_phase_two_bus())
    sol = PowerFlowSystem(net).solve(InjectionVector.noload(net))
    u = voltage_magnitudes(sol)
    assert u[(net.source_bus, "b")] == pytest.approx(1.0, abs=1e-15)
    assert sol.v[1] == pytest.approx(complex(-0.5, -np.sqrt(3) / 2), abs=1e-15)


def test_dimensions_single_line_single_phase():
    pf = PowerFlowSystem(cases.network_from(cases.single_phase_two_bus()))
    assert pf.size == 4
    assert pf.jacobian(pf.flat_start()).shape == (4, 4)
    assert pf.residual(pf.flat_start(), np.zeros(1, dtype=complex)).shape == (4,)


def test_dimensions_five_network():
    net = load_bundled("five_network")
    pf = PowerFlowSystem(net)
    node_phases = sum(len(b.phases) for b in net.buses if b.id != net.source_bus)
    line_phases = sum(len(net.bus(ln.to_bus).phases) for ln in net.lines)
    assert pf.size == 2 * node_phases + 2 * line_phases
    J = pf.jacobian(pf.flat_start())
    assert J.shape == (pf.size, pf.size)


def test_two_bus_analytic():
    z = 0.1 + 0.1j
    s = 0.1 + 0.05j
    net = cases.network_from(cases.single_phase_two_bus(z_pu=z, load_kw=s.real * 10, load_kvar=s.imag * 10))
    pf = PowerFlowSystem(net)
    sol = pf.solve(InjectionVector.fixed(net))
    exact = two_bus_root(s, z)
    v = sol.v[3]
    assert abs(v - complex(exact)) < 1e-9
    assert voltage_magnitudes(sol)[("b2", "a")] == pytest.approx(float(abs(exact)), abs=1e-9)
    # the defining relation holds at the computed root
    assert abs(v * np.conj((1 - v) / z) - s) < 1e-9


def test_quadratic_convergence_two_bus():
    z, s = 0.1 + 0.1j, 0.3 + 0.1j
    net = cases.network_from(cases.single_phase_two_bus(z_pu=z, load_kw=s.real * 10, load_kvar=s.imag * 10))
    pf = PowerFlowSystem(net)
    sv = pf.loads(InjectionVector.fixed(net))
    x = pf.flat_start()
    res = []
    for _ in range(6):
        r = pf.residual(x, sv)
        res.append(np.max(np.abs(r)))
        if res[-1] < 1e-14:
            break
        x = x + np.linalg.solve(pf.jacobian(x).toarray(), -r)
    pairs = [(a, b) for a, b in zip(res, res[1:]) if b > 1e-13]
    assert pairs
    for a, b in pairs:
        assert b <= 5.0 * a**2


def test_warm_start_from_solution():
    net = load_bundled("desk_k8")
    pf = PowerFlowSystem(net)
    inj = InjectionVector.fixed(net)
    sol = pf.solve(inj)
    again = pf.solve(inj, start=sol)
    assert again.iterations <= 2


def test_warm_start_dimension_checked():
    net = load_bundled("desk_k4")
    pf = PowerFlowSystem(net)
    with pytest.raises(PowerFlowError):
        pf.solve(InjectionVector.fixed(net), start=np.zeros(3))


@pytest.mark.parametrize("name", ["five_network", "desk_k4", "desk_k8", "ausnet_like"])
def test_independent_residual_oracle(name):
    net = load_bundled(name)
    pf = PowerFlowSystem(net)
    inj = InjectionVector.fixed(net)
    sol = pf.solve(inj)
    assert sol.residual_norm <= 1e-10
    assert independent_residual(net, sol, inj) <= 1e-9


@pytest.mark.parametrize("name", ["five_network", "desk_k8", "ausnet_like"])
def test_power_conservation(name):
    net = load_bundled(name)
    pf = PowerFlowSystem(net)
    rng = np.random.default_rng(3)
    inj = InjectionVector.fixed(net)
    for c in net.doe_customers:
        inj = inj.with_values(c.id, p=rng.uniform(-3, 3), q=rng.uniform(-1, 1))
    sol = pf.solve(inj)
    s_src = sum(sol.v[k] * np.conj(sol.l[i]) for i, lab in enumerate(pf.labels)
                for k in [pf.all_labels.index(lab) - 3] if pf.parent[i] < 0 for k in [pf.phase[i]])
    loads = np.sum(inj.p + 1j * inj.q) / net.bases.power_kva
    i_line = sol.l
    losses = np.conj(i_line) @ (pf.Z @ i_line)
    assert abs(s_src - loads - losses) <= 1e-8


def test_random_tree_sparsity_matches_independent_walker():
    net = cases.network_from(cases.random_feeder("tree50", n_buses=50, n_conductors=3, n_single=30, n_doe=10,
                                                 seed=5))
    pf = PowerFlowSystem(net)
    n = pf.n
    expected = set()
    line_of = dict(zip(pf.labels, pf.line_ids))
    lines = {ln.id: ln for ln in net.lines}
    idx = pf.index
    for (bus, ph), k in idx.items():
        ln = lines[line_of[(bus, ph)]]
        up = ln.from_bus if ln.to_bus == bus else ln.to_bus
        for part in (0, 1):  # real / imaginary voltage-drop rows
            row = part * n + k
            expected.add((row, part * n + k))
            if (up, ph) in idx:
                expected.add((row, part * n + idx[(up, ph)]))
            for p2 in "abc":
                if (bus, p2) not in idx:
                    continue
                m = idx[(bus, p2)]
                z = ln.z["abc".index(ph), "abc".index(p2)]
                # real row couples R to Ir and X to Ii; imaginary row the other way round
                if z.real != 0:
                    expected.add((row, (2 + part) * n + m))
                if z.imag != 0:
                    expected.add((row, (3 - part) * n + m))
        kids = [idx[(b2, ph)] for (b2, p2), lid in line_of.items() if p2 == ph
                and (lines[lid].from_bus == bus or lines[lid].to_bus == bus) and b2 != bus]
        for part in (2, 3):  # power balance rows
            row = part * n + k
            expected |= {(row, k), (row, n + k)}
            for m in [k] + kids:
                expected |= {(row, 2 * n + m), (row, 3 * n + m)}
    rng = np.random.default_rng(0)
    x = pf.flat_start() + rng.normal(scale=0.1, size=pf.size)
    J = pf.jacobian(x).tocoo()
    got = {(r, c) for r, c, v in zip(J.row, J.col, J.data) if v != 0}
    assert got == expected


def fd_jacobian(f, x, h=1e-6):
    cols = []
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = h
        cols.append((f(x + e) - f(x - e)) / (2 * h))
    return np.column_stack(cols)


@pytest.mark.parametrize("name", ["five_network", "desk_k8"])
def test_jacobian_matches_finite_differences(name):
    net = load_bundled(name)
    pf = PowerFlowSystem(net)
    rng = np.random.default_rng(11)
    s = pf.loads(InjectionVector.fixed(net)) + rng.normal(scale=0.05, size=pf.n)
    for trial in range(100 if name == "five_network" else 10):
        x = pf.flat_start() + rng.normal(scale=0.2, size=pf.size)
        J = pf.jacobian(x).toarray()
        F = fd_jacobian(lambda y: pf.residual(y, s), x)
        scale = np.maximum(1.0, np.abs(J))
        assert np.max(np.abs(J - F) / scale) <= 1e-6


def test_batched_jacobian_values_agree():
    net = load_bundled("desk_k4")
    pf = PowerFlowSystem(net)
    rng = np.random.default_rng(2)
    X = pf.flat_start() + rng.normal(scale=0.1, size=(3, pf.size))
    vals = pf.jacobian_values(X)
    for m in range(3):
        J = sp.csr_matrix((vals[m], (pf.jac_rows, pf.jac_cols)), shape=(pf.size, pf.size))
        assert np.allclose(J.toarray(), pf.jacobian(X[m]).toarray())


def test_hessian_terms_match_finite_differences():
    net = load_bundled("desk_k4")
    pf = PowerFlowSystem(net)
    rng = np.random.default_rng(4)
    n = pf.n
    lp, lq = rng.normal(size=n), rng.normal(size=n)
    lam = np.concatenate([np.zeros(2 * n), lp, lq])
    s = np.zeros(n, dtype=complex)
    x = pf.flat_start() + rng.normal(scale=0.1, size=pf.size)
    r, c, v = pf.hessian_terms(lp, lq)
    H = sp.csr_matrix((v[0], (r, c)), shape=(pf.size, pf.size)).toarray()
    F = fd_jacobian(lambda y: pf.jacobian(y).T @ lam, x)
    assert np.allclose(H, F, atol=1e-7)


def test_batch_solver_matches_newton():
    net = load_bundled("ausnet_like")
    pf = PowerFlowSystem(net)
    rng = np.random.default_rng(8)
    base = pf.loads(InjectionVector.fixed(net))
    S = base + rng.normal(scale=0.05, size=(5, pf.n))
    V, ok = pf.solve_batch(S)
    assert ok.all()
    for k in range(5):
        assert np.max(np.abs(V[k] - pf.solve(S[k]).v[3:])) < 1e-9
    x = pf.state_from_voltages(V[0], S[0])
    assert np.max(np.abs(pf.residual(x, S[0]))) < 1e-9


def test_non_convergence_carries_residual():
    net = cases.network_from(cases.single_phase_two_bus(load_kw=40.0, load_kvar=10.0))
    pf = PowerFlowSystem(net)
    with pytest.raises(NonConvergence) as info:
        pf.solve(InjectionVector.fixed(net), max_iter=30)
    assert info.value.residual_norm > 1e-10


def test_solution_csv(tmp_path):
    net = load_bundled("five_network")
    sol = PowerFlowSystem(net).solve(InjectionVector.fixed(net))
    path = tmp_path / "pf.csv"
    write_solution_csv(sol, path)
    rows = list(csv.DictReader(open(path)))
    assert len(rows) == len(sol.labels)
    assert float(rows[0]["v_pu"]) == pytest.approx(net.source_voltage)
