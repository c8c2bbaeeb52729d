import itertools

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from rdoe import cases
from rdoe.exceptions import NonConvergence
from rdoe.network import load_bundled
from rdoe.oracle import brute_force_extremes
from rdoe.powerflow import InjectionVector
from rdoe.sensitivity import (
    ScenarioMatrix,
    SensitivityTensor,
    build_sign_matrix,
    compute_sensitivities,
    filter_scenarios,
    merge_rows,
    mergeable,
    scenario_vectors,
    write_beta_csv,
    write_matrix_csv,
)


def tensor(beta, delta_w=1.0):
    beta = np.atleast_2d(np.asarray(beta, dtype=float))
    labels = tuple((f"b{i}", "a") for i in range(beta.shape[0]))
    return SensitivityTensor(labels, tuple(f"c{k}" for k in range(beta.shape[1])), beta, None, delta_w)


# -- sensitivities ---------------------------------------------------------


def test_zero_impedance_gives_zero_beta():
    doc = cases.desk_k4()
    for cond in doc["conductors"].values():
        cond["r_ohm_per_km"] = np.zeros((3, 3)).tolist()
        cond["x_ohm_per_km"] = np.zeros((3, 3)).tolist()
    net = cases.network_from(doc)
    sens = compute_sensitivities(net)
    assert np.all(sens.beta == 0)
    assert build_sign_matrix(sens).H.shape == (0, 4)


def test_two_bus_beta_matches_analytic_derivative():
    z = 0.1 + 0.1j
    net = cases.network_from(cases.single_phase_two_bus(z_pu=z, doe=True))
    sb = net.bases.power_kva
    sens = compute_sensitivities(net, delta_w=0.1)
    mpmath.mp.dps = 40

    def mag(p_kw):
        w = mpmath.mpf(p_kw) / sb * mpmath.conj(mpmath.mpc(z))
        x = (1 + mpmath.sqrt(1 - 4 * (w.imag**2 + w.real))) / 2
        return abs(mpmath.mpc(x, w.imag))

    exact = float(mpmath.diff(mag, 0))
    assert sens.beta.shape == (1, 1)
    assert abs(sens.beta[0, 0] - exact) <= 1e-3
    # forward-difference truncation error is first order in the step
    assert abs(sens.beta[0, 0] - exact) <= 0.01 * abs(exact)


def test_beta_finite_and_only_doe_columns():
    net = load_bundled("desk_k8")
    sens = compute_sensitivities(net)
    assert sens.customers == tuple(c.id for c in net.doe_customers)
    assert np.all(np.isfinite(sens.beta))
    assert sens.delta_w == 20.0


def test_multi_phase_customer_perturbed_on_every_phase():
    net = cases.network_from(cases.network_r_like())
    two_phase = [c for c in net.doe_customers if len(c.phases) == 2]
    sens = compute_sensitivities(net, threads=1)
    assert sens.beta.shape[1] == len(net.doe_customers)
    for c in two_phase:
        k = sens.customers.index(c.id)
        rows = [sens.labels.index((c.bus, ph)) for ph in c.phases]
        assert np.all(sens.beta[rows, k] < 0)


def test_threads_do_not_change_result():
    net = load_bundled("desk_k8")
    a = compute_sensitivities(net, threads=1)
    b = compute_sensitivities(net, threads=4)
    assert np.array_equal(a.beta, b.beta)


def test_invalid_delta_w():
    with pytest.raises(ValueError):
        compute_sensitivities(load_bundled("five_network"), delta_w=0.0)


def test_perturbation_non_convergence_names_customer():
    net = cases.network_from(cases.single_phase_two_bus(doe=True))
    with pytest.raises(NonConvergence, match="'c1'"):
        compute_sensitivities(net, delta_w=60.0)


def test_dynamic_base_changes_sensitivities():
    net = load_bundled("five_network")
    base = InjectionVector.fixed(net)
    a = compute_sensitivities(net)
    b = compute_sensitivities(net, base=base)
    assert b.base is base
    assert not np.allclose(a.beta, b.beta)


# -- sign matrix -----------------------------------------------------------


def test_sign_matrix_upper_row_follows_beta_sign():
    H = build_sign_matrix(tensor([[0.5, 0.2]]), eps=0.01)
    assert H.rows == (("b0", "a", "upper"), ("b0", "a", "lower"))
    assert H.H.tolist() == [[1, 1], [-1, -1]]


def test_sign_matrix_negative_sensitivity_selects_export_for_upper_limit():
    # voltage falls with demand, so the export vertex drives it up
    H = build_sign_matrix(tensor([[-0.5, -0.2]]), eps=0.01)
    assert H.H.tolist() == [[-1, -1], [1, 1]]


def test_sign_matrix_zero_tensor_is_empty():
    H = build_sign_matrix(tensor(np.zeros((4, 3))), eps=1e-5)
    assert H.H.shape == (0, 3)


def test_sign_matrix_boundary_maps_to_zero():
    H = build_sign_matrix(tensor([[1e-5, -1e-5, 2e-5]]), eps=1e-5)
    assert H.H.tolist() == [[0, 0, 1], [0, 0, -1]]


def test_sign_matrix_threshold_uses_voltage_change():
    sens = tensor([[1e-6]], delta_w=20.0)
    assert build_sign_matrix(sens, eps=1e-5).H.tolist() == [[1], [-1]]
    assert build_sign_matrix(sens, eps=3e-5).H.shape == (0, 1)


def test_sign_matrix_negative_eps():
    with pytest.raises(ValueError):
        build_sign_matrix(tensor([[1.0]]), eps=-1.0)


# -- merging -----------------------------------------------------------------


def test_merge_example_rows():
    assert merge_rows(np.array([[1, 1], [1, 0]])).H.tolist() == [[1, 1]]


def test_merge_identical_rows():
    assert merge_rows(np.array([[1, -1, 0], [1, -1, 0]])).H.tolist() == [[1, -1, 0]]


def test_merge_rule_boundary():
    out = merge_rows(np.array([[1, 1], [1, -1]])).H.tolist()
    assert out == [[1, 1], [1, -1]]
    assert not mergeable(np.array([1, 1]), np.array([1, -1]))
    assert not mergeable(np.array([1, 0]), np.array([0, 1]))  # nothing in common


def test_merge_collapses_uniform_pattern_to_two_rows():
    H = build_sign_matrix(tensor(-np.abs(np.random.default_rng(0).normal(size=(9, 5))) - 0.1), eps=1e-5)
    assert merge_rows(H).H.tolist() == [[-1] * 5, [1] * 5]


sign_rows = arrays(np.int64, st.tuples(st.integers(0, 12), st.integers(1, 6)), elements=st.integers(-1, 1))


def covers(big, small):
    nz = small != 0
    return bool(np.all(big[nz] == small[nz]))


@settings(max_examples=300, deadline=None)
@given(sign_rows)
def test_merge_properties(H):
    out = merge_rows(H).H
    # fixed point
    assert np.array_equal(merge_rows(out).H, out)
    # no remaining mergeable pair
    for a, b in itertools.combinations(out, 2):
        assert not mergeable(a, b)
    # no duplicates, no zero rows
    assert len({r.tobytes() for r in out}) == len(out)
    assert not np.any(np.all(out == 0, axis=1)) if len(out) else True
    # every input pattern survives in some output row
    for row in H:
        if row.any():
            assert any(covers(r, row) for r in out)
    assert len(out) <= max(1, len(H))
    # split identity
    hbar = merge_rows(H)
    assert np.array_equal(hbar.plus + hbar.minus, hbar.H)


@settings(max_examples=100, deadline=None)
@given(sign_rows)
def test_merge_is_deterministic(H):
    assert np.array_equal(merge_rows(H).H, merge_rows(H.copy()).H)


# -- scenario vectors ----------------------------------------------------------


def test_scenario_vector_examples():
    hbar = ScenarioMatrix(("a", "b"), np.array([[-1, -1], [0, 0]]))
    v = scenario_vectors(hbar, [7.0, 7.0], [-7.0, -7.0])
    assert v[0].tolist() == [-7.0, -7.0]
    assert v[1].tolist() == [0.0, 0.0]
    hbar = ScenarioMatrix(("a", "b", "c"), np.array([[1, 0, -1]]))
    assert scenario_vectors(hbar, [1.0, 2.0, 3.0], [-1.0, -2.0, -3.0])[0].tolist() == [1.0, 0.0, -3.0]


def test_scenario_vector_dimension_mismatch():
    hbar = ScenarioMatrix(("a", "b"), np.array([[1, -1]]))
    with pytest.raises(ValueError):
        scenario_vectors(hbar, [1.0], [-1.0])


@pytest.mark.parametrize("name,count", [("five_network", 4), ("desk_k4", 6), ("desk_k8", 6), ("ausnet_like", 6)])
def test_scenario_counts(name, count):
    net = load_bundled(name)
    sens, H, hbar = filter_scenarios(net)
    I = len({b for b, _ in sens.labels})
    assert hbar.count == count
    assert hbar.count <= min(2 * 3 * I, H.H.shape[0])
    assert hbar.count <= 2 ** len(net.doe_customers)


@pytest.mark.parametrize("name", ["five_network", "desk_k4", "desk_k8"])
def test_filtered_vertices_attain_voltage_extremes(name):
    net = load_bundled(name)
    _, _, hbar = filter_scenarios(net)
    sb = net.bases.power_kva
    rng = np.random.default_rng(1)
    for _ in range(3):
        lo = np.array([c.p_box[0] * sb if c.flags != (0, 1) else 0.0 for c in net.doe_customers])
        hi = np.array([c.p_box[1] * sb if c.flags != (1, 0) else 0.0 for c in net.doe_customers])
        lo, hi = lo * rng.uniform(0.2, 0.6), hi * rng.uniform(0.2, 0.6)
        ex = brute_force_extremes(net, lo, hi)
        verts = scenario_vectors(hbar, hi, lo)
        from rdoe.oracle import _Evaluator

        u, ok = _Evaluator(net).magnitudes(np.array(verts))
        assert ok.all()
        assert np.all(u.max(axis=0) >= ex.u_max - 1e-6)
        assert np.all(u.min(axis=0) <= ex.u_min + 1e-6)


def test_csv_exports(tmp_path):
    net = load_bundled("five_network")
    sens, H, hbar = filter_scenarios(net)
    write_beta_csv(sens, tmp_path / "beta.csv")
    write_matrix_csv(hbar.customers, range(hbar.count), hbar.H, tmp_path / "hbar.csv")
    beta_lines = (tmp_path / "beta.csv").read_text().splitlines()
    assert beta_lines[0] == "bus,phase,cus_02,cus_05"
    assert len(beta_lines) == 1 + len(sens.labels)
    assert len((tmp_path / "hbar.csv").read_text().splitlines()) == 1 + hbar.count
