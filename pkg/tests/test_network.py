import json

import numpy as np
import pytest

from rdoe import cases
from rdoe.exceptions import NetworkError
from rdoe.network import (
    bundled_networks,
    dumps_document,
    load_bundled,
    loads_document,
    parse_network,
    to_document,
    validate,
    write_network,
)


def doc_text(doc):
    return json.dumps(doc, indent=1)


def test_five_network_attributes():
    net = load_bundled("five_network")
    assert len(net.buses) == 5
    assert len(net.conductors) == 1
    assert len(net.customers) == 5
    assert all(len(c.phases) == 1 for c in net.customers)
    assert [c.id for c in net.doe_customers] == ["cus_02", "cus_05"]
    assert validate(net).ok


@pytest.mark.parametrize("name", sorted(bundled_networks()))
def test_bundled_corpus_validates(name):
    rep = validate(load_bundled(name))
    assert rep.errors == []


def test_bundled_documents_match_generators():
    for name, make in cases.BUNDLED.items():
        on_disk = json.loads(bundled_networks()[name].read_text())
        assert on_disk == json.loads(json.dumps(make()))


def test_ausnet_like_attributes():
    net = load_bundled("ausnet_like")
    assert len(net.buses) == 32
    assert len(net.customers) == 87
    assert len(net.doe_customers) == 30
    assert len({ln.conductor for ln in net.lines if ln.conductor != "tx"}) == 5


def test_zero_customers_is_valid():
    doc = cases.five_network()
    doc["customers"] = []
    net = loads_document(doc_text(doc))
    assert net.customers == ()
    assert validate(net).ok


def test_round_trip_is_structurally_equal(tmp_path):
    for name in bundled_networks():
        net = load_bundled(name)
        path = tmp_path / f"{name}.json"
        write_network(net, path)
        again = parse_network(path)
        assert to_document(again) == to_document(net)
        assert dumps_document(again) == dumps_document(net)


def test_parsing_is_deterministic():
    text = bundled_networks()["desk_k8"].read_text()
    assert loads_document(text) == loads_document(text)


def test_unit_conversion_round_trips_values():
    doc = cases.desk_k4()
    back = to_document(loads_document(doc_text(doc)))
    for orig, new in zip(doc["customers"], back["customers"]):
        for key in ("p_kw", "q_kvar"):
            if key in orig:
                assert new[key] == pytest.approx(orig[key], rel=1e-12)
        for key in ("p_box_kw", "q_box_kvar"):
            if key in orig:
                assert np.allclose(new[key], orig[key], rtol=1e-12, atol=0)
    for code, cond in doc["conductors"].items():
        assert np.allclose(back["conductors"][code]["r_ohm_per_km"], cond["r_ohm_per_km"], rtol=1e-12, atol=1e-15)
        assert np.allclose(back["conductors"][code]["x_ohm_per_km"], cond["x_ohm_per_km"], rtol=1e-12, atol=1e-15)


def test_defaults_applied_to_doe_customers():
    doc = cases.five_network()
    for c in doc["customers"]:
        if c["kind"] == "doe":
            for key in ("flags", "p_box_kw", "q_box_kvar", "q_controllable"):
                c.pop(key)
    doc.pop("limits")
    net = loads_document(doc_text(doc))
    assert (net.v_min, net.v_max) == (0.94, 1.10)
    c = net.customer("cus_02")
    assert c.flags == (1, 1)
    assert np.allclose(np.array(c.p_box) * net.bases.power_kva, [-7, 7])
    assert np.allclose(np.array(c.q_box) * net.bases.power_kva, [-3, 3])


def test_loop_reports_non_radial():
    doc = cases.five_network()
    doc["lines"].append({"id": "l_loop", "from": "b5", "to": "b2", "conductor": "c1", "length_m": 50.0})
    rep = validate(loads_document(doc_text(doc), check=False))
    assert any("non-radial" in e for e in rep.errors)
    with pytest.raises(NetworkError, match="non-radial"):
        loads_document(doc_text(doc))


def test_customer_on_missing_phase_is_named():
    doc = cases.desk_k8()
    doc["customers"].append({"id": "bad_cust", "bus": "n6", "phases": "a", "kind": "non-doe", "p_kw": 1.0,
                             "q_kvar": 0.0})
    rep = validate(loads_document(doc_text(doc), check=False))
    assert any("bad_cust" in e for e in rep.errors)


def test_dangling_bus_reported_with_element_id():
    doc = cases.five_network()
    doc["lines"][2]["to"] = "b99"
    with pytest.raises(NetworkError) as info:
        loads_document(doc_text(doc))
    assert "b99" in str(info.value)


def test_bad_flag_pair_rejected():
    doc = cases.five_network()
    doc["customers"][1]["flags"] = [0, 0]
    with pytest.raises(NetworkError, match="cus_02"):
        loads_document(doc_text(doc))


def test_schema_error_names_field_and_line():
    doc = cases.five_network()
    doc["lines"][1]["length_m"] = "long"
    text = doc_text(doc)
    with pytest.raises(NetworkError) as info:
        loads_document(text)
    err = info.value
    assert "length_m" in str(err)
    assert err.element == "l2"
    expected_line = next(i for i, ln in enumerate(text.splitlines(), 1) if '"id": "l2"' in ln)
    assert err.line == expected_line


def test_missing_file_is_network_error(tmp_path):
    with pytest.raises(NetworkError, match="cannot read"):
        parse_network(tmp_path / "absent.json")


def test_asymmetric_impedance_rejected():
    doc = cases.five_network()
    doc["conductors"]["c1"]["r_ohm_per_km"][0][1] = 0.5
    rep = validate(loads_document(doc_text(doc), check=False))
    assert any("symmetric" in e for e in rep.errors)


def test_non_doe_with_box_rejected():
    doc = cases.five_network()
    doc["customers"][0]["p_box_kw"] = [-1.0, 1.0]
    with pytest.raises(NetworkError, match="cus_01") as info:
        loads_document(doc_text(doc), check=False)
    assert info.value.element == "cus_01"


def test_bad_limits_rejected():
    doc = cases.five_network()
    doc["limits"] = {"v_min": 1.02, "v_max": 1.10}
    rep = validate(loads_document(doc_text(doc), check=False))
    assert any("v_min" in e for e in rep.errors)
