import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gridmarket.errors import ConfigParseError, DisconnectedGraph, ValidationError
from gridmarket.network import LineParams, comm_incidence, config_from_dict, load_config, physical_incidence

from .conftest import random_doc, two_bus_doc


def test_two_bus_document_maps_fields():
    net = load_config(json.dumps(two_bus_doc(B=5.0)))
    assert (net.n_g, net.n_l, net.m) == (1, 1, 1)
    assert net.line_B[0] == 5.0


def test_zero_damping_rejected():
    doc = two_bus_doc()
    doc["buses"][0]["A"] = 0.0
    with pytest.raises(ValidationError, match="damping must be positive") as exc:
        config_from_dict(doc)
    assert exc.value.entity == "bus 1"


def test_negative_reactive_demand_rejected():
    doc = two_bus_doc(Qbar=-0.1)
    with pytest.raises(ValidationError, match="nonnegative") as exc:
        config_from_dict(doc)
    assert exc.value.entity == "bus 2"


@pytest.mark.parametrize("field,value", [("M", -1.0), ("T", 0.0), ("Xd", 0.2), ("Ef", -1.0)])
def test_invalid_generator_parameters_name_the_bus(field, value):
    doc = two_bus_doc()
    doc["buses"][0][field] = value
    with pytest.raises(ValidationError) as exc:
        config_from_dict(doc)
    assert exc.value.entity == "bus 1"


def test_malformed_document():
    with pytest.raises(ConfigParseError):
        load_config("{not json")


def test_nonpositive_susceptance_rejected():
    with pytest.raises(ValidationError, match="susceptance"):
        config_from_dict(two_bus_doc(B=-1.0))


def test_disconnected_physical_graph():
    doc = two_bus_doc()
    doc["lines"] = []
    with pytest.raises(DisconnectedGraph):
        config_from_dict(doc)


def test_disconnected_comm_graph():
    doc = two_bus_doc()
    doc["comm_edges"] = []
    with pytest.raises(DisconnectedGraph):
        config_from_dict(doc)


def test_reduced_incidence_two_bus():
    D = physical_incidence([LineParams(0, 1, 5.0)], 2, reference_bus=1)
    np.testing.assert_array_equal(D.T, [[1.0, -1.0]])


def test_reduced_incidence_four_bus(four_bus):
    D = four_bus.D_hat
    assert D.shape == (4, 3)
    np.testing.assert_array_equal(D.T @ np.ones(4), 0.0)
    assert np.linalg.matrix_rank(D) == 3


def test_reference_bus_choice_moves_the_minus_one_row():
    D = physical_incidence([LineParams(0, 1, 1.0), LineParams(1, 2, 1.0)], 3, reference_bus=0)
    np.testing.assert_array_equal(D, [[-1, -1], [1, 0], [0, 1]])


def test_comm_path_is_tree():
    g = comm_incidence([(0, 1), (1, 2)], 3)
    assert g.D.shape == (3, 2) and g.is_tree


def test_comm_triangle_is_not_tree():
    g = comm_incidence([(0, 1), (1, 2), (2, 0)], 3)
    assert g.D.shape == (3, 3) and not g.is_tree
    np.testing.assert_array_equal(g.D.sum(axis=0), 0.0)


def test_duplicate_comm_edge_rejected():
    with pytest.raises(ValidationError):
        comm_incidence([(0, 1), (1, 0)], 2)


def test_buses_sorted_by_id_and_reference_defaults_to_highest():
    doc = two_bus_doc()
    doc["buses"].reverse()
    net = config_from_dict(doc)
    assert list(net.bus_ids) == [1, 2]
    assert net.ref == 1


def test_explicit_reference_bus():
    doc = two_bus_doc()
    doc["reference_bus"] = 1
    net = config_from_dict(doc)
    np.testing.assert_array_equal(net.D_hat.T, [[-1.0, 1.0]])


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_incidence_properties_on_random_graphs(seed):
    net = config_from_dict(random_doc(np.random.default_rng(seed)))
    n = net.n
    np.testing.assert_array_equal(net.D_hat.T @ np.ones(n), 0.0)
    assert np.linalg.matrix_rank(net.D_hat) == n - 1
    np.testing.assert_array_equal(np.ones(n) @ net.D_c, 0.0)
    assert np.linalg.matrix_rank(net.D_c) == n - 1
    assert net.comm.is_tree == (net.m_c == n - 1)
