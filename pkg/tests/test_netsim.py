"""Carrier network model: identity assignment, NAT ports, observations."""

import math
from collections import Counter
from random import Random

import pytest
from scipy.stats import chi2

from lucasim.netsim import (
    MSG_CHECKOUT,
    CarrierNetwork,
    NetworkConfig,
    NotApplicable,
    StaticIdentity,
    Transport,
    next_port,
)


def test_ipv6_probability_one_gives_unique_addresses():
    net = CarrierNetwork(
        NetworkConfig(carriers=2, ipv6_probability=(1.0, 1.0)), Random(1)
    )
    identities = [net.assign_identity() for _ in range(500)]
    addresses = [i.address for i in identities]
    assert all(i.uses_ipv6 for i in identities)
    assert len(set(addresses)) == 500


def test_nat_pool_caps_devices_per_gateway():
    net = CarrierNetwork(
        NetworkConfig(carriers=1, ipv6_probability=(0.0,), nat_pool_min=64, nat_pool_max=64, adoption=1.0),
        Random(2),
    )
    identities = [net.assign_identity() for _ in range(1000)]
    per_gateway = Counter(i.address for i in identities)
    assert max(per_gateway.values()) <= 64


def _expected_occupancy_pmf(cfg: NetworkConfig) -> dict[int, float]:
    """Enumerate P(app devices per full gateway): uniform capacity, binomial
    adoption, zero folded into one (a gateway is only opened when needed)."""
    sizes = range(cfg.nat_pool_min, cfg.nat_pool_max + 1)
    p_size = 1.0 / len(sizes)
    pmf: dict[int, float] = {}
    for c in sizes:
        for k in range(c + 1):
            prob = math.comb(c, k) * cfg.adoption**k * (1 - cfg.adoption) ** (c - k)
            pmf[max(1, k)] = pmf.get(max(1, k), 0.0) + p_size * prob
    return pmf


def test_gateway_occupancy_matches_sampling_distribution():
    cfg = NetworkConfig(carriers=1, ipv6_probability=(0.0,))
    net = CarrierNetwork(cfg, Random(3))
    for _ in range(2000):
        net.assign_identity()
    occupancies = net.gateway_occupancies(0)
    pmf = _expected_occupancy_pmf(cfg)
    edges = [(1, 6), (7, 9), (10, 12), (13, 15), (16, 18), (19, 64)]
    observed = [sum(1 for o in occupancies if lo <= o <= hi) for lo, hi in edges]
    expected = [len(occupancies) * sum(p for k, p in pmf.items() if lo <= k <= hi) for lo, hi in edges]
    stat = sum((o - e) ** 2 / e for o, e in zip(observed, expected) if e > 0)
    p_value = chi2.sf(stat, df=len(edges) - 1)
    assert p_value > 0.01, f"chi2={stat:.2f} p={p_value:.4f} obs={observed} exp={expected}"


def test_ports_increment_by_one():
    net = CarrierNetwork(NetworkConfig(carriers=1, ipv6_probability=(0.0,)), Random(4))
    ident = net.assign_identity()
    p = next_port(ident)
    assert next_port(ident) == p + 1
    assert next_port(ident) == p + 2


def test_next_port_not_applicable_for_ipv6():
    net = CarrierNetwork(NetworkConfig(carriers=1, ipv6_probability=(1.0,)), Random(5))
    ident = net.assign_identity()
    with pytest.raises(NotApplicable):
        next_port(ident)


def test_reconnect_resets_cursor():
    net = CarrierNetwork(NetworkConfig(carriers=1, ipv6_probability=(0.0,)), Random(6))
    ident = net.assign_identity()
    p = next_port(ident)
    net.reconnect_event(ident, t=100)
    assert ident.stable_since == 100
    assert next_port(ident) != p + 1  # cursor re-seeded, not continued


def test_two_devices_same_gateway_no_port_collisions():
    net = CarrierNetwork(
        NetworkConfig(carriers=1, ipv6_probability=(0.0,), nat_pool_min=16, nat_pool_max=16, adoption=1.0),
        Random(7),
    )
    a = net.assign_identity()
    b = net.assign_identity()
    assert a.address == b.address
    ports_a = {next_port(a) for _ in range(100)}
    ports_b = {next_port(b) for _ in range(100)}
    assert not ports_a & ports_b


def test_reconnect_changes_address_with_expected_probability():
    cfg = NetworkConfig(carriers=1, ipv6_probability=(0.0,), nat_pool_min=4, nat_pool_max=4, adoption=1.0)
    net = CarrierNetwork(cfg, Random(8))
    identities = [net.assign_identity() for _ in range(40)]  # 10 gateways
    n_gateways = net.gateway_count(0)
    assert n_gateways == 10
    ident = identities[0]
    changes = 0
    trials = 2000
    for i in range(trials):
        before = ident.address
        net.reconnect_event(ident, t=i)
        if ident.address != before:
            changes += 1
    expected = 1.0 - 1.0 / n_gateways
    assert abs(changes / trials - expected) < 0.03


def test_ipv6_reconnect_gets_fresh_unique_address():
    net = CarrierNetwork(NetworkConfig(carriers=1, ipv6_probability=(1.0,)), Random(9))
    a = net.assign_identity()
    b = net.assign_identity()
    old = a.address
    net.reconnect_event(a, t=50)
    assert a.address != old
    assert a.address != b.address


def test_deliver_records_observation_fields():
    net = CarrierNetwork(NetworkConfig(carriers=1, ipv6_probability=(0.0,)), Random(10))
    transport = Transport()
    ident = net.assign_identity()
    obs = transport.to_server(
        ident, "guest#0", MSG_CHECKOUT, {"trace_id": "ab"}, t=123, trace_id=b"\xab" * 16
    )
    assert obs.message_kind == MSG_CHECKOUT
    assert obs.trace_id == "ab" * 16
    assert obs.src_address == ident.address
    assert obs.ip_version == 4
    assert obs.t == 123
    assert len(transport.observations) == 1
    assert len(transport.transcript) == 1


def test_ipv6_observation_carries_device_unique_address():
    net = CarrierNetwork(NetworkConfig(carriers=1, ipv6_probability=(1.0,)), Random(11))
    transport = Transport()
    a, b = net.assign_identity(), net.assign_identity()
    oa = transport.to_server(a, "guest#0", MSG_CHECKOUT, {}, t=1)
    ob = transport.to_server(b, "guest#1", MSG_CHECKOUT, {}, t=2)
    assert oa.ip_version == ob.ip_version == 6
    assert oa.src_address != ob.src_address


def test_static_identity_observation():
    transport = Transport()
    obs = transport.to_server(
        StaticIdentity("203.0.113.7", "scanner-frontend"), "scanner:v000:s0", "other", {}, t=5
    )
    assert obs.src_port == 0
    assert obs.device_type == "scanner-frontend"


def test_message_count_order_preserving():
    net = CarrierNetwork(NetworkConfig(carriers=1, ipv6_probability=(0.0,)), Random(12))
    transport = Transport()
    ident = net.assign_identity()
    for i in range(10):
        transport.to_server(ident, "guest#0", "other", {"i": i}, t=i)
    assert [o.seq for o in transport.observations] == list(range(10))
    assert [o.t for o in transport.observations] == list(range(10))


def test_port_monotonicity_over_full_scenario_logs():
    # Without reconnects, one device per gateway makes each address belong to
    # one device for the whole run, so the observation log itself exposes
    # every device's full port sequence.
    from lucasim.scenario import parse_config, run_scenario

    config = parse_config(
        {
            "name": "portmono",
            "seed": 9,
            "duration_days": 3,
            "population": {"guests": 15, "visits_per_day": 1.5},
            "venues": {"count": 4},
            "network": {"carriers": 1, "ipv6_probability": [0.0], "nat_pool": [1, 1], "adoption": 1.0},
            "health_depts": 2,
        }
    )
    result = run_scenario(config)
    by_address: dict[str, list[int]] = {}
    for obs in result.world.transport.observations:
        if obs.src_port > 0:
            by_address.setdefault(obs.src_address, []).append(obs.src_port)
    assert by_address
    for address, ports in by_address.items():
        assert ports == sorted(ports), f"ports not monotone behind {address}"
        assert len(set(ports)) == len(ports)


def test_observation_completeness_one_per_server_bound_message():
    from lucasim.scenario import load_bundled_config, run_scenario

    result = run_scenario(load_bundled_config("trace_leakage"))
    server_bound = [
        e for e in result.world.transport.transcript if e["receiver"] == "server"
    ]
    assert len(server_bound) == len(result.world.transport.observations)
