"""Shared fixtures and helpers for the test suite."""

from __future__ import annotations

from random import Random

import pytest

from lucasim.actors import (
    World,
    flow_register_health_dept,
    flow_register_user,
    flow_register_venue,
    flow_rotate_daily_master_key,
)
from lucasim.model import CertificateAuthority, GroundTruthLog, MitigationConfig, TracingPolicy
from lucasim.netsim import CarrierNetwork, NetworkConfig, Transport
from lucasim import crypto


def make_world(
    seed: str = "test",
    *,
    network: NetworkConfig | None = None,
    mitigations: MitigationConfig | None = None,
    policy: TracingPolicy | None = None,
    pki: bool = False,
) -> World:
    mit = mitigations or MitigationConfig(pki_enabled=pki)
    ca = CertificateAuthority(crypto.gen_keypair("ca", Random(f"{seed}:ca"))) if mit.pki_enabled else None
    return World(
        net=CarrierNetwork(network or NetworkConfig(), Random(f"{seed}:net")),
        transport=Transport(),
        truth=GroundTruthLog(),
        policy=policy or TracingPolicy(),
        mitigations=mit,
        rng_crypto=Random(f"{seed}:crypto"),
        rng_server=Random(f"{seed}:server"),
        rng_guest=Random(f"{seed}:guest"),
        ca=ca,
    )


def populate(
    world: World,
    *,
    hds: int = 3,
    venues: int = 2,
    guests: int = 4,
    scanners: int = 1,
    rotate_days: tuple[int, ...] = (0,),
) -> World:
    for _ in range(hds):
        flow_register_health_dept(world)
    for i in range(venues):
        flow_register_venue(
            world,
            {
                "name": f"venue-{i:03d}",
                "owner_contact": f"owner-{i:03d}@example.org",
                "lat": 52.50 + 0.01 * i,
                "lon": 13.35 + 0.01 * i,
                "venue_type": "bar",
                "scanners": scanners,
            },
        )
    for i in range(guests):
        guest = world.new_guest(
            {
                "name": f"Guest {i:04d} Surname{i:04d}",
                "address": f"{i} Example Street, Sampletown",
                "phone": f"+49-151-{i:07d}",
            }
        )
        flow_register_user(world, guest)
    for day in rotate_days:
        flow_rotate_daily_master_key(world, world.hds[0], day, day * 86400)
    return world


@pytest.fixture
def world() -> World:
    return populate(make_world())
