"""Parametric carrier network: the metadata the backend server sees per message.

Guest devices get either a device-unique IPv6 address or a shared IPv4
gateway behind carrier-grade NAT with a per-device, strictly increasing
source-port cursor.  Venue scanners and health-department frontends use
static, distinguishable addresses.  Delivery is same-tick and lossless:
the attacks under study need metadata, not timing faults.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from random import Random
from typing import Any, Optional

# Message kinds as observed by the backend server.
MSG_CHECKIN_POLL = "checkin_poll"
MSG_CHECKOUT = "checkout"
MSG_POSITIVE_UPLOAD = "positive_upload"
MSG_OTHER = "other"

DEVICE_TYPES = tuple(f"handset-{chr(ord('a') + i)}" for i in range(12))


class NotApplicable(Exception):
    """Port cursors only exist for IPv4 NAT identities."""


class PortSpaceExhausted(Exception):
    pass


@dataclass(frozen=True)
class NetworkConfig:
    carriers: int = 3
    # Probability that a device on carrier i gets a unique IPv6 address;
    # the default mirrors two IPv6-assigning carriers plus one IPv4-only one.
    ipv6_probability: tuple[float, ...] = (1.0, 1.0, 0.0)
    nat_pool_min: int = 16
    nat_pool_max: int = 64
    # Fraction of devices behind a gateway that actually run the app; shapes
    # how many simulated devices share one external address.
    adoption: float = 0.3
    port_min: int = 1024
    port_spread_max: int = 60000
    device_types: tuple[str, ...] = DEVICE_TYPES

    def validate(self) -> None:
        if self.carriers < 1:
            raise ValueError("carriers must be >= 1")
        if len(self.ipv6_probability) != self.carriers:
            raise ValueError("ipv6_probability needs one entry per carrier")
        if not 0 < self.nat_pool_min <= self.nat_pool_max:
            raise ValueError("invalid NAT pool bounds")
        if not 0.0 < self.adoption <= 1.0:
            raise ValueError("adoption must be in (0, 1]")


@dataclass
class NetworkIdentity:
    carrier: int
    uses_ipv6: bool
    address: str
    device_type: str
    stable_since: int
    serial: int
    gateway_index: Optional[int] = None
    port_cursor: Optional[int] = None


@dataclass(frozen=True)
class StaticIdentity:
    """Fixed infrastructure endpoint (scanner, venue or HD frontend)."""

    address: str
    device_type: str


@dataclass
class _Gateway:
    address: str
    capacity: int
    app_slots: int
    occupancy: int = 0


class CarrierNetwork:
    """Samples and mutates guest network identities."""

    def __init__(self, config: NetworkConfig, rng: Random) -> None:
        config.validate()
        self.config = config
        self.rng = rng
        self._gateways: list[list[_Gateway]] = [[] for _ in range(config.carriers)]
        self._open_gateway: list[Optional[int]] = [None] * config.carriers
        self._serial = 0
        self._used_ipv6: set[str] = set()

    def _new_serial(self) -> int:
        self._serial += 1
        return self._serial

    def _ipv6_address(self, carrier: int, serial: int) -> str:
        addr = f"2001:db8:{carrier:x}::{serial:x}"
        assert addr not in self._used_ipv6
        self._used_ipv6.add(addr)
        return addr

    def _new_gateway(self, carrier: int) -> int:
        cfg = self.config
        capacity = self.rng.randint(cfg.nat_pool_min, cfg.nat_pool_max)
        slots = sum(1 for _ in range(capacity) if self.rng.random() < cfg.adoption)
        idx = len(self._gateways[carrier])
        address = f"{100 + carrier}.64.{idx >> 8}.{idx & 0xFF}"
        self._gateways[carrier].append(_Gateway(address, capacity, max(1, slots)))
        return idx

    def _assign_gateway(self, carrier: int) -> int:
        open_idx = self._open_gateway[carrier]
        if open_idx is None or (
            self._gateways[carrier][open_idx].occupancy
            >= self._gateways[carrier][open_idx].app_slots
        ):
            open_idx = self._new_gateway(carrier)
            self._open_gateway[carrier] = open_idx
        self._gateways[carrier][open_idx].occupancy += 1
        return open_idx

    def _seed_port(self) -> int:
        return self.rng.randint(self.config.port_min, self.config.port_spread_max)

    def assign_identity(self, t: int = 0) -> NetworkIdentity:
        cfg = self.config
        carrier = self.rng.randrange(cfg.carriers)
        device_type = self.rng.choice(cfg.device_types)
        uses_ipv6 = self.rng.random() < cfg.ipv6_probability[carrier]
        serial = self._new_serial()
        if uses_ipv6:
            return NetworkIdentity(
                carrier=carrier,
                uses_ipv6=True,
                address=self._ipv6_address(carrier, serial),
                device_type=device_type,
                stable_since=t,
                serial=serial,
            )
        gw = self._assign_gateway(carrier)
        return NetworkIdentity(
            carrier=carrier,
            uses_ipv6=False,
            address=self._gateways[carrier][gw].address,
            device_type=device_type,
            stable_since=t,
            serial=serial,
            gateway_index=gw,
            port_cursor=self._seed_port(),
        )

    def reconnect_event(self, identity: NetworkIdentity, t: int) -> NetworkIdentity:
        """Device dropped off the network: fresh address, re-seeded port cursor."""
        identity.stable_since = t
        identity.serial = self._new_serial()
        if identity.uses_ipv6:
            identity.address = self._ipv6_address(identity.carrier, identity.serial)
            return identity
        gateways = self._gateways[identity.carrier]
        if not gateways:
            identity.gateway_index = self._assign_gateway(identity.carrier)
        else:
            identity.gateway_index = self.rng.randrange(len(gateways))
        identity.address = gateways[identity.gateway_index].address
        identity.port_cursor = self._seed_port()
        return identity

    def gateway_count(self, carrier: int) -> int:
        return len(self._gateways[carrier])

    def gateway_occupancies(self, carrier: int, exclude_open: bool = True) -> list[int]:
        gws = self._gateways[carrier]
        occ = [g.occupancy for g in gws]
        if exclude_open and self._open_gateway[carrier] is not None:
            open_idx = self._open_gateway[carrier]
            if gws[open_idx].occupancy < gws[open_idx].app_slots:
                occ = occ[:open_idx] + occ[open_idx + 1 :]
        return occ


def next_port(identity: NetworkIdentity) -> int:
    if identity.uses_ipv6:
        raise NotApplicable("IPv6 identities have no NAT port cursor")
    port = identity.port_cursor
    if port is None:
        raise NotApplicable("identity has no port cursor")
    if port > 65535:
        raise PortSpaceExhausted(f"cursor {port} beyond port space")
    identity.port_cursor = port + 1
    return port


@dataclass(frozen=True)
class NetworkObservation:
    seq: int
    t: int
    src_address: str
    src_port: int
    ip_version: int
    device_type: str
    message_kind: str
    trace_id: Optional[str]

    def to_json(self) -> str:
        return json.dumps(
            {
                "seq": self.seq,
                "t": self.t,
                "src_address": self.src_address,
                "src_port": self.src_port,
                "ip_version": self.ip_version,
                "device_type": self.device_type,
                "message_kind": self.message_kind,
                "trace_id": self.trace_id,
            },
            sort_keys=True,
            separators=(",", ":"),
        )


class Transport:
    """Logs every protocol message: observations for server-bound traffic,
    a full transcript for everything."""

    def __init__(self) -> None:
        self.observations: list[NetworkObservation] = []
        self.transcript: list[dict[str, Any]] = []

    def _log(self, t: int, sender: str, receiver: str, kind: str, payload: dict[str, Any]) -> None:
        self.transcript.append(
            {
                "seq": len(self.transcript),
                "t": t,
                "sender": sender,
                "receiver": receiver,
                "kind": kind,
                "payload": payload,
            }
        )

    def to_server(
        self,
        identity: NetworkIdentity | StaticIdentity,
        sender: str,
        kind: str,
        payload: dict[str, Any],
        t: int,
        trace_id: Optional[bytes] = None,
    ) -> NetworkObservation:
        """Deliver a message to the backend server, recording what it observes."""
        if isinstance(identity, StaticIdentity):
            src_address, src_port, ip_version = identity.address, 0, 4
            device_type = identity.device_type
        else:
            src_address = identity.address
            ip_version = 6 if identity.uses_ipv6 else 4
            src_port = 0 if identity.uses_ipv6 else next_port(identity)
            device_type = identity.device_type
        obs = NetworkObservation(
            seq=len(self.observations),
            t=t,
            src_address=src_address,
            src_port=src_port,
            ip_version=ip_version,
            device_type=device_type,
            message_kind=kind,
            trace_id=trace_id.hex() if trace_id is not None else None,
        )
        self.observations.append(obs)
        self._log(t, sender, "server", kind, payload)
        return obs

    def from_server(self, receiver: str, kind: str, payload: dict[str, Any], t: int) -> None:
        self._log(t, "server", receiver, kind, payload)

    def local(self, sender: str, receiver: str, kind: str, payload: dict[str, Any], t: int) -> None:
        """Proximity channel (QR display/scan); never crosses the network."""
        self._log(t, sender, receiver, kind, payload)

    def export_observations_ndjson(self) -> str:
        return "".join(o.to_json() + "\n" for o in self.observations)

    def export_transcript_ndjson(self) -> str:
        return "".join(
            json.dumps(entry, sort_keys=True, separators=(",", ":")) + "\n"
            for entry in self.transcript
        )
