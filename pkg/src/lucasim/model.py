"""Shared domain types, server-side records, and the ground-truth event log.

The ground-truth log is the append-only oracle of everything that really
happened in a run (who checked in where, true group memberships, which user
is behind each trace id).  Adversary inferences and objective verdicts are
always re-verified against it.  It is a simulation artifact: protocol actors
never read it.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any, Iterable, Optional

from . import crypto
from .crypto import AsymKeyPair, EncryptedUserReference, PublicKey, Signature

DAY_SECONDS = 86400

# Ground-truth event kinds.
REGISTER_USER = "register_user"
REGISTER_VENUE = "register_venue"
CHECKIN = "checkin"
CHECKOUT = "checkout"
REPORT_POSITIVE = "report_positive"
TRACE_REQUEST = "trace_request"
GROUP_ARRIVAL = "group_arrival"

EVENT_KINDS = frozenset(
    {REGISTER_USER, REGISTER_VENUE, CHECKIN, CHECKOUT, REPORT_POSITIVE, TRACE_REQUEST, GROUP_ARRIVAL}
)

# Venue decryption consent is recorded as a trace_request event with this
# subkind so that objective O6 is decidable from the log alone.
SUBKIND_VENUE_CONSENT = "venue_decryption_consent"


class OutOfOrderEvent(Exception):
    """Event timestamps must never decrease."""


class UnknownUser(Exception):
    pass


@dataclass(frozen=True)
class GroundTruthEvent:
    seq: int
    t: int
    kind: str
    data: dict[str, Any]

    def to_json(self) -> str:
        return json.dumps(
            {"seq": self.seq, "t": self.t, "kind": self.kind, "data": self.data},
            sort_keys=True,
            separators=(",", ":"),
        )


@dataclass(frozen=True)
class Visit:
    user_id: str
    venue_id: str
    record_id: str
    checkin_t: int
    checkout_t: Optional[int]

    @property
    def day(self) -> int:
        return self.checkin_t // DAY_SECONDS


@dataclass(frozen=True)
class TracingPolicy:
    """Knobs the tracing pipeline and its oracle must share."""

    max_stay_s: int = 4 * 3600
    overlap_slack_s: int = 0
    include_index_case: bool = False
    max_checkins_per_day: int = 64
    correlation_window_s: int = 60


@dataclass(frozen=True)
class MitigationConfig:
    pki_enabled: bool = False
    qr_embeds_venue_key: bool = False


def visit_interval(v: Visit, policy: TracingPolicy) -> tuple[int, int]:
    """Closed-open presence interval, imputing a maximum stay for open visits."""
    end = v.checkout_t if v.checkout_t is not None else v.checkin_t + policy.max_stay_s
    return v.checkin_t, max(end, v.checkin_t + 1)


def intervals_overlap(a: tuple[int, int], b: tuple[int, int], slack: int = 0) -> bool:
    return a[0] < b[1] + slack and b[0] < a[1] + slack


class GroundTruthLog:
    """Append-only, totally ordered event log with oracle accessors."""

    def __init__(self) -> None:
        self.events: list[GroundTruthEvent] = []

    def record_event(self, kind: str, t: int, data: dict[str, Any]) -> GroundTruthEvent:
        if kind not in EVENT_KINDS:
            raise ValueError(f"unknown event kind: {kind}")
        if self.events and t < self.events[-1].t:
            raise OutOfOrderEvent(f"t={t} before t={self.events[-1].t}")
        ev = GroundTruthEvent(seq=len(self.events), t=t, kind=kind, data=data)
        self.events.append(ev)
        return ev

    def export_ndjson(self) -> str:
        return "".join(ev.to_json() + "\n" for ev in self.events)

    # -- oracle accessors -------------------------------------------------

    def registered_users(self) -> list[str]:
        return [e.data["user_id"] for e in self.events if e.kind == REGISTER_USER]

    def contact_of(self, user_id: str) -> dict[str, str]:
        for e in self.events:
            if e.kind == REGISTER_USER and e.data["user_id"] == user_id:
                return dict(e.data["contact"])
        raise UnknownUser(user_id)

    def true_visits(self, user_id: str) -> list[Visit]:
        """Chronological true visit history of one user."""
        if user_id not in self.registered_users():
            raise UnknownUser(user_id)
        checkouts = {
            e.data["record_id"]: e.t for e in self.events if e.kind == CHECKOUT
        }
        visits = [
            Visit(
                user_id=user_id,
                venue_id=e.data["venue_id"],
                record_id=e.data["record_id"],
                checkin_t=e.t,
                checkout_t=checkouts.get(e.data["record_id"]),
            )
            for e in self.events
            if e.kind == CHECKIN and e.data["user_id"] == user_id
        ]
        return sorted(visits, key=lambda v: (v.checkin_t, v.record_id))

    def all_visits(self) -> list[Visit]:
        checkouts = {
            e.data["record_id"]: e.t for e in self.events if e.kind == CHECKOUT
        }
        return [
            Visit(
                user_id=e.data["user_id"],
                venue_id=e.data["venue_id"],
                record_id=e.data["record_id"],
                checkin_t=e.t,
                checkout_t=checkouts.get(e.data["record_id"]),
            )
            for e in self.events
            if e.kind == CHECKIN
        ]

    def true_cotenants(
        self, user_id: str, days: Iterable[int], policy: TracingPolicy
    ) -> set[str]:
        """Users whose visits overlap the given user's visits on the given days.

        ``days`` selects which of the index user's visits count (by check-in
        day, mirroring the per-day tracing seeds); other users' visits are
        matched purely by interval overlap at the same venue.
        """
        day_set = set(days)
        index_visits = [v for v in self.true_visits(user_id) if v.day in day_set]
        others = [v for v in self.all_visits() if v.user_id != user_id]
        out: set[str] = set()
        for iv in index_visits:
            ival = visit_interval(iv, policy)
            for ov in others:
                if ov.venue_id != iv.venue_id:
                    continue
                if intervals_overlap(ival, visit_interval(ov, policy), policy.overlap_slack_s):
                    out.add(ov.user_id)
        return out

    def record_truth(self) -> dict[str, Visit]:
        """record_id -> true visit (the user behind each trace id included)."""
        return {v.record_id: v for v in self.all_visits()}

    def trace_id_owner(self) -> dict[str, str]:
        return {
            e.data["trace_id"]: e.data["user_id"] for e in self.events if e.kind == CHECKIN
        }

    def infected_users(self) -> set[str]:
        return {e.data["user_id"] for e in self.events if e.kind == REPORT_POSITIVE}

    def report_windows(self) -> dict[str, set[int]]:
        """user_id -> union of day windows the user consented to trace."""
        out: dict[str, set[int]] = {}
        for e in self.events:
            if e.kind == REPORT_POSITIVE:
                out.setdefault(e.data["user_id"], set()).update(e.data["days"])
        return out

    def consented_record_ids(self) -> set[str]:
        """Records whose venue decryption was covered by a consent event."""
        out: set[str] = set()
        for e in self.events:
            if e.kind == TRACE_REQUEST and e.data.get("subkind") == SUBKIND_VENUE_CONSENT:
                out.update(e.data["record_ids"])
        return out

    def true_group_pairs(self) -> set[frozenset[str]]:
        pairs: set[frozenset[str]] = set()
        for e in self.events:
            if e.kind == GROUP_ARRIVAL:
                rids = e.data["record_ids"]
                for i in range(len(rids)):
                    for j in range(i + 1, len(rids)):
                        pairs.add(frozenset((rids[i], rids[j])))
        return pairs

    def scripted_groups(self) -> list[list[str]]:
        return [
            sorted(e.data["record_ids"]) for e in self.events if e.kind == GROUP_ARRIVAL
        ]


# -- server-side records ---------------------------------------------------


@dataclass
class UserRecord:
    user_id: str
    encrypted_contact: bytes
    phone_validated: bool = True


@dataclass
class VenueRecord:
    venue_id: str
    name: str
    owner_contact: str
    lat: float
    lon: float
    venue_type: str
    public_key: PublicKey
    scanner_ids: list[str]


@dataclass
class CheckInRecord:
    record_id: str
    scanner_id: str
    trace_id: bytes
    double_enc_ref: EncryptedUserReference
    checkin_time: int
    checkout_time: Optional[int] = None

    def set_checkout(self, t: int) -> None:
        if self.checkout_time is not None:
            raise ValueError("checkout already recorded")
        if t <= self.checkin_time:
            raise ValueError("checkout must come after check-in")
        self.checkout_time = t


@dataclass
class HealthDeptRecord:
    hd_id: str
    enc_public: PublicKey
    sign_public: PublicKey
    enc_cert: Optional["Certificate"] = None
    sign_cert: Optional["Certificate"] = None
    # day -> daily master private key encrypted to this HD's public key
    encrypted_master_keys: dict[int, bytes] = field(default_factory=dict)


# -- certificates ------------------------------------------------------------


@dataclass(frozen=True)
class Certificate:
    subject_public: PublicKey
    subject_role: str
    signature: Signature


def _cert_message(subject_pk: PublicKey, role: str) -> bytes:
    return b"cert:" + role.encode("ascii") + b":" + subject_pk.data


class CertificateAuthority:
    """Trusted third party; the backend server never holds its private key."""

    def __init__(self, keypair: AsymKeyPair) -> None:
        if keypair.role != "ca":
            raise ValueError("CA keypair must have role 'ca'")
        self._keypair = keypair
        self.root_public = keypair.public

    def issue(self, subject_pk: PublicKey, role: str) -> Certificate:
        sig = crypto.sign(self._keypair.private, _cert_message(subject_pk, role))
        return Certificate(subject_public=subject_pk, subject_role=role, signature=sig)


def issue_certificate(ca: CertificateAuthority, subject_pk: PublicKey, role: str) -> Certificate:
    return ca.issue(subject_pk, role)


def verify_certificate(root_pk: PublicKey, cert: Certificate) -> bool:
    return crypto.verify(
        root_pk, _cert_message(cert.subject_public, cert.subject_role), cert.signature
    )
