"""Key distribution center: principal database plus the two issuing services.

The authentication service checks a certificate-backed signature on the
request and answers with a ticket-granting ticket whose session key travels
doubly protected: wrapped under the client's public key, inside a box sealed
under the client's password-derived key.  The ticket-granting service opens a
presented ticket, validates the sealed authenticator (freshness, identity,
uniqueness, request digest) and issues a service ticket.

One process owns the database; registrations rewrite the backing file
atomically.  Handlers are thread-safe.
"""

from __future__ import annotations

import hashlib
import os
import threading
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Optional

from . import codec
from .crypto import CryptoProvider, SealedBox, SealLabel, SymmetricKey
from .errors import (
    AddressMismatch,
    AuthenticatorIntegrityError,
    BadValidityWindow,
    CertificateMismatch,
    DbParseError,
    DuplicatePrincipal,
    IntegrityError,
    KerbPkError,
    NoCertificateOnFile,
    RequestDigestMismatch,
    SchemaMismatch,
    SignatureInvalid,
    TicketIntegrityError,
    UnknownPrincipal,
    UnknownService,
)
from .messages import (
    Authenticator,
    AsEncPart,
    AsReply,
    AsRequest,
    Certificate,
    ErrorReply,
    FLAG_INITIAL,
    Principal,
    ReplayCache,
    SealedTicket,
    TgsAuthenticator,
    TgsEncPart,
    TgsReply,
    TgsRequest,
    TicketBody,
    Validity,
    as_request_signable_of,
    tgs_request_digest_of,
    validate_authenticator,
    validate_times,
)

DEFAULT_TGS_NAME = "krbtgt"
DEFAULT_AS_PORT = 8801
DEFAULT_TGS_PORT = 8802


class RecordKind(IntEnum):
    USER = 1
    SERVICE = 2
    TGS_SERVICE = 3


@dataclass(frozen=True)
class PrincipalRecord:
    principal: Principal
    long_term_key: SymmetricKey
    certificate: Optional[Certificate]
    kind: int


codec.register(PrincipalRecord, codec.SchemaId.PRINCIPAL_RECORD, [
    ("principal", "struct", Principal),
    ("long_term_key", "struct", SymmetricKey),
    ("certificate", "opt", Certificate),
    ("kind", "u8"),
])


@dataclass(frozen=True)
class ServiceKeyFile:
    """What a service process needs on disk: its principal and long-term key."""
    principal: Principal
    key: SymmetricKey


codec.register(ServiceKeyFile, codec.SchemaId.SERVICE_KEY_FILE, [
    ("principal", "struct", Principal),
    ("key", "struct", SymmetricKey),
])


def save_service_key(record: "PrincipalRecord", path: str) -> None:
    blob = ServiceKeyFile(record.principal, record.long_term_key)
    with open(path, "w", encoding="ascii") as fh:
        fh.write(codec.encode(blob).hex() + "\n")


def load_service_key(path: str) -> ServiceKeyFile:
    try:
        with open(path, "r", encoding="ascii") as fh:
            line = fh.read().strip()
        return codec.decode(bytes.fromhex(line), codec.SchemaId.SERVICE_KEY_FILE)
    except OSError as exc:
        raise DbParseError(f"cannot read service key file {path}: {exc}") from None
    except (ValueError, KerbPkError) as exc:
        raise DbParseError(f"{path}: {exc}") from None


@dataclass
class KdcConfig:
    max_ticket_lifetime: int = 28800
    clock_skew: int = 300
    replay_window: int = 600  # 2 x clock_skew
    replay_capacity: int = 4096
    enforce_address: bool = False


class PrincipalDb:
    """All principals of one realm; exactly one ticket-granting service.

    Each principal holds exactly one long-term key, so the key count grows as
    users + services + 1 instead of users x services pairwise secrets.
    """

    def __init__(self, realm: str, tgs_record: PrincipalRecord):
        self.realm = realm
        self.tgs_name = tgs_record.principal.name
        self._records: dict[str, PrincipalRecord] = {tgs_record.principal.name: tgs_record}
        self._lock = threading.Lock()

    @classmethod
    def create(cls, realm: str, provider: CryptoProvider,
               tgs_name: str = DEFAULT_TGS_NAME) -> "PrincipalDb":
        record = PrincipalRecord(Principal(tgs_name, realm), provider.random_session_key(),
                                 None, int(RecordKind.TGS_SERVICE))
        return cls(realm, record)

    def _insert(self, record: PrincipalRecord) -> None:
        with self._lock:
            if record.principal.name in self._records:
                raise DuplicatePrincipal(f"{record.principal.name}@{self.realm} already registered")
            self._records[record.principal.name] = record

    def _next_serial(self) -> int:
        serials = [r.certificate.serial for r in self._records.values() if r.certificate]
        return max(serials, default=0) + 1

    def register_user(self, name: str, password: str, public_key: bytes,
                      provider: CryptoProvider) -> PrincipalRecord:
        principal = Principal(name, self.realm)
        cert = Certificate(principal, public_key, self._next_serial())
        record = PrincipalRecord(principal, provider.derive_key_from_password(password, name, self.realm),
                                 cert, int(RecordKind.USER))
        self._insert(record)
        return record

    def register_service(self, name: str, provider: CryptoProvider) -> PrincipalRecord:
        record = PrincipalRecord(Principal(name, self.realm), provider.random_session_key(),
                                 None, int(RecordKind.SERVICE))
        self._insert(record)
        return record

    def lookup(self, name: str) -> Optional[PrincipalRecord]:
        with self._lock:
            return self._records.get(name)

    def tgs_record(self) -> PrincipalRecord:
        return self._records[self.tgs_name]

    def records(self) -> list[PrincipalRecord]:
        with self._lock:
            return list(self._records.values())

    def key_count(self) -> int:
        with self._lock:
            return len(self._records)

    def count_kind(self, kind: RecordKind) -> int:
        with self._lock:
            return sum(1 for r in self._records.values() if r.kind == int(kind))

    def save(self, path: str) -> None:
        """One HEX(TLV(PrincipalRecord)) line per principal; atomic rewrite."""
        with self._lock:
            lines = [codec.encode(r).hex() for r in self._records.values()]
        tmp = f"{path}.tmp.{os.getpid()}"
        with open(tmp, "w", encoding="ascii") as fh:
            fh.write("\n".join(lines) + ("\n" if lines else ""))
        os.replace(tmp, path)

    @classmethod
    def load(cls, path: str) -> "PrincipalDb":
        records: list[PrincipalRecord] = []
        try:
            with open(path, "r", encoding="ascii") as fh:
                raw_lines = fh.read().splitlines()
        except OSError as exc:
            raise DbParseError(f"cannot read principal db {path}: {exc}") from None
        for lineno, line in enumerate(raw_lines, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(codec.decode(bytes.fromhex(line), codec.SchemaId.PRINCIPAL_RECORD))
            except (ValueError, KerbPkError) as exc:
                raise DbParseError(f"{path}:{lineno}: {exc}") from None
        tgs = [r for r in records if r.kind == int(RecordKind.TGS_SERVICE)]
        if len(tgs) != 1:
            raise DbParseError(f"{path}: expected exactly one ticket-granting record, found {len(tgs)}")
        db = cls(tgs[0].principal.realm, tgs[0])
        for record in records:
            if record is not tgs[0]:
                db._insert(record)
        return db


def handle_as_request(db: PrincipalDb, config: KdcConfig, req: AsRequest, now: int,
                      provider: CryptoProvider, client_address: str = "") -> AsReply:
    """Initial authentication: certificate check, signature check, TGT issue."""
    if req.client.realm != db.realm:
        raise UnknownPrincipal(f"realm {req.client.realm} not served here")
    record = db.lookup(req.client.name)
    if record is None:
        raise UnknownPrincipal(f"{req.client.name}@{req.client.realm}")
    if record.certificate is None:
        raise NoCertificateOnFile(f"{req.client.name} has no certificate on file")
    if req.certificate.public_key != record.certificate.public_key:
        raise CertificateMismatch(f"presented public key differs from registered one for {req.client.name}")
    if req.certificate.subject != req.client:
        raise CertificateMismatch("certificate subject does not name the requesting client")
    if not provider.verify(record.certificate.public_key, as_request_signable_of(req), req.signature):
        raise SignatureInvalid(f"request signature does not verify for {req.client.name}")
    if req.requested_validity.from_time >= req.requested_validity.till:
        raise BadValidityWindow(
            f"from {req.requested_validity.from_time} >= till {req.requested_validity.till}")
    tgs = db.lookup(req.tgs_id)
    if tgs is None or tgs.kind != int(RecordKind.TGS_SERVICE):
        raise UnknownPrincipal(f"no ticket-granting service named {req.tgs_id}")

    session_key = provider.random_session_key()
    granted = Validity(now, min(req.requested_validity.till, now + config.max_ticket_lifetime))
    body = TicketBody(FLAG_INITIAL, session_key, req.client.realm, req.client.name,
                      client_address, granted)
    ticket = SealedTicket(tgs.principal,
                          provider.seal(tgs.long_term_key, codec.encode(body), SealLabel.TICKET))
    enc = AsEncPart(provider.pk_encrypt(record.certificate.public_key, session_key.data),
                    granted, req.nonce1, tgs.principal.realm, tgs.principal.name)
    enc_part = provider.seal(record.long_term_key, codec.encode(enc), SealLabel.AS_ENC_PART)
    return AsReply(req.client, ticket, enc_part)


def handle_tgs_request(db: PrincipalDb, config: KdcConfig, req: TgsRequest, now: int,
                       replay_cache: ReplayCache, provider: CryptoProvider,
                       client_address: str = "") -> TgsReply:
    """Ticket exchange: open TGT, validate authenticator, issue service ticket."""
    tgs = db.tgs_record()
    try:
        body_bytes = provider.open(tgs.long_term_key, req.ticket.box, SealLabel.TICKET)
    except IntegrityError as exc:
        raise TicketIntegrityError(str(exc)) from None
    body: TicketBody = codec.decode(body_bytes, codec.SchemaId.TICKET_BODY)
    validate_times(body.validity, now, config.clock_skew)
    try:
        auth_bytes = provider.open(body.session_key, req.authenticator, SealLabel.AUTHENTICATOR)
    except IntegrityError as exc:
        raise AuthenticatorIntegrityError(str(exc)) from None
    try:
        sealed: TgsAuthenticator = codec.decode(auth_bytes, codec.SchemaId.TGS_AUTHENTICATOR)
    except SchemaMismatch as exc:
        raise AuthenticatorIntegrityError(str(exc)) from None
    if sealed.request_digest != tgs_request_digest_of(req):
        raise RequestDigestMismatch("request fields do not match the sealed digest")
    validate_authenticator(sealed.authenticator, Principal(body.client_id, body.client_realm),
                           now, config.clock_skew, replay_cache,
                           hashlib.sha256(req.authenticator.ciphertext).digest())
    if config.enforce_address and body.client_address and body.client_address != client_address:
        raise AddressMismatch(f"ticket bound to {body.client_address}, request from {client_address}")
    service = db.lookup(req.service_id)
    if service is None or service.kind != int(RecordKind.SERVICE):
        raise UnknownService(f"no service named {req.service_id}")

    session_key = provider.random_session_key()
    granted = Validity(now, min(req.requested_validity.till, now + config.max_ticket_lifetime))
    service_body = TicketBody(0, session_key, body.client_realm, body.client_id,
                              body.client_address, granted)
    ticket = SealedTicket(service.principal,
                          provider.seal(service.long_term_key, codec.encode(service_body),
                                        SealLabel.TICKET))
    enc = TgsEncPart(session_key, granted, req.nonce2, service.principal.realm,
                     service.principal.name)
    enc_part = provider.seal(body.session_key, codec.encode(enc), SealLabel.TGS_ENC_PART)
    return TgsReply(Principal(body.client_id, body.client_realm), ticket, enc_part)


ROLE_AS = "as"
ROLE_TGS = "tgs"


@dataclass
class KdcService:
    """Shared state for both endpoints, usable from any transport."""

    db: PrincipalDb
    config: KdcConfig
    provider: CryptoProvider
    replay_cache: ReplayCache = field(default=None)  # type: ignore[assignment]
    as_requests: int = 0
    tgs_requests: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def __post_init__(self):
        if self.replay_cache is None:
            self.replay_cache = ReplayCache(self.config.replay_window, self.config.replay_capacity)

    @property
    def request_count(self) -> int:
        with self._lock:
            return self.as_requests + self.tgs_requests

    def handle(self, role: str, payload: bytes, now: int, client_address: str = ""):
        """Decode one request for the given endpoint role, return the reply."""
        if role == ROLE_AS:
            with self._lock:
                self.as_requests += 1
            req = codec.decode(payload, codec.SchemaId.AS_REQUEST)
            return handle_as_request(self.db, self.config, req, now, self.provider, client_address)
        if role == ROLE_TGS:
            with self._lock:
                self.tgs_requests += 1
            req = codec.decode(payload, codec.SchemaId.TGS_REQUEST)
            return handle_tgs_request(self.db, self.config, req, now, self.replay_cache,
                                      self.provider, client_address)
        raise ValueError(f"unknown KDC endpoint role {role!r}")


class KdcFrameSession:
    """Per-connection request/reply adapter for one KDC endpoint.

    Stateless across frames: every received frame is one request, every
    request gets exactly one reply frame (an ErrorReply on failure).  The
    connection stays open; clients close when done.
    """

    def __init__(self, service: KdcService, role: str, client_address: str = "",
                 on_event=None):
        self.service = service
        self.role = role
        self.client_address = client_address
        self.on_event = on_event

    def feed(self, payload: bytes, now: int) -> tuple[list[bytes], bool]:
        try:
            reply = self.service.handle(self.role, payload, now, self.client_address)
        except KerbPkError as exc:
            if self.on_event:
                self.on_event(f"kdc-{self.role}", exc.name)
            return [codec.encode(ErrorReply(exc.name, str(exc)))], False
        return [codec.encode(reply)], False
