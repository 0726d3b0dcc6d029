"""Caching application gateway demo plus the generic app-server sessions.

The gateway fronts one or more plain backends.  Resources are matched against
an ordered prefix policy: ``protect`` entries demand an established security
context (plain requests get a 401), ``bypass`` entries are served in the
clear.  GET responses with status 200 are cached in a bounded LRU keyed by
resource, and every response says whether it came from a backend or the
cache, so hit counting is observable end to end.

Sessions here all speak the frame protocol from transport: one request
payload in, a list of reply payloads out.  Protocol failures answer with an
ErrorReply and close; a frame whose schema the session does not recognize
closes the connection silently.
"""

from __future__ import annotations

import threading
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Optional

from . import codec
from .crypto import CryptoProvider, SymmetricKey
from .errors import (
    BackendUnreachable,
    ConnectionClosed,
    FetchError,
    KerbPkError,
    PolicyParseError,
    StateError,
    Timeout,
)
from .gss import (
    ContextAcceptor,
    ContextInitiator,
    CredentialUsage,
    MechanismName,
    NameType,
    SecurityContext,
    acquire_credential,
)
from .messages import ErrorReply, Principal, ReplayCache, decode_reply

SERVED_BACKEND = 1
SERVED_CACHE = 2

PROTECT = "protect"
BYPASS = "bypass"

DEFAULT_CACHE_CAPACITY = 16


@dataclass(frozen=True)
class AppRequest:
    method: str
    resource: str
    body: bytes


@dataclass(frozen=True)
class AppResponse:
    status: int
    body: bytes
    served_from: int


codec.register(AppRequest, codec.SchemaId.APP_REQUEST, [
    ("method", "str"),
    ("resource", "str"),
    ("body", "bytes"),
])
codec.register(AppResponse, codec.SchemaId.APP_RESPONSE, [
    ("status", "u16"),
    ("body", "bytes"),
    ("served_from", "u8"),
])


def echo_handler(request: AppRequest) -> AppResponse:
    """Reference app behavior: answer 200 with the request body."""
    return AppResponse(200, request.body, SERVED_BACKEND)


class GatewayPolicy:
    """Ordered prefix rules; first match wins, unmatched resources are
    protected."""

    def __init__(self, rules: Optional[list[tuple[str, str]]] = None):
        self.rules: list[tuple[str, str]] = list(rules or [])

    @classmethod
    def parse(cls, text: str) -> "GatewayPolicy":
        rules = []
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 2 or parts[0] not in (PROTECT, BYPASS):
                raise PolicyParseError(f"line {lineno}: expected 'protect <prefix>' "
                                       f"or 'bypass <prefix>', got {raw.strip()!r}")
            if not parts[1].startswith("/"):
                raise PolicyParseError(f"line {lineno}: resource prefix must start with '/'")
            rules.append((parts[0], parts[1]))
        return cls(rules)

    def decision(self, resource: str) -> str:
        for kind, prefix in self.rules:
            if resource.startswith(prefix):
                return kind
        return PROTECT


class ResponseCache:
    """LRU over (method, resource); only successful GETs are stored."""

    def __init__(self, capacity: int = DEFAULT_CACHE_CAPACITY):
        if capacity < 1:
            raise ValueError("cache capacity must be positive")
        self.capacity = capacity
        self._entries: OrderedDict[tuple[str, str], AppResponse] = OrderedDict()
        self._lock = threading.Lock()

    def get(self, method: str, resource: str) -> Optional[AppResponse]:
        with self._lock:
            entry = self._entries.get((method, resource))
            if entry is not None:
                self._entries.move_to_end((method, resource))
            return entry

    def put(self, method: str, resource: str, response: AppResponse) -> None:
        if method != "GET" or response.status != 200:
            return
        with self._lock:
            self._entries[(method, resource)] = response
            self._entries.move_to_end((method, resource))
            while len(self._entries) > self.capacity:
                self._entries.popitem(last=False)

    def __len__(self) -> int:
        return len(self._entries)


@dataclass
class GatewayCore:
    """Request routing shared by the plain and the protected entry points."""

    policy: GatewayPolicy
    cache: Optional[ResponseCache]  # None disables caching entirely
    backends: list[tuple[str, Callable[[], object]]]
    backend_hits: int = 0
    cache_hits: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def _connect(self, resource: str):
        for prefix, connector in self.backends:
            if resource.startswith(prefix):
                return connector()
        raise BackendUnreachable(f"no backend serves {resource!r}")

    def handle(self, request: AppRequest) -> AppResponse:
        cached = (self.cache.get(request.method, request.resource)
                  if self.cache is not None else None)
        if cached is not None:
            with self._lock:
                self.cache_hits += 1
            return AppResponse(cached.status, cached.body, SERVED_CACHE)
        try:
            conn = self._connect(request.resource)
        except (BackendUnreachable, ConnectionClosed, OSError) as exc:
            return AppResponse(502, f"backend unreachable: {exc}".encode(), SERVED_BACKEND)
        try:
            conn.send(codec.encode(request))
            payload = conn.recv()
            response: AppResponse = codec.decode(payload, codec.SchemaId.APP_RESPONSE)
        except (KerbPkError, OSError) as exc:
            return AppResponse(502, f"backend failed: {exc}".encode(), SERVED_BACKEND)
        finally:
            conn.close()
        with self._lock:
            self.backend_hits += 1
        if self.cache is not None:
            self.cache.put(request.method, request.resource, response)
        return response


class BackendSession:
    """Plain app session: decode a request, run the handler, answer."""

    def __init__(self, handler: Callable[[AppRequest], AppResponse] = echo_handler):
        self.handler = handler

    def feed(self, payload: bytes, now: int) -> tuple[list[bytes], bool]:
        if codec.schema_id_of(payload) != codec.SchemaId.APP_REQUEST:
            return [], True
        try:
            request = codec.decode(payload, codec.SchemaId.APP_REQUEST)
            response = self.handler(request)
        except KerbPkError as exc:
            return [codec.encode(ErrorReply(exc.name, str(exc)))], True
        return [codec.encode(response)], False


class ProtectedAppSession:
    """Ticket-protected app endpoint: handshake first, wrapped traffic after.

    Each connection gets its own acceptor state but shares the service-wide
    replay cache, so a replayed first leg is caught across connections.
    """

    def __init__(self, service: Principal, key: SymmetricKey, provider: CryptoProvider,
                 replay_cache: ReplayCache,
                 handler: Callable[[AppRequest], AppResponse] = echo_handler,
                 skew: int = 300,
                 on_event: Optional[Callable[[str, str], None]] = None):
        self.service = service
        self.key = key
        self.provider = provider
        self.replay_cache = replay_cache
        self.handler = handler
        self.skew = skew
        self.on_event = on_event
        self.context: Optional[SecurityContext] = None

    def _error(self, exc: KerbPkError) -> tuple[list[bytes], bool]:
        if self.on_event is not None:
            self.on_event(self.service.name, exc.name)
        return [codec.encode(ErrorReply(exc.name, str(exc)))], True

    def feed(self, payload: bytes, now: int) -> tuple[list[bytes], bool]:
        schema = codec.schema_id_of(payload)
        if schema == codec.SchemaId.CONTEXT_TOKEN:
            cred = acquire_credential(
                MechanismName(self.service, NameType.PRINCIPAL_NAME, "kerbpk-ticket"),
                CredentialUsage.ACCEPT, self.key)
            acceptor = ContextAcceptor(cred, self.provider,
                                       replay_cache=self.replay_cache, skew=self.skew)
            try:
                token = codec.decode(payload, codec.SchemaId.CONTEXT_TOKEN)
                reply, _ = acceptor.step(token, now)
            except KerbPkError as exc:
                return self._error(exc)
            self.context = acceptor.context
            return [codec.encode(reply)], False
        if schema == codec.SchemaId.WRAP_TOKEN:
            if self.context is None or not self.context.established:
                return self._error(StateError("wrap token before any handshake"))
            try:
                token = codec.decode(payload, codec.SchemaId.WRAP_TOKEN)
                plain = self.context.unwrap(token)
                request = codec.decode(plain, codec.SchemaId.APP_REQUEST)
                response = self.handler(request)
                wrapped = self.context.wrap(codec.encode(response))
            except KerbPkError as exc:
                return self._error(exc)
            return [codec.encode(wrapped)], False
        return [], True


class GatewaySession:
    """Externally facing gateway endpoint.

    Plain frames only reach bypass resources; anything the policy protects
    answers 401 unless it arrives through the wrapped tunnel, which is
    handled by delegating to a ProtectedAppSession wired to the same core.
    """

    def __init__(self, core: GatewayCore, service: Principal, key: SymmetricKey,
                 provider: CryptoProvider, replay_cache: ReplayCache, skew: int = 300,
                 on_event: Optional[Callable[[str, str], None]] = None):
        self.core = core
        self._protected = ProtectedAppSession(service, key, provider, replay_cache,
                                              handler=core.handle, skew=skew,
                                              on_event=on_event)

    def feed(self, payload: bytes, now: int) -> tuple[list[bytes], bool]:
        if codec.schema_id_of(payload) == codec.SchemaId.APP_REQUEST:
            try:
                request = codec.decode(payload, codec.SchemaId.APP_REQUEST)
            except KerbPkError as exc:
                return [codec.encode(ErrorReply(exc.name, str(exc)))], True
            if self.core.policy.decision(request.resource) == PROTECT:
                return [codec.encode(AppResponse(
                    401, b"resource requires an authenticated context",
                    SERVED_BACKEND))], False
            return [codec.encode(self.core.handle(request))], False
        return self._protected.feed(payload, now)


class SecureChannel:
    """Client-side established tunnel: one connection plus its context."""

    def __init__(self, conn, context: SecurityContext):
        self.conn = conn
        self.context = context

    def call(self, request: AppRequest, timeout: int = 30) -> AppResponse:
        wrapped = self.context.wrap(codec.encode(request))
        self.conn.send(codec.encode(wrapped))
        reply = decode_reply(self.conn.recv(timeout), codec.SchemaId.WRAP_TOKEN)
        plain = self.context.unwrap(reply)
        return codec.decode(plain, codec.SchemaId.APP_RESPONSE)

    def close(self) -> None:
        self.conn.close()


def open_channel(initiator: ContextInitiator, conn, now_fn: Callable[[], int],
                 timeout: int = 30) -> SecureChannel:
    """Run the two handshake legs over an open connection."""
    token, _ = initiator.step(None, now_fn())
    conn.send(codec.encode(token))
    reply = decode_reply(conn.recv(timeout), codec.SchemaId.CONTEXT_TOKEN)
    initiator.step(reply, now_fn())
    return SecureChannel(conn, initiator.context)


class GatewayClient:
    """Fetches resources through the gateway, establishing contexts on demand.

    ``connect`` opens a fresh connection to the gateway's external port;
    ``make_initiator`` builds a ContextInitiator for the gateway's service
    principal (its ticket source decides whether a TGS round trip happens).
    Failures carry the step that broke: AS, TGS, handshake, or channel.
    """

    def __init__(self, connect: Callable[[], object],
                 make_initiator: Callable[[int], ContextInitiator],
                 now_fn: Callable[[], int], timeout: int = 30):
        self.connect = connect
        self.make_initiator = make_initiator
        self.now_fn = now_fn
        self.timeout = timeout
        self._channel: Optional[SecureChannel] = None

    def _open(self) -> SecureChannel:
        initiator = self.make_initiator(self.now_fn())
        conn = self.connect()
        try:
            return open_channel(initiator, conn, self.now_fn, self.timeout)
        except KerbPkError:
            conn.close()
            raise

    @staticmethod
    def _as_fetch_error(step: str, exc: KerbPkError) -> FetchError:
        # ticket sources raise FetchError themselves to pin AS/TGS failures
        return exc if isinstance(exc, FetchError) else FetchError(step, exc)

    def close(self) -> None:
        if self._channel is not None:
            self._channel.close()
            self._channel = None

    def fetch_plain(self, resource: str, method: str = "GET",
                    body: bytes = b"") -> AppResponse:
        conn = self.connect()
        try:
            conn.send(codec.encode(AppRequest(method, resource, body)))
            return decode_reply(conn.recv(self.timeout), codec.SchemaId.APP_RESPONSE)
        finally:
            conn.close()

    def fetch(self, resource: str, method: str = "GET", body: bytes = b"") -> AppResponse:
        request = AppRequest(method, resource, body)
        fresh = self._channel is None
        if fresh:
            try:
                self._channel = self._open()
            except KerbPkError as exc:
                raise self._as_fetch_error("handshake", exc) from exc
        try:
            return self._channel.call(request, self.timeout)
        except (ConnectionClosed, Timeout, KerbPkError) as exc:
            self.close()
            if fresh:
                raise self._as_fetch_error("channel", exc) from exc
        # the reused channel may simply have gone away; retry once fresh
        try:
            self._channel = self._open()
        except KerbPkError as exc:
            raise self._as_fetch_error("handshake", exc) from exc
        try:
            return self._channel.call(request, self.timeout)
        except (ConnectionClosed, Timeout, KerbPkError) as exc:
            self.close()
            raise self._as_fetch_error("channel", exc) from exc
