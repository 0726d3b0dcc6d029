"""``kerbpk`` command line.

Subcommands mirror the moving parts: ``kdc`` owns the principal database and
serves the two issuing endpoints, ``client`` performs initial auth / ticket
fetches / gateway requests, ``service`` runs an echo responder (protected or
plain), ``gateway`` fronts backends with the prefix policy and response
cache, ``scenario`` executes scripted runs, and ``db`` inspects the database
file.

Conventions: results print as ``key=value`` pairs (or ``--json`` where
offered); success exits 0, failures exit 1 with ``error=<Name>`` on stderr,
usage problems exit 2.  ``KERBPK_DB``, ``KERBPK_CCACHE``, and ``KERBPK_REALM``
supply defaults for the corresponding flags.
"""

from __future__ import annotations

import argparse
import getpass
import json
import os
import sys
import time
from typing import Optional

from . import __version__, codec
from .client import (
    ClientAgent,
    ClientIdentity,
    CredentialCache,
    load_identity,
    request_service_ticket,
    save_identity,
)
from .crypto import get_provider
from .errors import FetchError, KerbPkError, NoTgt
from .gateway import (
    BackendSession,
    GatewayClient,
    GatewayCore,
    GatewayPolicy,
    GatewaySession,
    ProtectedAppSession,
    ResponseCache,
    SERVED_CACHE,
    echo_handler,
)
from .gss import (
    MECHANISM,
    ContextInitiator,
    CredentialUsage,
    MechanismName,
    NameType,
    ReqFlags,
    acquire_credential,
)
from .kdc import (
    DEFAULT_AS_PORT,
    DEFAULT_TGS_PORT,
    KdcConfig,
    KdcFrameSession,
    KdcService,
    PrincipalDb,
    RecordKind,
    ROLE_AS,
    ROLE_TGS,
    load_service_key,
    save_service_key,
)
from .messages import Principal, ReplayCache, Validity, decode_reply
from .scenario import load_scenario, parse_scenario, run_scenario
from .transport import FrameClient, ThreadedFrameServer

DEFAULT_LIFETIME = 28800

_KIND_NAMES = {int(RecordKind.USER): "user", int(RecordKind.SERVICE): "service",
               int(RecordKind.TGS_SERVICE): "tgs"}


def _now() -> int:
    return int(time.time())


def _env(value: Optional[str], var: str, fallback: str) -> str:
    if value is not None:
        return value
    return os.environ.get(var, fallback)


def _db_path(args) -> str:
    return _env(args.db, "KERBPK_DB", "kerbpk.db")


def _ccache_path(args) -> str:
    return _env(args.ccache, "KERBPK_CCACHE", "kerbpk.ccache")


def _realm(args) -> str:
    return _env(args.realm, "KERBPK_REALM", "EXAMPLE")


def _provider_of(args):
    return get_provider(args.provider, seed=args.seed)


def _crypto_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--provider", choices=("toy", "standard"), default="standard",
                        help="crypto provider (default: standard)")
    parser.add_argument("--seed", type=int, default=None,
                        help="deterministic seed, toy provider only")


def _call(host: str, port: int, request_payload: bytes, expected: codec.SchemaId,
          timeout: float = 5.0):
    conn = FrameClient(host, port, timeout=timeout)
    try:
        conn.send(request_payload)
        return decode_reply(conn.recv(), expected)
    finally:
        conn.close()


def _serve(servers: list[ThreadedFrameServer], banner: str) -> int:
    print(banner, flush=True)
    try:
        while True:
            time.sleep(0.25)
    except KeyboardInterrupt:
        pass
    finally:
        for server in servers:
            server.stop()
    return 0


# -- kdc ---------------------------------------------------------------------


def cmd_kdc_serve(args) -> int:
    db = PrincipalDb.load(_db_path(args))
    service = KdcService(db, KdcConfig(), _provider_of(args))
    as_server = ThreadedFrameServer(lambda: KdcFrameSession(service, ROLE_AS),
                                    now_fn=_now, port=args.as_port).start()
    tgs_server = ThreadedFrameServer(lambda: KdcFrameSession(service, ROLE_TGS),
                                     now_fn=_now, port=args.tgs_port).start()
    return _serve([as_server, tgs_server],
                  f"kdc listening realm={db.realm} as_port={as_server.port} "
                  f"tgs_port={tgs_server.port}")


def _load_or_create_db(args, provider) -> PrincipalDb:
    path = _db_path(args)
    if os.path.exists(path):
        return PrincipalDb.load(path)
    return PrincipalDb.create(_realm(args), provider)


def cmd_kdc_register_user(args) -> int:
    provider = _provider_of(args)
    db = _load_or_create_db(args, provider)
    password = args.password if args.password is not None else getpass.getpass("password: ")
    keypair = provider.generate_keypair()
    record = db.register_user(args.name, password, keypair.public_key, provider)
    db.save(_db_path(args))
    if args.identity_out:
        identity = ClientIdentity(record.principal, password, keypair, record.certificate)
        save_identity(identity, args.identity_out)
    line = (f"registered principal={record.principal.name}@{record.principal.realm} "
            f"kind=user serial={record.certificate.serial} db={_db_path(args)}")
    if args.identity_out:
        line += f" identity={args.identity_out}"
    print(line)
    return 0


def cmd_kdc_register_service(args) -> int:
    provider = _provider_of(args)
    db = _load_or_create_db(args, provider)
    record = db.register_service(args.name, provider)
    db.save(_db_path(args))
    line = (f"registered principal={record.principal.name}@{record.principal.realm} "
            f"kind=service db={_db_path(args)}")
    if args.keytab_out:
        save_service_key(record, args.keytab_out)
        line += f" keytab={args.keytab_out}"
    print(line)
    return 0


# -- client ------------------------------------------------------------------


def cmd_client_kinit(args) -> int:
    provider = _provider_of(args)
    password = args.password if args.password is not None else getpass.getpass("password: ")
    identity = load_identity(args.identity, password)
    cache = CredentialCache(identity.principal)
    agent = ClientAgent(identity, provider, cache=cache)
    now = _now()

    def send_as(request):
        return _call(args.as_host, args.as_port, codec.encode(request),
                     codec.SchemaId.AS_REPLY)

    entry = agent.kinit(send_as, now, tgs_id=args.tgs_name,
                        requested_validity=Validity(now, now + args.lifetime))
    cache.save(_ccache_path(args))
    print(f"kinit ok principal={identity.principal.name}@{identity.principal.realm} "
          f"tgt_till={entry.validity.till} ccache={_ccache_path(args)}")
    return 0


def _tgs_sender(args):
    def send_tgs(request):
        return _call(args.tgs_host, args.tgs_port, codec.encode(request),
                     codec.SchemaId.TGS_REPLY)
    return send_tgs


def cmd_client_get_ticket(args) -> int:
    provider = _provider_of(args)
    path = _ccache_path(args)
    cache = CredentialCache.load(path)
    entry = request_service_ticket(cache, provider, args.service, _now(),
                                   _tgs_sender(args))
    cache.save(path)
    print(f"ticket ok service={args.service} till={entry.validity.till} ccache={path}")
    return 0


def cmd_client_fetch(args) -> int:
    provider = _provider_of(args)

    def connect():
        return FrameClient(args.gateway_host, args.gateway_port, timeout=5.0)

    if args.plain:
        client = GatewayClient(connect, None, _now)
        response = client.fetch_plain(args.resource, args.method, args.body.encode())
    else:
        path = _ccache_path(args)
        cache = CredentialCache.load(path)
        send_tgs = _tgs_sender(args)

        def ticket_source(target: Principal, now: int):
            entry = cache.get_service(target.name, now)
            if entry is None:
                try:
                    entry = request_service_ticket(cache, provider, target.name,
                                                   now, send_tgs)
                except NoTgt as exc:
                    raise FetchError("AS", exc) from exc
                except KerbPkError as exc:
                    raise FetchError("TGS", exc) from exc
                cache.save(path)
            return entry.ticket, entry.key

        def make_initiator(now: int) -> ContextInitiator:
            cred = acquire_credential(
                MechanismName(cache.client, NameType.PRINCIPAL_NAME, MECHANISM),
                CredentialUsage.INITIATE, cache)
            target = MechanismName(Principal(args.service, cache.client.realm),
                                   NameType.PRINCIPAL_NAME, MECHANISM)
            return ContextInitiator(cred, target, ReqFlags(), provider,
                                    ticket_source=ticket_source)

        client = GatewayClient(connect, make_initiator, _now)
        try:
            response = client.fetch(args.resource, args.method, args.body.encode())
        finally:
            client.close()

    served = "cache" if response.served_from == SERVED_CACHE else "backend"
    if args.json:
        print(json.dumps({"status": response.status, "served_from": served,
                          "body": response.body.decode("utf-8", errors="replace")}))
    else:
        print(f"status={response.status} served_from={served} "
              f"body={response.body.decode('utf-8', errors='replace')}")
    return 0 if response.status < 400 else 1


# -- service / gateway -------------------------------------------------------


def cmd_service_serve_echo(args) -> int:
    provider = _provider_of(args)
    if args.plain:
        server = ThreadedFrameServer(lambda: BackendSession(echo_handler),
                                     now_fn=_now, port=args.port).start()
        return _serve([server], f"service listening mode=plain port={server.port}")
    if not args.keytab:
        raise KerbPkError("a protected service needs --keytab (or use --plain)")
    keyfile = load_service_key(args.keytab)
    replay = ReplayCache()
    server = ThreadedFrameServer(
        lambda: ProtectedAppSession(keyfile.principal, keyfile.key, provider, replay),
        now_fn=_now, port=args.port).start()
    return _serve([server],
                  f"service listening name={keyfile.principal.name}"
                  f"@{keyfile.principal.realm} mode=protected port={server.port}")


def _parse_backend(spec: str):
    prefix, sep, hostport = spec.partition("=")
    host, sep2, port = hostport.rpartition(":")
    if not sep or not sep2 or not prefix.startswith("/") or not port.isdigit():
        raise KerbPkError(f"backend spec must look like /prefix=host:port, got {spec!r}")
    return prefix, (host, int(port))


def cmd_gateway(args) -> int:
    provider = _provider_of(args)
    with open(args.policy, "r", encoding="utf-8") as fh:
        policy = GatewayPolicy.parse(fh.read())
    keyfile = load_service_key(args.keytab)
    backends = []
    for spec in args.backend or []:
        prefix, (host, port) = _parse_backend(spec)
        backends.append((prefix, lambda host=host, port=port: FrameClient(host, port,
                                                                          timeout=5.0)))
    cache = ResponseCache(args.cache_capacity) if args.cache_capacity > 0 else None
    core = GatewayCore(policy, cache, backends)
    replay = ReplayCache()
    server = ThreadedFrameServer(
        lambda: GatewaySession(core, keyfile.principal, keyfile.key, provider, replay),
        now_fn=_now, port=args.port).start()
    return _serve([server],
                  f"gateway listening name={keyfile.principal.name}"
                  f"@{keyfile.principal.realm} port={server.port} "
                  f"backends={len(backends)}")


# -- scenario / db -----------------------------------------------------------


def cmd_scenario_run(args) -> int:
    if os.path.exists(args.scenario):
        with open(args.scenario, "r", encoding="utf-8") as fh:
            name = os.path.splitext(os.path.basename(args.scenario))[0]
            script = parse_scenario(fh.read(), name)
    else:
        script = load_scenario(args.scenario)
    report = run_scenario(script, seed=args.seed, transport=args.transport)
    print(report.to_json() if args.json else report.render())
    return 0


def cmd_db_inspect(args) -> int:
    db = PrincipalDb.load(_db_path(args))
    records = sorted(db.records(), key=lambda r: r.principal.name)
    if args.json:
        print(json.dumps({
            "realm": db.realm,
            "tgs": db.tgs_name,
            "principals": [{
                "name": r.principal.name,
                "kind": _KIND_NAMES.get(r.kind, str(r.kind)),
                "serial": r.certificate.serial if r.certificate else None,
            } for r in records],
        }, indent=2))
        return 0
    print(f"realm={db.realm} tgs={db.tgs_name} principals={db.key_count()}")
    for record in records:
        serial = record.certificate.serial if record.certificate else "-"
        print(f"principal={record.principal.name} "
              f"kind={_KIND_NAMES.get(record.kind, record.kind)} serial={serial}")
    return 0


# -- wiring ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kerbpk",
                                     description="ticket-based auth playground")
    parser.add_argument("--version", action="version", version=f"kerbpk {__version__}")
    top = parser.add_subparsers(dest="command", required=True)

    kdc = top.add_parser("kdc", help="key distribution center").add_subparsers(
        dest="subcommand", required=True)
    p = kdc.add_parser("serve", help="serve the AS and TGS endpoints")
    p.add_argument("--db", default=None, help="principal db path (env KERBPK_DB)")
    p.add_argument("--as-port", type=int, default=DEFAULT_AS_PORT)
    p.add_argument("--tgs-port", type=int, default=DEFAULT_TGS_PORT)
    _crypto_args(p)
    p.set_defaults(func=cmd_kdc_serve)

    p = kdc.add_parser("register-user", help="add a user principal")
    p.add_argument("name")
    p.add_argument("--password", default=None)
    p.add_argument("--db", default=None)
    p.add_argument("--realm", default=None, help="realm for a fresh db (env KERBPK_REALM)")
    p.add_argument("--identity-out", default=None,
                   help="also write the client identity file here")
    _crypto_args(p)
    p.set_defaults(func=cmd_kdc_register_user)

    p = kdc.add_parser("register-service", help="add a service principal")
    p.add_argument("name")
    p.add_argument("--db", default=None)
    p.add_argument("--realm", default=None)
    p.add_argument("--keytab-out", default=None,
                   help="also write the service key file here")
    _crypto_args(p)
    p.set_defaults(func=cmd_kdc_register_service)

    client = top.add_parser("client", help="user-side operations").add_subparsers(
        dest="subcommand", required=True)
    p = client.add_parser("kinit", help="initial authentication")
    p.add_argument("--identity", required=True, help="identity file from register-user")
    p.add_argument("--password", default=None)
    p.add_argument("--as-host", default="127.0.0.1")
    p.add_argument("--as-port", type=int, default=DEFAULT_AS_PORT)
    p.add_argument("--tgs-name", default="krbtgt")
    p.add_argument("--lifetime", type=int, default=DEFAULT_LIFETIME)
    p.add_argument("--ccache", default=None, help="credential cache path (env KERBPK_CCACHE)")
    _crypto_args(p)
    p.set_defaults(func=cmd_client_kinit)

    p = client.add_parser("get-ticket", help="fetch a service ticket")
    p.add_argument("service")
    p.add_argument("--ccache", default=None)
    p.add_argument("--tgs-host", default="127.0.0.1")
    p.add_argument("--tgs-port", type=int, default=DEFAULT_TGS_PORT)
    _crypto_args(p)
    p.set_defaults(func=cmd_client_get_ticket)

    p = client.add_parser("fetch", help="request a resource through the gateway")
    p.add_argument("resource")
    p.add_argument("--gateway-host", default="127.0.0.1")
    p.add_argument("--gateway-port", type=int, required=True)
    p.add_argument("--service", default="gateway",
                   help="gateway service principal name")
    p.add_argument("--method", default="GET")
    p.add_argument("--body", default="")
    p.add_argument("--plain", action="store_true",
                   help="no authentication; bypass resources only")
    p.add_argument("--ccache", default=None)
    p.add_argument("--tgs-host", default="127.0.0.1")
    p.add_argument("--tgs-port", type=int, default=DEFAULT_TGS_PORT)
    p.add_argument("--json", action="store_true")
    _crypto_args(p)
    p.set_defaults(func=cmd_client_fetch)

    service = top.add_parser("service", help="application server").add_subparsers(
        dest="subcommand", required=True)
    p = service.add_parser("serve-echo", help="echo responder")
    p.add_argument("--keytab", default=None, help="service key file")
    p.add_argument("--port", type=int, default=0)
    p.add_argument("--plain", action="store_true",
                   help="no tickets; serve as a bare backend")
    _crypto_args(p)
    p.set_defaults(func=cmd_service_serve_echo)

    p = top.add_parser("gateway", help="caching gateway in front of backends")
    p.add_argument("--policy", required=True, help="protect/bypass prefix rules")
    p.add_argument("--keytab", required=True, help="gateway service key file")
    p.add_argument("--port", type=int, default=0)
    p.add_argument("--backend", action="append", default=None,
                   metavar="/prefix=host:port")
    p.add_argument("--cache-capacity", type=int, default=16,
                   help="response cache entries; 0 turns caching off")
    _crypto_args(p)
    p.set_defaults(func=cmd_gateway)

    scenario = top.add_parser("scenario", help="scripted runs").add_subparsers(
        dest="subcommand", required=True)
    p = scenario.add_parser("run", help="execute a bundled or on-disk scenario")
    p.add_argument("scenario", help="bundled name (happy_path, replay_attack, "
                                    "expired_ticket) or a file path")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--transport", choices=("sim", "tcp"), default="sim")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_scenario_run)

    db = top.add_parser("db", help="principal database").add_subparsers(
        dest="subcommand", required=True)
    p = db.add_parser("inspect", help="list principals")
    p.add_argument("--db", default=None)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_db_inspect)

    return parser


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "seed", None) is not None and getattr(args, "provider", "") == "standard":
        parser.error("--seed requires --provider toy")
    try:
        return args.func(args)
    except KerbPkError as exc:
        print(f"error={exc.name} detail={exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error=ConnectionError detail={exc}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        return 0


if __name__ == "__main__":
    sys.exit(main())
