"""Ticket-based authentication with public-key initial auth.

A realm has one key-distribution center (authentication service plus
ticket-granting service), any number of users and services, and exactly one
long-term key per principal.  Users prove themselves once with a
certificate-backed signature, collect a ticket-granting ticket, trade it for
service tickets, and establish mutually authenticated channels that wrap
application traffic with replay and ordering protection.

Everything runs over a deterministic in-process network simulator or real
loopback sockets; the ``kerbpk`` command line drives both.
"""

from .codec import SchemaId, decode, encode
from .crypto import (
    KeyPair,
    SealedBox,
    SealLabel,
    StandardProvider,
    SymmetricKey,
    ToyProvider,
    get_provider,
)
from .errors import KerbPkError
from .messages import Principal, Validity
from .kdc import KdcConfig, KdcService, PrincipalDb
from .client import ClientAgent, ClientIdentity, CredentialCache
from .scenario import load_scenario, parse_scenario, run_scenario

__version__ = "0.1.0"

__all__ = [
    "SchemaId", "encode", "decode",
    "KeyPair", "SealedBox", "SealLabel", "SymmetricKey",
    "ToyProvider", "StandardProvider", "get_provider",
    "KerbPkError", "Principal", "Validity",
    "KdcConfig", "KdcService", "PrincipalDb",
    "ClientAgent", "ClientIdentity", "CredentialCache",
    "load_scenario", "parse_scenario", "run_scenario",
    "__version__",
]
