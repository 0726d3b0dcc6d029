"""Shared fixtures: a one-user, one-service realm with an in-process KDC."""

import pytest

from kerbpk import codec
from kerbpk.client import ClientAgent, ClientIdentity
from kerbpk.crypto import get_provider
from kerbpk.kdc import KdcConfig, KdcService, PrincipalDb

REALM = "EXAMPLE"
NOW = 1_000_000  # same epoch the simulated clock starts at


class Realm:
    """In-process KDC plus one enrolled user ("alice") and one service ("echo")."""

    def __init__(self, provider, realm: str = REALM):
        self.provider = provider
        self.db = PrincipalDb.create(realm, provider)
        self.keypair = provider.generate_keypair()
        self.user = self.db.register_user("alice", "hunter2", self.keypair.public_key, provider)
        self.service = self.db.register_service("echo", provider)
        self.kdc = KdcService(self.db, KdcConfig(), provider)
        self.identity = ClientIdentity(self.user.principal, "hunter2", self.keypair,
                                       self.user.certificate)
        self.agent = ClientAgent(self.identity, provider)

    # The KDC decodes wire payloads itself, so the in-process path re-encodes.
    def send_as(self, request, now: int = NOW):
        return self.kdc.handle("as", codec.encode(request), now)

    def send_tgs(self, request, now: int = NOW):
        return self.kdc.handle("tgs", codec.encode(request), now)


@pytest.fixture
def toy():
    return get_provider("toy", seed=1234)


@pytest.fixture
def realm(toy):
    return Realm(toy)


@pytest.fixture
def logged_in(realm):
    """Realm whose agent already holds a TGT and a ticket for echo."""
    realm.agent.kinit(realm.send_as, NOW)
    realm.agent.get_service_ticket("echo", NOW, realm.send_tgs)
    return realm
