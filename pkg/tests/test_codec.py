"""Wire codec: golden encodings, round-trips, and rejection of malformed input."""

import struct

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kerbpk import codec
from kerbpk.client import CredentialCacheFile, CredEntry, ServiceCred
from kerbpk.crypto import SealedBox, SymmetricKey
from kerbpk.errors import (CodecError, FieldTooLarge, MalformedValue,
                           SchemaMismatch, TrailingGarbage, Truncated, UnknownTag)
from kerbpk.messages import Authenticator, Principal, SealedTicket, Validity


def tlv(tag: int, value: bytes) -> bytes:
    return struct.pack(">BI", tag, len(value)) + value


# ---------------------------------------------------------------- golden bytes

# Frozen wire image; a change here breaks every stored ticket and ccache.
AUTHENTICATOR_HEX = (
    "08000000230100000005616c696365"
    "02000000074558414d504c45"
    "030000000800000000000003e8"
)


def test_authenticator_golden_bytes():
    auth = Authenticator("alice", "EXAMPLE", 1000)
    assert codec.encode(auth).hex() == AUTHENTICATOR_HEX
    assert codec.decode(bytes.fromhex(AUTHENTICATOR_HEX),
                        codec.SchemaId.AUTHENTICATOR) == auth


def test_validity_matches_hand_packed_tlv():
    expected = tlv(0x12, tlv(1, (5).to_bytes(8, "big")) + tlv(2, (9).to_bytes(8, "big")))
    assert codec.encode(Validity(5, 9)) == expected


def test_principal_matches_hand_packed_tlv():
    expected = tlv(0x10, tlv(1, b"alice") + tlv(2, b"EXAMPLE"))
    assert codec.encode(Principal("alice", "EXAMPLE")) == expected


def test_sealed_box_label_is_single_byte():
    box = SealedBox(b"\x00\x01", 6)
    expected = tlv(0x14, tlv(1, b"\x00\x01") + tlv(2, b"\x06"))
    assert codec.encode(box) == expected


def test_schema_id_of():
    payload = codec.encode(Validity(1, 2))
    assert codec.schema_id_of(payload) == codec.SchemaId.VALIDITY
    assert codec.schema_id_of(b"") is None
    assert codec.schema_id_of(b"\x7e\x00\x00\x00\x00") is None  # unregistered tag


# ---------------------------------------------------------------- round-trips

u64s = st.integers(min_value=0, max_value=(1 << 64) - 1)


@given(st.text(), st.text(), u64s)
def test_authenticator_roundtrip(client_id, client_realm, timestamp):
    auth = Authenticator(client_id, client_realm, timestamp)
    assert codec.decode(codec.encode(auth), codec.SchemaId.AUTHENTICATOR) == auth


@given(st.binary(max_size=200), st.integers(min_value=0, max_value=255))
def test_sealed_box_roundtrip(ciphertext, label):
    box = SealedBox(ciphertext, label)
    assert codec.decode(codec.encode(box), codec.SchemaId.SEALED_BOX) == box


@given(u64s, u64s)
def test_validity_roundtrip(from_time, till):
    val = Validity(from_time, till)
    assert codec.decode(codec.encode(val), codec.SchemaId.VALIDITY) == val


def _cred_entry(tag: bytes) -> CredEntry:
    ticket = SealedTicket(Principal("echo", "EXAMPLE"), SealedBox(tag, 1))
    return CredEntry(ticket, SymmetricKey(b"\x00" * 32, "toy"), Validity(0, 100))


def test_optional_field_roundtrip():
    client = Principal("alice", "EXAMPLE")
    for tgt in (None, _cred_entry(b"t")):
        blob = codec.encode(CredentialCacheFile(client, tgt, []))
        assert codec.decode(blob, codec.SchemaId.CREDENTIAL_CACHE).tgt == tgt


def test_list_field_roundtrip():
    client = Principal("alice", "EXAMPLE")
    services = [ServiceCred("echo", _cred_entry(b"a")), ServiceCred("web", _cred_entry(b"b"))]
    blob = codec.encode(CredentialCacheFile(client, None, services))
    decoded = codec.decode(blob, codec.SchemaId.CREDENTIAL_CACHE)
    assert decoded.services == services
    empty = codec.encode(CredentialCacheFile(client, None, []))
    assert codec.decode(empty, codec.SchemaId.CREDENTIAL_CACHE).services == []


# ---------------------------------------------------------------- injectivity

def test_distinct_values_encode_distinctly():
    import random
    rng = random.Random(99)
    seen_values = set()
    encodings = set()
    while len(seen_values) < 1000:
        auth = Authenticator(
            "".join(rng.choice("abcdef") for _ in range(rng.randrange(0, 6))),
            "".join(rng.choice("XYZ") for _ in range(rng.randrange(0, 4))),
            rng.randrange(1 << 32),
        )
        key = (auth.client_id, auth.client_realm, auth.timestamp)
        if key in seen_values:
            continue
        seen_values.add(key)
        encodings.add(codec.encode(auth))
    assert len(encodings) == 1000


def test_field_boundaries_disambiguate_concatenations():
    # "a"+"bc" and "ab"+"c" concatenate identically; the length prefixes must not.
    first = codec.encode(Authenticator("a", "bc", 0))
    second = codec.encode(Authenticator("ab", "c", 0))
    assert first != second


# ---------------------------------------------------------------- truncation

def test_every_proper_prefix_is_rejected_as_truncated():
    payload = codec.encode(Authenticator("alice", "EXAMPLE", 1000))
    for cut in range(len(payload)):
        with pytest.raises(Truncated):
            codec.decode(payload[:cut], codec.SchemaId.AUTHENTICATOR)


@given(st.binary(max_size=300), st.integers(min_value=0, max_value=299))
@settings(max_examples=200)
def test_decode_never_crashes_on_noise(noise, cut):
    try:
        codec.decode(noise[:cut], codec.SchemaId.AUTHENTICATOR)
    except CodecError:
        pass


# ------------------------------------------------------------- malformed input

def test_trailing_garbage_after_structure():
    payload = codec.encode(Validity(1, 2)) + b"\x00"
    with pytest.raises(TrailingGarbage):
        codec.decode(payload, codec.SchemaId.VALIDITY)


def test_trailing_garbage_inside_structure():
    body = (tlv(1, (1).to_bytes(8, "big")) + tlv(2, (2).to_bytes(8, "big"))
            + tlv(3, b"extra"))
    with pytest.raises(TrailingGarbage):
        codec.decode(tlv(0x12, body), codec.SchemaId.VALIDITY)


def test_schema_mismatch_on_registered_foreign_tag():
    payload = codec.encode(Principal("alice", "EXAMPLE"))
    with pytest.raises(SchemaMismatch):
        codec.decode(payload, codec.SchemaId.VALIDITY)


def test_unknown_outer_tag():
    with pytest.raises(UnknownTag):
        codec.decode(tlv(0x7E, b""), codec.SchemaId.VALIDITY)


def test_unexpected_field_tag():
    body = tlv(9, (1).to_bytes(8, "big")) + tlv(2, (2).to_bytes(8, "big"))
    with pytest.raises(UnknownTag):
        codec.decode(tlv(0x12, body), codec.SchemaId.VALIDITY)


def test_integer_field_with_wrong_width():
    body = tlv(1, (1).to_bytes(7, "big")) + tlv(2, (2).to_bytes(8, "big"))
    with pytest.raises(MalformedValue):
        codec.decode(tlv(0x12, body), codec.SchemaId.VALIDITY)


def test_invalid_utf8_in_string_field():
    body = tlv(1, b"\xff\xfe") + tlv(2, b"EXAMPLE")
    with pytest.raises(MalformedValue):
        codec.decode(tlv(0x10, body), codec.SchemaId.PRINCIPAL)


def test_missing_field_is_truncated():
    body = tlv(1, (1).to_bytes(8, "big"))  # till missing
    with pytest.raises(Truncated):
        codec.decode(tlv(0x12, body), codec.SchemaId.VALIDITY)


# ---------------------------------------------------------------- encode side

def test_integer_out_of_range_rejected():
    with pytest.raises(FieldTooLarge):
        codec.encode(Validity(1 << 64, 0))
    with pytest.raises(FieldTooLarge):
        codec.encode(Validity(-1, 0))


def test_bool_is_not_an_integer_field():
    with pytest.raises(MalformedValue):
        codec.encode(Validity(True, 0))


def test_wrong_python_type_rejected():
    with pytest.raises(MalformedValue):
        codec.encode(Authenticator(5, "EXAMPLE", 0))
    with pytest.raises(MalformedValue):
        codec.encode(SealedBox("not-bytes", 1))


def test_unregistered_type_rejected():
    with pytest.raises(TypeError):
        codec.encode(object())
    with pytest.raises(TypeError):
        codec.decode(b"", 0x7D)


def test_registration_guards():
    class Fresh:
        pass

    with pytest.raises(ValueError):
        codec.register(Fresh, codec.SchemaId.VALIDITY, [("x", "u8")])  # id taken
    with pytest.raises(ValueError):
        codec.register(Fresh, 0x7C, [("x", "floats")])  # unknown kind
    with pytest.raises(ValueError):
        codec.register(Fresh, 0x7C, [("x", "struct")])  # nested class missing
