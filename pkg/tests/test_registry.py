import random
import threading

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from proxgate.errors import AlreadyRegistered, InvalidConfig, InvalidIdentifiers, NotFound
from proxgate.registry import (
    DeviceIdentifiers,
    DeviceSignature,
    Group,
    canonical_encoding,
    derive_signature,
    parse_secret_hex,
)

from .conftest import SECRET, ids


def test_signature_is_deterministic_and_32_bytes():
    a = derive_signature(ids(1), SECRET)
    b = derive_signature(ids(1), SECRET)
    assert a == b
    assert len(a.raw) == 32
    assert a.hex == a.hex.lower() and len(a.hex) == 64


def test_signature_depends_on_secret():
    other = bytes(32)
    assert derive_signature(ids(1), SECRET) != derive_signature(ids(1), other)


def test_length_prefix_prevents_concatenation_collision():
    left = DeviceIdentifiers(uuid="A", imei="B")
    right = DeviceIdentifiers(uuid="AB", imei="")
    assert canonical_encoding(left) != canonical_encoding(right)
    # the collapsed set is also rejected outright
    with pytest.raises(InvalidIdentifiers):
        derive_signature(right, SECRET)
    shifted = DeviceIdentifiers(uuid="AB", device_id="C")
    assert derive_signature(left, SECRET) != derive_signature(shifted, SECRET)


def test_field_order_and_whitespace_are_canonicalized():
    a = DeviceIdentifiers(uuid="u", extra=(("mac", "m"), ("serial", "s")))
    b = DeviceIdentifiers(uuid=" u ", extra=(("serial", "s"), ("mac", "m")))
    assert derive_signature(a, SECRET) == derive_signature(b, SECRET)


def test_extra_value_does_not_alias_named_field():
    a = DeviceIdentifiers(uuid="u", imei="x")
    b = DeviceIdentifiers(uuid="u", extra=(("imei", "x"),))
    assert derive_signature(a, SECRET) != derive_signature(b, SECRET)


@pytest.mark.parametrize(
    "identifiers",
    [
        DeviceIdentifiers(uuid="only"),
        DeviceIdentifiers(uuid="u", imei="   "),
        DeviceIdentifiers(),
        DeviceIdentifiers(uuid="u", extra=(("a", "1"), ("a", "2"))),
    ],
)
def test_invalid_identifier_sets(identifiers):
    with pytest.raises(InvalidIdentifiers):
        derive_signature(identifiers, SECRET)


def test_secret_must_be_32_bytes():
    with pytest.raises(InvalidConfig):
        derive_signature(ids(1), b"short")
    with pytest.raises(InvalidConfig):
        parse_secret_hex("ab" * 31)
    assert parse_secret_hex("ab" * 32) == b"\xab" * 32


def test_no_collisions_over_100k_random_identifier_sets():
    rng = random.Random(2024)
    seen = {}
    for _ in range(100_000):
        ident = DeviceIdentifiers(
            uuid="".join(rng.choices("0123456789abcdef", k=rng.randint(1, 12))),
            imei="".join(rng.choices("0123456789", k=rng.randint(0, 15))),
            device_id="".join(rng.choices("XYZ-01", k=rng.randint(0, 4))),
        )
        if len(ident.fields()) < 2:
            continue
        enc = canonical_encoding(ident)
        sig = derive_signature(ident, SECRET)
        if sig in seen:
            # identical signature is only acceptable for an identical set
            assert seen[sig] == enc
        seen[sig] = enc
    encodings = set(seen.values())
    assert len(encodings) == len(seen)
    assert len(seen) > 50_000


_text = st.text(alphabet=st.characters(blacklist_categories=("Cs",)), min_size=0, max_size=6)


@settings(max_examples=300)
@given(_text, _text, _text, _text, _text, _text)
def test_encoding_is_injective(u1, i1, d1, u2, i2, d2):
    a = DeviceIdentifiers(uuid=u1, imei=i1, device_id=d1)
    b = DeviceIdentifiers(uuid=u2, imei=i2, device_id=d2)
    if a.fields() != b.fields():
        assert canonical_encoding(a) != canonical_encoding(b)


def test_register_and_lookup(registry):
    p = registry.register_device("Alice's watch", ids(1), Group.GROUP_ONE)
    assert p.group is Group.GROUP_ONE
    assert p.signed_in is False
    assert registry.lookup(p.signature) == p


def test_duplicate_registration_rejected(registry):
    registry.register_device("a", ids(1), Group.GROUP_ONE)
    with pytest.raises(AlreadyRegistered):
        registry.register_device("a again", ids(1), Group.GROUP_TWO)
    assert len(registry) == 1


def test_register_with_single_identifier_rejected(registry):
    with pytest.raises(InvalidIdentifiers):
        registry.register_device("x", DeviceIdentifiers(uuid="u"), Group.GROUP_ONE)


def test_lookup_unknown(registry):
    with pytest.raises(NotFound):
        registry.lookup(DeviceSignature(bytes(32)))


def test_lookup_roundtrip_1000_devices(registry):
    sigs = [registry.register_device(f"d{i}", ids(i), Group.GROUP_ONE).signature for i in range(1000)]
    hits = sum(registry.lookup(s).signature == s for s in sigs)
    assert hits == 1000
    assert len(set(sigs)) == 1000


def test_signed_in_flag(registry):
    p = registry.register_device("a", ids(1), Group.GROUP_TWO)
    registry.set_signed_in(p.signature, True)
    assert registry.lookup(p.signature).signed_in is True
    with pytest.raises(NotFound):
        registry.set_signed_in(DeviceSignature(bytes(32)), True)


def test_signed_in_toggle_sequence_keeps_last_write(registry):
    p = registry.register_device("a", ids(1), Group.GROUP_TWO)
    rng = random.Random(5)
    last = None
    for _ in range(100):
        last = rng.random() < 0.5
        registry.set_signed_in(p.signature, last)
    assert registry.lookup(p.signature).signed_in is last
    assert registry.lookup(p.signature).group is Group.GROUP_TWO


def test_concurrent_registration_keeps_uniqueness(registry):
    errors = []

    def worker(offset):
        for i in range(50):
            try:
                registry.register_device("d", ids(i % 60), Group.GROUP_ONE)
            except AlreadyRegistered:
                errors.append(i)

    threads = [threading.Thread(target=worker, args=(t,)) for t in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    sigs = [p.signature for p in registry.profiles()]
    assert len(sigs) == len(set(sigs)) == 50
    assert len(errors) == 8 * 50 - 50


def test_signature_hex_roundtrip():
    sig = derive_signature(ids(3), SECRET)
    assert DeviceSignature.from_hex(sig.hex) == sig
    assert DeviceSignature.from_hex(sig.hex.upper()) == sig
    with pytest.raises(NotFound):
        DeviceSignature.from_hex("zz")
