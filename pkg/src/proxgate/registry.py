"""Device registration and broadcast-signature derivation."""

from __future__ import annotations

import enum
import hashlib
import hmac
import struct
import threading
import time
from dataclasses import dataclass, field, replace
from typing import TYPE_CHECKING, Callable

from .errors import AlreadyRegistered, InvalidConfig, InvalidIdentifiers, NotFound

if TYPE_CHECKING:
    from .store import Store

SIGNATURE_LEN = 32
SECRET_LEN = 32

_NAMED_FIELDS = ("uuid", "imei", "device_id")


class Group(enum.Enum):
    """GROUP_ONE owns the data, GROUP_TWO requests it."""

    GROUP_ONE = "GroupOne"
    GROUP_TWO = "GroupTwo"


@dataclass(frozen=True)
class DeviceSignature:
    raw: bytes

    def __post_init__(self):
        if len(self.raw) != SIGNATURE_LEN:
            raise ValueError(f"signature must be {SIGNATURE_LEN} bytes, got {len(self.raw)}")

    @classmethod
    def from_hex(cls, text: str) -> "DeviceSignature":
        try:
            raw = bytes.fromhex(text)
        except ValueError as exc:
            raise NotFound(f"malformed signature {text!r}") from exc
        if len(raw) != SIGNATURE_LEN:
            raise NotFound(f"malformed signature {text!r}")
        return cls(raw)

    @property
    def hex(self) -> str:
        return self.raw.hex()

    def __str__(self) -> str:
        return self.hex

    def __repr__(self) -> str:
        return f"DeviceSignature({self.hex[:12]}...)"


@dataclass(frozen=True)
class DeviceIdentifiers:
    uuid: str = ""
    imei: str = ""
    device_id: str = ""
    extra: tuple[tuple[str, str], ...] = ()

    def fields(self) -> list[tuple[str, str]]:
        """Non-empty (name, trimmed value) pairs sorted by name."""
        pairs = [(name, getattr(self, name)) for name in _NAMED_FIELDS]
        pairs += [(f"extra:{name}", value) for name, value in self.extra]
        out = [(name, (value or "").strip()) for name, value in pairs]
        return sorted((n, v) for n, v in out if v)

    def validate(self) -> None:
        names = [name for name, _ in self.extra]
        if len(set(names)) != len(names):
            raise InvalidIdentifiers("duplicate extra identifier names")
        if any(not name.strip() for name in names):
            raise InvalidIdentifiers("extra identifier with empty name")
        if len(self.fields()) < 2:
            raise InvalidIdentifiers("at least two non-empty identifiers are required")

    def to_dict(self) -> dict:
        return {
            "uuid": self.uuid,
            "imei": self.imei,
            "device_id": self.device_id,
            "extra": [list(p) for p in self.extra],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "DeviceIdentifiers":
        extra = data.get("extra") or []
        if isinstance(extra, dict):
            extra = sorted(extra.items())
        try:
            return cls(
                uuid=str(data.get("uuid") or ""),
                imei=str(data.get("imei") or ""),
                device_id=str(data.get("device_id") or ""),
                extra=tuple((str(n), str(v)) for n, v in extra),
            )
        except (TypeError, ValueError) as exc:
            raise InvalidIdentifiers(f"bad identifier payload: {exc}") from exc


def canonical_encoding(identifiers: DeviceIdentifiers) -> bytes:
    """Length-prefixed, name-sorted encoding; injective over identifier sets."""
    chunks = []
    for name, value in identifiers.fields():
        for part in (name.encode("utf-8"), value.encode("utf-8")):
            chunks.append(struct.pack(">I", len(part)))
            chunks.append(part)
    return b"".join(chunks)


def derive_signature(identifiers: DeviceIdentifiers, registry_secret: bytes) -> DeviceSignature:
    if len(registry_secret) != SECRET_LEN:
        raise InvalidConfig(f"registry secret must be {SECRET_LEN} bytes")
    identifiers.validate()
    digest = hmac.new(registry_secret, canonical_encoding(identifiers), hashlib.sha256).digest()
    return DeviceSignature(digest)


def parse_secret_hex(text: str) -> bytes:
    text = (text or "").strip()
    if len(text) != 2 * SECRET_LEN:
        raise InvalidConfig("registry_secret_hex must be 64 hex characters")
    try:
        return bytes.fromhex(text)
    except ValueError as exc:
        raise InvalidConfig("registry_secret_hex is not valid hex") from exc


@dataclass(frozen=True)
class DeviceProfile:
    signature: DeviceSignature
    group: Group
    display_name: str
    identifiers: DeviceIdentifiers
    registered_at: float
    signed_in: bool = False

    def to_dict(self) -> dict:
        return {
            "signature": self.signature.hex,
            "group": self.group.value,
            "display_name": self.display_name,
            "identifiers": self.identifiers.to_dict(),
            "registered_at": self.registered_at,
            "signed_in": self.signed_in,
        }


@dataclass
class Registry:
    """Thread-safe profile store keyed by signature.

    When a ``store`` is attached, every mutation is written through and the
    registry is hydrated from it on construction.
    """

    secret: bytes
    store: "Store | None" = None
    clock: Callable[[], float] = time.time
    _profiles: dict[DeviceSignature, DeviceProfile] = field(default_factory=dict, repr=False)
    _lock: threading.RLock = field(default_factory=threading.RLock, repr=False)

    def __post_init__(self):
        if len(self.secret) != SECRET_LEN:
            raise InvalidConfig(f"registry secret must be {SECRET_LEN} bytes")
        if self.store is not None:
            for profile in self.store.load_profiles():
                self._profiles[profile.signature] = profile

    def register_device(
        self, display_name: str, identifiers: DeviceIdentifiers, group: Group
    ) -> DeviceProfile:
        signature = derive_signature(identifiers, self.secret)
        with self._lock:
            if signature in self._profiles:
                raise AlreadyRegistered(f"device {signature.hex} is already registered")
            profile = DeviceProfile(
                signature=signature,
                group=Group(group),
                display_name=display_name,
                identifiers=identifiers,
                registered_at=self.clock(),
                signed_in=False,
            )
            if self.store is not None:
                self.store.insert_profile(profile)
            self._profiles[signature] = profile
            return profile

    def lookup(self, signature: DeviceSignature) -> DeviceProfile:
        with self._lock:
            try:
                return self._profiles[signature]
            except KeyError:
                raise NotFound(f"no device with signature {signature.hex}") from None

    def set_signed_in(self, signature: DeviceSignature, flag: bool) -> None:
        with self._lock:
            profile = self.lookup(signature)
            updated = replace(profile, signed_in=bool(flag))
            if self.store is not None:
                self.store.update_signed_in(signature, updated.signed_in)
            self._profiles[signature] = updated

    def __len__(self) -> int:
        with self._lock:
            return len(self._profiles)

    def profiles(self) -> list[DeviceProfile]:
        with self._lock:
            return list(self._profiles.values())
