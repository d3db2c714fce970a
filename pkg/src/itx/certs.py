"""Minimal certificate format for the device and party PKI.

Certificates are canonical-JSON bodies signed with Ed25519.  The fingerprint
covers the full certificate (body plus signature) like a conventional
certificate digest; Ed25519 signing is deterministic so fingerprints are
stable for identical inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey

from . import crypto
from .encoding import canonical_bytes, digest_hex


@dataclass(frozen=True)
class Certificate:
    subject_public_key: bytes
    issuer_id: str
    extensions: dict[str, Any] = field(default_factory=dict)
    signature: bytes = b""

    def body(self) -> dict[str, Any]:
        return {
            "subject_public_key": self.subject_public_key,
            "issuer_id": self.issuer_id,
            "extensions": self.extensions,
        }

    def body_bytes(self) -> bytes:
        return canonical_bytes(self.body())

    def verify(self, issuer_public: bytes) -> bool:
        return crypto.verify(issuer_public, self.signature, self.body_bytes())

    @property
    def fingerprint(self) -> str:
        return digest_hex(canonical_bytes(self.to_dict()))

    def to_dict(self) -> dict[str, Any]:
        d = self.body()
        d["signature"] = self.signature
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "Certificate":
        return cls(
            subject_public_key=bytes.fromhex(d["subject_public_key"]),
            issuer_id=d["issuer_id"],
            extensions=d["extensions"],
            signature=bytes.fromhex(d["signature"]),
        )


def issue(
    subject_public_key: bytes,
    issuer_id: str,
    issuer_private: Ed25519PrivateKey,
    extensions: dict[str, Any] | None = None,
) -> Certificate:
    cert = Certificate(subject_public_key, issuer_id, dict(extensions or {}))
    return Certificate(
        cert.subject_public_key,
        cert.issuer_id,
        cert.extensions,
        crypto.sign(issuer_private, cert.body_bytes()),
    )


def self_signed(private: Ed25519PrivateKey, subject_id: str, extensions: dict[str, Any] | None = None) -> Certificate:
    return issue(crypto.public_bytes(private), subject_id, private, extensions)
