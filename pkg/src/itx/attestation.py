"""Shared attestation/key-exchange protocol types.

These types cross the trust boundary between the device root of trust and
the relying parties, so both sides serialize them with the same canonical
encoding; signatures and digests are always computed over that encoding.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Any, Optional

from . import crypto
from .encoding import canonical_bytes, digest_hex
from .errors import KeyExchangeFailure


def run_attributes_digest(
    ccu_keyshare: bytes,
    epoch: int,
    checkpoint_id: int,
    party_fingerprints: tuple[str, ...],
    stream_assignment: dict[str, Any],
) -> str:
    """Digest binding the run-identity attributes in a fixed order."""
    return digest_hex(
        canonical_bytes(
            {
                "ccu_keyshare": ccu_keyshare,
                "epoch": epoch,
                "checkpoint_id": checkpoint_id,
                "party_fingerprints": list(party_fingerprints),
                "stream_assignment": stream_assignment,
            }
        )
    )


@dataclass(frozen=True)
class AttestationReport:
    """Signed evidence of what the root of trust is about to run.

    The report carries the attribute values themselves (keyshare, counters,
    party fingerprints, stream assignment) next to their binding digest so a
    verifier can recompute and cross-check rather than trust the digest.
    """

    register_measurement: str
    bootloader_measurement: str
    manifest_measurement: str
    ccu_keyshare: bytes
    epoch: int
    checkpoint_id: int
    party_fingerprints: tuple[str, ...]
    stream_assignment: dict[str, Any]
    run_attributes_digest: str
    signature: bytes = b""

    def body(self) -> dict[str, Any]:
        return {
            "register_measurement": self.register_measurement,
            "bootloader_measurement": self.bootloader_measurement,
            "manifest_measurement": self.manifest_measurement,
            "ccu_keyshare": self.ccu_keyshare,
            "epoch": self.epoch,
            "checkpoint_id": self.checkpoint_id,
            "party_fingerprints": list(self.party_fingerprints),
            "stream_assignment": self.stream_assignment,
            "run_attributes_digest": self.run_attributes_digest,
        }

    def body_bytes(self) -> bytes:
        return canonical_bytes(self.body())

    def verify(self, ak_public: bytes) -> bool:
        return crypto.verify(ak_public, self.signature, self.body_bytes())

    def to_dict(self) -> dict[str, Any]:
        d = self.body()
        d["signature"] = self.signature
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "AttestationReport":
        return cls(
            register_measurement=d["register_measurement"],
            bootloader_measurement=d["bootloader_measurement"],
            manifest_measurement=d["manifest_measurement"],
            ccu_keyshare=bytes.fromhex(d["ccu_keyshare"]),
            epoch=d["epoch"],
            checkpoint_id=d["checkpoint_id"],
            party_fingerprints=tuple(d["party_fingerprints"]),
            stream_assignment=d["stream_assignment"],
            run_attributes_digest=d["run_attributes_digest"],
            signature=bytes.fromhex(d["signature"]),
        )


@dataclass(frozen=True)
class KeyPackage:
    """One party's keys for a run: per-stream keys plus run nonces.

    ``prior_run_nonce`` is supplied only when resuming from a checkpoint; it
    lets the root of trust re-derive the previous run's checkpoint key.
    """

    stream_keys: dict[int, bytes]
    run_nonce: bytes
    prior_run_nonce: Optional[bytes] = None

    def to_bytes(self) -> bytes:
        return canonical_bytes(
            {
                "stream_keys": {str(sid): key for sid, key in self.stream_keys.items()},
                "run_nonce": self.run_nonce,
                "prior_run_nonce": self.prior_run_nonce,
            }
        )

    @classmethod
    def from_bytes(cls, blob: bytes) -> "KeyPackage":
        try:
            d = json.loads(blob.decode("ascii"))
            return cls(
                stream_keys={int(sid): bytes.fromhex(k) for sid, k in d["stream_keys"].items()},
                run_nonce=bytes.fromhex(d["run_nonce"]),
                prior_run_nonce=(
                    None if d["prior_run_nonce"] is None else bytes.fromhex(d["prior_run_nonce"])
                ),
            )
        except (ValueError, KeyError, UnicodeDecodeError) as exc:
            raise KeyExchangeFailure(f"malformed key package: {exc}") from None


@dataclass(frozen=True)
class Verdict:
    accepted: bool
    reason: str

    @classmethod
    def ok(cls) -> "Verdict":
        return cls(True, "ok")

    @classmethod
    def reject(cls, reason: str) -> "Verdict":
        return cls(False, reason)

    def __bool__(self) -> bool:
        return self.accepted
