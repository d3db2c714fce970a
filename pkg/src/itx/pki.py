"""Manufacturer CA, relying-party verification, and party key release.

Verification follows four steps, each with its own reject reason so tests
can pin down exactly which gate caught a mutation:

1. validate the device certificate chain and check revocation;
2. match the chain's card identity key against the CA-issued card cert;
3. match the platform cert's bootloader and ICU measurements against valid
   TCB certificates (genesis or update);
4. review the signed report: signature, manifest digest, and run attributes
   against the values the relying party expects.
"""

from __future__ import annotations

import hashlib
import hmac as hmac_mod
import os
from dataclasses import dataclass, field
from typing import Any, Optional

from . import crypto
from .attestation import AttestationReport, KeyPackage, Verdict, run_attributes_digest
from .certs import Certificate, issue, self_signed
from .ccu import SignedImage
from .encoding import canonical_bytes, digest_hex, jsonable
from .errors import InvalidShare, PartyAuthFailure, SupplyChainReject

COMPONENT_BOOTLOADER = "secondary_bootloader"
COMPONENT_ICU = "icu_firmware"


# ---------------------------------------------------------------------------
# TCB certificates
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TcbUpdateCertificate:
    component: str
    old_measurement: str  # "genesis" for the initially provisioned version
    new_measurement: str
    signature: bytes = b""

    def body_bytes(self) -> bytes:
        return canonical_bytes(
            {
                "component": self.component,
                "old_measurement": self.old_measurement,
                "new_measurement": self.new_measurement,
            }
        )

    def verify(self, firmware_ca_public: bytes) -> bool:
        return crypto.verify(firmware_ca_public, self.signature, self.body_bytes())

    def to_dict(self) -> dict[str, Any]:
        return {
            "component": self.component,
            "old_measurement": self.old_measurement,
            "new_measurement": self.new_measurement,
            "signature": self.signature,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "TcbUpdateCertificate":
        return cls(
            component=d["component"],
            old_measurement=d["old_measurement"],
            new_measurement=d["new_measurement"],
            signature=bytes.fromhex(d["signature"]) if isinstance(d["signature"], str) else d["signature"],
        )


# ---------------------------------------------------------------------------
# the certificate authority
# ---------------------------------------------------------------------------


class CaState:
    """Manufacturer-side roots: card/platform/firmware CAs, the issued-cert
    log, the revocation list, and per-batch provisioning secrets."""

    def __init__(self) -> None:
        self.cik_ca = crypto.ed25519_generate()
        self.pik_ca = crypto.ed25519_generate()
        self.firmware_ca = crypto.ed25519_generate()
        self.issued: list[Certificate] = []
        self.revoked_certs: set[str] = set()
        self.revoked_tcb: set[tuple[str, str]] = set()
        self.batch_secrets: dict[str, bytes] = {}
        self.tcb_certs: list[TcbUpdateCertificate] = []

    # -- public material -----------------------------------------------------

    def public(self) -> dict[str, Any]:
        return {
            "cik_ca": crypto.public_bytes(self.cik_ca),
            "pik_ca": crypto.public_bytes(self.pik_ca),
            "firmware_ca": crypto.public_bytes(self.firmware_ca),
            "revoked_certs": sorted(self.revoked_certs),
            "revoked_tcb": sorted(self.revoked_tcb),
        }

    def new_batch(self, batch_id: str) -> bytes:
        secret = os.urandom(32)
        self.batch_secrets[batch_id] = secret
        return secret

    def sign_firmware(self, image: bytes) -> SignedImage:
        return SignedImage(image, crypto.sign(self.firmware_ca, image))

    def revoke_certificate(self, fingerprint: str) -> None:
        self.revoked_certs.add(fingerprint)

    # -- provisioning (supply chain) ----------------------------------------

    def ca_provision_and_certify(
        self,
        csr_bundle: dict[str, Any],
        bootloader_manifest: dict[str, Any],
        expected_nonce: bytes,
    ) -> dict[str, Certificate]:
        """Verify a device's CSRs against its batch-authenticated bootloader
        manifest and issue the CA-backed card and platform certificates."""
        manifest = bootloader_manifest["body"]
        csr = csr_bundle
        secret = self.batch_secrets.get(manifest.get("batch_id", ""))
        if secret is None:
            raise SupplyChainReject(f"unknown batch {manifest.get('batch_id')!r}")
        mac = hmac_mod.new(secret, canonical_bytes(manifest), hashlib.sha256).hexdigest()
        if not hmac_mod.compare_digest(mac, bootloader_manifest.get("batch_mac", "")):
            raise SupplyChainReject("bootloader manifest not authenticated by the batch key")
        nonce = manifest["nonce"]
        if isinstance(nonce, str):
            nonce = bytes.fromhex(nonce)
        if nonce != expected_nonce:
            raise SupplyChainReject("bootloader manifest echoes the wrong nonce")
        if manifest["csr_digest"] != digest_hex(canonical_bytes(csr)):
            raise SupplyChainReject("CSR does not match the attested manifest")

        cik_cert = issue(
            csr["cik_public"],
            "cik-ca",
            self.cik_ca,
            {"role": "cik", "device_serial": csr["device_serial"]},
        )
        pik_cert = issue(
            csr["pik_public"],
            "pik-ca",
            self.pik_ca,
            {
                "role": "pik",
                "device_serial": csr["device_serial"],
                "bootloader_measurement": manifest["bootloader_measurement"],
                "icu_measurement": manifest["icu_measurement"],
            },
        )
        self.issued.extend([cik_cert, pik_cert])
        self.ca_issue_tcb_update(COMPONENT_BOOTLOADER, "genesis", manifest["bootloader_measurement"])
        self.ca_issue_tcb_update(COMPONENT_ICU, "genesis", manifest["icu_measurement"])
        return {"cik": cik_cert, "pik": pik_cert}

    # -- firmware updates ----------------------------------------------------

    def ca_issue_tcb_update(
        self,
        component: str,
        old_measurement: str,
        new_measurement: str,
        revoke_old: bool = False,
    ) -> TcbUpdateCertificate:
        body = TcbUpdateCertificate(component, old_measurement, new_measurement)
        cert = TcbUpdateCertificate(
            component,
            old_measurement,
            new_measurement,
            crypto.sign(self.firmware_ca, body.body_bytes()),
        )
        if revoke_old and old_measurement != "genesis":
            self.revoked_tcb.add((component, old_measurement))
        self.tcb_certs.append(cert)
        return cert


# ---------------------------------------------------------------------------
# attestation verification (relying-party side)
# ---------------------------------------------------------------------------

REJECT_CHAIN = "chain"
REJECT_REVOKED = "revoked"
REJECT_CIK_MISMATCH = "cik_mismatch"
REJECT_TCB_BOOTLOADER = "tcb_bootloader"
REJECT_TCB_ICU = "tcb_icu"
REJECT_REPORT_SIGNATURE = "report_signature"
REJECT_MANIFEST = "manifest"
REJECT_RUN_ATTRIBUTES = "run_attributes"
REJECT_REGISTERS = "registers"
REJECT_BOOTLOADER = "bootloader"


def _tcb_covered(
    measurement: str,
    component: str,
    tcb_certs: list[TcbUpdateCertificate],
    firmware_ca: bytes,
    revoked: set[tuple[str, str]],
) -> bool:
    for cert in tcb_certs:
        if cert.component != component or cert.new_measurement != measurement:
            continue
        if (component, measurement) in revoked:
            continue
        if cert.verify(firmware_ca):
            return True
    return False


def verify_attestation(
    report: AttestationReport,
    device_chain: dict[str, Any],
    ca_certs: dict[str, Any],
    tcb_certs: list[TcbUpdateCertificate],
    expected: dict[str, Any],
) -> Verdict:
    """Decide whether signed evidence authorizes releasing keys to a device."""
    cik: Certificate = device_chain["cik"]
    pik: Certificate = device_chain["pik"]
    ak: Certificate = device_chain["ak"]

    # Step 1: certificate chain and revocation.
    if not cik.verify(cik.subject_public_key):
        return Verdict.reject(REJECT_CHAIN)
    if not pik.verify(cik.subject_public_key):
        return Verdict.reject(REJECT_CHAIN)
    if not ak.verify(pik.subject_public_key):
        return Verdict.reject(REJECT_CHAIN)
    revoked_certs = set(ca_certs.get("revoked_certs", ()))
    for cert in (cik, pik, ak):
        if cert.fingerprint in revoked_certs:
            return Verdict.reject(REJECT_REVOKED)

    # Step 2: the chain's card identity must match the CA-issued card cert.
    ca_cik: Optional[Certificate] = device_chain.get("ca_cik")
    if ca_cik is None:
        return Verdict.reject(REJECT_CIK_MISMATCH)
    if not ca_cik.verify(ca_certs["cik_ca"]):
        return Verdict.reject(REJECT_CIK_MISMATCH)
    if ca_cik.fingerprint in revoked_certs:
        return Verdict.reject(REJECT_REVOKED)
    if ca_cik.subject_public_key != cik.subject_public_key:
        return Verdict.reject(REJECT_CIK_MISMATCH)

    # Step 3: the platform cert's firmware measurements must be endorsed by
    # valid TCB certificates.
    revoked_tcb = {tuple(x) for x in ca_certs.get("revoked_tcb", ())}
    firmware_ca = ca_certs["firmware_ca"]
    if not _tcb_covered(
        pik.extensions.get("bootloader_measurement", ""),
        COMPONENT_BOOTLOADER,
        tcb_certs,
        firmware_ca,
        revoked_tcb,
    ):
        return Verdict.reject(REJECT_TCB_BOOTLOADER)
    if not _tcb_covered(
        pik.extensions.get("icu_measurement", ""),
        COMPONENT_ICU,
        tcb_certs,
        firmware_ca,
        revoked_tcb,
    ):
        return Verdict.reject(REJECT_TCB_ICU)

    # Step 4: review the signed report against expectations.
    if not report.verify(ak.subject_public_key):
        return Verdict.reject(REJECT_REPORT_SIGNATURE)
    if report.manifest_measurement != expected["manifest_measurement"]:
        return Verdict.reject(REJECT_MANIFEST)
    recomputed = run_attributes_digest(
        report.ccu_keyshare,
        report.epoch,
        report.checkpoint_id,
        tuple(report.party_fingerprints),
        report.stream_assignment,
    )
    if recomputed != report.run_attributes_digest:
        return Verdict.reject(REJECT_RUN_ATTRIBUTES)
    if tuple(report.party_fingerprints) != tuple(expected["party_fingerprints"]):
        return Verdict.reject(REJECT_RUN_ATTRIBUTES)
    if report.stream_assignment != expected["stream_assignment"]:
        return Verdict.reject(REJECT_RUN_ATTRIBUTES)
    if report.epoch != expected["epoch"] or report.checkpoint_id != expected["checkpoint_id"]:
        return Verdict.reject(REJECT_RUN_ATTRIBUTES)
    if "register_measurement" in expected and report.register_measurement != expected["register_measurement"]:
        return Verdict.reject(REJECT_REGISTERS)
    if "bootloader_measurement" in expected and report.bootloader_measurement != expected["bootloader_measurement"]:
        return Verdict.reject(REJECT_BOOTLOADER)
    return Verdict.ok()


# ---------------------------------------------------------------------------
# party side
# ---------------------------------------------------------------------------


@dataclass
class PartySession:
    """One run's ephemeral exchange share for a party."""

    private: Any
    public: bytes
    signature: bytes

    def wrap_keys(self, ccu_share: bytes, manifest_hash: bytes, package: KeyPackage) -> bytes:
        if len(ccu_share) != 32:
            raise InvalidShare(f"device keyshare must be 32 bytes, got {len(ccu_share)}")
        w_p = crypto.derive_wrap_key(
            crypto.x25519_shared(self.private, ccu_share),
            self.public,
            ccu_share,
            manifest_hash,
        )
        return crypto.wrap(w_p, package.to_bytes())


class PartyIdentity:
    """A data or model owner: long-term certificate plus per-run sessions."""

    def __init__(self, name: str) -> None:
        self.name = name
        self._signing = crypto.ed25519_generate()
        self.certificate = self_signed(self._signing, name, {"role": "party", "name": name})

    @property
    def fingerprint(self) -> str:
        return self.certificate.fingerprint

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "signing_seed": crypto.private_bytes(self._signing).hex(),
            "certificate": jsonable(self.certificate.to_dict()),
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "PartyIdentity":
        identity = cls.__new__(cls)
        identity.name = d["name"]
        identity._signing = crypto.ed25519_from_seed(bytes.fromhex(d["signing_seed"]))
        identity.certificate = Certificate.from_dict(d["certificate"])
        return identity

    def new_session(self) -> PartySession:
        private = crypto.x25519_generate()
        public = crypto.x25519_public_bytes(private)
        return PartySession(private, public, crypto.sign(self._signing, public))

    def sign(self, message: bytes) -> bytes:
        """Authenticate a post-run artifact (e.g. a nonce-exchange file)."""
        return crypto.sign(self._signing, message)

    def release_keys(
        self,
        verdict: Verdict,
        session: PartySession,
        ccu_share: bytes,
        manifest_hash: bytes,
        package: KeyPackage,
    ) -> bytes:
        """Wrap keys only when the party accepted the attestation evidence."""
        if not verdict.accepted:
            raise PartyAuthFailure(f"party {self.name} refuses key release: {verdict.reason}")
        return session.wrap_keys(ccu_share, manifest_hash, package)


def derive_model_key(nonces: dict[str, bytes]) -> bytes:
    """Party-side recomputation of the model key from all parties' nonces."""
    return crypto.derive_model_key(crypto.combine_nonces(nonces))
