"""Turn-key simulated deployments.

Everything a full run needs — a certificate authority, signed firmware, a
provisioned device with its control unit, party identities, and packaged
job inputs — wired together the way a real fleet would be.  The CLI demo
commands and the test suite both start from here.
"""

from __future__ import annotations

import hashlib
import random
import struct
from dataclasses import dataclass

from .ccu import Ccu, CcuFlash, FirmwareBundle
from .compiler import CompiledJob, JobDescription, compile_job
from .device import DeviceConfig, IpuDevice
from .packaging import JobInputs, package_inputs
from .pki import COMPONENT_BOOTLOADER, COMPONENT_ICU, CaState, PartyIdentity
from .runtime import TrustedJobSession


@dataclass
class Deployment:
    ca: CaState
    firmware: FirmwareBundle
    flash: CcuFlash
    ccu: Ccu
    device: IpuDevice
    device_chain: dict

    def ca_public(self) -> dict:
        return self.ca.public()

    def tcb_certs(self) -> list:
        return list(self.ca.tcb_certs)


def tile_bootloader_image(revision: str = "1") -> bytes:
    """The tile-level secure bootloader shipped with a firmware revision.
    Compilation pins its measurement without needing a CA in hand."""
    return f"tile secure bootloader r{revision}".encode()


def make_firmware(ca: CaState, revision: str = "1") -> FirmwareBundle:
    return FirmwareBundle(
        secondary_bootloader=ca.sign_firmware(f"secondary bootloader r{revision}".encode()),
        cce=ca.sign_firmware(f"confidential compute engine r{revision}".encode()),
        icu_measurement=hashlib.sha256(f"icu firmware r{revision}".encode()).hexdigest(),
        tile_bootloader=tile_bootloader_image(revision),
    )


def make_deployment(
    seed: int = 0,
    ipu_id: int = 0,
    config: DeviceConfig | None = None,
    hardened: bool = False,
    ca: CaState | None = None,
    firmware: FirmwareBundle | None = None,
) -> Deployment:
    """Manufacture, provision, and rack one device end to end."""
    rng = random.Random(seed)
    ca = ca or CaState()
    firmware = firmware or make_firmware(ca)
    batch_id = f"batch-{seed // 16}"
    batch_secret = ca.batch_secrets.get(batch_id) or ca.new_batch(batch_id)
    flash = CcuFlash(
        firmware_ca_public=ca.public()["firmware_ca"],
        batch_id=batch_id,
        batch_secret=batch_secret,
        provisioning_nonce=rng.randbytes(16),
        device_serial=f"dev-{seed:04d}",
    )
    flash.first_boot(rng.randbytes(32))
    ccu = Ccu.boot(flash, firmware, hardened=hardened)
    bundle = ccu.provisioning_bundle(flash)
    issued = ca.ca_provision_and_certify(
        bundle["csr"], bundle["bootloader_manifest"], flash.provisioning_nonce
    )
    device = IpuDevice(ipu_id=ipu_id, config=config or DeviceConfig())
    ccu.attach_device(device)
    chain = {
        "cik": ccu.cert_chain["cik"],
        "pik": ccu.cert_chain["pik"],
        "ak": ccu.cert_chain["ak"],
        "ca_cik": issued["cik"],
    }
    return Deployment(ca=ca, firmware=firmware, flash=flash, ccu=ccu, device=device, device_chain=chain)


def update_firmware(deployment: Deployment, revision: str, revoke_old: bool = False) -> Deployment:
    """Ship a new secondary bootloader: the CA signs it and issues a TCB
    update certificate; the device reboots into it with fresh platform keys
    but the same card identity."""
    ca = deployment.ca
    new_firmware = make_firmware(ca, revision)
    old = hashlib.sha256(deployment.firmware.secondary_bootloader.image).hexdigest()
    new = hashlib.sha256(new_firmware.secondary_bootloader.image).hexdigest()
    ca.ca_issue_tcb_update(COMPONENT_BOOTLOADER, old, new, revoke_old=revoke_old)
    ca.ca_issue_tcb_update(
        COMPONENT_ICU,
        deployment.firmware.icu_measurement,
        new_firmware.icu_measurement,
        revoke_old=revoke_old,
    )
    ccu = Ccu.boot(deployment.flash, new_firmware)
    deployment.device.reset("sbr")
    ccu.attach_device(deployment.device)
    chain = {
        "cik": ccu.cert_chain["cik"],
        "pik": ccu.cert_chain["pik"],
        "ak": ccu.cert_chain["ak"],
        "ca_cik": deployment.device_chain["ca_cik"],
    }
    return Deployment(
        ca=ca,
        firmware=new_firmware,
        flash=deployment.flash,
        ccu=ccu,
        device=deployment.device,
        device_chain=chain,
    )


# ---------------------------------------------------------------------------
# job fixtures
# ---------------------------------------------------------------------------


@dataclass
class JobFixture:
    deployment: Deployment
    compiled: CompiledJob
    session: TrustedJobSession
    parties: dict[str, PartyIdentity]
    inputs: dict[str, JobInputs]
    plaintexts: dict[int, bytes]  # input stream id -> plaintext

    def clear_inputs(self) -> dict[int, bytes]:
        return dict(self.plaintexts)


def _ints(rng: random.Random, count: int, lo: int = -9999, hi: int = 9999) -> bytes:
    return struct.pack(f"<{count}i", *(rng.randint(lo, hi) for _ in range(count)))


def _make_session(
    deployment: Deployment,
    compiled: CompiledJob,
    parties: dict[str, PartyIdentity],
    inputs: dict[str, JobInputs],
    adversary=None,
) -> TrustedJobSession:
    return TrustedJobSession(
        device=deployment.device,
        ccu=deployment.ccu,
        manifest=compiled.manifest,
        inputs=inputs,
        parties=parties,
        ca_public=deployment.ca_public(),
        device_chain=deployment.device_chain,
        tcb_certs=deployment.tcb_certs(),
        adversary=adversary,
    )


def make_sgd_fixture(
    deployment: Deployment | None = None,
    *,
    steps: int = 3,
    checkpoint_period: int = 1,
    data_seed: int = 0,
    adversary=None,
) -> JobFixture:
    deployment = deployment or make_deployment()
    job = JobDescription(
        kind="sgd",
        model_party="modelco",
        data_parties=("alpha", "beta"),
        steps=steps,
        checkpoint_period=checkpoint_period,
    )
    compiled = compile_job(
        job,
        config=deployment.device.config,
        bootloader_measurement=deployment.firmware.tile_bootloader_measurement(),
        ipu_id=deployment.device.ipu_id,
    )
    rng = random.Random(data_seed)
    model_ints = 192
    model = _ints(rng, model_ints)
    g1 = _ints(rng, steps * model_ints, -500, 500)
    g2 = _ints(rng, steps * model_ints, -500, 500)
    parties = {name: PartyIdentity(name) for name in ("modelco", "alpha", "beta")}
    manifest = compiled.manifest
    inputs = {
        "modelco": package_inputs("modelco", manifest, binaries=compiled.binaries, data={2: model}),
        "alpha": package_inputs("alpha", manifest, data={3: g1}),
        "beta": package_inputs("beta", manifest, data={4: g2}),
    }
    session = _make_session(deployment, compiled, parties, inputs, adversary)
    return JobFixture(
        deployment=deployment,
        compiled=compiled,
        session=session,
        parties=parties,
        inputs=inputs,
        plaintexts={2: model, 3: g1, 4: g2},
    )


def make_sum_fixture(
    deployment: Deployment | None = None,
    *,
    stream_count: int = 17,
    rotate_contexts: bool = True,
    data_seed: int = 0,
    adversary=None,
) -> JobFixture:
    deployment = deployment or make_deployment()
    job = JobDescription(
        kind="sum_streams",
        model_party="modelco",
        data_parties=("alpha", "beta"),
        stream_count=stream_count,
        rotate_contexts=rotate_contexts,
    )
    compiled = compile_job(
        job,
        config=deployment.device.config,
        bootloader_measurement=deployment.firmware.tile_bootloader_measurement(),
        ipu_id=deployment.device.ipu_id,
    )
    rng = random.Random(data_seed)
    manifest = compiled.manifest
    plaintexts: dict[int, bytes] = {}
    per_party_data: dict[str, dict[int, bytes]] = {}
    for sid, entry in manifest.stream_table.items():
        if entry.direction != "in" or entry.kind == "code":
            continue
        blob = _ints(rng, entry.plaintext_length // 4, -100, 100)
        plaintexts[sid] = blob
        per_party_data.setdefault(entry.party, {})[sid] = blob
    parties = {name: PartyIdentity(name) for name in ("modelco", "alpha", "beta")}
    inputs = {
        "modelco": package_inputs(
            "modelco", manifest, binaries=compiled.binaries, data=per_party_data.get("modelco", {})
        ),
        "alpha": package_inputs("alpha", manifest, data=per_party_data.get("alpha", {})),
        "beta": package_inputs("beta", manifest, data=per_party_data.get("beta", {})),
    }
    session = _make_session(deployment, compiled, parties, inputs, adversary)
    return JobFixture(
        deployment=deployment,
        compiled=compiled,
        session=session,
        parties=parties,
        inputs=inputs,
        plaintexts=plaintexts,
    )
