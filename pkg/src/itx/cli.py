"""Command-line front end for the offline confidential-job workflow.

The subcommands mirror the life of a job:

* ``itx compile``        — job description -> manifest + tile binaries
* ``itx package-model``  — model owner encrypts code (and parameters)
* ``itx package-data``   — data owner encrypts input streams
* ``itx run``            — untrusted host attests, collects keys, executes
* ``itx verify``         — re-check a run's archived attestation evidence
* ``itx release-keys``   — party-side key wrapping against an accepted report
* ``itx decrypt-model``  — receivers pool nonces and recover the model
* ``itx ccu inspect``    — pretty-print archived reports and certificates
* ``itx pki issue``      — provision a device, emit its certificate chain
* ``itx pki tcb-update`` — ship new firmware, emit the TCB update certificate
* ``itx party verify`` / ``itx party release-keys`` — file-level party ops

Packages and clean rooms are directories; reports, certificates, manifests,
and expectations are JSON files in the canonical field layout; streams are
binary frame-container files.  Adversary scripts are JSON lists of
``{"action": ..., parameters}`` objects (see ``itx run --help``).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path

from .adversary import ACTIONS, from_script
from .attestation import AttestationReport, KeyPackage
from .certs import Certificate
from .compiler import JobDescription, compile_job
from .device import DeviceConfig
from .encoding import jsonable
from .errors import ItxError
from .eventlog import EventLog
from .frame_codec import Frame, StreamIV, StreamType, decode_stream_file, encode_stream_file
from .manifest import CODE, JobManifest, OUTPUT
from .packaging import (
    load_clean_room,
    load_package,
    package_data,
    package_model,
    save_clean_room,
    save_package,
)
from .pki import PartyIdentity, TcbUpdateCertificate, verify_attestation
from .runtime import TrustedJobSession, decrypt_model
from .sandbox import make_deployment, tile_bootloader_image, update_firmware

EXIT_OK = 0
EXIT_REJECTED = 1
EXIT_HALTED = 2


# ---------------------------------------------------------------------------
# small file helpers
# ---------------------------------------------------------------------------


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(jsonable(obj), indent=2, sort_keys=True) + "\n")


def _read_json(path: Path):
    return json.loads(Path(path).read_text())


def _load_ca(d: dict) -> dict:
    return {
        "cik_ca": bytes.fromhex(d["cik_ca"]),
        "pik_ca": bytes.fromhex(d["pik_ca"]),
        "firmware_ca": bytes.fromhex(d["firmware_ca"]),
        "revoked_certs": list(d.get("revoked_certs", [])),
        "revoked_tcb": [tuple(x) for x in d.get("revoked_tcb", [])],
    }


def _load_chain(d: dict) -> dict:
    return {name: Certificate.from_dict(cert) for name, cert in d.items()}


def _load_tcb(entries: list) -> list[TcbUpdateCertificate]:
    return [TcbUpdateCertificate.from_dict(e) for e in entries]


def _parse_data_args(pairs: list[str]) -> dict[int, bytes]:
    data: dict[int, bytes] = {}
    for pair in pairs:
        sid_text, _, file = pair.partition("=")
        if not file:
            raise SystemExit(f"--data wants STREAM_ID=FILE, got {pair!r}")
        data[int(sid_text)] = Path(file).read_bytes()
    return data


def _load_manifest(build: Path) -> JobManifest:
    return JobManifest.from_dict(_read_json(build / "manifest.json"))


def _load_binaries(build: Path) -> dict[int, bytes]:
    binaries = {}
    for file in sorted((build / "binaries").glob("t*.bin")):
        binaries[int(file.stem[1:])] = file.read_bytes()
    return binaries


# ---------------------------------------------------------------------------
# compile / package
# ---------------------------------------------------------------------------


def cmd_compile(args) -> int:
    desc = _read_json(Path(args.job))
    desc["data_parties"] = tuple(desc.get("data_parties", ()))
    desc["model_receivers"] = tuple(desc.get("model_receivers", ()))
    job = JobDescription(**desc)
    config = DeviceConfig()
    measurement = hashlib.sha256(tile_bootloader_image(args.firmware_revision)).hexdigest()
    compiled = compile_job(
        job, config=config, bootloader_measurement=measurement, ipu_id=args.ipu_id
    )
    out = Path(args.out)
    (out / "binaries").mkdir(parents=True, exist_ok=True)
    _write_json(out / "job.json", desc)
    _write_json(out / "manifest.json", compiled.manifest.to_dict())
    _write_json(out / "config.json", config.to_dict())
    _write_json(out / "streams.json", compiled.key_streams)
    for tile_id, binary in sorted(compiled.binaries.items()):
        (out / "binaries" / f"t{tile_id:03d}.bin").write_bytes(binary)
    manifest = compiled.manifest
    print(f"compiled {job.kind}: {len(manifest.stream_table)} streams, "
          f"{len(manifest.sync_plans)} barrier plans, {len(compiled.binaries)} tile binaries")
    print(f"manifest measurement {manifest.measurement()}")
    for party, sids in sorted(compiled.key_streams.items()):
        kinds = ", ".join(
            f"{sid}:{manifest.stream_table[sid].kind}" for sid in sids
        )
        print(f"  {party} supplies streams {kinds}")
    return EXIT_OK


def _cmd_package(args, model: bool) -> int:
    build = Path(args.build)
    manifest = _load_manifest(build)
    data = _parse_data_args(args.data or [])
    identity = PartyIdentity(args.party)
    if model:
        package, room = package_model(_load_binaries(build), manifest, identity, data=data)
    else:
        package, room = package_data(data, manifest, identity)
    save_package(package, manifest, args.package)
    save_clean_room(room, args.clean_room)
    _write_json(Path(args.clean_room) / "identity.json", identity.to_dict())
    print(f"party {args.party}: packaged streams {sorted(package.streams)} "
          f"for manifest {package.manifest_measurement[:16]}…")
    print(f"  shippable package: {args.package}")
    print(f"  private clean room: {args.clean_room}")
    return EXIT_OK


def cmd_package_model(args) -> int:
    return _cmd_package(args, model=True)


def cmd_package_data(args) -> int:
    return _cmd_package(args, model=False)


# ---------------------------------------------------------------------------
# run
# ---------------------------------------------------------------------------


def _archive_run(out: Path, session: TrustedJobSession, result, parties) -> None:
    manifest = session.manifest
    out.mkdir(parents=True, exist_ok=True)
    (out / "events.log").write_text(result.log.dump())
    _write_json(out / "manifest.json", manifest.to_dict())
    _write_json(
        out / "result.json",
        {
            "status": result.status,
            "reason": result.reason,
            "epoch": result.epoch,
            "checkpoint_id": result.checkpoint_id,
            "verdicts": {
                name: {"accepted": v.accepted, "reason": v.reason}
                for name, v in result.verdicts.items()
            },
        },
    )
    if session.last_report is not None:
        _write_json(out / "report.json", session.last_report.to_dict())
    _write_json(out / "chain.json", {k: c.to_dict() for k, c in session.device_chain.items()})
    _write_json(out / "ca.json", session.ca_public)
    _write_json(out / "tcb.json", [c.to_dict() for c in session.tcb_certs])
    if session.last_expected:
        _write_json(out / "expected.json", session.last_expected)
    _write_json(
        out / "parties.json", {name: p.certificate.to_dict() for name, p in parties.items()}
    )
    if result.completed:
        entry = next(e for e in manifest.stream_table.values() if e.kind == OUTPUT)
        template = StreamIV(stream_type=StreamType.OUTPUT, stream_id=entry.stream_id)
        (out / "output.stream").write_bytes(
            encode_stream_file(
                template, entry.frame_total_size, entry.plaintext_length, result.output_frames
            )
        )
        nonces = {}
        for name, identity in parties.items():
            fp = identity.certificate.fingerprint
            nonce = session.run_nonces[fp]
            nonces[name] = {
                "fingerprint": fp,
                "nonce": nonce.hex(),
                "signature": identity.sign(nonce).hex(),
            }
        _write_json(out / "nonces.json", nonces)


def cmd_run(args) -> int:
    build = Path(args.build)
    manifest = _load_manifest(build)
    config = DeviceConfig.from_dict(_read_json(build / "config.json"))

    packages = {}
    for path in args.package:
        package = load_package(path)
        if package.manifest_measurement != manifest.measurement():
            print(f"package {path} was built for a different manifest", file=sys.stderr)
            return EXIT_REJECTED
        packages[package.party] = package
    rooms = {}
    parties = {}
    for path in args.clean_room:
        room = load_clean_room(path)
        rooms[room.party] = room
        parties[room.party] = PartyIdentity.from_dict(_read_json(Path(path) / "identity.json"))
    if sorted(packages) != sorted(rooms):
        print(f"packages {sorted(packages)} do not match clean rooms {sorted(rooms)}",
              file=sys.stderr)
        return EXIT_REJECTED

    adversary = None
    if args.adversary:
        script = _read_json(Path(args.adversary))
        if isinstance(script, dict):
            script = script["actions"]
        adversary = from_script(script)

    deployment = make_deployment(seed=args.seed, ipu_id=manifest.ipu_id, config=config)
    session = TrustedJobSession(
        device=deployment.device,
        ccu=deployment.ccu,
        manifest=manifest,
        inputs={name: rooms[name].job_inputs(packages[name]) for name in packages},
        parties=parties,
        ca_public=deployment.ca_public(),
        device_chain=deployment.device_chain,
        tcb_certs=deployment.tcb_certs(),
        adversary=adversary,
        initial_sessions={name: room.session() for name, room in rooms.items()},
    )

    resume_at = None
    if args.resume:
        epoch_text, _, ckpt_text = args.resume.partition(",")
        resume_at = (int(epoch_text), int(ckpt_text))
        if resume_at[0] != 1:
            print("--resume demonstrates a first-epoch interruption; epoch must be 1",
                  file=sys.stderr)
            return EXIT_REJECTED

    if resume_at is not None:
        result = session.run(halt_after_checkpoint=resume_at[1] + 1)
        if result.status != "halted" or (result.epoch, result.checkpoint_id) != resume_at:
            print(f"job never reached checkpoint {resume_at}: {result.status} ({result.reason})",
                  file=sys.stderr)
            _archive_run(Path(args.out), session, result, parties)
            return EXIT_REJECTED
        print(f"halted after checkpoint (epoch {result.epoch}, id {result.checkpoint_id}); "
              "resetting device and resuming")
        deployment.device.reset("sbr")
        result = session.resume()
    else:
        result = session.run(halt_after_checkpoint=args.halt_after)

    _archive_run(Path(args.out), session, result, parties)
    for name, verdict in sorted(result.verdicts.items()):
        word = "accepted" if verdict.accepted else f"rejected ({verdict.reason})"
        print(f"party {name} {word}")
    print(f"run {result.status}: {result.reason}")
    print(f"artifacts in {args.out}")
    if result.completed:
        return EXIT_OK
    return EXIT_HALTED if result.status == "halted" else EXIT_REJECTED


# ---------------------------------------------------------------------------
# verification / key release / model recovery
# ---------------------------------------------------------------------------


def _verify_files(report_path, chain_path, ca_path, tcb_path, expected_path) -> int:
    report = AttestationReport.from_dict(_read_json(report_path))
    chain = _load_chain(_read_json(chain_path))
    ca = _load_ca(_read_json(ca_path))
    tcb = _load_tcb(_read_json(tcb_path))
    expected = _read_json(expected_path)
    expected["party_fingerprints"] = tuple(expected["party_fingerprints"])
    verdict = verify_attestation(report, chain, ca, tcb, expected)
    if verdict.accepted:
        print("Accept: evidence matches expectations")
        return EXIT_OK
    print(f"Reject: {verdict.reason}")
    return EXIT_REJECTED


def cmd_verify(args) -> int:
    run_dir = Path(args.run)
    return _verify_files(
        run_dir / "report.json",
        run_dir / "chain.json",
        run_dir / "ca.json",
        run_dir / "tcb.json",
        run_dir / "expected.json",
    )


def cmd_party_verify(args) -> int:
    return _verify_files(args.report, args.chain, args.ca, args.tcb, args.expected)


def _release_keys_files(
    report_path, chain_path, ca_path, tcb_path, expected_path, clean_room, out
) -> int:
    status = _verify_files(report_path, chain_path, ca_path, tcb_path, expected_path)
    if status != EXIT_OK:
        print("refusing to release keys for rejected evidence", file=sys.stderr)
        return status
    report = AttestationReport.from_dict(_read_json(report_path))
    expected = _read_json(expected_path)
    room = load_clean_room(clean_room)
    package = KeyPackage(
        stream_keys=dict(room.keys),
        run_nonce=os.urandom(32),
    )
    wrapped = room.session().wrap_keys(
        report.ccu_keyshare,
        bytes.fromhex(expected["manifest_measurement"]),
        package,
    )
    Path(out).write_bytes(wrapped)
    print(f"wrapped key package for {room.party}: {len(wrapped)} bytes -> {out}")
    return EXIT_OK


def cmd_release_keys(args) -> int:
    run_dir = Path(args.run)
    return _release_keys_files(
        run_dir / "report.json",
        run_dir / "chain.json",
        run_dir / "ca.json",
        run_dir / "tcb.json",
        run_dir / "expected.json",
        args.clean_room,
        args.out,
    )


def cmd_party_release_keys(args) -> int:
    return _release_keys_files(
        args.report, args.chain, args.ca, args.tcb, args.expected, args.clean_room, args.out
    )


def cmd_decrypt_model(args) -> int:
    run_dir = Path(args.run)
    manifest = JobManifest.from_dict(_read_json(run_dir / "manifest.json"))
    party_certs = {
        name: Certificate.from_dict(d) for name, d in _read_json(run_dir / "parties.json").items()
    }
    nonces: dict[str, bytes] = {}
    from . import crypto

    for name, entry in _read_json(run_dir / "nonces.json").items():
        cert = party_certs[name]
        nonce = bytes.fromhex(entry["nonce"])
        if entry["fingerprint"] != cert.fingerprint:
            print(f"nonce file names the wrong certificate for {name}", file=sys.stderr)
            return EXIT_REJECTED
        if not crypto.verify(cert.subject_public_key, bytes.fromhex(entry["signature"]), nonce):
            print(f"nonce signature check failed for {name}", file=sys.stderr)
            return EXIT_REJECTED
        nonces[cert.fingerprint] = nonce
    _, _, _, frames = decode_stream_file((run_dir / "output.stream").read_bytes())
    model = decrypt_model(manifest, list(frames), nonces)
    Path(args.out).write_bytes(model)
    print(f"recovered model: {len(model)} bytes -> {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# ccu inspect
# ---------------------------------------------------------------------------


def _describe(obj, indent: str = "") -> None:
    if isinstance(obj, dict) and "run_attributes_digest" in obj:
        print(f"{indent}attestation report")
        for key in (
            "manifest_measurement",
            "register_measurement",
            "bootloader_measurement",
            "epoch",
            "checkpoint_id",
            "run_attributes_digest",
        ):
            print(f"{indent}  {key}: {obj[key]}")
        print(f"{indent}  ccu_keyshare: {obj['ccu_keyshare']}")
        for fp in obj["party_fingerprints"]:
            print(f"{indent}  party fingerprint: {fp}")
        print(f"{indent}  signature: {obj['signature'][:32]}…")
    elif isinstance(obj, dict) and "subject_public_key" in obj:
        cert = Certificate.from_dict(obj)
        print(f"{indent}certificate issued by {cert.issuer_id}  fingerprint {cert.fingerprint}")
        print(f"{indent}  subject key: {obj['subject_public_key']}")
        for key, value in sorted(cert.extensions.items()):
            print(f"{indent}  {key}: {value}")
    elif isinstance(obj, dict) and "new_measurement" in obj:
        print(f"{indent}TCB update certificate for {obj['component']}")
        print(f"{indent}  {obj['old_measurement']} -> {obj['new_measurement']}")
    elif isinstance(obj, dict) and "cik_ca" in obj:
        print(f"{indent}certificate-authority roots")
        for key in ("cik_ca", "pik_ca", "firmware_ca"):
            print(f"{indent}  {key}: {obj[key]}")
        print(f"{indent}  revoked certificates: {len(obj.get('revoked_certs', []))}")
        print(f"{indent}  revoked TCB versions: {len(obj.get('revoked_tcb', []))}")
    elif isinstance(obj, dict):
        for name, value in sorted(obj.items()):
            print(f"{indent}{name}:")
            _describe(value, indent + "  ")
    elif isinstance(obj, list):
        for value in obj:
            _describe(value, indent)
    else:
        print(f"{indent}{obj}")


def cmd_ccu_inspect(args) -> int:
    for file in args.files:
        print(f"== {file}")
        _describe(_read_json(Path(file)))
    return EXIT_OK


# ---------------------------------------------------------------------------
# pki demos
# ---------------------------------------------------------------------------


def _write_deployment(out: Path, deployment) -> None:
    _write_json(out / "chain.json", {k: c.to_dict() for k, c in deployment.device_chain.items()})
    _write_json(out / "ca.json", deployment.ca_public())
    _write_json(out / "tcb.json", [c.to_dict() for c in deployment.tcb_certs()])


def cmd_pki_issue(args) -> int:
    deployment = make_deployment(seed=args.seed)
    out = Path(args.out)
    _write_deployment(out, deployment)
    chain = deployment.device_chain
    print(f"provisioned device {deployment.flash.device_serial}")
    for name in ("cik", "pik", "ak", "ca_cik"):
        print(f"  {name}: fingerprint {chain[name].fingerprint}")
    print(f"certificates archived in {out}")
    return EXIT_OK


def cmd_pki_tcb_update(args) -> int:
    deployment = make_deployment(seed=args.seed)
    old_pik = deployment.device_chain["pik"].fingerprint
    updated = update_firmware(deployment, args.revision, revoke_old=args.revoke_old)
    out = Path(args.out)
    _write_deployment(out, updated)
    cert = updated.tcb_certs()[-1]
    _write_json(out / "update.json", cert.to_dict())
    print(f"firmware update {cert.old_measurement[:16]}… -> {cert.new_measurement[:16]}…")
    print(f"  platform cert rotated: {old_pik[:16]}… -> "
          f"{updated.device_chain['pik'].fingerprint[:16]}…")
    print(f"  card identity kept:    {updated.device_chain['cik'].fingerprint[:16]}…")
    if args.revoke_old:
        print("  previous bootloader version revoked")
    print(f"artifacts in {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument wiring
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="itx",
        description="offline confidential-job toolchain for the simulated accelerator stack",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("compile", help="compile a job description into a build directory")
    p.add_argument("--job", required=True, help="job description JSON file")
    p.add_argument("--out", required=True, help="build directory to create")
    p.add_argument("--ipu-id", type=int, default=0)
    p.add_argument("--firmware-revision", default="1",
                   help="tile bootloader revision the manifest pins")
    p.set_defaults(func=cmd_compile)

    for name, handler, needs_data in (
        ("package-model", cmd_package_model, False),
        ("package-data", cmd_package_data, True),
    ):
        p = sub.add_parser(name, help=f"{name.replace('-', ' ')} inside a clean room")
        p.add_argument("--build", required=True, help="build directory from `itx compile`")
        p.add_argument("--party", required=True, help="party name (must match the manifest)")
        p.add_argument("--data", action="append", metavar="SID=FILE",
                       required=needs_data, help="plaintext for an owned data stream")
        p.add_argument("--package", required=True, help="output package directory (shippable)")
        p.add_argument("--clean-room", required=True,
                       help="output clean-room directory (stays with the party)")
        p.set_defaults(func=handler)

    p = sub.add_parser("run", help="execute a job on a freshly provisioned simulated device")
    p.add_argument("--build", required=True)
    p.add_argument("--package", action="append", required=True,
                   help="party package directory (repeat per party)")
    p.add_argument("--clean-room", action="append", required=True,
                   help="party clean-room directory (repeat per party)")
    p.add_argument("--out", required=True, help="run directory for archived artifacts")
    p.add_argument("--seed", type=int, default=0, help="deployment seed")
    p.add_argument("--adversary", help=f"JSON list of actions; known: {', '.join(sorted(ACTIONS))}")
    p.add_argument("--halt-after", type=int,
                   help="halt after this many checkpoint saves (demonstrates interruption)")
    p.add_argument("--resume", metavar="EPOCH,CKPT",
                   help="halt at checkpoint (EPOCH,CKPT), reset the device, and resume")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("verify", help="re-verify a run directory's attestation evidence")
    p.add_argument("--run", required=True)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("release-keys", help="wrap a party's keys for a run's accepted report")
    p.add_argument("--run", required=True)
    p.add_argument("--clean-room", required=True)
    p.add_argument("--out", required=True, help="file for the wrapped key package")
    p.set_defaults(func=cmd_release_keys)

    p = sub.add_parser("decrypt-model", help="recover the model from a completed run")
    p.add_argument("--run", required=True)
    p.add_argument("--out", required=True, help="file for the recovered plaintext model")
    p.set_defaults(func=cmd_decrypt_model)

    ccu = sub.add_parser("ccu", help="control-unit artifact utilities").add_subparsers(
        dest="ccu_command", required=True
    )
    p = ccu.add_parser("inspect", help="pretty-print report/certificate JSON files")
    p.add_argument("files", nargs="+")
    p.set_defaults(func=cmd_ccu_inspect)

    pki = sub.add_parser("pki", help="manufacturer PKI demonstrations").add_subparsers(
        dest="pki_command", required=True
    )
    p = pki.add_parser("issue", help="provision a device and archive its certificates")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pki_issue)
    p = pki.add_parser("tcb-update", help="ship a new bootloader and archive the update cert")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--revision", default="2")
    p.add_argument("--revoke-old", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pki_tcb_update)

    party = sub.add_parser("party", help="file-level party-side operations").add_subparsers(
        dest="party_command", required=True
    )
    p = party.add_parser("verify", help="verify attestation evidence from files")
    for flag in ("--report", "--chain", "--ca", "--tcb", "--expected"):
        p.add_argument(flag, required=True)
    p.set_defaults(func=cmd_party_verify)
    p = party.add_parser("release-keys", help="wrap keys after verifying evidence from files")
    for flag in ("--report", "--chain", "--ca", "--tcb", "--expected", "--clean-room", "--out"):
        p.add_argument(flag, required=True)
    p.set_defaults(func=cmd_party_release_keys)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ItxError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_REJECTED
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_REJECTED


if __name__ == "__main__":
    sys.exit(main())
