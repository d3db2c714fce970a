"""Job manifest: the compiler-emitted plan that the CCU attests and enforces.

The manifest binds together everything integrity-relevant about a job:
per-device binary hashes, the bootloader measurement, the stream table,
per-tile data layouts, and — for every synchronization point — the key
regions, register maps, and key loads the CCU must program.  Parties review
a manifest before releasing keys; its canonical digest is what the
attestation report commits to.

Routing note: all requests (reads and writes) are key-selected on the egress
path, so a sync plan carries a single ``ctxmap``/``kphysmap`` register image
shared by both directions.  Keys live in direction-specific context banks:
``ingress_loads`` key read traffic (completions carry the stamped index),
``egress_loads`` key write traffic.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Optional

from .encoding import canonical_bytes, digest_hex
from .errors import InvalidRegisterProgram
from .frame_codec import FRAME_ALIGN, MAX_FRAME_BYTES
from .sxp import NUM_CONTEXTS, NUM_REGIONS, AddressRegion, SxpRegisters

# stream kinds
CODE = "code"
DATA = "data"
CHECKPOINT = "checkpoint"
OUTPUT = "output"

DIR_IN = "in"
DIR_OUT = "out"


@dataclass(frozen=True)
class StreamTableEntry:
    stream_id: int
    party: str  # empty for streams keyed by the control unit itself
    direction: str
    kind: str
    plaintext_length: int
    frame_total_size: int
    region_base: int  # base tile-PCI address of the stream's buffer region

    def to_dict(self) -> dict[str, Any]:
        return {
            "stream_id": self.stream_id,
            "party": self.party,
            "direction": self.direction,
            "kind": self.kind,
            "plaintext_length": self.plaintext_length,
            "frame_total_size": self.frame_total_size,
            "region_base": self.region_base,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "StreamTableEntry":
        return cls(**d)


@dataclass(frozen=True)
class BindingSpec:
    """How one tile walks one stream: global index of the k-th access is
    start_index + (k // block_len) * stride + (k % block_len)."""

    stream_id: int
    buf_off: int  # tile-memory destination/source offset
    start_index: int
    stride: int = 1
    block_len: int = 1
    total_frames: int = 0

    def frame_index(self, k: int) -> int:
        return self.start_index + (k // self.block_len) * self.stride + (k % self.block_len)

    def to_dict(self) -> dict[str, Any]:
        return {
            "stream_id": self.stream_id,
            "buf_off": self.buf_off,
            "start_index": self.start_index,
            "stride": self.stride,
            "block_len": self.block_len,
            "total_frames": self.total_frames,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "BindingSpec":
        return cls(**d)


@dataclass(frozen=True)
class TileLayout:
    tile_id: int
    code_offset: int  # byte offset of this tile's frames inside the code region
    code_frames: int
    binary_length: int
    bindings: tuple[BindingSpec, ...] = ()
    ckpt_buf_off: int = 0  # tile-memory range covered by checkpoints
    ckpt_len: int = 0

    def binding(self, stream_id: int) -> BindingSpec:
        for b in self.bindings:
            if b.stream_id == stream_id:
                return b
        raise KeyError(f"tile {self.tile_id} has no binding for stream {stream_id}")

    def to_dict(self) -> dict[str, Any]:
        return {
            "tile_id": self.tile_id,
            "code_offset": self.code_offset,
            "code_frames": self.code_frames,
            "binary_length": self.binary_length,
            "bindings": [b.to_dict() for b in self.bindings],
            "ckpt_buf_off": self.ckpt_buf_off,
            "ckpt_len": self.ckpt_len,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "TileLayout":
        d = dict(d)
        d["bindings"] = tuple(BindingSpec.from_dict(b) for b in d["bindings"])
        return cls(**d)


@dataclass(frozen=True)
class SyncPlan:
    """Register state and host actions for one synchronization point.

    ``frame_serial`` marks phases whose encrypted traffic is issued strictly
    one frame at a time under control-unit sequencing (bootstrap, checkpoint
    transfer); only such phases may map multiple exchange-block contexts to
    one key context.
    """

    sync_id: int
    regions: dict[int, tuple[int, int]] = field(default_factory=dict)
    stream_regions: dict[int, int] = field(default_factory=dict)
    stream_offsets: dict[int, int] = field(default_factory=dict)
    fills: tuple[int, ...] = ()  # stream ids whose window the host must (re)fill
    ctxmap: dict[int, int] = field(default_factory=dict)  # exchange-block ctx -> key ctx
    kphysmap: dict[int, int] = field(default_factory=dict)  # key ctx -> region id
    ingress_loads: tuple[tuple[int, int], ...] = ()  # (context, stream_id), read bank
    egress_loads: tuple[tuple[int, int], ...] = ()  # (context, stream_id), write bank
    invalidate: tuple[int, ...] = ()  # contexts rotated out before loading
    checkpoint: bool = False
    moves: tuple[tuple[int, int, int, int, int], ...] = ()  # src, src_off, dst, dst_off, len
    frame_serial: bool = False

    def registers(self) -> SxpRegisters:
        return SxpRegisters(
            kxbctxmap=dict(self.ctxmap),
            ksellimit={rid: AddressRegion(lo, hi) for rid, (lo, hi) in self.regions.items()},
            kphysmap=dict(self.kphysmap),
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "sync_id": self.sync_id,
            "regions": {str(k): list(v) for k, v in sorted(self.regions.items())},
            "stream_regions": {str(k): v for k, v in sorted(self.stream_regions.items())},
            "stream_offsets": {str(k): v for k, v in sorted(self.stream_offsets.items())},
            "fills": list(self.fills),
            "ctxmap": {str(k): v for k, v in sorted(self.ctxmap.items())},
            "kphysmap": {str(k): v for k, v in sorted(self.kphysmap.items())},
            "ingress_loads": [list(x) for x in self.ingress_loads],
            "egress_loads": [list(x) for x in self.egress_loads],
            "invalidate": list(self.invalidate),
            "checkpoint": self.checkpoint,
            "moves": [list(m) for m in self.moves],
            "frame_serial": self.frame_serial,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "SyncPlan":
        return cls(
            sync_id=d["sync_id"],
            regions={int(k): tuple(v) for k, v in d["regions"].items()},
            stream_regions={int(k): v for k, v in d["stream_regions"].items()},
            stream_offsets={int(k): v for k, v in d["stream_offsets"].items()},
            fills=tuple(d["fills"]),
            ctxmap={int(k): v for k, v in d["ctxmap"].items()},
            kphysmap={int(k): v for k, v in d["kphysmap"].items()},
            ingress_loads=tuple(tuple(x) for x in d["ingress_loads"]),
            egress_loads=tuple(tuple(x) for x in d["egress_loads"]),
            invalidate=tuple(d["invalidate"]),
            checkpoint=d["checkpoint"],
            moves=tuple(tuple(m) for m in d["moves"]),
            frame_serial=d["frame_serial"],
        )


@dataclass(frozen=True)
class JobManifest:
    ipu_id: int
    binary_hashes: dict[int, str]  # per device: hex digest of the chained tile binaries
    bootloader_measurement: str
    stream_table: dict[int, StreamTableEntry]
    tile_layouts: tuple[TileLayout, ...]
    boot_plan: SyncPlan  # registers/keys for the secure bootstrap phase
    sync_plans: tuple[SyncPlan, ...]  # id 0 applied before the first interval
    checkpoint_plan: Optional[SyncPlan]  # egress state for checkpoint saves
    restore_plan: Optional[SyncPlan]  # ingress state for checkpoint restore
    stream_assignment: dict[str, Any]  # {"inputs": {sid: party}, "model_receivers": [...]}
    device_config: dict[str, int]
    metadata_base: int  # cleartext address of per-tile checkpoint metadata
    metadata_slot: int = 256  # bytes reserved per tile for plaintext metadata

    def to_dict(self) -> dict[str, Any]:
        return {
            "ipu_id": self.ipu_id,
            "binary_hashes": {str(k): v for k, v in sorted(self.binary_hashes.items())},
            "bootloader_measurement": self.bootloader_measurement,
            "stream_table": {str(k): v.to_dict() for k, v in sorted(self.stream_table.items())},
            "tile_layouts": [t.to_dict() for t in self.tile_layouts],
            "boot_plan": self.boot_plan.to_dict(),
            "sync_plans": [p.to_dict() for p in self.sync_plans],
            "checkpoint_plan": (
                None if self.checkpoint_plan is None else self.checkpoint_plan.to_dict()
            ),
            "restore_plan": None if self.restore_plan is None else self.restore_plan.to_dict(),
            "stream_assignment": self.stream_assignment,
            "device_config": dict(sorted(self.device_config.items())),
            "metadata_base": self.metadata_base,
            "metadata_slot": self.metadata_slot,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "JobManifest":
        return cls(
            ipu_id=d["ipu_id"],
            binary_hashes={int(k): v for k, v in d["binary_hashes"].items()},
            bootloader_measurement=d["bootloader_measurement"],
            stream_table={
                int(k): StreamTableEntry.from_dict(v) for k, v in d["stream_table"].items()
            },
            tile_layouts=tuple(TileLayout.from_dict(t) for t in d["tile_layouts"]),
            boot_plan=SyncPlan.from_dict(d["boot_plan"]),
            sync_plans=tuple(SyncPlan.from_dict(p) for p in d["sync_plans"]),
            checkpoint_plan=(
                None if d["checkpoint_plan"] is None else SyncPlan.from_dict(d["checkpoint_plan"])
            ),
            restore_plan=(
                None if d["restore_plan"] is None else SyncPlan.from_dict(d["restore_plan"])
            ),
            stream_assignment=d["stream_assignment"],
            device_config=d["device_config"],
            metadata_base=d["metadata_base"],
            metadata_slot=d.get("metadata_slot", 256),
        )

    def canonical(self) -> bytes:
        return canonical_bytes(self.to_dict())

    def measurement(self) -> str:
        return digest_hex(self.canonical())

    def layout(self, tile_id: int) -> TileLayout:
        for t in self.tile_layouts:
            if t.tile_id == tile_id:
                return t
        raise KeyError(f"no layout for tile {tile_id}")

    def plan(self, sync_id: int) -> Optional[SyncPlan]:
        for p in self.sync_plans:
            if p.sync_id == sync_id:
                return p
        return None

    def streams_of_kind(self, kind: str) -> list[StreamTableEntry]:
        return [e for e in self.stream_table.values() if e.kind == kind]

    # -- validation ----------------------------------------------------------

    def validate(self) -> "JobManifest":
        for sid, entry in self.stream_table.items():
            if sid != entry.stream_id:
                raise InvalidRegisterProgram(f"stream table key {sid} != entry id")
            size = entry.frame_total_size
            if size % FRAME_ALIGN or not FRAME_ALIGN <= size <= MAX_FRAME_BYTES:
                raise InvalidRegisterProgram(f"stream {sid}: bad frame size {size}")
        plans = [self.boot_plan, *self.sync_plans]
        for extra in (self.checkpoint_plan, self.restore_plan):
            if extra is not None:
                plans.append(extra)
        for plan in plans:
            self._validate_plan(plan)
        return self

    def _validate_plan(self, plan: SyncPlan) -> None:
        where = f"sync point {plan.sync_id}"
        if len(plan.regions) > NUM_REGIONS:
            raise InvalidRegisterProgram(f"{where}: more than {NUM_REGIONS} regions")
        if 0 not in plan.regions:
            raise InvalidRegisterProgram(f"{where}: cleartext region 0 missing")
        plan.registers().validate()
        if len(set(plan.ctxmap.values())) > NUM_CONTEXTS:
            raise InvalidRegisterProgram(f"{where}: too many key contexts")
        if not plan.frame_serial and len(set(plan.ctxmap.values())) != len(plan.ctxmap):
            raise InvalidRegisterProgram(
                f"{where}: several exchange-block contexts share one key context "
                "outside a frame-serial phase"
            )
        for sid, rid in plan.stream_regions.items():
            if rid == 0:
                raise InvalidRegisterProgram(f"{where}: stream {sid} in cleartext region")
            if rid not in plan.regions:
                raise InvalidRegisterProgram(f"{where}: stream {sid} in unknown region {rid}")
            if sid not in self.stream_table:
                raise InvalidRegisterProgram(f"{where}: unknown stream {sid}")
        for ctx, sid in plan.ingress_loads + plan.egress_loads:
            if not 0 <= ctx < NUM_CONTEXTS:
                raise InvalidRegisterProgram(f"{where}: load context {ctx} out of range")
            if sid not in self.stream_table:
                raise InvalidRegisterProgram(f"{where}: load for unknown stream {sid}")
