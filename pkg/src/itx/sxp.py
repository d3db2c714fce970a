"""Transaction-level simulator of the Secure Exchange Pipe (SXP).

The SXP sits between the on-chip exchange and the PCIe complex and applies
AES-256-GCM to DMA traffic one packet at a time.  Unlike the frame codec,
which seals whole frames with a library AEAD, this model reproduces the
hardware's *incremental* pipeline so that context state, key selection, and
mid-frame violations behave like the real engine:

* per-context state is exactly (AK, EK, IV, H): the hash subkey, the
  encrypted initial counter block, the running counter, and the partial GHASH;
* the first 16-byte block of a frame is consumed as the IV block;
* data blocks are encrypted/decrypted in counter mode while GHASH absorbs
  the ciphertext;
* the block arriving with the CC (frame-close) flag is the MAC slot: on
  egress the computed tag replaces it, on ingress it is compared with the
  computed tag.

Key selection is register-driven: ``kxbctxmap`` maps the source tile's
exchange-block context to a physical key context, ``kphysmap`` binds each
context to a key region, and ``ksellimit`` defines up to 17 disjoint address
regions of which region 0 always bypasses the engine in cleartext.

Counter-mode semantics follow the AES-GCM standard (initial counter block is
IV ‖ 1, first data block uses IV ‖ 2) so engine output interoperates with
conformant software implementations.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Optional

from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes

from .errors import (
    ContextBusy,
    FrameInterleavingViolation,
    IndexOutOfRange,
    InvalidRegisterProgram,
    KeyNotLoaded,
    SecurityException,
)

NUM_CONTEXTS = 16
NUM_REGIONS = 17
CLEARTEXT_REGION = 0
BLOCK_BYTES = 16

_R = 0xE1 << 120  # GHASH reduction polynomial, bit-reflected


# ---------------------------------------------------------------------------
# GHASH helpers
# ---------------------------------------------------------------------------


def _ghash_table(h: int) -> list[int]:
    """Per-key multiplication table: table[p] = H shifted for integer bit p."""
    table = [0] * 128
    v = h
    for i in range(128):
        table[127 - i] = v
        v = (v >> 1) ^ _R if v & 1 else v >> 1
    return table


def _ghash_mul(x: int, table: list[int]) -> int:
    z = 0
    while x:
        low = x & -x
        z ^= table[low.bit_length() - 1]
        x ^= low
    return z


# ---------------------------------------------------------------------------
# packets and registers
# ---------------------------------------------------------------------------


class PacketKind(Enum):
    READ_REQUEST = "read_request"
    READ_COMPLETION = "read_completion"
    WRITE_REQUEST = "write_request"


@dataclass(frozen=True)
class ExchangePacket:
    kind: PacketKind
    src_tile: int
    dst_tile: int
    address: int
    payload: bytes = b""
    aes: bool = False
    cc: bool = False
    key_index: Optional[int] = None
    read_length: int = 0
    request_id: Optional[int] = None

    def __post_init__(self) -> None:
        if self.kind is PacketKind.READ_REQUEST:
            if self.payload:
                raise ValueError("read requests carry no payload")
        elif len(self.payload) % BLOCK_BYTES:
            raise ValueError("packet payload must be a multiple of 16 bytes")


@dataclass(frozen=True)
class AddressRegion:
    start: int
    end: int  # exclusive

    def __post_init__(self) -> None:
        if self.end <= self.start:
            raise InvalidRegisterProgram(f"empty address region [{self.start:#x},{self.end:#x})")

    def contains(self, address: int) -> bool:
        return self.start <= address < self.end

    def overlaps(self, other: "AddressRegion") -> bool:
        return self.start < other.end and other.start < self.end


@dataclass(frozen=True)
class SxpRegisters:
    """The three key-selection register maps programmed by the CCU."""

    kxbctxmap: dict[int, int] = field(default_factory=dict)
    ksellimit: dict[int, AddressRegion] = field(default_factory=dict)
    kphysmap: dict[int, int] = field(default_factory=dict)

    def validate(self) -> "SxpRegisters":
        if len(self.ksellimit) > NUM_REGIONS:
            raise InvalidRegisterProgram(
                f"{len(self.ksellimit)} regions exceed the {NUM_REGIONS}-region limit"
            )
        regions = sorted(self.ksellimit.items())
        for rid, region in regions:
            if not 0 <= rid < NUM_REGIONS:
                raise InvalidRegisterProgram(f"region id {rid} out of range")
        for i, (rid_a, a) in enumerate(regions):
            for rid_b, b in regions[i + 1 :]:
                if a.overlaps(b):
                    raise InvalidRegisterProgram(f"regions {rid_a} and {rid_b} overlap")
        for ebc, ctx in self.kxbctxmap.items():
            if not 0 <= ctx < NUM_CONTEXTS:
                raise InvalidRegisterProgram(f"kxbctxmap[{ebc}]={ctx} out of range")
        seen_regions: set[int] = set()
        for ctx, rid in self.kphysmap.items():
            if not 0 <= ctx < NUM_CONTEXTS:
                raise InvalidRegisterProgram(f"kphysmap context {ctx} out of range")
            if rid == CLEARTEXT_REGION:
                raise InvalidRegisterProgram("region 0 is always cleartext, never keyed")
            if rid not in self.ksellimit:
                raise InvalidRegisterProgram(f"kphysmap names undefined region {rid}")
            if rid in seen_regions:
                raise InvalidRegisterProgram(f"kphysmap maps two contexts to region {rid}")
            seen_regions.add(rid)
        for ebc, ctx in self.kxbctxmap.items():
            if ctx not in self.kphysmap:
                raise InvalidRegisterProgram(f"context {ctx} has no key region")
        return self


CLEARTEXT = "cleartext"


# ---------------------------------------------------------------------------
# key contexts
# ---------------------------------------------------------------------------


class _KeyContext:
    """One of the 16 physical key slots with its in-flight GCM state."""

    __slots__ = (
        "index",
        "key",
        "active",
        "owner_tile",
        "_encrypt",
        "_table",
        "_ek",
        "_iv",
        "_counter",
        "_hash",
        "_ct_len",
    )

    def __init__(self, index: int) -> None:
        self.index = index
        self.key: Optional[bytes] = None
        self._encrypt: Optional[Callable[[bytes], bytes]] = None
        self._table: Optional[list[int]] = None
        self.zeroize()

    def zeroize(self) -> None:
        self.key = None
        self._encrypt = None
        self._table = None
        self._reset_frame()

    def _reset_frame(self) -> None:
        self.active = False
        self.owner_tile: Optional[int] = None
        self._ek = b""
        self._iv = b""
        self._counter = 0
        self._hash = 0
        self._ct_len = 0

    def load(self, key: bytes) -> None:
        if self.active:
            raise ContextBusy(f"context {self.index} has a frame in flight")
        if len(key) != 32:
            raise InvalidRegisterProgram("SXP keys are 256 bits")
        cipher = Cipher(algorithms.AES(key), modes.ECB()).encryptor()
        self.key = key
        self._encrypt = cipher.update
        # AK: hash subkey, the encryption of the zero block, precomputed at load.
        self._table = _ghash_table(int.from_bytes(self._encrypt(b"\x00" * BLOCK_BYTES), "big"))
        self._reset_frame()

    def invalidate(self) -> None:
        if self.active:
            raise ContextBusy(f"context {self.index} has a frame in flight")
        self.zeroize()

    # -- frame processing ---------------------------------------------------

    def begin_frame(self, iv_block: bytes, owner_tile: int) -> None:
        if self._encrypt is None:
            raise KeyNotLoaded(f"context {self.index} has no key")
        self.active = True
        self.owner_tile = owner_tile
        self._iv = iv_block[:12]
        # EK: encryption of the initial counter block IV ‖ 1, kept for the tag.
        self._ek = self._encrypt(self._iv + (1).to_bytes(4, "big"))
        self._counter = 2
        self._hash = 0
        self._ct_len = 0

    def _keystream(self) -> bytes:
        block = self._encrypt(self._iv + self._counter.to_bytes(4, "big"))
        self._counter += 1
        return block

    def _absorb(self, ciphertext_block: bytes) -> None:
        self._hash = _ghash_mul(
            self._hash ^ int.from_bytes(ciphertext_block, "big"), self._table
        )
        self._ct_len += len(ciphertext_block)

    def encrypt_block(self, plaintext_block: bytes) -> bytes:
        ct = bytes(a ^ b for a, b in zip(plaintext_block, self._keystream()))
        self._absorb(ct)
        return ct

    def decrypt_block(self, ciphertext_block: bytes) -> bytes:
        self._absorb(ciphertext_block)
        return bytes(a ^ b for a, b in zip(ciphertext_block, self._keystream()))

    def finish_frame(self) -> bytes:
        """Close the frame and return the authentication tag."""
        lengths = (0).to_bytes(8, "big") + (self._ct_len * 8).to_bytes(8, "big")
        s = _ghash_mul(self._hash ^ int.from_bytes(lengths, "big"), self._table)
        tag = bytes(a ^ b for a, b in zip(s.to_bytes(BLOCK_BYTES, "big"), self._ek))
        self._reset_frame()
        return tag


# ---------------------------------------------------------------------------
# pending read table (PCI-complex model)
# ---------------------------------------------------------------------------


@dataclass
class _PendingRead:
    src_tile: int
    key_index: Optional[int]
    aes: bool
    address: int
    packets_remaining: int


class PendingReadTable:
    """On-chip cache of (key_index, aes) for outstanding read requests.

    The PCIe complex stamps these fields onto read completions and sets the
    CC bit on the last completion of each request, so the ingress SXP can
    trust frame boundaries even though the host generates the completions.
    """

    def __init__(self, completion_payload: int = 64) -> None:
        if completion_payload % BLOCK_BYTES:
            raise ValueError("completion payload must be a block multiple")
        self.completion_payload = completion_payload
        self._entries: dict[int, _PendingRead] = {}
        self.created = 0
        self.retired = 0

    def note_request(self, pkt: ExchangePacket) -> None:
        if pkt.kind is not PacketKind.READ_REQUEST or pkt.request_id is None:
            raise ValueError("only identified read requests are tracked")
        packets = max(1, -(-pkt.read_length // self.completion_payload))
        self._entries[pkt.request_id] = _PendingRead(
            pkt.src_tile, pkt.key_index, pkt.aes, pkt.address, packets
        )
        self.created += 1

    def make_completions(self, request_id: int, data: bytes) -> list[ExchangePacket]:
        """Split host data into completion packets with trusted fields stamped."""
        entry = self._entries.get(request_id)
        if entry is None:
            raise SecurityException(f"completion for unknown read request {request_id}")
        step = self.completion_payload
        chunks = [data[i : i + step] for i in range(0, len(data), step)] or [b""]
        if len(chunks) != entry.packets_remaining:
            raise SecurityException(
                f"read {request_id}: host returned {len(chunks)} packets, "
                f"expected {entry.packets_remaining}"
            )
        packets = []
        for i, chunk in enumerate(chunks):
            last = i == len(chunks) - 1
            packets.append(
                ExchangePacket(
                    kind=PacketKind.READ_COMPLETION,
                    src_tile=entry.src_tile,
                    dst_tile=entry.src_tile,
                    address=entry.address + i * step,
                    payload=chunk,
                    aes=entry.aes,
                    cc=last,
                    key_index=entry.key_index,
                    request_id=request_id,
                )
            )
        del self._entries[request_id]
        self.retired += 1
        return packets

    @property
    def outstanding(self) -> int:
        return len(self._entries)


# ---------------------------------------------------------------------------
# the engine
# ---------------------------------------------------------------------------


class SxpEngine:
    """One SXP lane: a sequential state machine over exchange packets."""

    def __init__(
        self,
        name: str = "sxp",
        tiles_per_ebc: int = 4,
        trace: Optional[Callable[[dict], None]] = None,
    ) -> None:
        self.name = name
        self.tiles_per_ebc = tiles_per_ebc
        self.trace = trace
        self.registers: Optional[SxpRegisters] = None
        self.contexts = [_KeyContext(i) for i in range(NUM_CONTEXTS)]
        self.latched = False
        self.latch_reason: Optional[str] = None

    # -- configuration ------------------------------------------------------

    def program_registers(self, regs: SxpRegisters) -> None:
        for ctx in self.contexts:
            if ctx.active:
                raise ContextBusy("cannot reprogram registers mid-frame")
        self.registers = regs.validate()

    def load_key(self, ctx_index: int, key: bytes) -> None:
        self._context(ctx_index).load(key)

    def invalidate_key(self, ctx_index: int) -> None:
        self._context(ctx_index).invalidate()

    def invalidate_all_keys(self) -> None:
        for ctx in self.contexts:
            ctx.zeroize()

    def key_loaded(self, ctx_index: int) -> bool:
        return self._context(ctx_index).key is not None

    def reset(self) -> None:
        """Device reset: clears the latch, all key material, and registers."""
        self.invalidate_all_keys()
        self.registers = None
        self.latched = False
        self.latch_reason = None

    def _context(self, index: int) -> _KeyContext:
        if not 0 <= index < NUM_CONTEXTS:
            raise IndexOutOfRange(f"key context {index} outside 0..{NUM_CONTEXTS - 1}")
        return self.contexts[index]

    # -- key selection ------------------------------------------------------

    def ebc(self, src_tile: int) -> int:
        return src_tile // self.tiles_per_ebc

    def select_context(self, src_tile: int, address: int):
        """Map (tile, address) to the cleartext path or a physical context."""
        if self.registers is None:
            raise self._security_exception("packet before registers were programmed")
        regs = self.registers
        clear = regs.ksellimit.get(CLEARTEXT_REGION)
        if clear is not None and clear.contains(address):
            return CLEARTEXT
        ebc = self.ebc(src_tile)
        ctx = regs.kxbctxmap.get(ebc)
        if ctx is None:
            raise self._security_exception(
                f"tile {src_tile} (ebc {ebc}) has no key context mapping"
            )
        region_id = regs.kphysmap[ctx]
        if not regs.ksellimit[region_id].contains(address):
            raise self._security_exception(
                f"tile {src_tile} address {address:#x} outside region {region_id} "
                f"of context {ctx}"
            )
        return ctx

    def _security_exception(self, reason: str) -> SecurityException:
        self.latched = True
        self.latch_reason = reason
        self._trace({"event": "security_exception", "sxp": self.name, "reason": reason})
        return SecurityException(f"{self.name}: {reason}")

    def _trace(self, record: dict) -> None:
        if self.trace is not None:
            self.trace(record)

    def _trace_packet(self, direction: str, pkt: ExchangePacket) -> None:
        if self.trace is None:
            return
        self._trace(
            {
                "event": "pkt",
                "sxp": self.name,
                "dir": direction,
                "kind": pkt.kind.value,
                "src": pkt.src_tile,
                "dst": pkt.dst_tile,
                "addr": f"{pkt.address:#x}",
                "aes": int(pkt.aes),
                "cc": int(pkt.cc),
                "key_index": -1 if pkt.key_index is None else pkt.key_index,
                "digest": hashlib.sha256(pkt.payload).hexdigest()[:16],
            }
        )

    # -- egress (read requests / write requests) ----------------------------

    def process_egress(self, pkt: ExchangePacket) -> Optional[ExchangePacket]:
        if pkt.kind not in (PacketKind.READ_REQUEST, PacketKind.WRITE_REQUEST):
            raise InvalidRegisterProgram(f"egress cannot process {pkt.kind}")
        if self.latched and pkt.aes:
            self._trace({"event": "dropped", "sxp": self.name, "kind": pkt.kind.value})
            return None
        if not pkt.aes:
            self._trace_packet("egress", pkt)
            return pkt

        selection = self.select_context(pkt.src_tile, pkt.address)
        if selection == CLEARTEXT:
            raise self._security_exception(
                f"aes-flagged packet from tile {pkt.src_tile} targets the cleartext region"
            )

        if pkt.kind is PacketKind.READ_REQUEST:
            out = replace(pkt, key_index=selection)
            self._trace_packet("egress", out)
            return out

        ctx = self.contexts[selection]
        if ctx.key is None:
            raise KeyNotLoaded(f"context {selection} has no key")
        out_blocks = []
        view = memoryview(pkt.payload)
        n_blocks = len(view) // BLOCK_BYTES
        for i in range(n_blocks):
            block = bytes(view[i * BLOCK_BYTES : (i + 1) * BLOCK_BYTES])
            last_block = pkt.cc and i == n_blocks - 1
            if not ctx.active:
                if any(block[12:]):
                    raise self._security_exception(
                        f"context {selection}: nonzero counter area in the IV block"
                    )
                ctx.begin_frame(block, pkt.src_tile)
                if self.trace is not None:
                    self._trace(
                        {
                            "event": "frame_start",
                            "sxp": self.name,
                            "dir": "egress",
                            "key_index": selection,
                            "key_digest": hashlib.sha256(ctx.key).hexdigest()[:16],
                            "iv": block[:12].hex(),
                        }
                    )
                out_blocks.append(block)
                continue
            if ctx.owner_tile != pkt.src_tile:
                ctx_owner = ctx.owner_tile
                ctx._reset_frame()
                raise FrameInterleavingViolation(
                    f"tile {pkt.src_tile} intruded on context {selection} "
                    f"owned by tile {ctx_owner}"
                )
            if last_block:
                out_blocks.append(ctx.finish_frame())
            else:
                out_blocks.append(ctx.encrypt_block(block))
        out = replace(pkt, payload=b"".join(out_blocks), key_index=selection)
        self._trace_packet("egress", out)
        return out

    # -- ingress (read completions) ------------------------------------------

    def process_ingress(self, pkt: ExchangePacket) -> Optional[ExchangePacket]:
        if pkt.kind is not PacketKind.READ_COMPLETION:
            raise InvalidRegisterProgram(f"ingress cannot process {pkt.kind}")
        if self.latched and pkt.aes:
            self._trace({"event": "dropped", "sxp": self.name, "kind": pkt.kind.value})
            return None
        if not pkt.aes:
            self._trace_packet("ingress", pkt)
            return pkt
        if pkt.key_index is None:
            raise self._security_exception("aes completion without a key index")
        ctx = self._context(pkt.key_index)
        if ctx.key is None:
            raise KeyNotLoaded(f"context {pkt.key_index} has no key")

        out_blocks = []
        view = memoryview(pkt.payload)
        n_blocks = len(view) // BLOCK_BYTES
        for i in range(n_blocks):
            block = bytes(view[i * BLOCK_BYTES : (i + 1) * BLOCK_BYTES])
            last_block = pkt.cc and i == n_blocks - 1
            if not ctx.active:
                if last_block:
                    ctx._reset_frame()
                    raise self._security_exception(
                        f"context {pkt.key_index}: frame closed on its IV block"
                    )
                if any(block[12:]):
                    raise self._security_exception(
                        f"context {pkt.key_index}: nonzero counter area in the IV block"
                    )
                ctx.begin_frame(block, pkt.src_tile)
                if self.trace is not None:
                    self._trace(
                        {
                            "event": "frame_start",
                            "sxp": self.name,
                            "dir": "ingress",
                            "key_index": pkt.key_index,
                            "key_digest": hashlib.sha256(ctx.key).hexdigest()[:16],
                            "iv": block[:12].hex(),
                        }
                    )
                out_blocks.append(block)
                continue
            if last_block:
                tag = ctx.finish_frame()
                if tag != block:
                    raise self._security_exception(
                        f"context {pkt.key_index}: frame tag mismatch"
                    )
                out_blocks.append(tag)
            else:
                out_blocks.append(ctx.decrypt_block(block))
        out = replace(pkt, payload=b"".join(out_blocks))
        self._trace_packet("ingress", out)
        return out
