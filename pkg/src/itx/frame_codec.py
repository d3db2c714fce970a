"""Frame-based AES-256-GCM protocol for confidential DMA streams.

A stream is a sequence of fixed-size frames.  Every frame is independently
encrypted and authenticated:

    [ 16-byte IV block | ciphertext (16-byte multiple) | 16-byte tag ]

The IV block carries a 12-byte structured stream IV followed by four zero
bytes (the counter area consumed by the hardware pipeline).  Frame sizes are
multiples of 128 bytes up to 1024 bytes, so every frame holds at least one
ciphertext block.  No associated data is ever used; all context that needs
authenticating is packed into the IV itself, which GCM binds to the tag.

The IV layout (big-endian bit widths 8/16/8/16/8/8/32) encodes stream type,
stream id, device and tile coordinates, epoch/checkpoint counters, and the
frame index.  Fields that do not apply to a stream type must be zero, which
keeps IVs unique across every stream a key can serve.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from enum import IntEnum
from typing import Iterable

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from .errors import (
    AuthenticationFailure,
    InvalidFrame,
    InvalidFrameSize,
    InvalidIvField,
    InvalidLength,
    InvalidPayload,
    IvSequenceViolation,
)

FRAME_ALIGN = 128
MAX_FRAME_BYTES = 1024
BLOCK_BYTES = 16
IV_BYTES = 12
IV_BLOCK_BYTES = 16
TAG_BYTES = 16
FRAME_OVERHEAD = IV_BLOCK_BYTES + TAG_BYTES
KEY_BYTES = 32

_IV_STRUCT = struct.Struct(">BHBHBBI")


class StreamType(IntEnum):
    CODE = 0
    DATA = 1
    CHECKPOINT = 2
    OUTPUT = 3


# Fields that must be zero for each stream type.  CODE is bound to a tile on
# a device; DATA and OUTPUT are position-in-stream only; CHECKPOINT is bound
# to tile, epoch, and checkpoint counters.
_ZERO_FIELDS = {
    StreamType.CODE: ("stream_id", "epoch", "checkpoint_id"),
    StreamType.DATA: ("ipu_id", "tile_id", "epoch", "checkpoint_id"),
    StreamType.OUTPUT: ("ipu_id", "tile_id", "epoch", "checkpoint_id"),
    StreamType.CHECKPOINT: ("stream_id",),
}

_FIELD_LIMITS = {
    "stream_id": 0xFFFF,
    "ipu_id": 0xFF,
    "tile_id": 0xFFFF,
    "epoch": 0xFF,
    "checkpoint_id": 0xFF,
    "frame_index": 0xFFFFFFFF,
}


@dataclass(frozen=True)
class StreamIV:
    """Structured 12-byte IV; also used (with index 0) as a stream template."""

    stream_type: StreamType
    stream_id: int = 0
    ipu_id: int = 0
    tile_id: int = 0
    epoch: int = 0
    checkpoint_id: int = 0
    frame_index: int = 0

    def validate(self) -> "StreamIV":
        try:
            stype = StreamType(self.stream_type)
        except ValueError:
            raise InvalidIvField(f"unknown stream type {self.stream_type!r}")
        for name, limit in _FIELD_LIMITS.items():
            value = getattr(self, name)
            if not 0 <= value <= limit:
                raise InvalidIvField(f"{name}={value} out of range")
        for name in _ZERO_FIELDS[stype]:
            if getattr(self, name) != 0:
                raise InvalidIvField(f"{name} must be zero for {stype.name} streams")
        return self

    def to_bytes(self) -> bytes:
        self.validate()
        return _IV_STRUCT.pack(
            int(self.stream_type),
            self.stream_id,
            self.ipu_id,
            self.tile_id,
            self.epoch,
            self.checkpoint_id,
            self.frame_index,
        )

    @classmethod
    def from_bytes(cls, raw: bytes) -> "StreamIV":
        if len(raw) != IV_BYTES:
            raise InvalidIvField(f"IV must be {IV_BYTES} bytes, got {len(raw)}")
        stype, sid, ipu, tile, epoch, ckpt, index = _IV_STRUCT.unpack(raw)
        return cls(StreamType(stype), sid, ipu, tile, epoch, ckpt, index).validate()

    def iv_block(self) -> bytes:
        """16-byte leading frame block: IV followed by the zero counter area."""
        return self.to_bytes() + b"\x00\x00\x00\x00"


def compose_iv(template: StreamIV, frame_index: int) -> StreamIV:
    """Position ``template`` at ``frame_index`` within its stream."""
    iv = replace(template, frame_index=frame_index)
    return iv.validate()


@dataclass(frozen=True)
class StreamKey:
    """A 256-bit stream key together with the stream it is scoped to."""

    key: bytes
    binding: StreamIV

    def __post_init__(self) -> None:
        if len(self.key) != KEY_BYTES:
            raise InvalidIvField(f"stream key must be {KEY_BYTES} bytes")
        self.binding.validate()

    @classmethod
    def generate(cls, binding: StreamIV) -> "StreamKey":
        import os

        return cls(os.urandom(KEY_BYTES), binding)


# ---------------------------------------------------------------------------
# frames
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Frame:
    iv_block: bytes
    ciphertext: bytes
    tag: bytes

    @property
    def stream_iv(self) -> StreamIV:
        return StreamIV.from_bytes(self.iv_block[:IV_BYTES])

    @property
    def total_size(self) -> int:
        return len(self.iv_block) + len(self.ciphertext) + len(self.tag)

    def to_bytes(self) -> bytes:
        return self.iv_block + self.ciphertext + self.tag

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Frame":
        """Parse the wire form.  The IV bytes are carried opaquely; callers
        interpret them (via ``stream_iv``) only after authentication."""
        _check_frame_size(len(raw))
        iv_block = raw[:IV_BLOCK_BYTES]
        if iv_block[IV_BYTES:] != b"\x00\x00\x00\x00":
            raise InvalidFrame("IV block counter area must be zero")
        return cls(iv_block, raw[IV_BLOCK_BYTES:-TAG_BYTES], raw[-TAG_BYTES:])


def _check_frame_size(total: int) -> None:
    if total < FRAME_ALIGN or total % FRAME_ALIGN or total > MAX_FRAME_BYTES:
        raise InvalidFrameSize(
            f"frame size {total} must be a multiple of {FRAME_ALIGN} in "
            f"[{FRAME_ALIGN}, {MAX_FRAME_BYTES}]"
        )


def payload_capacity(frame_total_size: int) -> int:
    _check_frame_size(frame_total_size)
    return frame_total_size - FRAME_OVERHEAD


def partition(plaintext: bytes, frame_total_size: int) -> list[bytes]:
    """Split ``plaintext`` into frame payloads, zero-padding the final one."""
    capacity = payload_capacity(frame_total_size)
    if not plaintext:
        raise InvalidPayload("cannot partition an empty stream")
    chunks = [plaintext[i : i + capacity] for i in range(0, len(plaintext), capacity)]
    last = chunks[-1]
    if len(last) < capacity:
        chunks[-1] = last + b"\x00" * (capacity - len(last))
    return chunks


def encrypt_frame(key: StreamKey | bytes, iv: StreamIV, payload: bytes) -> Frame:
    key_bytes = key.key if isinstance(key, StreamKey) else key
    if len(key_bytes) != KEY_BYTES:
        raise InvalidPayload(f"key must be {KEY_BYTES} bytes")
    if not payload or len(payload) % BLOCK_BYTES:
        raise InvalidPayload("payload must be a non-empty multiple of 16 bytes")
    if len(payload) > MAX_FRAME_BYTES - FRAME_OVERHEAD:
        raise InvalidPayload(f"payload exceeds {MAX_FRAME_BYTES - FRAME_OVERHEAD} bytes")
    iv_bytes = iv.to_bytes()
    sealed = AESGCM(key_bytes).encrypt(iv_bytes, payload, None)
    return Frame(iv.iv_block(), sealed[:-TAG_BYTES], sealed[-TAG_BYTES:])


def decrypt_frame(key: StreamKey | bytes, frame: Frame) -> tuple[StreamIV, bytes]:
    key_bytes = key.key if isinstance(key, StreamKey) else key
    if len(frame.iv_block) != IV_BLOCK_BYTES or len(frame.tag) != TAG_BYTES:
        raise InvalidFrame("bad IV block or tag length")
    if frame.iv_block[IV_BYTES:] != b"\x00\x00\x00\x00":
        raise InvalidFrame("IV block counter area must be zero")
    if not frame.ciphertext or len(frame.ciphertext) % BLOCK_BYTES:
        raise InvalidFrame("ciphertext must be a non-empty multiple of 16 bytes")
    if frame.total_size > MAX_FRAME_BYTES:
        raise InvalidFrame(f"frame exceeds {MAX_FRAME_BYTES} bytes")
    iv_raw = frame.iv_block[:IV_BYTES]
    try:
        payload = AESGCM(key_bytes).decrypt(iv_raw, frame.ciphertext + frame.tag, None)
    except InvalidTag as exc:
        raise AuthenticationFailure("frame tag verification failed") from exc
    # only authenticated IVs are interpreted
    return frame.stream_iv, payload


# ---------------------------------------------------------------------------
# streams
# ---------------------------------------------------------------------------


def encrypt_stream(
    key: StreamKey | bytes,
    template: StreamIV,
    plaintext: bytes,
    frame_total_size: int,
) -> list[Frame]:
    payloads = partition(plaintext, frame_total_size)
    return [
        encrypt_frame(key, compose_iv(template, index), payload)
        for index, payload in enumerate(payloads)
    ]


def decrypt_stream(
    key: StreamKey | bytes,
    template: StreamIV,
    frames: Iterable[Frame],
    plaintext_length: int,
) -> bytes:
    """Decrypt a full stream, enforcing IV order and the declared length."""
    pieces: list[bytes] = []
    count = 0
    for index, frame in enumerate(frames):
        expected = compose_iv(template, index)
        if frame.iv_block[:IV_BYTES] != expected.to_bytes():
            raise IvSequenceViolation(index)
        _, payload = decrypt_frame(key, frame)
        pieces.append(payload)
        count += 1
    if count == 0:
        raise InvalidLength("stream has no frames")
    total = sum(len(p) for p in pieces)
    capacity = len(pieces[-1])
    if plaintext_length > total or total - plaintext_length >= capacity:
        raise InvalidLength(
            f"declared length {plaintext_length} inconsistent with {count} frames"
        )
    data = b"".join(pieces)
    return data[:plaintext_length]


# ---------------------------------------------------------------------------
# stream files
# ---------------------------------------------------------------------------

STREAM_MAGIC = b"ITXS"
STREAM_VERSION = 1
_STREAM_HEADER = struct.Struct(">4sB12sIQ")


def encode_stream_file(
    template: StreamIV,
    frame_total_size: int,
    plaintext_length: int,
    frames: Iterable[Frame],
) -> bytes:
    """Container format: header (template, frame size, length) then frames."""
    _check_frame_size(frame_total_size)
    body = b"".join(f.to_bytes() for f in frames)
    if len(body) % frame_total_size:
        raise InvalidFrame("frame sizes do not match the declared frame size")
    header = _STREAM_HEADER.pack(
        STREAM_MAGIC,
        STREAM_VERSION,
        compose_iv(template, 0).to_bytes(),
        frame_total_size,
        plaintext_length,
    )
    return header + body


def decode_stream_file(raw: bytes) -> tuple[StreamIV, int, int, list[Frame]]:
    if len(raw) < _STREAM_HEADER.size:
        raise InvalidFrame("stream file truncated")
    magic, version, template_raw, frame_total_size, plaintext_length = _STREAM_HEADER.unpack(
        raw[: _STREAM_HEADER.size]
    )
    if magic != STREAM_MAGIC:
        raise InvalidFrame("bad stream file magic")
    if version != STREAM_VERSION:
        raise InvalidFrame(f"unsupported stream file version {version}")
    template = StreamIV.from_bytes(template_raw)
    body = raw[_STREAM_HEADER.size :]
    _check_frame_size(frame_total_size)
    if len(body) % frame_total_size:
        raise InvalidFrame("stream file body is not a whole number of frames")
    frames = [
        Frame.from_bytes(body[i : i + frame_total_size])
        for i in range(0, len(body), frame_total_size)
    ]
    if not frames:
        raise InvalidFrame("stream file has no frames")
    return template, frame_total_size, plaintext_length, frames
