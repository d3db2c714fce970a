"""Self-contained AES-256-GCM implementation used as an independent oracle.

Deliberately shares no code with the package under test: AES is implemented
from the FIPS-197 tables and GCM from the bit-by-bit GF(2^128) multiply, so
agreement with the production paths (library AEAD in the frame codec, the
incremental engine in the exchange-pipe model) is meaningful evidence rather
than a tautology.  Performance is adequate for test corpora only.
"""

from __future__ import annotations

# ---------------------------------------------------------------------------
# AES-256 block cipher (encryption only; GCM never decrypts blocks)
# ---------------------------------------------------------------------------

_SBOX = [
    0x63, 0x7C, 0x77, 0x7B, 0xF2, 0x6B, 0x6F, 0xC5, 0x30, 0x01, 0x67, 0x2B,
    0xFE, 0xD7, 0xAB, 0x76, 0xCA, 0x82, 0xC9, 0x7D, 0xFA, 0x59, 0x47, 0xF0,
    0xAD, 0xD4, 0xA2, 0xAF, 0x9C, 0xA4, 0x72, 0xC0, 0xB7, 0xFD, 0x93, 0x26,
    0x36, 0x3F, 0xF7, 0xCC, 0x34, 0xA5, 0xE5, 0xF1, 0x71, 0xD8, 0x31, 0x15,
    0x04, 0xC7, 0x23, 0xC3, 0x18, 0x96, 0x05, 0x9A, 0x07, 0x12, 0x80, 0xE2,
    0xEB, 0x27, 0xB2, 0x75, 0x09, 0x83, 0x2C, 0x1A, 0x1B, 0x6E, 0x5A, 0xA0,
    0x52, 0x3B, 0xD6, 0xB3, 0x29, 0xE3, 0x2F, 0x84, 0x53, 0xD1, 0x00, 0xED,
    0x20, 0xFC, 0xB1, 0x5B, 0x6A, 0xCB, 0xBE, 0x39, 0x4A, 0x4C, 0x58, 0xCF,
    0xD0, 0xEF, 0xAA, 0xFB, 0x43, 0x4D, 0x33, 0x85, 0x45, 0xF9, 0x02, 0x7F,
    0x50, 0x3C, 0x9F, 0xA8, 0x51, 0xA3, 0x40, 0x8F, 0x92, 0x9D, 0x38, 0xF5,
    0xBC, 0xB6, 0xDA, 0x21, 0x10, 0xFF, 0xF3, 0xD2, 0xCD, 0x0C, 0x13, 0xEC,
    0x5F, 0x97, 0x44, 0x17, 0xC4, 0xA7, 0x7E, 0x3D, 0x64, 0x5D, 0x19, 0x73,
    0x60, 0x81, 0x4F, 0xDC, 0x22, 0x2A, 0x90, 0x88, 0x46, 0xEE, 0xB8, 0x14,
    0xDE, 0x5E, 0x0B, 0xDB, 0xE0, 0x32, 0x3A, 0x0A, 0x49, 0x06, 0x24, 0x5C,
    0xC2, 0xD3, 0xAC, 0x62, 0x91, 0x95, 0xE4, 0x79, 0xE7, 0xC8, 0x37, 0x6D,
    0x8D, 0xD5, 0x4E, 0xA9, 0x6C, 0x56, 0xF4, 0xEA, 0x65, 0x7A, 0xAE, 0x08,
    0xBA, 0x78, 0x25, 0x2E, 0x1C, 0xA6, 0xB4, 0xC6, 0xE8, 0xDD, 0x74, 0x1F,
    0x4B, 0xBD, 0x8B, 0x8A, 0x70, 0x3E, 0xB5, 0x66, 0x48, 0x03, 0xF6, 0x0E,
    0x61, 0x35, 0x57, 0xB9, 0x86, 0xC1, 0x1D, 0x9E, 0xE1, 0xF8, 0x98, 0x11,
    0x69, 0xD9, 0x8E, 0x94, 0x9B, 0x1E, 0x87, 0xE9, 0xCE, 0x55, 0x28, 0xDF,
    0x8C, 0xA1, 0x89, 0x0D, 0xBF, 0xE6, 0x42, 0x68, 0x41, 0x99, 0x2D, 0x0F,
    0xB0, 0x54, 0xBB, 0x16,
]

_RCON = [0x01, 0x02, 0x04, 0x08, 0x10, 0x20, 0x40, 0x80, 0x1B, 0x36, 0x6C, 0xD8]


def _xtime(a: int) -> int:
    a <<= 1
    return (a ^ 0x1B) & 0xFF if a & 0x100 else a


def _expand_key_256(key: bytes) -> list[list[int]]:
    words = [list(key[i : i + 4]) for i in range(0, 32, 4)]
    for i in range(8, 60):
        temp = list(words[i - 1])
        if i % 8 == 0:
            temp = temp[1:] + temp[:1]
            temp = [_SBOX[b] for b in temp]
            temp[0] ^= _RCON[i // 8 - 1]
        elif i % 8 == 4:
            temp = [_SBOX[b] for b in temp]
        words.append([a ^ b for a, b in zip(words[i - 8], temp)])
    return [sum(words[4 * r : 4 * r + 4], []) for r in range(15)]


class Aes256:
    def __init__(self, key: bytes) -> None:
        if len(key) != 32:
            raise ValueError("AES-256 key must be 32 bytes")
        self._round_keys = _expand_key_256(key)

    def encrypt_block(self, block: bytes) -> bytes:
        if len(block) != 16:
            raise ValueError("block must be 16 bytes")
        # flat state in input order: byte 4*c + r is row r, column c
        state = list(block)
        state = [b ^ k for b, k in zip(state, self._round_keys[0])]
        for rnd in range(1, 15):
            state = [_SBOX[b] for b in state]
            # ShiftRows on column-major byte order (row r, col c at 4*c + r)
            shifted = state[:]
            for r in range(1, 4):
                row = [state[4 * c + r] for c in range(4)]
                row = row[r:] + row[:r]
                for c in range(4):
                    shifted[4 * c + r] = row[c]
            state = shifted
            if rnd != 14:
                mixed = []
                for c in range(4):
                    col = state[4 * c : 4 * c + 4]
                    mixed.extend(
                        [
                            _xtime(col[0]) ^ _xtime(col[1]) ^ col[1] ^ col[2] ^ col[3],
                            col[0] ^ _xtime(col[1]) ^ _xtime(col[2]) ^ col[2] ^ col[3],
                            col[0] ^ col[1] ^ _xtime(col[2]) ^ _xtime(col[3]) ^ col[3],
                            _xtime(col[0]) ^ col[0] ^ col[1] ^ col[2] ^ _xtime(col[3]),
                        ]
                    )
                state = mixed
            state = [b ^ k for b, k in zip(state, self._round_keys[rnd])]
        return bytes(state)


# ---------------------------------------------------------------------------
# GCM over the block cipher
# ---------------------------------------------------------------------------


def _gf_mul(x: int, y: int) -> int:
    """Carry-less multiply in GF(2^128) with the GCM bit ordering."""
    r = 0xE1 << 120
    z, v = 0, x
    for i in range(128):
        if (y >> (127 - i)) & 1:
            z ^= v
        v = (v >> 1) ^ r if v & 1 else v >> 1
    return z


def _ghash(h: int, data: bytes) -> int:
    y = 0
    for i in range(0, len(data), 16):
        block = data[i : i + 16]
        block += b"\x00" * (16 - len(block))
        y = _gf_mul(y ^ int.from_bytes(block, "big"), h)
    return y


def _inc32(block: bytes) -> bytes:
    counter = (int.from_bytes(block[12:], "big") + 1) & 0xFFFFFFFF
    return block[:12] + counter.to_bytes(4, "big")


def gcm_encrypt(key: bytes, iv: bytes, plaintext: bytes, aad: bytes = b"") -> tuple[bytes, bytes]:
    """Return (ciphertext, tag) per the standard construction, 12-byte IV."""
    if len(iv) != 12:
        raise ValueError("oracle supports 96-bit IVs only")
    aes = Aes256(key)
    h = int.from_bytes(aes.encrypt_block(b"\x00" * 16), "big")
    j0 = iv + (1).to_bytes(4, "big")
    counter = j0
    ciphertext = bytearray()
    for i in range(0, len(plaintext), 16):
        counter = _inc32(counter)
        keystream = aes.encrypt_block(counter)
        chunk = plaintext[i : i + 16]
        ciphertext.extend(a ^ b for a, b in zip(chunk, keystream))
    lengths = (len(aad) * 8).to_bytes(8, "big") + (len(ciphertext) * 8).to_bytes(8, "big")
    s = _ghash(h, aad + b"\x00" * ((-len(aad)) % 16))
    s = _ghash_continue(h, s, bytes(ciphertext))
    s = _gf_mul(s ^ int.from_bytes(lengths, "big"), h)
    tag = bytes(a ^ b for a, b in zip(s.to_bytes(16, "big"), aes.encrypt_block(j0)))
    return bytes(ciphertext), tag


def _ghash_continue(h: int, y: int, data: bytes) -> int:
    for i in range(0, len(data), 16):
        block = data[i : i + 16]
        block += b"\x00" * (16 - len(block))
        y = _gf_mul(y ^ int.from_bytes(block, "big"), h)
    return y


def gcm_decrypt(key: bytes, iv: bytes, ciphertext: bytes, tag: bytes, aad: bytes = b"") -> bytes:
    aes = Aes256(key)
    h = int.from_bytes(aes.encrypt_block(b"\x00" * 16), "big")
    j0 = iv + (1).to_bytes(4, "big")
    s = _ghash(h, aad + b"\x00" * ((-len(aad)) % 16))
    s = _ghash_continue(h, s, ciphertext)
    lengths = (len(aad) * 8).to_bytes(8, "big") + (len(ciphertext) * 8).to_bytes(8, "big")
    s = _gf_mul(s ^ int.from_bytes(lengths, "big"), h)
    expected = bytes(a ^ b for a, b in zip(s.to_bytes(16, "big"), aes.encrypt_block(j0)))
    if expected != tag:
        raise ValueError("oracle: tag mismatch")
    counter = j0
    plaintext = bytearray()
    for i in range(0, len(ciphertext), 16):
        counter = _inc32(counter)
        keystream = aes.encrypt_block(counter)
        chunk = ciphertext[i : i + 16]
        plaintext.extend(a ^ b for a, b in zip(chunk, keystream))
    return bytes(plaintext)
