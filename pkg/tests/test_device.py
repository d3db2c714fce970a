"""Device model: host access gates, tile programs, resets, ring buffer."""

import random

import pytest

from itx.device import (
    BOOT_RESERVED,
    ComputePhase,
    DeviceConfig,
    IpuDevice,
    LoadPhase,
    MODE_NORMAL,
    MODE_TRUSTED,
    OP_AXPY,
    OP_SGD_STEP,
    OP_SUM,
    RingBuffer,
    StorePhase,
    SyncPhase,
    TileProgram,
    trusted_registers_digest,
)
from itx.errors import AccessDenied, ImageTooLarge, IndexOutOfRange, InvalidPhase


def device() -> IpuDevice:
    return IpuDevice(ipu_id=0, config=DeviceConfig())


# ---------------------------------------------------------------------------
# host access control
# ---------------------------------------------------------------------------


class TestHostAccess:
    def test_normal_mode_is_open(self):
        dev = device()
        dev.host_write_register("hsp_period", 1234)
        assert dev.host_read_register("hsp_period") == 1234
        dev.host_write_tile(3, 0x2000, b"abc")
        assert dev.host_read_tile(3, 0x2000, 3) == b"abc"
        dev.host_autoload(b"boot image")

    def test_trusted_mode_denies_every_host_surface(self):
        dev = device()
        seen = []
        dev.on_security = seen.append
        dev.enter_trusted_mode()
        with pytest.raises(AccessDenied):
            dev.host_read_register("hsp_period")
        with pytest.raises(AccessDenied):
            dev.host_write_register("hsp_period", 0)
        with pytest.raises(AccessDenied):
            dev.host_read_tile(0, 0, 4)
        with pytest.raises(AccessDenied):
            dev.host_write_tile(0, 0, b"x")
        with pytest.raises(AccessDenied):
            dev.host_autoload(b"evil")
        # every denied attempt was reported upstream, none silently dropped
        assert len(seen) == 5
        assert all("trusted mode" in reason for reason in seen)

    def test_ring_buffer_stays_host_accessible(self):
        # The ring is host memory; trusted mode protects the device, not it.
        dev = device()
        dev.enter_trusted_mode()
        dev.ring_buffer.write(0x100, b"ciphertext")
        assert dev.ring_buffer.read(0x100, 10) == b"ciphertext"

    def test_host_reset_always_works_and_ends_trusted_mode(self):
        dev = device()
        dev.enter_trusted_mode()
        dev.host_reset("sbr")
        assert dev.mode == MODE_NORMAL
        assert dev.registers["trusted_mode"] == 0

    def test_unknown_register_rejected(self):
        with pytest.raises(KeyError):
            device().host_write_register("undocumented", 1)

    def test_trusted_mode_cannot_be_entered_twice(self):
        dev = device()
        dev.enter_trusted_mode()
        with pytest.raises(InvalidPhase):
            dev.enter_trusted_mode()


class TestRegisterMeasurement:
    def test_trusted_digest_matches_untampered_device(self):
        dev = device()
        dev.enter_trusted_mode()
        assert dev.registers_digest() == trusted_registers_digest()

    def test_pre_init_tamper_changes_the_digest(self):
        dev = device()
        dev.host_write_register("hsp_period", 7)  # normal mode: allowed
        dev.enter_trusted_mode()
        assert dev.registers_digest() != trusted_registers_digest()

    def test_digest_covers_every_register(self):
        dev = device()
        dev.enter_trusted_mode()
        baseline = dev.registers_digest()
        for name in dev.registers:
            saved = dev.registers[name]
            dev.registers[name] = saved + 1
            assert dev.registers_digest() != baseline, name
            dev.registers[name] = saved


# ---------------------------------------------------------------------------
# tile programs
# ---------------------------------------------------------------------------


class TestTileProgram:
    def test_round_trip(self):
        program = TileProgram(
            phases=(
                LoadPhase(stream_id=2, frames=3),
                ComputePhase(OP_AXPY, (0x100, 16, 0x200, 0x300, 48)),
                SyncPhase(5),
                ComputePhase(OP_SUM, (0x100, 0x200, 24)),
                StorePhase(stream_id=6, frames=1),
                ComputePhase(OP_SGD_STEP, (1, 16, 0x100, 0x200, 12)),
            )
        )
        assert TileProgram.unpack(program.pack()) == program

    def test_random_round_trips(self):
        rng = random.Random(11)
        ops = (OP_SUM, OP_AXPY, OP_SGD_STEP)
        for _ in range(100):
            phases = []
            for _ in range(rng.randrange(1, 12)):
                kind = rng.randrange(4)
                if kind == 0:
                    phases.append(LoadPhase(rng.randrange(1, 100), rng.randrange(1, 50)))
                elif kind == 1:
                    phases.append(StorePhase(rng.randrange(1, 100), rng.randrange(1, 50)))
                elif kind == 2:
                    op = rng.choice(ops)
                    if op == OP_SUM:
                        args = tuple(rng.randrange(0, 1 << 12) for _ in range(3))
                    else:
                        args = (rng.randrange(1, 9), rng.randrange(1, 64),
                                rng.randrange(0, 1 << 12), rng.randrange(0, 1 << 12),
                                rng.randrange(1, 256))
                    phases.append(ComputePhase(op, args))
                else:
                    phases.append(SyncPhase(rng.randrange(0, 20)))
            program = TileProgram(tuple(phases))
            assert TileProgram.unpack(program.pack()) == program

    def test_malformed_blobs_rejected(self):
        good = TileProgram((SyncPhase(1),)).pack()
        with pytest.raises(ValueError):
            TileProgram.unpack(b"XX" + good[2:])  # wrong magic
        with pytest.raises(ValueError):
            TileProgram.unpack(good + b"\x00")  # trailing bytes
        bad_op = bytearray(TileProgram((ComputePhase(OP_SUM, (0, 0, 0)),)).pack())
        bad_op[6] = 99  # the opcode byte: magic(3) + count(2) + kind(1)
        with pytest.raises(ValueError):
            TileProgram.unpack(bytes(bad_op))

    def test_zero_step_denominator_rejected(self):
        blob = TileProgram((ComputePhase(OP_SGD_STEP, (1, 1, 0, 0, 4)),)).pack()
        # args start after magic(3)+count(2)+kind(1)+op(1)+argc(1); the
        # denominator is the second 4-byte argument
        poisoned = blob[:12] + (0).to_bytes(4, "little", signed=True) + blob[16:]
        with pytest.raises(ValueError, match="denominator"):
            TileProgram.unpack(poisoned)


# ---------------------------------------------------------------------------
# memory safety and resets
# ---------------------------------------------------------------------------


class TestMemoryAndReset:
    def test_ring_buffer_bounds(self):
        ring = RingBuffer(0x1000)
        ring.write(0xFF0, b"0123456789abcdef")
        with pytest.raises(IndexOutOfRange):
            ring.write(0xFF8, b"0123456789abcdef")
        with pytest.raises(IndexOutOfRange):
            ring.read(0xFFF, 2)

    def test_autoload_image_size_limit(self):
        dev = device()
        dev.autoload(b"\xaa" * BOOT_RESERVED)
        with pytest.raises(ImageTooLarge):
            dev.autoload(b"\xaa" * (BOOT_RESERVED + 1))

    def test_scrub_zeroizes_every_tile(self):
        dev = device()
        for tile in dev.tiles:
            tile.memory[100:108] = b"secret!!"
        dev.scrub()
        assert all(not any(t.memory) for t in dev.tiles)

    def test_reset_scrubs_and_clears_engines(self):
        dev = device()
        dev.host_write_tile(0, 0x3000, b"leftover")
        dev.enter_trusted_mode()
        dev.reset("sbr")
        assert dev.mode == MODE_NORMAL
        assert not any(dev.tiles[0].memory)
        assert dev.egress.registers is None and dev.ingress.registers is None
        with pytest.raises(ValueError):
            dev.reset("warm")  # only the documented reset flavors exist

    def test_reset_notifies_attached_control_unit(self):
        dev = device()
        calls = []
        dev.on_reset = lambda: calls.append(True)
        dev.reset("newmanry")
        assert calls == [True]
