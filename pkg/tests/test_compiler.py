"""Job compilation: planner constraints, key rotation, and the binary hash chain."""

import hashlib

import pytest

from itx.compiler import CompiledJob, JobDescription, compile_job
from itx.device import DeviceConfig
from itx.errors import ScheduleInfeasible
from itx.manifest import CHECKPOINT, CODE, DATA, DIR_IN, DIR_OUT, OUTPUT
from itx.sxp import NUM_CONTEXTS


def sgd_job(**overrides) -> JobDescription:
    base = dict(
        kind="sgd",
        model_party="modelco",
        data_parties=("alpha", "beta"),
        steps=3,
        checkpoint_period=1,
    )
    base.update(overrides)
    return JobDescription(**base)


def sum_job(**overrides) -> JobDescription:
    base = dict(
        kind="sum_streams",
        model_party="modelco",
        data_parties=("alpha", "beta"),
        stream_count=17,
    )
    base.update(overrides)
    return JobDescription(**base)


BOOTLOADER = hashlib.sha256(b"tile bootloader").hexdigest()


# ---------------------------------------------------------------------------
# SGD planning
# ---------------------------------------------------------------------------


class TestSgdPlanning:
    def test_compiled_manifest_is_valid_and_complete(self):
        compiled = compile_job(sgd_job(), bootloader_measurement=BOOTLOADER, ipu_id=0)
        manifest = compiled.manifest
        manifest.validate()
        assert manifest.bootloader_measurement == BOOTLOADER
        assert len(compiled.programs) == 16 and len(compiled.binaries) == 16

        kinds = {sid: e.kind for sid, e in manifest.stream_table.items()}
        assert kinds == {1: CODE, 2: DATA, 3: DATA, 4: DATA, 5: CHECKPOINT, 6: OUTPUT}
        directions = {sid: e.direction for sid, e in manifest.stream_table.items()}
        assert directions == {
            1: DIR_IN, 2: DIR_IN, 3: DIR_IN, 4: DIR_IN, 5: DIR_OUT, 6: DIR_OUT,
        }
        assert compiled.key_streams == {
            "modelco": (1, 2),
            "alpha": (3,),
            "beta": (4,),
        }

    def test_compilation_is_deterministic(self):
        first = compile_job(sgd_job(), bootloader_measurement=BOOTLOADER)
        second = compile_job(sgd_job(), bootloader_measurement=BOOTLOADER)
        assert first.manifest.measurement() == second.manifest.measurement()
        assert first.binaries == second.binaries

    def test_binary_hash_chain_folds_in_tile_order(self):
        compiled = compile_job(sgd_job(), bootloader_measurement=BOOTLOADER, ipu_id=2)
        chain = b""
        for tile_id in sorted(compiled.binaries):
            chain = hashlib.sha256(
                chain + hashlib.sha256(compiled.binaries[tile_id]).digest()
            ).digest()
        assert compiled.binary_hash_chain() == chain.hex()
        assert compiled.manifest.binary_hashes == {2: chain.hex()}

        patched = CompiledJob(
            manifest=compiled.manifest,
            programs=compiled.programs,
            binaries={**compiled.binaries, 7: b"\x90" * 64},
        )
        assert patched.binary_hash_chain() != compiled.binary_hash_chain()

    def test_step_count_drives_the_sync_schedule(self):
        for steps in (1, 2, 5):
            compiled = compile_job(sgd_job(steps=steps), bootloader_measurement=BOOTLOADER)
            plans = compiled.manifest.sync_plans
            assert [p.sync_id for p in plans] == list(range(2 * steps + 3))

    def test_checkpoint_period_marks_the_right_barriers(self):
        compiled = compile_job(
            sgd_job(steps=4, checkpoint_period=2), bootloader_measurement=BOOTLOADER
        )
        checkpointed = [p.sync_id for p in compiled.manifest.sync_plans if p.checkpoint]
        assert checkpointed == [5, 9]  # before step 2, and at the gather barrier

        every_step = compile_job(
            sgd_job(steps=3, checkpoint_period=1), bootloader_measurement=BOOTLOADER
        )
        checkpointed = [p.sync_id for p in every_step.manifest.sync_plans if p.checkpoint]
        assert checkpointed == [3, 5, 7]

    def test_code_stream_covers_every_binary(self):
        compiled = compile_job(sgd_job(), bootloader_measurement=BOOTLOADER)
        entry = compiled.manifest.stream_table[1]
        assert entry.plaintext_length == sum(len(b) for b in compiled.binaries.values())
        layouts = {l.tile_id: l for l in compiled.manifest.tile_layouts}
        assert sorted(layouts) == list(range(16))
        for tile_id, binary in compiled.binaries.items():
            assert layouts[tile_id].binary_length == len(binary)

    def test_rejects_what_it_cannot_schedule(self):
        with pytest.raises(ScheduleInfeasible, match="16 tiles"):
            compile_job(sgd_job(), config=DeviceConfig(tile_count=8))
        with pytest.raises(ScheduleInfeasible, match="two data parties"):
            compile_job(sgd_job(data_parties=("alpha",)))
        with pytest.raises(ScheduleInfeasible, match="at least one step"):
            compile_job(sgd_job(steps=0))
        with pytest.raises(ScheduleInfeasible, match="unknown job kind"):
            compile_job(JobDescription(kind="matmul", model_party="m"))


# ---------------------------------------------------------------------------
# stream-reduction planning (key rotation)
# ---------------------------------------------------------------------------


class TestSumPlanning:
    def test_seventeen_streams_compile_with_rotation(self):
        compiled = compile_job(sum_job(stream_count=17), bootloader_measurement=BOOTLOADER)
        manifest = compiled.manifest
        manifest.validate()
        inputs = [e for e in manifest.stream_table.values() if e.direction == DIR_IN]
        assert len(inputs) == 18  # 17 data streams plus the code stream
        waves = 5  # ceil(17 / 4 exchange blocks)
        assert [p.sync_id for p in manifest.sync_plans] == list(range(waves + 3))
        assert manifest.checkpoint_plan is None and manifest.restore_plan is None

    def test_rotation_reuses_and_invalidates_context_slots(self):
        compiled = compile_job(sum_job(stream_count=17), bootloader_measurement=BOOTLOADER)
        plans = {p.sync_id: p for p in compiled.manifest.sync_plans}
        for wave in (3, 4):
            reused = set(plans[wave].kphysmap)
            previous = set(plans[wave - 3].kphysmap)
            assert reused <= previous
            # The slot is scrubbed in the same barrier that re-keys it.
            assert set(plans[wave].invalidate) == reused

    def test_contexts_stay_within_the_hardware_budget(self):
        compiled = compile_job(sum_job(stream_count=29), bootloader_measurement=BOOTLOADER)
        used = set()
        all_plans = [compiled.manifest.boot_plan, *compiled.manifest.sync_plans]
        for plan in all_plans:
            used.update(plan.kphysmap)
        assert used and max(used) < NUM_CONTEXTS

    def test_rotation_disabled_rejects_wide_jobs(self):
        with pytest.raises(ScheduleInfeasible, match="rotation is disabled"):
            compile_job(
                sum_job(stream_count=5, rotate_contexts=False),
                bootloader_measurement=BOOTLOADER,
            )
        narrow = compile_job(
            sum_job(stream_count=4, rotate_contexts=False),
            bootloader_measurement=BOOTLOADER,
        )
        narrow.manifest.validate()

    def test_degenerate_sizes(self):
        single = compile_job(sum_job(stream_count=1), bootloader_measurement=BOOTLOADER)
        single.manifest.validate()
        with pytest.raises(ScheduleInfeasible, match="at least one input"):
            compile_job(sum_job(stream_count=0))
