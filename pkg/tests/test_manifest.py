"""Job manifest: structural limits, plan validation, canonical round trips."""

import dataclasses

import pytest

from itx.compiler import JobDescription, compile_job
from itx.errors import InvalidRegisterProgram
from itx.manifest import BindingSpec, JobManifest, SyncPlan
from itx.sxp import NUM_CONTEXTS, NUM_REGIONS


def sgd_manifest() -> JobManifest:
    job = JobDescription(kind="sgd", model_party="modelco", data_parties=("alpha", "beta"))
    return compile_job(job, bootloader_measurement="bl").manifest


def plan_with_regions(count: int) -> SyncPlan:
    # Region 0 is always present as the cleartext window.
    regions = {0: (0x0000, 0x1000)}
    for i in range(1, count):
        regions[i] = (0x1000 * i, 0x1000 * (i + 1))
    return SyncPlan(sync_id=99, regions=regions)


def with_extra_plan(manifest: JobManifest, plan: SyncPlan) -> JobManifest:
    return dataclasses.replace(manifest, sync_plans=(*manifest.sync_plans, plan))


class TestStructuralLimits:
    def test_compiled_manifest_validates(self):
        manifest = sgd_manifest()
        assert manifest.validate() is manifest

    def test_seventeen_regions_is_the_ceiling(self):
        manifest = sgd_manifest()
        with_extra_plan(manifest, plan_with_regions(NUM_REGIONS)).validate()
        with pytest.raises(InvalidRegisterProgram):
            with_extra_plan(manifest, plan_with_regions(NUM_REGIONS + 1)).validate()

    def test_cleartext_region_zero_is_mandatory(self):
        manifest = sgd_manifest()
        plan = plan_with_regions(3)
        no_zero = dataclasses.replace(
            plan, regions={k: v for k, v in plan.regions.items() if k != 0}
        )
        with pytest.raises(InvalidRegisterProgram, match="region 0"):
            with_extra_plan(manifest, no_zero).validate()

    def test_no_stream_may_live_in_region_zero(self):
        manifest = sgd_manifest()
        plan = dataclasses.replace(plan_with_regions(3), stream_regions={2: 0})
        with pytest.raises(InvalidRegisterProgram, match="cleartext region"):
            with_extra_plan(manifest, plan).validate()

    def test_key_context_indices_bounded(self):
        manifest = sgd_manifest()
        plan = dataclasses.replace(
            plan_with_regions(2), ctxmap={0: NUM_CONTEXTS}, kphysmap={NUM_CONTEXTS: 1}
        )
        with pytest.raises(InvalidRegisterProgram):
            with_extra_plan(manifest, plan).validate()

    def test_frame_sizes_must_be_128_multiples_up_to_1024(self):
        manifest = sgd_manifest()
        d = manifest.to_dict()
        for bad in (1000, 64, 1152, 0):
            mutated = JobManifest.from_dict(d)
            entry = dict(mutated.stream_table)
            first = next(iter(entry))
            entry[first] = dataclasses.replace(entry[first], frame_total_size=bad)
            mutated = dataclasses.replace(mutated, stream_table=entry)
            with pytest.raises(InvalidRegisterProgram, match="frame size"):
                mutated.validate()

    def test_shared_context_needs_frame_serial(self):
        manifest = sgd_manifest()
        plan = dataclasses.replace(
            plan_with_regions(2),
            ctxmap={0: 1, 1: 1},  # two exchange blocks, one key context
            kphysmap={1: 1},
            frame_serial=False,
        )
        with pytest.raises(InvalidRegisterProgram, match="frame-serial"):
            with_extra_plan(manifest, plan).validate()
        serial = dataclasses.replace(plan, frame_serial=True)
        with_extra_plan(manifest, serial).validate()

    def test_overlapping_regions_rejected(self):
        manifest = sgd_manifest()
        plan = SyncPlan(
            sync_id=99, regions={0: (0, 0x1000), 1: (0x800, 0x1800), 2: (0x1000, 0x2000)}
        )
        with pytest.raises(InvalidRegisterProgram, match="overlap"):
            with_extra_plan(manifest, plan).validate()


class TestBindings:
    def test_frame_index_arithmetic(self):
        spec = BindingSpec(
            stream_id=3, buf_off=0x100, start_index=6, stride=8, block_len=2, total_frames=48
        )
        # Blocks of two consecutive frames, strided per barrier window.
        assert [spec.frame_index(k) for k in range(6)] == [6, 7, 14, 15, 22, 23]

    def test_default_binding_is_contiguous(self):
        spec = BindingSpec(stream_id=1, buf_off=0, start_index=0)
        assert [spec.frame_index(k) for k in range(4)] == [0, 1, 2, 3]


class TestSerialization:
    def test_manifest_round_trip_preserves_measurement(self):
        manifest = sgd_manifest()
        clone = JobManifest.from_dict(manifest.to_dict())
        assert clone.measurement() == manifest.measurement()
        assert clone.canonical() == manifest.canonical()
        clone.validate()

    def test_sync_plan_round_trip(self):
        manifest = sgd_manifest()
        for plan in (manifest.boot_plan, *manifest.sync_plans):
            clone = SyncPlan.from_dict(plan.to_dict())
            assert clone == plan

    def test_any_field_change_moves_the_measurement(self):
        manifest = sgd_manifest()
        base = manifest.measurement()
        bumped = dataclasses.replace(manifest, metadata_base=manifest.metadata_base + 0x100)
        assert bumped.measurement() != base
        entry = dict(manifest.stream_table)
        sid = next(iter(entry))
        entry[sid] = dataclasses.replace(entry[sid], plaintext_length=entry[sid].plaintext_length + 4)
        assert dataclasses.replace(manifest, stream_table=entry).measurement() != base
