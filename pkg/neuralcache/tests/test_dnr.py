import numpy as np
import pytest

from hypothesis import given, strategies as st

from neuralcache.dnr import (FACE_EXCHANGE_PHASE, METADATA_PHASE, VALUE_RANGE_PHASE, Communicator, RankWorker,
                             boundary_slice_differences, boundary_slice_psnr, decode_to_grid, decode_volume,
                             default_worker_count, exchange_face_nodes, query, reduce_value_range,
                             train_distributed, train_distributed_async, volume_psnr)
from neuralcache.errors import (ConfigurationError, DistributedTrainingError, DomainError, ShapeMismatchError,
                                TrainingError)
from neuralcache.inr import InrModel, TrainConfig, desk_profile, train
from neuralcache.volume import (Face, GridVolume, ValueRange, decompose_domain, denormalize_coords,
                                local_value_range, normalize_values, sample_trilinear)
from neuralcache.tests.conftest import smooth_field


@pytest.fixture
def slab_volume():
    xs = np.arange(8, dtype=np.float64)
    zz, yy, xx = np.meshgrid(np.arange(4), np.arange(4), xs, indexing="ij")
    return GridVolume(dims=(8, 4, 4), values=(xx + 0.5 * yy + 0.25 * zz).astype(np.float32))


@pytest.fixture
def slab_dnr(slab_volume, tiny_encoding, tiny_mlp, quick_train):
    return train_distributed(slab_volume, (2, 1, 1), quick_train, tiny_encoding, tiny_mlp, ghost_width=1)


def test_communicator_counts_collectives_and_messages():
    comm = Communicator(3)
    assert comm.allreduce("sum", [1, 2, 3], sum) == [6, 6, 6]
    assert comm.gather("meta", ["a", "b", "c"]) == ["a", "b", "c"]
    comm.phase = "training"
    comm.endpoints[0].send(2, np.arange(4, dtype=np.float32))
    stats = comm.stats()
    assert stats["collective_phases"] == ["sum", "meta"]
    assert stats["collective_messages"] == 6
    assert (stats["p2p_messages"], stats["p2p_bytes"]) == (1, 16)
    assert stats["messages_by_phase"] == {"training": 1}
    np.testing.assert_array_equal(comm.endpoints[2].recv(0), [0, 1, 2, 3])
    with pytest.raises(DistributedTrainingError):
        comm.endpoints[2].recv(0)


def test_communicator_validation():
    with pytest.raises(ConfigurationError):
        Communicator(0)
    with pytest.raises(ConfigurationError):
        Communicator(2).gather("meta", ["only one"])
    with pytest.raises(ConfigurationError):
        Communicator(2).endpoints[0].send(5, np.zeros(1))


@given(st.lists(st.tuples(st.floats(-100, 100), st.floats(0, 50)), min_size=1, max_size=6), st.randoms())
def test_value_range_reduction_ignores_rank_order(spans, rnd):
    ranges = [ValueRange((lo,), (lo + width,)) for lo, width in spans]
    shuffled = list(ranges)
    rnd.shuffle(shuffled)
    assert reduce_value_range(shuffled) == reduce_value_range(ranges)
    assert reduce_value_range(ranges).vmin == (min(lo for lo, _ in spans),)


def test_training_uses_exactly_two_collectives(slab_dnr):
    stats = slab_dnr.comm_stats
    assert stats["collective_phases"] == [VALUE_RANGE_PHASE, METADATA_PHASE]
    assert stats["p2p_messages"] == 0
    assert stats["messages_by_phase"] == {}


def test_workers_only_hold_their_ghost_brick(slab_volume):
    parts = decompose_domain(slab_volume.dims, (2, 1, 1), 1)
    worker = RankWorker(parts[1], parts, slab_volume.subvolume(parts[1].ghost_box), slab_volume.mesh)
    assert worker.ghost.dims == (5, 4, 4)
    assert worker.halo_sources == {}
    np.testing.assert_array_equal(worker.node_values([[4, 0, 0], [3, 1, 2]]), [[4.0], [4.0]])
    with pytest.raises(DomainError):
        worker.node_values([[0, 0, 0]])
    with pytest.raises(ShapeMismatchError):
        RankWorker(parts[0], parts, slab_volume, slab_volume.mesh)


def test_zero_ghost_face_nodes_come_from_owner(slab_volume):
    parts = decompose_domain(slab_volume.dims, (2, 1, 1), 0)
    comm = Communicator(2)
    workers = [RankWorker(p, parts, slab_volume.subvolume(p.ghost_box), slab_volume.mesh, comm.endpoints[p.rank])
               for p in parts]
    assert workers[0].ghost.dims == (4, 4, 4)
    assert list(workers[0].halo_sources) == [1]
    assert workers[1].halo_sources == {}
    value_range = ValueRange((0.0,), (9.25,))
    with pytest.raises(DistributedTrainingError):
        workers[0].boundary_samples(value_range)

    exchange_face_nodes(workers, comm)
    assert comm.stats()["messages_by_phase"] == {FACE_EXCHANGE_PHASE: 1}
    assert comm.p2p_bytes == 16 * 8
    assert comm.phase is None
    samples = workers[0].boundary_samples(value_range)
    assert len(samples) == 16
    np.testing.assert_allclose(samples.coords[:, 0], 1.0)
    c = workers[0].boundary_coords
    np.testing.assert_allclose(samples.values[:, 0], (c[:, 0] + 0.5 * c[:, 1] + 0.25 * c[:, 2]) / 9.25)


def test_zero_ghost_training_keeps_two_collectives(slab_volume, tiny_encoding, tiny_mlp, quick_train):
    dnr = train_distributed(slab_volume, (2, 1, 1), quick_train, tiny_encoding, tiny_mlp, ghost_width=0)
    stats = dnr.comm_stats
    assert stats["collective_phases"] == [VALUE_RANGE_PHASE, METADATA_PHASE]
    assert stats["messages_by_phase"] == {FACE_EXCHANGE_PHASE: 1}
    assert dnr.rank_steps == [20, 20]
    assert query(dnr, [4.0, 1.0, 1.0]).shape == (1,)


def test_single_rank_matches_direct_training(tiny_encoding, tiny_mlp, quick_train):
    vol = smooth_field((6, 6, 6))
    dnr = train_distributed(vol, (1, 1, 1), quick_train, tiny_encoding, tiny_mlp, ghost_width=0)
    part = decompose_domain(vol.dims, (1, 1, 1), 0, vol.mesh)[0]
    normalized = normalize_values(vol, local_value_range(vol))
    model, report = train(lambda u: sample_trilinear(normalized, denormalize_coords(u, part)), None,
                          quick_train, tiny_encoding, tiny_mlp)
    assert dnr.rank_steps == [report.steps_taken]
    for ours, direct in zip(dnr.models[0].parameters, model.parameters):
        np.testing.assert_array_equal(ours, direct)


@pytest.mark.filterwarnings("ignore::neuralcache.errors.ConstantFieldWarning")
def test_constant_field_queries_return_the_constant(tiny_encoding, tiny_mlp):
    vol = GridVolume(dims=(4, 4, 4), values=np.full((4, 4, 4), 0.5, dtype=np.float32))
    cfg = TrainConfig(batch_uniform=64, batch_boundary=16, max_steps=10, psnr_check_interval=5,
                      check_resolution=3, target_psnr=45.0)
    dnr = train_distributed(vol, (1, 1, 1), cfg, tiny_encoding, tiny_mlp, ghost_width=0)
    assert dnr.value_range.vmin == dnr.value_range.vmax == (0.5,)
    np.testing.assert_array_equal(query(dnr, np.array([[0.0, 0.0, 0.0], [1.5, 2.0, 3.0]])), [[0.5], [0.5]])


def test_value_range_is_global(slab_dnr, slab_volume):
    assert slab_dnr.value_range.vmin == (0.0,)
    assert slab_dnr.value_range.vmax == (float(slab_volume.values.max()),)


def test_dnr_metadata(slab_dnr):
    assert slab_dnr.dims == (8, 4, 4)
    assert slab_dnr.rank_grid == (2, 1, 1)
    assert slab_dnr.channels == 1
    assert len(slab_dnr.rank_psnr) == 2
    assert slab_dnr.rank_steps == [20, 20]
    assert slab_dnr.budget_exhausted
    assert all(m.frozen for m in slab_dnr.models)


def test_shared_face_points_route_to_lower_rank(slab_dnr):
    owners = slab_dnr.owner_ranks(np.array([[3.0, 1.0, 1.0], [4.0, 1.0, 1.0], [4.5, 1.0, 1.0], [7.0, 3.0, 3.0]]))
    assert owners.tolist() == [0, 0, 1, 1]


def test_query_shapes_and_domain(slab_dnr):
    assert query(slab_dnr, [1.0, 1.0, 1.0]).shape == (1,)
    assert query(slab_dnr, np.zeros((5, 3))).shape == (5, 1)
    with pytest.raises(DomainError):
        query(slab_dnr, [8.5, 0.0, 0.0])


def test_query_on_face_uses_lower_rank_model(slab_dnr):
    p = np.array([[4.0, 2.0, 1.0]])
    part = slab_dnr.partitions[0]
    u = (p - np.asarray(part.world_bounds[0])) / (np.asarray(part.world_bounds[1]) - part.world_bounds[0])
    expected = slab_dnr.value_range.lo + slab_dnr.models[0](u) * slab_dnr.value_range.span
    np.testing.assert_allclose(query(slab_dnr, p), expected)


def test_decode_matches_node_queries(slab_dnr):
    grid = decode_volume(slab_dnr)
    assert grid.dims == (8, 4, 4)
    nodes = grid.node_coords()
    np.testing.assert_allclose(grid.values.reshape(-1, 1), query(slab_dnr, nodes), rtol=1e-6, atol=1e-9)
    part_grid = decode_to_grid(slab_dnr, 1)
    assert part_grid.dims == (4, 4, 4)
    np.testing.assert_array_equal(part_grid.values, grid.values[:, :, 4:])


def test_decode_is_deterministic(slab_dnr):
    np.testing.assert_array_equal(decode_volume(slab_dnr).values, decode_volume(slab_dnr).values)


def test_volume_psnr_is_finite(slab_dnr, slab_volume):
    assert 0.0 < volume_psnr(slab_dnr, slab_volume) <= 200.0


def test_boundary_slice_metrics(slab_dnr, slab_volume):
    diffs = boundary_slice_differences(slab_dnr, 0)
    assert diffs.shape == (16, 1)
    assert np.isfinite(boundary_slice_psnr(slab_dnr, slab_volume, 0))


def test_exterior_face_rejected(slab_dnr, slab_volume):
    exterior = Face(axis=0, lower_rank=1, upper_rank=0, plane=7, lattice=((7, 0, 0), (7, 3, 3)))
    with pytest.raises(ConfigurationError):
        boundary_slice_psnr(slab_dnr, slab_volume, exterior)
    with pytest.raises(ConfigurationError):
        boundary_slice_psnr(slab_dnr, slab_volume, 5)


def test_rank_failure_reports_rank(monkeypatch, slab_volume, tiny_encoding, tiny_mlp, quick_train):
    original = RankWorker.train

    def failing(self, *args):
        if self.rank == 1:
            raise TrainingError("non-finite loss", step=7, rank=1)
        return original(self, *args)

    monkeypatch.setattr(RankWorker, "train", failing)
    with pytest.raises(DistributedTrainingError) as err:
        train_distributed(slab_volume, (2, 1, 1), quick_train, tiny_encoding, tiny_mlp, ghost_width=1)
    assert err.value.rank == 1
    assert err.value.step == 7


@pytest.mark.asyncio
async def test_async_training_inside_event_loop(slab_volume, tiny_encoding, tiny_mlp, quick_train):
    dnr = await train_distributed_async(slab_volume, (1, 1, 1), quick_train, tiny_encoding, tiny_mlp,
                                        ghost_width=0, max_workers=1)
    assert len(dnr.models) == 1
    assert dnr.comm_stats["collective_phases"] == [VALUE_RANGE_PHASE, METADATA_PHASE]


def test_vector_fields_train_one_output_per_channel(tiny_encoding, tiny_mlp, quick_train):
    vol = smooth_field((4, 4, 4), channels=3)
    dnr = train_distributed(vol, (1, 1, 1), quick_train, tiny_encoding, tiny_mlp, ghost_width=0)
    assert dnr.channels == 3
    assert query(dnr, [1.0 / 3, 0.5, 0.5]).shape == (3,)


def test_worker_count_from_environment(monkeypatch):
    monkeypatch.setenv("NEURALCACHE_THREADS", "3")
    assert default_worker_count(8) == 3
    monkeypatch.delenv("NEURALCACHE_THREADS")
    assert 1 <= default_worker_count(2) <= 2


def test_desk_model_compresses_64_cubed_scalar_about_twofold():
    profile = desk_profile()
    model = InrModel(profile.encoding, profile.mlp(1))
    ratio = 64 ** 3 * 4 / model.nbytes
    assert 2.0 <= ratio < 2.2


# --------------------------------------------------------------------------- #
# Training-heavy checks
# --------------------------------------------------------------------------- #
@pytest.mark.slow
def test_desk_profile_reconstructs_smooth_field():
    vol = smooth_field((32, 32, 32))
    profile = desk_profile()
    cfg = profile.train_config(target_psnr=35.0)
    dnr = train_distributed(vol, (1, 1, 1), cfg, profile.encoding, profile.mlp(1), ghost_width=0)
    assert dnr.achieved_psnr >= 35.0
    assert volume_psnr(dnr, vol) >= 35.0 - 0.1


@pytest.mark.slow
def test_boundary_weight_improves_face_agreement():
    vol = smooth_field((32, 16, 16))
    profile = desk_profile()

    def face_psnr(lam, seed):
        cfg = profile.train_config(lam=lam, seed=seed, max_steps=600, target_psnr=60.0)
        dnr = train_distributed(vol, (2, 1, 1), cfg, profile.encoding, profile.mlp(1), ghost_width=2)
        return boundary_slice_psnr(dnr, vol, 0), volume_psnr(dnr, vol)

    results = {lam: [face_psnr(lam, s) for s in range(3)] for lam in (0.0, 0.5, 1.0)}
    face = {lam: np.mean([r[0] for r in rs]) for lam, rs in results.items()}
    full = {lam: np.mean([r[1] for r in rs]) for lam, rs in results.items()}
    assert face[0.5] > face[0.0]
    assert full[1.0] < full[0.5]


@pytest.mark.slow
def test_two_rank_desk_profile_reaches_target_on_every_rank():
    vol = smooth_field((32, 16, 16))
    profile = desk_profile()
    cfg = profile.train_config(target_psnr=35.0)
    dnr = train_distributed(vol, (2, 1, 1), cfg, profile.encoding, profile.mlp(1), ghost_width=2)
    assert all(p >= 35.0 for p in dnr.rank_psnr)
    assert not dnr.budget_exhausted


@pytest.mark.slow
def test_boundary_weight_concentrates_face_differences_at_zero():
    vol = smooth_field((32, 16, 16))
    profile = desk_profile()

    def mean_abs_difference(lam):
        spread = []
        for seed in range(3):
            cfg = profile.train_config(lam=lam, seed=seed, max_steps=600, target_psnr=60.0)
            dnr = train_distributed(vol, (2, 1, 1), cfg, profile.encoding, profile.mlp(1), ghost_width=2)
            spread.append(np.mean(np.abs(boundary_slice_differences(dnr, 0))))
        return float(np.mean(spread))

    assert mean_abs_difference(0.5) < mean_abs_difference(0.0)
