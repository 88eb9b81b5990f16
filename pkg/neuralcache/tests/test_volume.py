import numpy as np
import pytest
from hypothesis import given, strategies as st

from neuralcache.errors import ConfigurationError, ConstantFieldWarning, DomainError, ShapeMismatchError
from neuralcache.volume import (GridVolume, RectilinearMesh, UniformMesh, ValueRange, boundary_node_indices,
                                decompose_domain, denormalize_coords, denormalize_values, extract_boundary_coords,
                                list_shared_faces, local_value_range, node_owner_ranks, normalize_coords,
                                normalize_values, partition_faces, psnr, rank_of, sample_trilinear)


def linear_volume(dims=(4, 5, 6), mesh=None):
    mesh = mesh or UniformMesh()
    xs, ys, zs = mesh.axis_coords(dims)
    zz, yy, xx = np.meshgrid(zs, ys, xs, indexing="ij")
    return GridVolume(dims=dims, values=(2 * xx + 3 * yy - zz + 1.0), mesh=mesh)


# --------------------------------------------------------------------------- #
# GridVolume and sampling
# --------------------------------------------------------------------------- #
def test_values_are_read_only_and_x_fastest():
    vol = GridVolume(dims=(3, 2, 2), values=np.arange(12, dtype=np.float32))
    assert vol.values.shape == (2, 2, 3, 1)
    assert vol.values[0, 0, 1, 0] == 1  # x advances first
    assert vol.values[0, 1, 0, 0] == 3
    with pytest.raises(ValueError):
        vol.values[0, 0, 0, 0] = 5


def test_shape_mismatch_rejected():
    with pytest.raises(ShapeMismatchError):
        GridVolume(dims=(3, 3, 3), values=np.zeros(26))


def test_trilinear_hits_nodes_exactly():
    vol = linear_volume()
    nodes = vol.node_coords()
    np.testing.assert_allclose(sample_trilinear(vol, nodes), vol.values.reshape(-1, 1), atol=1e-12)


def test_trilinear_is_exact_for_linear_fields():
    mesh = RectilinearMesh(x=[0.0, 0.5, 2.0, 3.0], y=[0.0, 1.0, 1.5, 2.0, 4.0], z=np.linspace(0, 1, 6))
    vol = linear_volume(mesh=mesh)
    rng = np.random.default_rng(0)
    pts = rng.uniform([0, 0, 0], [3, 4, 1], size=(50, 3))
    expected = 2 * pts[:, 0] + 3 * pts[:, 1] - pts[:, 2] + 1.0
    np.testing.assert_allclose(sample_trilinear(vol, pts)[:, 0], expected, atol=1e-9)


def test_trilinear_single_point_shape():
    vol = linear_volume()
    assert sample_trilinear(vol, [1.0, 1.0, 1.0]).shape == (1,)


def test_trilinear_outside_raises():
    vol = linear_volume()
    with pytest.raises(DomainError):
        sample_trilinear(vol, [3.5, 0.0, 0.0])


def test_subvolume_is_zero_copy():
    vol = linear_volume((6, 6, 6))
    sub = vol.subvolume(((1, 2, 3), (3, 4, 5)))
    assert sub.dims == (3, 3, 3)
    assert np.shares_memory(sub.values, vol.values)
    np.testing.assert_allclose(sub.bounds[0], [1, 2, 3])


# --------------------------------------------------------------------------- #
# Decomposition
# --------------------------------------------------------------------------- #
def test_decompose_2x2x2_ghost_boxes():
    parts = decompose_domain((64, 64, 64), (2, 2, 2), ghost_width=2)
    assert [p.rank for p in parts] == list(range(8))
    for p in parts:
        assert p.core_dims == (32, 32, 32)
        assert p.ghost_dims == (34, 34, 34)


def test_interior_partition_has_ghosts_on_both_sides():
    parts = decompose_domain((128, 128, 128), (4, 4, 4), ghost_width=2)
    interior = parts[rank_of((1, 1, 1), (4, 4, 4))]
    assert interior.ghost_dims == (36, 36, 36)


def test_rank_order_is_x_fastest():
    parts = decompose_domain((8, 8, 8), (2, 2, 1), ghost_width=1)
    assert [p.grid_index for p in parts] == [(0, 0, 0), (1, 0, 0), (0, 1, 0), (1, 1, 0)]


def test_indivisible_dims_rejected():
    with pytest.raises(ConfigurationError):
        decompose_domain((10, 8, 8), (3, 1, 1), ghost_width=1)


def test_zero_ghost_width_keeps_bare_cores():
    parts = decompose_domain((8, 8, 8), (2, 1, 1), ghost_width=0)
    assert [p.ghost_box for p in parts] == [p.core_box for p in parts]
    assert parts[0].world_bounds == ((0.0, 0.0, 0.0), (4.0, 7.0, 7.0))
    assert decompose_domain((2, 1, 1), (2, 1, 1), ghost_width=0)[1].core_dims == (1, 1, 1)
    with pytest.raises(ConfigurationError):
        decompose_domain((8, 8, 8), (2, 1, 1), ghost_width=-1)


@given(rx=st.integers(1, 3), ry=st.integers(1, 3), rz=st.integers(1, 3), brick=st.integers(1, 4),
       ghost=st.integers(0, 3))
def test_cores_tile_the_domain_exactly_once(rx, ry, rz, brick, ghost):
    dims = (rx * brick, ry * brick, rz * brick)
    parts = decompose_domain(dims, (rx, ry, rz), ghost)
    count = np.zeros(dims[::-1], dtype=int)
    for p in parts:
        (x0, y0, z0), (x1, y1, z1) = p.core_box
        count[z0:z1 + 1, y0:y1 + 1, x0:x1 + 1] += 1
        (gx0, gy0, gz0), (gx1, gy1, gz1) = p.ghost_box
        assert gx0 >= 0 and gy0 >= 0 and gz0 >= 0
        assert gx1 < dims[0] and gy1 < dims[1] and gz1 < dims[2]
    assert np.all(count == 1)


def test_shared_faces_of_two_ranks():
    parts = decompose_domain((8, 4, 4), (2, 1, 1), ghost_width=1)
    faces = list_shared_faces(parts)
    assert len(faces) == 1
    face = faces[0]
    assert (face.axis, face.lower_rank, face.upper_rank, face.plane) == (0, 0, 1, 4)


def test_boundary_coords_lie_on_shared_plane():
    parts = decompose_domain((8, 4, 4), (2, 1, 1), ghost_width=1)
    coords = extract_boundary_coords(parts[0], parts)
    assert coords.shape == (16, 3)
    assert np.all(coords[:, 0] == 4.0)
    np.testing.assert_array_equal(coords, extract_boundary_coords(parts[1], parts))


def test_single_partition_has_no_boundary():
    parts = decompose_domain((4, 4, 4), (1, 1, 1), ghost_width=0)
    assert extract_boundary_coords(parts[0], parts).shape == (0, 3)


def test_two_by_two_layout_gives_two_faces_per_partition():
    parts = decompose_domain((8, 8, 4), (2, 2, 1), ghost_width=0)
    assert len(list_shared_faces(parts)) == 4
    assert [len(partition_faces(p, parts)) for p in parts] == [2, 2, 2, 2]


def test_face_nodes_are_owned_by_neighbours_without_ghosts():
    parts = decompose_domain((8, 8, 4), (2, 2, 1), ghost_width=0)
    nodes = boundary_node_indices(parts[0], parts)
    assert nodes.shape == (36, 3)
    assert len(np.unique(nodes, axis=0)) == 36
    owners = node_owner_ranks(nodes, parts)
    assert np.bincount(owners, minlength=4).tolist() == [0, 16, 16, 4]
    assert node_owner_ranks(np.array([[3, 3, 3], [4, 3, 0], [7, 7, 3]]), parts).tolist() == [0, 1, 3]


def test_normalize_coords_round_trip_and_strictness():
    parts = decompose_domain((8, 8, 8), (2, 1, 1), ghost_width=1)
    p = parts[1]
    u = normalize_coords([[4.0, 0.0, 0.0], [7.0, 7.0, 7.0]], p)
    np.testing.assert_allclose(u, [[0, 0, 0], [1, 1, 1]])
    np.testing.assert_allclose(denormalize_coords(u, p), [[4, 0, 0], [7, 7, 7]])
    with pytest.raises(DomainError):
        normalize_coords([[2.0, 0.0, 0.0]], p)
    assert normalize_coords([[3.0, 0.0, 0.0]], p, strict=False)[0, 0] < 0


# --------------------------------------------------------------------------- #
# Value ranges and PSNR
# --------------------------------------------------------------------------- #
def test_normalize_values_round_trip():
    vol = linear_volume()
    vr = local_value_range(vol)
    norm = normalize_values(vol, vr)
    assert norm.values.min() == pytest.approx(0.0)
    assert norm.values.max() == pytest.approx(1.0)
    np.testing.assert_allclose(denormalize_values(norm, vr).values, vol.values, atol=1e-5)


def test_constant_channel_normalizes_to_zero_with_warning():
    vol = GridVolume(dims=(2, 2, 2), values=np.full(8, 3.0))
    with pytest.warns(ConstantFieldWarning):
        norm = normalize_values(vol, local_value_range(vol))
    assert np.all(norm.values == 0.0)


def test_value_range_channel_mismatch():
    vol = linear_volume()
    with pytest.raises(ShapeMismatchError):
        normalize_values(vol, ValueRange((0.0, 0.0), (1.0, 1.0)))


def test_psnr_known_values():
    a = np.zeros(100)
    assert psnr(a, a) == 200.0
    assert psnr(a + 0.1, a) == pytest.approx(20.0)
    with pytest.raises(ShapeMismatchError):
        psnr(np.zeros(3), np.zeros(4))


def test_psnr_drops_as_noise_grows():
    rng = np.random.default_rng(3)
    ref = rng.uniform(0.0, 1.0, 4096)
    noise = rng.normal(0.0, 1.0, 4096)
    scores = [psnr(ref + amp * noise, ref) for amp in (0.001, 0.01, 0.05, 0.1, 0.3)]
    assert all(a > b for a, b in zip(scores, scores[1:]))
