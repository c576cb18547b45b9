import numpy as np
import pytest

from divfree.common import GridConfig, MicrostructureConfig, PreconditionError
from divfree.microstructure import (
    distance_to_mask,
    grain_boundaries,
    homogeneous,
    laminate,
    make_rng,
    pixel_centers,
    property_fields,
    seed_count,
    tessellate_seeds,
    voronoi_tessellate,
)


@pytest.mark.parametrize("s_U, expected", [(1 / 3, 9), (1 / 6, 36), (1.0, 1), (0.5, 4)])
def test_seed_count(s_U, expected):
    assert seed_count(s_U) == expected


def test_pixel_centers():
    c = pixel_centers(GridConfig(n_dis=4, ell_U=2.0))
    assert c.shape == (4, 4, 2)
    np.testing.assert_allclose(c[:, 0, 0], [0.25, 0.75, 1.25, 1.75])
    np.testing.assert_allclose(c[0, :, 1], [0.25, 0.75, 1.25, 1.75])


def test_two_seeds_split_the_cell_evenly():
    grid = GridConfig(n_dis=8)
    labels = tessellate_seeds(np.array([[0.0, 0.0], [0.5, 0.0]]), grid)
    assert np.count_nonzero(labels == 0) == 32
    assert np.count_nonzero(labels == 1) == 32
    # periodic: rows next to x1 = 0 and x1 = 1 both belong to the seed at the origin
    np.testing.assert_array_equal(labels[:, 0], [0, 0, 1, 1, 1, 1, 0, 0])


def test_diagonal_seeds_match_integer_oracle():
    n = 8
    grid = GridConfig(n_dis=n)
    seeds = np.array([[1.0, 1.0], [5.0, 5.0]]) / n
    labels = tessellate_seeds(seeds, grid)
    # squared distances in units of (1/(2n))^2 with integer arithmetic
    i, j = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    cx, cy = 2 * i + 1, 2 * j + 1

    def dist2(sx, sy):
        dx = np.abs(cx - sx) % (2 * n)
        dy = np.abs(cy - sy) % (2 * n)
        dx = np.minimum(dx, 2 * n - dx)
        dy = np.minimum(dy, 2 * n - dy)
        return dx * dx + dy * dy

    d0, d1 = dist2(2, 2), dist2(10, 10)
    np.testing.assert_array_equal(labels, np.where(d1 < d0, 1, 0))


def test_ties_go_to_the_lowest_index():
    grid = GridConfig(n_dis=6)
    labels = tessellate_seeds(np.array([[0.3, 0.3], [0.3, 0.3]]), grid)
    assert np.all(labels == 0)


@pytest.mark.parametrize("shift", [(3, 5), (0, 1), (31, 16)])
def test_tessellation_commutes_with_pixel_shifts(shift):
    n = 32
    grid = GridConfig(n_dis=n)
    rng = make_rng(17)
    for _ in range(50):
        seeds = rng.random((9, 2))
        shifted = np.mod(seeds + np.array(shift) / n, 1.0)
        np.testing.assert_array_equal(tessellate_seeds(shifted, grid),
                                      np.roll(tessellate_seeds(seeds, grid), shift, axis=(0, 1)))


def test_seeds_outside_the_cell_are_wrapped():
    grid = GridConfig(n_dis=8)
    seeds = np.array([[0.1, 0.2], [0.6, 0.7]])
    np.testing.assert_array_equal(tessellate_seeds(seeds + [1.0, -1.0], grid),
                                  tessellate_seeds(seeds, grid))


def test_single_seed_labels_everything():
    assert np.all(tessellate_seeds(np.array([[0.4, 0.9]]), GridConfig(n_dis=4)) == 0)


def test_voronoi_is_deterministic_and_within_ranges():
    cfg = MicrostructureConfig(s_U=1 / 3, E_range=(50.0, 200.0), nu_range=(0.25, 0.35), seed=11)
    grid = GridConfig(n_dis=16)
    a = voronoi_tessellate(cfg, grid)
    b = voronoi_tessellate(cfg, grid, make_rng(11))
    np.testing.assert_array_equal(a.grain_id, b.grain_id)
    np.testing.assert_array_equal(a.E_field, b.E_field)
    assert a.n_grains == 9
    assert a.E_field.min() >= 50.0 and a.E_field.max() <= 200.0
    assert a.nu_field.min() >= 0.25 and a.nu_field.max() <= 0.35
    for g in np.unique(a.grain_id):
        assert np.unique(a.E_field[a.grain_id == g]).size == 1


def test_voronoi_changes_with_seed():
    grid = GridConfig(n_dis=16)
    a = voronoi_tessellate(MicrostructureConfig(seed=1), grid)
    b = voronoi_tessellate(MicrostructureConfig(seed=2), grid)
    assert not np.array_equal(a.E_field, b.E_field)


def test_voronoi_rejects_volume_grids():
    with pytest.raises(PreconditionError):
        voronoi_tessellate(MicrostructureConfig(), GridConfig(n_dis=8, spatial_dims=3))


def test_laminate_layers_and_boundaries():
    grid = GridConfig(n_dis=8)
    m = laminate(grid, (100.0, 200.0), (0.3, 0.25))
    E, nu = property_fields(m)
    np.testing.assert_array_equal(E[:, 0], [100.0] * 4 + [200.0] * 4)
    assert np.all(E == E[:, :1])
    assert nu[7, 3] == 0.25
    mask = grain_boundaries(m.grain_id)
    np.testing.assert_array_equal(mask[:, 0], [True, False, False, True, True, False, False, True])


def test_homogeneous_has_no_boundaries():
    m = homogeneous(GridConfig(n_dis=8), 120.0, 0.3)
    assert m.n_grains == 1
    assert not grain_boundaries(m.grain_id).any()
    assert np.all(m.E_field == 120.0)


def test_distance_to_mask_is_periodic():
    mask = np.zeros((5, 5), dtype=bool)
    mask[0, 0] = True
    dist = distance_to_mask(mask)
    assert dist[0, 0] == 0.0
    assert dist[2, 2] == 2.0
    assert dist[4, 4] == 1.0
    assert dist[0, 3] == 2.0


def test_distance_without_boundaries_is_infinite():
    assert np.all(np.isinf(distance_to_mask(np.zeros((3, 3), dtype=bool))))


def test_subsample():
    m = voronoi_tessellate(MicrostructureConfig(seed=3), GridConfig(n_dis=16))
    coarse = m.subsample(2)
    assert coarse.grain_id.shape == (8, 8)
    np.testing.assert_array_equal(coarse.E_field, m.E_field[::2, ::2])
