# microstructure.py
"""
Periodic Voronoi grains with one isotropic (E, nu) pair per grain.

Random numbers come from numpy's counter-based Philox bit generator, so a seed
gives the same microstructure on every platform.
"""
import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple, Union

import numpy as np
from scipy.spatial import cKDTree

from divfree.common import GridConfig, MicrostructureConfig, PreconditionError

logger = logging.getLogger(__name__)

# Distances closer than this (relative to ell^2) count as ties.
TIE_RTOL = 1e-12

SeedLike = Union[int, np.random.SeedSequence]


@dataclass(frozen=True)
class Microstructure:
    grain_id: np.ndarray            # int, [n, n]
    E_field: np.ndarray             # GPa, [n, n]
    nu_field: np.ndarray            # [n, n]
    seeds: np.ndarray               # [n_grains, 2], seed positions
    s_U: float

    @property
    def n_grains(self) -> int:
        return int(self.seeds.shape[0])

    @property
    def n_dis(self) -> int:
        return int(self.grain_id.shape[0])

    def subsample(self, stride: int) -> "Microstructure":
        return Microstructure(
            grain_id=self.grain_id[::stride, ::stride],
            E_field=self.E_field[::stride, ::stride],
            nu_field=self.nu_field[::stride, ::stride],
            seeds=self.seeds,
            s_U=self.s_U,
        )


def make_rng(seed: SeedLike) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(seed))


def seed_count(s_U: float) -> int:
    """round(s_U^-2) seeds give a mean grain area of about (s_U ell)^2."""
    return max(1, int(round(s_U ** -2)))


def _plane_grid(grid: GridConfig) -> None:
    if grid.spatial_dims != 2:
        raise PreconditionError("microstructures are generated in plane mode only")


def pixel_centers(grid: GridConfig) -> np.ndarray:
    """Coordinates (i + 1/2) ell / n of every pixel, shape [n, n, 2]."""
    x = (np.arange(grid.n_dis) + 0.5) * grid.ell_U / grid.n_dis
    return np.stack(np.meshgrid(x, x, indexing="ij"), axis=-1)


def tessellate_seeds(seeds: np.ndarray, grid: GridConfig) -> np.ndarray:
    """
    Nearest-seed labels under the periodic (minimum image) Euclidean metric.
    Equidistant pixels go to the lowest seed index.
    """
    _plane_grid(grid)
    ell = grid.ell_U
    seeds = np.mod(np.asarray(seeds, dtype=float).reshape(-1, 2), ell)
    seeds[seeds >= ell] = 0.0
    if seeds.shape[0] == 1:
        return np.zeros(grid.shape, dtype=np.int64)

    coords = pixel_centers(grid).reshape(-1, 2)
    tree = cKDTree(seeds, boxsize=ell)
    dist, idx = tree.query(coords, k=2)
    labels = idx[:, 0].astype(np.int64)

    # near-equidistant pixels: lowest index among all seeds within tolerance
    tol2 = TIE_RTOL * ell * ell
    for p in np.flatnonzero(dist[:, 1] ** 2 - dist[:, 0] ** 2 <= tol2):
        radius = np.sqrt(dist[p, 0] ** 2 + tol2)
        labels[p] = min(tree.query_ball_point(coords[p], radius))
    return labels.reshape(grid.shape)


def assign_properties(grain_id: np.ndarray, E_values: Sequence[float],
                      nu_values: Sequence[float]) -> Tuple[np.ndarray, np.ndarray]:
    E_values = np.asarray(E_values, dtype=float)
    nu_values = np.asarray(nu_values, dtype=float)
    return E_values[grain_id], nu_values[grain_id]


def voronoi_tessellate(cfg: MicrostructureConfig, grid: GridConfig,
                       rng: Optional[np.random.Generator] = None) -> Microstructure:
    """
    Draw round(s_U^-2) uniform seeds in the periodic cell, label pixels by nearest
    seed and give every grain E ~ U(E_range), nu ~ U(nu_range).
    rng defaults to make_rng(cfg.seed).
    """
    _plane_grid(grid)
    rng = rng if rng is not None else make_rng(cfg.seed)
    n_seeds = seed_count(cfg.s_U)
    seeds = rng.random((n_seeds, 2)) * grid.ell_U
    E_values = rng.uniform(cfg.E_range[0], cfg.E_range[1], n_seeds)
    nu_values = rng.uniform(cfg.nu_range[0], cfg.nu_range[1], n_seeds)

    grain_id = tessellate_seeds(seeds, grid)
    E_field, nu_field = assign_properties(grain_id, E_values, nu_values)
    logger.debug(f"Tessellated {n_seeds} grains on a {grid.n_dis}^2 grid")
    return Microstructure(grain_id, E_field, nu_field, seeds, cfg.s_U)


def property_fields(m: Microstructure) -> Tuple[np.ndarray, np.ndarray]:
    return m.E_field, m.nu_field


def grain_boundaries(grain_id: np.ndarray) -> np.ndarray:
    """Pixels whose label differs from a periodic neighbour along either axis."""
    mask = np.zeros(grain_id.shape, dtype=bool)
    for axis in range(grain_id.ndim):
        for shift in (1, -1):
            mask |= grain_id != np.roll(grain_id, shift, axis)
    return mask


def distance_to_mask(mask: np.ndarray) -> np.ndarray:
    """Periodic Chebyshev pixel distance of every pixel to the nearest True pixel."""
    if not mask.any():
        return np.full(mask.shape, np.inf)
    idx = np.argwhere(mask)
    n = np.array(mask.shape)
    grid_idx = np.indices(mask.shape).reshape(mask.ndim, -1).T
    delta = np.abs(grid_idx[:, None, :] - idx[None, :, :])
    delta = np.minimum(delta, n - delta)
    return delta.max(axis=-1).min(axis=-1).reshape(mask.shape).astype(float)


# =========================
#   Reference microstructures
# =========================
def homogeneous(grid: GridConfig, E: float, nu: float) -> Microstructure:
    _plane_grid(grid)
    shape = grid.shape
    return Microstructure(
        grain_id=np.zeros(shape, dtype=np.int64),
        E_field=np.full(shape, float(E)),
        nu_field=np.full(shape, float(nu)),
        seeds=np.zeros((1, 2)),
        s_U=1.0,
    )


def laminate(grid: GridConfig, E_pair: Tuple[float, float],
             nu_pair: Tuple[float, float]) -> Microstructure:
    """Two layers of equal width stacked along x1 (properties vary with x1 only)."""
    _plane_grid(grid)
    n = grid.n_dis
    layer = (np.arange(n) >= n // 2).astype(np.int64)
    grain_id = np.repeat(layer[:, None], n, axis=1)
    E_field, nu_field = assign_properties(grain_id, E_pair, nu_pair)
    seeds = np.array([[0.25, 0.5], [0.75, 0.5]]) * grid.ell_U
    return Microstructure(grain_id, E_field, nu_field, seeds, 0.5)
