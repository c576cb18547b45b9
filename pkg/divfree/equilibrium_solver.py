# equilibrium_solver.py
"""
Basic-scheme FFT fixed point for div P = 0 in Saint-Venant-Kirchhoff polycrystals
under a prescribed mean deformation gradient.

Units: Young's modulus in GPa, stress in MPa.

Iteration on the displacement gradient H = F - I:
    tau     = P(I + H) - C0 : H
    H_hat   = -(N(k) tau_hat k) (x) k    for k != 0,    H_hat(0) = F_bar - I
with the isotropic reference stiffness C0 and its acoustic-tensor inverse
    N(k) = (I - (lam0 + mu0)/(lam0 + 2 mu0) n (x) n) / (mu0 |k|^2),  n = k / |k|.
The same Nyquist-zeroed wavenumbers are used here and in field_div, so the
equilibrium residual of a fixed point is exactly the quantity checked.
"""
import logging
from dataclasses import dataclass, field
from typing import List

import numpy as np

from divfree.common import (
    GridConfig,
    PreconditionError,
    SolverConfig,
    SolverDivergenceError,
    PLANE_ZERO_PAIRS,
)
from divfree.microstructure import Microstructure
from divfree.spectral_grid import (
    dc_index,
    derivative_wavevectors,
    dft_forward,
    dft_inverse,
    field_div,
    rms,
)

logger = logging.getLogger(__name__)

GPA_TO_MPA = 1000.0


@dataclass(frozen=True)
class LoadCase:
    F_bar: np.ndarray

    def __post_init__(self):
        F = np.asarray(self.F_bar, dtype=float)
        if F.shape != (3, 3) or not np.all(np.isfinite(F)):
            raise PreconditionError(f"F_bar must be a finite 3x3 matrix, got {F!r}")
        if any(F[i, j] != 0.0 for i, j in PLANE_ZERO_PAIRS) or F[2, 2] != 1.0:
            raise PreconditionError("F_bar must be plane form: F13 = F23 = F31 = F32 = 0, F33 = 1")
        object.__setattr__(self, "F_bar", F)

    @classmethod
    def uniaxial(cls, f22: float) -> "LoadCase":
        """Uniaxial extension along x2 with laterally fixed mean stretch."""
        return cls(np.diag([1.0, float(f22), 1.0]))


@dataclass
class EquilibriumResult:
    F: np.ndarray
    P: np.ndarray
    iterations: int
    residual: float
    history: List[float] = field(default_factory=list)


# =========================
#   Constitutive law
# =========================
def green_strain(F) -> np.ndarray:
    """E = (F^T F - I) / 2, batched over leading axes."""
    F = np.asarray(F, dtype=float)
    return 0.5 * (np.einsum("...ki,...kj->...ij", F, F) - np.eye(3))


def lame_constants(E_mod, nu):
    """(lambda, mu) in MPa from E in GPa."""
    E_mod = np.asarray(E_mod, dtype=float) * GPA_TO_MPA
    nu = np.asarray(nu, dtype=float)
    lam = E_mod * nu / ((1.0 + nu) * (1.0 - 2.0 * nu))
    mu = E_mod / (2.0 * (1.0 + nu))
    return lam, mu


def svk_stress(E_mod, nu, F) -> np.ndarray:
    """
    First Piola-Kirchhoff stress in MPa:
        P = lam tr(E) F + 2 mu F E,   E = green_strain(F).
    E_mod and nu broadcast against the leading axes of F.
    """
    nu_arr = np.asarray(nu, dtype=float)
    if np.any(nu_arr <= 0.0) or np.any(nu_arr >= 0.5):
        raise PreconditionError("Poisson ratio must lie in (0, 0.5)")
    F = np.asarray(F, dtype=float)
    E = green_strain(F)
    lam, mu = lame_constants(E_mod, nu_arr)
    tr = np.trace(E, axis1=-2, axis2=-1)
    a = np.asarray(lam * tr)[..., None, None]
    b = np.asarray(2.0 * mu)[..., None, None]
    return a * F + b * np.einsum("...ik,...kj->...ij", F, E)


# =========================
#   Reference medium
# =========================
def reference_lame(m: Microstructure, rule: str = "bounds_mean"):
    """
    arithmetic_mean: Lame constants of the mean E and mean nu.
    bounds_mean: midpoints of the per-pixel lambda and mu ranges, which keeps
    the basic scheme contracting for any contrast.
    """
    if rule == "arithmetic_mean":
        lam0, mu0 = lame_constants(float(np.mean(m.E_field)), float(np.mean(m.nu_field)))
    else:
        lam, mu = lame_constants(m.E_field, m.nu_field)
        lam0 = 0.5 * (lam.min() + lam.max())
        mu0 = 0.5 * (mu.min() + mu.max())
    return float(lam0), float(mu0)


def _reference_stress(H: np.ndarray, lam0: float, mu0: float) -> np.ndarray:
    tr = np.asarray(np.trace(H, axis1=-2, axis2=-1))
    return lam0 * tr[..., None, None] * np.eye(3) + mu0 * (H + np.swapaxes(H, -1, -2))


def _green_kernel(grid: GridConfig, lam0: float, mu0: float):
    """N(k) on the stored spectrum, zero where the differentiated k vanishes."""
    k = derivative_wavevectors(grid)
    k2 = np.sum(k * k, axis=-1)
    active = k2 > 0.0
    safe = np.where(active, k2, 1.0)
    nn = np.einsum("...i,...j->...ij", k, k) / safe[..., None, None]
    N = (np.eye(3) - (lam0 + mu0) / (lam0 + 2.0 * mu0) * nn) / (mu0 * safe)[..., None, None]
    N[~active] = 0.0
    return k, N


def equilibrium_residual(P: np.ndarray, grid: GridConfig) -> float:
    """rms(div P) * ell_U / |mean P|, falling back to rms(P) when the mean vanishes."""
    scale = float(np.linalg.norm(P.mean(axis=tuple(range(grid.spatial_dims)))))
    if scale == 0.0:
        scale = rms(P)
    if scale == 0.0:
        return 0.0
    return rms(field_div(P, grid)) * grid.ell_U / scale


# =========================
#   Solver
# =========================
def _update(H, P, H_bar, lam0, mu0, k, N, grid: GridConfig) -> np.ndarray:
    tau_hat = dft_forward(P - _reference_stress(H, lam0, mu0), grid)
    Ntk = np.einsum("...ij,...jl,...l->...i", N, tau_hat, k)
    H_hat = -np.einsum("...i,...j->...ij", Ntk, k)
    H_hat[dc_index(grid)] = H_bar
    return dft_inverse(H_hat, grid)


def scheme_step(m: Microstructure, F: np.ndarray, load: LoadCase, grid: GridConfig,
                rule: str = "bounds_mean") -> np.ndarray:
    """One fixed-point update F -> F_new."""
    lam0, mu0 = reference_lame(m, rule)
    k, N = _green_kernel(grid, lam0, mu0)
    H = np.asarray(F, dtype=float) - np.eye(3)
    P = svk_stress(m.E_field, m.nu_field, F)
    return np.eye(3) + _update(H, P, load.F_bar - np.eye(3), lam0, mu0, k, N, grid)


def solve_equilibrium(m: Microstructure, load: LoadCase, grid: GridConfig,
                      cfg: SolverConfig) -> EquilibriumResult:
    """
    Returns F and P fields with mean(F) = F_bar and equilibrium residual <= tol_div.
    Raises SolverDivergenceError after max_iter iterations or on non-finite stress.
    """
    if m.grain_id.shape != grid.shape:
        raise PreconditionError(f"microstructure shape {m.grain_id.shape} does not match grid {grid.shape}")

    lam0, mu0 = reference_lame(m, cfg.ref_modulus_rule)
    k, N = _green_kernel(grid, lam0, mu0)
    H_bar = load.F_bar - np.eye(3)

    H = np.broadcast_to(H_bar, grid.shape + (3, 3)).copy()
    history: List[float] = []
    for it in range(1, cfg.max_iter + 1):
        F = np.eye(3) + H
        P = svk_stress(m.E_field, m.nu_field, F)
        residual = equilibrium_residual(P, grid)
        history.append(residual)
        if not np.isfinite(residual):
            raise SolverDivergenceError(f"non-finite residual at iteration {it}", it, residual)
        if residual <= cfg.tol_div:
            logger.debug(f"Converged in {it} iterations, residual {residual:.3e}")
            return EquilibriumResult(F=F, P=P, iterations=it, residual=residual, history=history)

        H = _update(H, P, H_bar, lam0, mu0, k, N, grid)

    raise SolverDivergenceError(
        f"no convergence within {cfg.max_iter} iterations (residual {history[-1]:.3e})",
        cfg.max_iter, history[-1],
    )
