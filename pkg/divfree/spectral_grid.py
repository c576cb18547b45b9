# spectral_grid.py
"""
Uniform periodic grids, the DFT pair and whole-field curl / inc / div.

Layout
- Real fields carry the spatial axes first: [n, n, 3, 3] (plane) or [n, n, n, 3, 3].
  Axis 0 is x1, axis 1 is x2.
- Spectra use the real-input FFT layout (numpy rfftn over the spatial axes): the
  last spatial axis keeps n/2 + 1 modes, the others are in FFT-natural order (DC
  first, then positive, then negative wavenumbers).
- The forward transform carries the 1/n^d factor so the DC coefficient is the mean.

Nyquist lines have no sign-resolved partner; every derivative map zeroes the
matching k component (derivative_wavevectors) so all outputs stay real.
"""
import logging
from typing import Tuple

import numpy as np

from divfree.common import GridConfig, PreconditionError, SYMMETRY_RTOL
from divfree.tensor_core import (
    apply_curl,
    apply_div,
    apply_div_adjoint,
    apply_grad,
    apply_sandwich,
)

logger = logging.getLogger(__name__)


# =========================
#   Reciprocal grid
# =========================
def wavenumbers_1d(cfg: GridConfig) -> np.ndarray:
    """
    Per-dimension wavenumbers 2*pi*(mu - 1)/ell - pi*n/ell, mu = 1..n, in FFT-natural
    order. The single Nyquist entry is -pi*n/ell.
    """
    return 2.0 * np.pi * np.fft.fftfreq(cfg.n_dis, d=cfg.ell_U / cfg.n_dis)


def _mode_axes(cfg: GridConfig, nyquist_zero: bool):
    n = cfg.n_dis
    k = wavenumbers_1d(cfg)
    if nyquist_zero:
        k = k.copy()
        k[n // 2] = 0.0
    return [k] * (cfg.spatial_dims - 1) + [k[: n // 2 + 1]]


def _assemble(cfg: GridConfig, axes_1d) -> np.ndarray:
    mesh = np.meshgrid(*axes_1d, indexing="ij")
    zeros = [np.zeros_like(mesh[0])] * (3 - cfg.spatial_dims)
    return np.stack(list(mesh) + zeros, axis=-1)


def build_reciprocal_grid(cfg: GridConfig) -> np.ndarray:
    """
    Wave vectors of the stored spectrum, shape cfg.spectral_shape + (3,).
    In plane mode k3 = 0 everywhere. The zero mode sits at index 0 exactly once.
    """
    return _assemble(cfg, _mode_axes(cfg, nyquist_zero=False))


def derivative_wavevectors(cfg: GridConfig) -> np.ndarray:
    """Same layout as build_reciprocal_grid with Nyquist components set to zero."""
    return _assemble(cfg, _mode_axes(cfg, nyquist_zero=True))


def dc_index(cfg: GridConfig) -> Tuple[int, ...]:
    return (0,) * cfg.spatial_dims


def hermitian_weights(cfg: GridConfig) -> np.ndarray:
    """
    Multiplicity of each stored mode in the full spectrum: 1 on the DC and Nyquist
    planes of the last axis, 2 elsewhere. Shape broadcastable to the spectrum.
    """
    c = np.full(cfg.n_dis // 2 + 1, 2.0)
    c[0] = 1.0
    c[-1] = 1.0
    return c.reshape((1,) * (cfg.spatial_dims - 1) + (-1,))


def _weights_for(cfg: GridConfig, ndim: int, batched: bool) -> np.ndarray:
    lead = (1,) if batched else ()
    trail = (1,) * (ndim - len(lead) - cfg.spatial_dims)
    return hermitian_weights(cfg).reshape(lead + hermitian_weights(cfg).shape + trail)


# =========================
#   DFT pair
# =========================
def _spatial_axes(cfg: GridConfig, batched: bool = False) -> Tuple[int, ...]:
    offset = 1 if batched else 0
    return tuple(range(offset, offset + cfg.spatial_dims))


def _check_shape(f: np.ndarray, shape: Tuple[int, ...], batched: bool, what: str) -> None:
    start = 1 if batched else 0
    got = tuple(f.shape[start:start + len(shape)])
    if got != shape:
        raise PreconditionError(f"{what}: expected spatial shape {shape}, got {f.shape}")


def dft_forward(f: np.ndarray, cfg: GridConfig, batched: bool = False) -> np.ndarray:
    """f_hat(k) = n^-d sum_x exp(-i k.x) f(x) over the spatial axes."""
    f = np.asarray(f, dtype=float)
    _check_shape(f, cfg.shape, batched, "dft_forward")
    return np.fft.rfftn(f, axes=_spatial_axes(cfg, batched), norm="forward")


def dft_inverse(F: np.ndarray, cfg: GridConfig, batched: bool = False) -> np.ndarray:
    F = np.asarray(F)
    _check_shape(F, cfg.spectral_shape, batched, "dft_inverse")
    return np.fft.irfftn(F, s=cfg.shape, axes=_spatial_axes(cfg, batched), norm="forward")


def spectral_energy(F: np.ndarray, cfg: GridConfig) -> float:
    """Sum of |f_hat|^2 over the full (Hermitian-extended) spectrum."""
    return float(np.sum(_weights_for(cfg, F.ndim, False) * np.abs(F) ** 2))


def spectral_adjoint(grad_out: np.ndarray, cfg: GridConfig, fn_adjoint, batched: bool = False):
    """
    Gradient through x -> dft_inverse(fn(dft_forward(x))) for a complex-linear
    per-mode map fn, given the gradient of a real objective w.r.t. the output.
    fn_adjoint receives and returns gradients in the real-input spectral layout.
    """
    axes = _spatial_axes(cfg, batched)
    G = _weights_for(cfg, grad_out.ndim, batched) * np.fft.rfftn(grad_out, axes=axes, norm="backward")
    G_in = fn_adjoint(G)
    G_in = G_in / _weights_for(cfg, G_in.ndim, batched)
    n_total = float(cfg.n_dis ** cfg.spatial_dims)
    return np.fft.irfftn(G_in, s=cfg.shape, axes=axes, norm="forward") / n_total


# =========================
#   Mean / fluctuation
# =========================
def mean_fluctuation_split(f: np.ndarray, cfg: GridConfig):
    f = np.asarray(f, dtype=float)
    _check_shape(f, cfg.shape, False, "mean_fluctuation_split")
    mean = f.mean(axis=_spatial_axes(cfg))
    return mean, f - mean


# =========================
#   Field operators
# =========================
def field_curl(A: np.ndarray, cfg: GridConfig) -> np.ndarray:
    """P = curl A per mode; the DC mode passes through so that mean(P) = mean(A)."""
    A_hat = dft_forward(A, cfg)
    P_hat = apply_curl(A_hat, derivative_wavevectors(cfg))
    dc = dc_index(cfg)
    P_hat[dc] = A_hat[dc]
    return dft_inverse(P_hat, cfg)


def field_inc(B: np.ndarray, cfg: GridConfig) -> np.ndarray:
    """T = inc B for a pointwise symmetric B; the DC mode passes through."""
    B = np.asarray(B, dtype=float)
    skew = np.abs(B - np.swapaxes(B, -1, -2)).max()
    if skew > SYMMETRY_RTOL * max(np.abs(B).max(), np.finfo(float).tiny):
        raise PreconditionError("field_inc needs a pointwise symmetric field")
    B_hat = dft_forward(B, cfg)
    T_hat = apply_sandwich(B_hat, derivative_wavevectors(cfg))
    dc = dc_index(cfg)
    T_hat[dc] = B_hat[dc]
    return dft_inverse(T_hat, cfg)


def field_div(P: np.ndarray, cfg: GridConfig, weights=None, batched: bool = False) -> np.ndarray:
    """
    Row divergence d_i = sum_j w_ij P_ij,j as a real vector field (grid + (3,)).
    weights default to one; batched=True treats axis 0 as a sample axis.
    """
    P_hat = dft_forward(P, cfg, batched=batched)
    d_hat = apply_div(P_hat, derivative_wavevectors(cfg), weights)
    d_hat[_dc_slot(cfg, batched)] = 0.0
    return dft_inverse(d_hat, cfg, batched=batched)


def field_div_adjoint(grad_d: np.ndarray, cfg: GridConfig, weights=None,
                      batched: bool = False) -> np.ndarray:
    """Gradient w.r.t. P of a real objective, given its gradient w.r.t. field_div(P)."""
    k = derivative_wavevectors(cfg)
    dc = _dc_slot(cfg, batched)

    def _adj(G):
        G = G.copy()
        G[dc] = 0.0
        return apply_div_adjoint(G, k, weights)

    return spectral_adjoint(grad_d, cfg, _adj, batched=batched)


def _dc_slot(cfg: GridConfig, batched: bool):
    return ((slice(None),) if batched else ()) + dc_index(cfg)


def field_grad(phi: np.ndarray, cfg: GridConfig) -> np.ndarray:
    """Gradient of a vector field: (grad phi)_ij = phi_i,j."""
    phi_hat = dft_forward(phi, cfg)
    return dft_inverse(apply_grad(phi_hat, derivative_wavevectors(cfg)), cfg)


def field_riemann_stress(M: np.ndarray, cfg: GridConfig, symmetric: bool = True) -> np.ndarray:
    """
    Stress from a skew-basis potential field: axt(ik) M axt(ik)^T per mode
    (M^T for the non-symmetric construction). The result has zero mean.
    """
    M = np.asarray(M, dtype=float)
    if symmetric:
        skew = np.abs(M - np.swapaxes(M, -1, -2)).max()
        if skew > SYMMETRY_RTOL * max(np.abs(M).max(), np.finfo(float).tiny):
            raise PreconditionError("the Riemann construction needs a pointwise symmetric field")
    M_hat = dft_forward(M, cfg)
    T_hat = apply_sandwich(M_hat, derivative_wavevectors(cfg), transpose=not symmetric)
    return dft_inverse(T_hat, cfg)


# =========================
#   Norms
# =========================
def rms(f: np.ndarray) -> float:
    return float(np.sqrt(np.mean(np.square(f))))


def relative_divergence(P: np.ndarray, cfg: GridConfig) -> float:
    """||ell_U div P|| / ||P|| over the whole field; 0 for the zero field."""
    norm_p = float(np.linalg.norm(P))
    if norm_p == 0.0:
        return 0.0
    return cfg.ell_U * float(np.linalg.norm(field_div(P, cfg))) / norm_p
