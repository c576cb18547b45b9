# neural_operator.py
"""
Fourier neural operator in numpy with a hand-written reverse pass.

Forward:
    h_0     = x W_inp                                   (lifting, no bias)
    z_l     = irfft(K_l * rfft(h_{l-1})) + h_{l-1} W_l + b_l
    h_l     = gelu(z_l)                                 l = 1..n_hid
    s       = h_L W_out                                 (projection, no bias)
    p_out   = output_transform(s)                       (variant dependent)

Arrays are batched as [B, n, n, channels]; stresses as [B, n, n, 3, 3].

Spectral kernels are indexed by the signed first-axis mode mu1 in [-(m-1), m-1]
and the second-axis mode mu2 in [0, m-1]. Only grid rows with |mu1| <= m-1 are
used, so for m = n/2 + 1 the kernel entry mu1 = +n/2 has no grid row.

Output heads
- pg / pi: p_out is s with the plane structural zeros masked.
- pe: s is a stress potential. The DC coefficients of the channels
  (A11, A12, A21, A22, A33) give the mean stress; the non-DC coefficients of
  (A13, A23, A31, A32) give the fluctuation rows ik x a_i. Everything else is
  discarded, so every output row is divergence free mode by mode.

stress_weights w_ij rescale the fluctuation so that sum_j w_ij p_ij,j is the
divergence that vanishes; they are 1 unless the data normalization uses a
different scale per stress component.
"""
import logging
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional

import numpy as np
from scipy.special import erf

from divfree.common import (
    ConfigError,
    FnoConfig,
    GridConfig,
    N_INPUT_CHANNELS,
    N_OUTPUT_CHANNELS,
    PLANE_ACTIVE,
    PLANE_ZERO,
    PreconditionError,
    VARIANTS,
)
from divfree.microstructure import make_rng
from divfree.spectral_grid import (
    derivative_wavevectors,
    dft_forward,
    dft_inverse,
    field_div,
    field_div_adjoint,
    spectral_adjoint,
)
from divfree.tensor_core import apply_curl, apply_curl_adjoint

logger = logging.getLogger(__name__)

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)

_ACTIVE_MASK = np.zeros(N_OUTPUT_CHANNELS, dtype=bool)
_ACTIVE_MASK[list(PLANE_ACTIVE)] = True
_ACTIVE_MASK_3x3 = _ACTIVE_MASK.reshape(3, 3)
_POTENTIAL_MASK_3x3 = ~_ACTIVE_MASK_3x3


# =========================
#   Activation
# =========================
def gelu(x):
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def gelu_derivative(x):
    return 0.5 * (1.0 + erf(x / _SQRT2)) + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)


# =========================
#   Model
# =========================
def retained_rows(n: int, modes: int):
    """Grid rows of the first spectral axis kept by the kernel, and their kernel index."""
    q = np.rint(np.fft.fftfreq(n) * n).astype(np.int64)
    rows = np.nonzero(np.abs(q) <= modes - 1)[0]
    return rows, q[rows] + modes - 1


@dataclass
class FnoModel:
    config: FnoConfig
    grid: GridConfig
    params: Dict[str, np.ndarray]
    stress_weights: np.ndarray = field(default_factory=lambda: np.ones((3, 3)))

    @property
    def variant(self) -> str:
        return self.config.variant

    @property
    def width(self) -> int:
        return self.config.hidden_width

    def param_names(self) -> List[str]:
        names = ["W_inp"]
        for layer in range(self.config.n_hid):
            names += [f"K_re_{layer}", f"K_im_{layer}", f"W_{layer}", f"b_{layer}"]
        return names + ["W_out"]

    def kernel(self, layer: int) -> np.ndarray:
        return self.params[f"K_re_{layer}"] + 1j * self.params[f"K_im_{layer}"]

    def copy(self) -> "FnoModel":
        return FnoModel(self.config, self.grid, {k: v.copy() for k, v in self.params.items()},
                        self.stress_weights.copy())

    def with_variant(self, variant: str) -> "FnoModel":
        if variant not in VARIANTS:
            raise ConfigError(f"unknown variant {variant!r}")
        m = self.copy()
        m.config = replace(self.config, variant=variant)
        return m

    def flatten(self) -> np.ndarray:
        return np.concatenate([self.params[k].ravel() for k in self.param_names()])

    def load_flat(self, vec: np.ndarray) -> None:
        vec = np.asarray(vec, dtype=float)
        offset = 0
        for k in self.param_names():
            size = self.params[k].size
            self.params[k] = vec[offset:offset + size].reshape(self.params[k].shape).copy()
            offset += size
        if offset != vec.size:
            raise PreconditionError(f"parameter vector has {vec.size} entries, model needs {offset}")


def param_shapes(cfg: FnoConfig) -> Dict[str, tuple]:
    w, m = cfg.hidden_width, cfg.modes
    shapes = {"W_inp": (N_INPUT_CHANNELS, w)}
    for layer in range(cfg.n_hid):
        shapes[f"K_re_{layer}"] = (2 * m - 1, m, w, w)
        shapes[f"K_im_{layer}"] = (2 * m - 1, m, w, w)
        shapes[f"W_{layer}"] = (w, w)
        shapes[f"b_{layer}"] = (w,)
    shapes["W_out"] = (w, N_OUTPUT_CHANNELS)
    return shapes


def _check_modes(cfg: FnoConfig, grid: GridConfig) -> None:
    if grid.spatial_dims != 2:
        raise PreconditionError("the operator is built for plane grids")
    if cfg.modes > grid.n_dis // 2 + 1:
        raise PreconditionError(f"modes={cfg.modes} exceeds n_dis/2 + 1 = {grid.n_dis // 2 + 1}")


def init_model(cfg: FnoConfig, grid: GridConfig, seed: int = 0) -> FnoModel:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) matrices; complex kernels scaled by 1/width^2."""
    _check_modes(cfg, grid)
    rng = make_rng(seed)
    w = cfg.hidden_width
    params: Dict[str, np.ndarray] = {}
    for name, shape in param_shapes(cfg).items():
        if name.startswith("K_"):
            params[name] = rng.uniform(-1.0, 1.0, shape) / (w * w)
        else:
            fan_in = shape[0] if len(shape) == 2 else w
            bound = 1.0 / np.sqrt(fan_in)
            params[name] = rng.uniform(-bound, bound, shape)
    return FnoModel(cfg, grid, params)


def encode_input(E_norm: np.ndarray, nu: np.ndarray, F_bar: np.ndarray) -> np.ndarray:
    """Channels (E, nu, F_bar11 .. F_bar33) per pixel, shape [n, n, 11]."""
    E_norm = np.asarray(E_norm, dtype=float)
    F_flat = np.broadcast_to(np.asarray(F_bar, dtype=float).reshape(9), E_norm.shape + (9,))
    return np.concatenate([E_norm[..., None], np.asarray(nu, dtype=float)[..., None], F_flat], axis=-1)


# =========================
#   Forward
# =========================
@dataclass
class ForwardTape:
    x: Optional[np.ndarray] = None
    h_in: List[np.ndarray] = field(default_factory=list)
    spectra: List[np.ndarray] = field(default_factory=list)
    z: List[np.ndarray] = field(default_factory=list)
    h_last: Optional[np.ndarray] = None


def _check_input(model: FnoModel, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    expected = model.grid.shape + (N_INPUT_CHANNELS,)
    if x.ndim != 4 or x.shape[1:] != expected:
        raise PreconditionError(f"input must have shape [B, {expected}], got {x.shape}")
    return x


def _spectral_conv(X: np.ndarray, K: np.ndarray, grid: GridConfig, modes: int) -> np.ndarray:
    rows, krows = retained_rows(grid.n_dis, modes)
    Y = np.zeros(X.shape[:-1] + (K.shape[-1],), dtype=complex)
    Y[:, rows, :modes, :] = np.einsum("brci,rcio->brco", X[:, rows, :modes, :], K[krows])
    return Y


def fno_forward(model: FnoModel, inputs: np.ndarray, tape: Optional[ForwardTape] = None) -> np.ndarray:
    """Projected features s (the potential for pe, the raw stress for pg/pi), [B, n, n, 9]."""
    x = _check_input(model, inputs)
    p = model.params
    grid = model.grid
    h = x @ p["W_inp"]
    if tape is not None:
        tape.x = x
    for layer in range(model.config.n_hid):
        X = dft_forward(h, grid, batched=True)
        y = dft_inverse(_spectral_conv(X, model.kernel(layer), grid, model.config.modes), grid, batched=True)
        z = y + h @ p[f"W_{layer}"] + p[f"b_{layer}"]
        if tape is not None:
            tape.h_in.append(h)
            tape.spectra.append(X)
            tape.z.append(z)
        h = gelu(z)
    if tape is not None:
        tape.h_last = h
    return h @ p["W_out"]


def output_transform(model: FnoModel, features: np.ndarray) -> np.ndarray:
    """Stress p_out [B, n, n, 3, 3] from projected features."""
    s = np.asarray(features)
    if model.variant != "pe":
        out = np.where(_ACTIVE_MASK, s, 0.0)
        return out.reshape(s.shape[:-1] + (3, 3))

    grid = model.grid
    S_hat = dft_forward(s, grid, batched=True).reshape(s.shape[:1] + grid.spectral_shape + (3, 3))
    A_tilde = np.where(_POTENTIAL_MASK_3x3, S_hat, 0.0)
    P_hat = apply_curl(A_tilde, derivative_wavevectors(grid), model.stress_weights)
    P_hat[:, 0, 0] = np.where(_ACTIVE_MASK_3x3, S_hat[:, 0, 0], 0.0)
    return dft_inverse(P_hat, grid, batched=True)


def divergence_output(model: FnoModel, p_out: np.ndarray) -> np.ndarray:
    """d_out [B, n, n, 3] of a stress output, with the model's stress weights."""
    return field_div(p_out, model.grid, weights=model.stress_weights, batched=True)


def predict(model: FnoModel, inputs: np.ndarray, tape: Optional[ForwardTape] = None) -> np.ndarray:
    return output_transform(model, fno_forward(model, inputs, tape))


# =========================
#   Reverse pass
# =========================
def output_transform_adjoint(model: FnoModel, grad_p: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the projected features given the gradient w.r.t. p_out."""
    grad_p = np.asarray(grad_p, dtype=float)
    flat_shape = grad_p.shape[:-2] + (N_OUTPUT_CHANNELS,)
    if model.variant != "pe":
        return np.where(_ACTIVE_MASK, grad_p.reshape(flat_shape), 0.0)

    grid = model.grid
    k = derivative_wavevectors(grid)

    def _adj(G):
        G_A = apply_curl_adjoint(G, k, model.stress_weights)
        G_A = np.where(_POTENTIAL_MASK_3x3, G_A, 0.0)
        G_A[:, 0, 0] = np.where(_ACTIVE_MASK_3x3, G[:, 0, 0], 0.0)
        return G_A

    return spectral_adjoint(grad_p, grid, _adj, batched=True).reshape(flat_shape)


def divergence_output_adjoint(model: FnoModel, grad_d: np.ndarray) -> np.ndarray:
    return field_div_adjoint(grad_d, model.grid, weights=model.stress_weights, batched=True)


def backward(model: FnoModel, tape: ForwardTape, grad_p: np.ndarray) -> Dict[str, np.ndarray]:
    """Parameter gradients of a real objective given its gradient w.r.t. p_out."""
    if tape.h_last is None:
        raise PreconditionError("backward needs a tape recorded by fno_forward")
    p = model.params
    grid = model.grid
    modes = model.config.modes
    rows, krows = retained_rows(grid.n_dis, modes)
    grads: Dict[str, np.ndarray] = {}

    grad_s = output_transform_adjoint(model, grad_p)
    grads["W_out"] = np.einsum("bxyi,bxyo->io", tape.h_last, grad_s)
    grad_h = grad_s @ p["W_out"].T

    for layer in reversed(range(model.config.n_hid)):
        h_in, X, z = tape.h_in[layer], tape.spectra[layer], tape.z[layer]
        grad_z = grad_h * gelu_derivative(z)
        grads[f"b_{layer}"] = grad_z.sum(axis=(0, 1, 2))
        grads[f"W_{layer}"] = np.einsum("bxyi,bxyo->io", h_in, grad_z)

        K = model.kernel(layer)
        grad_K = np.zeros(K.shape, dtype=complex)

        def _adj(G_Y, K=K, X=X, grad_K=grad_K):
            G_r = G_Y[:, rows, :modes, :]
            grad_K[krows] = np.einsum("brci,brco->rcio", np.conj(X[:, rows, :modes, :]), G_r)
            G_X = np.zeros(X.shape, dtype=complex)
            G_X[:, rows, :modes, :] = np.einsum("brco,rcio->brci", G_r, np.conj(K[krows]))
            return G_X

        grad_h = grad_z @ p[f"W_{layer}"].T + spectral_adjoint(grad_z, grid, _adj, batched=True)
        grads[f"K_re_{layer}"] = grad_K.real.copy()
        grads[f"K_im_{layer}"] = grad_K.imag.copy()

    grads["W_inp"] = np.einsum("bxyi,bxyo->io", tape.x, grad_h)
    return grads
