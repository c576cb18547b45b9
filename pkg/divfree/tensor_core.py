# tensor_core.py
"""
Complex linear algebra on single Fourier modes.

Every map accepts a single mode (k of shape (3,), matrices of shape (3, 3)) or a
stack of modes (k of shape (..., 3), matrices of shape (..., 3, 3)); the leading
axes broadcast.

Sign conventions
- axial_tensor(k) is the matrix of b -> ik x b:  axt(ik)_im = eps_ijm (ik)_j.
- A fourth-order tensor with left and right minor skew symmetry is stored as a
  3x3 "skew-basis" matrix M over axial indices:
      K_ijkl = eps_ijm M_mn eps_kln
  i.e. the skew pair (i, j) maps to the axial index m with eps_ijm = +1 for
  (2,3)->1, (3,1)->2, (1,2)->3 (one-based). No factor 2 is absorbed.
"""
import numpy as np

from divfree.common import PreconditionError, SYMMETRY_RTOL


def levi_civita() -> np.ndarray:
    eps = np.zeros((3, 3, 3))
    eps[0, 1, 2] = eps[1, 2, 0] = eps[2, 0, 1] = 1.0
    eps[0, 2, 1] = eps[2, 1, 0] = eps[1, 0, 2] = -1.0
    return eps


_EPS = levi_civita()


def wave_vector(k1: float, k2: float, k3: float = 0.0) -> np.ndarray:
    k = np.array([k1, k2, k3], dtype=float)
    if not np.all(np.isfinite(k)):
        raise PreconditionError(f"wave vector must be finite, got {k}")
    return k


def _as_modes(k) -> np.ndarray:
    k = np.asarray(k, dtype=float)
    if k.shape[-1] != 3:
        raise PreconditionError(f"wave vectors need 3 components, got shape {k.shape}")
    return k


def _is_zero_mode(k: np.ndarray) -> np.ndarray:
    return np.all(k == 0.0, axis=-1)


def _check_symmetric(M: np.ndarray, name: str) -> None:
    skew = np.linalg.norm(M - np.swapaxes(M, -1, -2), axis=(-2, -1))
    scale = np.linalg.norm(M, axis=(-2, -1))
    if np.any(skew > SYMMETRY_RTOL * np.maximum(scale, np.finfo(float).tiny)):
        raise PreconditionError(f"{name} must be symmetric (relative tolerance {SYMMETRY_RTOL})")


def axial_tensor(k) -> np.ndarray:
    """Return i * [[0, -k3, k2], [k3, 0, -k1], [-k2, k1, 0]]."""
    k = _as_modes(k)
    k1, k2, k3 = k[..., 0], k[..., 1], k[..., 2]
    zero = np.zeros_like(k1)
    rows = [
        np.stack([zero, -k3, k2], axis=-1),
        np.stack([k3, zero, -k1], axis=-1),
        np.stack([-k2, k1, zero], axis=-1),
    ]
    return 1j * np.stack(rows, axis=-2)


# =========================
#   Branch-free mode maps
# =========================
# These act on every mode alike; callers that own a DC mode handle it themselves.

def apply_curl(A_hat: np.ndarray, k: np.ndarray, weights=None) -> np.ndarray:
    """A_hat (axt ik)^T, optionally divided entrywise by column weights."""
    P_hat = np.einsum("...ij,...kj->...ik", A_hat, axial_tensor(k))
    if weights is not None:
        P_hat = P_hat / weights
    return P_hat


def apply_curl_adjoint(G_hat: np.ndarray, k: np.ndarray, weights=None) -> np.ndarray:
    if weights is not None:
        G_hat = G_hat / weights
    return np.einsum("...ik,...kj->...ij", G_hat, np.conj(axial_tensor(k)))


def apply_sandwich(M_hat: np.ndarray, k: np.ndarray, transpose: bool = False) -> np.ndarray:
    """axt(ik) M axt(ik)^T, or with M transposed."""
    axt = axial_tensor(k)
    if transpose:
        M_hat = np.swapaxes(M_hat, -1, -2)
    return np.einsum("...im,...mn,...kn->...ik", axt, M_hat, axt)


def apply_div(P_hat: np.ndarray, k: np.ndarray, weights=None) -> np.ndarray:
    """i P_hat k, with optional per-entry weights on P_hat."""
    if weights is not None:
        P_hat = P_hat * weights
    return 1j * np.einsum("...ij,...j->...i", P_hat, k)


def apply_div_adjoint(G_hat: np.ndarray, k: np.ndarray, weights=None) -> np.ndarray:
    G_P = -1j * np.einsum("...i,...j->...ij", G_hat, k)
    if weights is not None:
        G_P = G_P * weights
    return G_P


def apply_grad(phi_hat: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Gradient of a vector potential: (i phi_hat) outer k."""
    return 1j * np.einsum("...i,...j->...ij", phi_hat, k)


# =========================
#   Coefficient relations
# =========================
def curl_coefficient(A_hat, k) -> np.ndarray:
    """P_hat = A_hat (axt ik)^T for k != 0, P_hat = A_hat for k = 0."""
    A_hat = np.asarray(A_hat, dtype=complex)
    k = _as_modes(k)
    P_hat = apply_curl(A_hat, k)
    zero = _is_zero_mode(k)
    return np.where(zero[..., None, None], A_hat, P_hat)


def inc_coefficient(B_hat, k) -> np.ndarray:
    """T_hat = axt(ik) B_hat axt(ik)^T for k != 0, T_hat = B_hat for k = 0."""
    B_hat = np.asarray(B_hat, dtype=complex)
    _check_symmetric(B_hat, "B_hat")
    k = _as_modes(k)
    T_hat = apply_sandwich(B_hat, k)
    zero = _is_zero_mode(k)
    return np.where(zero[..., None, None], B_hat, T_hat)


def div_coefficient(P_hat, k) -> np.ndarray:
    """d_hat = i P_hat k; the zero mode carries no divergence."""
    k = _as_modes(k)
    if np.any(_is_zero_mode(k)):
        raise PreconditionError("div_coefficient is undefined for the zero mode")
    return apply_div(np.asarray(P_hat, dtype=complex), k)


def riemann_stress_coefficient(K_hat, k) -> np.ndarray:
    """Symmetric stress from a skew-basis matrix with Riemann (major) symmetry."""
    K_hat = np.asarray(K_hat, dtype=complex)
    _check_symmetric(K_hat, "K_hat")
    return apply_sandwich(K_hat, _as_modes(k))


def nonsym_stress_coefficient(S_hat, k) -> np.ndarray:
    """
    Stress from a general skew-basis matrix: a . P b = (a x ik) . S^T [b x ik].
    The major transpose of the fourth-order tensor is the transpose of its
    skew-basis matrix, so P_hat = axt(ik) S_hat^T axt(ik)^T.
    """
    S_hat = np.asarray(S_hat, dtype=complex)
    return apply_sandwich(S_hat, _as_modes(k), transpose=True)


# =========================
#   Fourth-order expansion
# =========================
def fourth_order_from_skew(M) -> np.ndarray:
    """Full 3x3x3x3 array K_ijkl = eps_ijm M_mn eps_kln."""
    return np.einsum("ijm,...mn,kln->...ijkl", _EPS, np.asarray(M), _EPS)


def skew_from_fourth_order(K) -> np.ndarray:
    """Inverse of fourth_order_from_skew on minor-skew tensors."""
    return 0.25 * np.einsum("ijm,...ijkl,kln->...mn", _EPS, np.asarray(K), _EPS)


def contract_fourth_order(K, k, transpose: bool = False) -> np.ndarray:
    """T_ik = sum_jl K_ijkl (ik_j)(ik_l); with transpose, the major transpose K_klij."""
    K = np.asarray(K)
    ik = 1j * _as_modes(k)
    if transpose:
        return np.einsum("...klij,...j,...l->...ik", K, ik, ik)
    return np.einsum("...ijkl,...j,...l->...ik", K, ik, ik)
