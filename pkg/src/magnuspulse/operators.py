"""Dense complex linear algebra for small Hilbert spaces.

Operators are plain complex numpy matrices; states are complex vectors.
Everything here assumes Hermitian generators, so unitaries are built from
eigendecompositions (which are then reused for exact propagator
derivatives) rather than scaling-and-squaring.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

# Tolerance for accepting a matrix as Hermitian, relative to its largest entry.
HERMITICITY_RTOL = 1e-12

_PAULI = {
    "x": np.array([[0, 1], [1, 0]], dtype=np.complex128),
    "y": np.array([[0, -1j], [1j, 0]], dtype=np.complex128),
    "z": np.array([[1, 0], [0, -1]], dtype=np.complex128),
}

# Count of unitary exponentials built so far; used by tests to assert the
# two-propagations-per-gradient cost contract. Not thread safe.
_expm_evaluations = 0


def expm_evaluations() -> int:
    """Total number of unitary exponentials built since import."""
    return _expm_evaluations


def pauli(axis: str) -> np.ndarray:
    """Single-spin Pauli matrix for axis 'x', 'y' or 'z'."""
    return _PAULI[axis].copy()


def is_hermitian(a: np.ndarray, rtol: float = HERMITICITY_RTOL) -> bool:
    adj = np.swapaxes(a.conj(), -1, -2)
    scale = max(np.abs(a).max(), 1.0)
    return bool(np.abs(a - adj).max() <= rtol * scale)


def require_hermitian(a: np.ndarray, what: str = "operator") -> None:
    """Raise ValueError if a (or any matrix of a stack) is not Hermitian."""
    if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
        raise ValueError(f"{what} must be a square matrix, got shape {a.shape}")
    if not is_hermitian(a):
        defect = np.abs(a - np.swapaxes(a.conj(), -1, -2)).max()
        raise ValueError(f"{what} is not Hermitian (max deviation {defect:.3e})")


def commutator(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Return ab - ba."""
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    return a @ b - b @ a


class EigenDecomposition(NamedTuple):
    """Spectral factorization A = V diag(eigenvalues) V† of a Hermitian A.

    Both fields may carry leading batch axes; the decomposition then holds
    matrix by matrix along them.
    """

    eigenvalues: np.ndarray  # real, ascending
    eigenvectors: np.ndarray  # unitary; columns are eigenvectors


def hermitian_eig(a: np.ndarray) -> EigenDecomposition:
    """Eigendecomposition of a (possibly stacked) Hermitian matrix."""
    require_hermitian(a)
    eigenvalues, eigenvectors = np.linalg.eigh(a)
    return EigenDecomposition(eigenvalues, eigenvectors)


def expm_from_eig(decomp: EigenDecomposition) -> np.ndarray:
    """Unitary e^{-i Omega} from the eigendecomposition of Hermitian Omega.

    Batched input yields one unitary per matrix of the stack and counts
    each toward the exponential total.
    """
    global _expm_evaluations
    lam, v = decomp
    _expm_evaluations += int(np.prod(lam.shape[:-1], dtype=int))
    phases = np.exp(-1j * lam)[..., None, :]
    return (v * phases) @ np.swapaxes(v.conj(), -1, -2)


def expm_unitary(omega: np.ndarray) -> np.ndarray:
    """Unitary e^{-i omega} for Hermitian omega."""
    return expm_from_eig(hermitian_eig(omega))


def derivative_kernel(eigenvalues: np.ndarray) -> np.ndarray:
    """Divided differences of exp(-i x) over an eigenvalue grid.

    Writing mu = (lam_a + lam_b)/2 and delta = lam_a - lam_b,

        (e^{-i lam_a} - e^{-i lam_b}) / (lam_a - lam_b)
            = -i e^{-i mu} sinc(delta / 2),

    which is exact for all delta and passes smoothly through the degenerate
    limit -i e^{-i lam_a}, so no branch on |delta| is needed. Leading batch
    axes produce one kernel matrix per eigenvalue row.
    """
    lam = np.asarray(eigenvalues, dtype=float)
    mu = 0.5 * (lam[..., :, None] + lam[..., None, :])
    delta = lam[..., :, None] - lam[..., None, :]
    return -1j * np.exp(-1j * mu) * np.sinc(delta / (2.0 * np.pi))


def expm_directional_derivative(
    decomp: EigenDecomposition, direction: np.ndarray
) -> np.ndarray:
    """Exact Frechet derivative of Omega -> e^{-i Omega} along a Hermitian direction.

    In the eigenbasis of Omega the derivative is (V† A V) weighted elementwise
    by the divided differences of exp(-i x); see derivative_kernel.
    """
    require_hermitian(direction, "direction")
    lam, v = decomp
    a_eig = v.conj().T @ direction @ v
    return v @ (a_eig * derivative_kernel(lam)) @ v.conj().T


def pauli_chain_operator(n_spins: int, axis: str, site: int) -> np.ndarray:
    """Pauli operator on one site of a chain: I x ... x sigma^axis x ... x I."""
    if n_spins < 1:
        raise ValueError("n_spins must be positive")
    if axis not in _PAULI:
        raise ValueError(f"axis must be one of 'x', 'y', 'z', got {axis!r}")
    if not 0 <= site < n_spins:
        raise ValueError(f"site {site} out of range for {n_spins} spins")
    op = np.eye(1, dtype=np.complex128)
    for j in range(n_spins):
        op = np.kron(op, _PAULI[axis] if j == site else np.eye(2))
    return op


def basis_state(dim: int, index: int) -> np.ndarray:
    """Computational basis vector |index> of the given dimension."""
    if not 0 <= index < dim:
        raise ValueError(f"index {index} out of range for dimension {dim}")
    psi = np.zeros(dim, dtype=np.complex128)
    psi[index] = 1.0
    return psi
