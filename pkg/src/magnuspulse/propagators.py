"""Step-wise state propagation under the truncated Magnus generator.

Each step exponentiates the Hermitian generator assembled from precomputed
coefficient tables and commutators,

    Omega_j = dt H0 + sum_k c1[j,k] H_k
              - i sum_k c2[j,k] [H0, H_k]
              - i sum_{k<k'} c3[j,pair] [H_k, H_k'],

so every scheme is norm-preserving by construction. A classical fixed-step
Runge-Kutta integrator of the same dynamics serves as an independent
reference; it is deliberately not renormalized so its norm drift stays
visible.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .coefficients import CoefficientTable, SchemeKind, TimeGrid, control_pairs
from .controls import ControlAnsatz, basis_matrix, validate_coefficients
from .operators import (
    EigenDecomposition,
    commutator,
    expm_from_eig,
    hermitian_eig,
    require_hermitian,
)


@dataclass(frozen=True)
class ModelOperators:
    """Drift and control operators plus their precomputed commutators.

    comm_drift[k] holds [H0, H_k] and comm_cross[p] holds [H_k, H_k'] for
    the pair list from control_pairs; the -i factors making them Hermitian
    directions are applied at assembly time. Construction re-derives both
    tables and rejects inconsistent input.
    """

    h0: np.ndarray
    controls: tuple
    comm_drift: tuple
    comm_cross: tuple

    def __post_init__(self):
        require_hermitian(self.h0, "drift Hamiltonian")
        for k, hk in enumerate(self.controls):
            require_hermitian(hk, f"control Hamiltonian {k}")
        pairs = control_pairs(len(self.controls))
        if len(self.comm_drift) != len(self.controls) or len(self.comm_cross) != len(pairs):
            raise ValueError("commutator table sizes do not match control count")
        for k, hk in enumerate(self.controls):
            if not np.allclose(self.comm_drift[k], commutator(self.h0, hk), atol=1e-13):
                raise ValueError(f"comm_drift[{k}] does not equal [H0, H{k}]")
        for p, (k, kp) in enumerate(pairs):
            fresh = commutator(self.controls[k], self.controls[kp])
            if not np.allclose(self.comm_cross[p], fresh, atol=1e-13):
                raise ValueError(f"comm_cross[{p}] does not equal [H{k}, H{kp}]")

    @property
    def dim(self) -> int:
        return self.h0.shape[0]

    @property
    def pairs(self) -> tuple:
        return control_pairs(len(self.controls))


def make_model(h0: np.ndarray, controls) -> ModelOperators:
    """Build ModelOperators, computing the commutator tables."""
    controls = tuple(np.asarray(hk, dtype=np.complex128) for hk in controls)
    h0 = np.asarray(h0, dtype=np.complex128)
    comm_drift = tuple(commutator(h0, hk) for hk in controls)
    comm_cross = tuple(
        commutator(controls[k], controls[kp])
        for k, kp in control_pairs(len(controls))
    )
    return ModelOperators(h0, controls, comm_drift, comm_cross)


@dataclass(frozen=True)
class PropagationResult:
    final_state: np.ndarray
    step_unitaries: tuple | None = None
    step_generators: tuple | None = None  # (Omega_j, EigenDecomposition) pairs


def assemble_generator(
    model: ModelOperators, table: CoefficientTable, j: int
) -> np.ndarray:
    """Hermitian Magnus generator for step j from the coefficient table."""
    if table.c1.shape[1] != len(model.controls):
        raise ValueError("coefficient table and model disagree on control count")
    omega = table.grid.dt * model.h0.astype(np.complex128)
    for k, hk in enumerate(model.controls):
        omega = omega + table.c1[j, k] * hk
    if table.c2 is not None:
        for k, comm in enumerate(model.comm_drift):
            omega = omega + (-1j * table.c2[j, k]) * comm
        for p, comm in enumerate(model.comm_cross):
            omega = omega + (-1j * table.c3[j, p]) * comm
    return omega


def assemble_generators(
    model: ModelOperators, table: CoefficientTable
) -> np.ndarray:
    """All step generators at once, stacked as (n_steps, dim, dim).

    Equivalent to assemble_generator over every j, but contracted in bulk
    so long grids do not pay a per-step python round trip.
    """
    if table.c1.shape[1] != len(model.controls):
        raise ValueError("coefficient table and model disagree on control count")
    dim = model.dim
    controls = np.asarray(model.controls, dtype=np.complex128).reshape(-1, dim, dim)
    omega = table.grid.dt * model.h0 + np.tensordot(table.c1, controls, axes=(1, 0))
    if table.c2 is not None:
        drift_comms = np.asarray(model.comm_drift).reshape(-1, dim, dim)
        cross_comms = np.asarray(model.comm_cross).reshape(-1, dim, dim)
        omega += -1j * np.tensordot(table.c2, drift_comms, axes=(1, 0))
        omega += -1j * np.tensordot(table.c3, cross_comms, axes=(1, 0))
    return omega


def propagate(
    model: ModelOperators,
    scheme: SchemeKind,
    table: CoefficientTable,
    grid: TimeGrid,
    psi0: np.ndarray,
    retain: bool = False,
) -> PropagationResult:
    """Apply all step propagators U_j = exp(-i Omega_j) in order.

    With retain=True the per-step unitaries and generator decompositions are
    kept for gradient evaluation; plain propagation skips that memory.
    """
    if table.scheme is not scheme:
        raise ValueError(f"table was built for {table.scheme.value}, not {scheme.value}")
    if table.grid != grid:
        raise ValueError("table was built on a different time grid")
    omegas = assemble_generators(model, table)
    decomps = hermitian_eig(omegas)
    unitaries = expm_from_eig(decomps)
    psi = np.asarray(psi0, dtype=np.complex128).copy()
    for j in range(grid.n_steps):
        psi = unitaries[j] @ psi
    if not retain:
        return PropagationResult(final_state=psi)
    generators = tuple(
        (omegas[j], EigenDecomposition(decomps.eigenvalues[j], decomps.eigenvectors[j]))
        for j in range(grid.n_steps)
    )
    return PropagationResult(
        final_state=psi,
        step_unitaries=tuple(unitaries),
        step_generators=generators,
    )


def reference_rk(
    model: ModelOperators,
    ansatz: ControlAnsatz,
    b: np.ndarray,
    grid_dense: TimeGrid,
    psi0: np.ndarray,
) -> np.ndarray:
    """Classical fixed-step 4th-order Runge-Kutta solution of the dynamics.

    No renormalization is applied, so the returned state carries the
    integrator's characteristic O(dt^4) norm drift.
    """
    b = validate_coefficients(ansatz, b)
    times = grid_dense.times()
    h = grid_dense.dt
    # pulse samples at step starts, midpoints and ends, per channel
    u_nodes = basis_matrix(ansatz, times) @ b.T  # (n_steps+1, K)
    u_mid = basis_matrix(ansatz, times[:-1] + 0.5 * h) @ b.T  # (n_steps, K)

    h0 = model.h0.astype(np.complex128)

    def apply_h(u_row, psi):
        out = h0 @ psi
        for k, hk in enumerate(model.controls):
            out += u_row[k] * (hk @ psi)
        return -1j * out

    psi = np.asarray(psi0, dtype=np.complex128).copy()
    for j in range(grid_dense.n_steps):
        k1 = apply_h(u_nodes[j], psi)
        k2 = apply_h(u_mid[j], psi + 0.5 * h * k1)
        k3 = apply_h(u_mid[j], psi + 0.5 * h * k2)
        k4 = apply_h(u_nodes[j + 1], psi + h * k3)
        psi = psi + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return psi


class ConvergenceError(RuntimeError):
    """Raised when step-halving cannot reach a requested tolerance."""


def reference_rk_converged(
    model: ModelOperators,
    ansatz: ControlAnsatz,
    b: np.ndarray,
    total_duration: float,
    psi0: np.ndarray,
    tolerance: float,
    start_steps: int = 256,
    max_doublings: int = 12,
) -> tuple[np.ndarray, int, float]:
    """Runge-Kutta ground truth under step-halving Richardson control.

    Doubles the step count until the Richardson error estimate
    |psi_N - psi_2N| / (2^4 - 1) falls below tolerance; returns the finer
    solution, its step count and the final estimate.
    """
    n = start_steps
    psi_coarse = reference_rk(model, ansatz, b, TimeGrid(total_duration, n), psi0)
    for _ in range(max_doublings):
        n *= 2
        psi_fine = reference_rk(model, ansatz, b, TimeGrid(total_duration, n), psi0)
        estimate = float(np.linalg.norm(psi_fine - psi_coarse)) / 15.0
        if estimate < tolerance:
            return psi_fine, n, estimate
        psi_coarse = psi_fine
    raise ConvergenceError(
        f"Runge-Kutta estimate {estimate:.3e} still above {tolerance:.0e} "
        f"after {n} steps"
    )
