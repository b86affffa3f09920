"""Pulse parametrization in a modulated Fourier basis.

A pulse on control channel k is u_k(t) = sum_n b[k, n-1] * phi_n(t) with
basis functions phi_n(t) = s(t) * cos(pi n t / T) for even n and
s(t) * sin(pi n t / T) for odd n, n = 1..n_basis. The shape function s(t)
ramps cosine-smoothly from zero over [0, ramp_time] and back down over
[T - ramp_time, T], so every pulse starts and ends at exactly zero.

For lab-frame models the carrier is folded into the basis itself:
phi_n(t) -> carrier_scale * cos(carrier_frequency * t) * phi_n(t). The
coefficient integrals downstream then absorb the fast oscillation without
any special casing.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Coefficients b are plain real arrays of shape (n_controls, n_basis).
PulseCoefficients = np.ndarray


@dataclass(frozen=True)
class ControlAnsatz:
    """Static description of the control parametrization.

    amplitude_bounds holds one (u_min, u_max) pair per control channel, in
    units of the drift coupling; the empty tuple leaves all channels
    unconstrained. carrier_frequency None means the rotating frame model
    (no carrier); carrier_scale multiplies the carrier factor and is only
    meaningful when a carrier is present.
    """

    n_controls: int
    n_basis: int
    total_duration: float
    ramp_time: float
    amplitude_bounds: tuple = ()
    carrier_frequency: float | None = None
    carrier_scale: float = 1.0

    def __post_init__(self):
        if self.n_controls < 1 or self.n_basis < 1:
            raise ValueError("need at least one control and one basis function")
        if not 0.0 < self.ramp_time <= 0.5 * self.total_duration:
            raise ValueError("ramp_time must lie in (0, total_duration/2]")
        bounds = tuple(tuple(float(x) for x in pair) for pair in self.amplitude_bounds)
        if bounds and len(bounds) != self.n_controls:
            raise ValueError("need one (u_min, u_max) pair per control")
        for lo, hi in bounds:
            if not lo < hi:
                raise ValueError(f"invalid amplitude bounds ({lo}, {hi})")
        object.__setattr__(self, "amplitude_bounds", bounds)


def validate_coefficients(ansatz: ControlAnsatz, b: np.ndarray) -> np.ndarray:
    """Check shape and finiteness of a coefficient matrix; returns it as float."""
    b = np.asarray(b, dtype=float)
    if b.shape != (ansatz.n_controls, ansatz.n_basis):
        raise ValueError(
            f"coefficients must have shape {(ansatz.n_controls, ansatz.n_basis)}, "
            f"got {b.shape}"
        )
    if not np.all(np.isfinite(b)):
        raise ValueError("coefficients must be finite")
    return b


def shape_function(t, total_duration: float, ramp_time: float):
    """Cosine ramp envelope: 0 at the endpoints, 1 on the plateau.

    Accepts scalars or arrays; rejects times outside [0, total_duration].
    """
    t = np.asarray(t, dtype=float)
    T, tau = float(total_duration), float(ramp_time)
    if np.any(t < 0.0) or np.any(t > T):
        raise ValueError("time outside [0, total_duration]")
    s = np.ones_like(t)
    rising = t < tau
    falling = t >= T - tau
    s = np.where(rising, 0.5 * (np.cos(np.pi * (t / tau - 1.0)) + 1.0), s)
    s = np.where(falling, 0.5 * (np.cos(np.pi * ((t - T) / tau + 1.0)) + 1.0), s)
    return s if s.ndim else float(s)


def basis_matrix(ansatz: ControlAnsatz, t) -> np.ndarray:
    """All basis functions at the given times, shape t.shape + (n_basis,).

    Every control channel shares the same basis set, so no channel index.
    """
    t = np.atleast_1d(np.asarray(t, dtype=float))
    T = ansatz.total_duration
    s = shape_function(t, T, ansatz.ramp_time)
    n = np.arange(1, ansatz.n_basis + 1)
    angle = np.pi * np.outer(t, n) / T
    values = np.where(n % 2 == 0, np.cos(angle), np.sin(angle))
    values = values * s[:, None]
    if ansatz.carrier_frequency is not None:
        values = values * (
            ansatz.carrier_scale * np.cos(ansatz.carrier_frequency * t)[:, None]
        )
    return values


def basis_value(ansatz: ControlAnsatz, k: int, n: int, t: float) -> float:
    """Single basis function phi_n at time t (n counts from 1)."""
    if not 0 <= k < ansatz.n_controls:
        raise ValueError(f"control index {k} out of range")
    if not 1 <= n <= ansatz.n_basis:
        raise ValueError(f"basis index {n} out of range")
    return float(basis_matrix(ansatz, t)[0, n - 1])


def pulse_value(ansatz: ControlAnsatz, b: np.ndarray, k: int, t):
    """Control field u_k(t) = sum_n b[k, n-1] phi_n(t); scalar or array in t."""
    b = validate_coefficients(ansatz, b)
    if not 0 <= k < ansatz.n_controls:
        raise ValueError(f"control index {k} out of range")
    values = basis_matrix(ansatz, t) @ b[k]
    return values if np.ndim(t) else float(values[0])


def uniform_constraint_grid(
    total_duration: float, n_steps: int, samples_per_step: int = 4
) -> np.ndarray:
    """Uniform amplitude-constraint sampling grid covering [0, T]."""
    return np.linspace(0.0, total_duration, n_steps * samples_per_step + 1)


def constraint_residuals(
    ansatz: ControlAnsatz, b: np.ndarray, sample_grid: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Amplitude-bound residuals and their coefficient gradients.

    For each control k and sample time t_s two residuals are emitted,
    u_max_k - u_k(t_s) and u_k(t_s) - u_min_k; the pulse is feasible iff
    all residuals are >= 0. Returns (residuals, jacobian) with residuals
    flat of length 2 * n_controls * n_samples (k outer, sample inner, upper
    bound before lower) and jacobian of shape (len(residuals), n_controls,
    n_basis) holding d residual / d b.
    """
    if not ansatz.amplitude_bounds:
        raise ValueError("ansatz has no amplitude bounds to enforce")
    b = validate_coefficients(ansatz, b)
    grid = np.asarray(sample_grid, dtype=float)
    phi = basis_matrix(ansatz, grid)  # (S, n_basis)
    n_samples = grid.size
    n_res = 2 * ansatz.n_controls * n_samples
    residuals = np.empty(n_res)
    jacobian = np.zeros((n_res, ansatz.n_controls, ansatz.n_basis))
    for k in range(ansatz.n_controls):
        lo, hi = ansatz.amplitude_bounds[k]
        u = phi @ b[k]
        base = 2 * k * n_samples
        residuals[base : base + 2 * n_samples : 2] = hi - u
        residuals[base + 1 : base + 2 * n_samples : 2] = u - lo
        jacobian[base : base + 2 * n_samples : 2, k, :] = -phi
        jacobian[base + 1 : base + 2 * n_samples : 2, k, :] = phi
    return residuals, jacobian
