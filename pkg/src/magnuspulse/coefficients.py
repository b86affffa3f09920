"""Per-step coefficient integrals for the Magnus propagation schemes.

Over each step [t_j, t_j + dt] the truncated Magnus generator is assembled
as

    Omega_j = dt H0 + sum_k c1[k,j] H_k
              - i sum_k c2[k,j] [H0, H_k]
              - i sum_{k<k'} c3[k,k',j] [H_k, H_k']

and this module produces the scalar tables c1, c2, c3 together with their
derivatives with respect to every pulse coefficient b[k, n]. Four schemes:

  m2exact:  c1 from exact single integrals of the basis functions
  m2approx: c1 from the midpoint rule (one sample per step)
  m4exact:  c1, c2, c3 from exact single and nested integrals
  m4approx: c1, c2, c3 from two-node Gauss-Legendre samples per step

The exact schemes contract precomputed, coefficient-independent basis
integrals with b, so rebuilding tables inside an optimization loop costs
only small matrix products. Cached per step and basis index n:

    single[j, n] = int_0^dt phi_n(t_j + t1) dt1
    nested[j, n] = int_0^dt ( Phi_n(t1) - phi_n(t_j + t1) t1 ) dt1
    cross[j, n, m] = int_0^dt phi_n(t_j + t1) Phi_m(t1) dt1

with Phi_n(t1) = int_0^t1 phi_n(t_j + t2) dt2. Then c2 = (1/2) nested . b
and c3 is the antisymmetrized bilinear form of cross/2 in (b[k], b[k']).

Quadrature is fixed-order Gauss-Legendre, validated once per build against
an adaptive oracle on random probes, escalating the node count if the
defect exceeds 1e-12.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy import integrate
from scipy.special import roots_legendre

from .controls import ControlAnsatz, basis_matrix, validate_coefficients

QUADRATURE_NODES = 16
QUADRATURE_NODES_ESCALATED = 32
QUADRATURE_DEFECT_TOL = 1e-12
VALIDATION_PROBES = 10
# Internal probe RNG is fixed so cache construction stays deterministic.
_VALIDATION_SEED = 20240814


class SchemeKind(Enum):
    M2EXACT = "m2exact"
    M2APPROX = "m2approx"
    M4EXACT = "m4exact"
    M4APPROX = "m4approx"

    @property
    def fourth_order(self) -> bool:
        return self in (SchemeKind.M4EXACT, SchemeKind.M4APPROX)

    @property
    def exact_integrals(self) -> bool:
        return self in (SchemeKind.M2EXACT, SchemeKind.M4EXACT)


class QuadratureError(RuntimeError):
    """Raised when the fixed-order quadrature fails its adaptive validation."""

    def __init__(self, message: str, step_index: int):
        super().__init__(message)
        self.step_index = step_index


@dataclass(frozen=True)
class TimeGrid:
    """Equidistant time discretization of [0, T] into n_steps steps."""

    total_duration: float
    n_steps: int

    def __post_init__(self):
        if self.n_steps < 1:
            raise ValueError("n_steps must be at least 1")
        if not self.total_duration > 0:
            raise ValueError("total_duration must be positive")

    @property
    def dt(self) -> float:
        return self.total_duration / self.n_steps

    def times(self) -> np.ndarray:
        """All n_steps + 1 grid times including both endpoints."""
        return np.linspace(0.0, self.total_duration, self.n_steps + 1)

    def step_starts(self) -> np.ndarray:
        return self.times()[: self.n_steps]


def control_pairs(n_controls: int) -> tuple:
    """Ordered control pairs (k, k') with k < k'."""
    return tuple(
        (k, kp) for k in range(n_controls) for kp in range(k + 1, n_controls)
    )


@dataclass(frozen=True)
class BasisIntegralCache:
    """Coefficient-independent basis integrals, one row per time step.

    nested and cross are None when the cache was built for second-order
    schemes only. nodes records the Gauss-Legendre order actually used.
    """

    ansatz: ControlAnsatz
    grid: TimeGrid
    single: np.ndarray  # (n_steps, n_basis)
    nested: np.ndarray | None
    cross: np.ndarray | None
    nodes: int

    @property
    def has_fourth_order(self) -> bool:
        return self.nested is not None and self.cross is not None


@dataclass(frozen=True)
class CoefficientTable:
    """Scalar generator coefficients and their b-derivatives for one scheme.

    Shapes: c1, c2 are (n_steps, n_controls); dc1, dc2 add a trailing basis
    axis. c3 is (n_steps, n_pairs) over pairs with k < k'; dc3 is
    (n_steps, n_pairs, 2, n_basis) where axis 2 selects d/db[k] (0) or
    d/db[k'] (1). Second-order schemes carry c2/c3 as None.
    """

    scheme: SchemeKind
    grid: TimeGrid
    pairs: tuple
    c1: np.ndarray
    dc1: np.ndarray
    c2: np.ndarray | None = None
    dc2: np.ndarray | None = None
    c3: np.ndarray | None = None
    dc3: np.ndarray | None = None

    def c3_entry(self, j: int, k: int, kp: int) -> float:
        """c3 for an arbitrary ordered channel pair; antisymmetric in (k, kp)."""
        if self.c3 is None:
            raise ValueError(f"{self.scheme.value} carries no commutator coefficients")
        if k == kp:
            return 0.0
        if k < kp:
            return float(self.c3[j, self.pairs.index((k, kp))])
        return -float(self.c3[j, self.pairs.index((kp, k))])


def _tile_channels(table: np.ndarray, n_controls: int) -> np.ndarray:
    """Expand a (n_steps, n_basis) table to (n_steps, n_controls, n_basis).

    All channels share one basis set, so the derivative of c[k] with respect
    to b[k, n] is channel-independent.
    """
    return np.ascontiguousarray(
        np.broadcast_to(table[:, None, :], (table.shape[0], n_controls, table.shape[1]))
    )


def _composite_step(basis_fn, t0, dt, n_basis, x, w, cuts, fourth_order):
    """Single-step tables with the quadrature split at interior kink times.

    cuts are local offsets in (0, dt) where the integrand loses smoothness
    (the envelope ramp edges). Each smooth piece gets its own scaled copy of
    the node set; the inner antiderivative accumulates full-piece prefixes.
    """
    edges = [0.0, *cuts, dt]
    single = np.zeros(n_basis)
    nested = np.zeros(n_basis) if fourth_order else None
    cross = np.zeros((n_basis, n_basis)) if fourth_order else None
    prefix = np.zeros(n_basis)  # integral of phi over [0, piece start]
    for a, b in zip(edges[:-1], edges[1:]):
        h = b - a
        local = a + 0.5 * h * (x + 1.0)  # outer nodes, step-local coordinates
        w_out = 0.5 * h * w
        phi = basis_fn(t0 + local)
        piece_single = w_out @ phi
        if fourth_order:
            # partial inner integrals from the piece start to each outer node
            span = local - a
            t_in = t0 + a + 0.5 * np.outer(span, x + 1.0)
            w_in = 0.5 * np.outer(span, w)
            phi_in = basis_fn(t_in.ravel()).reshape(x.size, x.size, n_basis)
            big_phi = prefix[None, :] + np.einsum("iq,iqn->in", w_in, phi_in)
            nested += w_out @ (big_phi - phi * local[:, None])
            cross += np.einsum("i,in,im->nm", w_out, phi, big_phi)
        single += piece_single
        prefix = prefix + piece_single
    return single, nested, cross


def _quadrature_tables(
    basis_fn, starts, dt, n_basis, nodes, fourth_order, breakpoints=(), chunk=256
):
    """Gauss-Legendre single/nested/cross integrals for an arbitrary basis.

    basis_fn maps a flat time array to an array (len(t), n_basis). Nested
    integrals use a tensor rule: the inner antiderivative is evaluated by a
    scaled copy of the same node set on [0, t1] for every outer node t1.
    breakpoints lists absolute times where the basis is not smooth; the few
    steps containing one are recomputed with a piecewise composite rule.
    """
    x, w = roots_legendre(nodes)
    off = 0.5 * dt * (x + 1.0)  # outer nodes in (0, dt)
    w_out = 0.5 * dt * w
    # inner nodes/weights for [0, off[i]], shape (nodes, nodes)
    off_in = 0.5 * np.outer(off, x + 1.0)
    w_in = 0.5 * np.outer(off, w)

    n_steps = starts.size
    single = np.empty((n_steps, n_basis))
    nested = np.empty((n_steps, n_basis)) if fourth_order else None
    cross = np.empty((n_steps, n_basis, n_basis)) if fourth_order else None

    for lo in range(0, n_steps, chunk):
        hi = min(lo + chunk, n_steps)
        t0 = starts[lo:hi]
        t_outer = t0[:, None] + off[None, :]
        phi = basis_fn(t_outer.ravel()).reshape(hi - lo, nodes, n_basis)
        single[lo:hi] = np.einsum("i,cin->cn", w_out, phi)
        if fourth_order:
            t_inner = t0[:, None, None] + off_in[None, :, :]
            phi_in = basis_fn(t_inner.ravel()).reshape(hi - lo, nodes, nodes, n_basis)
            # antiderivative Phi_n at every outer node
            big_phi = np.einsum("iq,ciqn->cin", w_in, phi_in)
            nested[lo:hi] = np.einsum(
                "i,cin->cn", w_out, big_phi - phi * off[None, :, None]
            )
            cross[lo:hi] = np.einsum("i,cin,cim->cnm", w_out, phi, big_phi)

    for j, cuts in _kink_steps(starts, dt, breakpoints).items():
        s, n, c = _composite_step(basis_fn, starts[j], dt, n_basis, x, w, cuts, fourth_order)
        single[j] = s
        if fourth_order:
            nested[j] = n
            cross[j] = c
    return single, nested, cross


def _kink_steps(starts, dt, breakpoints):
    """Map step index -> sorted local offsets of breakpoints strictly inside."""
    found = {}
    for bp in breakpoints:
        inside = (starts + 1e-12 * dt < bp) & (bp < starts + dt * (1.0 - 1e-12))
        for j in np.nonzero(inside)[0]:
            found.setdefault(int(j), []).append(bp - starts[j])
    return {j: sorted(cuts) for j, cuts in found.items()}


def _antiderivative(basis_fn, idx, t0, dt):
    """Dense-output antiderivative Phi_idx(t1) = int_0^t1 phi_idx(t0+t2) dt2.

    Solved as an ODE with an adaptive high-order Runge-Kutta method, which
    keeps the validation oracle independent of the fixed Gauss-Legendre
    tensor rule it is checking.
    """
    sol = integrate.solve_ivp(
        lambda t1, y: [basis_fn(np.array([t0 + t1]))[0, idx]],
        (0.0, dt),
        [0.0],
        method="DOP853",
        dense_output=True,
        rtol=1e-13,
        atol=1e-15,
    )
    if not sol.success:
        raise QuadratureError("antiderivative solve failed during validation", 0)
    return lambda t1: float(sol.sol(t1)[0])


def _adaptive_probe(basis_fn, t0, dt, n, m, fourth_order, cuts=()):
    """Adaptive reference values for one (step, n, m) probe.

    cuts are step-local kink offsets, handed to the adaptive rule so it
    subdivides there instead of hunting for the edge.
    """

    def phi(idx, t1):
        return basis_fn(np.array([t0 + t1]))[0, idx]

    quad_opts = dict(
        epsabs=1e-14, epsrel=1e-13, limit=200, points=list(cuts) or None
    )
    single = integrate.quad(lambda t1: phi(n, t1), 0.0, dt, **quad_opts)[0]
    if not fourth_order:
        return single, None, None

    big_phi_n = _antiderivative(basis_fn, n, t0, dt)
    big_phi_m = _antiderivative(basis_fn, m, t0, dt)
    nested = integrate.quad(
        lambda t1: big_phi_n(t1) - phi(n, t1) * t1, 0.0, dt, **quad_opts
    )[0]
    cross = integrate.quad(
        lambda t1: phi(n, t1) * big_phi_m(t1), 0.0, dt, **quad_opts
    )[0]
    return single, nested, cross


def _validation_defect(basis_fn, cache: BasisIntegralCache, breakpoints=()):
    """Worst probe disagreement between cached tables and the adaptive oracle."""
    rng = np.random.default_rng(_VALIDATION_SEED)
    grid, n_basis = cache.grid, cache.ansatz.n_basis
    worst, worst_step = 0.0, 0
    starts = grid.step_starts()
    kinks = _kink_steps(starts, grid.dt, breakpoints)
    for _ in range(VALIDATION_PROBES):
        j = int(rng.integers(grid.n_steps))
        n = int(rng.integers(n_basis))
        m = int(rng.integers(n_basis))
        single, nested, cross = _adaptive_probe(
            basis_fn, starts[j], grid.dt, n, m, cache.has_fourth_order,
            cuts=kinks.get(j, ()),
        )
        defect = abs(cache.single[j, n] - single)
        if cache.has_fourth_order:
            defect = max(defect, abs(cache.nested[j, n] - nested))
            defect = max(defect, abs(cache.cross[j, n, m] - cross))
        if defect > worst:
            worst, worst_step = defect, j
    return worst, worst_step


def precompute_basis_integrals(
    ansatz: ControlAnsatz,
    grid: TimeGrid,
    fourth_order: bool = True,
    validate: bool = True,
) -> BasisIntegralCache:
    """Build the coefficient-independent integral tables for exact schemes.

    Starts at 16 Gauss-Legendre nodes per step and escalates to 32 if the
    adaptive validation probes disagree by more than 1e-12 (carrier-modulated
    bases at coarse steps can need the higher order). Raises QuadratureError
    if the escalated rule still fails validation.
    """

    def basis_fn(t):
        return basis_matrix(ansatz, t)

    # The envelope ramp is only C1 at its edges; quadrature splits there.
    breakpoints = sorted(
        {ansatz.ramp_time, ansatz.total_duration - ansatz.ramp_time}
    )
    starts = grid.step_starts()
    for nodes in (QUADRATURE_NODES, QUADRATURE_NODES_ESCALATED):
        single, nested, cross = _quadrature_tables(
            basis_fn, starts, grid.dt, ansatz.n_basis, nodes, fourth_order,
            breakpoints=breakpoints,
        )
        cache = BasisIntegralCache(ansatz, grid, single, nested, cross, nodes)
        if not validate:
            return cache
        defect, step = _validation_defect(basis_fn, cache, breakpoints)
        if defect <= QUADRATURE_DEFECT_TOL:
            return cache
    raise QuadratureError(
        f"quadrature defect {defect:.3e} above {QUADRATURE_DEFECT_TOL:.0e} "
        f"at step {step} even with {QUADRATURE_NODES_ESCALATED} nodes",
        step_index=step,
    )


def _bilinear_tables(w_table: np.ndarray, b: np.ndarray, pairs: tuple):
    """c3 and dc3 from the per-step bilinear kernel W[j, n, m].

    c3[j, p] = b[k] . A[j] . b[k'] with A = W - W^T, so the derivative with
    respect to b[k] is A b[k'] and with respect to b[k'] is -A b[k].
    """
    n_steps, n_basis = w_table.shape[0], w_table.shape[1]
    a_table = w_table - np.swapaxes(w_table, 1, 2)
    w_flat = w_table.reshape(n_steps, -1)
    c3 = np.empty((n_steps, len(pairs)))
    dc3 = np.empty((n_steps, len(pairs), 2, n_basis))
    for p, (k, kp) in enumerate(pairs):
        # contract W against the antisymmetrized weight matrix, not b against
        # the antisymmetrized kernel: swapping the two controls then negates
        # every addend in place, so c3 flips sign bit-exactly
        u = np.outer(b[k], b[kp])
        c3[:, p] = w_flat @ (u - u.T).ravel()
        dc3[:, p, 0, :] = a_table @ b[kp]
        dc3[:, p, 1, :] = -(a_table @ b[k])
    return c3, dc3


def coefficients_m2exact(cache: BasisIntegralCache, b: np.ndarray) -> CoefficientTable:
    """First-order coefficients from exact single integrals."""
    b = validate_coefficients(cache.ansatz, b)
    return CoefficientTable(
        scheme=SchemeKind.M2EXACT,
        grid=cache.grid,
        pairs=control_pairs(cache.ansatz.n_controls),
        c1=cache.single @ b.T,
        dc1=_tile_channels(cache.single, cache.ansatz.n_controls),
    )


def coefficients_m2approx(
    ansatz: ControlAnsatz, grid: TimeGrid, b: np.ndarray
) -> CoefficientTable:
    """First-order coefficients from the midpoint rule (standard GRAPE)."""
    b = validate_coefficients(ansatz, b)
    phi_mid = basis_matrix(ansatz, grid.step_starts() + 0.5 * grid.dt)
    dc1 = grid.dt * phi_mid
    return CoefficientTable(
        scheme=SchemeKind.M2APPROX,
        grid=grid,
        pairs=control_pairs(ansatz.n_controls),
        c1=dc1 @ b.T,
        dc1=_tile_channels(dc1, ansatz.n_controls),
    )


def coefficients_m4exact(cache: BasisIntegralCache, b: np.ndarray) -> CoefficientTable:
    """Fourth-order coefficients from exact single and nested integrals."""
    if not cache.has_fourth_order:
        raise ValueError("cache was built without fourth-order tables")
    b = validate_coefficients(cache.ansatz, b)
    pairs = control_pairs(cache.ansatz.n_controls)
    c3, dc3 = _bilinear_tables(0.5 * cache.cross, b, pairs)
    return CoefficientTable(
        scheme=SchemeKind.M4EXACT,
        grid=cache.grid,
        pairs=pairs,
        c1=cache.single @ b.T,
        dc1=_tile_channels(cache.single, cache.ansatz.n_controls),
        c2=0.5 * (cache.nested @ b.T),
        dc2=_tile_channels(0.5 * cache.nested, cache.ansatz.n_controls),
        c3=c3,
        dc3=dc3,
    )


def coefficients_m4approx(
    ansatz: ControlAnsatz, grid: TimeGrid, b: np.ndarray
) -> CoefficientTable:
    """Fourth-order coefficients from two Gauss-Legendre samples per step.

    Nodes sit at t_j + (1/2 -+ sqrt(3)/6) dt. With u1, u2 the pulse values at
    the earlier/later node: c1 = dt (u1 + u2)/2, c2 = (sqrt(3)/12) dt^2
    (u1 - u2), and c3 comes from the kernel W[n, m] = (sqrt(3)/12) dt^2
    phi_n(node2) phi_m(node1).
    """
    b = validate_coefficients(ansatz, b)
    dt = grid.dt
    starts = grid.step_starts()
    shift = np.sqrt(3.0) / 6.0
    phi1 = basis_matrix(ansatz, starts + (0.5 - shift) * dt)
    phi2 = basis_matrix(ansatz, starts + (0.5 + shift) * dt)
    prefactor = np.sqrt(3.0) / 12.0 * dt * dt
    dc1 = 0.5 * dt * (phi1 + phi2)
    dc2 = prefactor * (phi1 - phi2)
    pairs = control_pairs(ansatz.n_controls)
    w_table = prefactor * phi2[:, :, None] * phi1[:, None, :]
    c3, dc3 = _bilinear_tables(w_table, b, pairs)
    return CoefficientTable(
        scheme=SchemeKind.M4APPROX,
        grid=grid,
        pairs=pairs,
        c1=dc1 @ b.T,
        dc1=_tile_channels(dc1, ansatz.n_controls),
        c2=dc2 @ b.T,
        dc2=_tile_channels(dc2, ansatz.n_controls),
        c3=c3,
        dc3=dc3,
    )


def build_table(
    scheme: SchemeKind,
    ansatz: ControlAnsatz,
    grid: TimeGrid,
    b: np.ndarray,
    cache: BasisIntegralCache | None = None,
) -> CoefficientTable:
    """Coefficient table for any scheme, building the cache if required."""
    if scheme.exact_integrals:
        if cache is None:
            cache = precompute_basis_integrals(
                ansatz, grid, fourth_order=scheme.fourth_order
            )
        if cache.grid != grid or cache.ansatz != ansatz:
            raise ValueError("cache was built for a different ansatz or grid")
        if scheme is SchemeKind.M2EXACT:
            return coefficients_m2exact(cache, b)
        return coefficients_m4exact(cache, b)
    if scheme is SchemeKind.M2APPROX:
        return coefficients_m2approx(ansatz, grid, b)
    return coefficients_m4approx(ansatz, grid, b)


def cache_key(ansatz: ControlAnsatz, grid: TimeGrid, fourth_order: bool) -> str:
    """Stable fingerprint of everything the integral tables depend on."""
    payload = json.dumps(
        {
            "n_controls": ansatz.n_controls,
            "n_basis": ansatz.n_basis,
            "total_duration": float(ansatz.total_duration).hex(),
            "ramp_time": float(ansatz.ramp_time).hex(),
            "carrier_frequency": None
            if ansatz.carrier_frequency is None
            else float(ansatz.carrier_frequency).hex(),
            "carrier_scale": float(ansatz.carrier_scale).hex(),
            "grid_duration": float(grid.total_duration).hex(),
            "n_steps": grid.n_steps,
            "fourth_order": fourth_order,
        },
        sort_keys=True,
    )
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def save_cache(cache: BasisIntegralCache, directory: str) -> str:
    """Persist integral tables; returns the file path."""
    os.makedirs(directory, exist_ok=True)
    key = cache_key(cache.ansatz, cache.grid, cache.has_fourth_order)
    path = os.path.join(directory, f"basis_integrals_{key}.npz")
    arrays = {"single": cache.single, "nodes": np.array(cache.nodes)}
    if cache.has_fourth_order:
        arrays["nested"] = cache.nested
        arrays["cross"] = cache.cross
    np.savez(path, **arrays)
    return path


def load_cache(
    ansatz: ControlAnsatz, grid: TimeGrid, directory: str, fourth_order: bool = True
) -> BasisIntegralCache | None:
    """Load previously saved tables for this exact ansatz/grid; None on miss."""
    key = cache_key(ansatz, grid, fourth_order)
    path = os.path.join(directory, f"basis_integrals_{key}.npz")
    if not os.path.exists(path):
        return None
    with np.load(path) as data:
        return BasisIntegralCache(
            ansatz=ansatz,
            grid=grid,
            single=data["single"],
            nested=data["nested"] if "nested" in data else None,
            cross=data["cross"] if "cross" in data else None,
            nodes=int(data["nodes"]),
        )
