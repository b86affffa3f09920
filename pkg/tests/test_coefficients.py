import numpy as np
import pytest

import oracles
from magnuspulse.controls import ControlAnsatz, basis_matrix, pulse_value
from magnuspulse.coefficients import (
    BasisIntegralCache,
    QuadratureError,
    SchemeKind,
    TimeGrid,
    _quadrature_tables,
    build_table,
    cache_key,
    coefficients_m2approx,
    coefficients_m2exact,
    coefficients_m4approx,
    coefficients_m4exact,
    control_pairs,
    load_cache,
    precompute_basis_integrals,
    save_cache,
)


def make_ansatz(**overrides):
    kwargs = dict(
        n_controls=2,
        n_basis=8,
        total_duration=2.9,
        ramp_time=0.29,
        amplitude_bounds=((-1.0, 1.0), (-1.0, 1.0)),
    )
    kwargs.update(overrides)
    return ControlAnsatz(**kwargs)


class TestTimeGrid:
    def test_dt_and_times(self):
        grid = TimeGrid(2.9, 10)
        assert grid.dt == pytest.approx(0.29)
        t = grid.times()
        assert t.size == 11
        assert t[0] == 0.0 and t[-1] == 2.9
        assert grid.step_starts().size == 10
        assert np.allclose(np.diff(t), grid.dt)

    def test_validation(self):
        with pytest.raises(ValueError):
            TimeGrid(2.9, 0)
        with pytest.raises(ValueError):
            TimeGrid(-1.0, 4)


class TestQuadratureKernel:
    # The fixed-order rule checked on integrands with known antiderivatives.

    def test_constant_basis(self):
        dt = 0.7
        single, nested, cross = _quadrature_tables(
            lambda t: np.ones((t.size, 1)), np.array([0.0]), dt, 1, 16, True
        )
        assert single[0, 0] == pytest.approx(dt, abs=1e-15)
        # int (t1 - t1) dt1 vanishes identically for a constant field
        assert nested[0, 0] == pytest.approx(0.0, abs=1e-15)
        assert cross[0, 0, 0] == pytest.approx(dt**2 / 2, abs=1e-14)

    def test_linear_basis(self):
        dt = 0.53
        single, nested, cross = _quadrature_tables(
            lambda t: t[:, None], np.array([0.0]), dt, 1, 16, True
        )
        assert single[0, 0] == pytest.approx(dt**2 / 2, rel=1e-14)
        assert nested[0, 0] == pytest.approx(-(dt**3) / 6, rel=1e-13)
        assert cross[0, 0, 0] == pytest.approx(dt**4 / 8, rel=1e-13)

    def test_time_translation_for_constant_basis(self):
        # A time-independent field gives identical rows for every step.
        starts = np.array([0.0, 1.3, 7.7])
        single, nested, cross = _quadrature_tables(
            lambda t: np.full((t.size, 2), 1.5), starts, 0.4, 2, 16, True
        )
        for table in (single, nested, cross):
            assert np.allclose(table[1:], table[:1], atol=1e-15)

    def test_chunking_matches_single_pass(self):
        ansatz = make_ansatz()
        grid = TimeGrid(ansatz.total_duration, 9)

        def basis(t):
            return basis_matrix(ansatz, t)

        a = _quadrature_tables(basis, grid.step_starts(), grid.dt, 8, 16, True, chunk=2)
        b = _quadrature_tables(
            basis, grid.step_starts(), grid.dt, 8, 16, True, chunk=512
        )
        for x, y in zip(a, b):
            assert np.array_equal(x, y)


class TestBasisIntegralCache:
    def test_single_matches_adaptive_oracle(self):
        ansatz = make_ansatz()
        grid = TimeGrid(ansatz.total_duration, 7)
        cache = precompute_basis_integrals(ansatz, grid, fourth_order=False)
        rng = np.random.default_rng(51)
        starts = grid.step_starts()
        for _ in range(8):
            j = int(rng.integers(grid.n_steps))
            n = int(rng.integers(8))
            expected = oracles.single_integral(ansatz, n, starts[j], grid.dt)
            assert cache.single[j, n] == pytest.approx(expected, abs=1e-13)

    def test_nested_and_cross_match_adaptive_oracle(self):
        ansatz = make_ansatz()
        grid = TimeGrid(ansatz.total_duration, 5)
        cache = precompute_basis_integrals(ansatz, grid, validate=False)
        rng = np.random.default_rng(52)
        starts = grid.step_starts()
        for _ in range(6):
            j = int(rng.integers(grid.n_steps))
            n = int(rng.integers(8))
            m = int(rng.integers(8))
            assert cache.nested[j, n] == pytest.approx(
                oracles.nested_integral(ansatz, n, starts[j], grid.dt), abs=1e-13
            )
            assert cache.cross[j, n, m] == pytest.approx(
                oracles.cross_integral(ansatz, n, m, starts[j], grid.dt), abs=1e-13
            )

    def test_cross_symmetrization_identity(self):
        # G[n,m] + G[m,n] = I_n I_m since both sides integrate d(Phi_n Phi_m).
        ansatz = make_ansatz()
        grid = TimeGrid(ansatz.total_duration, 6)
        cache = precompute_basis_integrals(ansatz, grid, validate=False)
        outer = cache.single[:, :, None] * cache.single[:, None, :]
        assert np.allclose(cache.cross + np.swapaxes(cache.cross, 1, 2), outer, atol=1e-13)

    def test_second_order_cache_is_lean(self):
        ansatz = make_ansatz()
        cache = precompute_basis_integrals(
            ansatz, TimeGrid(ansatz.total_duration, 4), fourth_order=False
        )
        assert cache.nested is None and cache.cross is None
        assert not cache.has_fourth_order

    def test_deterministic_rebuild(self):
        ansatz = make_ansatz()
        grid = TimeGrid(ansatz.total_duration, 5)
        c1 = precompute_basis_integrals(ansatz, grid, validate=False)
        c2 = precompute_basis_integrals(ansatz, grid, validate=False)
        assert np.array_equal(c1.single, c2.single)
        assert np.array_equal(c1.cross, c2.cross)

    def test_escalation_on_fast_carrier(self):
        # One coarse step across many carrier periods defeats 16 nodes.
        ansatz = make_ansatz(carrier_frequency=10.0)
        grid = TimeGrid(ansatz.total_duration, 2)
        cache = precompute_basis_integrals(ansatz, grid)
        assert cache.nodes == 32
        # and the escalated tables really are correct
        expected = oracles.single_integral(ansatz, 3, grid.step_starts()[1], grid.dt)
        assert cache.single[1, 3] == pytest.approx(expected, abs=1e-12)

    def test_unresolvable_carrier_raises(self):
        ansatz = make_ansatz(carrier_frequency=300.0)
        grid = TimeGrid(ansatz.total_duration, 1)
        with pytest.raises(QuadratureError) as err:
            precompute_basis_integrals(ansatz, grid)
        assert err.value.step_index == 0


class TestM2Exact:
    def test_zero_coefficients(self):
        ansatz = make_ansatz()
        grid = TimeGrid(ansatz.total_duration, 6)
        cache = precompute_basis_integrals(ansatz, grid, fourth_order=False)
        table = coefficients_m2exact(cache, np.zeros((2, 8)))
        assert np.allclose(table.c1, 0.0)
        assert table.c2 is None and table.c3 is None

    def test_unit_coefficient_reads_cache(self):
        ansatz = make_ansatz()
        grid = TimeGrid(ansatz.total_duration, 6)
        cache = precompute_basis_integrals(ansatz, grid, fourth_order=False)
        b = np.zeros((2, 8))
        b[1, 4] = 1.0
        table = coefficients_m2exact(cache, b)
        assert np.allclose(table.c1[:, 1], cache.single[:, 4])
        assert np.allclose(table.c1[:, 0], 0.0)

    def test_steps_sum_to_whole_interval_integral(self):
        ansatz = make_ansatz()
        grid = TimeGrid(ansatz.total_duration, 16)
        cache = precompute_basis_integrals(ansatz, grid, fourth_order=False)
        rng = np.random.default_rng(53)
        b = rng.uniform(-1, 1, (2, 8))
        table = coefficients_m2exact(cache, b)
        from scipy.integrate import quad

        for k in range(2):
            whole, _ = quad(
                lambda t: pulse_value(ansatz, b, k, t),
                0.0,
                ansatz.total_duration,
                limit=300,
                epsabs=1e-13,
                points=[ansatz.ramp_time, ansatz.total_duration - ansatz.ramp_time],
            )
            assert table.c1[:, k].sum() == pytest.approx(whole, abs=1e-10)


class TestM2Approx:
    def test_midpoint_formula(self):
        ansatz = make_ansatz()
        grid = TimeGrid(ansatz.total_duration, 12)
        rng = np.random.default_rng(54)
        b = rng.uniform(-1, 1, (2, 8))
        table = coefficients_m2approx(ansatz, grid, b)
        mids = grid.step_starts() + grid.dt / 2
        for k in range(2):
            expected = grid.dt * pulse_value(ansatz, b, k, mids)
            assert np.allclose(table.c1[:, k], expected, atol=1e-14)

    def test_midpoint_defect_third_order(self):
        # Mean per-step midpoint error vs the exact integral shrinks 8x per
        # halving once dt resolves the fastest basis oscillation.
        ansatz = make_ansatz()
        rng = np.random.default_rng(55)
        b = rng.uniform(-1, 1, (2, 8))
        defects = []
        for n_steps in (32, 64):
            grid = TimeGrid(ansatz.total_duration, n_steps)
            cache = precompute_basis_integrals(
                ansatz, grid, fourth_order=False, validate=False
            )
            exact = coefficients_m2exact(cache, b)
            approx = coefficients_m2approx(ansatz, grid, b)
            starts = grid.step_starts()
            plateau = (starts >= ansatz.ramp_time) & (
                starts + grid.dt <= ansatz.total_duration - ansatz.ramp_time
            )
            defects.append(np.abs(exact.c1 - approx.c1)[plateau].mean())
        ratio = defects[0] / defects[1]
        assert 5.0 < ratio < 12.0


class TestM4Exact:
    def test_c2_c3_match_adaptive_oracle(self):
        ansatz = make_ansatz()
        grid = TimeGrid(ansatz.total_duration, 5)
        cache = precompute_basis_integrals(ansatz, grid, validate=False)
        rng = np.random.default_rng(56)
        b = rng.uniform(-1, 1, (2, 8))
        table = coefficients_m4exact(cache, b)
        starts = grid.step_starts()
        for j in (0, 3):
            for k in range(2):
                assert table.c2[j, k] == pytest.approx(
                    oracles.c2_oracle(ansatz, b, starts[j], grid.dt, k), abs=1e-12
                )
            assert table.c3[j, 0] == pytest.approx(
                oracles.c3_oracle(ansatz, b, starts[j], grid.dt, 0, 1), abs=1e-12
            )

    def test_single_channel_has_no_pairs(self):
        ansatz = make_ansatz(n_controls=1, amplitude_bounds=((-1.0, 1.0),))
        grid = TimeGrid(ansatz.total_duration, 4)
        cache = precompute_basis_integrals(ansatz, grid, validate=False)
        table = coefficients_m4exact(cache, np.ones((1, 8)))
        assert table.pairs == ()
        assert table.c3.shape == (4, 0)

    def test_proportional_pulses_kill_c3(self):
        # Parallel coefficient vectors lie in the kernel of the bilinear form.
        ansatz = make_ansatz()
        grid = TimeGrid(ansatz.total_duration, 6)
        cache = precompute_basis_integrals(ansatz, grid, validate=False)
        rng = np.random.default_rng(57)
        row = rng.uniform(-1, 1, 8)
        b = np.vstack([row, -2.7 * row])
        table = coefficients_m4exact(cache, b)
        assert np.abs(table.c3).max() <= 1e-14

    def test_c3_antisymmetric_access(self):
        ansatz = make_ansatz(
            n_controls=3,
            amplitude_bounds=((-1.0, 1.0), (-1.0, 1.0), (-1.0, 1.0)),
        )
        grid = TimeGrid(ansatz.total_duration, 3)
        cache = precompute_basis_integrals(ansatz, grid, validate=False)
        rng = np.random.default_rng(58)
        table = coefficients_m4exact(cache, rng.uniform(-1, 1, (3, 8)))
        assert table.pairs == ((0, 1), (0, 2), (1, 2))
        for j in range(3):
            for k in range(3):
                for kp in range(3):
                    assert table.c3_entry(j, k, kp) == -table.c3_entry(j, kp, k)


class TestM4Approx:
    def test_zero_coefficients(self):
        ansatz = make_ansatz()
        grid = TimeGrid(ansatz.total_duration, 5)
        table = coefficients_m4approx(ansatz, grid, np.zeros((2, 8)))
        for array in (table.c1, table.c2, table.c3):
            assert np.allclose(array, 0.0)

    def test_node_formulas(self):
        # c1 and c2 rebuilt directly from pulse values at the two nodes.
        ansatz = make_ansatz()
        grid = TimeGrid(ansatz.total_duration, 9)
        rng = np.random.default_rng(59)
        b = rng.uniform(-1, 1, (2, 8))
        table = coefficients_m4approx(ansatz, grid, b)
        starts = grid.step_starts()
        dt = grid.dt
        shift = np.sqrt(3) / 6
        for k in range(2):
            u1 = pulse_value(ansatz, b, k, starts + (0.5 - shift) * dt)
            u2 = pulse_value(ansatz, b, k, starts + (0.5 + shift) * dt)
            assert np.allclose(table.c1[:, k], dt * (u1 + u2) / 2, atol=1e-14)
            assert np.allclose(
                table.c2[:, k], np.sqrt(3) / 12 * dt**2 * (u1 - u2), atol=1e-14
            )
        u1x = pulse_value(ansatz, b, 0, starts + (0.5 - shift) * dt)
        u2x = pulse_value(ansatz, b, 0, starts + (0.5 + shift) * dt)
        u1y = pulse_value(ansatz, b, 1, starts + (0.5 - shift) * dt)
        u2y = pulse_value(ansatz, b, 1, starts + (0.5 + shift) * dt)
        expected_c3 = np.sqrt(3) / 12 * dt**2 * (u2x * u1y - u2y * u1x)
        assert np.allclose(table.c3[:, 0], expected_c3, atol=1e-14)

    def test_fifth_order_defect_vs_exact(self):
        # Two-node Gauss-Legendre tables approach the exact ones at O(dt^5).
        ansatz = make_ansatz()
        rng = np.random.default_rng(60)
        b = rng.uniform(-1, 1, (2, 8))
        defects_c2, defects_c3 = [], []
        for n_steps in (8, 16):
            grid = TimeGrid(ansatz.total_duration, n_steps)
            cache = precompute_basis_integrals(ansatz, grid, validate=False)
            exact = coefficients_m4exact(cache, b)
            approx = coefficients_m4approx(ansatz, grid, b)
            starts = grid.step_starts()
            plateau = (starts >= ansatz.ramp_time) & (
                starts + grid.dt <= ansatz.total_duration - ansatz.ramp_time
            )
            defects_c2.append(np.abs(exact.c2 - approx.c2)[plateau].max())
            defects_c3.append(np.abs(exact.c3 - approx.c3)[plateau].max())
        assert 20.0 < defects_c2[0] / defects_c2[1] < 50.0
        assert 20.0 < defects_c3[0] / defects_c3[1] < 50.0

    def test_c1_matches_exact_to_fourth_order(self):
        ansatz = make_ansatz()
        rng = np.random.default_rng(61)
        b = rng.uniform(-1, 1, (2, 8))
        defects = []
        for n_steps in (8, 16):
            grid = TimeGrid(ansatz.total_duration, n_steps)
            cache = precompute_basis_integrals(ansatz, grid, fourth_order=False)
            exact = coefficients_m2exact(cache, b)
            approx = coefficients_m4approx(ansatz, grid, b)
            starts = grid.step_starts()
            plateau = (starts >= ansatz.ramp_time) & (
                starts + grid.dt <= ansatz.total_duration - ansatz.ramp_time
            )
            defects.append(np.abs(exact.c1 - approx.c1)[plateau].max())
        # two-node Gauss-Legendre integrates degree-3 exactly: O(dt^5) defect
        assert 20.0 < defects[0] / defects[1] < 50.0


class TestDerivativeTables:
    def scheme_tables(self, ansatz, grid, b, cache):
        return {
            SchemeKind.M2EXACT: lambda bb: coefficients_m2exact(cache, bb),
            SchemeKind.M2APPROX: lambda bb: coefficients_m2approx(ansatz, grid, bb),
            SchemeKind.M4EXACT: lambda bb: coefficients_m4exact(cache, bb),
            SchemeKind.M4APPROX: lambda bb: coefficients_m4approx(ansatz, grid, bb),
        }

    def test_derivatives_match_finite_differences(self):
        ansatz = make_ansatz()
        grid = TimeGrid(ansatz.total_duration, 4)
        cache = precompute_basis_integrals(ansatz, grid, validate=False)
        rng = np.random.default_rng(62)
        b = rng.uniform(-1, 1, (2, 8))
        eps = 1e-6
        for scheme, build in self.scheme_tables(ansatz, grid, b, cache).items():
            table = build(b)
            for k in range(2):
                for n in range(8):
                    db = np.zeros_like(b)
                    db[k, n] = eps
                    plus, minus = build(b + db), build(b - db)
                    fd_c1 = (plus.c1 - minus.c1) / (2 * eps)
                    assert np.allclose(table.dc1[:, k, :][:, n], fd_c1[:, k], atol=1e-8)
                    assert np.allclose(fd_c1[:, 1 - k], 0.0, atol=1e-10)
                    if not scheme.fourth_order:
                        continue
                    fd_c2 = (plus.c2 - minus.c2) / (2 * eps)
                    assert np.allclose(table.dc2[:, k, n], fd_c2[:, k], atol=1e-8)
                    fd_c3 = (plus.c3 - minus.c3) / (2 * eps)
                    axis = 0 if k == 0 else 1
                    assert np.allclose(table.dc3[:, 0, axis, n], fd_c3[:, 0], atol=1e-8)

    def test_linear_reconstruction(self):
        # c1, c2 are linear and c3 bilinear in b, so contractions against the
        # derivative tables must rebuild the stored values exactly.
        ansatz = make_ansatz()
        grid = TimeGrid(ansatz.total_duration, 5)
        cache = precompute_basis_integrals(ansatz, grid, validate=False)
        rng = np.random.default_rng(63)
        b = rng.uniform(-1, 1, (2, 8))
        for build in self.scheme_tables(ansatz, grid, b, cache).values():
            table = build(b)
            c1 = np.einsum("jkn,kn->jk", table.dc1, b)
            assert np.allclose(c1, table.c1, atol=1e-14)
            if table.c2 is None:
                continue
            c2 = np.einsum("jkn,kn->jk", table.dc2, b)
            assert np.allclose(c2, table.c2, atol=1e-14)
            for p, (k, kp) in enumerate(table.pairs):
                half = 0.5 * (table.dc3[:, p, 0, :] @ b[k] + table.dc3[:, p, 1, :] @ b[kp])
                assert np.allclose(half, table.c3[:, p], atol=1e-14)


class TestBuildTable:
    def test_dispatch(self):
        ansatz = make_ansatz()
        grid = TimeGrid(ansatz.total_duration, 4)
        rng = np.random.default_rng(64)
        b = rng.uniform(-1, 1, (2, 8))
        cache = precompute_basis_integrals(ansatz, grid, validate=False)
        for scheme in SchemeKind:
            table = build_table(scheme, ansatz, grid, b, cache=cache)
            assert table.scheme is scheme
            assert (table.c2 is not None) == scheme.fourth_order

    def test_cache_mismatch_rejected(self):
        ansatz = make_ansatz()
        grid = TimeGrid(ansatz.total_duration, 4)
        other_grid = TimeGrid(ansatz.total_duration, 8)
        cache = precompute_basis_integrals(ansatz, grid, validate=False)
        with pytest.raises(ValueError):
            build_table(SchemeKind.M4EXACT, ansatz, other_grid, np.zeros((2, 8)), cache)

    def test_fourth_order_needs_full_cache(self):
        ansatz = make_ansatz()
        grid = TimeGrid(ansatz.total_duration, 4)
        cache = precompute_basis_integrals(ansatz, grid, fourth_order=False)
        with pytest.raises(ValueError):
            coefficients_m4exact(cache, np.zeros((2, 8)))


class TestCachePersistence:
    def test_roundtrip(self, tmp_path):
        ansatz = make_ansatz()
        grid = TimeGrid(ansatz.total_duration, 4)
        cache = precompute_basis_integrals(ansatz, grid, validate=False)
        save_cache(cache, str(tmp_path))
        loaded = load_cache(ansatz, grid, str(tmp_path))
        assert loaded is not None
        assert np.array_equal(loaded.single, cache.single)
        assert np.array_equal(loaded.nested, cache.nested)
        assert np.array_equal(loaded.cross, cache.cross)
        assert loaded.nodes == cache.nodes

    def test_miss_returns_none(self, tmp_path):
        ansatz = make_ansatz()
        assert load_cache(ansatz, TimeGrid(2.9, 4), str(tmp_path)) is None

    def test_key_separates_configurations(self):
        ansatz = make_ansatz()
        grid = TimeGrid(ansatz.total_duration, 4)
        base = cache_key(ansatz, grid, True)
        assert cache_key(ansatz, grid, False) != base
        assert cache_key(ansatz, TimeGrid(ansatz.total_duration, 8), True) != base
        assert cache_key(make_ansatz(ramp_time=0.3), grid, True) != base


def test_control_pairs():
    assert control_pairs(1) == ()
    assert control_pairs(2) == ((0, 1),)
    assert control_pairs(3) == ((0, 1), (0, 2), (1, 2))
