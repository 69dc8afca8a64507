import numpy as np
import pytest
import scipy.linalg as sla
from hypothesis import given, settings, strategies as st

from qdiffusion.errors import NotIsolated, StripViolation
from qdiffusion.lindblad_spectral import (
    build_generator,
    diffusion_from_curvature,
    fiber_operator,
    fiber_scan,
    kinetic_symbol,
    lamb_shift,
    lamb_shift_closed_form,
    leading_eigen,
    spectral_constants,
    translate_fiber,
)
from qdiffusion.markov import (
    RateTable,
    diffusion_green_kubo,
    generator_matrix,
    jump_rates,
    stationary_density,
)
from qdiffusion.model import BathSpec, SpinSystem, build_model, group_velocity, spectral_measure, spectral_measures

L = 8
TORUS = build_model({"lattice": {"d": 1, "L": L, "grid": L}})


@pytest.fixture(scope="module")
def generator():
    return build_generator(TORUS)


@pytest.fixture(scope="module")
def superop(generator):
    return generator.superoperator()


@pytest.fixture(scope="module")
def rates():
    m = build_model({"lattice": {"grid": 8}})
    return jump_rates(m.spin, spectral_measures(m))


def _random_state(rng, dim):
    a = rng.normal(size=(dim, dim)) + 1j * rng.normal(size=(dim, dim))
    rho = a @ a.conj().T
    return rho / np.trace(rho)


def test_generator_preserves_trace_and_hermiticity(generator):
    rng = np.random.default_rng(0)
    for _ in range(5):
        x = rng.normal(size=(generator.dim,) * 2) + 1j * rng.normal(size=(generator.dim,) * 2)
        out = generator.apply(x)
        assert abs(np.trace(out)) < 1e-12 * np.abs(x).sum()
        assert np.abs(generator.apply(x.conj().T) - out.conj().T).max() < 1e-12


def test_jump_part_is_completely_positive(generator):
    dim = generator.dim
    choi = np.zeros((dim * dim, dim * dim), dtype=complex)
    for i in range(dim):
        for j in range(dim):
            e = np.zeros((dim, dim))
            e[i, j] = 1
            choi += np.kron(e, generator.jump_part(e))
    assert np.allclose(choi, choi.conj().T)
    assert np.linalg.eigvalsh(choi).min() > -1e-12 * np.abs(choi).max()


def test_semigroup_keeps_states_positive(generator, superop):
    rho = _random_state(np.random.default_rng(1), generator.dim)
    for t in (0.5, 3.0):
        out = (sla.expm(t * superop) @ rho.ravel()).reshape(rho.shape)
        assert np.trace(out).real == pytest.approx(1.0, abs=1e-10)
        assert np.linalg.eigvalsh(0.5 * (out + out.conj().T)).min() > -1e-10


def test_generator_commutes_with_lattice_translations(generator):
    n = generator.spin.n_levels
    shift = np.kron(np.roll(np.eye(L), 1, axis=0), np.eye(n))
    rho = _random_state(np.random.default_rng(2), generator.dim)
    lhs = generator.apply(shift @ rho @ shift.T)
    rhs = shift @ generator.apply(rho) @ shift.T
    assert np.abs(lhs - rhs).max() < 1e-13


def test_plane_wave_blocks_reproduce_markov_generator(generator):
    # the diagonal-level block at fixed total momentum is the classical jump generator
    meas = {e: spectral_measure(e, TORUS.bath, L) for e in (-0.6, 0.6)}
    G = generator_matrix(jump_rates(TORUS.spin, meas))
    n = 2
    x = np.arange(L)

    def ket(e, a):
        return np.kron(np.exp(2j * np.pi * a * x / L) / np.sqrt(L), np.eye(n)[e])

    for shift in (0, 1, 3):
        A = np.zeros((n * L, n * L), dtype=complex)
        for e in range(n):
            for a in range(L):
                out = generator.apply(np.outer(ket(e, a), ket(e, (a - shift) % L).conj()))
                for e2 in range(n):
                    for a2 in range(L):
                        A[e2 * L + a2, e * L + a] = ket(e2, a2).conj() @ out @ ket(e2, (a2 - shift) % L)
        assert np.abs(A - G).max() < 1e-12


def test_lamb_shift_quadrature_matches_closed_form(generator):
    for eps, t_eps in generator.lamb_by_eps.items():
        nu = spectral_measure(eps, TORUS.bath, L).nu
        assert t_eps == pytest.approx(lamb_shift_closed_form(eps, TORUS.bath, nu), rel=1e-9)
    bath = BathSpec(d=2, L=12, betas=(1.0, 2.5))
    for eps in (0.45, -0.8):
        assert lamb_shift(eps, bath, 0.2) == pytest.approx(lamb_shift_closed_form(eps, bath, 0.2), rel=1e-9)


def test_lamb_shift_vanishes_without_coupling_to_modes():
    bath = BathSpec(d=1, L=8, phi_amplitude=0.0)
    assert lamb_shift(0.5, bath, 0.1) == 0.0


# ---------------------------------------------------------------------------
# kinetic symbol and fibers
# ---------------------------------------------------------------------------

@settings(max_examples=60, deadline=None)
@given(p=st.lists(st.floats(-3, 3), min_size=2, max_size=2),
       k=st.lists(st.floats(-3, 3), min_size=2, max_size=2), m_p=st.floats(0.3, 4))
def test_kinetic_symbol_is_product_of_sines(p, k, m_p):
    p, k = np.array(p), np.array(k)
    expect = -(4 / m_p) * np.sum(np.sin(p / 2) * np.sin(k))
    assert kinetic_symbol(p, k, m_p) == pytest.approx(expect, abs=1e-12)
    assert kinetic_symbol(-p, k, m_p) == pytest.approx(-expect, abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(k=st.floats(-np.pi, np.pi), m_p=st.floats(0.3, 4))
def test_kinetic_symbol_slope_is_minus_velocity(k, m_p):
    h = 1e-6
    slope = (kinetic_symbol([h], [k], m_p) - kinetic_symbol([-h], [k], m_p)) / (2 * h)
    assert slope == pytest.approx(-group_velocity(k, m_p), abs=1e-8)


def test_nonzero_frequency_fiber_is_diagonal(rates):
    lamb = np.array([0.3, -0.1])
    fib = fiber_operator(0.6, [0.4], rates, lamb)
    assert np.count_nonzero(fib.matrix - np.diag(np.diag(fib.matrix))) == 0
    e, e2 = fib.levels_pair
    assert np.allclose(np.diag(fib.matrix).real, -0.5 * (rates.escape[e] + rates.escape[e2]))
    assert np.diag(fib.matrix).imag[0] == pytest.approx(-lamb[e] + lamb[e2])
    with pytest.raises(ValueError):
        fiber_operator(0.123, [0.0], rates)


def test_zero_momentum_fiber_has_stationary_eigenpair(rates):
    lead = leading_eigen(fiber_operator(0.0, [0.0], rates))
    assert lead.value == 0
    assert np.allclose(lead.left, 1.0)
    assert np.allclose(lead.right, stationary_density(rates).prob, atol=1e-12)
    assert lead.gap > 0


@pytest.mark.parametrize("kappa", [2 * np.pi * 3 / 8, 0.37, 0.2 + 0.15j])
def test_translation_shifts_kinetic_symbol(rates, kappa):
    p = np.array([0.5 + 0.1j])
    fib = fiber_operator(0.0, p, rates)
    moved = translate_fiber(fib, rates, kappa)
    assert np.abs(moved - fiber_operator(0.0, p, rates, k_shift=kappa).matrix).max() < 1e-12


def test_strip_violation(rates):
    with pytest.raises(StripViolation):
        fiber_operator(0.0, [0.1 + 0.6j], rates, gamma0=0.5)


def test_reducible_generator_has_no_isolated_eigenvalue():
    spin = SpinSystem(np.array([-1.0, 1.0]), np.array([[0, 1], [1, 0]], complex))
    even = np.zeros((2, 2, 4))
    even[0, 1, [0, 2]] = even[1, 0, [0, 2]] = 1.0
    with pytest.raises(NotIsolated):
        leading_eigen(fiber_operator(0.0, [0.0], RateTable(spin, even)))


@settings(max_examples=20, deadline=None)
@given(s=st.floats(0.01, np.pi))
def test_fiber_spectrum_is_even_and_decaying(rates, s):
    top = [sla.eigvals(fiber_operator(0.0, [x], rates).matrix).real.max() for x in (s, -s)]
    assert abs(top[0] - top[1]) < 1e-10
    assert top[0] < 0


@settings(max_examples=20, deadline=None)
@given(s=st.floats(0.01, 0.6))
def test_leading_eigenvalue_is_even_near_zero(rates, s):
    f_plus = leading_eigen(fiber_operator(0.0, [s], rates)).value
    f_minus = leading_eigen(fiber_operator(0.0, [-s], rates)).value
    assert abs(f_plus - f_minus) < 1e-10
    assert abs(f_plus.imag) < 1e-10 and f_plus.real < 0


def test_curvature_matches_green_kubo(rates):
    res = diffusion_from_curvature(rates)
    gk = diffusion_green_kubo(rates).D
    assert res.D > 0
    assert res.D == pytest.approx(gk, rel=1e-8)
    assert res.residual_exponent == pytest.approx(4.0, abs=0.3)


def test_curvature_in_two_dimensions():
    m = build_model({"lattice": {"d": 2, "L": 16, "grid": 6}})
    r = jump_rates(m.spin, spectral_measures(m))
    res = diffusion_from_curvature(r)
    assert res.D_axes[0] == pytest.approx(res.D_axes[1], rel=1e-9)
    assert res.D == pytest.approx(diffusion_green_kubo(r).D, rel=1e-7)


def test_spectral_constants_and_scan(rates):
    consts = spectral_constants(rates)
    assert consts.a_q > 0 and consts.b_q > 0 and 0 < consts.p_q <= np.pi and consts.gamma0 > 0
    scan = fiber_scan(rates, consts, n_points=32)
    assert scan.violations == 0
    assert np.all(scan.max_re[np.abs(scan.p) >= consts.p_q] <= -consts.b_q)
