import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qdiffusion.errors import (
    ConfigError,
    DegenerateSpectrum,
    EmptyShell,
    NonHermitianCoupling,
    StripViolation,
    ZeroDispersion,
)
from qdiffusion.model import (
    BathSpec,
    SpinSystem,
    bath_correlation,
    build_model,
    correlation_field,
    decay_check,
    free_energy,
    group_velocity,
    load_config,
    spectral_measure,
    spectral_measures,
)

SIGMA_X = [[0, 1], [1, 0]]


def test_valid_two_level_model_in_three_dimensions():
    m = build_model({
        "spin": {"levels": [-1, 1], "W": SIGMA_X},
        "bath": {"dispersion": "optical", "m_ph": 0.3},
        "lattice": {"d": 3, "L": 16, "grid": 16},
    })
    assert m.d == 3 and m.bath.L == 16
    assert np.all(m.bath.omega(m.bath.momenta()) > 0)
    assert m.params.t0 == pytest.approx(1.0 / 0.1**2)


def test_repeated_bohr_gap_is_rejected():
    with pytest.raises(DegenerateSpectrum):
        build_model({"spin": {"levels": [0, 1, 2], "W": np.ones((3, 3)).tolist()}})


def test_repeated_level_is_rejected():
    with pytest.raises(DegenerateSpectrum):
        SpinSystem(np.array([0.0, 0.0]), np.array(SIGMA_X))


def test_non_hermitian_coupling_is_rejected():
    with pytest.raises(NonHermitianCoupling):
        build_model({"spin": {"levels": [-1, 1], "W": [[0, 1], [2, 0]]}})


def test_acoustic_zero_mode_is_rejected():
    with pytest.raises(ZeroDispersion):
        BathSpec(d=1, L=8, dispersion="acoustic", m_ph=0.0, include_zero_mode=True)
    bath = BathSpec(d=1, L=8, dispersion="acoustic", m_ph=0.0)
    assert bath.retained().sum() == 7


def test_config_errors():
    with pytest.raises(ConfigError):
        load_config({"unknown_section": {}})
    with pytest.raises(ConfigError):
        build_model({"lattice": {"L": 7}})
    with pytest.raises(ConfigError):
        build_model({"params": {"lambda": 0.0}})


def test_config_file_round_trip(tmp_path):
    path = tmp_path / "model.yaml"
    path.write_text("spin:\n  levels: [-0.5, 0.5]\nlattice:\n  L: 32\n")
    cfg = load_config(path)
    assert cfg["spin"]["levels"] == [-0.5, 0.5]
    assert cfg["lattice"]["L"] == 32 and cfg["lattice"]["d"] == 1
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.yaml")


def test_coupling_pairs_are_row_major():
    m = build_model({"spin": {"levels": [-1, 1], "W": [[0, 0], [0, -1], [0, 1], [0, 0]]}})
    assert m.spin.coupling[0, 1] == -1j and m.spin.coupling[1, 0] == 1j


# ---------------------------------------------------------------------------
# correlation function
# ---------------------------------------------------------------------------

BATH_2D = BathSpec(d=2, L=12, betas=(1.0, 1.5))


@settings(max_examples=40, deadline=None)
@given(x=st.tuples(st.integers(-6, 6), st.integers(-6, 6)), t=st.floats(-20, 20))
def test_correlation_is_lattice_symmetric(x, t):
    ref = bath_correlation(np.array(x, float), t, BATH_2D)
    images = [(-x[0], x[1]), (x[0], -x[1]), (x[1], x[0]), (-x[1], x[0]), (-x[0], -x[1])]
    for y in images:
        assert abs(bath_correlation(np.array(y, float), t, BATH_2D) - ref) < 1e-12 * max(1, abs(ref))


@settings(max_examples=40, deadline=None)
@given(x=st.tuples(st.integers(-6, 6), st.integers(-6, 6)), t=st.floats(-20, 20))
def test_correlation_time_reflection_is_conjugation(x, t):
    xx = np.array(x, float)
    assert abs(bath_correlation(xx, -t, BATH_2D) - np.conj(bath_correlation(xx, t, BATH_2D))) < 1e-12


def test_single_mode_value():
    class OneMode(BathSpec):
        def mode_table(self):
            return np.zeros((1, 1)), np.ones(1), np.ones(1)

    bath = OneMode(d=1, L=2, betas=(1.0, 1.0))
    vol = 2 * np.pi / bath.L
    per_reservoir = bath_correlation(np.zeros(1), 0.0, bath) / (2 * vol)
    e = np.e
    assert per_reservoir == pytest.approx(1 / (e - 1) + 1 / (1 - 1 / e), rel=1e-14)


def test_correlation_field_matches_mode_sum():
    xs = np.stack(np.meshgrid(np.arange(12), np.arange(12), indexing="ij"), -1).reshape(-1, 2)
    for t in (0.0, 1.3, 0.4 + 0.5j):
        direct = bath_correlation(xs.astype(float), t, BATH_2D).reshape(12, 12)
        assert np.abs(correlation_field(t, BATH_2D) - direct).max() < 1e-12


def test_strip_violation():
    with pytest.raises(StripViolation):
        bath_correlation(np.zeros(2), 0.3 + 1.2j, BATH_2D)
    with pytest.raises(StripViolation):
        bath_correlation(np.zeros(2), -0.1j, BATH_2D)
    bath_correlation(np.zeros(2), 1.0j, BATH_2D)


# ---------------------------------------------------------------------------
# spectral measures
# ---------------------------------------------------------------------------

def test_zero_frequency_measure_vanishes():
    m = spectral_measure(0.0, BathSpec(d=1, L=64), 32)
    assert m.total_mass == 0 and not m.weights.any()


@settings(max_examples=25, deadline=None)
@given(eps=st.floats(0.35, 1.0), sign=st.sampled_from([-1, 1]), bins=st.sampled_from([16, 32, 64]))
def test_measure_weights_are_nonnegative_and_finite(eps, sign, bins):
    m = spectral_measure(sign * eps, BathSpec(d=1, L=128), bins)
    assert np.all(m.weights >= 0) and np.isfinite(m.total_mass) and m.total_mass > 0


def test_mass_grows_with_form_factor_support():
    masses = [spectral_measure(0.6, BathSpec(d=1, L=128, phi_radius=r), 32).total_mass for r in (1.0, 2.0, 3.0)]
    assert masses[0] <= masses[1] <= masses[2]


def test_binning_preserves_mass():
    bath = BathSpec(d=2, L=16)
    fine = spectral_measure(0.6, bath, 16, nu=0.1)
    coarse = spectral_measure(0.6, bath, 8, nu=0.1)
    assert coarse.total_mass == pytest.approx(fine.total_mass, rel=1e-13)


def test_empty_shell():
    with pytest.raises(EmptyShell):
        spectral_measure(5.0, BathSpec(d=1, L=16), 16, nu=0.01)


def test_every_bohr_frequency_gets_a_measure():
    m = build_model({"spin": {"levels": [-0.3, 0.1, 0.45], "W": np.ones((3, 3)).tolist()}})
    meas = spectral_measures(m)
    assert sorted(meas) == pytest.approx(sorted(m.spin.bohr_frequencies.tolist()))


SHELL_BATH = BathSpec(d=1, L=128, betas=(1.0, 2.0))


def _clear_nu(eps, target, margin):
    """A width near ``target`` whose window edges stay ``margin`` away from every mode."""
    _, w, _ = SHELL_BATH.mode_table()
    for nu in np.linspace(target, 1.5 * target, 400):
        if np.min(np.abs(np.abs(w - abs(eps)) - nu)) > margin:
            return float(nu)
    raise AssertionError("no clear window width")


def _time_oracle(eps, x, nu):
    # int dt e^{-i eps t} zeta(x, t) sinc(nu t) is the box-mollified measure; the
    # Gaussian taper is wide enough that window edges 0.004 from a mode stay sharp
    T = 1500.0
    dt = 0.25
    t = np.arange(-5 * T, 5 * T, dt)
    total = 0.0
    for chunk in np.array_split(t, t.size // 4000 + 1):
        z = bath_correlation(np.array([[float(x)]]), chunk, SHELL_BATH)[:, 0]
        window = np.sinc(nu * chunk / np.pi) * np.exp(-(chunk / T) ** 2)
        total += np.sum(np.exp(-1j * eps * chunk) * z * window) * dt
    return total


@pytest.mark.slow
@pytest.mark.parametrize("eps", [0.6, -0.6])
@pytest.mark.parametrize("target", [0.08, 0.02])
def test_measure_matches_time_integral(eps, target):
    # residual is the Bose factor taken at eps instead of at each mode inside the window
    nu = _clear_nu(eps, target, margin=0.004)
    meas = spectral_measure(eps, SHELL_BATH, SHELL_BATH.L, nu)
    scale = abs(_time_oracle(eps, 0, nu))
    for x in (0, 1, 3):
        assert abs(meas.fourier(np.array([[x]]))[0] - _time_oracle(eps, x, nu)) < 0.03 * scale


# ---------------------------------------------------------------------------
# kinematics and decay
# ---------------------------------------------------------------------------

def test_group_velocity_values():
    assert np.all(group_velocity(np.zeros(3), 1.0) == 0)
    assert group_velocity([np.pi / 2, 0, 0], 1.0) == pytest.approx([2, 0, 0], abs=1e-15)


@settings(max_examples=50, deadline=None)
@given(k=st.lists(st.floats(-np.pi, np.pi), min_size=1, max_size=3), m_p=st.floats(0.2, 5))
def test_group_velocity_is_odd_gradient(k, m_p):
    k = np.array(k)
    v = group_velocity(k, m_p)
    assert np.all(group_velocity(-k, m_p) == -v)
    h = 1e-5
    for i in range(k.size):
        e = np.zeros_like(k)
        e[i] = h
        fd = (free_energy(k + e, m_p) - free_energy(k - e, m_p)) / (2 * h)
        assert abs(fd - v[i]) <= 1e-6 * max(1.0, abs(v[i]))


def test_optical_decay_passes_in_three_dimensions():
    r = decay_check(BathSpec(d=3, L=32, dispersion="optical", m_ph=0.3), 0.4, 25.0, n_times=24)
    assert r.passes
    assert r.fitted_exponent == pytest.approx(1.5, abs=0.15)


@pytest.mark.slow
def test_acoustic_decay_fails_in_three_dimensions():
    r = decay_check(BathSpec(d=3, L=64, dispersion="acoustic", m_ph=0.0), 0.4, 60.0, n_times=24)
    assert not r.passes
    assert r.fitted_exponent == pytest.approx(1.0, abs=0.15)


def test_zero_form_factor_trivially_passes():
    r = decay_check(BathSpec(d=1, L=16, phi_amplitude=0.0), 0.5, 10.0)
    assert r.passes
    with pytest.raises(ValueError):
        decay_check(BathSpec(d=1, L=16), 1.5, 10.0)
