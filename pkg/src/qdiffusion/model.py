"""Physical model: spin levels, phonon reservoirs and their correlation functions.

Momentum arrays follow numpy FFT ordering: along each axis the index
``n`` runs over ``0, 1, ..., L/2-1, -L/2, ..., -1`` and the momentum is
``2*pi*n/L``.  Spectral measures live on a coarser ``n_k``-point grid in the
same ordering, so convolutions reduce to FFTs.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from .errors import (
    ConfigError,
    DegenerateSpectrum,
    EmptyShell,
    NonHermitianCoupling,
    StripViolation,
    ZeroDispersion,
)

DISPERSIONS = ("optical", "massive", "acoustic", "table")

DEFAULT_CONFIG: dict[str, Any] = {
    "spin": {"levels": [-0.3, 0.3], "W": [[0, 0], [1, 0], [1, 0], [0, 0]]},
    "bath": {
        "dispersion": "optical",
        "m_ph": 0.3,
        "phi": {"radius": 2.5, "amplitude": 0.3},
        "beta1": 1.0,
        "beta2": 1.0,
        "include_zero_mode": False,
    },
    "params": {"lambda": 0.1, "m_p": 1.0, "tau0": 1.0},
    "lattice": {"d": 1, "L": 64, "grid": 32},
    "measure": {"bins": None, "nu": None},
}


@dataclass(frozen=True)
class SpinSystem:
    """Non-degenerate spin levels with a Hermitian coupling matrix."""

    levels: np.ndarray
    coupling: np.ndarray

    def __post_init__(self):
        levels = np.asarray(self.levels, dtype=float)
        W = np.asarray(self.coupling, dtype=complex)
        if W.shape != (levels.size, levels.size):
            raise ConfigError(f"coupling shape {W.shape} does not match {levels.size} levels")
        if np.unique(levels).size != levels.size:
            raise DegenerateSpectrum("repeated spin level")
        gaps = (levels[:, None] - levels[None, :])[~np.eye(levels.size, dtype=bool)]
        if np.unique(np.round(gaps, 12)).size != gaps.size:
            raise DegenerateSpectrum("repeated nonzero Bohr frequency")
        if not np.allclose(W, W.conj().T, atol=1e-12, rtol=0):
            raise NonHermitianCoupling("coupling matrix is not Hermitian")
        levels.setflags(write=False)
        W.setflags(write=False)
        object.__setattr__(self, "levels", levels)
        object.__setattr__(self, "coupling", W)

    @property
    def n_levels(self) -> int:
        return self.levels.size

    @property
    def bohr_frequencies(self) -> np.ndarray:
        """Sorted spectrum of ad(H_spin), zero included."""
        return np.unique(np.round(self.levels[:, None] - self.levels[None, :], 12))

    def channel(self, eps: float) -> np.ndarray:
        """Jump operator W_eps: the part of W taking level e to e' with e' - e = eps."""
        target = self.levels[:, None] - self.levels[None, :]
        return np.where(np.isclose(target, eps, atol=1e-10), self.coupling, 0.0)


@dataclass(frozen=True)
class BathSpec:
    """Two phonon reservoirs sharing a dispersion and form factor."""

    d: int
    L: int
    betas: tuple[float, float] = (1.0, 1.0)
    dispersion: str = "optical"
    m_ph: float = 0.3
    phi_radius: float = 2.5
    phi_amplitude: float = 0.3
    table: np.ndarray | None = None
    include_zero_mode: bool = False

    def __post_init__(self):
        if self.d < 1 or self.L < 2 or self.L % 2:
            raise ConfigError("need d >= 1 and an even L >= 2")
        if self.dispersion not in DISPERSIONS:
            raise ConfigError(f"unknown dispersion {self.dispersion!r}")
        if min(self.betas) <= 0:
            raise ConfigError("inverse temperatures must be positive")
        if self.dispersion in ("optical", "massive") and self.m_ph <= 0:
            raise ConfigError("optical dispersion needs m_ph > 0")
        if self.dispersion == "table":
            if self.table is None:
                raise ConfigError("table dispersion needs bath.table")
            tab = np.asarray(self.table, dtype=float)
            if tab.shape != (self.L,) * self.d:
                raise ConfigError(f"table shape {tab.shape} != {(self.L,) * self.d}")
            object.__setattr__(self, "table", tab)
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        omega = self.omega(self.momenta())
        if self.include_zero_mode and np.any(omega <= 0):
            raise ZeroDispersion("dispersion vanishes on a retained dual-lattice point")

    @property
    def mass(self) -> float:
        return 0.0 if self.dispersion == "acoustic" else float(self.m_ph)

    def momenta(self) -> np.ndarray:
        """Dual lattice points, shape (L,)*d + (d,), FFT ordering."""
        q = 2 * np.pi * np.fft.fftfreq(self.L, 1.0 / self.L) / self.L
        return np.stack(np.meshgrid(*([q] * self.d), indexing="ij"), axis=-1)

    def omega(self, q: np.ndarray) -> np.ndarray:
        if self.dispersion == "table":
            return np.broadcast_to(self.table, np.shape(q)[:-1]).copy()
        return np.sqrt(self.mass**2 + np.sum(np.sin(np.asarray(q) / 2) ** 2, axis=-1))

    def form_factor(self, q: np.ndarray) -> np.ndarray:
        # smooth bump in the torus distance to the origin
        qq = np.mod(np.asarray(q) + np.pi, 2 * np.pi) - np.pi
        r2 = np.sum(qq**2, axis=-1) / self.phi_radius**2
        inside = r2 < 1
        out = np.zeros(r2.shape)
        out[inside] = self.phi_amplitude * np.exp(1 - 1 / (1 - r2[inside]))
        return out

    def retained(self) -> np.ndarray:
        """Mask of dual-lattice points kept in mode sums (zero modes dropped)."""
        return self.omega(self.momenta()) > 0

    def mode_table(self):
        """Return (momenta, omega, |phi|^2) restricted to retained points, flat."""
        q = self.momenta()
        w = self.omega(q)
        keep = w > 0
        return q[keep], w[keep], self.form_factor(q)[keep] ** 2


@dataclass(frozen=True)
class ModelParams:
    lam: float = 0.1
    m_p: float = 1.0
    tau0: float = 1.0

    def __post_init__(self):
        if self.lam == 0 or self.m_p <= 0 or self.tau0 <= 0:
            raise ConfigError("need lambda != 0, m_p > 0, tau0 > 0")

    @property
    def t0(self) -> float:
        """Microscopic time unit lambda^-2 * tau0."""
        return self.tau0 / self.lam**2


@dataclass(frozen=True)
class Model:
    spin: SpinSystem
    bath: BathSpec
    params: ModelParams
    grid: int = 32
    bins: int | None = None
    nu: float | None = None
    config: Mapping[str, Any] = field(default_factory=dict, compare=False, repr=False)

    @property
    def d(self) -> int:
        return self.bath.d


@dataclass(frozen=True)
class SpectralMeasure:
    """Mass of the energy-shell measure per cell of an ``n_k``-point momentum grid.

    ``weights`` has shape ``(n_k,)*d`` in FFT ordering; the cell with index
    ``c`` sits at momentum ``2*pi*c/n_k``.
    """

    eps: float
    d: int
    n_k: int
    weights: np.ndarray
    nu: float = 0.0

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.shape != (self.n_k,) * self.d:
            raise ValueError(f"weights shape {w.shape} != {(self.n_k,) * self.d}")
        if np.any(w < 0):
            raise ValueError("spectral measure weights must be nonnegative")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @property
    def total_mass(self) -> float:
        return float(self.weights.sum())

    def cell_momenta(self) -> np.ndarray:
        k = 2 * np.pi * np.fft.fftfreq(self.n_k, 1.0 / self.n_k) / self.n_k
        return np.stack(np.meshgrid(*([k] * self.d), indexing="ij"), axis=-1)

    def fourier(self, x) -> np.ndarray:
        """sum over cells of weight * exp(-i q.x) for lattice vectors x, shape (..., d)."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        q = self.cell_momenta().reshape(-1, self.d)
        return np.exp(-1j * x @ q.T) @ self.weights.ravel()


def _coupling_from_config(raw, n: int) -> np.ndarray:
    arr = np.asarray(raw, dtype=float)
    if arr.shape == (n * n, 2):
        return (arr[:, 0] + 1j * arr[:, 1]).reshape(n, n)
    if arr.shape == (n, n):
        return arr.astype(complex)
    if arr.shape == (n, n, 2):
        return arr[..., 0] + 1j * arr[..., 1]
    raise ConfigError(f"spin.W has shape {arr.shape}; expected {n * n} (re, im) pairs")


def _merge(base: dict, override: Mapping) -> dict:
    out = {k: (dict(v) if isinstance(v, dict) else v) for k, v in base.items()}
    for key, val in override.items():
        if isinstance(val, Mapping) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], val)
        else:
            out[key] = val
    return out


def load_config(source) -> dict:
    """Read a YAML model description and fill in defaults."""
    import yaml

    if isinstance(source, (str, Path)):
        try:
            text = Path(source).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {source}: {exc}") from exc
        try:
            raw = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"malformed config {source}: {exc}") from exc
    else:
        raw = dict(source or {})
    if not isinstance(raw, Mapping):
        raise ConfigError("config root must be a mapping")
    unknown = set(raw) - set(DEFAULT_CONFIG) - {"experiment", "run"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    return _merge(DEFAULT_CONFIG, raw)


def build_model(config=None) -> Model:
    """Validate a model description (mapping or YAML path) and bundle it."""
    cfg = load_config(config)
    spin_cfg, bath_cfg = cfg["spin"], cfg["bath"]
    par, lat, meas = cfg["params"], cfg["lattice"], cfg["measure"]
    try:
        levels = np.asarray(spin_cfg["levels"], dtype=float)
        spin = SpinSystem(levels, _coupling_from_config(spin_cfg["W"], levels.size))
        phi = bath_cfg.get("phi") or {}
        bath = BathSpec(
            d=int(lat["d"]),
            L=int(lat["L"]),
            betas=(float(bath_cfg["beta1"]), float(bath_cfg["beta2"])),
            dispersion=str(bath_cfg["dispersion"]),
            m_ph=float(bath_cfg.get("m_ph", 0.0)),
            phi_radius=float(phi.get("radius", 2.5)),
            phi_amplitude=float(phi.get("amplitude", 0.3)),
            table=bath_cfg.get("table"),
            include_zero_mode=bool(bath_cfg.get("include_zero_mode", False)),
        )
        params = ModelParams(float(par["lambda"]), float(par["m_p"]), float(par["tau0"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid model config: {exc}") from exc
    grid = int(lat.get("grid") or 32)
    if grid < 2:
        raise ConfigError("lattice.grid must be >= 2")
    bins = meas.get("bins")
    nu = meas.get("nu")
    return Model(spin, bath, params, grid=grid,
                 bins=None if bins is None else int(bins),
                 nu=None if nu is None else float(nu), config=cfg)


def _bose_pair(beta: float, w: np.ndarray):
    n = 1.0 / np.expm1(beta * w)
    return n, n + 1.0


def _check_strip(t, bath: BathSpec):
    im = np.imag(t)
    if np.any(im < -1e-14) or np.any(im > min(bath.betas) + 1e-14):
        raise StripViolation(f"Im t must lie in [0, {min(bath.betas)}]")


def bath_correlation(x, t, bath: BathSpec) -> np.ndarray:
    """Finite-volume correlation function zeta(x, t) summed over both reservoirs.

    ``x`` has shape ``(d,)`` or ``(n, d)``; ``t`` is a scalar or 1-d array of
    complex times.  The result has shape ``t.shape + (n,)`` (squeezed for
    scalar inputs).
    """
    _check_strip(t, bath)
    x_arr = np.atleast_2d(np.asarray(x, dtype=float))
    t_arr = np.atleast_1d(np.asarray(t, dtype=complex))
    q, w, phi2 = bath.mode_table()
    phase = np.exp(1j * (x_arr @ q.T))  # (nx, nq)
    vol = (2 * np.pi / bath.L) ** bath.d
    out = np.zeros((t_arr.size, x_arr.shape[0]), dtype=complex)
    for beta in bath.betas:
        n, n1 = _bose_pair(beta, w)
        fwd = phi2 * n * np.exp(1j * np.outer(t_arr, w))
        bwd = phi2 * n1 * np.exp(-1j * np.outer(t_arr, w))
        out += fwd @ phase.T + bwd @ phase.conj().T
    out *= vol
    if np.ndim(t) == 0:
        out = out[0]
    if np.ndim(x) == 1:
        out = out[..., 0]
    return out


def correlation_field(t, bath: BathSpec) -> np.ndarray:
    """zeta(., t) on the whole lattice (shape (L,)*d), via FFT."""
    _check_strip(t, bath)
    q = bath.momenta()
    w = bath.omega(q)
    keep = w > 0
    phi2 = np.where(keep, bath.form_factor(q) ** 2, 0.0)
    w_safe = np.where(keep, w, 1.0)
    total = np.zeros((bath.L,) * bath.d, dtype=complex)
    for beta in bath.betas:
        n, n1 = _bose_pair(beta, w_safe)
        a = phi2 * n * np.exp(1j * w_safe * t)
        b = phi2 * n1 * np.exp(-1j * w_safe * t)
        total += np.fft.ifftn(a) * bath.L**bath.d + np.fft.fftn(b)
    return total * (2 * np.pi / bath.L) ** bath.d


def default_nu(bath: BathSpec, bins: int) -> float:
    """Four times the spacing of omega values on a ``bins``-cell grid."""
    w = bath.omega(bath.momenta())
    w = w[w > 0]
    return 4.0 * (w.max() - w.min()) / bins


def _bin_axis(n: np.ndarray, L: int, n_k: int):
    """Nearest-cell assignment along one axis; exact ties split evenly."""
    c = n * n_k / L
    lo = np.floor(c)
    frac = c - lo
    tie = np.isclose(frac, 0.5)
    first = np.where(frac < 0.5, lo, lo + 1)
    w_first = np.where(tie, 0.5, 1.0)
    second = lo + 1
    w_second = np.where(tie, 0.5, 0.0)
    first = np.where(tie, lo, first)
    return ((first.astype(int) % n_k, w_first), (second.astype(int) % n_k, w_second))


def spectral_measure(eps: float, bath: BathSpec, bins: int, nu: float | None = None) -> SpectralMeasure:
    """Energy-shell measure at Bohr frequency ``eps`` binned onto a ``bins``-point grid.

    Each retained dual-lattice point with |omega(q) - |eps|| <= nu carries
    mass (2pi/L)^d * 2pi |phi(q)|^2 |e^{beta eps} - 1|^{-1} / (2 nu); the point
    is placed at -q for eps > 0 and at +q for eps < 0, so that summing
    ``weight * exp(-i q x)`` over cells reproduces the time Fourier transform
    of zeta at frequency eps.
    """
    d = bath.d
    if np.isclose(eps, 0.0, atol=1e-12):
        return SpectralMeasure(0.0, d, bins, np.zeros((bins,) * d), 0.0)
    if nu is None:
        nu = default_nu(bath, bins)
    q = bath.momenta()
    w = bath.omega(q)
    keep = (w > 0) & (np.abs(w - abs(eps)) <= nu)
    if not np.any(keep):
        raise EmptyShell(f"no dual-lattice point within {nu:.3g} of the shell |eps|={abs(eps):.3g}")
    phi2 = bath.form_factor(q)[keep] ** 2
    bose = sum(1.0 / abs(np.expm1(beta * eps)) for beta in bath.betas)
    mass = (2 * np.pi / bath.L) ** d * 2 * np.pi * phi2 * bose / (2 * nu)
    idx = np.argwhere(keep)  # FFT-order indices along each axis
    n = np.where(idx >= bath.L // 2, idx - bath.L, idx)
    if eps > 0:
        n = -n
    axes = [_bin_axis(n[:, a], bath.L, bins) for a in range(d)]
    weights = np.zeros((bins,) * d)
    for combo in itertools.product((0, 1), repeat=d):
        cells = tuple(axes[a][c][0] for a, c in enumerate(combo))
        share = np.prod([axes[a][c][1] for a, c in enumerate(combo)], axis=0)
        np.add.at(weights, cells, mass * share)
    return SpectralMeasure(float(eps), d, bins, weights, float(nu))


def spectral_measures(model: Model) -> dict[float, SpectralMeasure]:
    """Measures for every Bohr frequency of the model, on the momentum grid."""
    bins = model.bins or model.grid
    out = {}
    for eps in model.spin.bohr_frequencies:
        out[float(eps)] = spectral_measure(float(eps), model.bath, bins, model.nu)
    return out


def group_velocity(k, m_p: float) -> np.ndarray:
    """Velocity 2 sin(k) / m_p of a free particle with lattice momentum k."""
    return 2.0 * np.sin(np.asarray(k, dtype=float)) / m_p


def free_energy(k, m_p: float) -> np.ndarray:
    """Lattice kinetic energy sum_i (2 - 2 cos k_i) / m_p."""
    return np.sum(2 - 2 * np.cos(np.asarray(k, dtype=float)), axis=-1) / m_p


@dataclass(frozen=True)
class DecayReport:
    passes: bool
    fitted_exponent: float
    times: np.ndarray
    sup_values: np.ndarray


def decay_check(bath: BathSpec, alpha: float, t_max: float, n_times: int = 96) -> DecayReport:
    """Fit the tail exponent of sup_x |zeta(x, t)| over [t_max/6, t_max].

    The tail integral of (1+t)^alpha t^(-kappa) converges iff kappa > 1 + alpha,
    which is the pass criterion.  Keep t_max below the recurrence time
    L / (2 v_max) of the finite lattice.
    """
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    times = np.geomspace(t_max / 6, t_max, n_times)
    sup = np.array([np.abs(correlation_field(t, bath)).max() for t in times])
    if np.all(sup < 1e-300):
        return DecayReport(True, float("inf"), times, sup)
    slope = np.polyfit(np.log(times), np.log(np.maximum(sup, 1e-300)), 1)[0]
    kappa = float(-slope)
    return DecayReport(bool(kappa > 1 + alpha), kappa, times, sup)
