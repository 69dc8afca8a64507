"""Classical jump process on (spin level, lattice momentum) and its diffusion constant."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .errors import InsufficientData, MissingMeasure, NotConverged, SingularSolve, ZeroEscape
from .model import SpectralMeasure, SpinSystem, group_velocity

BLOCK = 4096  # trajectories per independent RNG stream


def grid_momenta(n_k: int, d: int) -> np.ndarray:
    """Cell momenta 2*pi*c/n_k in FFT ordering, flattened to shape (n_k**d, d)."""
    k = 2 * np.pi * np.fft.fftfreq(n_k, 1.0 / n_k) / n_k
    return np.stack(np.meshgrid(*([k] * d), indexing="ij"), axis=-1).reshape(-1, d)


def grid_indices(n_k: int, d: int) -> np.ndarray:
    return np.stack(np.unravel_index(np.arange(n_k**d), (n_k,) * d), axis=-1)


@dataclass(frozen=True)
class RateTable:
    """Translation-invariant jump masses for every ordered level pair.

    ``masses[e, e2]`` is an array of shape ``(n_k,)*d`` whose cell ``c`` holds
    the rate of jumping from level index ``e`` to ``e2`` with momentum
    transfer ``2*pi*c/n_k``.
    """

    spin: SpinSystem
    masses: np.ndarray
    m_p: float = 1.0
    escape: np.ndarray = field(init=False)

    def __post_init__(self):
        m = np.asarray(self.masses, dtype=float)
        if np.any(m < 0):
            raise ValueError("jump masses must be nonnegative")
        m.setflags(write=False)
        object.__setattr__(self, "masses", m)
        esc = m.reshape(m.shape[0], m.shape[1], -1).sum(axis=(1, 2))
        esc.setflags(write=False)
        object.__setattr__(self, "escape", esc)

    @property
    def n_levels(self) -> int:
        return self.masses.shape[0]

    @property
    def d(self) -> int:
        return self.masses.ndim - 2

    @property
    def n_k(self) -> int:
        return self.masses.shape[2]

    @property
    def n_cells(self) -> int:
        return self.n_k**self.d

    def rate(self, e: int, k, e2: int, k2) -> float:
        """Jump mass from cell (e, k) into cell (e2, k2); k, k2 are integer multi-indices."""
        diff = tuple(np.mod(np.asarray(k2) - np.asarray(k), self.n_k))
        return float(self.masses[(e, e2) + diff])

    def velocities(self) -> np.ndarray:
        """Group velocity of every grid cell, shape (n_cells, d)."""
        return group_velocity(grid_momenta(self.n_k, self.d), self.m_p)


def _lookup(measures: dict, eps: float) -> SpectralMeasure:
    for key, meas in measures.items():
        if abs(float(key) - eps) < 1e-9:
            return meas
    raise MissingMeasure(f"no spectral measure supplied for eps={eps:.6g}")


def jump_rates(spin: SpinSystem, measures: dict, m_p: float = 1.0) -> RateTable:
    """Rate masses |W_{e,e'}|^2 * measure_{e'-e} for every ordered level pair."""
    n = spin.n_levels
    ref = None
    for e in range(n):
        for e2 in range(n):
            if e != e2:
                ref = _lookup(measures, spin.levels[e2] - spin.levels[e])
                break
        if ref is not None:
            break
    if ref is None:
        raise MissingMeasure("a single level has no jump channels")
    masses = np.zeros((n, n) + (ref.n_k,) * ref.d)
    for e in range(n):
        for e2 in range(n):
            if e == e2:
                continue
            meas = _lookup(measures, spin.levels[e2] - spin.levels[e])
            masses[e, e2] = abs(spin.coupling[e, e2]) ** 2 * meas.weights
    table = RateTable(spin, masses, m_p)
    if np.any(table.escape <= 0):
        bad = spin.levels[table.escape <= 0]
        raise ZeroEscape(f"levels {bad.tolist()} have zero escape rate")
    return table


def _circulant_index(n_k: int, d: int) -> np.ndarray:
    """Flat index of (k' - k) mod n_k for all pairs, shape (n_cells, n_cells)."""
    idx = grid_indices(n_k, d).astype(np.int32)
    flat = np.zeros((n_k**d, n_k**d), dtype=np.int32)
    for a in range(d):
        flat *= n_k
        flat += np.mod(idx[:, None, a] - idx[None, :, a], n_k)
    return flat


def generator_matrix(rates: RateTable) -> np.ndarray:
    """Dense generator acting on densities over (level, cell), level-major ordering.

    Columns sum to zero: jump masses off the diagonal blocks, minus the escape
    rate on the diagonal.
    """
    n, nc = rates.n_levels, rates.n_cells
    circ = _circulant_index(rates.n_k, rates.d)
    G = np.zeros((n * nc, n * nc))
    for e in range(n):
        for e2 in range(n):
            if e != e2:
                G[e2 * nc:(e2 + 1) * nc, e * nc:(e + 1) * nc] = rates.masses[e, e2].ravel()[circ]
    G[np.diag_indices_from(G)] -= np.repeat(rates.escape, nc)
    return G


@dataclass(frozen=True)
class StationaryDensity:
    """Stationary law on the grid.

    ``prob`` sums to one over (level, cell); ``density`` is the same object
    as a density in dk, i.e. prob * n_cells / (2 pi)^d.
    """

    prob: np.ndarray
    n_levels: int
    n_k: int
    d: int
    residual: float
    iterations: int

    @property
    def density(self) -> np.ndarray:
        return self.prob * self.n_k**self.d / (2 * np.pi) ** self.d

    @property
    def level_weights(self) -> np.ndarray:
        return self.prob.reshape(self.n_levels, -1).sum(axis=1)


def stationary_density(rates: RateTable, tol: float = 1e-12, max_iter: int = 10_000,
                       generator: np.ndarray | None = None) -> StationaryDensity:
    """Null vector of the generator by shifted inverse iteration."""
    G = generator_matrix(rates) if generator is None else generator
    shift = 1e-3 * float(rates.escape.min())
    lu = sla.lu_factor(G + shift * np.eye(G.shape[0]))
    x = np.full(G.shape[0], 1.0 / G.shape[0])
    scale = float(rates.escape.max())
    for it in range(1, max_iter + 1):
        y = sla.lu_solve(lu, x)
        y = y / y.sum()
        change = np.abs(y - x).max()
        x = y
        if change < tol * 1e-2 or np.abs(G @ x).max() < tol * scale * np.abs(x).max():
            break
    res = float(np.abs(G @ x).max() / (scale * np.abs(x).max()))
    if res > tol * 100 or np.any(x < -1e-12):
        raise NotConverged(f"inverse iteration stalled: residual {res:.2e}")
    x = np.clip(x, 0.0, None)
    x /= x.sum()
    return StationaryDensity(x, rates.n_levels, rates.n_k, rates.d, res, it)


@dataclass(frozen=True)
class DiffusionTensor:
    D: float
    tensor: np.ndarray


def diffusion_green_kubo(rates: RateTable, mu: StationaryDensity | None = None,
                         t_max: float | None = None,
                         generator: np.ndarray | None = None) -> DiffusionTensor:
    """Velocity-autocorrelation integral, by generator solve or by time quadrature.

    With ``t_max=None`` the integral over [0, inf) is done exactly through the
    solve (-G + pi 1^T) x = v pi.  Otherwise the semigroup is integrated on
    [0, t_max] by eigendecomposition, which truncates the tail.
    """
    G = generator_matrix(rates) if generator is None else generator
    if mu is None:
        mu = stationary_density(rates, generator=G)
    pi = mu.prob
    v = np.tile(rates.velocities(), (rates.n_levels, 1))  # (n*nc, d)
    if np.allclose(v, 0):
        return DiffusionTensor(0.0, np.zeros((rates.d, rates.d)))
    rhs = v * pi[:, None]
    leak = np.abs(rhs.sum(axis=0)).max() / (np.abs(rhs).sum(axis=0).max() + 1e-300)
    if leak > 1e-8:
        raise SingularSolve(f"mean velocity under the stationary law is {leak:.2e}, not zero")
    if t_max is None:
        A = -G + np.outer(pi, np.ones_like(pi))
        try:
            x = sla.solve(A, rhs)
        except sla.LinAlgError as exc:
            raise SingularSolve(str(exc)) from exc
    else:
        lam, R = sla.eig(G)
        c = sla.solve(R, rhs)
        with np.errstate(divide="ignore", invalid="ignore"):
            factor = np.where(np.abs(lam) > 1e-12, np.expm1(lam * t_max) / lam, t_max)
        x = np.real(R @ (factor[:, None] * c))
    M = v.T @ x
    tensor = 0.5 * (M + M.T)
    return DiffusionTensor(float(np.trace(tensor) / rates.d), tensor)


@dataclass
class Trajectory:
    """One jump path: event times with the state entered at each time.

    ``times[0]`` is the start; ``x`` holds the position at each event time.
    """

    times: np.ndarray
    levels: np.ndarray
    cells: np.ndarray
    x: np.ndarray
    t_max: float
    seed: int
    velocities: np.ndarray = field(repr=False)

    def position(self, t) -> np.ndarray:
        """Ballistically interpolated position at times t (shape (len(t), d))."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        j = np.searchsorted(self.times, t, side="right") - 1
        v = self.velocities[self.cells[j]]
        return self.x[j] + v * (t - self.times[j])[:, None]

    @property
    def n_jumps(self) -> int:
        return self.times.size - 1


def _sampler_tables(rates: RateTable):
    n, nc = rates.n_levels, rates.n_cells
    flat = rates.masses.reshape(n, n * nc)
    return np.cumsum(flat, axis=1)


def _initial_state(rng, rates: RateTable, mu: StationaryDensity | None, size: int):
    if mu is None:
        lev_w = np.ones(rates.n_levels) / rates.n_levels
    else:
        lev_w = mu.level_weights
    levels = rng.choice(rates.n_levels, size=size, p=lev_w / lev_w.sum())
    cells = rng.integers(0, rates.n_cells, size=size)
    return levels, cells


def _add_transfer(cells: np.ndarray, transfer: np.ndarray, n_k: int, d: int) -> np.ndarray:
    a = np.stack(np.unravel_index(cells, (n_k,) * d), axis=-1)
    b = np.stack(np.unravel_index(transfer, (n_k,) * d), axis=-1)
    return np.ravel_multi_index(tuple(np.mod(a + b, n_k).T), (n_k,) * d)


def simulate_trajectory(rates: RateTable, init, t_max: float, seed: int) -> Trajectory:
    """Kinetic Monte Carlo path from ``init = (level index, cell multi-index, x)``."""
    if t_max <= 0:
        raise ValueError("t_max must be positive")
    rng = np.random.default_rng(seed)
    cum = _sampler_tables(rates)
    vel = rates.velocities()
    e, k, x = init
    cell = int(np.ravel_multi_index(tuple(np.atleast_1d(k)), (rates.n_k,) * rates.d))
    x = np.asarray(x, dtype=float).reshape(rates.d)
    times, levels, cells, xs = [0.0], [int(e)], [cell], [x.copy()]
    t = 0.0
    nc = rates.n_cells
    while True:
        tau = rng.exponential(1.0 / rates.escape[e])
        if t + tau >= t_max:
            break
        x = x + vel[cell] * tau
        t += tau
        j = int(np.searchsorted(cum[e], rng.random() * cum[e, -1], side="right"))
        j = min(j, cum.shape[1] - 1)
        e, transfer = divmod(j, nc)
        cell = int(_add_transfer(np.array([cell]), np.array([transfer]), rates.n_k, rates.d)[0])
        times.append(t)
        levels.append(e)
        cells.append(cell)
        xs.append(x.copy())
    return Trajectory(np.array(times), np.array(levels), np.array(cells), np.array(xs),
                      float(t_max), int(seed), vel)


@dataclass(frozen=True)
class Ensemble:
    """Positions of many trajectories sampled at common times."""

    sample_times: np.ndarray
    positions: np.ndarray  # (n_traj, n_times, d)
    jump_counts: np.ndarray
    seed: int

    @property
    def n_traj(self) -> int:
        return self.positions.shape[0]


def _run_block(rates, mu, cum, vel, sample_times, size, seed_seq):
    rng = np.random.default_rng(seed_seq)
    d = rates.d
    levels, cells = _initial_state(rng, rates, mu, size)
    t = np.zeros(size)
    x = np.zeros((size, d))
    out = np.zeros((size, sample_times.size, d))
    ptr = np.zeros(size, dtype=np.int64)
    jumps = np.zeros(size, dtype=np.int64)
    n_s = sample_times.size
    nc = rates.n_cells
    active = np.arange(size)
    while active.size:
        e = levels[active]
        tau = rng.exponential(1.0, size=active.size) / rates.escape[e]
        t_new = t[active] + tau
        v = vel[cells[active]]
        # record all sample times falling inside this flight
        pa = ptr[active]
        while True:
            pending = pa < n_s
            idx = np.flatnonzero(pending)
            if idx.size == 0:
                break
            ts = sample_times[pa[idx]]
            hit = ts <= t_new[idx]
            if not hit.any():
                break
            idx = idx[hit]
            rows = active[idx]
            out[rows, pa[idx]] = x[rows] + v[idx] * (sample_times[pa[idx]] - t[rows])[:, None]
            pa[idx] += 1
        ptr[active] = pa
        x[active] += v * tau[:, None]
        t[active] = t_new
        alive = pa < n_s
        active, e = active[alive], e[alive]
        if not active.size:
            break
        u = rng.random(active.size)
        new_e = np.empty(active.size, dtype=np.int64)
        transfer = np.empty(active.size, dtype=np.int64)
        for lev in range(rates.n_levels):
            sel = e == lev
            if not sel.any():
                continue
            row = cum[lev]
            j = np.searchsorted(row, u[sel] * row[-1], side="right")
            j = np.minimum(j, row.size - 1)
            new_e[sel], transfer[sel] = np.divmod(j, nc)
        levels[active] = new_e
        cells[active] = _add_transfer(cells[active], transfer, rates.n_k, rates.d)
        jumps[active] += 1
    return out, jumps


def simulate_ensemble(rates: RateTable, n_traj: int, t_max: float, seed: int,
                      n_samples: int = 64, mu: StationaryDensity | None = None,
                      threads: int = 1, t_min: float | None = None) -> Ensemble:
    """Many independent trajectories started from the stationary law, x(0) = 0.

    Trajectories are processed in fixed blocks with one spawned RNG stream per
    block, so the output does not depend on ``threads``.
    """
    if t_max <= 0 or n_traj < 1:
        raise ValueError("need t_max > 0 and n_traj >= 1")
    if mu is None:
        mu = stationary_density(rates)
    w_bar = float(mu.level_weights @ rates.escape)
    lo = t_min if t_min is not None else min(0.1 / w_bar, t_max / 10)
    sample_times = np.geomspace(lo, t_max, n_samples)
    cum = _sampler_tables(rates)
    vel = rates.velocities()
    sizes = [BLOCK] * (n_traj // BLOCK) + ([n_traj % BLOCK] if n_traj % BLOCK else [])
    streams = np.random.SeedSequence(seed).spawn(len(sizes))
    args = [(rates, mu, cum, vel, sample_times, s, ss) for s, ss in zip(sizes, streams)]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(lambda a: _run_block(*a), args))
    else:
        results = [_run_block(*a) for a in args]
    pos = np.concatenate([r[0] for r in results])
    jumps = np.concatenate([r[1] for r in results])
    return Ensemble(sample_times, pos, jumps, int(seed))


@dataclass(frozen=True)
class MSDResult:
    D: float
    stderr: float
    times: np.ndarray
    msd: np.ndarray
    msd_stderr: np.ndarray
    window: tuple[float, float]


def _as_ensemble(data, n_samples=64) -> Ensemble:
    if isinstance(data, Ensemble):
        return data
    trajs = list(data)
    if len(trajs) < 2:
        raise InsufficientData("need at least two trajectories")
    t_max = trajs[0].t_max
    if any(abs(tr.t_max - t_max) > 1e-12 for tr in trajs):
        raise InsufficientData("trajectories must share t_max")
    times = np.geomspace(t_max / 1000, t_max, n_samples)
    pos = np.stack([tr.position(times) - tr.x[0] for tr in trajs])
    jumps = np.array([tr.n_jumps for tr in trajs])
    return Ensemble(times, pos, jumps, trajs[0].seed)


def msd_diffusion(data, t_start: float | None = None, n_boot: int = 200,
                  seed: int = 0) -> MSDResult:
    """Fit <|x(t)-x(0)|^2> = 2 d D t + c over the tail [t_start, t_max].

    ``data`` is a list of Trajectory or an Ensemble.  The slope is a linear
    functional of per-trajectory squared displacements, so the bootstrap
    resamples those scores.
    """
    ens = _as_ensemble(data)
    if ens.n_traj < 2:
        raise InsufficientData("need at least two trajectories")
    times = ens.sample_times
    sq = np.sum(ens.positions**2, axis=-1)  # (n, T)
    d = ens.positions.shape[-1]
    msd = sq.mean(axis=0)
    msd_err = sq.std(axis=0, ddof=1) / np.sqrt(ens.n_traj)
    if not np.any(ens.jump_counts > 0):
        raise InsufficientData("no jumps in the window: motion is purely ballistic")
    if t_start is None:
        mean_wait = times[-1] * ens.n_traj / max(int(ens.jump_counts.sum()), 1)
        t_start = min(10 * mean_wait, times[-1] / 4)
    sel = times >= t_start
    if sel.sum() < 3:
        raise InsufficientData("fewer than three sample times in the fit window")
    tt = times[sel]
    good = msd[sel] > 0
    if good.sum() >= 3:
        growth = np.polyfit(np.log(tt[good]), np.log(msd[sel][good]), 1)[0]
        if growth > 1.6:
            raise InsufficientData(f"MSD grows like t^{growth:.2f}: ballistic regime")
    X = np.stack([tt, np.ones_like(tt)], axis=1)
    coef = np.linalg.pinv(X)[0]  # slope functional
    scores = sq[:, sel] @ coef
    D = float(scores.mean() / (2 * d))
    rng = np.random.default_rng(seed)
    boot = np.array([scores[rng.integers(0, scores.size, scores.size)].mean()
                     for _ in range(n_boot)]) / (2 * d)
    return MSDResult(D, float(boot.std(ddof=1)), times, msd, msd_err, (float(tt[0]), float(tt[-1])))


def irreducibility_check(rates: RateTable) -> bool:
    """Strong connectivity of the reachability graph on (level, cell)."""
    n, nc = rates.n_levels, rates.n_cells
    src, dst = [], []
    base = np.arange(nc)
    for e in range(n):
        for e2 in range(n):
            if e == e2:
                continue
            for c in np.flatnonzero(rates.masses[e, e2].ravel() > 0):
                src.append(e * nc + base)
                dst.append(e2 * nc + _add_transfer(base, np.full(nc, c), rates.n_k, rates.d))
    if not src:
        return n * nc == 1
    src = np.concatenate(src)
    dst = np.concatenate(dst)
    graph = coo_matrix((np.ones(src.size), (src, dst)), shape=(n * nc, n * nc))
    n_comp, _ = connected_components(graph, directed=True, connection="strong")
    return n_comp == 1
