"""Weak-coupling generator, its fiber decomposition and the leading eigenvalue f_Q(p)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
from scipy.sparse.linalg import LinearOperator, eigs

from .errors import CurvatureUnstable, NotIsolated, QuadratureFail, StripViolation
from .markov import RateTable, generator_matrix, grid_momenta
from .model import BathSpec, Model, SpinSystem, spectral_measure


def kinetic_symbol(p, k, m_p: float) -> np.ndarray:
    """(2/m_p) sum_j [cos(p_j/2 + k_j) - cos(p_j/2 - k_j)], broadcast over leading axes."""
    p = np.asarray(p)
    k = np.asarray(k)
    return (2.0 / m_p) * np.sum(np.cos(p / 2 + k) - np.cos(p / 2 - k), axis=-1)


def _omega_histogram(bath: BathSpec):
    """Mode weights vol*|phi|^2 aggregated by distinct omega value."""
    _, w, phi2 = bath.mode_table()
    vol = (2 * np.pi / bath.L) ** bath.d
    keep = phi2 > 0
    w, phi2 = np.round(w[keep], 12), phi2[keep] * vol
    uniq, inv = np.unique(w, return_inverse=True)
    return uniq, np.bincount(inv, weights=phi2, minlength=uniq.size)


def lamb_shift_closed_form(eps: float, bath: BathSpec, damping: float) -> float:
    """Im of the damped half-line integral, summed mode by mode."""
    w, a = _omega_histogram(bath)
    total = 0.0
    for beta in bath.betas:
        n = 1.0 / np.expm1(beta * w)
        fwd = (w - eps) / (damping**2 + (w - eps) ** 2)
        bwd = -(w + eps) / (damping**2 + (w + eps) ** 2)
        total += float(np.sum(a * (n * fwd + (1 + n) * bwd)))
    return total


def lamb_shift(eps: float, bath: BathSpec, damping: float, t_max: float | None = None,
               rtol: float = 1e-7) -> float:
    """t_eps = Im int_0^inf exp(-i eps s) zeta(0, s) exp(-damping s) ds by trapezoid quadrature.

    At finite volume zeta(0, .) is almost periodic, so the half-line integral
    is regularized by the same width used for the energy shell.  The horizon is
    extended until the damped tail is negligible; the quadrature is refused if
    halving the step changes the value by more than ``rtol``.
    """
    w, a = _omega_histogram(bath)
    if a.size == 0:
        return 0.0
    horizon = max(500.0 / max(abs(eps), 1e-12) if t_max is None else t_max, 40.0 / damping)
    w_max = float(w.max()) + abs(eps)
    tail = float(np.sum(a)) * sum(2 / np.expm1(b * w.min()) + 1 for b in bath.betas)
    if tail * np.exp(-damping * horizon) / damping > 1e-10 * max(1.0, tail):
        raise QuadratureFail("damped tail not negligible at the horizon")

    def integrate(ds):
        s = np.arange(0.0, horizon + ds / 2, ds)
        vals = np.zeros(s.size)
        for beta in bath.betas:
            n = 1.0 / np.expm1(beta * w)
            for chunk in np.array_split(np.arange(w.size), max(1, w.size // 256)):
                ph_f = np.exp(1j * np.outer(s, w[chunk] - eps))
                ph_b = np.exp(-1j * np.outer(s, w[chunk] + eps))
                vals += np.imag(ph_f @ (a[chunk] * n[chunk]) + ph_b @ (a[chunk] * (1 + n[chunk])))
        vals *= np.exp(-damping * s)
        return ds * (vals.sum() - 0.5 * (vals[0] + vals[-1]))

    # the half-line endpoint leaves ds^2, ds^4, ... trapezoid errors; a Romberg
    # table removes them and its last two diagonal entries give the check
    ds = min(0.05, np.pi / (8 * w_max))
    row = [integrate(ds * 2**j) for j in (3, 2, 1, 0)]
    table = [row]
    for level in range(1, 4):
        prev = table[-1]
        f = 4.0**level
        table.append([(f * prev[i + 1] - prev[i]) / (f - 1) for i in range(len(prev) - 1)])
    coarse, fine = table[2][1], table[3][0]
    if abs(fine - coarse) > rtol * max(abs(fine), 1e-12) + 1e-12:
        raise QuadratureFail(f"Lamb integral not converged: {coarse:.3e} vs {fine:.3e}")
    return float(fine)


@dataclass(frozen=True)
class GeneratorM:
    """Weak-coupling generator on a torus of particle positions.

    ``channels`` maps each nonzero Bohr frequency to (W_eps, zeta_eps(x)) with
    zeta_eps tabulated on the lattice in FFT ordering.  ``decay`` is the
    diagonal of Phi*(1) and ``lamb`` the diagonal of the Lamb-shift Hamiltonian.
    """

    spin: SpinSystem
    d: int
    L: int
    channels: dict
    decay: np.ndarray
    lamb: np.ndarray
    lamb_by_eps: dict

    @property
    def dim(self) -> int:
        return self.spin.n_levels * self.L**self.d

    def _positions(self):
        idx = np.stack(np.unravel_index(np.arange(self.L**self.d), (self.L,) * self.d), axis=-1)
        return idx

    def _pair_table(self, table: np.ndarray) -> np.ndarray:
        """table[(x - y) mod L] for all site pairs."""
        idx = self._positions()
        diff = np.mod(idx[:, None, :] - idx[None, :, :], self.L)
        return table[tuple(np.moveaxis(diff, -1, 0))]

    def apply(self, rho: np.ndarray) -> np.ndarray:
        """M(rho) for rho of shape (n_sites*n_levels,)*2, site-major ordering."""
        n, ns = self.spin.n_levels, self.L**self.d
        r = rho.reshape(ns, n, ns, n)
        out = np.zeros_like(r, dtype=complex)
        for W, zeta in self.channels.values():
            kern = self._pair_table(zeta)  # (ns, ns)
            out += np.einsum("xy,ae,xeyf,bf->xayb", kern, W, r, W.conj(), optimize=True)
        out = out.reshape(ns * n, ns * n)
        K = np.kron(np.eye(ns), np.diag(self.decay))
        H = np.kron(np.eye(ns), np.diag(self.lamb))
        return out - 0.5 * (K @ rho + rho @ K) - 1j * (H @ rho - rho @ H)

    def superoperator(self) -> np.ndarray:
        """Dense matrix of M acting on row-major vectorized operators."""
        dim = self.dim
        cols = []
        for j in range(dim * dim):
            e = np.zeros(dim * dim, dtype=complex)
            e[j] = 1
            cols.append(self.apply(e.reshape(dim, dim)).ravel())
        return np.array(cols).T

    def jump_part(self, rho: np.ndarray) -> np.ndarray:
        n, ns = self.spin.n_levels, self.L**self.d
        r = rho.reshape(ns, n, ns, n)
        out = np.zeros_like(r, dtype=complex)
        for W, zeta in self.channels.values():
            kern = self._pair_table(zeta)
            out += np.einsum("xy,ae,xeyf,bf->xayb", kern, W, r, W.conj(), optimize=True)
        return out.reshape(ns * n, ns * n)


def build_generator(model: Model, bins: int | None = None, nu: float | None = None) -> GeneratorM:
    """Assemble the jump, decay and Lamb-shift parts of the weak-coupling generator.

    The spectral measures are binned on the full dual lattice so that
    zeta_eps(x) is available at every lattice separation.
    """
    bath, spin = model.bath, model.spin
    bins = bath.L if bins is None else bins
    channels, lamb_by_eps = {}, {}
    decay = np.zeros(spin.n_levels)
    lamb = np.zeros(spin.n_levels)
    idx = np.stack(np.unravel_index(np.arange(bath.L**bath.d), (bath.L,) * bath.d), axis=-1)
    for eps in spin.bohr_frequencies:
        eps = float(eps)
        if eps == 0.0:
            continue  # the zero-frequency measure vanishes
        meas = spectral_measure(eps, bath, bins, nu if nu is not None else model.nu)
        zeta = meas.fourier(idx).reshape((bath.L,) * bath.d)
        W = spin.channel(eps)
        channels[eps] = (W, zeta)
        wdw = np.real(np.diag(W.conj().T @ W))
        decay += wdw * meas.total_mass
        t_eps = lamb_shift(eps, bath, meas.nu)
        lamb_by_eps[eps] = t_eps
        lamb += wdw * t_eps
    return GeneratorM(spin, bath.d, bath.L, channels, decay, lamb, lamb_by_eps)


@dataclass(frozen=True)
class FiberOperator:
    """Generator block at total momentum p and Bohr frequency eps.

    For eps = 0 the matrix acts on (level, cell) functions, level-major; for
    eps != 0 it is diagonal on the cell grid.
    """

    eps: float
    p: np.ndarray
    matrix: np.ndarray
    n_levels: int
    levels_pair: tuple[int, int] | None = None


def _pair_for(spin: SpinSystem, eps: float) -> tuple[int, int]:
    diff = spin.levels[:, None] - spin.levels[None, :]
    hits = np.argwhere(np.isclose(diff, eps, atol=1e-10))
    if hits.size == 0:
        raise ValueError(f"{eps} is not a Bohr frequency")
    return int(hits[0, 0]), int(hits[0, 1])


def fiber_operator(eps: float, p, rates: RateTable, lamb: np.ndarray | None = None,
                   gamma0: float | None = None, k_shift=0.0,
                   markov_generator: np.ndarray | None = None) -> FiberOperator:
    """Dense block of the fibered generator.

    eps = 0: jump convolution minus escape rates plus i E_kin(p, k).
    eps = e - e' != 0: multiplication by -(w(e)+w(e'))/2 + i(E_kin - H_L(e) + H_L(e')).
    ``k_shift`` offsets the cell momenta (used to match a finite torus).
    """
    d = rates.d
    p = np.broadcast_to(np.asarray(p, dtype=complex), (d,)).copy()
    if gamma0 is not None and np.max(np.abs(p.imag)) > gamma0 + 1e-15:
        raise StripViolation(f"|Im p| exceeds the analyticity width {gamma0}")
    k = grid_momenta(rates.n_k, d) + k_shift
    ekin = kinetic_symbol(p, k, rates.m_p)
    lamb = np.zeros(rates.n_levels) if lamb is None else np.asarray(lamb, dtype=float)
    if abs(eps) < 1e-12:
        G = generator_matrix(rates) if markov_generator is None else markov_generator
        mat = G.astype(complex)
        mat[np.diag_indices_from(mat)] += 1j * np.tile(ekin, rates.n_levels)
        return FiberOperator(0.0, p, mat, rates.n_levels)
    e, e2 = _pair_for(rates.spin, eps)
    diag = -0.5 * (rates.escape[e] + rates.escape[e2]) + 1j * (ekin - lamb[e] + lamb[e2])
    return FiberOperator(float(eps), p, np.diag(diag), rates.n_levels, (e, e2))


def translate_fiber(fiber: FiberOperator, rates: RateTable, kappa, k_shift=0.0) -> np.ndarray:
    """Conjugation by exp(kappa d/dk).

    Real kappa on grid multiples is applied as a cyclic shift of cells;
    complex kappa by substituting k + kappa in the kinetic symbol.
    """
    d, n_k = rates.d, rates.n_k
    kappa = np.broadcast_to(np.asarray(kappa, dtype=complex), (d,))
    step = kappa.real * n_k / (2 * np.pi)
    on_grid = np.allclose(kappa.imag, 0) and np.allclose(step, np.round(step))
    blocks = fiber.n_levels if fiber.levels_pair is None else 1
    if on_grid:
        shift = np.round(step).astype(int)
        cells = np.arange(n_k**d)
        multi = np.stack(np.unravel_index(cells, (n_k,) * d), axis=-1)
        src = np.ravel_multi_index(tuple(np.mod(multi + shift, n_k).T), (n_k,) * d)
        perm = np.concatenate([b * n_k**d + src for b in range(blocks)])
        return fiber.matrix[np.ix_(perm, perm)]
    k = grid_momenta(n_k, d) + k_shift
    delta = kinetic_symbol(fiber.p, k + kappa, rates.m_p) - kinetic_symbol(fiber.p, k, rates.m_p)
    return fiber.matrix + np.diag(1j * np.tile(delta, blocks))


@dataclass(frozen=True)
class LeadingEigen:
    value: complex
    right: np.ndarray
    left: np.ndarray
    gap: float
    spectrum: np.ndarray | None = None


def leading_eigen(fiber: FiberOperator, a_q: float | None = None, tol: float = 1e-9,
                  dense: bool | None = None) -> LeadingEigen:
    """Eigenvalue of maximal real part with biorthogonal eigenvectors.

    The left vector ``left`` satisfies left @ A = value * left and
    left @ right = 1.  At p = 0 the right vector is the probability density
    and the left vector is the constant function.  Dense solve up to 1024
    states; above that a shift-invert Arnoldi iteration near zero, with the
    gap measured against the next few eigenvalues it returns.
    """
    A = fiber.matrix
    p_zero = bool(np.allclose(fiber.p, 0))
    size = A.shape[0]
    scale = max(1.0, float(np.abs(np.diag(A)).max()))
    if dense is None:
        dense = size <= 1024
    if dense:
        vals, vl, vr = sla.eig(A, left=True, right=True)
        order = np.argsort(-vals.real)
        spectrum = vals[order]
        lam = spectrum[0]
        r, u = vr[:, order[0]], vl[:, order[0]].conj()
    else:
        sigma = 1e-4 * scale
        v0 = np.ones(size, dtype=complex)
        lu = sla.lu_factor(A - sigma * np.eye(size))
        inv = LinearOperator((size, size), matvec=lambda x: sla.lu_solve(lu, x), dtype=complex)
        mu, vecs = eigs(inv, k=6, which="LM", v0=v0)
        vals = sigma + 1.0 / mu
        order = np.argsort(-vals.real)
        spectrum, vecs = vals[order], vecs[:, order]
        lam, r = spectrum[0], vecs[:, 0]
        # one inverse-iteration sweep on the transpose gives the left vector
        lu_t = sla.lu_factor(A.T - (lam + 1e-10 * scale) * np.eye(size))
        u = v0.copy()
        for _ in range(3):
            u = sla.lu_solve(lu_t, u)
            u /= np.linalg.norm(u)
    gap = float(lam.real - spectrum[1].real) if spectrum.size > 1 else float("inf")
    if gap < tol * scale:
        raise NotIsolated(f"leading eigenvalue not isolated (gap {gap:.2e})")
    if a_q is not None and gap < a_q / 2:
        raise NotIsolated(f"gap {gap:.3e} below a_Q/2 = {a_q / 2:.3e}")
    total = r.sum()
    if abs(total) > 1e-12 * np.abs(r).sum():
        r = r / total
    if p_zero:
        u = np.ones_like(u)
        lam = 0.0 if abs(lam) < 1e-11 * scale else lam
    u = u / (u @ r)
    return LeadingEigen(complex(lam), r, u, gap, spectrum)


@dataclass(frozen=True)
class CurvatureResult:
    D: float
    D_axes: np.ndarray
    D_coarse: np.ndarray
    D_fine: np.ndarray
    residual_exponent: float


def _leading_value(A: np.ndarray, tol: float = 1e-15, max_iter: int = 60) -> complex:
    """Eigenvalue nearest zero by inverse iteration; one LU factorization."""
    scale = max(1.0, float(np.abs(np.diag(A)).max()))
    sigma = 1e-4 * scale
    lu = sla.lu_factor(A - sigma * np.eye(A.shape[0]))
    x = np.ones(A.shape[0], dtype=complex)
    lam = 0.0
    for _ in range(max_iter):
        y = sla.lu_solve(lu, x)
        new = sigma + x.sum() / y.sum()
        x = y / np.linalg.norm(y)
        if abs(new - lam) <= tol * scale:
            return complex(new)
        lam = new
    raise NotIsolated("inverse iteration did not settle on a leading eigenvalue")


def _f_along(rates, G, axis, ps):
    out = []
    for s in ps:
        p = np.zeros(rates.d)
        p[axis] = s
        fib = fiber_operator(0.0, p, rates, markov_generator=G)
        if fib.matrix.shape[0] > 1024:
            out.append(_leading_value(fib.matrix))
        else:
            out.append(leading_eigen(fib).value)
    return np.array(out)


def _five_point(f, h):
    fm2, fm1, f0, f1, f2 = f
    return (-f2 + 16 * f1 - 30 * f0 + 16 * fm1 - fm2) / (12 * h * h)


def diffusion_from_curvature(rates: RateTable, h: float = 0.02, rtol: float = 1e-4,
                             fit_range=(0.05, 0.4)) -> CurvatureResult:
    """D_Q = -f_Q''(0)/2 by 5-point differences at h and h/2, Richardson-combined.

    Also fits the log-log slope of |f_Q(p) + D_Q p^2| along the first axis over
    ``fit_range`` (expected 4).
    """
    G = generator_matrix(rates)
    coarse, fine = [], []
    stencil = np.array([-2, -1, 0, 1, 2], dtype=float)
    for axis in range(rates.d):
        fc = _f_along(rates, G, axis, stencil * h).real
        ff = _f_along(rates, G, axis, stencil * h / 2).real
        coarse.append(-0.5 * _five_point(fc, h))
        fine.append(-0.5 * _five_point(ff, h / 2))
    coarse, fine = np.array(coarse), np.array(fine)
    if np.any(np.abs(coarse - fine) > rtol * np.abs(fine) + 1e-12):
        raise CurvatureUnstable(f"step h={h} and h/2 disagree: {coarse} vs {fine}")
    axes = (16 * fine - coarse) / 15
    D = float(axes.mean())
    ps = np.geomspace(*fit_range, 8)
    f = _f_along(rates, G, 0, ps).real
    resid = np.abs(f + D * ps**2)
    slope = float(np.polyfit(np.log(ps), np.log(np.maximum(resid, 1e-300)), 1)[0])
    return CurvatureResult(D, axes, coarse, fine, slope)


@dataclass(frozen=True)
class SpectralConstants:
    a_q: float
    b_q: float
    p_q: float
    gamma0: float


def _fiber_spectrum(rates, G, p):
    return sla.eigvals(fiber_operator(0.0, p, rates, markov_generator=G).matrix)


def _leading_gap(vals):
    re = np.sort(vals.real)[::-1]
    return re[0], re[0] - re[1]


def spectral_constants(rates: RateTable, n_scan: int = 257, gamma_max: float = 2.0,
                       axis: int = 0) -> SpectralConstants:
    """Empirical a_Q, p_Q, b_Q and analyticity width gamma_0 along one axis.

    a_Q is the gap at p = 0; p_Q is the largest radius such that the gap stays
    >= a_Q/2 on a fine scan of [0, p_Q]; b_Q is half the smallest decay margin
    -max Re spectrum over |p| >= p_Q, including the eps != 0 blocks; gamma_0
    is the largest imaginary offset keeping max Re spectrum <= a_Q/4.
    """
    G = generator_matrix(rates)
    d = rates.d

    def vec(s):
        p = np.zeros(d, dtype=complex)
        p[axis] = s
        return p

    _, a_q = _leading_gap(_fiber_spectrum(rates, G, vec(0.0)))
    scan = np.linspace(0, np.pi, n_scan)
    p_q = np.pi
    for prev, s in zip(scan[:-1], scan[1:]):
        if _leading_gap(_fiber_spectrum(rates, G, vec(s)))[1] < a_q / 2:
            lo, hi = prev, s
            for _ in range(30):
                mid = 0.5 * (lo + hi)
                if _leading_gap(_fiber_spectrum(rates, G, vec(mid)))[1] >= a_q / 2:
                    lo = mid
                else:
                    hi = mid
            p_q = lo
            break
    margins = [-_leading_gap(_fiber_spectrum(rates, G, vec(s)))[0] for s in scan if s >= p_q]
    off_diag = 0.5 * min(rates.escape[i] + rates.escape[j]
                         for i in range(rates.n_levels) for j in range(rates.n_levels) if i != j) \
        if rates.n_levels > 1 else np.inf
    b_q = 0.5 * min(min(margins) if margins else np.inf, off_diag)

    def worst(g):
        return max(_leading_gap(_fiber_spectrum(rates, G, vec(s + 1j * g)))[0]
                   for s in np.linspace(-np.pi, np.pi, 33))

    lo, hi = 0.0, gamma_max
    if worst(hi) <= a_q / 4:
        lo = hi
    else:
        for _ in range(30):
            mid = 0.5 * (lo + hi)
            if worst(mid) <= a_q / 4:
                lo = mid
            else:
                hi = mid
    return SpectralConstants(float(a_q), float(b_q), float(p_q), float(lo))


@dataclass(frozen=True)
class FiberScan:
    p: np.ndarray
    leading: np.ndarray
    gap: np.ndarray
    max_re: np.ndarray
    violations: int


def fiber_scan(rates: RateTable, consts: SpectralConstants, n_points: int = 64,
               lamb: np.ndarray | None = None, axis: int = 0) -> FiberScan:
    """Check the small-p gap and large-p decay claims on an n-point p-grid along one axis."""
    G = generator_matrix(rates)
    ps = -np.pi + 2 * np.pi * np.arange(n_points) / n_points
    eps_list = [float(e) for e in rates.spin.bohr_frequencies if abs(e) > 1e-12]
    lead, gaps, max_re = [], [], []
    bad = 0
    for s in ps:
        p = np.zeros(rates.d)
        p[axis] = s
        vals = sla.eigvals(fiber_operator(0.0, p, rates, markov_generator=G).matrix)
        top, gap = _leading_gap(vals)
        worst = top
        for eps in eps_list:
            blk = np.diag(fiber_operator(eps, p, rates, lamb).matrix)
            worst = max(worst, float(blk.real.max()))
        lead.append(top)
        gaps.append(gap)
        max_re.append(worst)
        if abs(s) >= consts.p_q:
            bad += int(worst > -consts.b_q)
        else:
            bad += int(gap < consts.a_q / 2)
    return FiberScan(ps, np.array(lead), np.array(gaps), np.array(max_re), bad)
