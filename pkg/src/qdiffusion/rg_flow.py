"""Kernel calculus on rescaled lattices and the noise-free renormalization flow.

Two layers live here.  ``Kernel`` is a general multi-leg kernel with the
weighted L1-Linf norm, tensor products, contractions and the scaling map;
it is what the algebraic identities are checked on.  ``LatticeKernel`` is the
translation-invariant special case that the flow T_{n+1} = S_l[T_n^(l^2)]
actually iterates, stored as a density on a symmetric position window with
values in the internal operator space over s = (e_L, e_R, eta, v).
"""
from __future__ import annotations

import csv
import itertools
import struct
import warnings
from dataclasses import dataclass, field, replace
from functools import singledispatch
from pathlib import Path

import numpy as np
import scipy.linalg as sla

from .errors import GapCollapse, HypothesisViolated, LabelGap, WindowOverflow
from .lindblad_spectral import fiber_operator
from .markov import RateTable, generator_matrix, grid_momenta

INT32_MAX = 2**31 - 1


# ---------------------------------------------------------------------------
# generic kernels
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LegSpec:
    """One tensor leg: its kind, coordinates used for decay weights, and cell volume.

    ``coords`` holds positions for an ``x`` leg and the v-coordinate of each
    internal index for an ``s`` leg.  ``period`` makes distances toroidal.
    """

    kind: str
    coords: np.ndarray
    measure: float = 1.0
    period: float | None = None

    def __post_init__(self):
        if self.kind not in ("x", "s"):
            raise ValueError(f"leg kind must be 'x' or 's', got {self.kind!r}")
        c = np.asarray(self.coords, dtype=float)
        object.__setattr__(self, "coords", c.reshape(c.shape[0], -1))

    @property
    def size(self) -> int:
        return self.coords.shape[0]

    @property
    def dim(self) -> int:
        return self.coords.shape[1]

    def distance(self) -> np.ndarray:
        """|c_out - c_in| for every (out, in) pair."""
        diff = np.abs(self.coords[:, None, :] - self.coords[None, :, :])
        if self.period is not None:
            diff = np.minimum(diff, self.period - diff)
        return np.sqrt(np.sum(diff**2, axis=-1))


@dataclass(frozen=True)
class Kernel:
    """Kernel K(y'_1..y'_m; y_1..y_m): ``data`` has shape (sizes) + (sizes)."""

    legs: tuple
    data: np.ndarray

    def __post_init__(self):
        sizes = tuple(leg.size for leg in self.legs)
        if self.data.shape != sizes + sizes:
            raise ValueError(f"data shape {self.data.shape} does not match legs {sizes}")

    @property
    def degree(self) -> int:
        return len(self.legs)

    def weighted(self, gamma: float, gamma0: float) -> np.ndarray:
        """|K| times exp(gamma |x'-x|) on x legs and exp(gamma0 |v'-v|) on s legs."""
        out = np.abs(self.data).astype(float)
        m = self.degree
        for i, leg in enumerate(self.legs):
            rate = gamma if leg.kind == "x" else gamma0
            if rate == 0:
                continue
            shape = [1] * (2 * m)
            shape[i] = shape[m + i] = leg.size
            out = out * np.exp(rate * leg.distance()).reshape(shape)
        return out


def delta_kernel(legs) -> Kernel:
    """Identity kernel: 1/measure on the diagonal of every leg."""
    legs = tuple(legs)
    data = np.ones(())
    for leg in legs:
        data = np.multiply.outer(data, np.eye(leg.size) / leg.measure)
    m = len(legs)
    order = [2 * i for i in range(m)] + [2 * i + 1 for i in range(m)]
    return Kernel(legs, np.transpose(data, order) if m else data)


def _ll_norm(arr: np.ndarray, measures: tuple) -> float:
    """Inductive max-over-legs L1-Linf norm of a nonnegative array."""
    m = len(measures)
    if m == 0:
        return float(arr)
    best = 0.0
    for i in range(m):
        mu = measures[i]
        rows = (mu * arr.sum(axis=m + i)).max(axis=i)       # sup over y'_i of int dy_i
        cols = (mu * arr.sum(axis=i)).max(axis=m + i - 1)   # sup over y_i of int dy'_i
        reduced = np.maximum(rows, cols)
        best = max(best, _ll_norm(reduced, measures[:i] + measures[i + 1:]))
    return best


def gamma_norm(K: Kernel, gamma: float = 0.0, gamma0: float = 0.0) -> float:
    """Weighted L1-Linf norm, evaluated exactly by the inductive definition."""
    return _ll_norm(K.weighted(gamma, gamma0), tuple(leg.measure for leg in K.legs))


def tensor(K: Kernel, L: Kernel) -> Kernel:
    """K (x) L with legs of K first."""
    a, b = K.degree, L.degree
    data = np.multiply.outer(K.data, L.data)
    order = (list(range(a)) + list(range(2 * a, 2 * a + b))
             + list(range(a, 2 * a)) + list(range(2 * a + b, 2 * a + 2 * b)))
    return Kernel(K.legs + L.legs, np.transpose(data, order))


def iota(K: Kernel, i: int, j: int) -> Kernel:
    """Contract out_i with in_j: (iota K)(y', y) = int dy~ K(y~, y'; y, y~).

    The surviving leg (out_j, in_i) takes position i; leg j is removed.
    """
    if i == j:
        raise ValueError("cannot contract a leg with itself")
    li, lj = K.legs[i], K.legs[j]
    if li.kind != lj.kind or li.size != lj.size:
        raise ValueError("contracted legs must have the same kind and size")
    m = K.degree
    sub = list(range(2 * m))
    bond, new_out = 2 * m, 2 * m + 1
    sub[i] = bond          # out_i = y~
    sub[m + j] = bond      # in_j = y~
    sub[j] = new_out       # out_j = y'
    out = [sub[k] for k in range(m) if k != j] + [sub[m + k] for k in range(m) if k != j]
    out[i if i < j else i - 1] = new_out
    data = lj.measure * np.einsum(K.data, sub, out)
    legs = list(K.legs)
    del legs[j]
    return Kernel(tuple(legs), data)


def chain(K: Kernel) -> Kernel:
    """iota_12 iota_23 ... iota_{m-1,m} K, i.e. the chronological product of all legs."""
    while K.degree > 1:
        K = iota(K, K.degree - 2, K.degree - 1)
    return K


def _check_interval(labels) -> list[int]:
    ordered = sorted(labels)
    if len(set(ordered)) != len(ordered):
        raise LabelGap("time labels repeat across factors")
    if ordered and ordered != list(range(ordered[0], ordered[-1] + 1)):
        raise LabelGap(f"labels {ordered} do not form a discrete interval")
    return ordered


def contract(factors, blocks=None) -> Kernel:
    """Chronological contraction of time-labelled factors.

    ``factors`` is a sequence of (labels, Kernel) whose labels partition a
    discrete interval; each kernel carries the same number of legs per label,
    ordered time-major.  ``blocks`` splits the interval into consecutive
    sub-intervals; within a block every pair (tau, tau+1) is a bulk bond that
    identifies in_{tau+1} with out_tau.  Block b contributes the legs
    (out of max I_b, in of min I_b).  With ``blocks=None`` the whole interval
    is one block.
    """
    factors = [(tuple(lab), K) for lab, K in factors]
    all_labels = _check_interval([t for lab, _ in factors for t in lab])
    if not all_labels:
        raise LabelGap("no factors to contract")
    slot = None
    where = {}
    for f, (lab, K) in enumerate(factors):
        if list(lab) != sorted(lab):
            raise LabelGap("labels of a factor must be increasing")
        if K.degree % len(lab):
            raise ValueError("kernel degree is not a multiple of its label count")
        s = K.degree // len(lab)
        if slot is None:
            slot = s
        elif s != slot:
            raise ValueError("factors disagree on legs per time slot")
        for pos, t in enumerate(lab):
            where[t] = (f, pos)
    if blocks is None:
        blocks = [tuple(all_labels)]
    blocks = [tuple(b) for b in blocks]
    covered = [t for b in blocks for t in b]
    if sorted(covered) != all_labels:
        raise LabelGap("blocks must partition the labels")
    for b in blocks:
        if list(b) != list(range(b[0], b[0] + len(b))):
            raise LabelGap(f"block {b} is not a discrete interval")

    counter = itertools.count()
    out_sym = {(t, c): next(counter) for t in all_labels for c in range(slot)}
    in_sym = {}
    weight = 1.0
    block_of = {t: bi for bi, b in enumerate(blocks) for t in b}
    for t in all_labels:
        for c in range(slot):
            prev = t - 1
            if prev in block_of and block_of[prev] == block_of[t]:
                in_sym[(t, c)] = out_sym[(prev, c)]
                f, pos = where[prev]
                weight *= factors[f][1].legs[pos * slot + c].measure
            else:
                in_sym[(t, c)] = next(counter)
    operands = []
    for lab, K in factors:
        outs = [out_sym[(t, c)] for t in lab for c in range(slot)]
        ins = [in_sym[(t, c)] for t in lab for c in range(slot)]
        operands += [K.data, outs + ins]
    out_idx, in_idx, legs = [], [], []
    for b in blocks:
        for c in range(slot):
            out_idx.append(out_sym[(max(b), c)])
            f, pos = where[max(b)]
            legs.append(factors[f][1].legs[pos * slot + c])
    for b in blocks:
        for c in range(slot):
            in_idx.append(in_sym[(min(b), c)])
    data = weight * np.einsum(*operands, out_idx + in_idx, optimize=True)
    return Kernel(tuple(legs), data)


def scale_density(values: np.ndarray, leg: LegSpec, ell: int):
    """S_l on a function of (x, ...): coordinates / l, values * l^d, cell volume / l^d."""
    f = float(ell) ** leg.dim
    new = LegSpec(leg.kind, leg.coords / ell, leg.measure / f,
                  None if leg.period is None else leg.period / ell)
    return values * f, new


def trace_density(values: np.ndarray, leg: LegSpec, s0_mask: np.ndarray) -> complex:
    """Tr rho = int dx sum_{s in S_0} rho(x, s) for values of shape (n_x, n_s)."""
    return complex(leg.measure * values[:, np.asarray(s0_mask, bool)].sum())


@singledispatch
def scale_kernel(K, ell: int):
    raise TypeError(f"cannot scale {type(K).__name__}")


@scale_kernel.register
def _(K: Kernel, ell: int) -> Kernel:
    """(S_l K)(x', s'; x, s) = l^d K(l x', s'; l x, s), one factor l^d per x leg."""
    if ell < 2 or int(ell) != ell:
        raise ValueError("scale factor must be an integer >= 2")
    legs, factor = [], 1.0
    for leg in K.legs:
        if leg.kind == "x":
            f = float(ell) ** leg.dim
            if 1.0 / (leg.measure / f) ** (1.0 / leg.dim) > INT32_MAX:
                raise WindowOverflow("refined lattice index exceeds 32-bit range")
            legs.append(LegSpec("x", leg.coords / ell, leg.measure / f,
                                None if leg.period is None else leg.period / ell))
            factor *= f
        else:
            legs.append(leg)
    return Kernel(tuple(legs), K.data * factor)


# ---------------------------------------------------------------------------
# translation-invariant kernels with internal structure
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class InternalBasis:
    """Internal index s = (e_L, e_R, eta, v) for d = 1, pair-major.

    The relative coordinate j = x_L - x_R = 2v + eta runs over a periodic
    window of ``n_k`` values [-n_k/2, n_k/2), matching an n_k-cell momentum grid.
    """

    n_levels: int
    n_k: int

    @property
    def dim(self) -> int:
        return self.n_levels**2 * self.n_k

    @property
    def j(self) -> np.ndarray:
        return np.tile(np.arange(self.n_k) - self.n_k // 2, self.n_levels**2)

    @property
    def eta(self) -> np.ndarray:
        return np.mod(self.j, 2)

    @property
    def v(self) -> np.ndarray:
        return (self.j - self.eta) // 2

    @property
    def e_left(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_levels**2) // self.n_levels, self.n_k)

    @property
    def e_right(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_levels**2) % self.n_levels, self.n_k)

    @property
    def s0(self) -> np.ndarray:
        """Indicator of S_0 = {e_L = e_R, v = 0, eta = 0}."""
        return ((self.e_left == self.e_right) & (self.j == 0)).astype(float)

    def reflection(self, p: complex) -> np.ndarray:
        """Matrix of I_{p,O} for O = -1: (I g)(j) = exp(-i p eta) g(-j).

        A reflection-symmetric kernel satisfies K^(p) I_p = I_p K^(-p).  The
        sign of the phase follows from the basis change used for the seed.
        """
        jj = self.j
        n_pairs = self.n_levels**2
        src = np.mod(-jj + self.n_k // 2, self.n_k) + np.repeat(np.arange(n_pairs), self.n_k) * self.n_k
        M = np.zeros((self.dim, self.dim), dtype=complex)
        M[np.arange(self.dim), src] = np.exp(-1j * p * self.eta)
        return M


def g_norm(F: np.ndarray, v: np.ndarray, gamma0: float = 0.0) -> np.ndarray:
    """Internal norm max(sup_s' sum_s, sup_s sum_s') of |F| exp(gamma0 |v - v'|).

    Accepts a stack of matrices (..., D, D).
    """
    w = np.abs(F) * np.exp(gamma0 * np.abs(v[:, None] - v[None, :]))
    return np.maximum(w.sum(axis=-1).max(axis=-1), w.sum(axis=-2).max(axis=-1))


@dataclass(frozen=True)
class LatticeKernel:
    """Reduced kernel K(x) on a symmetric window of the scale-n lattice.

    ``values[m]`` is the density K(x_m) with x_m = spacing * (m - M/2), so that
    the Fourier transform is spacing * sum_m exp(i p x_m) K(x_m).  The lattice
    of scale n has spacing l^-n; the stored spacing may be coarser, in which
    case the kernel is the band-limited interpolant.
    """

    n: int
    ell: int
    spacing: float
    values: np.ndarray
    basis: InternalBasis
    tail_gamma: float = 0.0
    tail_const: float = field(default=np.nan)

    def __post_init__(self):
        if self.values.ndim != 3 or self.values.shape[1:] != (self.basis.dim,) * 2:
            raise ValueError("values must have shape (M, D, D) with D the basis size")
        if np.isnan(self.tail_const):
            object.__setattr__(self, "tail_const", float(np.max(
                self.norms() * np.exp(self.tail_gamma * np.abs(self.positions)))))

    @property
    def size(self) -> int:
        return self.values.shape[0]

    @property
    def positions(self) -> np.ndarray:
        return self.spacing * (np.arange(self.size) - self.size // 2)

    @property
    def half_width(self) -> float:
        return self.spacing * (self.size // 2)

    def norms(self, gamma0: float = 0.0) -> np.ndarray:
        return g_norm(self.values, self.basis.v, gamma0)

    def fourier(self, p) -> np.ndarray:
        """K^(p) for a scalar or array of (possibly complex) momenta."""
        p = np.asarray(p, dtype=complex)
        phase = np.exp(1j * np.multiply.outer(p.ravel(), self.positions)) * self.spacing
        D = self.basis.dim
        out = phase @ self.values.reshape(self.size, D * D)
        return out.reshape(p.shape + (D, D))

    def gamma_norm(self, gamma: float, gamma0: float = 0.0) -> float:
        """int dx ||K(x)||_G exp(gamma |x|), the translation-invariant form of the norm."""
        return float(self.spacing * np.sum(self.norms(gamma0) * np.exp(gamma * np.abs(self.positions))))

    def to_kernel(self, period: bool = True) -> Kernel:
        """Full two-leg (x, s) kernel on the window, circulant in x."""
        M, D = self.size, self.basis.dim
        x = self.positions
        diff = np.mod(np.arange(M)[:, None] - np.arange(M)[None, :] + M // 2, M)
        data = self.values[diff]                        # (x', x, s', s)
        data = np.transpose(data, (0, 2, 1, 3))         # (x', s', x, s)
        legs = (LegSpec("x", x, self.spacing, M * self.spacing if period else None),
                LegSpec("s", self.basis.v.astype(float), 1.0))
        return Kernel(legs, data)


@scale_kernel.register
def _(K: LatticeKernel, ell: int) -> LatticeKernel:
    """K'(x) = l K(l x) on the lattice refined by l (d = 1)."""
    if ell < 2 or int(ell) != ell:
        raise ValueError("scale factor must be an integer >= 2")
    if K.size * float(ell) ** (K.n + 1) > INT32_MAX:
        raise WindowOverflow(f"scale {K.n + 1} lattice exceeds the 32-bit index range")
    return LatticeKernel(K.n + 1, ell, K.spacing / ell, K.values * ell, K.basis,
                         K.tail_gamma * ell)


def kernel_from_fourier(p_values: np.ndarray, spacing: float, n: int, ell: int,
                        basis: InternalBasis, tail_gamma: float = 0.0) -> LatticeKernel:
    """Inverse transform of samples on the FFT grid p_j = 2 pi j / (M spacing)."""
    M = p_values.shape[0]
    p = 2 * np.pi * np.fft.fftfreq(M, spacing)
    x = spacing * (np.arange(M) - M // 2)
    phase = np.exp(-1j * np.outer(x, p)) / (M * spacing)
    D = basis.dim
    vals = (phase @ p_values.reshape(M, D * D)).reshape(M, D, D)
    return LatticeKernel(n, ell, spacing, vals, basis, tail_gamma)


def fourier_grid(M: int, spacing: float) -> np.ndarray:
    return 2 * np.pi * np.fft.fftfreq(M, spacing)


# ---------------------------------------------------------------------------
# the scale-zero transfer operator
# ---------------------------------------------------------------------------

def _basis_change(basis: InternalBasis, p: complex) -> tuple[np.ndarray, np.ndarray]:
    """C with rho~(k) = sum_j C[k, j] rho^(p, j), and its inverse.

    C[k, j] = exp(i k j) exp(i p eta_j / 2) / sqrt(n_k), block-diagonal over pairs.
    """
    n_k = basis.n_k
    k = grid_momenta(n_k, 1)[:, 0]
    j = np.arange(n_k) - n_k // 2
    eta = np.mod(j, 2)
    F = np.exp(1j * np.outer(k, j)) / np.sqrt(n_k)
    ph = np.exp(1j * p * eta / 2)
    C = F * ph[None, :]
    C_inv = (F.conj().T) / ph[:, None]
    eye = np.eye(basis.n_levels**2)
    return np.kron(eye, C), np.kron(eye, C_inv)


def fiber_generator(rates: RateTable, p: complex, lam: float,
                    lamb: np.ndarray | None = None, G: np.ndarray | None = None) -> np.ndarray:
    """-i ad(H_spin)/lam^2 + Q~(p) on all (e_L, e_R) sectors, momentum basis, Q-time units."""
    if rates.d != 1:
        raise ValueError("the lattice flow is implemented for d = 1")
    n, n_k = rates.n_levels, rates.n_k
    levels = rates.spin.levels
    G = generator_matrix(rates) if G is None else G
    out = np.zeros((n * n * n_k,) * 2, dtype=complex)
    diag = fiber_operator(0.0, [p], rates, markov_generator=G).matrix
    pairs = [a * n + a for a in range(n)]
    idx = np.concatenate([np.arange(a * n_k, (a + 1) * n_k) for a in pairs])
    out[np.ix_(idx, idx)] = diag
    for eL in range(n):
        for eR in range(n):
            if eL == eR:
                continue
            eps = float(levels[eL] - levels[eR])
            blk = fiber_operator(eps, [p], rates, lamb)
            if blk.levels_pair != (eL, eR):
                raise ValueError("Bohr frequency does not identify its level pair")
            a = eL * n + eR
            sl = slice(a * n_k, (a + 1) * n_k)
            out[sl, sl] = blk.matrix - 1j * eps / lam**2 * np.eye(n_k)
    return out


def seed_fourier(rates: RateTable, p, t0: float, lam: float,
                 lamb: np.ndarray | None = None) -> np.ndarray:
    """T^_0(p) = exp(t0 (-i ad H_spin / lam^2 + Q~(p))) in the (e_L, e_R, eta, v) basis.

    ``t0`` is the macroscopic time in units of the weak-coupling clock.
    Exponentials are taken block by block over level pairs.
    """
    basis = InternalBasis(rates.n_levels, rates.n_k)
    n, n_k = rates.n_levels, rates.n_k
    G = generator_matrix(rates)
    ps = np.atleast_1d(np.asarray(p, dtype=complex))
    out = np.empty((ps.size, basis.dim, basis.dim), dtype=complex)
    diag_idx = np.concatenate([np.arange((a * n + a) * n_k, (a * n + a + 1) * n_k) for a in range(n)])
    for i, q in enumerate(ps):
        Q = fiber_generator(rates, q, lam, lamb, G)
        E = np.zeros_like(Q)
        E[np.ix_(diag_idx, diag_idx)] = sla.expm(t0 * Q[np.ix_(diag_idx, diag_idx)])
        for eL in range(n):
            for eR in range(n):
                if eL != eR:
                    sl = slice((eL * n + eR) * n_k, (eL * n + eR + 1) * n_k)
                    E[sl, sl] = np.diag(np.exp(t0 * np.diag(Q[sl, sl])))
        C, C_inv = _basis_change(basis, q)
        out[i] = C_inv @ E @ C
    return out.reshape(np.shape(p) + (basis.dim, basis.dim))


def seed_kernel(rates: RateTable, t0: float, lam: float, lamb: np.ndarray | None = None,
                window: int | None = None, ell: int = 4, tail_gamma: float = 0.0,
                edge_tol: float = 1e-14) -> LatticeKernel:
    """T_0 on the integer window [-window, window) from the Fourier samples.

    Without an explicit window, it is doubled from 16 until the kernel norm at
    the edge falls below ``edge_tol`` times its maximum.
    """
    basis = InternalBasis(rates.n_levels, rates.n_k)
    half = 16 if window is None else window
    while True:
        M = 2 * half
        p = fourier_grid(M, 1.0)
        K = kernel_from_fourier(seed_fourier(rates, p, t0, lam, lamb), 1.0, 0, ell, basis, tail_gamma)
        norms = K.norms()
        if window is not None or max(norms[0], norms[-1]) <= edge_tol * norms.max():
            return K
        if half >= 1024:
            raise WindowOverflow("seed kernel does not fit a 2048-site window")
        half *= 2


def gibbs_density(rates: RateTable, beta: float) -> np.ndarray:
    """Internal vector of a particle at x = 0 with Gibbs spin populations."""
    basis = InternalBasis(rates.n_levels, rates.n_k)
    w = np.exp(-beta * (rates.spin.levels - rates.spin.levels.min()))
    w /= w.sum()
    vec = np.zeros(basis.dim, dtype=complex)
    for e in range(rates.n_levels):
        a = e * rates.n_levels + e
        vec[a * rates.n_k + rates.n_k // 2] = w[e]
    return vec


# ---------------------------------------------------------------------------
# RG states and the flow
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FlowConfig:
    """Numerical knobs of the flow; all lengths are in scale-n units."""

    ell: int = 4
    window: float = 16.0
    gamma0: float = 0.05
    p_max: float = 1.0
    n_f: int = 129
    curvature_h: float = 0.02
    gap_budget: float = 0.5


@dataclass(frozen=True)
class LeadingPart:
    value: complex
    right: np.ndarray
    left: np.ndarray

    @property
    def projector(self) -> np.ndarray:
        return np.outer(self.right, self.left) / (self.left @ self.right)


def leading_part(T: np.ndarray) -> LeadingPart:
    """Eigenvalue of largest modulus with its right and left eigenvectors."""
    vals, vl, vr = sla.eig(T, left=True, right=True)
    i = int(np.argmax(np.abs(vals)))
    return LeadingPart(complex(vals[i]), vr[:, i], vl[:, i].conj())


def _log_leading(K: LatticeKernel, ps) -> np.ndarray:
    T = K.fourier(np.asarray(ps))
    return np.array([np.log(leading_part(t).value) for t in T.reshape(-1, *T.shape[-2:])]).reshape(np.shape(ps))


def _curvature(K: LatticeKernel, h: float) -> float:
    stencil = np.array([-2, -1, 0, 1, 2], dtype=float)

    def d2(step):
        f = _log_leading(K, stencil * step).real
        return (-f[4] + 16 * f[3] - 30 * f[2] + 16 * f[1] - f[0]) / (12 * step**2)

    coarse, fine = d2(h), d2(h / 2)
    return float(-0.5 * (16 * fine - coarse) / 15)


@dataclass(frozen=True)
class RGState:
    """Scale-n transfer kernel with its tracked spectral data."""

    n: int
    kernel: LatticeKernel
    p_grid: np.ndarray
    f: np.ndarray
    D: float
    mu: np.ndarray
    gap: float
    config: FlowConfig
    gap_collapsed: bool = False

    @property
    def R0(self) -> np.ndarray:
        """R_n(0) = |mu><1_S0|."""
        return np.outer(self.mu, self.kernel.basis.s0)

    def f_at(self, p) -> np.ndarray:
        return _log_leading(self.kernel, p)


def make_state(kernel: LatticeKernel, config: FlowConfig = FlowConfig()) -> RGState:
    """Extract f_n on the p-grid, D_n by curvature and R_n(0) from the kernel."""
    T0 = kernel.fourier(0.0)
    lead = leading_part(T0)
    s0 = kernel.basis.s0
    mu = lead.right / (s0 @ lead.right)
    if np.allclose(mu.imag, 0, atol=1e-12):
        mu = mu.real.astype(complex)
    R = np.outer(mu, s0)
    gap = float(g_norm((np.eye(kernel.basis.dim) - R) @ T0, kernel.basis.v, config.gamma0))
    collapsed = gap > config.gap_budget
    if collapsed:
        warnings.warn(GapCollapse(
            f"scale {kernel.n}: ||(1-R)T(0)|| = {gap:.3e} exceeds budget {config.gap_budget}"))
    p_grid = np.linspace(-config.p_max, config.p_max, config.n_f)
    f = _log_leading(kernel, p_grid)
    D = _curvature(kernel, config.curvature_h)
    return RGState(kernel.n, kernel, p_grid, f, D, mu, gap, config, collapsed)


def power_kernel(K: LatticeKernel, m: int, size: int) -> LatticeKernel:
    """K^m on K's own lattice spacing, sampled on a window of ``size`` points."""
    p = fourier_grid(size, K.spacing)
    Tm = np.array([np.linalg.matrix_power(t, m) for t in K.fourier(p)])
    return kernel_from_fourier(Tm, K.spacing, K.n, K.ell, K.basis, K.tail_gamma)


def rg_step(state: RGState, ell: int | None = None) -> RGState:
    """T_{n+1} = S_l[T_n^(l^2)] computed as T^_{n+1}(p) = T^_n(p/l)^(l^2).

    The new kernel is sampled at spacing l^-(n+1) while that keeps the window
    below the configured size, and otherwise stays on the coarsest admissible
    spacing 1/l as a band-limited interpolant.
    """
    cfg = state.config
    ell = cfg.ell if ell is None else ell
    K = state.kernel
    if K.size * float(ell) ** (K.n + 1) > INT32_MAX:
        raise WindowOverflow(f"scale {K.n + 1} lattice exceeds the 32-bit index range")
    spacing = max(K.spacing / ell, 1.0 / ell)
    M = int(round(2 * cfg.window / spacing))
    p = fourier_grid(M, spacing)
    T = K.fourier(p / ell)
    Tp = np.array([np.linalg.matrix_power(t, ell * ell) for t in T])
    # e^{f(0)} = 1 is invariant; dividing out its roundoff stops the l^2-fold growth per step
    Tp /= leading_part(Tp[0]).value
    new = kernel_from_fourier(Tp, spacing, K.n + 1, ell, K.basis, K.tail_gamma * ell)
    return make_state(new, replace(cfg, ell=ell))


def choose_t0(rates: RateTable, lam: float, budget: float = 0.5, gamma0: float = 0.05,
              lamb: np.ndarray | None = None, start: float | None = None, n_scan: int = 17) -> float:
    """Smallest t0 on a doubling ladder with ||(1-R(p)) T^_0(p)||_G below ``budget``.

    The subleading part is measured on ``n_scan`` momenta in [0, pi], with R(p)
    the spectral projection of the leading eigenvalue.
    """
    basis = InternalBasis(rates.n_levels, rates.n_k)
    t0 = 0.25 / float(rates.escape.min()) if start is None else start
    ps = np.linspace(0.0, np.pi, n_scan)
    eye = np.eye(basis.dim)
    for _ in range(40):
        worst = 0.0
        for T in seed_fourier(rates, ps, t0, lam, lamb):
            worst = max(worst, float(g_norm((eye - leading_part(T).projector) @ T, basis.v, gamma0)))
            if worst >= budget:
                break
        if worst < budget:
            return t0
        t0 *= 2
    raise HypothesisViolated("no t0 brings the subleading part below the budget")


@dataclass(frozen=True)
class FlowRecord:
    n: int
    D: float
    gap: float
    parabola_residual: float
    strip_max: float
    surrogate_error: float


def strip_max(K: LatticeKernel, gamma0: float, n_re: int = 65) -> float:
    """sup of ||K^(p)||_G over Re p in the Nyquist band and Im p in {0, +-g/2, +-g}."""
    re = np.linspace(-np.pi / K.spacing, np.pi / K.spacing, n_re)
    ps = (re[:, None] + 1j * gamma0 * np.array([-1, -0.5, 0, 0.5, 1])[None, :]).ravel()
    return float(g_norm(K.fourier(ps), K.basis.v, gamma0).max())


def parabola_residual(state: RGState) -> float:
    """max over the p-grid of |f_n(p) + D_n p^2| / |p|^3."""
    p = state.p_grid
    keep = np.abs(p) > 0
    return float(np.max(np.abs(state.f[keep] + state.D * p[keep] ** 2) / np.abs(p[keep]) ** 3))


def gaussian_surrogate(state: RGState, t0: float, D_star: float, rho0: np.ndarray,
                       p_max: float = 1.0, n_p: int = 201) -> float:
    """sup_{|p|<=p_max} |<1_S0, T^_n(p/sqrt t0) rho^_0> - exp(-D* p^2)| for rho_0 at x = 0."""
    p = np.linspace(-p_max, p_max, n_p)
    T = state.kernel.fourier(p / np.sqrt(t0))
    char = np.einsum("s,pst,t->p", state.kernel.basis.s0, T, rho0)
    return float(np.max(np.abs(char - np.exp(-D_star * p**2))))


def run_flow(seed: LatticeKernel, n_steps: int, config: FlowConfig = FlowConfig(),
             t0: float | None = None, D_star: float | None = None,
             rho0: np.ndarray | None = None, on_state=None) -> tuple[list[FlowRecord], RGState]:
    """Iterate rg_step; only the records and the final state are kept."""
    state = make_state(seed, config)
    records = []
    for step in range(n_steps + 1):
        if step:
            state = rg_step(state)
        err = np.nan
        if t0 is not None and D_star is not None and rho0 is not None:
            err = gaussian_surrogate(state, t0, D_star, rho0)
        records.append(FlowRecord(state.n, state.D, state.gap, parabola_residual(state),
                                  strip_max(state.kernel, config.gamma0), err))
        if on_state is not None:
            on_state(state)
    return records, state


# ---------------------------------------------------------------------------
# induction diagnostics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class InductionParams:
    """Budgets against which the measured constants are compared."""

    gamma0: float = 0.05
    strip_bound: float = 10.0
    parabola_bound: float = 1.0
    gap_budget: float = 0.5
    p_split: float | None = None
    decay_bound: float = 10.0
    envelope_bound: float = 10.0
    n_re: int = 65


@dataclass(frozen=True)
class Check:
    passed: bool
    measured: float
    bound: float


@dataclass(frozen=True)
class InductionReport:
    n: int
    checks: dict
    gap_collapse: bool

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks.values())


def verify_induction(state: RGState, params: InductionParams = InductionParams()) -> InductionReport:
    """Evaluate analyticity, parabola, gap and decay inequalities on the stored kernel.

    The split momentum defaults to min(D_n/2, p_max): D_n/2 is the largest
    value the scale-zero hypothesis allows, and the parabola bound is only
    sampled up to the state's grid edge p_max.
    """
    K, g0 = state.kernel, params.gamma0
    v, D = K.basis.v, state.D
    checks = {}

    C_strip = strip_max(K, g0, params.n_re)
    checks["strip"] = Check(C_strip <= params.strip_bound, C_strip, params.strip_bound)

    C3 = parabola_residual(state)
    checks["parabola"] = Check(C3 <= params.parabola_bound, C3, params.parabola_bound)

    p_split = min(D / 2, state.config.p_max) if params.p_split is None else params.p_split
    nyq = np.pi / K.spacing
    small = np.linspace(-p_split, p_split, params.n_re)
    im = g0 * np.array([-1, -0.5, 0, 0.5, 1])
    worst_small = 0.0
    env_C, env_real_ok = 0.0, True
    for q in (small[:, None] + 1j * im[None, :]).ravel():
        T = K.fourier(q)
        lead = leading_part(T)
        rest = (np.eye(K.basis.dim) - lead.projector) @ T
        worst_small = max(worst_small, float(g_norm(rest, v, g0)))
        logmod = np.log(abs(lead.value))
        re2, im2 = q.real**2, q.imag**2
        upper, lower = logmod + 0.5 * D * re2, -1.5 * D * re2 - logmod
        if im2 == 0:
            env_real_ok &= bool(upper <= 1e-12 and lower <= 1e-12)
        else:
            env_C = max(env_C, upper / im2, lower / im2)
    checks["small_gap"] = Check(worst_small <= params.gap_budget, worst_small, params.gap_budget)
    large = np.concatenate([np.linspace(-nyq, -p_split, params.n_re), np.linspace(p_split, nyq, params.n_re)])
    ps = (large[:, None] + 1j * im[None, :]).ravel()
    worst_large = float(g_norm(K.fourier(ps), v, g0).max())
    checks["large_gap"] = Check(worst_large <= params.gap_budget, worst_large, params.gap_budget)

    norms = K.norms(g0)
    keep = norms >= 1e-13 * norms.max()
    C_decay = float(np.max(norms[keep] * np.exp(10 * g0 * np.abs(K.positions[keep]))))
    checks["decay"] = Check(C_decay <= params.decay_bound, C_decay, params.decay_bound)
    checks["envelope"] = Check(env_real_ok and env_C <= params.envelope_bound, env_C,
                               params.envelope_bound)
    return InductionReport(state.n, checks, state.gap_collapsed or state.gap > params.gap_budget)


# ---------------------------------------------------------------------------
# spectral perturbation bound
# ---------------------------------------------------------------------------

def diamond_norm(A: np.ndarray) -> float:
    """max of the largest absolute row and column sums (submultiplicative)."""
    a = np.abs(A)
    return float(max(a.sum(axis=1).max(), a.sum(axis=0).max()))


@dataclass(frozen=True)
class PersistenceBound:
    persists: bool
    eigenvalue_bound: float
    projector_bound: float
    b: float


def eigen_persistence_bound(A0: np.ndarray, a0: complex, P0: np.ndarray, A1: np.ndarray,
                            r: float, norm=diamond_norm, tol: float = 1e-10) -> PersistenceBound:
    """Persistence of an isolated simple eigenvalue under a bounded perturbation.

    With rest = ||A0 - a0 P0|| < |a0| and 0 < r < |a0| - rest, set
    b(r) = ||P0||/r + 1/(|a0| - r - rest).  If ||A1|| b < 1 the perturbed
    eigenvalue lies within r of a0 and its projector moves by at most
    2 pi r b ||A1|| b / (1 - ||A1|| b).
    """
    A0, P0, A1 = (np.asarray(X, dtype=complex) for X in (A0, P0, A1))
    scale = max(1.0, norm(A0))
    if norm(P0 @ P0 - P0) > tol * scale or norm(A0 @ P0 - a0 * P0) > tol * scale \
            or norm(P0 @ A0 - a0 * P0) > tol * scale:
        raise HypothesisViolated("P0 is not the spectral projection of A0 for a0")
    rest = norm(A0 - a0 * P0)
    if rest >= abs(a0):
        raise HypothesisViolated(f"||A0 - a0 P0|| = {rest:.4g} is not below |a0| = {abs(a0):.4g}")
    if not 0 < r < abs(a0) - rest:
        raise HypothesisViolated(f"radius {r} outside (0, {abs(a0) - rest:.4g})")
    b = norm(P0) / r + 1.0 / (abs(a0) - r - rest)
    q = norm(A1) * b
    if q >= 1:
        return PersistenceBound(False, np.inf, np.inf, b)
    return PersistenceBound(True, r, 2 * np.pi * r * b * q / (1 - q), b)


# ---------------------------------------------------------------------------
# randomized property suites
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SuiteResult:
    """Outcome of one randomized property: cases run, failures, worst slack used."""

    name: str
    n_cases: int
    n_violations: int
    worst: float

    @property
    def passed(self) -> bool:
        return self.n_violations == 0


def _random_leg(rng: np.random.Generator, kind: str | None = None, size: int | None = None) -> LegSpec:
    kind = kind or ("x" if rng.random() < 0.5 else "s")
    size = size or int(rng.integers(2, 5))
    if kind == "x":
        h = float(rng.uniform(0.25, 1.5))
        return LegSpec("x", h * np.arange(size), h)
    return LegSpec("s", rng.integers(-2, 3, size).astype(float), 1.0)


def _random_kernel(rng: np.random.Generator, legs, nonneg: bool = False) -> Kernel:
    sizes = tuple(leg.size for leg in legs)
    data = rng.standard_normal(sizes + sizes)
    if nonneg:
        data = np.abs(data)
    else:
        data = data + 1j * rng.standard_normal(sizes + sizes)
    mask = rng.random(sizes + sizes) < 0.8
    mask.flat[int(rng.integers(mask.size))] = True
    return Kernel(tuple(legs), data * mask)


def _ratio_check(lhs: float, rhs: float, rtol: float = 1e-12) -> tuple[bool, float]:
    """(lhs <= rhs up to roundoff, lhs/rhs)."""
    ok = lhs <= rhs * (1 + rtol) + 1e-300
    return bool(ok), float(lhs / rhs) if rhs > 0 else (0.0 if lhs == 0 else np.inf)


def kernel_algebra_suite(n_samples: int = 500, seed: int = 0) -> dict[str, SuiteResult]:
    """Random-instance checks of the norm calculus.

    Inequalities report the worst lhs/rhs ratio (at most 1 when they hold);
    identities report the worst relative deviation.
    """
    rng = np.random.default_rng(seed)
    tallies: dict[str, list] = {}

    def record(name, ok, value):
        n, bad, worst = tallies.get(name, (0, 0, 0.0))
        tallies[name] = (n + 1, bad + (not ok), max(worst, value))

    for _ in range(n_samples):
        g, g0 = rng.uniform(0, 1.5, 2)

        # tensor products are submultiplicative and commute with the weights
        K = _random_kernel(rng, [_random_leg(rng) for _ in range(int(rng.integers(1, 3)))])
        L = _random_kernel(rng, [_random_leg(rng)])
        KL = tensor(K, L)
        record("tensor_submultiplicative", *_ratio_check(
            gamma_norm(KL, g, g0), gamma_norm(K, g, g0) * gamma_norm(L, g, g0)))
        lhs = KL.weighted(g, g0)
        rhs = tensor(Kernel(K.legs, K.weighted(g, g0)), Kernel(L.legs, L.weighted(g, g0))).data
        dev = float(np.max(np.abs(lhs - rhs)) / np.max(np.abs(rhs)))
        record("weights_factorize", dev < 1e-12, dev)

        # contraction of two equal legs does not increase the norm
        leg = _random_leg(rng)
        K2 = _random_kernel(rng, [leg, leg])
        i, j = (0, 1) if rng.random() < 0.5 else (1, 0)
        record("contraction", *_ratio_check(gamma_norm(iota(K2, i, j), g, g0), gamma_norm(K2, g, g0)))
        Kw = iota(Kernel(K2.legs, K2.weighted(g, g0)), i, j).data
        excess = float(np.max(iota(K2, i, j).weighted(g, g0) - Kw) / np.max(Kw))
        record("contraction_weighted", excess <= 1e-12, excess)

        # chained contraction against the sup over one leg (nonnegative kernels)
        m = int(rng.integers(2, 4))
        leg = _random_leg(rng, size=int(rng.integers(2, 4)))
        Kn = _random_kernel(rng, [leg] * m, nonneg=True)
        k = int(rng.integers(m))
        sup = np.abs(Kn.data).max(axis=(k, m + k))
        rest = Kernel(tuple(leg for _ in range(m - 1)), sup)
        record("chain_sup", *_ratio_check(float(np.abs(chain(Kn).data).max()), gamma_norm(rest)))

        # chronological contraction of several factors
        record("contract_product", *_contract_instance(rng, g, g0))

        # monotonicity in gamma
        gp = g + rng.uniform(0, 1)
        record("monotone_gamma", *_ratio_check(gamma_norm(K, g, g0), gamma_norm(K, gp, g0)))

        # scaling: ||S_l K||_g = ||K||_{g/l}
        ell = int(rng.integers(2, 5))
        a, b = gamma_norm(scale_kernel(K, ell), g, g0), gamma_norm(K, g / ell, g0)
        dev = abs(a - b) / b
        record("scaling", dev < 1e-12, dev)

        # trace invariance under scaling
        leg = _random_leg(rng, "x", size=int(rng.integers(3, 9)))
        n_s = int(rng.integers(2, 5))
        rho = rng.standard_normal((leg.size, n_s)) + 1j * rng.standard_normal((leg.size, n_s))
        s0 = rng.random(n_s) < 0.5
        s0[0] = True
        rho2, leg2 = scale_density(rho, leg, ell)
        t1, t2 = trace_density(rho, leg, s0), trace_density(rho2, leg2, s0)
        dev = abs(t1 - t2) / max(abs(t1), 1e-300)
        record("trace_scaling", dev < 1e-12, dev)

        # delta kernels: unit norm, mapped to delta kernels by the scaling
        dl = [_random_leg(rng) for _ in range(int(rng.integers(1, 3)))]
        dk = delta_kernel(dl)
        dev = abs(gamma_norm(dk, g, g0) - 1.0)
        sk = scale_kernel(dk, ell)
        dev = max(dev, float(np.max(np.abs(sk.data - delta_kernel(sk.legs).data))))
        record("delta", dev < 1e-12, dev)

        # translation-invariant form of the norm and the Fourier strip bound
        LK = _random_lattice_kernel(rng)
        a, b = gamma_norm(LK.to_kernel(), g, g0), LK.gamma_norm(g, g0)
        dev = abs(a - b) / b
        record("translation_invariant", dev < 1e-12, dev)
        im = g * np.array([-1.0, -0.5, 0.0, 0.5, 1.0])
        re = np.linspace(-np.pi / LK.spacing, np.pi / LK.spacing, 9)
        strip = float(g_norm(LK.fourier((re[:, None] + 1j * im[None, :]).ravel()), LK.basis.v, g0).max())
        record("fourier_strip", *_ratio_check(strip, b))

    return {name: SuiteResult(name, *vals) for name, vals in tallies.items()}


def _contract_instance(rng: np.random.Generator, g: float, g0: float) -> tuple[bool, float]:
    """||T[(x)_A K_A]|| <= prod ||K_A|| for random labels, factors and blocks."""
    n_lab = int(rng.integers(2, 5))
    slot = 2 if n_lab == 2 and rng.random() < 0.5 else 1
    slot_legs = [_random_leg(rng, size=2) for _ in range(slot)]
    t_first = int(rng.integers(0, 3))
    labels = list(range(t_first, t_first + n_lab))
    owner = rng.integers(0, int(rng.integers(1, n_lab + 1)), n_lab)
    groups = [tuple(t for t, o in zip(labels, owner) if o == f) for f in np.unique(owner)]
    cuts = sorted(rng.choice(np.arange(1, n_lab), size=int(rng.integers(0, min(3, n_lab))), replace=False))
    edges = [0, *cuts, n_lab]
    blocks = [tuple(labels[a:b]) for a, b in zip(edges[:-1], edges[1:])]
    factors = [(lab, _random_kernel(rng, [slot_legs[c] for _ in lab for c in range(slot)]))
               for lab in groups]
    lhs = gamma_norm(contract(factors, blocks), g, g0)
    rhs = float(np.prod([gamma_norm(K, g, g0) for _, K in factors]))
    return _ratio_check(lhs, rhs)


def _random_lattice_kernel(rng: np.random.Generator) -> LatticeKernel:
    basis = InternalBasis(1, int(rng.choice([2, 4])))
    M = int(rng.choice([4, 6, 8, 10]))
    spacing = float(rng.uniform(0.25, 1.0))
    x = spacing * (np.arange(M) - M // 2)
    shape = (M, basis.dim, basis.dim)
    vals = (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) * np.exp(-np.abs(x))[:, None, None]
    return LatticeKernel(0, 2, spacing, vals, basis)


def persistence_suite(n_instances: int = 200, seed: int = 0, dim: int = 8) -> dict[str, SuiteResult]:
    """Random instances of the eigenvalue persistence bound against dense eigensolves.

    Each instance draws A0 = V diag(a0, rest) V^-1 with a simple eigenvalue a0,
    a radius inside the admissible range and a perturbation with
    ||A1|| b(r) < 1.  The exact perturbed eigenvalue in the disc of radius r
    and its rank-one projector are then compared with the returned bounds.
    """
    rng = np.random.default_rng(seed)
    tallies = {"eigenvalue": [0, 0, 0.0], "projector": [0, 0, 0.0], "isolated": [0, 0, 0.0]}
    made = 0
    while made < n_instances:
        a0 = complex(rng.uniform(0.5, 2.0) * np.exp(1j * rng.uniform(0, 2 * np.pi)))
        V = np.eye(dim) + 0.3 * (rng.standard_normal((dim, dim)) + 1j * rng.standard_normal((dim, dim))) / np.sqrt(dim)
        V_inv = np.linalg.inv(V)
        others = rng.uniform(0, 0.3) * abs(a0) * (rng.standard_normal(dim - 1) + 1j * rng.standard_normal(dim - 1)) / 2
        A0 = V @ np.diag(np.concatenate([[a0], others])) @ V_inv
        P0 = np.outer(V[:, 0], V_inv[0])
        rest = diamond_norm(A0 - a0 * P0)
        if rest >= abs(a0):
            continue
        r = float(rng.uniform(0.05, 0.95)) * (abs(a0) - rest)
        b = diamond_norm(P0) / r + 1.0 / (abs(a0) - r - rest)
        A1 = rng.standard_normal((dim, dim)) + 1j * rng.standard_normal((dim, dim))
        A1 *= float(rng.uniform(0.0, 0.95)) / (b * diamond_norm(A1))
        bound = eigen_persistence_bound(A0, a0, P0, A1, r)
        made += 1
        vals, vl, vr = sla.eig(A0 + A1, left=True, right=True)
        inside = np.flatnonzero(np.abs(vals - a0) <= r)
        tallies["isolated"][0] += 1
        tallies["isolated"][1] += int(inside.size != 1 or not bound.persists)
        tallies["isolated"][2] = max(tallies["isolated"][2], float(inside.size))
        i = int(np.argmin(np.abs(vals - a0)))
        w = vl[:, i].conj()
        P = np.outer(vr[:, i], w) / (w @ vr[:, i])
        for name, exact, claimed in (("eigenvalue", abs(vals[i] - a0), bound.eigenvalue_bound),
                                     ("projector", diamond_norm(P - P0), bound.projector_bound)):
            ok, ratio = _ratio_check(exact, claimed, rtol=1e-9)
            if claimed == 0:
                ok, ratio = exact < 1e-12, 0.0
            t = tallies[name]
            t[0] += 1
            t[1] += int(not ok)
            t[2] = max(t[2], ratio)
    return {name: SuiteResult(name, *vals) for name, vals in tallies.items()}


# ---------------------------------------------------------------------------
# artifacts
# ---------------------------------------------------------------------------

_SNAPSHOT_MAGIC = b"QDK1"
_SNAPSHOT_HEADER = struct.Struct("<4siiidiii")


def write_snapshot(path, K: LatticeKernel) -> None:
    """Little-endian layout: magic 'QDK1', int32 n, int32 d, int32 M, float64 spacing,
    int32 D, int32 n_levels, int32 n_k, then M*D*D complex128 values, row-major."""
    head = _SNAPSHOT_HEADER.pack(_SNAPSHOT_MAGIC, K.n, 1, K.size, K.spacing, K.basis.dim,
                                 K.basis.n_levels, K.basis.n_k)
    with open(path, "wb") as fh:
        fh.write(head)
        fh.write(np.ascontiguousarray(K.values, dtype="<c16").tobytes())


def read_snapshot(path, ell: int = 4) -> LatticeKernel:
    raw = Path(path).read_bytes()
    magic, n, d, M, spacing, D, n_levels, n_k = _SNAPSHOT_HEADER.unpack_from(raw)
    if magic != _SNAPSHOT_MAGIC or d != 1:
        raise ValueError("not a kernel snapshot")
    vals = np.frombuffer(raw, dtype="<c16", offset=_SNAPSHOT_HEADER.size).reshape(M, D, D)
    basis = InternalBasis(n_levels, n_k)
    if basis.dim != D:
        raise ValueError("snapshot basis size mismatch")
    return LatticeKernel(n, ell, spacing, vals.astype(complex), basis)


FLOW_COLUMNS = ("n", "D_n", "gap", "parabola_residual", "strip_max", "surrogate_error")


def write_flow_table(path, records, header: dict | None = None) -> None:
    with open(path, "w", newline="") as fh:
        for key, val in (header or {}).items():
            fh.write(f"# {key}: {val}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(FLOW_COLUMNS)
        for r in records:
            w.writerow([r.n, f"{r.D:.12e}", f"{r.gap:.12e}", f"{r.parabola_residual:.12e}",
                        f"{r.strip_max:.12e}", f"{r.surrogate_error:.12e}"])
