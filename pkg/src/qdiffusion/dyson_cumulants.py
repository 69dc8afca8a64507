"""Exactly solvable toy system: Dyson series, excitation operator, cumulants.

The toy is a particle with a small internal space on a tiny periodic chain,
coupled linearly to a few truncated bosonic modes.  Everything is dense, so
each structural identity (Dyson pairing sum, reconstruction of the reduced
dynamics from correlations, Ward identity, scale recursion of cumulants) can
be checked against a direct matrix computation.

Conventions.  Operators on a Hilbert space of dimension n are vectorised
row-major, so the superoperator of rho -> X rho Y is kron(X, Y.T).  A system
superoperator is an (n_S^2, n_S^2) matrix.  A tensor on the legs of a time
set A = {tau_1 < ... < tau_m} has shape (NS,)*m + (NS,)*m: outputs in
increasing time, then inputs in increasing time.  When bath legs are present
they come last as (E_out, E_in).
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Mapping

import numpy as np
import scipy.linalg as sla
from scipy import integrate

from .errors import MissingSubset, QuadratureBudget, ResourceCap
from .rg_flow import Kernel, LegSpec, contract

MAX_TOY_DIM = 64


# ---------------------------------------------------------------------------
# superoperator helpers
# ---------------------------------------------------------------------------

def left(X: np.ndarray) -> np.ndarray:
    """Superoperator rho -> X rho."""
    return np.kron(X, np.eye(X.shape[0]))


def right(X: np.ndarray) -> np.ndarray:
    """Superoperator rho -> rho X."""
    return np.kron(np.eye(X.shape[0]), X.T)


def conjugation(U: np.ndarray) -> np.ndarray:
    """Superoperator rho -> U rho U^dagger."""
    return np.kron(U, U.conj())


def _annihilator(n_fock: int) -> np.ndarray:
    return np.diag(np.sqrt(np.arange(1, n_fock + 1, dtype=float)), 1)


def _embed(op: np.ndarray, k: int, dims: list[int]) -> np.ndarray:
    mats = [np.eye(d) for d in dims]
    mats[k] = op
    out = np.ones((1, 1))
    for m in mats:
        out = np.kron(out, m)
    return out


# ---------------------------------------------------------------------------
# the toy system
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ToySystem:
    """Particle (internal levels x chain sites) plus truncated boson modes.

    The interaction is H_I = sum_alpha S_alpha (x) E_alpha with system
    operators ``sys_ops`` and bath operators ``bath_ops``; the total
    Hamiltonian is H_S + H_E + lam H_I.
    """

    lam: float
    spin_dim: int
    L: int
    n_modes: int
    n_fock: int
    beta: float
    H_spin: np.ndarray
    H_kin: np.ndarray
    H_E: np.ndarray
    sys_ops: tuple
    bath_ops: tuple
    rho_ref: np.ndarray

    def __post_init__(self):
        if self.dim > MAX_TOY_DIM:
            raise ValueError(f"toy Hilbert dimension {self.dim} exceeds {MAX_TOY_DIM}")
        for H in (self.H_spin, self.H_kin, self.H_E):
            if not np.allclose(H, H.conj().T):
                raise ValueError("Hamiltonians must be Hermitian")
        if not np.allclose(self.H_E, np.diag(np.diag(self.H_E))):
            raise ValueError("the bath Hamiltonian must be diagonal in the Fock basis")

    @property
    def n_sys(self) -> int:
        return self.H_S.shape[0]

    @property
    def n_bath(self) -> int:
        return self.H_E.shape[0]

    @property
    def dim(self) -> int:
        return self.n_sys * self.n_bath

    @property
    def NS(self) -> int:
        return self.n_sys**2

    @property
    def NE(self) -> int:
        return self.n_bath**2

    @property
    def H_I(self) -> np.ndarray:
        return sum(np.kron(S, E) for S, E in zip(self.sys_ops, self.bath_ops))

    @property
    def H(self) -> np.ndarray:
        nS, nE = self.n_sys, self.n_bath
        return (np.kron(self.H_S, np.eye(nE)) + np.kron(np.eye(nS), self.H_E)
                + self.lam * self.H_I)

    @property
    def bath_energies(self) -> np.ndarray:
        return np.real(np.diag(self.H_E))

    @property
    def H_S(self) -> np.ndarray:
        return self.H_spin + self.lam**2 * self.H_kin

    def with_lambda(self, lam: float) -> "ToySystem":
        """Same toy at another coupling (the kinetic term scales with lam^2)."""
        return replace(self, lam=float(lam))


def fock_tail(toy: ToySystem, order: int) -> float:
    """Reference-state weight on Fock levels where order-``order`` moments feel the cutoff.

    A 2m-point function evaluated in the number state n only reaches levels
    up to n + m, so it is unaffected by the truncation when n + m <= n_fock.
    """
    p = np.real(np.diag(toy.rho_ref)).reshape((toy.n_fock + 1,) * toy.n_modes)
    tail = 0.0
    for k in range(toy.n_modes):
        marg = p.sum(axis=tuple(i for i in range(toy.n_modes) if i != k))
        tail = max(tail, float(marg[max(0, toy.n_fock + 1 - order):].sum()))
    return tail


def build_toy(lam: float = 0.3, spin_dim: int = 2, L: int = 1, n_modes: int = 1,
              n_fock: int = 3, beta: float = 8.0, m_p: float = 1.0,
              spin_energies=None, coupling=None, omegas=None, phis=None,
              sector_coupled: bool = False) -> ToySystem:
    """Assemble a toy system.

    ``sector_coupled`` builds two independent reservoirs (one mode each)
    that couple to the projectors on the two internal levels, so the two
    internal sectors see disjoint baths.
    """
    if not 1 <= spin_dim <= 2:
        raise ValueError("spin_dim must be 1 or 2")
    if not 1 <= L <= 4:
        raise ValueError("L must lie in 1..4")
    if not 1 <= n_modes <= 2 or not 1 <= n_fock <= 3:
        raise ValueError("at most 2 modes with Fock cutoff at most 3")
    if sector_coupled and (spin_dim != 2 or n_modes != 2):
        raise ValueError("sector coupling needs spin_dim=2 and n_modes=2")
    e = np.arange(spin_dim, dtype=float) if spin_energies is None else np.asarray(spin_energies, float)
    if coupling is None:
        W = np.array([[0.4, 1.0], [1.0, -0.3]]) if spin_dim == 2 else np.array([[1.0]])
    else:
        W = np.asarray(coupling, dtype=complex)
    if not np.allclose(W, W.conj().T):
        raise ValueError("coupling matrix must be Hermitian")
    omegas = (1.3 + 0.6 * np.arange(n_modes)) if omegas is None else np.asarray(omegas, float)
    phis = np.ones(n_modes) if phis is None else np.asarray(phis, dtype=complex)

    x = np.arange(L)
    lap = np.zeros((L, L))
    for i in range(L):
        for j in range(L):
            gap = min(abs(i - j), L - abs(i - j))
            lap[i, j] = (1.0 if gap == 1 else 0.0) - (2.0 if i == j else 0.0)
    H_spin = np.kron(np.diag(e), np.eye(L)).astype(complex)
    H_kin = (-np.kron(np.eye(spin_dim), lap) / m_p).astype(complex)

    dims = [n_fock + 1] * n_modes
    a = _annihilator(n_fock)
    H_E = sum(w * _embed(a.T @ a, k, dims) for k, w in enumerate(omegas))
    H_E = np.diag(np.real(np.diag(H_E))).astype(complex)

    pref = np.sqrt(2 * np.pi / L)
    sys_ops, bath_ops = [], []
    for k in range(n_modes):
        q = 2 * np.pi * ((k + 1) % L) / L
        Wk = W
        if sector_coupled:
            Wk = np.zeros((2, 2))
            Wk[k, k] = 1.0
        S = pref * phis[k] * np.kron(Wk, np.diag(np.exp(1j * q * x)))
        ak = _embed(a, k, dims)
        sys_ops += [S, S.conj().T]
        bath_ops += [ak, ak.conj().T]

    g = np.exp(-beta * (np.real(np.diag(H_E)) - np.real(np.diag(H_E)).min()))
    rho = np.diag(g / g.sum()).astype(complex)
    return ToySystem(float(lam), spin_dim, L, n_modes, n_fock, float(beta), H_spin, H_kin,
                     H_E, tuple(sys_ops), tuple(bath_ops), rho)


# ---------------------------------------------------------------------------
# exact reduced dynamics
# ---------------------------------------------------------------------------

def full_propagator(toy: ToySystem, t: float) -> np.ndarray:
    """Superoperator of the coupled evolution over time t on the full space."""
    return conjugation(sla.expm(-1j * t * toy.H))


def lossy_propagator(toy: ToySystem, t: float, rate: float) -> np.ndarray:
    """Trace-breaking evolution: bath quanta decay out of the Hilbert space.

    Generated by H - i rate N_E / 2 with N_E the total bath number, so the
    lost weight depends on the bath state.
    """
    a = _annihilator(toy.n_fock)
    n_op = sum(_embed(a.T @ a, k, [toy.n_fock + 1] * toy.n_modes) for k in range(toy.n_modes))
    H_eff = toy.H - 0.5j * rate * np.kron(np.eye(toy.n_sys), n_op)
    U = sla.expm(-1j * t * H_eff)
    return conjugation(U)


def reduce(toy: ToySystem, F: np.ndarray) -> np.ndarray:
    """E(F): system superoperator rho_S -> Tr_E F(rho_S (x) rho_ref)."""
    F4 = split_superoperator(toy, F)
    return np.einsum("abcd,c,d->ab", F4, _vec_identity(toy.n_bath), toy.rho_ref.reshape(-1))


def exact_reduced_dynamics(toy: ToySystem, t: float) -> np.ndarray:
    """Z_t from the dense unitary, assembled column by column."""
    if t < 0:
        raise ValueError("t must be non-negative")
    nS, nE = toy.n_sys, toy.n_bath
    U = sla.expm(-1j * t * toy.H).reshape(nS, nE, nS, nE)
    Z = np.einsum("ieaf,fg,jebg->ijab", U, toy.rho_ref, U.conj(), optimize=True)
    return Z.reshape(nS * nS, nS * nS)


def free_propagator(toy: ToySystem, t: float) -> np.ndarray:
    """U_t = exp(-i t ad(H_S))."""
    return conjugation(sla.expm(-1j * t * toy.H_S))


# ---------------------------------------------------------------------------
# Dyson series as a pairing sum
# ---------------------------------------------------------------------------

def pairings(n: int):
    """All perfect matchings of range(n) as tuples of (u, v) with u < v."""
    if n % 2:
        return
    if n == 0:
        yield ()
        return
    first = 0
    for k in range(1, n):
        rest = [i for i in range(1, n) if i != k]
        for sub in pairings(len(rest)):
            yield ((first, k),) + tuple((rest[u], rest[v]) for u, v in sub)


def double_factorial(n: int) -> int:
    return math.prod(range(n, 0, -2)) if n > 0 else 1


def bath_two_point(toy: ToySystem, tau) -> np.ndarray:
    """zeta^{ab}_{alpha beta}(tau) = Tr_E(E_alpha(v)^a E_beta(u)^b rho_ref), tau = v - u.

    a, b in {0, 1} mark left and right multiplication.  Returned with shape
    tau.shape + (R, R), R = 2 * len(bath_ops), rows (alpha, a) and columns
    (beta, b) flattened as 2*alpha + a.
    """
    tau = np.asarray(tau, dtype=float)
    eps = toy.bath_energies
    p = np.real(np.diag(toy.rho_ref))
    ops = toy.bath_ops
    n_a = len(ops)
    # g[al,be](t) = sum_nm p_n E_al[n,m] E_be[m,n] exp(i (eps_n - eps_m) t)
    w_fwd = np.einsum("n,anm,bmn->abnm", p, np.array(ops), np.array(ops))
    w_bwd = np.einsum("n,bnm,amn->abnm", p, np.array(ops), np.array(ops))
    freq = eps[:, None] - eps[None, :]
    ph = np.exp(1j * np.multiply.outer(tau, freq))
    g = np.einsum("...nm,abnm->...ab", ph, w_fwd)
    h = np.einsum("...nm,abnm->...ab", ph.conj(), w_bwd)
    out = np.zeros(tau.shape + (2 * n_a, 2 * n_a), dtype=complex)
    out[..., 0::2, 0::2] = g   # a=0, b=0
    out[..., 1::2, 0::2] = g   # a=1, b=0
    out[..., 0::2, 1::2] = h   # a=0, b=1
    out[..., 1::2, 1::2] = h   # a=1, b=1
    return out


def _signed_ops(toy: ToySystem) -> np.ndarray:
    """(-1)^a S_alpha^a as superoperators, indexed 2*alpha + a."""
    ops = []
    for S in toy.sys_ops:
        ops += [left(S), -right(S)]
    return np.array(ops)


def pair_operator(toy: ToySystem, u: float, v: float) -> np.ndarray:
    """K_{u,v} in R_v (x) R_u as a tensor K[o_u, o_v, i_u, i_v] (time-ordered legs)."""
    zeta = bath_two_point(toy, v - u)
    ops = _signed_ops(toy)
    K = -toy.lam**2 * np.einsum("rs,rab,scd->cadb", zeta, ops, ops)
    return K


def _gauss_simplex(n_nodes: int, dim: int, t: float):
    """Tensor Gauss-Legendre on [0,1]^dim mapped to 0 < t_1 < ... < t_dim < t."""
    x, w = np.polynomial.legendre.leggauss(n_nodes)
    x, w = (x + 1) / 2, w / 2
    grid = np.array(np.meshgrid(*([x] * dim), indexing="ij")).reshape(dim, -1).T
    wts = np.prod(np.array(np.meshgrid(*([w] * dim), indexing="ij")).reshape(dim, -1).T, axis=1)
    times = np.empty_like(grid)
    upper = np.full(grid.shape[0], float(t))
    jac = np.ones(grid.shape[0])
    for k in range(dim - 1, -1, -1):
        times[:, k] = upper * grid[:, k]
        jac *= upper
        upper = times[:, k]
    return times, wts * jac


def dyson_terms(toy: ToySystem, t: float, max_order: int, n_nodes: int = 12,
                budget: float = 2e6, chunk: int = 2048) -> list[np.ndarray]:
    """Order-by-order contributions m = 0..max_order of the pairing-sum Dyson series."""
    if max_order > 3:
        raise QuadratureBudget("orders above 3 are not supported")
    for m in range(1, max_order + 1):
        cost = n_nodes ** (2 * m) * double_factorial(2 * m - 1)
        if cost > budget:
            raise QuadratureBudget(f"order {m} needs {cost:.3g} integrand evaluations (> {budget:.3g})")
    vals, V = np.linalg.eigh(toy.H_S)
    Wb = np.kron(V, V.conj())
    omega = (vals[:, None] - vals[None, :]).reshape(-1)
    ops = np.einsum("ij,rjk,kl->ril", Wb.conj().T, _signed_ops(toy), Wb)
    NS = toy.NS

    terms = [free_propagator(toy, t)]
    for m in range(1, max_order + 1):
        n = 2 * m
        times_all, wts_all = _gauss_simplex(n_nodes, n, t)
        total = np.zeros((NS, NS), dtype=complex)
        for pi in pairings(n):
            partner = {}
            for u, v in pi:
                partner[u] = None
                partner[v] = u
            for start in range(0, len(wts_all), chunk):
                times = times_all[start:start + chunk]
                wts = wts_all[start:start + chunk]
                P = len(wts)
                M = np.zeros((P, NS, NS), dtype=complex)
                M[:, np.arange(NS), np.arange(NS)] = np.exp(-1j * np.outer(times[:, 0], omega))
                open_slots = []
                for k in range(n):
                    if partner[k] is None:
                        M = np.matmul(ops, M[..., None, :, :])
                        open_slots.append(k)
                    else:
                        u = partner[k]
                        q = open_slots.index(u)
                        open_slots.pop(q)
                        zeta = bath_two_point(toy, times[:, k] - times[:, u])
                        Y = np.einsum("prs,rij->psij", zeta, ops)
                        Mq = np.moveaxis(M, 1 + q, 1)
                        Y = Y.reshape(Y.shape[:2] + (1,) * (Mq.ndim - 4) + Y.shape[2:])
                        M = np.matmul(Y, Mq).sum(axis=1)
                    nxt = times[:, k + 1] if k + 1 < n else np.full(P, float(t))
                    ph = np.exp(-1j * np.outer(nxt - times[:, k], omega))
                    M = M * ph.reshape((P,) + (1,) * (M.ndim - 3) + (NS, 1))
                total += np.einsum("p,pij->ij", wts, M)
        terms.append((-toy.lam**2) ** m * (Wb @ total @ Wb.conj().T))
    return terms


def dyson_expansion(toy: ToySystem, t: float, max_order: int, n_nodes: int = 12,
                    budget: float = 2e6) -> np.ndarray:
    """Dyson series for Z_t truncated after ``max_order`` pairs."""
    return sum(dyson_terms(toy, t, max_order, n_nodes, budget))


def fit_exponent(lams, errors) -> float:
    """Least-squares slope of log(error) against log(lambda)."""
    return float(np.polyfit(np.log(lams), np.log(errors), 1)[0])


# ---------------------------------------------------------------------------
# excitation operator, expectation and the odot product
# ---------------------------------------------------------------------------

def _vec_identity(n: int) -> np.ndarray:
    return np.eye(n).reshape(-1)


def split_superoperator(toy: ToySystem, F: np.ndarray) -> np.ndarray:
    """Full-space superoperator as F[S_out, S_in, E_out, E_in]."""
    nS, nE = toy.n_sys, toy.n_bath
    F8 = F.reshape(nS, nE, nS, nE, nS, nE, nS, nE)
    return F8.transpose(0, 2, 4, 6, 1, 3, 5, 7).reshape(nS * nS, nS * nS, nE * nE, nE * nE)


def expect(toy: ToySystem, D: np.ndarray) -> np.ndarray:
    """E: contract the trailing (E_out, E_in) legs with Tr_E( . rho_ref)."""
    return np.einsum("...ab,a,b->...", D, _vec_identity(toy.n_bath), toy.rho_ref.reshape(-1))


def odot(later: np.ndarray, earlier: np.ndarray) -> np.ndarray:
    """Tensor product on system legs, operator product on the trailing bath legs.

    Both arguments have layout (outs, ins, E_out, E_in); the result keeps the
    legs of ``earlier`` first since its times are smaller.
    """
    ml = (later.ndim - 2) // 2
    me = (earlier.ndim - 2) // 2
    lo, li = list(range(ml)), list(range(ml, 2 * ml))
    eo, ei = list(range(2 * ml, 2 * ml + me)), list(range(2 * ml + me, 2 * ml + 2 * me))
    bo, bm, bi = 2 * (ml + me), 2 * (ml + me) + 1, 2 * (ml + me) + 2
    return np.einsum(later, lo + li + [bo, bm], earlier, eo + ei + [bm, bi],
                     eo + lo + ei + li + [bo, bi])


@dataclass(frozen=True)
class Excitation:
    """Decomposition U = T (x) exp(-i t0 L_E) + B on one macroscopic step."""

    t0: float
    T: np.ndarray
    B: np.ndarray
    bath_phase: np.ndarray

    def at(self, tau: int) -> np.ndarray:
        """B(tau) = exp(i tau t0 L_E) B exp(-i (tau-1) t0 L_E)."""
        ph = self.bath_phase
        return self.B * (ph[:, None] ** (-tau)) * (ph[None, :] ** (tau - 1))


def excitation(toy: ToySystem, t0: float, propagator: np.ndarray | None = None) -> Excitation:
    """Build T = E(U) and B; ``propagator`` replaces U (negative controls)."""
    F = full_propagator(toy, t0) if propagator is None else propagator
    F4 = split_superoperator(toy, F)
    T = np.einsum("abcd,c,d->ab", F4, _vec_identity(toy.n_bath), toy.rho_ref.reshape(-1))
    eps = toy.bath_energies
    phase = np.exp(-1j * t0 * (eps[:, None] - eps[None, :])).reshape(-1)
    B = F4 - T[:, :, None, None] * np.diag(phase)[None, None]
    return Excitation(float(t0), T, B, phase)


def toy_t0(lam: float, t0_macro: float = 1.0, cap: float = 10.0) -> float:
    """Microscopic step t0 = t0_macro / lam^2, capped for the toy."""
    return min(t0_macro / lam**2, cap)


def correlations(toy: ToySystem, A: Iterable[int], t0: float,
                 propagator: np.ndarray | None = None,
                 exc: Excitation | None = None) -> np.ndarray:
    """G_A = E(B(tau_m) odot ... odot B(tau_1)) as a dense tensor on the legs of A."""
    A = sorted(A)
    if exc is None:
        exc = excitation(toy, t0, propagator)
    if not A:
        return np.array(1.0 + 0j)
    X = np.einsum("abcd,d->abc", exc.at(A[0]), toy.rho_ref.reshape(-1))
    for tau in A[1:]:
        X = np.einsum("cdef,...f->...cde", exc.at(tau), X)
    G = np.tensordot(X, _vec_identity(toy.n_bath), axes=([-1], [0]))
    m = len(A)
    perm = [2 * k for k in range(m)] + [2 * k + 1 for k in range(m)]
    return np.transpose(G, perm)


# ---------------------------------------------------------------------------
# contraction of time-labelled tensors
# ---------------------------------------------------------------------------

def _leg(NS: int) -> LegSpec:
    return LegSpec("s", np.zeros(NS))


def contract_chain(factors, NS: int, blocks=None) -> np.ndarray:
    """Chronological contraction of (labels, tensor) factors.

    Labels must tile a discrete interval; ``blocks`` groups it into
    consecutive sub-intervals that each contract to one leg.
    """
    ks = []
    for lab, arr in factors:
        lab = tuple(lab)
        ks.append((lab, Kernel(tuple(_leg(NS) for _ in lab), np.asarray(arr))))
    return contract(ks, blocks).data


def embed_product(parts, A) -> np.ndarray:
    """Tensor product of (B, tensor_B) over disjoint B covering A, in A's leg layout."""
    A = sorted(A)
    pos = {tau: k for k, tau in enumerate(A)}
    m = len(A)
    operands = []
    for B, arr in parts:
        B = sorted(B)
        operands += [arr, [pos[t] for t in B] + [m + pos[t] for t in B]]
    return np.einsum(*operands, list(range(2 * m)))


# ---------------------------------------------------------------------------
# correlation tables and cumulants
# ---------------------------------------------------------------------------

@dataclass
class CorrelationTable:
    """Correlation tensors G_A keyed by frozenset(A)."""

    NS: int
    G: dict = field(default_factory=dict)

    def __getitem__(self, A) -> np.ndarray:
        key = frozenset(A)
        if key not in self.G:
            raise MissingSubset(f"no correlation stored for {sorted(key)}")
        return self.G[key]


def correlation_table(toy: ToySystem, times: Iterable[int], t0: float, max_size: int | None = None,
                      propagator: np.ndarray | None = None) -> CorrelationTable:
    """G_A for every non-empty A within ``times`` up to ``max_size`` elements."""
    times = sorted(times)
    exc = excitation(toy, t0, propagator)
    max_size = len(times) if max_size is None else max_size
    table = CorrelationTable(toy.NS)
    for k in range(1, max_size + 1):
        for A in itertools.combinations(times, k):
            table.G[frozenset(A)] = correlations(toy, A, t0, exc=exc)
    return table


def set_partitions(items):
    """All partitions of a list into non-empty blocks."""
    items = list(items)
    if not items:
        yield []
        return
    first, rest = items[0], items[1:]
    for part in set_partitions(rest):
        for i in range(len(part)):
            yield part[:i] + [[first] + part[i]] + part[i + 1:]
        yield [[first]] + part


def cumulants(table: CorrelationTable, sets=None) -> dict:
    """Connected correlations by inverting G_A = sum_partitions tensor G^c, smallest sets first."""
    targets = list(table.G) if sets is None else [frozenset(s) for s in sets]
    needed = set()
    for A in targets:
        for k in range(1, len(A) + 1):
            needed.update(frozenset(c) for c in itertools.combinations(sorted(A), k))
    missing = [sorted(s) for s in needed if s not in table.G]
    if missing:
        raise MissingSubset(f"correlations missing for {sorted(missing)}")
    Gc = {}
    for A in sorted(needed, key=lambda s: (len(s), sorted(s))):
        acc = table.G[A].copy()
        for part in set_partitions(sorted(A)):
            if len(part) == 1:
                continue
            acc = acc - embed_product([(B, Gc[frozenset(B)]) for B in part], A)
        Gc[A] = acc
    return {A: Gc[A] for A in targets}


def moments_from_cumulants(Gc: Mapping, A) -> np.ndarray:
    """Re-sum cumulants over all partitions of A."""
    A = sorted(A)
    return sum(embed_product([(B, Gc[frozenset(B)]) for B in part], A) for part in set_partitions(A))


# ---------------------------------------------------------------------------
# Ward identity
# ---------------------------------------------------------------------------

def ward_unitarity(Gc: np.ndarray) -> float:
    """Max |trace over the output leg of the latest time| of a cumulant tensor."""
    m = Gc.ndim // 2
    if m < 1:
        raise ValueError("tensor has no legs")
    n = math.isqrt(Gc.shape[0])
    r = np.tensordot(Gc, _vec_identity(n), axes=([m - 1], [0]))
    return float(np.max(np.abs(r)))


# ---------------------------------------------------------------------------
# reconstruction of Z and the scale recursion
# ---------------------------------------------------------------------------

def reconstruct(toy: ToySystem, N: int, t0: float, table: CorrelationTable | None = None,
                T: np.ndarray | None = None) -> np.ndarray:
    """sum over A in {1..N} of the contraction of T on A^c with G_A."""
    if table is None:
        table = correlation_table(toy, range(1, N + 1), t0)
    if T is None:
        T = excitation(toy, t0).T
    total = np.zeros((toy.NS, toy.NS), dtype=complex)
    for k in range(N + 1):
        for A in itertools.combinations(range(1, N + 1), k):
            factors = [((tau,), T) for tau in range(1, N + 1) if tau not in A]
            if A:
                factors.append((A, table[A]))
            total += contract_chain(factors, toy.NS)
    return total


def _disjoint_collections(ground):
    """Non-empty collections of pairwise disjoint non-empty subsets of ``ground``."""
    ground = sorted(ground)

    def rec(avail):
        if not avail:
            yield []
            return
        first, rest = avail[0], avail[1:]
        yield from rec(rest)                       # first left uncovered
        for k in range(len(rest) + 1):
            for others in itertools.combinations(rest, k):
                block = (first,) + others
                remain = [t for t in rest if t not in others]
                for tail in rec(remain):
                    yield [block] + tail

    for coll in rec(ground):
        if coll:
            yield coll


def _connected(n: int, edges) -> bool:
    seen, stack = {0}, [0]
    adj = {i: set() for i in range(n)}
    for a, b in edges:
        adj[a].add(b)
        adj[b].add(a)
    while stack:
        v = stack.pop()
        for w in adj[v] - seen:
            seen.add(w)
            stack.append(w)
    return len(seen) == n


def scale_map(K: np.ndarray, ell: float) -> np.ndarray:
    """Spatial rescaling on the toy: the chain has no room to coarse-grain, so it acts trivially."""
    del ell
    return K


def recursion_sides(toy: ToySystem, A_prime, ell2: int = 2, t0: float | None = None,
                    zero_cumulants: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """(left, right) of the scale n=0 -> 1 cumulant recursion for the set ``A_prime``.

    For a singleton the identity is the recursion for T: left is E(U^{l^2})
    and right is T^{l^2} plus the sum over non-empty collections.
    """
    A_prime = sorted(A_prime)
    if len(A_prime) > 2 or ell2 > 4:
        raise ValueError("only |A'| <= 2 and l^2 <= 4 are supported")
    t0 = toy_t0(toy.lam) if t0 is None else t0
    ell = math.sqrt(ell2)
    blocks = [tuple(range(ell2 * (tp - 1) + 1, ell2 * tp + 1)) for tp in A_prime]
    I = [t for b in blocks for t in b]
    exc0 = excitation(toy, t0)
    table0 = correlation_table(toy, I, t0)
    Gc0 = cumulants(table0)
    if zero_cumulants:
        Gc0 = {A: np.zeros_like(v) for A, v in Gc0.items()}
    rank = {t: i + 1 for i, t in enumerate(I)}
    ranked_blocks = [tuple(rank[t] for t in b) for b in blocks]
    block_of = {t: bi for bi, b in enumerate(blocks) for t in b}

    right = np.zeros((toy.NS,) * (2 * len(A_prime)), dtype=complex)
    for coll in _disjoint_collections(I):
        supp = {t for A in coll for t in A}
        if any(not (supp & set(b)) for b in blocks):
            continue
        edges = set()
        for A in coll:
            bs = sorted({block_of[t] for t in A})
            edges.update((a, b) for a, b in itertools.combinations(bs, 2))
        if not _connected(len(blocks), edges):
            continue
        factors = [(tuple(rank[t] for t in A), Gc0[frozenset(A)]) for A in coll]
        factors += [((rank[t],), exc0.T) for t in I if t not in supp]
        right = right + scale_map(contract_chain(factors, toy.NS, ranked_blocks), ell)

    if len(A_prime) == 1:
        right = right + scale_map(np.linalg.matrix_power(exc0.T, ell2), ell)
        left = scale_map(excitation(toy, ell2 * t0).T, ell)
    else:
        table1 = correlation_table(toy, A_prime, ell2 * t0)
        left = scale_map(cumulants(table1, [A_prime])[frozenset(A_prime)], ell)
    return left, right


def cumulant_recursion_check(toy: ToySystem, A_prime, ell2: int = 2, t0: float | None = None) -> float:
    """Max elementwise deviation between the two sides of the scale recursion."""
    left, right = recursion_sides(toy, A_prime, ell2, t0)
    return float(np.max(np.abs(left - right)))


# ---------------------------------------------------------------------------
# combinatorics: distances, spanning trees, polymer sums
# ---------------------------------------------------------------------------

def dist(A) -> int:
    """prod over consecutive ordered gaps of (1 + gap); 1 for a singleton."""
    A = sorted(A)
    if not A:
        raise ValueError("dist needs a non-empty set")
    return math.prod(1 + b - a for a, b in zip(A, A[1:]))


def spanning_trees(A):
    """Every spanning tree of the complete graph on A, as edge lists (Pruefer decoding)."""
    A = sorted(A)
    n = len(A)
    if n == 1:
        yield []
        return
    if n == 2:
        yield [(A[0], A[1])]
        return
    for seq in itertools.product(range(n), repeat=n - 2):
        degree = [1] * n
        for s in seq:
            degree[s] += 1
        edges = []
        for s in seq:
            leaf = min(i for i in range(n) if degree[i] == 1)
            edges.append((A[leaf], A[s]))
            degree[leaf] -= 1
            degree[s] -= 1
        u, v = [i for i in range(n) if degree[i] == 1]
        edges.append((A[u], A[v]))
        yield edges


def tree_distance(edges) -> int:
    return math.prod(1 + abs(b - a) for a, b in edges)


def tree_bound_check(A) -> bool:
    """dist(A) <= dist(tree) for every spanning tree on A."""
    d = dist(A)
    return all(d <= tree_distance(e) for e in spanning_trees(A))


@dataclass(frozen=True)
class PolymerCheck:
    hypothesis_holds: bool
    conclusion_holds: bool | None
    hypothesis_lhs: float
    hypothesis_rhs: float
    conclusion_sum: float | None
    conclusion_bound: float
    n_collections: int


def _mask(S) -> int:
    return sum(1 << int(i) for i in S)


def _polymers(w, n_max: int):
    ground = range(n_max + 1)
    out = []
    for k in range(1, n_max + 2):
        for S in itertools.combinations(ground, k):
            val = w(frozenset(S)) if callable(w) else w.get(frozenset(S), 0.0)
            if val != 0:
                out.append((frozenset(S), abs(complex(val))))
    return out


_COLLECTION_CAP = 1_000_000
_collection_memo: dict = {}
_conclusion_memo: dict = {}


def _component_supports(bits: np.ndarray, masks: np.ndarray, chunk: int = 8192) -> np.ndarray:
    """For each collection and member polymer, the support of its overlap component (0 if absent)."""
    out = np.zeros(bits.shape, dtype=np.int64)
    for a in range(0, bits.shape[0], chunk):
        cm = np.where(bits[a:a + chunk], masks[None, :], 0)
        while True:
            link = (cm[:, :, None] & cm[:, None, :]) != 0
            new = np.bitwise_or.reduce(np.where(link, cm[:, None, :], 0), axis=2)
            if np.array_equal(new, cm):
                break
            cm = new
        out[a:a + chunk] = cm
    return out


def _collections(masks: np.ndarray, logw: np.ndarray):
    """Membership bits, weights and component supports of every non-empty collection.

    Memoised by the polymer set, so sweeping over S' reuses one enumeration.
    """
    key = (masks.tobytes(), logw.tobytes())
    if key not in _collection_memo:
        n = masks.size
        if 2**n - 1 > _COLLECTION_CAP:
            raise ResourceCap(f"{2**n - 1} collections exceed the cap of {_COLLECTION_CAP}")
        codes = np.arange(1, 2**n, dtype=np.int64)
        bits = ((codes[:, None] >> np.arange(n)) & 1).astype(bool)
        _collection_memo.clear()
        _collection_memo[key] = (bits, np.exp(bits.astype(float) @ logw),
                                 _component_supports(bits, masks))
    return _collection_memo[key]


def _connected_sum(masks: np.ndarray, logw: np.ndarray, target: int) -> tuple[float, int]:
    """Sum of prod |w| over non-empty collections connected to the set ``target``.

    {S'} together with a collection is connected exactly when every overlap
    component of the collection meets S'.
    """
    if masks.size == 0:
        return 0.0, 0
    bits, weights, comps = _collections(masks, logw)
    ok = ~np.any(bits & ((comps & target) == 0), axis=1)
    return float(weights[ok].sum()), int(ok.sum())


def kotecky_preiss_check(w, kappa: float, S_prime, n_max: int = 6) -> PolymerCheck:
    """Check the polymer summability condition for S' and, if it holds, its conclusion.

    ``w`` maps subsets of {0..n_max} (as frozensets) to weights, either as a
    callable or a mapping.  The conclusion sums prod |w(S)| over non-empty
    collections of distinct polymers that, together with S', form a
    connected overlap graph.
    """
    if n_max > 8:
        raise ValueError("n_max must be at most 8")
    S_prime = frozenset(S_prime)
    polys = _polymers(w, n_max)
    lhs = sum(math.exp(kappa * len(S)) * a for S, a in polys if S & S_prime)
    rhs = kappa * len(S_prime)
    holds = lhs <= rhs
    bound = math.exp(kappa * len(S_prime))
    if not holds:
        return PolymerCheck(False, None, lhs, rhs, None, bound, 0)
    masks = np.array([_mask(S) for S, _ in polys], dtype=np.int64)
    logw = np.array([math.log(a) for _, a in polys])
    key = (masks.tobytes(), logw.tobytes(), _mask(S_prime))
    if key not in _conclusion_memo:
        _conclusion_memo[key] = _connected_sum(masks, logw, _mask(S_prime))
    total, count = _conclusion_memo[key]
    return PolymerCheck(True, total <= bound, lhs, rhs, total, bound, count)


def interval_weights(eps: float, n_max: int = 6, max_len: int = 3) -> dict:
    """w(S) = eps^|S| on discrete intervals of {0..n_max} of length <= max_len."""
    out = {}
    for a in range(n_max + 1):
        for k in range(1, max_len + 1):
            if a + k - 1 <= n_max:
                out[frozenset(range(a, a + k))] = eps**k
    return out


def hypothesis_ratio(w, kappa: float, n_max: int = 6) -> float:
    """max over non-empty S' of (sum_{S ~ S'} e^{kappa|S|}|w(S)|) / (kappa |S'|)."""
    polys = _polymers(w, n_max)
    worst = 0.0
    for k in range(1, n_max + 2):
        for Sp in itertools.combinations(range(n_max + 1), k):
            Sp = frozenset(Sp)
            lhs = sum(math.exp(kappa * len(S)) * a for S, a in polys if S & Sp)
            worst = max(worst, lhs / (kappa * len(Sp)))
    return worst


def tune_interval_eps(kappa: float = 1.0, slack: float = 0.5, n_max: int = 6, max_len: int = 3) -> float:
    """Largest eps with hypothesis_ratio = 1 - slack, by bisection."""
    lo, hi = 0.0, 1.0
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if hypothesis_ratio(interval_weights(mid, n_max, max_len), kappa, n_max) <= 1 - slack:
            lo = mid
        else:
            hi = mid
    return lo


# ---------------------------------------------------------------------------
# edge factors of the time-decay bound
# ---------------------------------------------------------------------------

def edge_factors(h: Callable[[float], float], lam: float, t0: float, alpha: float,
                 max_gap: int) -> np.ndarray:
    """lam^2 (1+g)^alpha int_Dom(tau) du int_Dom(tau+g) dv h(v-u) for g = 1..max_gap.

    The double integral over two blocks of length t0 equals the integral of
    h(s) against the triangle t0 - |s - g t0| on [(g-1) t0, (g+1) t0].
    """
    out = np.empty(max_gap)
    for g in range(1, max_gap + 1):
        c = g * t0
        val = 0.0
        for a, b in ((c - t0, c), (c, c + t0)):
            val += integrate.quad(lambda s: h(s) * (t0 - abs(s - c)), a, b, limit=200)[0]
        out[g - 1] = lam**2 * (1 + g) ** alpha * val
    return out
