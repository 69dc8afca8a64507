import itertools
import warnings

import numpy as np
import pytest
import scipy.linalg as sla

from qdiffusion import rg_flow as rg
from qdiffusion.errors import GapCollapse, HypothesisViolated, LabelGap, WindowOverflow
from qdiffusion.markov import diffusion_green_kubo, jump_rates
from qdiffusion.model import build_model, spectral_measures

LAM = 0.1


@pytest.fixture(scope="module")
def rates():
    m = build_model({"lattice": {"grid": 8}})
    return jump_rates(m.spin, spectral_measures(m))


@pytest.fixture(scope="module")
def seed(rates):
    t0 = rg.choose_t0(rates, LAM)
    return t0, rg.seed_kernel(rates, t0, LAM)


@pytest.fixture(scope="module")
def states(seed):
    s0 = rg.make_state(seed[1])
    return s0, rg.rg_step(s0)


def _leg(size, h=0.5):
    return rg.LegSpec("x", h * np.arange(size), h)


def _rand(rng, legs):
    shape = tuple(leg.size for leg in legs) * 2
    return rg.Kernel(tuple(legs), rng.normal(size=shape) + 1j * rng.normal(size=shape))


# ---------------------------------------------------------------------------
# generic kernel algebra
# ---------------------------------------------------------------------------

def _contract_oracle(K1, lab1, K2, lab2, blocks, measure):
    """Chronological product by explicit summation over every internal variable."""
    where = {t: (0, i) for i, t in enumerate(lab1)}
    where.update({t: (1, i) for i, t in enumerate(lab2)})
    labels = sorted(where)
    block_of = {t: b for b, blk in enumerate(blocks) for t in blk}
    size = K1.legs[0].size
    tops = [max(b) for b in blocks]
    bottoms = [min(b) for b in blocks]
    internal = [t for t in labels if t not in tops]
    result = np.zeros((size,) * len(blocks) * 2, dtype=complex)
    for ext in itertools.product(range(size), repeat=2 * len(blocks)):
        total = 0.0
        for vals in itertools.product(range(size), repeat=len(internal)):
            out = dict(zip(internal, vals))
            out.update({t: ext[i] for i, t in enumerate(tops)})
            inn = {}
            for t in labels:
                if t in bottoms:
                    inn[t] = ext[len(blocks) + bottoms.index(t)]
                else:
                    inn[t] = out[t - 1]
            a = K1.data[tuple(out[t] for t in lab1) + tuple(inn[t] for t in lab1)]
            b = K2.data[tuple(out[t] for t in lab2) + tuple(inn[t] for t in lab2)]
            total += a * b
        result[ext] = total * measure ** len(internal)
    return result


@pytest.mark.parametrize("blocks", [[(1, 2, 3, 4, 5, 6, 7, 8)], [(1, 2, 3, 4), (5, 6, 7, 8)],
                                    [(1, 2, 3), (4, 5), (6, 7, 8)]])
def test_contraction_matches_nested_loops(blocks):
    rng = np.random.default_rng(4)
    legs = [_leg(2, 0.7)] * 4
    K1, K2 = _rand(rng, legs), _rand(rng, legs)
    lab1, lab2 = (1, 2, 5, 6), (3, 4, 7, 8)
    got = rg.contract([(lab1, K1), (lab2, K2)], blocks)
    expect = _contract_oracle(K1, lab1, K2, lab2, blocks, 0.7)
    assert got.degree == len(blocks)
    assert np.abs(got.data - expect).max() < 1e-12 * np.abs(expect).max()


def test_two_factor_chain_is_matrix_product():
    rng = np.random.default_rng(5)
    leg = _leg(5, 0.3)
    A, B = _rand(rng, [leg]), _rand(rng, [leg])
    got = rg.contract([((1,), A), ((2,), B)])
    assert np.allclose(got.data, 0.3 * B.data @ A.data)
    assert np.allclose(rg.chain(rg.tensor(A, B)).data, got.data)


def test_delta_kernel_is_a_unit():
    rng = np.random.default_rng(6)
    legs = [_leg(3, 0.5), rg.LegSpec("s", [0, 1, 1], 1.0)]
    K = _rand(rng, legs)
    delta = rg.delta_kernel(legs)
    assert np.allclose(rg.contract([((1,), K), ((2,), delta)]).data, K.data)
    assert np.allclose(rg.contract([((1,), delta), ((2,), K)]).data, K.data)
    assert rg.gamma_norm(delta) == pytest.approx(1.0)


def test_label_gaps_are_rejected():
    rng = np.random.default_rng(7)
    K = _rand(rng, [_leg(2)])
    with pytest.raises(LabelGap):
        rg.contract([((1,), K), ((3,), K)])
    with pytest.raises(LabelGap):
        rg.contract([((1,), K), ((1,), K)])
    with pytest.raises(LabelGap):
        rg.contract([((1,), K), ((2,), K)], blocks=[(1,)])
    with pytest.raises(LabelGap):
        rg.contract([])


def test_algebra_suite_has_no_violations():
    results = rg.kernel_algebra_suite(n_samples=60, seed=1)
    assert len(results) >= 10
    for r in results.values():
        assert r.n_cases > 0 and r.passed, r


def test_gamma_norm_of_single_leg_is_row_column_max():
    rng = np.random.default_rng(8)
    leg = _leg(6, 0.4)
    K = _rand(rng, [leg])
    a = np.abs(K.data) * np.exp(0.3 * leg.distance())
    expect = max((0.4 * a.sum(axis=1)).max(), (0.4 * a.sum(axis=0)).max())
    assert rg.gamma_norm(K, 0.3) == pytest.approx(expect, rel=1e-14)


def test_scaling_rejects_bad_factors_and_overflow(seed):
    K = seed[1]
    with pytest.raises(ValueError):
        rg.scale_kernel(K, 1)
    far = rg.LatticeKernel(20, 4, 4.0**-20, K.values, K.basis)
    with pytest.raises(WindowOverflow):
        rg.scale_kernel(far, 4)
    with pytest.raises(TypeError):
        rg.scale_kernel(np.zeros(3), 2)


# ---------------------------------------------------------------------------
# eigenvalue persistence
# ---------------------------------------------------------------------------

def _instance(rng, dim=6, a0=2.0):
    V = rng.normal(size=(dim, dim)) + np.eye(dim) * 3
    Vi = np.linalg.inv(V)
    others = rng.uniform(-0.3, 0.3, dim - 1)
    A0 = V @ np.diag(np.concatenate([[a0], others])) @ Vi
    P0 = np.outer(V[:, 0], Vi[0])
    return A0, P0


def test_persistence_bound_formula_and_dense_check():
    rng = np.random.default_rng(9)
    A0, P0 = _instance(rng)
    rest = rg.diamond_norm(A0 - 2.0 * P0)
    r = 0.5 * (2.0 - rest)
    A1 = rng.normal(size=A0.shape)
    base = rg.eigen_persistence_bound(A0, 2.0, P0, np.zeros_like(A0), r)
    assert base.b == pytest.approx(rg.diamond_norm(P0) / r + 1 / (2.0 - r - rest))
    assert base.persists and base.projector_bound == 0
    A1 *= 0.5 / (rg.diamond_norm(A1) * base.b)
    res = rg.eigen_persistence_bound(A0, 2.0, P0, A1, r)
    assert res.persists
    vals, vl, vr = sla.eig(A0 + A1, left=True, right=True)
    i = np.argmin(np.abs(vals - 2.0))
    assert abs(vals[i] - 2.0) <= r
    assert np.sum(np.abs(vals - 2.0) <= r) == 1
    P = np.outer(vr[:, i], vl[:, i].conj()) / (vl[:, i].conj() @ vr[:, i])
    assert rg.diamond_norm(P - P0) <= res.projector_bound
    big = rg.eigen_persistence_bound(A0, 2.0, P0, 10 * A1 / rg.diamond_norm(A1), r)
    assert not big.persists


def test_persistence_rejects_bad_hypotheses():
    rng = np.random.default_rng(10)
    A0, P0 = _instance(rng)
    with pytest.raises(HypothesisViolated):
        rg.eigen_persistence_bound(A0, 2.0, np.eye(6), A0 * 0, 0.1)
    with pytest.raises(HypothesisViolated):
        rg.eigen_persistence_bound(A0, 2.0, P0, A0 * 0, 5.0)


def test_persistence_suite_has_no_violations():
    results = rg.persistence_suite(n_instances=40, seed=2)
    assert set(results) == {"eigenvalue", "projector", "isolated"}
    assert all(r.passed and r.n_cases == 40 for r in results.values())


# ---------------------------------------------------------------------------
# the flow
# ---------------------------------------------------------------------------

def test_seed_curvature_is_macroscopic_diffusion(rates, seed, states):
    t0, _ = seed
    D_Q = diffusion_green_kubo(rates).D
    assert states[0].D == pytest.approx(t0 * D_Q, rel=1e-8)


def test_seed_is_reflection_covariant(seed):
    K = seed[1]
    for p in (0.3, -1.1, 0.2 + 0.04j):
        I_p = K.basis.reflection(p)
        assert np.abs(K.fourier(p) @ I_p - I_p @ K.fourier(-p)).max() < 1e-12


def test_seed_preserves_trace(seed):
    K = seed[1]
    s0 = K.basis.s0
    T0 = K.fourier(0.0)
    assert np.abs(s0 @ T0 - s0).max() < 1e-10


def test_step_rescales_the_eigenvalue(states):
    s0, s1 = states
    p = np.linspace(-0.8, 0.8, 9)
    assert np.abs(np.exp(s1.f_at(p)) - np.exp(16 * s0.f_at(p / 4))).max() < 1e-8
    assert s1.D == pytest.approx(s0.D, rel=1e-8)
    assert s1.kernel.n == 1 and s1.kernel.spacing == 0.25


def test_step_suppresses_subleading_part(states):
    s0, s1 = states
    assert s1.gap < s0.gap**4


def test_step_is_power_then_scale(states):
    s0, s1 = states
    K = s0.kernel
    P = rg.power_kernel(K, 16, 2 * K.size)
    scaled = rg.scale_kernel(P, 4)
    p = np.linspace(-2, 2, 7)
    assert np.abs(scaled.fourier(p) - s1.kernel.fourier(p)).max() < 1e-8


def test_fourier_round_trip(seed):
    K = seed[1]
    p = rg.fourier_grid(K.size, K.spacing)
    back = rg.kernel_from_fourier(K.fourier(p), K.spacing, K.n, K.ell, K.basis)
    assert np.abs(back.values - K.values).max() < 1e-13


def test_induction_report(states):
    s0, s1 = states
    first = rg.verify_induction(s1)
    assert set(first.checks) == {"strip", "parabola", "small_gap", "large_gap", "decay", "envelope"}
    assert first.passed and not first.gap_collapse
    assert not rg.verify_induction(s0).checks["parabola"].passed


def test_gap_collapse_warns(seed):
    with pytest.warns(GapCollapse):
        state = rg.make_state(seed[1], rg.FlowConfig(gap_budget=1e-6))
    assert state.gap_collapsed
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", GapCollapse)
        assert rg.verify_induction(state).gap_collapse


def test_surrogate_error_shrinks_along_flow(rates, seed):
    t0, K = seed
    D_Q = diffusion_green_kubo(rates).D
    records, final = rg.run_flow(K, 3, t0=t0, D_star=D_Q, rho0=rg.gibbs_density(rates, 1.0))
    errs = [r.surrogate_error for r in records]
    assert all(b < a / 8 for a, b in zip(errs, errs[1:]))
    assert final.n == 3
    assert all(r.D == pytest.approx(records[0].D, rel=1e-7) for r in records)


def test_choose_t0_meets_budget(rates, seed):
    t0, K = seed
    basis = K.basis
    T = rg.seed_fourier(rates, [0.0, 1.0, np.pi], t0, LAM)
    for t in T:
        rest = (np.eye(basis.dim) - rg.leading_part(t).projector) @ t
        assert rg.g_norm(rest, basis.v, 0.05) < 0.5
    with pytest.raises(HypothesisViolated):
        rg.choose_t0(rates, LAM, budget=0.0)


def test_gibbs_density_has_unit_trace(rates):
    rho = rg.gibbs_density(rates, 1.0)
    basis = rg.InternalBasis(rates.n_levels, rates.n_k)
    assert basis.s0 @ rho == pytest.approx(1.0)
    assert rho[rates.n_k // 2].real / rho[3 * rates.n_k + rates.n_k // 2].real == pytest.approx(np.exp(0.6))


def test_snapshot_round_trip(tmp_path, seed):
    K = seed[1]
    path = tmp_path / "k.bin"
    rg.write_snapshot(path, K)
    back = rg.read_snapshot(path)
    assert np.array_equal(back.values, K.values)
    assert (back.n, back.spacing, back.basis) == (K.n, K.spacing, K.basis)
    path.write_bytes(b"XXXX" + path.read_bytes()[4:])
    with pytest.raises(ValueError):
        rg.read_snapshot(path)


def test_flow_table(tmp_path):
    rec = [rg.FlowRecord(0, 1.5, 0.1, 0.2, 1.0, 0.03), rg.FlowRecord(1, 1.5, 1e-9, 0.01, 1.0, 0.002)]
    path = tmp_path / "flow.csv"
    rg.write_flow_table(path, rec, {"schema": "flow/1"})
    lines = path.read_text().splitlines()
    assert lines[0] == "# schema: flow/1"
    assert lines[1] == ",".join(rg.FLOW_COLUMNS)
    assert float(lines[3].split(",")[-1]) == 0.002
