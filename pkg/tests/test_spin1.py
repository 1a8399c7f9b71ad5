import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nlreadout import spin1
from nlreadout.spin1 import (
    BlockEvolver, FockBasis, SpinorFockState, SystemParams, block_moments, build_basis, energy, evolve,
    fidelity, ground_state, observables, polar_state, rho0_distribution, rotate_about_Lx, rotate_many,
)
from oracles import dense_expm_apply, dense_hamiltonian, dense_spin_ops, fock_order, spin1_rotation_x


def dense_block_hamiltonian(basis, c2, q):
    H = np.zeros((basis.dim, basis.dim))
    for m in basis.blocks:
        d, o = basis.hamiltonian_block(m, c2, q)
        s = basis.offsets[m]
        n = d.size
        H[s:s + n, s:s + n] = np.diag(d) + np.diag(o, 1) + np.diag(o, -1)
    return H


def random_state(basis, rng):
    vec = rng.normal(size=basis.dim) + 1j * rng.normal(size=basis.dim)
    return SpinorFockState.from_vector(basis, vec / np.linalg.norm(vec))


@pytest.mark.parametrize("N", range(1, 7))
@pytest.mark.parametrize("c2,q", [(-1.0, 0.0), (-1.0, 1.5), (0.7, -0.3)])
def test_block_hamiltonian_matches_dense_literal(N, c2, q):
    basis = FockBasis(N)
    H = dense_block_hamiltonian(basis, c2, q)
    ref = dense_hamiltonian(N, c2, q, fock_order(N))
    assert np.max(np.abs(H - ref)) < 1e-12


@pytest.mark.parametrize("N", [1, 2, 5])
def test_lx_matches_dense(N):
    basis = FockBasis(N)
    ops = dense_spin_ops(N, fock_order(N))
    assert np.max(np.abs(basis.lx.toarray() - ops["lx"])) < 1e-12


def test_basis_dimensions_and_indexing():
    b = FockBasis(4)
    assert b.dim == 15
    assert sum(b.block_dim(m) for m in b.blocks) == b.dim
    for m in b.blocks:
        for k, (npl, n0, nmi) in enumerate(b.states(m)):
            assert npl + n0 + nmi == 4 and npl - nmi == m
            assert b.index(npl, n0, nmi) == (m, k)
    with pytest.raises(ValueError):
        FockBasis(0)
    with pytest.raises(ValueError):
        b.index(1, 1, 1)


def test_state_validation():
    b = FockBasis(2)
    with pytest.raises(ValueError):
        SpinorFockState(b, {0: np.array([1.0])})
    with pytest.raises(ValueError):
        SpinorFockState(b, {5: np.array([1.0])})
    with pytest.raises(ValueError):
        SpinorFockState(b, {0: np.array([1.0, np.nan])})
    with pytest.raises(ValueError):
        SystemParams(0)
    with pytest.raises(ValueError):
        SystemParams(3, q=np.inf)


def test_polar_state_properties():
    s = polar_state(FockBasis(6))
    o = observables(s)
    assert o.mean_rho0 == 1 and o.var_rho0 == 0
    assert o.mean_L2 == pytest.approx(2 * 6)
    assert energy(s, SystemParams(6, -1.0, 2.0)) == pytest.approx(-2.0 * 6 + (-1.0) / 12 * (2 * 6 - 1) * 0)


def test_ground_state_small_cases():
    g = ground_state(SystemParams(2, -1.0, 0.0))
    assert np.allclose(np.abs(g.blocks[0]), [np.sqrt(2 / 3), np.sqrt(1 / 3)][::-1], atol=1e-12) or \
        np.allclose(np.abs(g.blocks[0]), [np.sqrt(2 / 3), np.sqrt(1 / 3)], atol=1e-12)
    g = ground_state(SystemParams(30, -1.0, 0.0))
    o = observables(g)
    assert o.mean_L2 == pytest.approx(30 * 31, rel=1e-10)
    assert 2 * o.mean_Lx2 == pytest.approx(o.mean_L2, rel=1e-10)
    assert fidelity(ground_state(SystemParams(50, -1.0, 100.0)), polar_state(build_basis(50))) > 0.999


def test_ground_state_is_lowest_eigenvector():
    N = 5
    H = dense_hamiltonian(N, -1.0, 0.4, fock_order(N))
    w = np.linalg.eigvalsh(H)
    g = ground_state(SystemParams(N, -1.0, 0.4))
    assert energy(g, SystemParams(N, -1.0, 0.4)) == pytest.approx(w[0], abs=1e-10)


def test_evolve_matches_dense_expm_n50():
    N = 50
    basis = build_basis(N)
    rng = np.random.default_rng(3)
    amps = {m: rng.normal(size=basis.block_dim(m)) + 0j for m in (0, 3, -7)}
    s = SpinorFockState(basis, amps)._normalized()
    p = SystemParams(N, -1.0, 0.8)
    out = evolve(s, p, 2.3)
    for m in s.blocks:
        d, o = basis.hamiltonian_block(m, p.c2, p.q)
        H = np.diag(d) + np.diag(o, 1) + np.diag(o, -1)
        ref = dense_expm_apply(H, s.blocks[m], 2.3)
        assert np.max(np.abs(out.blocks[m] - ref)) < 1e-9


def test_evolve_krylov_path_matches_dense_expm():
    N = 80  # block 0 has 41 states, past the direct-diagonalization cutoff
    basis = build_basis(N)
    assert basis.block_dim(0) > spin1.DIRECT_DIM >= basis.block_dim(30)
    rng = np.random.default_rng(5)
    amps = {m: rng.normal(size=basis.block_dim(m)) + 0j for m in (0, 30)}
    s = SpinorFockState(basis, amps)._normalized()
    p = SystemParams(N, -1.0, -1.2)
    out = evolve(s, p, 1.7)
    for m in s.blocks:
        d, o = basis.hamiltonian_block(m, p.c2, p.q)
        H = np.diag(d) + np.diag(o, 1) + np.diag(o, -1)
        assert np.max(np.abs(out.blocks[m] - dense_expm_apply(H, s.blocks[m], 1.7))) < 1e-9
    assert out.norm() == pytest.approx(1.0, abs=1e-10)


def test_evolve_errors():
    s = polar_state(build_basis(4))
    with pytest.raises(ValueError):
        evolve(s, SystemParams(4), np.nan)
    with pytest.raises(ValueError):
        evolve(s, SystemParams(4), -1.0)
    with pytest.raises(ValueError):
        evolve(s, SystemParams(5), 1.0)
    assert evolve(s, SystemParams(4), 0.0) is s


@pytest.mark.parametrize("phi", [0.1, 0.7, np.pi / 2])
def test_rotation_of_polar_state(phi):
    """Each atom rotates independently: rho0 = cos^2 phi."""
    N = 8
    s = rotate_about_Lx(polar_state(build_basis(N)), phi)
    o = observables(s)
    assert o.mean_rho0 == pytest.approx(np.cos(phi) ** 2, abs=1e-10)
    p0 = abs(spin1_rotation_x(phi)[1, 1]) ** 2
    assert o.var_rho0 == pytest.approx(p0 * (1 - p0) / N, abs=1e-10)


def test_rotate_many_matches_single_rotation():
    N = 10
    g = ground_state(SystemParams(N, -1.0, 0.3))
    phis = [0.0, 0.05, -0.4]
    many = rotate_many(g, phis)
    for k, phi in enumerate(phis):
        single = rotate_about_Lx(g, phi).to_vector() if phi else g.to_vector()
        vec = np.concatenate([many[m][:, k] for m in g.basis.blocks])
        assert np.max(np.abs(vec - single)) < 1e-10
    krylov = rotate_many(g, phis, dense_limit=0)
    for m in many:
        assert np.max(np.abs(many[m] - krylov[m])) < 1e-10


def test_block_evolver_and_moments_match_single_state_path():
    N = 12
    basis = build_basis(N)
    g = ground_state(SystemParams(N, -1.0, 0.0))
    copies = rotate_many(g, [0.0, 0.2])
    ev = BlockEvolver(basis)
    copies = ev.propagate(copies, 1.1, 0.9)
    mo = block_moments(basis, copies)
    s = evolve(rotate_about_Lx(g, 0.2), SystemParams(N, -1.0, 1.1), 0.9)
    o = observables(s)
    assert mo["n0"][1] / N == pytest.approx(o.mean_rho0, abs=1e-10)
    assert mo["corr"][1] == pytest.approx(o.spin_mixing_correlator, abs=1e-9)
    assert mo["norm"] == pytest.approx([1.0, 1.0], abs=1e-12)


def test_observables_match_dense_operators():
    N = 4
    basis = build_basis(N)
    ops = dense_spin_ops(N, fock_order(N))
    s = random_state(basis, np.random.default_rng(5))
    v = s.to_vector()
    ex = lambda op: np.vdot(v, op @ v)
    o = observables(s)
    L2 = ops["lx"] @ ops["lx"] + ops["ly"] @ ops["ly"] + ops["lz"] @ ops["lz"]
    assert o.mean_rho0 == pytest.approx(ex(ops["n0"]).real / N, abs=1e-12)
    assert o.mean_L2 == pytest.approx(ex(L2).real, abs=1e-10)
    assert o.mean_Lx2 == pytest.approx(ex(ops["lx"] @ ops["lx"]).real, abs=1e-10)
    assert o.spin_mixing_correlator == pytest.approx(ex(ops["corr"]), abs=1e-10)
    lz2 = ops["lz"] @ ops["lz"]
    assert o.var_Lz2 == pytest.approx(ex(lz2 @ lz2).real - ex(lz2).real ** 2, abs=1e-10)


def test_rho0_distribution_sums_to_one():
    s = rotate_about_Lx(polar_state(build_basis(6)), 0.4)
    x, p = rho0_distribution(s)
    assert p.sum() == pytest.approx(1.0)
    assert np.dot(x, p) == pytest.approx(np.cos(0.4) ** 2, abs=1e-10)


@settings(max_examples=15, deadline=None)
@given(q=st.floats(-3, 3), t=st.floats(0, 20), seed=st.integers(0, 10_000))
def test_evolution_preserves_norm_and_energy(q, t, seed):
    basis = build_basis(8)
    s = random_state(basis, np.random.default_rng(seed))
    p = SystemParams(8, -1.0, q)
    out = evolve(s, p, t)
    assert out.norm() == pytest.approx(1.0, abs=1e-10)
    assert energy(out, p) == pytest.approx(energy(s, p), abs=1e-8 * max(1.0, abs(energy(s, p))))
