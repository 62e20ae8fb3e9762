import math

import numpy as np
import pytest
import scipy.linalg as sl
import scipy.sparse as sp

from elasticdtn.errors import SolverError
from elasticdtn.fem import assemble, h1_norm
from elasticdtn.material import IsotropicTensor, ParamVector, PriorData, reference_tensor
from elasticdtn.mesh import build_block_mesh, two_block_blocks
from elasticdtn.solver import (ReducedSystem, admissible_frequency_bound, block_jacobi,
                               energy_constant, pcg, smallest_dirichlet_eigenvalue, solve_dirichlet)


@pytest.fixture(scope="module")
def cube4():
    return build_block_mesh(4, 4, 4)


@pytest.mark.parametrize("method", ["pcg", "direct"])
def test_linear_field_is_reproduced(cube4, method):
    op = assemble(cube4, ParamVector.from_parts([0.9], [1.4], [1.0]))
    B = np.array([[0.2, 0.1, -0.3], [0.0, 0.5, 0.2], [-0.4, 0.1, 0.3]])
    u_star = (cube4.vertices @ B.T).ravel()
    u, rep = solve_dirichlet(op, g=u_star[op.dofs.dirichlet], tol=1e-12, method=method)
    assert np.abs(u - u_star).max() <= 1e-9
    assert rep.residual <= 1e-12 or method == "direct"


def test_constant_with_matching_source(cube4):
    rho, omega = 1.7, 1.3
    op = assemble(cube4, ParamVector.from_parts([0.5], [1.0], [rho]), omega)
    c = np.array([0.3, -1.2, 0.7])
    f = np.tile(-omega ** 2 * rho * c, cube4.n_vertices)
    g = np.tile(c, len(op.dofs.dirichlet) // 3)
    u, _ = solve_dirichlet(op, g=g, f=f, tol=1e-12)
    np.testing.assert_allclose(u.reshape(-1, 3), np.broadcast_to(c, (cube4.n_vertices, 3)), atol=1e-9)


def test_zero_data_gives_zero(cube4):
    op = assemble(cube4, ParamVector.from_parts([0.5], [1.0], [1.0]), 1.0)
    u, rep = solve_dirichlet(op)
    assert not np.any(u)


def test_pcg_energy_is_monotone(cube4):
    op = assemble(cube4, ParamVector.from_parts([0.5], [1.0], [1.0]), 1.0)
    rng = np.random.default_rng(0)
    A = op.A_II
    b = rng.standard_normal(A.shape[0])
    x, rep = pcg(A, b, 1e-12, precond=block_jacobi(A))
    assert np.all(np.diff(rep.energy) <= 1e-12 * abs(rep.energy[-1]))
    assert np.linalg.norm(A @ x - b) <= 1e-10 * np.linalg.norm(b)
    direct, _ = ReducedSystem(op, "direct").solve_interior(b, 1e-12)
    np.testing.assert_allclose(x, direct, atol=1e-9 * np.abs(direct).max())


def test_pcg_failures():
    A = sp.diags([-1.0, -2.0, -0.5]).tocsr()
    with pytest.raises(SolverError):
        pcg(A, np.ones(3), 1e-12)
    A = sp.diags(np.logspace(0, 8, 198)).tocsr()
    with pytest.raises(SolverError) as exc:
        pcg(A, np.ones(198), 1e-14, maxiter=3, precond=sp.identity(198))
    assert len(exc.value.history) >= 1


def test_energy_estimate_constant_is_stable(cube4):
    op = assemble(cube4, ParamVector.from_parts([0.5], [1.0], [1.0]), 1.0)
    rng = np.random.default_rng(3)
    d = op.dofs
    ratios = []
    for _ in range(50):
        g = rng.standard_normal(len(d.dirichlet))
        f = rng.standard_normal(d.n_dofs)
        u, _ = solve_dirichlet(op, g=g, f=f, tol=1e-10, method="direct")
        g_full = np.zeros(d.n_dofs)
        g_full[d.dirichlet] = g
        f_norm = math.sqrt(f @ (op.assembly.mass_unit @ f))
        ratios.append(energy_constant(op, u, h1_norm(op.assembly, g_full), f_norm))
    assert np.all(np.isfinite(ratios))
    assert max(ratios) <= 3 * min(ratios)


def test_vector_laplacian_eigenvalue_trend():
    # lambda = -mu reduces the operator to mu times the vector Laplacian, eigenvalue 3 pi^2 mu
    vals = [smallest_dirichlet_eigenvalue(build_block_mesh(n, n, n), IsotropicTensor(-1.0, 1.0))
            for n in (4, 8)]
    target = 3 * math.pi ** 2
    assert vals[0] > vals[1] > target
    assert (vals[1] - target) / target < 0.07


def _dense_eigs(m, t):
    n = m.n_regions
    op = assemble(m, ParamVector.from_parts([t.lam] * n, [t.mu] * n, [1.0] * n))
    i = op.dofs.interior
    A = op.A_II.toarray()
    M = op.assembly.mass_unit[i][:, i].toarray()
    return sl.eigh(A, M, eigvals_only=True)


def test_eigenvalue_matches_dense_on_coarse_mesh(prior):
    m = build_block_mesh(4, 4, 4)
    t = reference_tensor(prior)
    lam = smallest_dirichlet_eigenvalue(m, t, tol=1e-10)
    dense = _dense_eigs(m, t)[0]
    assert abs(lam - dense) <= 1e-8 * dense


def test_eigenvalue_homogeneous_and_minimal(prior):
    m = build_block_mesh(4, 4, 4)
    t = reference_tensor(prior)
    lam, x = smallest_dirichlet_eigenvalue(m, t, tol=1e-11, return_vector=True)
    lam2 = smallest_dirichlet_eigenvalue(m, t.scaled(2.0), tol=1e-11)
    assert abs(lam2 - 2 * lam) <= 1e-10 * lam2 * 10
    op = assemble(m, ParamVector.from_parts([t.lam], [t.mu], [1.0]))
    i = op.dofs.interior
    A, M = op.A_II, op.assembly.mass_unit[i][:, i]
    rng = np.random.default_rng(1)
    for _ in range(50):
        v = rng.standard_normal(len(i))
        assert lam <= (v @ (A @ v)) / (v @ (M @ v)) * (1 + 1e-12)


def test_frequency_bound():
    p = PriorData(gamma0=0.5)
    assert admissible_frequency_bound(p, 16.0) == pytest.approx(2.0)
    small = [admissible_frequency_bound(PriorData(gamma0=g), 16.0) for g in (0.1, 0.01, 1e-6)]
    assert small == sorted(small, reverse=True) and small[-1] < 1e-2
    with pytest.raises(SolverError):
        admissible_frequency_bound(p, -1.0)


def test_frequency_bound_chain_against_dense(prior):
    m = build_block_mesh(4, 4, 4, two_block_blocks())
    t = reference_tensor(prior)
    wmax = admissible_frequency_bound(prior, smallest_dirichlet_eigenvalue(m, t, tol=1e-10))
    dense = _dense_eigs(m, t)[0]
    assert wmax == pytest.approx(math.sqrt(prior.gamma0 * dense / 2), rel=1e-8)
