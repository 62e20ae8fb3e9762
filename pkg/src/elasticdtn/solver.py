"""Dirichlet solves of the reduced system and the smallest Dirichlet eigenvalue.

Dirichlet data are eliminated, leaving ``A_II u_I = b_I - A_IB g`` on the
interior dofs.  Under the frequency bound this matrix is symmetric positive
definite and conjugate gradients apply.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.linalg as sl
import scipy.sparse.linalg as spla

from .errors import DimensionError, DomainError, SolverError
from .fem import DiscreteOperator, assemble, h1_norm, mesh_assembly
from .material import IsotropicTensor, ParamVector, PriorData
from .mesh import PartitionedMesh

log = logging.getLogger(__name__)


@dataclass
class SolveReport:
    iterations: int
    residual: float
    wall_time: float
    method: str = "pcg"
    history: list[float] = field(default_factory=list, repr=False)
    energy: list[float] = field(default_factory=list, repr=False)


def block_jacobi(A: sp.spmatrix) -> sp.csr_matrix:
    """Inverse of the 3x3 per-vertex diagonal blocks of ``A``."""
    n = A.shape[0]
    if n % 3:
        raise DimensionError("block Jacobi needs a multiple of three dofs")
    A = A.tocsr()
    blocks = np.zeros((n // 3, 3, 3))
    for i in range(3):
        for j in range(3):
            blocks[:, i, j] = A[i::3, j::3].diagonal()
    inv = np.linalg.inv(blocks)
    return _bsr_inverse(inv)


def _bsr_inverse(inv: np.ndarray) -> sp.csr_matrix:
    nb = len(inv)
    return sp.bsr_matrix((inv, np.arange(nb), np.arange(nb + 1)), shape=(3 * nb, 3 * nb)).tocsr()


def pcg(A, b, tol: float = 1e-10, maxiter: int | None = None, precond=None, x0=None):
    """Preconditioned conjugate gradients, column-wise for 2-D ``b``.

    Returns ``(x, report)``.  ``report.energy`` records the quadratic energy
    ``x.A x / 2 - b.x`` of the first column after each step; it is
    non-increasing for SPD ``A``.
    """
    t0 = time.perf_counter()
    b = np.asarray(b, dtype=float)
    vec = b.ndim == 1
    B = b[:, None] if vec else b
    n, k = B.shape
    maxiter = maxiter or max(10 * n, 100)
    X = np.zeros_like(B) if x0 is None else np.array(x0, dtype=float).reshape(n, k)
    P_ = precond if precond is not None else block_jacobi(A)
    bnorm = np.linalg.norm(B, axis=0)
    bnorm[bnorm == 0] = 1.0
    R = B - A @ X
    Z = P_ @ R
    P = Z.copy()
    rz = np.einsum("ij,ij->j", R, Z)
    hist = [float(np.max(np.linalg.norm(R, axis=0) / bnorm))]
    energy = [float(-0.5 * X[:, 0] @ (B[:, 0] + R[:, 0]))]
    active = np.linalg.norm(R, axis=0) / bnorm > tol
    it = 0
    while active.any() and it < maxiter:
        it += 1
        a_idx = np.flatnonzero(active)
        Pa = P[:, a_idx]
        AP = A @ Pa
        pAp = np.einsum("ij,ij->j", Pa, AP)
        if np.any(pAp <= 0):
            raise SolverError("matrix is not positive definite on the search direction", hist)
        alpha = rz[a_idx] / pAp
        X[:, a_idx] += Pa * alpha
        R[:, a_idx] -= AP * alpha
        Za = P_ @ R[:, a_idx]
        rz_new = np.einsum("ij,ij->j", R[:, a_idx], Za)
        beta = rz_new / rz[a_idx]
        P[:, a_idx] = Za + Pa * beta
        rz[a_idx] = rz_new
        res = np.linalg.norm(R, axis=0) / bnorm
        hist.append(float(res.max()))
        energy.append(float(-0.5 * X[:, 0] @ (B[:, 0] + R[:, 0])))
        active = res > tol
    if active.any():
        raise SolverError(f"PCG did not reach tol={tol} in {maxiter} iterations "
                          f"(residual {hist[-1]:.3e})", hist)
    rep = SolveReport(it, hist[-1], time.perf_counter() - t0, "pcg", hist, energy)
    return (X[:, 0] if vec else X), rep


class ReducedSystem:
    """Interior block of one operator with a reusable solve backend.

    ``method`` is ``"pcg"`` (block-Jacobi PCG) or ``"direct"`` (sparse LU,
    factorised once and reused for every right-hand side).
    """

    def __init__(self, op: DiscreteOperator, method: str = "direct"):
        if method not in ("pcg", "direct"):
            raise ValueError(f"unknown solve method {method!r}")
        self.op = op
        self.method = method
        self.A_II = op.A_II
        self.A_IB = op.A_IB
        self._lu = None
        self._prec = None

    def solve_interior(self, rhs: np.ndarray, tol: float):
        t0 = time.perf_counter()
        if self.method == "direct":
            if self._lu is None:
                self._lu = spla.splu(self.A_II.tocsc())
            x = self._lu.solve(np.asarray(rhs, dtype=float))
            r = rhs - self.A_II @ x
            den = np.linalg.norm(rhs, axis=0)
            den = np.where(den == 0, 1.0, den)
            res = float(np.max(np.linalg.norm(r, axis=0) / den))
            if not np.all(np.isfinite(x)):
                raise SolverError("direct factorisation produced non-finite values")
            return x, SolveReport(1, res, time.perf_counter() - t0, "direct", [res])
        if self._prec is None:
            self._prec = block_jacobi(self.A_II)
        return pcg(self.A_II, rhs, tol=tol, precond=self._prec)

    def solve(self, g: np.ndarray, load: np.ndarray | None, tol: float):
        """Full dof vector(s) with boundary values ``g`` and assembled load ``load``."""
        d = self.op.dofs
        g = np.asarray(g, dtype=float)
        k = g.shape[1:] if g.ndim > 1 else ()
        rhs = -(self.A_IB @ g)
        if load is not None:
            rhs = rhs + np.asarray(load, dtype=float)[d.interior]
        x, rep = self.solve_interior(rhs, tol)
        u = np.zeros((d.n_dofs, *k))
        u[d.interior] = x
        u[d.dirichlet] = g
        return u, rep


def solve_dirichlet(op: DiscreteOperator, omega: float | None = None, g=None, f=None,
                    tol: float = 1e-10, load=None, method: str = "pcg"):
    """Solve the Dirichlet problem ``a(u, v) = int f . v`` for interior ``v`` with ``u = g``.

    ``g`` holds values on ``op.dofs.dirichlet`` (defaults to zero).  ``f`` is
    a nodal source field, ``load`` an already assembled dual vector; both may
    be given.
    """
    if omega is not None and omega != op.omega:
        op = DiscreteOperator(op.mesh, op.params, float(omega), op.stiffness, op.mass, op.assembly)
    d = op.dofs
    g = np.zeros(len(d.dirichlet)) if g is None else np.asarray(g, dtype=float)
    if g.shape[0] != len(d.dirichlet):
        raise DimensionError(f"expected {len(d.dirichlet)} boundary values, got {g.shape[0]}")
    b = None
    if f is not None:
        f = np.asarray(f, dtype=float)
        if f.shape[0] != d.n_dofs:
            raise DimensionError(f"expected a nodal field with {d.n_dofs} entries, got {f.shape[0]}")
        b = op.assembly.mass_unit @ f
    if load is not None:
        b = np.asarray(load, dtype=float) if b is None else b + load
    return ReducedSystem(op, method).solve(g, b, tol)


def energy_constant(op: DiscreteOperator, u: np.ndarray, g_norm: float, f_norm: float) -> float:
    """Ratio ``|u|_H1 / (|g| + |f|)`` for the discrete energy estimate."""
    den = g_norm + f_norm
    return h1_norm(op.assembly, u) / den if den > 0 else 0.0


def smallest_dirichlet_eigenvalue(m: PartitionedMesh, t: IsotropicTensor, tol: float = 1e-8,
                                  maxiter: int = 500, seed: int = 0, block: int = 6,
                                  return_vector: bool = False):
    """Smallest eigenvalue of ``-div(C sym grad u) = lambda u`` with zero Dirichlet data.

    Block inverse power iteration on the pair (stiffness of ``t``, unit
    mass) restricted to interior dofs, with PCG inner solves and a
    Rayleigh-Ritz step per sweep.  The block makes the iteration robust to
    the near-degenerate lowest eigenvalues of symmetric domains.
    """
    n = m.n_regions
    l = ParamVector.from_parts([t.lam] * n, [t.mu] * n, [1.0] * n)
    op = assemble(m, l, 0.0)
    i = op.dofs.interior
    if len(i) == 0:
        raise DomainError("mesh has no interior vertices")
    A = op.A_II
    M = op.assembly.mass_unit[i][:, i].tocsr()
    k = min(block, len(i))
    prec = block_jacobi(A)
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((len(i), k))
    inner = max(tol * 1e-2, 1e-14)
    res = np.inf
    theta = None
    for it in range(1, maxiter + 1):
        x0 = X / theta if theta is not None else None
        Y, _ = pcg(A, M @ X, tol=inner, precond=prec, x0=x0)
        # Rayleigh-Ritz on span(Y)
        theta, C = sl.eigh(Y.T @ (A @ Y), Y.T @ (M @ Y))
        X = Y @ C
        X /= np.sqrt(np.einsum("ij,ij->j", X, M @ X))
        x = X[:, 0]
        Ax, Mx = A @ x, M @ x
        lam = float(x @ Ax)
        res = np.linalg.norm(Ax - lam * Mx) / (abs(lam) * np.linalg.norm(Mx))
        if res <= tol:
            log.debug("inverse iteration converged in %d sweeps, lambda=%.12g", it, lam)
            return (lam, x) if return_vector else lam
    raise SolverError(f"inverse iteration did not converge in {maxiter} sweeps (residual {res:.3e})")


def admissible_frequency_bound(prior: PriorData, lambda1_0: float) -> float:
    if not lambda1_0 > 0:
        raise SolverError(f"smallest Dirichlet eigenvalue must be positive, got {lambda1_0}")
    return math.sqrt(prior.gamma0 * lambda1_0 / 2.0)
