"""Frechet derivative of the parameter-to-DtN map.

The bilinear form is symmetric, so the solutions used to build the DtN
matrix double as the adjoint states: each Jacobian block is
``U^T B_k U`` for the per-subdomain block ``B_k`` of the assembled form.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .dtn import BoundaryMetric, DtnOperator, ForwardMap, assemble_dtn, star_norm, trace_injection
from .errors import DimensionError, DomainError
from .fem import mesh_assembly, volume_pairing
from .material import ConstraintSet, ParamVector, PriorData
from .mesh import PartitionedMesh
from .solver import ReducedSystem
from .fem import assemble


@dataclass(eq=False)
class DfJacobian:
    blocks: np.ndarray  # (3N, n_sigma, n_sigma)
    mesh_id: str
    params: ParamVector
    omega: float
    metric: BoundaryMetric = field(repr=False)

    def apply(self, h) -> np.ndarray:
        h = np.asarray(h, dtype=float)
        if h.shape != (len(self.blocks),):
            raise DimensionError(f"expected {len(self.blocks)} directions, got {h.shape}")
        return np.tensordot(h, self.blocks, axes=1)

    def whitened(self) -> np.ndarray:
        W = self.metric.whitener
        return W @ self.blocks @ W


def jacobian_from_dtn(d: DtnOperator, m: PartitionedMesh) -> DfJacobian:
    asm = mesh_assembly(m)
    U = d.solutions
    w2 = d.omega ** 2
    blocks = []
    for fam in (asm.K_lam, asm.K_mu):
        blocks += [U.T @ (K @ U) for K in fam]
    blocks += [-w2 * (U.T @ (M @ U)) for M in asm.M]
    B = np.array(blocks)
    B = 0.5 * (B + np.swapaxes(B, 1, 2))
    return DfJacobian(B, m.mesh_id, d.params, d.omega, d.metric)


def df_jacobian(m: PartitionedMesh, l: ParamVector, omega: float, tol: float = 1e-12,
                dtn: DtnOperator | None = None) -> DfJacobian:
    d = dtn if dtn is not None else assemble_dtn(m, l, omega, tol)
    return jacobian_from_dtn(d, m)


def df_apply(m: PartitionedMesh, l: ParamVector, h, omega: float, psi, phi,
             tol: float = 1e-12, method: str = "direct") -> float:
    """``<DF(l)[h] psi, phi>`` by volume quadrature of two fresh Dirichlet solves."""
    asm = mesh_assembly(m)
    h = ParamVector(np.asarray(h, dtype=float))
    if h.n != l.n:
        raise DimensionError("direction and parameter vector differ in length")
    G = trace_injection(asm)
    rs = ReducedSystem(assemble(m, l, omega), method)
    sol, _ = rs.solve(np.column_stack([G @ np.asarray(psi, float), G @ np.asarray(phi, float)]),
                      None, tol)
    return volume_pairing(asm, h, omega, sol[:, 0], sol[:, 1])


@dataclass
class TaylorResult:
    slope: float
    t: list[float]
    remainders: list[float]
    exact: bool = False


def taylor_order(m: PartitionedMesh, l: ParamVector, h, omega: float, t_list, prior: PriorData,
                 tol: float = 1e-12) -> TaylorResult:
    """Fit the log-log slope of ``|F(l + t h) - F(l) - t DF(l)[h]|_*`` against ``t``."""
    h = np.asarray(h, dtype=float)
    A = ConstraintSet(prior, "A")
    pts = [l] + [l + t * h for t in t_list]
    for p in pts:
        bad = A.violations(p)
        if bad:
            raise DomainError(f"iterate leaves the open admissible set: {bad[0]}")
    F = ForwardMap(m, omega, tol)
    F0 = F(l)
    J = jacobian_from_dtn(F0, m)
    lin = J.apply(h)
    rem = [star_norm(F(l + t * h).entries - F0.entries - t * lin, F0.metric) for t in t_list]
    scale = F0.star_norm()
    if max(rem) <= 100 * max(tol, 1e-14) * scale:
        return TaylorResult(float("nan"), list(map(float, t_list)), rem, exact=True)
    slope = float(np.polyfit(np.log(t_list), np.log(rem), 1)[0])
    return TaylorResult(slope, list(map(float, t_list)), rem)


def _cube_vertices(n: int, limit: int, rng: np.random.Generator) -> np.ndarray:
    """Vertices of the unit sup-norm cube modulo sign, all of them when few enough."""
    if 2 ** (n - 1) <= limit:
        rows = [(1.0,) + s for s in itertools.product((1.0, -1.0), repeat=n - 1)]
        return np.array(rows)
    V = rng.choice([-1.0, 1.0], size=(limit, n))
    V[:, 0] = 1.0
    return V


def df_lipschitz_probe(m: PartitionedMesh, l1: ParamVector, l2: ParamVector, omega: float,
                       samples: int = 64, tol: float = 1e-12, seed: int = 0) -> float:
    """Ratio ``max_h |(DF(l1) - DF(l2))[h]|_* / |l1 - l2|_inf`` over unit sup-norm ``h``.

    The norm is convex in ``h`` so the maximum over the cube sits at a
    vertex; vertices are enumerated when ``2^(3N-1) <= samples``.
    """
    dist = (l1 - l2).sup_norm()
    if dist == 0:
        raise DomainError("the two parameter vectors coincide")
    J1, J2 = df_jacobian(m, l1, omega, tol), df_jacobian(m, l2, omega, tol)
    D = J1.blocks - J2.blocks
    rng = np.random.default_rng(seed)
    best = 0.0
    for h in _cube_vertices(len(D), samples, rng):
        best = max(best, star_norm(np.tensordot(h, D, axes=1), J1.metric))
    return best / dist


def misfit(d: DtnOperator, data: np.ndarray) -> float:
    R = d.metric.whiten(d.entries - data)
    return 0.5 * float(np.sum(R * R))


def misfit_and_gradient(d: DtnOperator, J: DfJacobian, data: np.ndarray):
    """Whitened Frobenius misfit ``|W (F - D) W|^2 / 2`` and its gradient in all 3N coordinates."""
    R = d.metric.whiten(d.entries - data)
    Bw = J.whitened()
    return 0.5 * float(np.sum(R * R)), np.einsum("ij,kij->k", R, Bw)
