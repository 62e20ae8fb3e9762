"""P1 vector finite elements for ``a(u, v) = int C sym(grad u) : sym(grad v) - omega^2 rho u . v``.

Degrees of freedom are vertex-major: component ``c`` of vertex ``v`` is
``3 * v + c``.  Because coefficients are constant on each subdomain the
global matrices are exact linear combinations of per-subdomain blocks,
which are computed once per mesh and cached.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from .errors import DimensionError, FrequencyRangeError
from .material import ParamVector, PriorData
from .mesh import PartitionedMesh


def p1_gradients(m: PartitionedMesh) -> tuple[np.ndarray, np.ndarray]:
    """Barycentric gradients ``(T, 4, 3)`` and unsigned volumes ``(T,)``."""
    x = m.vertices[m.tets]
    J = np.stack([x[:, 1] - x[:, 0], x[:, 2] - x[:, 0], x[:, 3] - x[:, 0]], axis=2)
    Jinv = np.linalg.inv(J)
    # rows of Jinv are the gradients of barycentric coords 1..3
    G = np.empty((len(x), 4, 3))
    G[:, 1:] = Jinv
    G[:, 0] = -Jinv.sum(axis=1)
    return G, np.abs(np.linalg.det(J)) / 6.0


def element_matrices(G: np.ndarray, vol: np.ndarray):
    """Element blocks ``(T, 12, 12)`` for the lambda-, mu-, mass- and gradient-forms."""
    T = len(vol)
    I3 = np.eye(3)
    GG = np.einsum("tak,tbk->tab", G, G)
    # div-div: G_a[i] G_b[j]
    Kl = np.einsum("tai,tbj->taibj", G, G)
    # 2 eps:eps -> delta_ij G_a.G_b + G_a[j] G_b[i]
    Kg = np.einsum("tab,ij->taibj", GG, I3)
    Km = Kg + np.einsum("taj,tbi->taibj", G, G)
    Mloc = (np.ones((4, 4)) + np.eye(4)) / 20.0
    Me = np.einsum("ab,ij->aibj", Mloc, I3)
    shape = (T, 12, 12)
    w = vol[:, None, None]
    return (Kl.reshape(shape) * w, Km.reshape(shape) * w,
            np.broadcast_to(Me.reshape(12, 12), shape) * w, Kg.reshape(shape) * w)


def _scatter(m: PartitionedMesh, local: np.ndarray, mask: np.ndarray) -> sp.csr_matrix:
    n = 3 * m.n_vertices
    dofs = (3 * m.tets[mask][:, :, None] + np.arange(3)).reshape(-1, 12)
    rows = np.repeat(dofs, 12, axis=1).ravel()
    cols = np.tile(dofs, (1, 12)).ravel()
    A = sp.coo_matrix((local[mask].ravel(), (rows, cols)), shape=(n, n)).tocsr()
    A.sum_duplicates()
    A.sort_indices()
    return A


@dataclass
class DofMap:
    n_dofs: int
    interior: np.ndarray
    dirichlet: np.ndarray
    sigma_trace: np.ndarray

    @classmethod
    def from_mesh(cls, m: PartitionedMesh) -> "DofMap":
        def expand(vs):
            return (3 * np.asarray(vs)[:, None] + np.arange(3)).ravel()

        bnd = m.boundary_vertices
        inner = np.setdiff1d(np.arange(m.n_vertices), bnd)
        return cls(3 * m.n_vertices, expand(inner), expand(bnd), expand(m.sigma_vertices))

    @cached_property
    def sigma_in_dirichlet(self) -> np.ndarray:
        """Positions of the sigma trace dofs inside the Dirichlet dof list."""
        return np.searchsorted(self.dirichlet, self.sigma_trace)


class MeshAssembly:
    """Parameter-independent data for one mesh: per-region blocks and dof sets."""

    def __init__(self, m: PartitionedMesh):
        self.mesh = m
        self.dofs = DofMap.from_mesh(m)
        G, vol = p1_gradients(m)
        self.grads, self.volumes = G, vol
        Kl, Km, Me, Kg = element_matrices(G, vol)
        n = m.n_regions
        self.K_lam = [_scatter(m, Kl, m.regions == j + 1) for j in range(n)]
        self.K_mu = [_scatter(m, Km, m.regions == j + 1) for j in range(n)]
        self.M = [_scatter(m, Me, m.regions == j + 1) for j in range(n)]
        all_ = np.ones(len(vol), dtype=bool)
        self.mass_unit = _scatter(m, Me, all_)
        self.laplace = _scatter(m, Kg, all_)

    @property
    def n_regions(self) -> int:
        return len(self.K_lam)

    @cached_property
    def h1(self) -> sp.csr_matrix:
        """Discrete H1 Gram matrix: vector Laplacian plus mass."""
        return (self.laplace + self.mass_unit).tocsr()

    def combine(self, lam, mu) -> sp.csr_matrix:
        K = None
        for j in range(self.n_regions):
            term = lam[j] * self.K_lam[j] + mu[j] * self.K_mu[j]
            K = term if K is None else K + term
        return K.tocsr()

    def mass(self, rho) -> sp.csr_matrix:
        M = None
        for j in range(self.n_regions):
            term = rho[j] * self.M[j]
            M = term if M is None else M + term
        return M.tocsr()


_ASSEMBLY_CACHE: dict[str, MeshAssembly] = {}


def mesh_assembly(m: PartitionedMesh) -> MeshAssembly:
    key = m.mesh_id
    if key not in _ASSEMBLY_CACHE:
        if len(_ASSEMBLY_CACHE) > 8:
            _ASSEMBLY_CACHE.pop(next(iter(_ASSEMBLY_CACHE)))
        _ASSEMBLY_CACHE[key] = MeshAssembly(m)
    return _ASSEMBLY_CACHE[key]


@dataclass(eq=False)
class DiscreteOperator:
    """Assembled stiffness and mass for one parameter vector.

    ``stiffness`` and ``mass`` act on all dofs; Dirichlet conditions are
    imposed later by elimination.
    """

    mesh: PartitionedMesh
    params: ParamVector
    omega: float
    stiffness: sp.csr_matrix
    mass: sp.csr_matrix
    assembly: MeshAssembly

    @property
    def dofs(self) -> DofMap:
        return self.assembly.dofs

    def system(self, omega: float | None = None) -> sp.csr_matrix:
        w = self.omega if omega is None else omega
        return (self.stiffness - w * w * self.mass).tocsr()

    @cached_property
    def A(self) -> sp.csr_matrix:
        return self.system()

    @cached_property
    def A_II(self) -> sp.csr_matrix:
        i = self.dofs.interior
        return self.A[i][:, i].tocsr()

    @cached_property
    def A_IB(self) -> sp.csr_matrix:
        return self.A[self.dofs.interior][:, self.dofs.dirichlet].tocsr()


def assemble(m: PartitionedMesh, l: ParamVector, omega: float = 0.0) -> DiscreteOperator:
    if omega < 0:
        raise FrequencyRangeError(f"omega must be nonnegative, got {omega}")
    asm = mesh_assembly(m)
    if l.n != asm.n_regions:
        raise DimensionError(f"parameter vector has N={l.n} but mesh has {asm.n_regions} subdomains")
    return DiscreteOperator(m, l, float(omega), asm.combine(l.lam, l.mu), asm.mass(l.rho), asm)


def apply_bilinear(op: DiscreteOperator, omega: float, u, v) -> float:
    u, v = np.asarray(u, dtype=float), np.asarray(v, dtype=float)
    n = op.stiffness.shape[0]
    if u.shape != (n,) or v.shape != (n,):
        raise DimensionError(f"expected vectors of length {n}, got {u.shape} and {v.shape}")
    return float(u @ (op.stiffness @ v) - omega * omega * (u @ (op.mass @ v)))


def element_strains(asm: MeshAssembly, u: np.ndarray) -> np.ndarray:
    """Symmetrised gradients ``(T, 3, 3)`` of one P1 field, or ``(T, 3, 3, k)`` for k fields."""
    U = u.reshape(asm.mesh.n_vertices, 3, *u.shape[1:])[asm.mesh.tets]
    # grad[t, i, k] = sum_a U[t, a, i] G[t, a, k]
    grad = np.einsum("tai...,tak->tik...", U, asm.grads)
    return 0.5 * (grad + np.swapaxes(grad, 1, 2))


def volume_pairing(asm: MeshAssembly, l: ParamVector, omega: float, u: np.ndarray,
                   v: np.ndarray) -> float:
    """Element-by-element quadrature of ``int C eps(u):eps(v) - omega^2 rho u.v``.

    Independent of the assembled matrices; used to cross-check them.
    """
    eu, ev = element_strains(asm, u), element_strains(asm, v)
    tr_u = np.trace(eu, axis1=1, axis2=2)
    tr_v = np.trace(ev, axis1=1, axis2=2)
    r = asm.mesh.regions - 1
    lam, mu, rho = l.lam[r], l.mu[r], l.rho[r]
    energy = lam * tr_u * tr_v + 2 * mu * np.einsum("tij,tij->t", eu, ev)
    # exact P1 mass on a tet: vol/20 * (sum_a u_a.v_a + sum_a u_a . sum_b v_b)
    Ut = u.reshape(-1, 3)[asm.mesh.tets]
    Vt = v.reshape(-1, 3)[asm.mesh.tets]
    uv = (np.einsum("tai,tai->t", Ut, Vt) + np.einsum("ti,ti->t", Ut.sum(1), Vt.sum(1))) / 20.0
    return float(np.sum(asm.volumes * (energy - omega * omega * rho * uv)))


def h1_norm(asm: MeshAssembly, u: np.ndarray) -> float:
    return float(np.sqrt(max(u @ (asm.h1 @ u), 0.0)))


def coercivity_check(op: DiscreteOperator, omega: float, prior: PriorData, lambda1_0: float,
                     samples: int = 100, seed: int = 0) -> float:
    """Minimum of ``a(u, u) / |u|_H1^2`` over random fields vanishing on the boundary."""
    if omega * omega > prior.gamma0 * lambda1_0 / 2 * (1 + 1e-12):
        raise FrequencyRangeError(
            f"omega^2={omega * omega} exceeds gamma0*lambda1_0/2={prior.gamma0 * lambda1_0 / 2}")
    return rayleigh_min(op, omega, samples, seed)


def rayleigh_min(op: DiscreteOperator, omega: float, samples: int = 100, seed: int = 0) -> float:
    """Like :func:`coercivity_check` but without the frequency gate."""
    rng = np.random.default_rng(seed)
    i = op.dofs.interior
    A = op.system(omega)[i][:, i]
    H = op.assembly.h1[i][:, i]
    best = np.inf
    for _ in range(samples):
        u = rng.standard_normal(len(i))
        best = min(best, float(u @ (A @ u)) / float(u @ (H @ u)))
    return best
