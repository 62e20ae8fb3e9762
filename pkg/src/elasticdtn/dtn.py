"""Local Dirichlet-to-Neumann operator on the accessible patch and its norms.

Trace dofs are the three displacement components at every vertex of a
``SIGMA`` boundary triangle, in vertex-major order.  Each column of the
operator comes from one Dirichlet solve with a single trace dof set to one
and every other boundary dof set to zero.
"""
from __future__ import annotations

import hashlib
import json
import threading
from collections import OrderedDict
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.linalg as sl

from .errors import DimensionError, GeometryError
from .fem import DiscreteOperator, MeshAssembly, assemble, mesh_assembly, volume_pairing
from .material import ParamVector
from .mesh import PartitionedMesh
from .solver import ReducedSystem


def _surface_p1(vertices: np.ndarray, faces: np.ndarray, vids: np.ndarray):
    """Scalar P1 mass and Laplace-Beltrami stiffness on a triangle set, indexed by ``vids``."""
    pos = np.searchsorted(vids, faces)
    n = len(vids)
    M = np.zeros((n, n))
    S = np.zeros((n, n))
    x = vertices[faces]
    for t in range(len(faces)):
        a, b, c = x[t]
        e = np.array([c - b, a - c, b - a])  # edge opposite each vertex
        nrm = np.cross(b - a, c - a)
        area = 0.5 * np.linalg.norm(nrm)
        Sl = (e @ e.T) / (4 * area)
        Ml = area / 12 * (np.ones((3, 3)) + np.eye(3))
        idx = pos[t]
        M[np.ix_(idx, idx)] += Ml
        S[np.ix_(idx, idx)] += Sl
    return M, S


def _sym_power(A: np.ndarray, p: float) -> np.ndarray:
    w, V = np.linalg.eigh(0.5 * (A + A.T))
    return (V * w ** p) @ V.T


@dataclass(eq=False)
class BoundaryMetric:
    """Discrete H^{1/2} and H^{-1/2} structure on the trace space.

    ``N_half`` is the spectral interpolant halfway between the boundary
    mass ``M_b`` and the boundary H1 matrix ``M_b + S_b``.
    """

    M_b: np.ndarray
    S_b: np.ndarray
    N_half: np.ndarray

    @classmethod
    def from_mass_stiffness(cls, M_b, S_b) -> "BoundaryMetric":
        Mh = _sym_power(M_b, 0.5)
        Mih = _sym_power(M_b, -0.5)
        N = Mh @ _sym_power(Mih @ (M_b + S_b) @ Mih, 0.5) @ Mh
        return cls(M_b, S_b, 0.5 * (N + N.T))

    @property
    def dim(self) -> int:
        return self.N_half.shape[0]

    @cached_property
    def whitener(self) -> np.ndarray:
        """``N_half^{-1/2}``."""
        return _sym_power(self.N_half, -0.5)

    @cached_property
    def dual(self) -> np.ndarray:
        return np.linalg.inv(self.N_half)

    def norm(self, psi) -> float:
        psi = np.asarray(psi, dtype=float)
        return float(np.sqrt(psi @ self.N_half @ psi))

    def whiten(self, d: np.ndarray) -> np.ndarray:
        W = self.whitener
        return W @ d @ W


def boundary_metric(m: PartitionedMesh, faces: np.ndarray | None = None) -> BoundaryMetric:
    """Metric on the sigma trace space (or on the vertices of ``faces`` if given)."""
    faces = m.sigma_faces if faces is None else np.asarray(faces)
    if len(faces) == 0:
        raise GeometryError("sigma patch is empty")
    vids = np.unique(faces)
    Ms, Ss = _surface_p1(m.vertices, faces, vids)
    I3 = np.eye(3)
    return BoundaryMetric.from_mass_stiffness(np.kron(Ms, I3), np.kron(Ss, I3))


_METRIC_CACHE: dict[str, BoundaryMetric] = {}


def sigma_metric(m: PartitionedMesh) -> BoundaryMetric:
    if m.mesh_id not in _METRIC_CACHE:
        _METRIC_CACHE[m.mesh_id] = boundary_metric(m)
    return _METRIC_CACHE[m.mesh_id]


@dataclass(eq=False)
class DtnOperator:
    entries: np.ndarray
    metric: BoundaryMetric
    mesh_id: str
    params: ParamVector
    omega: float
    asymmetry: float = 0.0
    # full-dof Dirichlet solutions, one column per trace dof
    solutions: np.ndarray | None = field(default=None, repr=False)
    sigma_dofs: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.entries.setflags(write=False)
        if self.solutions is not None:
            self.solutions.setflags(write=False)

    @property
    def dim(self) -> int:
        return self.entries.shape[0]

    def star_norm(self) -> float:
        return star_norm(self.entries, self.metric)

    def pair(self, psi, phi) -> float:
        """``<Lambda psi, phi>``."""
        return float(np.asarray(phi) @ self.entries @ np.asarray(psi))

    def to_json(self) -> dict:
        return {
            "dim": int(self.dim),
            "sigma_dofs": [int(i) for i in self.sigma_dofs] if self.sigma_dofs is not None else [],
            "lambda": [float(x) for x in self.entries.ravel()],
            "omega": float(self.omega),
            "params": [float(x) for x in self.params],
        }


def trace_injection(asm: MeshAssembly) -> np.ndarray:
    """Boundary data matrix mapping trace coefficients to Dirichlet dof values."""
    d = asm.dofs
    G = np.zeros((len(d.dirichlet), len(d.sigma_trace)))
    G[d.sigma_in_dirichlet, np.arange(len(d.sigma_trace))] = 1.0
    return G


def assemble_dtn(m: PartitionedMesh, l: ParamVector, omega: float = 0.0, tol: float = 1e-12,
                 method: str = "direct", op: DiscreteOperator | None = None) -> DtnOperator:
    """Dense DtN matrix ``Lambda[i, j] = a(u_j, E psi_i)``.

    ``E psi_i`` is the zero extension of the trace basis function; Galerkin
    orthogonality makes the value independent of that choice.
    """
    op = op or assemble(m, l, omega)
    asm = op.assembly
    d = asm.dofs
    if len(d.sigma_trace) == 0:
        raise GeometryError("sigma patch is empty")
    U, _ = ReducedSystem(op, method).solve(trace_injection(asm), None, tol)
    raw = np.asarray(op.A[d.sigma_trace] @ U)
    nrm = np.linalg.norm(raw)
    asym = float(np.linalg.norm(raw - raw.T) / nrm) if nrm > 0 else 0.0
    lam = 0.5 * (raw + raw.T)
    return DtnOperator(lam, sigma_metric(m), m.mesh_id, l, float(omega), asym, U, d.sigma_trace.copy())


def star_norm(d: np.ndarray, metric: BoundaryMetric) -> float:
    """Operator norm from the discrete H^{1/2} to its dual."""
    d = np.asarray(d, dtype=float)
    if d.shape != (metric.dim, metric.dim):
        raise DimensionError(f"expected a {metric.dim}x{metric.dim} matrix, got {d.shape}")
    if not np.any(d):
        return 0.0
    return float(sl.svdvals(metric.whiten(d))[0])


class ForwardMap:
    """``l -> Lambda_l`` on a fixed mesh, memoised by content hash."""

    def __init__(self, m: PartitionedMesh, omega: float, tol: float = 1e-12,
                 method: str = "direct", maxsize: int = 64):
        self.mesh = m
        self.omega = float(omega)
        self.tol = tol
        self.method = method
        self.maxsize = maxsize
        self._cache: OrderedDict[str, DtnOperator] = OrderedDict()
        self._lock = threading.Lock()

    def key(self, l: ParamVector) -> str:
        h = hashlib.sha256()
        h.update(self.mesh.mesh_id.encode())
        h.update(np.asarray(l, dtype=float).tobytes())
        h.update(np.float64(self.omega).tobytes())
        h.update(np.float64(self.tol).tobytes())
        return h.hexdigest()

    def __call__(self, l: ParamVector) -> DtnOperator:
        k = self.key(l)
        with self._lock:
            if k in self._cache:
                self._cache.move_to_end(k)
                return self._cache[k]
        out = assemble_dtn(self.mesh, l, self.omega, self.tol, self.method)
        with self._lock:
            self._cache[k] = out
            if len(self._cache) > self.maxsize:
                self._cache.popitem(last=False)
        return out

    @property
    def metric(self) -> BoundaryMetric:
        return sigma_metric(self.mesh)


_FORWARD_MAPS: dict[tuple, ForwardMap] = {}


def forward_map(m: PartitionedMesh, l: ParamVector, omega: float = 0.0,
                tol: float = 1e-12) -> DtnOperator:
    key = (m.mesh_id, float(omega), float(tol))
    if key not in _FORWARD_MAPS:
        _FORWARD_MAPS[key] = ForwardMap(m, omega, tol)
    return _FORWARD_MAPS[key](l)


def alessandrini_gap(m: PartitionedMesh, l1: ParamVector, l2: ParamVector, omega: float,
                     psi, phi, tol: float = 1e-12, method: str = "direct"):
    """Compare the volume and boundary sides of the Alessandrini identity.

    Returns ``(lhs, rhs, gap)`` where ``lhs`` integrates the coefficient
    difference against the two Dirichlet solutions element by element and
    ``rhs = phi . (Lambda_1 - Lambda_2) psi``.
    """
    asm = mesh_assembly(m)
    psi, phi = np.asarray(psi, dtype=float), np.asarray(phi, dtype=float)
    G = trace_injection(asm)
    op1, op2 = assemble(m, l1, omega), assemble(m, l2, omega)
    u1, _ = ReducedSystem(op1, method).solve(G @ psi, None, tol)
    u2, _ = ReducedSystem(op2, method).solve(G @ phi, None, tol)
    diff = ParamVector(np.asarray(l1) - np.asarray(l2))
    lhs = volume_pairing(asm, diff, omega, u1, u2)
    L1 = assemble_dtn(m, l1, omega, tol, method, op1)
    L2 = assemble_dtn(m, l2, omega, tol, method, op2)
    rhs = float(phi @ (L1.entries - L2.entries) @ psi)
    return lhs, rhs, abs(lhs - rhs)


def dtn_json(d: DtnOperator) -> str:
    return json.dumps(d.to_json(), sort_keys=True)
