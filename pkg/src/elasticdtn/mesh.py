"""Tetrahedral meshes of a box partitioned into axis-aligned blocks.

The accessible boundary patch is stored as a set of marked boundary
triangles (marker ``SIGMA``); all other boundary triangles carry ``OTHER``.
"""
from __future__ import annotations

import hashlib
import itertools
import os
import tempfile
from collections import defaultdict, deque
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import GeometryError, MeshParseError, MeshValidationError
from .material import PriorData

SIGMA = 1
OTHER = 0

# Kuhn split of the unit cube: one tet per permutation of the axes, all
# sharing the main diagonal, so neighbouring cells stay conforming.
_CORNER = {(i, j, k): i + 2 * j + 4 * k for i in (0, 1) for j in (0, 1) for k in (0, 1)}


def _kuhn_template():
    tets = []
    for perm in itertools.permutations(range(3)):
        p = [0, 0, 0]
        verts = [_CORNER[tuple(p)]]
        for ax in perm:
            p[ax] = 1
            verts.append(_CORNER[tuple(p)])
        tets.append(verts)
    return np.array(tets)


_KUHN = _kuhn_template()

_FACES = {
    "left": (0, 0.0), "right": (0, 1.0),
    "front": (1, 0.0), "back": (1, 1.0),
    "bottom": (2, 0.0), "top": (2, 1.0),
}


@dataclass(frozen=True)
class Block:
    lo: tuple[float, float, float]
    hi: tuple[float, float, float]
    region: int

    def contains(self, p) -> bool:
        return all(self.lo[i] <= p[i] <= self.hi[i] for i in range(3))


@dataclass(frozen=True)
class SigmaSpec:
    """Selects boundary triangles on one face of the box.

    ``bounds`` optionally restricts to a rectangle ``(u0, u1, v0, v1)`` in the
    two remaining coordinates (in increasing axis order).
    """

    face: str = "top"
    bounds: tuple[float, float, float, float] | None = None

    def __post_init__(self):
        if self.face not in _FACES:
            raise GeometryError(f"unknown box face {self.face!r}; choose from {sorted(_FACES)}")


@dataclass(eq=False)
class PartitionedMesh:
    vertices: np.ndarray
    tets: np.ndarray
    regions: np.ndarray
    boundary_faces: np.ndarray
    markers: np.ndarray

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=float).reshape(-1, 3)
        self.tets = np.ascontiguousarray(self.tets, dtype=np.int64).reshape(-1, 4)
        self.regions = np.ascontiguousarray(self.regions, dtype=np.int64).ravel()
        self.boundary_faces = np.ascontiguousarray(self.boundary_faces, dtype=np.int64).reshape(-1, 3)
        self.markers = np.ascontiguousarray(self.markers, dtype=np.int64).ravel()
        for a in (self.vertices, self.tets, self.regions, self.boundary_faces, self.markers):
            a.setflags(write=False)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_regions(self) -> int:
        return int(self.regions.max()) if self.regions.size else 0

    @cached_property
    def mesh_id(self) -> str:
        h = hashlib.sha256()
        for a in (self.vertices, self.tets, self.regions, self.boundary_faces, self.markers):
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()[:16]

    @cached_property
    def signed_volumes(self) -> np.ndarray:
        x = self.vertices[self.tets]
        return np.einsum("ij,ij->i", x[:, 1] - x[:, 0],
                         np.cross(x[:, 2] - x[:, 0], x[:, 3] - x[:, 0])) / 6.0

    @cached_property
    def boundary_vertices(self) -> np.ndarray:
        return np.unique(self.boundary_faces)

    @cached_property
    def sigma_vertices(self) -> np.ndarray:
        return np.unique(self.boundary_faces[self.markers == SIGMA])

    @cached_property
    def sigma_faces(self) -> np.ndarray:
        return self.boundary_faces[self.markers == SIGMA]

    @cached_property
    def h_max(self) -> float:
        x = self.vertices[self.tets]
        edges = [x[:, i] - x[:, k] for i, k in itertools.combinations(range(4), 2)]
        return float(max(np.linalg.norm(e, axis=1).max() for e in edges))

    @cached_property
    def centroids(self) -> np.ndarray:
        return self.vertices[self.tets].mean(axis=1)

    def region_volumes(self) -> dict[int, float]:
        vol = np.abs(self.signed_volumes)
        return {j: float(vol[self.regions == j].sum()) for j in range(1, self.n_regions + 1)}

    def relabeled(self, perm: dict[int, int]) -> "PartitionedMesh":
        """Copy with region ids mapped through ``perm``."""
        regions = np.array([perm[int(r)] for r in self.regions])
        return PartitionedMesh(self.vertices, self.tets, regions, self.boundary_faces, self.markers)


def _tet_faces(tets: np.ndarray):
    """All faces of all tets as (tet, local vertex opposite) keyed by sorted triple."""
    faces = defaultdict(list)
    for t, tet in enumerate(tets.tolist()):
        for opp in range(4):
            tri = tuple(sorted(tet[:opp] + tet[opp + 1:]))
            faces[tri].append(t)
    return faces


def _all_faces(tets: np.ndarray):
    """Sorted vertex triples of every tet face plus the owning tet and opposite local vertex."""
    local = np.array([[1, 2, 3], [0, 2, 3], [0, 1, 3], [0, 1, 2]])
    tri = tets[:, local].reshape(-1, 3)
    owner = np.repeat(np.arange(len(tets)), 4)
    opp = np.tile(np.arange(4), len(tets))
    return np.sort(tri, axis=1), tri, owner, opp


def boundary_faces_of(tets: np.ndarray, vertices: np.ndarray) -> np.ndarray:
    """Outward-oriented boundary triangles, sorted lexicographically."""
    key, tri, owner, opp = _all_faces(tets)
    _, inv, counts = np.unique(key, axis=0, return_inverse=True, return_counts=True)
    once = counts[inv.ravel()] == 1
    tri, owner, opp = tri[once], owner[once], opp[once]
    a, b, c = (vertices[tri[:, i]] for i in range(3))
    d = vertices[tets[owner, opp]]
    nrm = np.cross(b - a, c - a)
    flip = np.einsum("ij,ij->i", nrm, d - a) > 0
    tri[flip, 1], tri[flip, 2] = tri[flip, 2].copy(), tri[flip, 1].copy()
    return tri[np.lexsort(tri.T[::-1])]


def build_block_mesh(nx: int, ny: int, nz: int, blocks: Sequence[Block] | None = None,
                     sigma_spec: SigmaSpec | str = "top") -> PartitionedMesh:
    """Structured 6-tet-per-cell mesh of the unit box.

    Every grid cell gets the region id of the block containing its centre.
    Block faces must fall on grid planes.
    """
    if min(nx, ny, nz) < 1:
        raise GeometryError("grid resolution must be positive in every direction")
    if isinstance(sigma_spec, str):
        sigma_spec = SigmaSpec(sigma_spec)
    if blocks is None:
        blocks = [Block((0.0, 0.0, 0.0), (1.0, 1.0, 1.0), 1)]
    ns = (nx, ny, nz)
    for b in blocks:
        for ax in range(3):
            for v in (b.lo[ax], b.hi[ax]):
                if not 0.0 <= v <= 1.0:
                    raise GeometryError(f"block {b.region} leaves the unit box")
                if abs(v * ns[ax] - round(v * ns[ax])) > 1e-9:
                    raise GeometryError(f"block {b.region} face at {v} is not on a grid plane")

    gx, gy, gz = (np.linspace(0.0, 1.0, n + 1) for n in ns)
    X, Y, Z = np.meshgrid(gx, gy, gz, indexing="ij")
    vertices = np.column_stack([X.ravel(), Y.ravel(), Z.ravel()])

    I, J, K = (a.ravel() for a in np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz),
                                                  indexing="ij"))
    centres = np.column_stack([(I + 0.5) / nx, (J + 0.5) / ny, (K + 0.5) / nz])
    cell_region = np.zeros(len(centres), dtype=np.int64)
    hits = np.zeros(len(centres), dtype=np.int64)
    for b in blocks:
        inside = np.all((centres >= np.array(b.lo)) & (centres <= np.array(b.hi)), axis=1)
        hits += inside
        cell_region[inside] = b.region
    if np.any(hits > 1):
        c = int(np.flatnonzero(hits > 1)[0])
        raise GeometryError(f"blocks overlap at cell {(int(I[c]), int(J[c]), int(K[c]))}")
    if np.any(hits == 0):
        c = int(np.flatnonzero(hits == 0)[0])
        raise GeometryError(f"blocks leave a gap at cell {(int(I[c]), int(J[c]), int(K[c]))}")

    def vid(i, j, k):
        return (i * (ny + 1) + j) * (nz + 1) + k

    corners = np.column_stack([vid(I + a, J + b_, K + c_)
                               for c_ in (0, 1) for b_ in (0, 1) for a in (0, 1)])
    tets = corners[:, _KUHN].reshape(-1, 4)
    regions = np.repeat(cell_region, len(_KUHN))

    # orient positively
    x = vertices[tets]
    vol = np.einsum("ij,ij->i", x[:, 1] - x[:, 0], np.cross(x[:, 2] - x[:, 0], x[:, 3] - x[:, 0]))
    neg = vol < 0
    tets[neg, 2], tets[neg, 3] = tets[neg, 3].copy(), tets[neg, 2].copy()

    bfaces = boundary_faces_of(tets, vertices)
    ax, val = _FACES[sigma_spec.face]
    others = [a for a in range(3) if a != ax]
    pts = vertices[bfaces]
    on_face = np.all(np.abs(pts[:, :, ax] - val) < 1e-12, axis=1)
    if sigma_spec.bounds is not None:
        u0, u1, v0, v1 = sigma_spec.bounds
        cen = pts.mean(axis=1)
        on_face &= (cen[:, others[0]] >= u0) & (cen[:, others[0]] <= u1)
        on_face &= (cen[:, others[1]] >= v0) & (cen[:, others[1]] <= v1)
    markers = np.where(on_face, SIGMA, OTHER).astype(np.int64)
    if not np.any(markers == SIGMA):
        raise GeometryError("sigma selector matches no boundary face")
    return PartitionedMesh(vertices, tets, regions, bfaces, markers)


def two_block_blocks(split: float = 0.5, axis: int = 2) -> list[Block]:
    """Two blocks split by a plane; region 1 is the upper block (touching ``top``)."""
    lo_hi = [0.0, 0.0, 0.0], [1.0, 1.0, 1.0]
    upper_lo, lower_hi = list(lo_hi[0]), list(lo_hi[1])
    upper_lo[axis] = split
    lower_hi[axis] = split
    return [Block(tuple(upper_lo), (1.0, 1.0, 1.0), 1), Block((0.0, 0.0, 0.0), tuple(lower_hi), 2)]


def checkerboard_blocks(k: int = 2) -> list[Block]:
    out = []
    for i, j, l in itertools.product(range(k), repeat=3):
        rid = len(out) + 1
        out.append(Block((i / k, j / k, l / k), ((i + 1) / k, (j + 1) / k, (l + 1) / k), rid))
    # region 1 touches the top face
    top = [b for b in out if b.hi[2] == 1.0][0]
    out.remove(top)
    out = [top] + out
    return [Block(b.lo, b.hi, r + 1) for r, b in enumerate(out)]


@dataclass
class MeshQuality:
    h_max: float
    shape_min: float
    volumes: dict[int, float]


@dataclass
class PartitionReport:
    quality: MeshQuality | None
    violations: list[str] = field(default_factory=list)
    chains: dict[int, list[int]] = field(default_factory=dict)
    interfaces: dict[tuple[int, int], int] = field(default_factory=dict)

    @property
    def valid(self) -> bool:
        return not self.violations


def _shape_ratios(m: PartitionedMesh) -> np.ndarray:
    x = m.vertices[m.tets]
    vol = np.abs(m.signed_volumes)
    area = 0.0
    for opp in range(4):
        idx = [i for i in range(4) if i != opp]
        a, b, c = x[:, idx[0]], x[:, idx[1]], x[:, idx[2]]
        area = area + 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)
    r_in = 3 * vol / area
    # circumcentre: solve 2 (x_i - x_0) . c = |x_i|^2 - |x_0|^2
    A = 2 * (x[:, 1:] - x[:, :1])
    rhs = (x[:, 1:] ** 2).sum(-1) - (x[:, :1] ** 2).sum(-1)
    cc = np.linalg.solve(A, rhs[..., None])[..., 0]
    r_circ = np.linalg.norm(cc - x[:, 0], axis=1)
    return r_in / r_circ


def _components(nodes, adjacency):
    seen, comps = set(), []
    for s in nodes:
        if s in seen:
            continue
        comp, q = [], deque([s])
        seen.add(s)
        while q:
            u = q.popleft()
            comp.append(u)
            for v in adjacency[u]:
                if v not in seen:
                    seen.add(v)
                    q.append(v)
        comps.append(comp)
    return comps


def validate_partition(m: PartitionedMesh, prior: PriorData | None = None) -> PartitionReport:
    """Check the partition invariants; violations are returned, never raised."""
    v: list[str] = []
    vol = m.signed_volumes
    if np.any(vol <= 0):
        v.append(f"{int(np.sum(vol <= 0))} tets with nonpositive signed volume")
    n = prior.N if prior is not None else m.n_regions
    if m.regions.min() < 1 or m.regions.max() > n:
        v.append(f"region ids outside 1..{n}")
    used = set(np.unique(m.regions).tolist())
    for j in range(1, n + 1):
        if j not in used:
            v.append(f"empty subdomain {j}")

    faces = _tet_faces(m.tets)
    true_boundary = {tri for tri, owners in faces.items() if len(owners) == 1}
    listed = {tuple(sorted(f)) for f in m.boundary_faces.tolist()}
    if listed != true_boundary:
        v.append("boundary face list does not match faces incident to exactly one tet")
    if not np.any(m.markers == SIGMA):
        v.append("empty sigma patch")

    # face adjacency within subdomains and across interfaces
    tet_adj = defaultdict(list)
    iface_faces = defaultdict(list)
    for tri, owners in faces.items():
        if len(owners) == 2:
            a, b = owners
            ra, rb = int(m.regions[a]), int(m.regions[b])
            if ra == rb:
                tet_adj[a].append(b)
                tet_adj[b].append(a)
            else:
                iface_faces[(min(ra, rb), max(ra, rb))].append(tri)
    for j in sorted(used):
        idx = np.flatnonzero(m.regions == j).tolist()
        if len(_components(idx, tet_adj)) != 1:
            v.append(f"subdomain {j} is not face-connected")

    # sigma connectivity through shared edges
    sig = m.sigma_faces.tolist()
    edge_map = defaultdict(list)
    for fi, f in enumerate(sig):
        for a, b in ((f[0], f[1]), (f[1], f[2]), (f[0], f[2])):
            edge_map[(min(a, b), max(a, b))].append(fi)
    sig_adj = defaultdict(list)
    for fl in edge_map.values():
        for a, b in itertools.combinations(fl, 2):
            sig_adj[a].append(b)
            sig_adj[b].append(a)
    if sig and len(_components(range(len(sig)), sig_adj)) != 1:
        v.append("sigma patch is not connected")

    # flat interface patches: group interface triangles by plane
    flat = {}
    for key, tris in iface_faces.items():
        planes = defaultdict(int)
        for tri in tris:
            a, b, c = (m.vertices[i] for i in tri)
            nrm = np.cross(b - a, c - a)
            nrm = nrm / np.linalg.norm(nrm)
            k = int(np.argmax(np.abs(nrm)))
            if nrm[k] < 0:
                nrm = -nrm
            planes[(tuple(np.round(nrm, 9)), round(float(nrm @ a), 9))] += 1
        best = max(planes.values())
        if best >= 1:
            flat[key] = best
    region_adj = defaultdict(list)
    for a, b in flat:
        region_adj[a].append(b)
        region_adj[b].append(a)

    sigma_tets = set()
    for f in m.sigma_faces.tolist():
        sigma_tets.update(faces[tuple(sorted(f))])
    sigma_regions = {int(m.regions[t]) for t in sigma_tets}
    chains = {}
    if 1 not in sigma_regions and sig:
        v.append("subdomain 1 does not touch sigma")
    elif 1 in used:
        prev = {1: None}
        q = deque([1])
        while q:
            u = q.popleft()
            for w in sorted(region_adj[u]):
                if w not in prev:
                    prev[w] = u
                    q.append(w)
        for j in sorted(used):
            if j not in prev:
                v.append(f"subdomain {j} is not reachable from subdomain 1 through flat interfaces")
                continue
            chain, u = [], j
            while u is not None:
                chain.append(u)
                u = prev[u]
            chains[j] = chain[::-1]

    quality = None
    if not np.any(vol <= 0):
        quality = MeshQuality(m.h_max, float(_shape_ratios(m).min()), m.region_volumes())
    return PartitionReport(quality, v, chains, dict(sorted(flat.items())))


def boundary_vector_area(m: PartitionedMesh) -> np.ndarray:
    x = m.vertices[m.boundary_faces]
    return 0.5 * np.cross(x[:, 1] - x[:, 0], x[:, 2] - x[:, 0]).sum(axis=0)


# -- file format -------------------------------------------------------------

def format_mesh(m: PartitionedMesh) -> str:
    lines = ["emesh 1", f"{m.n_vertices} {len(m.tets)} {len(m.boundary_faces)}"]
    lines += [" ".join(repr(float(c)) for c in xyz) for xyz in m.vertices.tolist()]
    lines += [" ".join(map(str, t)) + f" {r}" for t, r in zip(m.tets.tolist(), m.regions.tolist())]
    lines += [" ".join(map(str, f)) + f" {k}" for f, k in zip(m.boundary_faces.tolist(), m.markers.tolist())]
    return "\n".join(lines) + "\n"


def atomic_write(path, data: str | bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, mode, **({} if mode == "wb" else {"encoding": "utf-8", "newline": "\n"})) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_mesh(m: PartitionedMesh, path) -> None:
    atomic_write(path, format_mesh(m))


def parse_mesh(text: str) -> PartitionedMesh:
    """Parse the text mesh format; lines starting with ``#`` are comments."""
    raw = text.split("\n")
    if raw and raw[-1] == "":
        raw.pop()
    lines = [(k + 1, ln) for k, ln in enumerate(raw) if not ln.lstrip().startswith("#")]

    def line_no(i):
        return lines[i][0] if i < len(lines) else len(raw) + 1

    def get(i):
        if i >= len(lines):
            raise MeshParseError("unexpected end of file", line_no(i))
        return lines[i][1].split()

    if get(0) != ["emesh", "1"]:
        raise MeshParseError("expected header 'emesh 1'", line_no(0))
    head = get(1)
    try:
        V, T, F = (int(x) for x in head)
    except ValueError:
        raise MeshParseError("expected 'V T F' counts", line_no(1)) from None
    if len(head) != 3 or min(V, T, F) < 0:
        raise MeshParseError("expected three nonnegative counts", line_no(1))

    verts = np.empty((V, 3))
    for i in range(V):
        tok = get(2 + i)
        try:
            if len(tok) != 3:
                raise ValueError
            verts[i] = [float(t) for t in tok]
        except ValueError:
            raise MeshParseError("expected 'x y z'", line_no(2 + i)) from None
    tets = np.empty((T, 4), dtype=np.int64)
    regions = np.empty(T, dtype=np.int64)
    base = 2 + V
    for i in range(T):
        tok = get(base + i)
        try:
            if len(tok) != 5:
                raise ValueError
            vals = [int(t) for t in tok]
        except ValueError:
            raise MeshParseError("expected 'v0 v1 v2 v3 region'", line_no(base + i)) from None
        if any(not 0 <= x < V for x in vals[:4]):
            raise MeshParseError(f"vertex index out of range 0..{V - 1}", line_no(base + i))
        if vals[4] < 1:
            raise MeshParseError("region ids start at 1", line_no(base + i))
        tets[i], regions[i] = vals[:4], vals[4]
    faces = np.empty((F, 3), dtype=np.int64)
    markers = np.empty(F, dtype=np.int64)
    base += T
    for i in range(F):
        tok = get(base + i)
        try:
            if len(tok) != 4:
                raise ValueError
            vals = [int(t) for t in tok]
        except ValueError:
            raise MeshParseError("expected 'v0 v1 v2 marker'", line_no(base + i)) from None
        if any(not 0 <= x < V for x in vals[:3]):
            raise MeshParseError(f"vertex index out of range 0..{V - 1}", line_no(base + i))
        if vals[3] not in (SIGMA, OTHER):
            raise MeshParseError("marker must be 0 or 1", line_no(base + i))
        faces[i], markers[i] = vals[:3], vals[3]
    if len(lines) > base + F:
        raise MeshParseError("trailing content", line_no(base + F))
    m = PartitionedMesh(verts, tets, regions, faces, markers)
    bad = np.flatnonzero(m.signed_volumes <= 0)
    if bad.size:
        raise MeshValidationError(f"tet {int(bad[0])} has nonpositive signed volume")
    return m


def load_mesh(path) -> PartitionedMesh:
    return parse_mesh(Path(path).read_text(encoding="utf-8"))
