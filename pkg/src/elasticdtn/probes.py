"""Empirical estimates of the stability and injectivity constants.

Each probe returns a :class:`ProbeReport` holding scalar results and a raw
sample table; the report serialises to JSON and to a flat CSV.
"""
from __future__ import annotations

import csv
import hashlib
import io
import itertools
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np
import scipy.optimize as so

from .deriv import jacobian_from_dtn
from .dtn import ForwardMap, star_norm
from .errors import DomainError, ResolutionError
from .fem import assemble, mesh_assembly
from .material import ParamVector, PriorData, sample_K, sigma1_iterated
from .mesh import PartitionedMesh
from .solver import ReducedSystem

log = logging.getLogger(__name__)


def _hash(*arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(np.asarray(a, dtype=float)).tobytes())
    return h.hexdigest()[:12]


@dataclass
class ProbeReport:
    name: str
    mesh_id: str
    omega: float
    samples: int
    seed: int
    results: dict[str, Any] = field(default_factory=dict)
    table: list[dict[str, Any]] = field(default_factory=list)

    def stats(self, column: str) -> dict[str, float]:
        vals = [r[column] for r in self.table if r.get(column) is not None
                and not (isinstance(r[column], float) and math.isnan(r[column]))]
        if not vals:
            return {}
        return {"min": float(min(vals)), "max": float(max(vals)), "mean": float(np.mean(vals))}

    def to_json(self) -> dict:
        cols = [c for c in (self.table[0] if self.table else {})
                if c not in ("sample_id", "inputs_hash") and isinstance(self.table[0][c], float)]
        return {
            "probe": self.name,
            "mesh_id": self.mesh_id,
            "omega": self.omega,
            "samples": self.samples,
            "seed": self.seed,
            "results": self.results,
            "summary": {c: self.stats(c) for c in cols},
            "table": self.table,
        }

    def to_csv(self) -> str:
        if not self.table:
            return ""
        buf = io.StringIO()
        cols = list(self.table[0])
        w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for row in self.table:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
        return buf.getvalue()


# -- Lipschitz stability -------------------------------------------------------

def _ordered_map(fn, items, threads: int):
    """``map`` over ``items``, concurrently when ``threads > 1``; results keep input order."""
    if threads <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, items))


def lipschitz_probe(m: PartitionedMesh, prior: PriorData, omega: float, samples: int = 50,
                    seed: int = 42, tol: float = 1e-12, forward: ForwardMap | None = None,
                    threads: int = 1) -> ProbeReport:
    """Ratios ``|l1 - l2|_inf / |F(l1) - F(l2)|_*`` over random pairs drawn uniformly in K."""
    prior = prior.with_n(m.n_regions)
    F = forward or ForwardMap(m, omega, tol, maxsize=4)
    rng = np.random.default_rng(seed)
    pairs = []
    while len(pairs) < samples:
        l1, l2 = sample_K(prior, m.n_regions, rng), sample_K(prior, m.n_regions, rng)
        if (l1 - l2).sup_norm() > 0:
            pairs.append((l1, l2))
    dtns = _ordered_map(lambda p: (F(p[0]), F(p[1])), pairs, threads)
    rows = []
    for s, ((l1, l2), (F1, F2)) in enumerate(zip(pairs, dtns)):
        dist = (l1 - l2).sup_norm()
        gap = star_norm(F1.entries - F2.entries, F1.metric)
        skipped = gap < 10 * tol * F1.star_norm()
        if skipped:
            log.warning("pair %d indistinguishable at solver precision (gap %.3e)", s, gap)
        rows.append({"sample_id": s, "inputs_hash": _hash(l1, l2), "distance": float(dist),
                     "gap": float(gap), "ratio": float("nan") if skipped else float(dist / gap),
                     "skipped": int(skipped)})
    ratios = [r["ratio"] for r in rows if not r["skipped"]]
    rep = ProbeReport("lipschitz", m.mesh_id, float(omega), samples, seed, table=rows)
    rep.results = {
        "C_emp": float(max(ratios)) if ratios else float("nan"),
        "all_finite": bool(all(math.isfinite(r) for r in ratios)),
        "skipped": int(sum(r["skipped"] for r in rows)),
    }
    return rep


# -- derivative lower bound ----------------------------------------------------

def _spectral(X: np.ndarray) -> tuple[float, np.ndarray]:
    w, V = np.linalg.eigh(X)
    k = int(np.argmax(np.abs(w)))
    return float(abs(w[k])), V[:, k] * np.sign(w[k])


def _face_minimum(Bw: np.ndarray, i: int) -> tuple[float, np.ndarray]:
    """Minimise ``|B_i + sum_{k != i} h_k B_k|`` over ``h_k`` in [-1, 1]."""
    others = [k for k in range(len(Bw)) if k != i]
    if not others:
        return _spectral(Bw[i])[0], np.ones(1)

    def fun(z):
        X = Bw[i] + np.tensordot(z, Bw[others], axes=1)
        val, v = _spectral(X)
        sign = np.sign(v @ X @ v) or 1.0
        grad = sign * np.einsum("a,kab,b->k", v, Bw[others], v)
        return val, grad

    # the objective is convex, so a single bounded quasi-Newton run from the face centre suffices
    best = so.minimize(fun, np.zeros(len(others)), jac=True, method="L-BFGS-B",
                       bounds=[(-1.0, 1.0)] * len(others), options={"maxiter": 200})
    h = np.empty(len(Bw))
    h[i] = 1.0
    h[others] = best.x
    return float(best.fun), h


def q0_at(J_whitened: np.ndarray, coords: Sequence[int]) -> dict[str, Any]:
    """Minimum of the whitened spectral norm of ``DF[h]`` over unit sup-norm ``h``.

    Combines exact vertex enumeration, convex minimisation on every face of
    the cube, and a singular-value lower bound.
    """
    Bw = J_whitened[list(coords)]
    n = len(Bw)
    vert = np.inf
    if n <= 12:
        for s in itertools.product((1.0, -1.0), repeat=n - 1):
            h = np.array((1.0,) + s)
            vert = min(vert, _spectral(np.tensordot(h, Bw, axes=1))[0])
    face, h_best = np.inf, None
    for i in range(n):
        val, h = _face_minimum(Bw, i)
        if val < face:
            face, h_best = val, h
    dim = Bw.shape[1]
    S = Bw.reshape(n, -1).T
    lower = float(np.linalg.svd(S, compute_uv=False)[-1]) / math.sqrt(dim)
    h_full = np.zeros(J_whitened.shape[0])
    h_full[list(coords)] = h_best
    return {"q0": float(min(vert, face)), "vertex_min": float(vert), "face_min": float(face),
            "lower_bound": lower, "argmin": h_full.tolist()}


def mode_coords(mode: str, n: int) -> list[int]:
    if mode == "FULL":
        return list(range(3 * n))
    if mode == "S1":
        return list(range(2 * n))
    if mode == "S2":
        return list(range(2 * n, 3 * n))
    raise ValueError(f"unknown mode {mode!r}")


def q0_probe(m: PartitionedMesh, prior: PriorData, omega: float, l_samples: int = 5,
             h_samples: int = 100, seed: int = 0, tol: float = 1e-12, mode: str = "FULL",
             forward: ForwardMap | None = None, threads: int = 1) -> ProbeReport:
    """Empirical ``q0 = min |DF(l)[h]|_*`` over sampled ``l`` in K and unit sup-norm ``h``.

    ``h_samples`` random unit directions per ``l`` are evaluated as an
    out-of-sample check that none falls below the minimum.
    """
    prior = prior.with_n(m.n_regions)
    F = forward or ForwardMap(m, omega, tol, maxsize=4)
    rng = np.random.default_rng(seed)
    coords = mode_coords(mode, m.n_regions)
    draws = []
    for _ in range(l_samples):
        l = sample_K(prior, m.n_regions, rng)
        H = rng.uniform(-1, 1, size=(h_samples, len(coords)))
        H[np.arange(h_samples), rng.integers(0, len(coords), h_samples)] = rng.choice([-1.0, 1.0], h_samples)
        draws.append((l, H))

    def evaluate(item):
        l, _ = item
        Bw = jacobian_from_dtn(F(l), m).whitened()
        return Bw, q0_at(Bw, coords)

    rows = []
    for s, ((l, H), (Bw, res)) in enumerate(zip(draws, _ordered_map(evaluate, draws, threads))):
        rand_min = min((_spectral(np.tensordot(h, Bw[coords], axes=1))[0] for h in H), default=np.inf)
        rows.append({"sample_id": s, "inputs_hash": _hash(l), "q0": res["q0"],
                     "vertex_min": res["vertex_min"], "face_min": res["face_min"],
                     "lower_bound": res["lower_bound"], "random_min": float(rand_min),
                     "block_scale": float(max(np.linalg.norm(B, 2) for B in Bw))})
    q0 = min(r["q0"] for r in rows)
    scale = max(r["block_scale"] for r in rows)
    degenerate = q0 <= 1e3 * max(tol, 1e-15) * scale
    rep = ProbeReport("q0", m.mesh_id, float(omega), l_samples, seed, table=rows)
    rep.results = {"q0_emp": float(q0), "mode": mode, "degenerate": bool(degenerate),
                   "passed": bool(q0 > 0 and not degenerate),
                   "lower_bound": float(min(r["lower_bound"] for r in rows))}
    if degenerate:
        log.warning("q0 is zero to solver precision at omega=%g: some direction is invisible", omega)
    return rep


# -- singular solutions --------------------------------------------------------

def point_load(m: PartitionedMesh, y, radius: float) -> np.ndarray:
    """Assembled loads ``(n_dofs, 3)`` of a unit force in each axis direction,
    spread uniformly over the elements whose centroid lies within ``radius`` of ``y``."""
    asm = mesh_assembly(m)
    dist = np.linalg.norm(m.centroids - np.asarray(y, dtype=float), axis=1)
    sel = dist <= radius
    if not np.any(sel):
        sel = dist == dist.min()
    vol = asm.volumes[sel]
    w = np.repeat(vol / (4 * vol.sum()), 4)
    load = np.zeros((3 * m.n_vertices, 3))
    for c in range(3):
        np.add.at(load[:, c], 3 * m.tets[sel].ravel() + c, w)
    return load


def element_h1_l2(m: PartitionedMesh, U: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-element squared gradient and squared L2 integrals summed over the columns of ``U``."""
    asm = mesh_assembly(m)
    Ut = U.reshape(m.n_vertices, 3, -1)[m.tets]
    grad = np.einsum("taid,tak->tikd", Ut, asm.grads)
    gsq = asm.volumes * (grad ** 2).sum(axis=(1, 2, 3))
    msq = asm.volumes * (np.einsum("taid,taid->t", Ut, Ut)
                         + np.einsum("tid,tid->t", Ut.sum(1), Ut.sum(1))) / 20.0
    return gsq, msq


def greens_blowup_probe(m_family: Sequence[PartitionedMesh], y, r_list, tol: float = 1e-8,
                        params: ParamVector | None = None, omega: float = 0.0,
                        load_scale: float = 1.0, smoothing: float | None = None) -> ProbeReport:
    """Exterior H1 norms of a regularised point-load solution around ``y``.

    Each mesh of the family is solved once with zero Dirichlet data; the
    log-log slope of ``|G|_{H1(Omega minus B_r(y))}`` against ``r`` is fitted on
    the finest mesh.  The load is smoothed over the elements within
    ``smoothing`` (default: the mesh's longest edge) of ``y``.
    """
    y = np.asarray(y, dtype=float)
    r_list = sorted(float(r) for r in r_list)
    meshes = sorted(m_family, key=lambda mm: mm.h_max, reverse=True)
    finest = meshes[-1]
    if r_list[0] < 0.75 * finest.h_max:
        raise ResolutionError(f"smallest radius {r_list[0]} is under-resolved; "
                              f"need h_max <= {r_list[0] / 0.75:.4g} (have {finest.h_max:.4g})")
    lo, hi = finest.vertices.min(axis=0), finest.vertices.max(axis=0)
    clearance = float(min((y - lo).min(), (hi - y).min()))
    if clearance <= r_list[-1]:
        raise DomainError(f"ball of radius {r_list[-1]} around y leaves the domain")
    rows, l2_norms = [], []
    slope = float("nan")
    for level, mm in enumerate(meshes):
        p = params or ParamVector.from_parts([1.0] * mm.n_regions, [1.0] * mm.n_regions,
                                             [1.0] * mm.n_regions)
        op = assemble(mm, p, omega)
        rad = smoothing if smoothing is not None else mm.h_max
        load = load_scale * point_load(mm, y, rad)
        U, rep = ReducedSystem(op, "pcg").solve(np.zeros((len(op.dofs.dirichlet), 3)), load, tol)
        gsq, msq = element_h1_l2(mm, U)
        dist = np.linalg.norm(mm.centroids - y, axis=1)
        l2 = float(np.sqrt(msq.sum()))
        l2_norms.append(l2)
        norms = []
        for r in r_list:
            out = dist > r
            h1 = float(np.sqrt(gsq[out].sum() + msq[out].sum()))
            norms.append(h1)
            rows.append({"sample_id": len(rows), "inputs_hash": mm.mesh_id[:12], "level": level,
                         "h_max": float(mm.h_max), "r": r, "h1_exterior": h1, "l2_total": l2,
                         "cg_iterations": rep.iterations})
        if mm is finest:
            slope = float(np.polyfit(np.log(r_list), np.log(norms), 1)[0])
    fin = [row for row in rows if row["level"] == len(meshes) - 1]
    l2_r = [row["l2_total"] for row in fin]
    report = ProbeReport("greens", finest.mesh_id, float(omega), len(r_list), 0, table=rows)
    report.results = {
        "exponent": slope,
        "l2_drift_r": float((max(l2_r) - min(l2_r)) / max(l2_r)),
        "l2_drift_refinement": float((max(l2_norms) - min(l2_norms)) / max(l2_norms)),
        "l2_norms": l2_norms,
        "boundary_clearance": clearance,
        "clearance_ok": bool(clearance >= 2 * r_list[-1]),
    }
    return report


# -- moduli --------------------------------------------------------------------

@dataclass
class ModulusTable:
    rows: list[dict[str, float]]
    c_star_fit: float
    c_linear: float

    def refit(self, min_gap: float) -> float:
        vals = [r["c_needed"] for r in self.rows if r["gap"] >= min_gap]
        return max(vals) if vals else float("nan")


def modulus_comparison(report: ProbeReport, delta: float = 0.5, c_star: float | None = None,
                       n: int = 1) -> ModulusTable:
    """Check ``distance <= C_* sigma1^n(gap)`` on the probe samples and fit the smallest ``C_*``."""
    rows = []
    for r in report.table:
        if r.get("skipped"):
            continue
        mod = sigma1_iterated(r["gap"], n, delta)
        need = r["distance"] / mod
        rows.append({"distance": r["distance"], "gap": r["gap"], "modulus": mod, "c_needed": need,
                     "passes": float(c_star is not None and r["distance"] <= c_star * mod)})
    c_fit = max((r["c_needed"] for r in rows), default=float("nan"))
    c_lin = max((r["distance"] / r["gap"] for r in rows), default=float("nan"))
    return ModulusTable(rows, c_fit, c_lin)
