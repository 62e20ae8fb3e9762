"""Isotropic elasticity tensors, parameter vectors and the admissible sets.

A parameter vector stores the 3N piecewise-constant unknowns in the order
``(lambda_1..lambda_N, mu_1..mu_N, rho_1..rho_N)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Literal

import numpy as np

from .errors import ConfigurationError, DomainError


@dataclass(frozen=True)
class IsotropicTensor:
    lam: float
    mu: float

    def __post_init__(self):
        if not self.mu > 0:
            raise DomainError(f"shear modulus must be positive, got {self.mu}")

    def scaled(self, s: float) -> "IsotropicTensor":
        return IsotropicTensor(s * self.lam, s * self.mu)


def apply_tensor(t: IsotropicTensor, a) -> np.ndarray:
    """Return ``lam * tr(sym a) * I + 2 mu * sym a``."""
    a = np.asarray(a, dtype=float)
    if a.shape != (3, 3):
        raise ValueError(f"expected a 3x3 matrix, got shape {a.shape}")
    s = 0.5 * (a + a.T)
    return t.lam * np.trace(s) * np.eye(3) + 2.0 * t.mu * s


@dataclass(frozen=True)
class PriorData:
    """A-priori bounds on the coefficients and the geometry."""

    alpha0: float = 0.5
    beta0: float = 1.0
    gamma0: float = 0.5
    L_lip: float = 1.0
    A_vol: float = 1.0
    N: int = 1

    def __post_init__(self):
        errs = []
        if not 0 < self.alpha0 < 1:
            errs.append(f"alpha0 must lie in (0, 1), got {self.alpha0}")
        if not 0 < self.beta0 < 2:
            errs.append(f"beta0 must lie in (0, 2), got {self.beta0}")
        if not 0 < self.gamma0 < 1:
            errs.append(f"gamma0 must lie in (0, 1), got {self.gamma0}")
        if not self.L_lip >= 1:
            errs.append(f"L_lip must be >= 1, got {self.L_lip}")
        if not self.A_vol > 0:
            errs.append(f"A_vol must be positive, got {self.A_vol}")
        if int(self.N) != self.N or self.N < 1:
            errs.append(f"N must be a positive integer, got {self.N}")
        if errs:
            raise ConfigurationError("; ".join(errs))

    def with_n(self, n: int) -> "PriorData":
        return PriorData(self.alpha0, self.beta0, self.gamma0, self.L_lip, self.A_vol, n)


def reference_tensor(prior: PriorData) -> IsotropicTensor:
    """The lower reference tensor ``C0`` built from the prior bounds."""
    return IsotropicTensor((prior.beta0 - 3.0 * prior.alpha0) / 2.0, prior.alpha0)


class ParamVector:
    """Immutable vector of 3N subdomain parameters."""

    __slots__ = ("_v",)

    def __init__(self, entries: Iterable[float]):
        v = np.array(list(entries) if not isinstance(entries, np.ndarray) else entries,
                     dtype=float).ravel()
        if v.size == 0 or v.size % 3:
            raise ValueError(f"parameter vector length must be a positive multiple of 3, got {v.size}")
        v.setflags(write=False)
        self._v = v

    @classmethod
    def from_parts(cls, lam, mu, rho) -> "ParamVector":
        lam, mu, rho = (np.atleast_1d(np.asarray(x, dtype=float)) for x in (lam, mu, rho))
        if not (lam.size == mu.size == rho.size):
            raise ValueError("lam, mu and rho must have the same length")
        return cls(np.concatenate([lam, mu, rho]))

    @property
    def n(self) -> int:
        return self._v.size // 3

    @property
    def lam(self) -> np.ndarray:
        return self._v[: self.n]

    @property
    def mu(self) -> np.ndarray:
        return self._v[self.n: 2 * self.n]

    @property
    def rho(self) -> np.ndarray:
        return self._v[2 * self.n:]

    def as_array(self) -> np.ndarray:
        return self._v.copy()

    def tensor(self, j: int) -> IsotropicTensor:
        return IsotropicTensor(float(self.lam[j]), float(self.mu[j]))

    def sup_norm(self) -> float:
        return float(np.max(np.abs(self._v))) if self._v.size else 0.0

    def __array__(self, dtype=None, copy=None):
        return self._v.astype(dtype) if dtype is not None else self._v.copy()

    def __len__(self):
        return self._v.size

    def __iter__(self):
        return iter(self._v.tolist())

    def __eq__(self, other):
        if not isinstance(other, ParamVector):
            return NotImplemented
        return self._v.shape == other._v.shape and bool(np.array_equal(self._v, other._v))

    def __hash__(self):
        return hash(self._v.tobytes())

    def __add__(self, other):
        return ParamVector(self._v + np.asarray(other, dtype=float))

    def __sub__(self, other):
        return ParamVector(self._v - np.asarray(other, dtype=float))

    def __mul__(self, s):
        return ParamVector(self._v * float(s))

    __rmul__ = __mul__

    def __repr__(self):
        return f"ParamVector({self._v.tolist()!r})"


_K_SLACK = 1e-13


@dataclass(frozen=True)
class ConstraintSet:
    prior: PriorData
    kind: Literal["K", "A"] = "K"

    def __post_init__(self):
        if self.kind not in ("K", "A"):
            raise ConfigurationError(f"constraint kind must be 'K' or 'A', got {self.kind!r}")

    def violations(self, l: ParamVector) -> list[str]:
        p = self.prior
        a, b, g = p.alpha0, p.beta0, p.gamma0
        out = []
        for j in range(l.n):
            lam, mu, rho = l.lam[j], l.mu[j], l.rho[j]
            if self.kind == "K":
                # closed constraints, up to rounding of points projected onto a face
                e = _K_SLACK * (1 + abs(lam) + abs(mu))
                checks = [
                    (a - e <= mu <= 1 / a + e, f"mu_{j + 1}={mu} outside [{a}, {1 / a}]"),
                    (lam <= 1 / a + e, f"lambda_{j + 1}={lam} exceeds {1 / a}"),
                    (2 * mu + 3 * lam >= b - 5 * e, f"2mu+3lambda on D_{j + 1} below {b}"),
                    (0 <= rho <= 1 / g, f"rho_{j + 1}={rho} outside [0, {1 / g}]"),
                ]
            else:
                checks = [
                    (a / 2 < mu < 2 / a, f"mu_{j + 1}={mu} outside ({a / 2}, {2 / a})"),
                    (lam < 2 / a, f"lambda_{j + 1}={lam} not below {2 / a}"),
                    (2 * mu + 3 * lam > b / 2, f"2mu+3lambda on D_{j + 1} not above {b / 2}"),
                    (g / 2 < rho < 2 / g, f"rho_{j + 1}={rho} outside ({g / 2}, {2 / g})"),
                ]
            out.extend(msg for ok, msg in checks if not ok)
        return out

    def contains(self, l: ParamVector) -> bool:
        return not self.violations(l)


def _polygon_feasible(lam, mu, a, b, eps=0.0):
    return (mu >= a - eps) and (mu <= 1 / a + eps) and (lam <= 1 / a + eps) \
        and (2 * mu + 3 * lam >= b - eps)


def _project_lame(lam: float, mu: float, a: float, b: float) -> tuple[float, float]:
    # half-planes n . (lam, mu) <= c
    cons = [
        (np.array([0.0, -1.0]), -a),
        (np.array([0.0, 1.0]), 1 / a),
        (np.array([1.0, 0.0]), 1 / a),
        (np.array([-3.0, -2.0]), -b),
    ]
    x = np.array([lam, mu])
    if _polygon_feasible(lam, mu, a, b):
        return lam, mu
    eps = 1e-12 * (1 + abs(lam) + abs(mu) + 1 / a)
    cands = []
    for n, c in cons:
        y = x - (n @ x - c) / (n @ n) * n
        if _polygon_feasible(y[0], y[1], a, b, eps):
            cands.append(y)
    for i in range(len(cons)):
        for k in range(i + 1, len(cons)):
            m = np.array([cons[i][0], cons[k][0]])
            if abs(np.linalg.det(m)) < 1e-14:
                continue
            y = np.linalg.solve(m, [cons[i][1], cons[k][1]])
            if _polygon_feasible(y[0], y[1], a, b, eps):
                cands.append(y)
    best = min(cands, key=lambda y: float(np.sum((y - x) ** 2)))
    return float(best[0]), float(best[1])


def project_onto_K(l: ParamVector, k: ConstraintSet) -> ParamVector:
    """Euclidean projection of every subdomain triple onto the compact set K."""
    if k.kind != "K":
        raise ConfigurationError("projection is only defined onto the compact set K")
    a, b, g = k.prior.alpha0, k.prior.beta0, k.prior.gamma0
    # the polygon is nonempty iff the corner (1/a, 1/a) satisfies the bulk bound
    if a > 1 / a or 5.0 / a < b:
        raise ConfigurationError("prior data define an empty admissible set")
    lam, mu = l.lam.copy(), l.mu.copy()
    for j in range(l.n):
        lam[j], mu[j] = _project_lame(float(lam[j]), float(mu[j]), a, b)
    rho = np.clip(l.rho, 0.0, 1.0 / g)
    return ParamVector.from_parts(lam, mu, rho)


def K_bounding_box(prior: PriorData) -> tuple[np.ndarray, np.ndarray]:
    """Per-subdomain bounding box (lam, mu, rho) of K, used for rejection sampling."""
    a, b, g = prior.alpha0, prior.beta0, prior.gamma0
    lo = np.array([(b - 2 / a) / 3, a, 0.0])
    hi = np.array([1 / a, 1 / a, 1 / g])
    return lo, hi


def K_centroid(prior: PriorData, n: int) -> ParamVector:
    """Area centroid of the (lam, mu) polygon with the midpoint density, repeated n times."""
    a, b, g = prior.alpha0, prior.beta0, prior.gamma0
    # polygon vertices in counter-clockwise order
    mu_lo, mu_hi, lam_hi = a, 1 / a, 1 / a
    lam_min_lo = (b - 2 * mu_lo) / 3
    lam_min_hi = (b - 2 * mu_hi) / 3
    pts = [(lam_min_lo, mu_lo), (lam_hi, mu_lo), (lam_hi, mu_hi), (lam_min_hi, mu_hi)]
    pts = np.array(pts)
    x, y = pts[:, 0], pts[:, 1]
    xs, ys = np.roll(x, -1), np.roll(y, -1)
    cross = x * ys - xs * y
    area = cross.sum() / 2
    cx = ((x + xs) * cross).sum() / (6 * area)
    cy = ((y + ys) * cross).sum() / (6 * area)
    return ParamVector.from_parts([cx] * n, [cy] * n, [0.5 / g] * n)


def sample_K(prior: PriorData, n: int, rng: np.random.Generator) -> ParamVector:
    """Uniform sample of K by rejection over its bounding box."""
    lo, hi = K_bounding_box(prior)
    lam, mu, rho = np.empty(n), np.empty(n), np.empty(n)
    for j in range(n):
        while True:
            x = lo + (hi - lo) * rng.random(3)
            if _polygon_feasible(x[0], x[1], prior.alpha0, prior.beta0):
                lam[j], mu[j], rho[j] = x
                break
    return ParamVector.from_parts(lam, mu, rho)


def sigma(t: float, delta: float = 0.5) -> float:
    """Logarithmic continuity modulus, affine beyond ``1/e``."""
    if not 0 < delta < 1:
        raise DomainError(f"delta must lie in (0, 1), got {delta}")
    if not t > 0:
        raise DomainError(f"sigma is defined for t > 0, got {t}")
    if t < 1 / math.e:
        return abs(math.log(t)) ** (-1.0 / (8.0 * delta))
    return t - 1 / math.e + 1.0


def sigma1(t: float, delta: float = 0.5) -> float:
    return sigma(t, delta) ** 0.2


def sigma1_iterated(t: float, n: int, delta: float = 0.5) -> float:
    """``n``-fold composition of :func:`sigma1`."""
    for _ in range(n):
        t = sigma1(t, delta)
    return t
