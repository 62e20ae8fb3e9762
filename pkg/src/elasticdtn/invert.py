"""Projected iterative reconstruction of subdomain parameters from DtN data.

Three step rules share one loop: ``fixed`` is the classical nonlinear
Landweber step, ``backtracking`` is projected steepest descent with an
Armijo line search, and ``gauss_newton`` scales the gradient by the damped
Jacobian outer product before the same projected line search.  Every
iterate is projected onto K.
"""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from .deriv import jacobian_from_dtn, misfit, misfit_and_gradient
from .dtn import DtnOperator, ForwardMap, star_norm
from .errors import ConfigurationError, DomainError, StagnationError
from .material import ConstraintSet, K_centroid, ParamVector, PriorData, project_onto_K
from .mesh import PartitionedMesh

log = logging.getLogger(__name__)

Mode = Literal["FULL", "S1", "S2"]


@dataclass
class InversionConfig:
    mode: Mode = "FULL"
    step_rule: Literal["fixed", "backtracking", "gauss_newton"] = "gauss_newton"
    max_iter: int = 500
    tau_disc: float = 1.5
    noise_level: float = 0.0
    l0: ParamVector | None = None
    step: float | None = None
    armijo: float = 1e-4
    damping: float = 1e-10
    max_backtracks: int = 40
    min_omega_fraction: float = 0.5
    grad_tol: float = 0.0

    def validate(self, prior: PriorData) -> None:
        errs = []
        if self.mode not in ("FULL", "S1", "S2"):
            errs.append(f"mode must be FULL, S1 or S2, got {self.mode!r}")
        if self.step_rule not in ("fixed", "backtracking", "gauss_newton"):
            errs.append(f"unknown step rule {self.step_rule!r}")
        if not self.tau_disc > 1:
            errs.append(f"tau_disc must exceed 1, got {self.tau_disc}")
        if self.noise_level < 0:
            errs.append("noise_level must be nonnegative")
        if self.max_iter < 0:
            errs.append("max_iter must be nonnegative")
        if self.l0 is not None:
            bad = ConstraintSet(prior, "K").violations(self.l0)
            if bad:
                errs.append(f"initial guess is not in K: {bad[0]}")
        if errs:
            raise ConfigurationError("; ".join(errs))


@dataclass
class IterationRecord:
    iteration: int
    params: list[float]
    misfit: float
    residual_star: float
    grad_norm: float
    step: float
    projected: bool


@dataclass
class InversionTrace:
    records: list[IterationRecord] = field(default_factory=list)
    stop_reason: str = ""

    def __len__(self):
        return len(self.records)

    @property
    def misfits(self) -> list[float]:
        return [r.misfit for r in self.records]

    def to_csv(self) -> str:
        buf = io.StringIO()
        if not self.records:
            return ""
        n = len(self.records[0].params)
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iteration", "misfit", "residual_star", "grad_norm", "step", "projected"]
                   + [f"p{k}" for k in range(n)])
        for r in self.records:
            w.writerow([r.iteration, repr(r.misfit), repr(r.residual_star), repr(r.grad_norm),
                        repr(r.step), int(r.projected)] + [repr(x) for x in r.params])
        return buf.getvalue()


def active_mask(mode: str, n: int) -> np.ndarray:
    mask = np.zeros(3 * n, dtype=bool)
    if mode in ("FULL", "S1"):
        mask[: 2 * n] = True
    if mode in ("FULL", "S2"):
        mask[2 * n:] = True
    return mask


def _frozen_project(x: np.ndarray, base: np.ndarray, mask: np.ndarray, K: ConstraintSet) -> np.ndarray:
    y = np.where(mask, x, base)
    p = np.asarray(project_onto_K(ParamVector(y), K))
    # coordinates outside the mode stay exactly as given
    return np.where(mask, p, base)


def landweber(m: PartitionedMesh, data: DtnOperator | np.ndarray, cfg: InversionConfig,
              omega: float, prior: PriorData, tol: float = 1e-12,
              omega_max: float | None = None, forward: ForwardMap | None = None):
    """Projected iterative inversion; returns ``(l_hat, trace)``."""
    prior = prior.with_n(m.n_regions)
    cfg.validate(prior)
    if cfg.mode == "S2" and omega == 0:
        raise DomainError("density is not identifiable from the static map; S2 needs omega > 0")
    if omega_max is not None and cfg.mode in ("FULL", "S2") \
            and omega < cfg.min_omega_fraction * omega_max:
        raise DomainError(f"omega={omega:.4g} is below {cfg.min_omega_fraction} * omega_max "
                          f"({omega_max:.4g}); density sensitivity is too weak")
    if omega_max is not None and omega > omega_max * (1 + 1e-12):
        raise DomainError(f"omega={omega:.4g} exceeds omega_max={omega_max:.4g}")
    D = data.entries if isinstance(data, DtnOperator) else np.asarray(data, dtype=float)
    F = forward or ForwardMap(m, omega, tol)
    K = ConstraintSet(prior, "K")
    l0 = cfg.l0 if cfg.l0 is not None else K_centroid(prior, m.n_regions)
    mask = active_mask(cfg.mode, m.n_regions)
    x = np.asarray(l0, dtype=float)
    base = x.copy()
    trace = InversionTrace()
    target = cfg.tau_disc * cfg.noise_level
    metric = F.metric
    Dw = metric.whiten(D)
    f_floor = 0.5 * (1e-11 * np.linalg.norm(Dw)) ** 2

    d = F(ParamVector(x))
    step = cfg.step
    for it in range(cfg.max_iter + 1):
        J = jacobian_from_dtn(d, m)
        f, g = misfit_and_gradient(d, J, D)
        g = np.where(mask, g, 0.0)
        res_star = star_norm(d.entries - D, metric)
        gnorm = float(np.linalg.norm(g))
        rec = IterationRecord(it, x.tolist(), f, res_star, gnorm, 0.0, False)
        trace.records.append(rec)
        if cfg.noise_level > 0 and res_star <= target:
            trace.stop_reason = "discrepancy"
            break
        if gnorm <= cfg.grad_tol or f == 0.0:
            trace.stop_reason = "gradient"
            break
        if f <= f_floor:
            trace.stop_reason = "misfit_floor"
            break
        if it == cfg.max_iter:
            trace.stop_reason = "max_iterations"
            break

        Bw = J.whitened()[mask]
        H = np.einsum("kij,lij->kl", Bw, Bw)
        if step is None:
            step = 1.0 / np.linalg.norm(H, 2)
        if cfg.step_rule == "gauss_newton":
            ga = g[mask]
            Hd = H + cfg.damping * np.trace(H) * np.eye(len(H))
            p = np.zeros_like(x)
            p[mask] = -np.linalg.solve(Hd, ga)
            if p @ g >= 0:
                p = -g
            s = 1.0
        else:
            p = -g
            s = step if cfg.step_rule == "fixed" else 2.0 * step

        if cfg.step_rule == "fixed":
            xn = _frozen_project(x + s * p, base, mask, K)
            dn = F(ParamVector(xn))
        else:
            found = _line_search(F, D, x, f, g, p, s, base, mask, K, cfg)
            if found is None and cfg.step_rule == "gauss_newton":
                # projection can spoil a scaled direction near the boundary of K
                p, s = -g, 2.0 * step
                found = _line_search(F, D, x, f, g, p, s, base, mask, K, cfg)
            if found is None:
                if f <= 1e3 * f_floor:
                    trace.stop_reason = "misfit_floor"
                    break
                raise StagnationError(f"no descent after {cfg.max_backtracks} backtracks "
                                      f"at iteration {it}", trace)
            xn, dn, s = found
            # remember the accepted gradient step length as the next trial
            if np.array_equal(p, -g):
                step = s
        rec.step = float(s)
        rec.projected = bool(np.any(np.abs(xn - (x + s * p)) > 0))
        x, d = xn, dn
    log.info("inversion stopped after %d iterations: %s", len(trace) - 1, trace.stop_reason)
    return ParamVector(x), trace


def _line_search(F, D, x, f, g, p, s, base, mask, K, cfg):
    """Projected Armijo backtracking along ``p``; ``None`` when no descent is found."""
    for _ in range(cfg.max_backtracks):
        xn = _frozen_project(x + s * p, base, mask, K)
        dn = F(ParamVector(xn))
        fn = misfit(dn, D)
        if fn < f and fn <= f - cfg.armijo * (g @ (x - xn)):
            return xn, dn, s
        s *= 0.5
    return None


def synthesize_data(m: PartitionedMesh, l_true: ParamVector, omega: float, noise: float = 0.0,
                    seed: int = 0, tol: float = 1e-12, forward: ForwardMap | None = None) -> DtnOperator:
    """Forward data plus symmetric Gaussian noise of relative star-norm ``noise``."""
    F = forward or ForwardMap(m, omega, tol)
    clean = F(l_true)
    if noise == 0:
        return clean
    rng = np.random.default_rng(seed)
    E = rng.standard_normal(clean.entries.shape)
    E = 0.5 * (E + E.T)
    E *= noise * clean.star_norm() / star_norm(E, clean.metric)
    return DtnOperator(clean.entries + E, clean.metric, clean.mesh_id, clean.params, clean.omega,
                       0.0, None, clean.sigma_dofs)


def relative_error(l: ParamVector, truth: ParamVector) -> float:
    return (l - truth).sup_norm() / truth.sup_norm()


@dataclass
class StabilityRow:
    noise: float
    error: float
    iterations: int
    stop_reason: str


@dataclass
class StabilityTable:
    rows: list[StabilityRow]
    floor: float
    c_emp: float
    slope: float

    def bound_holds(self) -> bool:
        return all(r.error <= self.c_emp * r.noise + self.floor + 1e-15 for r in self.rows)


def stability_consistency(m: PartitionedMesh, prior: PriorData, truth: ParamVector, omega: float,
                          noise_list, cfg: InversionConfig, seed: int = 0, tol: float = 1e-12,
                          omega_max: float | None = None) -> StabilityTable:
    """Reconstruction error against data noise, one run per noise level."""
    F = ForwardMap(m, omega, tol)
    scale = F(truth).star_norm()
    rows = []
    for k, delta in enumerate(noise_list):
        data = synthesize_data(m, truth, omega, delta, seed + k, tol, F)
        run_cfg = InversionConfig(**{**cfg.__dict__, "noise_level": delta * scale})
        l_hat, tr = landweber(m, data, run_cfg, omega, prior, tol, omega_max, F)
        rows.append(StabilityRow(float(delta), relative_error(l_hat, truth), len(tr) - 1,
                                 tr.stop_reason))
    zero = [r.error for r in rows if r.noise == 0]
    floor = zero[0] if zero else 0.0
    noisy = [r for r in rows if r.noise > 0]
    c_emp = max(((r.error - floor) / r.noise for r in noisy), default=0.0)
    c_emp = max(c_emp, 0.0)
    slope = float("nan")
    if len(noisy) >= 2:
        slope = float(np.polyfit(np.log([r.noise for r in noisy]),
                                 np.log([max(r.error, 1e-300) for r in noisy]), 1)[0])
    return StabilityTable(rows, floor, c_emp, slope)
