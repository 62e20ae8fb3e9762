"""Command-line front end for reproducible experiment runs.

Configuration is INI text with fixed sections; every output file carries the
hash of the canonicalised configuration and the toolkit version, and no
timestamps, so identical inputs give byte-identical outputs.
"""
from __future__ import annotations

import argparse
import configparser
import hashlib
import io
import json
import logging
import math
import os
import sys
from dataclasses import dataclass, field
from importlib.metadata import PackageNotFoundError, version
from pathlib import Path
from typing import Any, Callable

import numpy as np
from threadpoolctl import threadpool_limits

from .errors import ConfigurationError, ElasticDtnError, SolverError, StagnationError
from .mesh import atomic_write

log = logging.getLogger("elasticdtn")

try:
    __version__ = version("artifact")
except PackageNotFoundError:  # running from a source tree
    __version__ = "0.0.0"

EXIT_CONFIG = 2
EXIT_NUMERIC = 3


def _floats(text: str) -> list[float]:
    return [float(x) for x in text.replace(";", ",").split(",") if x.strip()]


def _ints(text: str) -> list[int]:
    return [int(x) for x in text.replace(";", ",").split(",") if x.strip()]


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# section -> key -> (parser, default)
SCHEMA: dict[str, dict[str, tuple[Callable[[str], Any], Any]]] = {
    "prior": {
        "alpha0": (float, 0.5), "beta0": (float, 1.0), "gamma0": (float, 0.5),
        "L_lip": (float, 1.0), "A_vol": (float, 1.0),
    },
    "mesh": {
        "n": (_ints, [8]), "partition": (str, "two_block"), "axis": (int, 0),
        "split": (float, 0.5), "checker": (int, 2), "sigma": (str, "top"), "file": (str, ""),
    },
    "material": {
        "lam": (_floats, [1.0, 0.6]), "mu": (_floats, [1.0, 1.5]), "rho": (_floats, [1.0, 1.5]),
        "lame_only": (_bool, False),
    },
    "frequency": {"fraction": (float, 0.7), "omega": (float, float("nan"))},
    "solver": {"tol": (float, 1e-12), "method": (str, "direct"), "eig_tol": (float, 1e-8)},
    "inversion": {
        "mode": (str, "FULL"), "step_rule": (str, "gauss_newton"), "max_iter": (int, 500),
        "tau_disc": (float, 1.5), "noise": (float, 0.0), "start_scale": (float, 1.2),
        "l0": (_floats, []), "damping": (float, 1e-10), "min_omega_fraction": (float, 0.5),
    },
    "probe": {
        "samples": (int, 50), "l_samples": (int, 5), "h_samples": (int, 100),
        "mode": (str, "FULL"), "delta": (float, 0.5), "c_star": (float, float("nan")),
        "family": (_ints, [32]), "y": (_floats, [0.5, 0.5, 0.5]),
        "r_list": (_floats, [0.05, 0.1, 0.2, 0.4]), "greens_tol": (float, 1e-8),
        "t_list": (_floats, [1e-1, 3e-2, 1e-2, 3e-3]), "pairs": (int, 20),
    },
    "output": {"dir": (str, "out")},
    "run": {"seed": (int, 0), "threads": (int, 1)},
}


@dataclass
class ExperimentConfig:
    values: dict[str, dict[str, Any]]
    text: str = field(repr=False)

    def __getitem__(self, section: str) -> dict[str, Any]:
        return self.values[section]

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.text.encode()).hexdigest()[:16]

    @classmethod
    def parse(cls, text: str, overrides: dict[tuple[str, str], str] | None = None) -> "ExperimentConfig":
        """Parse and validate; raises :class:`ConfigurationError` listing every bad field."""
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str  # keep key case
        try:
            cp.read_string(text)
        except configparser.Error as exc:
            raise ConfigurationError(f"config: {exc}") from None
        for (sec, key), val in (overrides or {}).items():
            if not cp.has_section(sec):
                cp.add_section(sec)
            cp.set(sec, key, val)
        errors = []
        bad_values = False
        values: dict[str, dict[str, Any]] = {}
        for sec in cp.sections():
            if sec not in SCHEMA:
                errors.append(f"[{sec}]: unknown section")
        for sec, keys in SCHEMA.items():
            values[sec] = {}
            given = dict(cp.items(sec)) if cp.has_section(sec) else {}
            for key in given:
                if key not in keys:
                    errors.append(f"[{sec}] {key}: unknown key")
            for key, (conv, default) in keys.items():
                if key in given:
                    try:
                        values[sec][key] = conv(given[key])
                    except ValueError as exc:
                        errors.append(f"[{sec}] {key}: {exc}")
                        bad_values = True
                else:
                    values[sec][key] = default
        if not bad_values:
            errors += _semantic_errors(values)
        if errors:
            err = ConfigurationError("; ".join(errors))
            err.fields = errors
            raise err
        canon = configparser.ConfigParser(interpolation=None)
        canon.optionxform = str
        for sec in SCHEMA:
            canon.add_section(sec)
            for key, val in values[sec].items():
                canon.set(sec, key, _render(val))
        buf = io.StringIO()
        canon.write(buf)
        return cls(values, buf.getvalue())


def _render(val) -> str:
    if isinstance(val, list):
        return ", ".join(repr(v) for v in val)
    if isinstance(val, float):
        return repr(val)
    return str(val)


def _semantic_errors(v: dict) -> list[str]:
    errs = []
    n = v["mesh"]["n"]
    if len(n) not in (1, 3) or min(n) < 1:
        errs.append("[mesh] n: give one or three positive integers")
    if v["mesh"]["partition"] not in ("single", "two_block", "checkerboard"):
        errs.append("[mesh] partition: must be single, two_block or checkerboard")
    if v["mesh"]["axis"] not in (0, 1, 2):
        errs.append("[mesh] axis: must be 0, 1 or 2")
    mat = v["material"]
    if not (len(mat["lam"]) == len(mat["mu"]) == len(mat["rho"])):
        errs.append("[material] lam, mu and rho must have equal length")
    fr, om = v["frequency"]["fraction"], v["frequency"]["omega"]
    if not math.isnan(om) and om < 0:
        errs.append("[frequency] omega: must be nonnegative")
    if not 0 <= fr <= 1:
        errs.append("[frequency] fraction: must lie in [0, 1]")
    if v["solver"]["method"] not in ("direct", "pcg"):
        errs.append("[solver] method: must be direct or pcg")
    if not v["solver"]["tol"] > 0:
        errs.append("[solver] tol: must be positive")
    inv = v["inversion"]
    if inv["mode"] not in ("FULL", "S1", "S2"):
        errs.append("[inversion] mode: must be FULL, S1 or S2")
    if inv["step_rule"] not in ("fixed", "backtracking", "gauss_newton"):
        errs.append("[inversion] step_rule: must be fixed, backtracking or gauss_newton")
    if inv["noise"] < 0:
        errs.append("[inversion] noise: must be nonnegative")
    if v["probe"]["mode"] not in ("FULL", "S1", "S2"):
        errs.append("[probe] mode: must be FULL, S1 or S2")
    if len(v["probe"]["y"]) != 3:
        errs.append("[probe] y: needs three coordinates")
    if v["run"]["threads"] < 1:
        errs.append("[run] threads: must be at least 1")
    try:
        from .material import PriorData
        PriorData(**v["prior"])
    except ConfigurationError as exc:
        errs.append(f"[prior] {exc}")
    return errs


# -- experiment pieces ---------------------------------------------------------

class Experiment:
    """Lazily built mesh, prior, truth and frequency for one configuration."""

    def __init__(self, cfg: ExperimentConfig):
        from .material import ParamVector, PriorData
        self.cfg = cfg
        self._mesh = None
        self._eig = None
        mat = cfg["material"]
        self.truth = ParamVector.from_parts(mat["lam"], mat["mu"], mat["rho"])
        self.prior = PriorData(**cfg["prior"])

    def build_mesh(self, n=None):
        from .mesh import build_block_mesh, checkerboard_blocks, load_mesh, two_block_blocks
        c = self.cfg["mesh"]
        if c["file"] and n is None:
            return load_mesh(c["file"])
        dims = n or c["n"]
        dims = list(dims) * 3 if len(dims) == 1 else list(dims)
        blocks = {"single": None,
                  "two_block": lambda: two_block_blocks(c["split"], c["axis"]),
                  "checkerboard": lambda: checkerboard_blocks(c["checker"])}[c["partition"]]
        return build_block_mesh(*dims, blocks() if blocks else None, c["sigma"])

    @property
    def mesh(self):
        if self._mesh is None:
            self._mesh = self.build_mesh()
            if self._mesh.n_regions != self.truth.n:
                raise ConfigurationError(f"[material] gives {self.truth.n} subdomains but the mesh "
                                         f"has {self._mesh.n_regions}")
        return self._mesh

    def eigen(self):
        if self._eig is None:
            from .material import IsotropicTensor, reference_tensor
            from .solver import admissible_frequency_bound, smallest_dirichlet_eigenvalue
            if self.cfg["material"]["lame_only"]:
                # lambda = -mu reduces the operator to mu times the vector Laplacian
                mu = self.truth.mu[0]
                t = IsotropicTensor(-mu, mu)
            else:
                t = reference_tensor(self.prior)
            lam1 = smallest_dirichlet_eigenvalue(self.mesh, t, tol=self.cfg["solver"]["eig_tol"],
                                                 seed=self.cfg["run"]["seed"])
            self._eig = (t, lam1, admissible_frequency_bound(self.prior, lam1))
        return self._eig

    @property
    def omega_max(self) -> float:
        return self.eigen()[2]

    @property
    def omega(self) -> float:
        f = self.cfg["frequency"]
        if not math.isnan(f["omega"]):
            return float(f["omega"])
        return float(f["fraction"] * self.omega_max)


def _meta(cfg: ExperimentConfig, command: str) -> dict:
    return {"command": command, "config_hash": cfg.hash, "version": __version__,
            "seed": cfg["run"]["seed"], "threads": cfg["run"]["threads"], "config": cfg.text}


def _write_json(path: Path, payload: dict) -> None:
    atomic_write(path, json.dumps(payload, sort_keys=True, indent=1, allow_nan=True) + "\n")


def _csv_with_header(cfg: ExperimentConfig, body: str) -> str:
    return f"# config_hash={cfg.hash} version={__version__}\n{body}"


def cmd_mesh(cfg: ExperimentConfig, out: Path) -> dict:
    from .mesh import format_mesh, validate_partition
    exp = Experiment(cfg)
    m = exp.mesh
    rep = validate_partition(m, exp.prior.with_n(m.n_regions))
    atomic_write(out / "mesh.txt", f"# config_hash={cfg.hash} version={__version__}\n" + format_mesh(m))
    q = rep.quality
    payload = {"meta": _meta(cfg, "mesh"), "mesh_id": m.mesh_id, "n_vertices": int(m.n_vertices),
               "n_tets": int(len(m.tets)), "n_regions": int(m.n_regions),
               "h_max": float(q.h_max) if q else None, "shape_min": float(q.shape_min) if q else None,
               "volumes": {str(j): float(v) for j, v in q.volumes.items()} if q else {},
               "valid": rep.valid, "violations": list(rep.violations),
               "chains": {str(j): [int(x) for x in c] for j, c in rep.chains.items()},
               "interfaces": {f"{a}-{b}": int(k) for (a, b), k in rep.interfaces.items()}}
    _write_json(out / "mesh_report.json", payload)
    return payload


def cmd_eig(cfg: ExperimentConfig, out: Path) -> dict:
    exp = Experiment(cfg)
    t, lam1, wmax = exp.eigen()
    payload = {"meta": _meta(cfg, "eig"), "mesh_id": exp.mesh.mesh_id,
               "tensor": {"lam": t.lam, "mu": t.mu}, "lambda1_0": lam1, "omega_max": wmax,
               "reference_3pi2_mu": 3 * math.pi ** 2 * t.mu}
    _write_json(out / "eig.json", payload)
    return payload


def cmd_forward(cfg: ExperimentConfig, out: Path) -> dict:
    from .dtn import assemble_dtn
    exp = Experiment(cfg)
    d = assemble_dtn(exp.mesh, exp.truth, exp.omega, cfg["solver"]["tol"], cfg["solver"]["method"])
    payload = {"meta": _meta(cfg, "forward"), "mesh_id": exp.mesh.mesh_id,
               "asymmetry": d.asymmetry, "star_norm": d.star_norm(), **d.to_json()}
    _write_json(out / "dtn.json", payload)
    return payload


def cmd_invert(cfg: ExperimentConfig, out: Path) -> dict:
    from .dtn import ForwardMap
    from .invert import InversionConfig, active_mask, landweber, relative_error, synthesize_data
    from .material import ParamVector
    exp = Experiment(cfg)
    m, c = exp.mesh, cfg["inversion"]
    omega, tol = exp.omega, cfg["solver"]["tol"]
    F = ForwardMap(m, omega, tol, cfg["solver"]["method"])
    data = synthesize_data(m, exp.truth, omega, c["noise"], cfg["run"]["seed"], tol, F)
    if c["l0"]:
        l0 = ParamVector(c["l0"])
    else:
        mask = active_mask(c["mode"], m.n_regions)
        x = np.asarray(exp.truth, dtype=float)
        l0 = ParamVector(np.where(mask, c["start_scale"] * x, x))
    icfg = InversionConfig(mode=c["mode"], step_rule=c["step_rule"], max_iter=c["max_iter"],
                           tau_disc=c["tau_disc"], noise_level=c["noise"] * F(exp.truth).star_norm(),
                           l0=l0, damping=c["damping"], min_omega_fraction=c["min_omega_fraction"])
    omega_max = exp.omega_max if omega > 0 else None
    l_hat, trace = landweber(m, data, icfg, omega, exp.prior, tol, omega_max, F)
    atomic_write(out / "trace.csv", _csv_with_header(cfg, trace.to_csv()))
    payload = {"meta": _meta(cfg, "invert"), "mesh_id": m.mesh_id, "omega": omega,
               "mode": c["mode"], "truth": [float(x) for x in exp.truth],
               "start": [float(x) for x in l0], "estimate": [float(x) for x in l_hat],
               "relative_error": relative_error(l_hat, exp.truth),
               "iterations": len(trace) - 1, "stop_reason": trace.stop_reason,
               "final_misfit": trace.records[-1].misfit}
    _write_json(out / "invert.json", payload)
    return payload


def cmd_probe(cfg: ExperimentConfig, out: Path, name: str) -> dict:
    from . import probes
    exp = Experiment(cfg)
    p, seed, tol = cfg["probe"], cfg["run"]["seed"], cfg["solver"]["tol"]
    threads = cfg["run"]["threads"]
    extra: dict[str, Any] = {}
    if name == "lipschitz":
        rep = probes.lipschitz_probe(exp.mesh, exp.prior, exp.omega, p["samples"], seed, tol,
                                     threads=threads)
        c_star = None if math.isnan(p["c_star"]) else p["c_star"]
        mc = probes.modulus_comparison(rep, p["delta"], c_star, exp.mesh.n_regions)
        extra = {"modulus": {"c_star_fit": mc.c_star_fit, "c_linear": mc.c_linear,
                             "delta": p["delta"], "all_pass": bool(mc.rows) and all(
                                 r["passes"] for r in mc.rows) if c_star else None}}
    elif name == "q0":
        rep = probes.q0_probe(exp.mesh, exp.prior, exp.omega, p["l_samples"], p["h_samples"],
                              seed, tol, p["mode"], threads=threads)
    elif name == "greens":
        family = [exp.build_mesh([k]) for k in p["family"]]
        rep = probes.greens_blowup_probe(family, p["y"], p["r_list"], p["greens_tol"])
    elif name == "taylor":
        rep = _taylor_report(exp, p, seed, tol)
    elif name == "alessandrini":
        rep = _alessandrini_report(exp, p, seed, tol)
    else:
        raise ConfigurationError(f"unknown probe {name!r}")
    atomic_write(out / f"probe_{name}.csv", _csv_with_header(cfg, rep.to_csv()))
    payload = {"meta": _meta(cfg, f"probe {name}"), **rep.to_json(), **extra}
    _write_json(out / f"probe_{name}.json", payload)
    return payload


def _taylor_report(exp: Experiment, p: dict, seed: int, tol: float):
    from .deriv import taylor_order
    from .probes import ProbeReport
    rng = np.random.default_rng(seed)
    h = rng.uniform(-1, 1, len(exp.truth)) * 0.2 * np.abs(np.asarray(exp.truth))
    res = taylor_order(exp.mesh, exp.truth, h, exp.omega, p["t_list"], exp.prior, tol)
    rows = [{"sample_id": k, "inputs_hash": "", "t": t, "remainder": r}
            for k, (t, r) in enumerate(zip(res.t, res.remainders))]
    rep = ProbeReport("taylor", exp.mesh.mesh_id, exp.omega, len(rows), seed, table=rows)
    rep.results = {"slope": res.slope, "exact": res.exact}
    return rep


def _alessandrini_report(exp: Experiment, p: dict, seed: int, tol: float):
    from .dtn import alessandrini_gap, sigma_metric
    from .material import sample_K
    from .probes import ProbeReport
    rng = np.random.default_rng(seed)
    m, prior = exp.mesh, exp.prior.with_n(exp.mesh.n_regions)
    n = sigma_metric(m).dim
    rows = []
    for k in range(p["pairs"]):
        l1, l2 = sample_K(prior, m.n_regions, rng), sample_K(prior, m.n_regions, rng)
        psi, phi = rng.standard_normal(n), rng.standard_normal(n)
        lhs, rhs, gap = alessandrini_gap(m, l1, l2, exp.omega, psi, phi, tol)
        rows.append({"sample_id": k, "inputs_hash": "", "lhs": lhs, "rhs": rhs,
                     "relative_gap": gap / max(abs(lhs), abs(rhs), 1e-300)})
    rep = ProbeReport("alessandrini", m.mesh_id, exp.omega, len(rows), seed, table=rows)
    rep.results = {"max_relative_gap": max(r["relative_gap"] for r in rows)}
    return rep


# -- entry point ---------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="INI experiment configuration")
    common.add_argument("--out", type=Path, help="output directory (overrides [output] dir)")
    common.add_argument("--seed", type=int, help="random seed (overrides [run] seed)")
    common.add_argument("--threads", type=int, help="worker and BLAS thread cap")
    common.add_argument("--tol", type=float, help="solver tolerance (overrides [solver] tol)")
    common.add_argument("-v", "--verbose", action="store_true")
    ap = argparse.ArgumentParser(prog="elasticdtn", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)
    for name, text in (("mesh", "build and validate a partitioned mesh"),
                       ("eig", "smallest reference Dirichlet eigenvalue and frequency bound"),
                       ("forward", "assemble and export the DtN operator"),
                       ("invert", "reconstruct subdomain parameters from synthetic data")):
        sub.add_parser(name, parents=[common], help=text)
    pp = sub.add_parser("probe", parents=[common], help="run an empirical probe")
    pp.add_argument("probe", choices=["lipschitz", "q0", "greens", "taylor", "alessandrini"])
    return ap


def _fail(out: Path | None, code: int, payload: dict) -> int:
    text = json.dumps(payload, sort_keys=True, indent=1) + "\n"
    sys.stderr.write(text)
    if out is not None:
        try:
            atomic_write(out / "error.json", text)
        except OSError:
            pass
    return code


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = {}
    if args.seed is not None:
        overrides[("run", "seed")] = str(args.seed)
    if args.threads is not None:
        overrides[("run", "threads")] = str(args.threads)
    if args.tol is not None:
        overrides[("solver", "tol")] = repr(args.tol)
    if args.out is not None:
        overrides[("output", "dir")] = str(args.out)
    out = args.out
    try:
        text = args.config.read_text() if args.config else ""
        cfg = ExperimentConfig.parse(text, overrides)
    except (ConfigurationError, OSError) as exc:
        fields = getattr(exc, "fields", [str(exc)])
        return _fail(out, EXIT_CONFIG, {"error": "config", "fields": fields})
    out = Path(cfg["output"]["dir"])
    out.mkdir(parents=True, exist_ok=True)
    os.environ.setdefault("OMP_NUM_THREADS", str(cfg["run"]["threads"]))
    commands = {"mesh": cmd_mesh, "eig": cmd_eig, "forward": cmd_forward, "invert": cmd_invert}
    try:
        with threadpool_limits(limits=cfg["run"]["threads"]):
            if args.command == "probe":
                result = cmd_probe(cfg, out, args.probe)
            else:
                result = commands[args.command](cfg, out)
    except ConfigurationError as exc:
        return _fail(out, EXIT_CONFIG, {"error": "config", "fields": [str(exc)]})
    except ElasticDtnError as exc:
        payload = {"error": type(exc).__name__, "message": str(exc)}
        if isinstance(exc, SolverError):
            payload["report"] = {"history": [float(x) for x in (exc.history or [])]}
        if isinstance(exc, StagnationError) and exc.trace is not None:
            payload["report"] = {"misfits": exc.trace.misfits}
        return _fail(out, EXIT_NUMERIC, payload)
    summary = {k: v for k, v in result.items() if k not in ("meta", "table", "lambda", "sigma_dofs")}
    print(json.dumps(summary, sort_keys=True, default=str)[:2000])
    return 0


if __name__ == "__main__":
    sys.exit(main())
