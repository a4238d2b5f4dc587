"""Experiment harness: convergence studies, fit quality, residual histories, diagnostics.

Configuration is an INI file; every run writes the resolved configuration
next to its CSV and JSON outputs so that it can be repeated exactly.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import json
import logging
import math
import re
import sys
import time
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import _kernels as kern
from . import analysis as an
from .fem import sample_stencils
from .mesh import DIRECTIONS, MacroMesh, generate_shell_mesh, write_mesh
from .multigrid import (CycleSpec, OperatorMode, SolverDivergence, assemble_problem_rhs,
                        build_hierarchy, solve)
from .surrogate import PolyBasis, fit_ipoly, fit_lsqp, fit_surrogates, write_coefficients

log = logging.getLogger("shellmg")

EXIT_OK, EXIT_INVALID, EXIT_DIVERGED = 0, 2, 3
CSV_VERSION = 1
DEVIATION_THRESHOLD = 0.10

CONVERGENCE_COLUMNS = ["mesh_elements", "L", "variant", "q", "j", "error", "final_residual", "cycles"]
HISTORY_COLUMNS = ["mesh_elements", "L", "variant", "cycle", "residual_norm", "discretization_error"]
FIT_COLUMNS = ["mesh_elements", "level", "macro_id", "method", "q", "sampling", "direction", "e_l2", "e_linf"]


class ConfigError(ValueError):
    """Invalid experiment configuration."""


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

_VARIANT = re.compile(r"^(fem|cons|const|(ipoly|lsqp)-q(\d+)(?:-j(\d+))?)(-dd)?$")


@dataclass(frozen=True)
class Variant:
    """A named operator choice such as ``fem``, ``lsqp-q2``, ``ipoly-q3-dd`` or ``cons-dd``."""

    mode: OperatorMode
    dd: bool = False

    @classmethod
    def parse(cls, text: str, default_j: int = 2) -> "Variant":
        m = _VARIANT.match(text.strip().lower())
        if not m:
            raise ConfigError(f"unknown variant {text!r}")
        kind, method, q, j, dd = m.groups()
        if method is None:
            if kind == "fem" and dd:
                raise ConfigError("fem has no double-discretization variant")
            return cls(OperatorMode(kind), bool(dd))
        if method == "ipoly" and j is not None:
            raise ConfigError("ipoly takes no sampling parameter j")
        q = int(q)
        if method == "ipoly" and q not in (1, 2, 3):
            raise ConfigError("ipoly supports q in {1, 2, 3}")
        if method == "lsqp" and q > 4:
            raise ConfigError("lsqp supports q <= 4")
        jj = None if method == "ipoly" else int(j) if j is not None else default_j
        return cls(OperatorMode("surrogate", method, q, jj), bool(dd))

    @property
    def name(self) -> str:
        return self.mode.label + ("-dd" if self.dd else "")


def mesh_parameters(elements: int) -> tuple[int, int]:
    """Refinement ``(t, n_r)`` of the canonical mesh family ``60 * 8**k``."""
    k = round(math.log(elements / 60, 8)) if elements >= 60 else -1
    if k < 0 or 60 * 8 ** k != elements:
        raise ConfigError(f"mesh size {elements} is not of the form 60 * 8**k")
    return k, 2 ** k


@dataclass
class ExperimentConfig:
    r1: float = 0.5
    r2: float = 1.0
    elements: list[int] = field(default_factory=lambda: [60])
    levels: list[int] = field(default_factory=lambda: [2, 3, 4])
    variants: list[str] = field(default_factory=lambda: ["fem", "lsqp-q2"])
    j: int = 2
    pre: int = 3
    post: int = 3
    coarse_sweeps: int = 50
    cycles: int = 10
    smoother: str = "split"
    seed: int = 0
    workers: int = 1
    macro_ids: list[int] = field(default_factory=lambda: [0])

    def validate(self) -> "ExperimentConfig":
        if not 0 < self.r1 < self.r2:
            raise ConfigError("radii must satisfy 0 < r1 < r2")
        if not self.elements:
            raise ConfigError("no mesh sizes given")
        for e in self.elements:
            mesh_parameters(e)
        if not self.levels or min(self.levels) < 0:
            raise ConfigError("levels must be a non-empty list of non-negative integers")
        if not self.variants:
            raise ConfigError("variant list is empty")
        for v in self.variants:
            Variant.parse(v, self.j)
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        try:
            self.cycle_spec()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return self

    def cycle_spec(self, dd: bool = False) -> CycleSpec:
        return CycleSpec(self.pre, self.post, self.coarse_sweeps, self.cycles, self.smoother, dd)

    def parsed_variants(self) -> list[Variant]:
        return [Variant.parse(v, self.j) for v in self.variants]

    # -- INI round trip ------------------------------------------------------

    @classmethod
    def from_parser(cls, cp: configparser.ConfigParser) -> "ExperimentConfig":
        c = cls()

        def ints(text):
            return [int(x) for x in re.split(r"[,\s]+", text.strip()) if x]

        def strs(text):
            return [x for x in re.split(r"[,\s]+", text.strip()) if x]

        try:
            if cp.has_section("mesh"):
                s = cp["mesh"]
                c.r1 = s.getfloat("r1", c.r1)
                c.r2 = s.getfloat("r2", c.r2)
                if "elements" in s:
                    c.elements = ints(s["elements"])
            if cp.has_section("study"):
                s = cp["study"]
                if "levels" in s:
                    c.levels = ints(s["levels"])
                if "variants" in s:
                    c.variants = strs(s["variants"])
                c.j = s.getint("j", c.j)
                if "macro_ids" in s:
                    c.macro_ids = ints(s["macro_ids"])
            if cp.has_section("cycle"):
                s = cp["cycle"]
                c.pre = s.getint("pre", c.pre)
                c.post = s.getint("post", c.post)
                c.coarse_sweeps = s.getint("coarse_sweeps", c.coarse_sweeps)
                c.cycles = s.getint("cycles", c.cycles)
                c.smoother = s.get("smoother", c.smoother)
            if cp.has_section("run"):
                s = cp["run"]
                c.seed = s.getint("seed", c.seed)
                c.workers = s.getint("workers", c.workers)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return c

    def to_parser(self) -> configparser.ConfigParser:
        cp = configparser.ConfigParser()
        join = lambda xs: ", ".join(str(x) for x in xs)  # noqa: E731
        cp["mesh"] = {"r1": repr(self.r1), "r2": repr(self.r2), "elements": join(self.elements)}
        cp["study"] = {"levels": join(self.levels), "variants": join(self.variants),
                       "j": str(self.j), "macro_ids": join(self.macro_ids)}
        cp["cycle"] = {"pre": str(self.pre), "post": str(self.post),
                       "coarse_sweeps": str(self.coarse_sweeps), "cycles": str(self.cycles),
                       "smoother": self.smoother}
        cp["run"] = {"seed": str(self.seed), "workers": str(self.workers)}
        return cp


def load_config(path: str | None) -> ExperimentConfig:
    cp = configparser.ConfigParser()
    if path is not None:
        if not Path(path).is_file():
            raise ConfigError(f"config file {path} not found")
        try:
            cp.read(path)
        except configparser.Error as exc:
            raise ConfigError(str(exc)) from exc
    return ExperimentConfig.from_parser(cp)


# ---------------------------------------------------------------------------
# Running cases
# ---------------------------------------------------------------------------

@dataclass
class CaseResult:
    mesh_elements: int
    L: int
    variant: str
    q: int | None
    j: int | None
    residual: list[float]
    error: list[float]
    setup_time: float
    solve_time: float
    diverged: bool = False

    @property
    def final_error(self) -> float:
        return self.error[-1]

    @property
    def final_residual(self) -> float:
        return self.residual[-1]

    @property
    def cycles(self) -> int:
        return len(self.residual) - 1


def build_mesh(elements: int, r1: float = 0.5, r2: float = 1.0) -> MacroMesh:
    t, n_r = mesh_parameters(elements)
    return generate_shell_mesh(r1, r2, t, n_r)


def run_case(mesh: MacroMesh, L: int, variant: Variant, spec: CycleSpec | None = None,
             seed: int = 0, workers: int = 1) -> CaseResult:
    """Build the hierarchy, solve the manufactured problem and record its history.

    A divergent solve is returned with ``diverged=True`` and its partial history.
    """
    spec = spec if spec is not None else CycleSpec(smoother="split")
    spec = CycleSpec(spec.pre, spec.post, spec.coarse_sweeps, spec.cycles, spec.smoother, variant.dd)
    r1, r2 = mesh.r1, mesh.r2

    def rhs(p):
        return an.analytic_rhs(p, r1, r2)

    def exact(p):
        return an.manufactured_solution(p, r1, r2)

    t0 = time.perf_counter()
    h = build_hierarchy(mesh, L, variant.mode, variant.dd, workers=workers)
    f = assemble_problem_rhs(h, rhs)
    t1 = time.perf_counter()
    space, geometry = h.finest.space, h.geometry
    H = an.mesh_size(mesh)

    def err(u):
        return an.discretization_error(u, space, geometry, H, exact)

    diverged = False
    try:
        hist = solve(spec, h, f, seed, err)
    except SolverDivergence as exc:
        hist, diverged = exc.history, True
    mode = variant.mode
    return CaseResult(len(mesh.tets), L, variant.name,
                      mode.q if mode.kind == "surrogate" else None,
                      mode.j if mode.kind == "surrogate" else None,
                      hist.residual, hist.error, t1 - t0, time.perf_counter() - t1, diverged)


def _write_csv(path: Path, columns: list[str], rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns)
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if r.get(k) is None else r.get(k)) for k in columns})


def _json_default(o):
    if isinstance(o, Fraction):
        return float(o)
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))


def _write_json(path: Path, data) -> None:
    with open(path, "w") as fh:
        json.dump(data, fh, indent=2, default=_json_default)
        fh.write("\n")


def _prepare_out(out: str, config: ExperimentConfig) -> Path:
    p = Path(out)
    p.mkdir(parents=True, exist_ok=True)
    with open(p / "config.ini", "w") as fh:
        config.to_parser().write(fh)
    return p


def _finite(x: float):
    return x if math.isfinite(x) else None


def _summarize(results: list[CaseResult]) -> dict:
    """Observed orders per (mesh, variant) and deviation from FEM at matching (mesh, L)."""
    fem = {(r.mesh_elements, r.L): r.final_error for r in results if r.variant == "fem"}
    groups: dict[tuple[int, str], list[CaseResult]] = {}
    for r in results:
        groups.setdefault((r.mesh_elements, r.variant), []).append(r)
    series = []
    for (ne, name), rs in sorted(groups.items()):
        rs.sort(key=lambda r: r.L)
        errs = [r.final_error for r in rs]
        orders = [None] * len(rs)
        for a in range(1, len(rs)):
            if rs[a].L == rs[a - 1].L + 1 and errs[a] > 0 and errs[a - 1] > 0:
                orders[a] = _finite(float(np.log2(errs[a - 1] / errs[a])))
        devs = [(_finite(abs(e - fem[(ne, r.L)]) / fem[(ne, r.L)]) if (ne, r.L) in fem else None)
                for r, e in zip(rs, errs)]
        onset = next((r.L for r, d in zip(rs, devs) if d is not None and d > DEVIATION_THRESHOLD), None)
        series.append({
            "mesh_elements": ne, "variant": name,
            "levels": [r.L for r in rs], "errors": [_finite(e) for e in errs],
            "observed_orders": orders, "deviation_from_fem": devs,
            "plateau_onset_level": onset,
            "diverged": [r.diverged for r in rs],
        })
    return {"schema_version": CSV_VERSION, "deviation_threshold": DEVIATION_THRESHOLD,
            "series": series}


def load_schema(name: str) -> dict:
    """JSON schema of the ``summary``, ``history`` or ``diagnostics`` output."""
    from importlib.resources import files
    schemas = json.loads(files("shellmg").joinpath("schemas.json").read_text())
    return schemas[name]


def _check_macro_ids(config: ExperimentConfig, mesh: MacroMesh) -> None:
    for m in config.macro_ids:
        if not 0 <= m < len(mesh.tets):
            raise ConfigError(f"macro id {m} out of range")


def _cases(config: ExperimentConfig):
    for ne in config.elements:
        mesh = build_mesh(ne, config.r1, config.r2)
        for L in config.levels:
            for v in config.parsed_variants():
                yield mesh, L, v


def cmd_convergence_study(config: ExperimentConfig, out: str) -> int:
    p = _prepare_out(out, config)
    results, rows, status = [], [], EXIT_OK
    try:
        for mesh, L, v in _cases(config):
            log.info("solving %d elements, L=%d, %s", len(mesh.tets), L, v.name)
            r = run_case(mesh, L, v, config.cycle_spec(), config.seed, config.workers)
            results.append(r)
            rows.append({"mesh_elements": r.mesh_elements, "L": L, "variant": r.variant, "q": r.q,
                         "j": r.j, "error": repr(r.final_error),
                         "final_residual": repr(r.final_residual), "cycles": r.cycles})
            if r.diverged:
                log.error("solver diverged for %s at L=%d", r.variant, L)
                status = EXIT_DIVERGED
                break
    finally:
        _write_csv(p / "convergence.csv", CONVERGENCE_COLUMNS, rows)
        summary = _summarize(results)
        summary["command"] = "convergence-study"
        _write_json(p / "summary.json", summary)
    return status


def cmd_residual_history(config: ExperimentConfig, out: str) -> int:
    p = _prepare_out(out, config)
    rows, runs, status = [], [], EXIT_OK
    try:
        for mesh, L, v in _cases(config):
            r = run_case(mesh, L, v, config.cycle_spec(), config.seed, config.workers)
            for c, (res, e) in enumerate(zip(r.residual, r.error)):
                rows.append({"mesh_elements": r.mesh_elements, "L": L, "variant": r.variant,
                             "cycle": c, "residual_norm": repr(res), "discretization_error": repr(e)})
            rf = np.asarray(r.residual[1:]) / np.asarray(r.residual[:-1])
            runs.append({"mesh_elements": r.mesh_elements, "L": L, "variant": r.variant,
                         "residual": [_finite(x) for x in r.residual],
                         "error": [_finite(x) for x in r.error],
                         "reduction_factors": [_finite(float(x)) for x in rf],
                         "diverged": r.diverged})
            if r.diverged:
                status = EXIT_DIVERGED
                break
    finally:
        _write_csv(p / "history.csv", HISTORY_COLUMNS, rows)
        _write_json(p / "history.json", {"schema_version": CSV_VERSION,
                                         "command": "residual-history", "runs": runs})
    return status


def _samplings(level: int, j: int) -> list[tuple[str, int | None]]:
    out = [("ipoly", None)]
    for jj in sorted({j, max(level - 1, 1), level}):
        out.append(("lsqp", jj))
    return out


def cmd_fit_quality(config: ExperimentConfig, out: str) -> int:
    p = _prepare_out(out, config)
    rows = []
    for ne in config.elements:
        mesh = build_mesh(ne, config.r1, config.r2)
        qs = sorted({Variant.parse(v, config.j).mode.q for v in config.variants
                     if v.startswith(("ipoly", "lsqp"))}) or [2]
        for level in config.levels:
            if level < 1:
                continue
            _check_macro_ids(config, mesh)
            for m in config.macro_ids:
                true = an.true_interior_stencils(mesh, m, level)

                def sampler(nodes, m=m, level=level):
                    return sample_stencils(mesh, m, level, nodes)

                for q in qs:
                    for method, jj in _samplings(level, config.j):
                        if method == "ipoly" and q not in (1, 2, 3):
                            continue
                        c = (fit_ipoly(sampler, level, q) if method == "ipoly"
                             else fit_lsqp(sampler, level, q, jj))
                        fm = an.fit_metrics(true, c, level, PolyBasis(q).exps)
                        label = "ipoly" if jj is None else f"M{min(level, max(1, jj))}"
                        for w, d in enumerate(DIRECTIONS):
                            rows.append({"mesh_elements": ne, "level": level, "macro_id": m,
                                         "method": method, "q": q, "sampling": label,
                                         "direction": d.name, "e_l2": repr(float(fm.l2[w])),
                                         "e_linf": repr(float(fm.linf[w]))})
    _write_csv(p / "fit_quality.csv", FIT_COLUMNS, rows)
    return EXIT_OK


def cmd_diagnostics(config: ExperimentConfig, out: str) -> int:
    p = _prepare_out(out, config)
    report = {"schema_version": CSV_VERSION, "command": "diagnostics"}
    report["flops"] = {
        "constant": an.flops_per_update("constant"),
        "fem_direct": an.flops_per_update("fem_direct"),
        "fem_rowsum": an.flops_per_update("fem_rowsum"),
        "surrogate_naive_q2": an.flops_per_update("surrogate_naive_q2"),
        "surrogate_incremental": {str(q): an.flops_per_update("surrogate_incremental", q)
                                  for q in (1, 2, 3)},
        "cons_dd": {str(nu): str(an.flops_per_update("cons_dd", nu=nu)) for nu in (1, 2, 3, 6)},
        "cost_factor": {str(q): an.cost_factor(q) for q in (1, 2, 3)},
    }
    levels = sorted(l for l in config.levels if l >= 1)
    diag = []
    for ne in config.elements:
        mesh = build_mesh(ne, config.r1, config.r2)
        _check_macro_ids(config, mesh)
        for v in config.parsed_variants():
            if v.mode.kind != "surrogate" or not levels:
                continue
            sc = fit_surrogates(mesh, levels, v.mode.method, v.mode.q, v.mode.j)
            exps = PolyBasis(v.mode.q).exps
            for m in config.macro_ids:
                sym_prev = None
                for level in levels:
                    true = an.true_interior_stencils(mesh, m, level)
                    S = kern.eval_interior(sc.coeffs[level][m], exps, 2 ** (level + 2), True)
                    sym = an.symmetry_measure(S, true, level)
                    diag.append({
                        "mesh_elements": ne, "variant": v.name, "macro_id": m, "level": level,
                        "rowsum_max_relative": an.rowsum_max(S),
                        "rowsum_max_relative_fem": an.rowsum_max(true),
                        "symmetry": sym,
                        "symmetry_fem": an.symmetry_measure(true, true, level),
                        "symmetry_ratio": None if sym_prev is None else sym / sym_prev,
                    })
                    sym_prev = sym
            report.setdefault("setup", []).append({"mesh_elements": ne, "variant": v.name,
                                                   "levels": levels, **sc.timings})
            write_coefficients(sc, p / f"coeffs_{ne}_{v.name}.txt")
    report["stencils"] = diag
    _write_json(p / "diagnostics.json", report)
    return EXIT_OK


COMMANDS = {
    "convergence-study": cmd_convergence_study,
    "fit-quality": cmd_fit_quality,
    "residual-history": cmd_residual_history,
    "diagnostics": cmd_diagnostics,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="shellmg", description="Surrogate-stencil multigrid experiments.")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="INI file with [mesh], [study], [cycle], [run] sections")
        sp.add_argument("--out", default=f"results/{name}", help="output directory")
        sp.add_argument("--seed", type=int, help="seed of the random initial guess")
        sp.add_argument("--workers", type=int, help="threads for per-element loops")
        sp.add_argument("--mesh-dump", help="write the macro mesh(es) to this path")
        sp.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        config = load_config(args.config)
        if args.seed is not None:
            config.seed = args.seed
        if args.workers is not None:
            config.workers = args.workers
        config.validate()
        if args.mesh_dump:
            for ne in config.elements:
                path = Path(args.mesh_dump)
                if len(config.elements) > 1:
                    path = path.with_name(f"{path.stem}_{ne}{path.suffix}")
                write_mesh(build_mesh(ne, config.r1, config.r2), path)
        return COMMANDS[args.command](config, args.out)
    except ConfigError as exc:
        print(f"invalid configuration: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
