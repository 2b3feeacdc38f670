"""Command-line entry point: config-driven pipelines with reproducible manifests.

Commands: ``simulate``, ``solve-bsde``, ``solve-pde-stochastic``,
``solve-pde-fd``, ``verify-resolvent``, ``compare``.  Each run reads one
JSON config, writes ``report.json`` (plus optional CSV/bundle artifacts)
into the output directory, and finishes with an atomically-written
``manifest.json`` carrying the resolved config, wall-clock time, and a
content hash of every emitted file.  Numeric payloads are byte-stable
across reruns and thread counts; only the manifest's wall-clock varies.

Exit codes: 0 success, 2 validation error, 3 non-convergence,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import tempfile
import time
from pathlib import Path

import numpy as np

from . import __version__
from .bsde import (
    BsdeProblem,
    driver_from_name,
    problem_from_names,
    problem_from_pde,
    solve_backward_euler,
    solve_picard,
    stochastic_solution,
    terminal_from_name,
)
from .bundle_io import write_bundle
from .domain import DomainSpec
from .coefficients import field_from_name
from .engine import InitialLaw, SimulationConfig, simulate
from .errors import InputError, NumericalError
from .fdpde import evaluate as fd_evaluate, mass_check, solve_fd, trapezoid_integral
from .regression import RegressionBasis
from .resolvent import (
    NestedPotentialSpec,
    estimate_potential,
    nested_potential,
    potential_martingale_check,
    verify_product_formula,
)

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NON_CONVERGENCE = 3
EXIT_NUMERICAL = 4


# -- config parsing ---------------------------------------------------------------


def _parse_domain(cfg: dict) -> DomainSpec:
    dom = cfg.get("domain")
    if not isinstance(dom, dict):
        raise InputError("config requires a 'domain' object")
    if dom.get("kind") == "box":
        return DomainSpec.box(dom["bounds"])
    if dom.get("kind") == "polytope":
        halves = [(h["normal"], h["offset"]) for h in dom["halfspaces"]]
        return DomainSpec.polytope(halves, int(dom["dimension"]))
    raise InputError(f"unknown domain kind {dom.get('kind')!r}")


def _parse_initial_law(cfg: dict) -> InitialLaw:
    law = cfg.get("initial_law", {"kind": "uniform"})
    kind = law.get("kind")
    if kind == "point":
        return InitialLaw.point_mass(law["x"])
    if kind == "uniform":
        return InitialLaw.uniform()
    if kind == "product":
        return InitialLaw.product_tables([(t["x"], t["p"]) for t in law["tables"]])
    raise InputError(f"unknown initial law kind {kind!r}")


def _parse_basis(cfg: dict, domain: DomainSpec) -> RegressionBasis | None:
    basis = cfg.get("basis")
    if basis is None:
        return None
    if basis.get("kind") == "poly":
        return RegressionBasis.polynomial(int(basis.get("degree", 3)), domain)
    if basis.get("kind") == "pwc":
        return RegressionBasis.piecewise_constant(int(basis.get("cells", 8)), domain)
    raise InputError(f"unknown basis kind {basis.get('kind')!r}")


def _sim_config(cfg: dict, domain: DomainSpec, seed_override: int | None,
                horizon_key: str = "horizon") -> SimulationConfig:
    for key in (horizon_key, "dt", "n_paths"):
        if key not in cfg:
            raise InputError(f"config requires {key!r}")
    seed = seed_override if seed_override is not None else cfg.get("seed")
    if seed is None:
        raise InputError("config requires a seed (or pass --seed)")
    field = field_from_name(cfg.get("field", "identity"), domain.dimension)
    return SimulationConfig(
        domain=domain,
        field=field,
        initial_law=_parse_initial_law(cfg),
        horizon=float(cfg[horizon_key]),
        dt=float(cfg["dt"]),
        n_paths=int(cfg["n_paths"]),
        seed=int(seed),
        drift_mode=cfg.get("drift_mode", "finite-difference"),
    )


def _parse_bsde_problem(cfg: dict) -> BsdeProblem:
    prob = cfg.get("problem")
    if not isinstance(prob, dict):
        raise InputError("config requires a 'problem' object")
    return problem_from_names(
        driver=prob["driver"],
        terminal=prob["terminal"],
        horizon=float(cfg["horizon"]),
        lipschitz=prob.get("lipschitz"),
    )


def _parse_pde_problem(cfg: dict) -> tuple[BsdeProblem, dict]:
    pde = cfg.get("pde")
    if not isinstance(pde, dict):
        raise InputError("config requires a 'pde' object")
    fn, default_lip, z_dep = driver_from_name(pde["driver"])
    lip = float(pde.get("lipschitz", default_lip))
    terminal = terminal_from_name(pde["terminal"])
    problem = problem_from_pde(
        pde_driver=fn,
        terminal=terminal,
        time=float(pde["time"]),
        lipschitz=lip,
        z_dependent=z_dep,
        driver_name=pde["driver"],
    )
    descriptor = {
        "driver": pde["driver"],
        "terminal": pde["terminal"],
        "time": float(pde["time"]),
        "field": cfg.get("field", "identity"),
        "domain": cfg.get("domain"),
    }
    return problem, descriptor


# -- output helpers ----------------------------------------------------------------


def _dump_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _write_csv(path: Path, header: list[str], rows) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(repr(v) if isinstance(v, float) else str(v) for v in row))
    path.write_text("\n".join(lines) + "\n")


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(out_dir: Path, config: dict, command: str, started: float,
                    diagnostics: dict) -> None:
    files = {}
    for p in sorted(out_dir.iterdir()):
        if p.name in ("manifest.json",) or p.is_dir():
            continue
        files[p.name] = _sha256(p)
    manifest = {
        "command": command,
        "config": config,
        "version": __version__,
        "wall_clock_seconds": time.time() - started,
        "diagnostics": diagnostics,
        "files": files,
    }
    fd, tmp = tempfile.mkstemp(dir=out_dir, prefix=".manifest-", suffix=".json")
    try:
        with os.fdopen(fd, "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")
        os.replace(tmp, out_dir / "manifest.json")
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _solution_csv_rows(solution, times):
    rows = []
    for k, t in enumerate(times):
        z = float(solution.mean_abs_z[k, 0]) if k < len(solution.mean_abs_z) else 0.0
        rows.append((float(t), float(solution.mean_y[k, 0]), z))
    return rows


# -- commands ----------------------------------------------------------------------


def _cmd_simulate(cfg, out_dir, seed, threads, fmt):
    domain = _parse_domain(cfg)
    sim = _sim_config(cfg, domain, seed)
    bundle = simulate(sim, threads=threads)
    if cfg.get("save_bundle", True):
        write_bundle(bundle, out_dir / "bundle.rbdf")
    report = {
        "command": "simulate",
        "config": sim.describe(),
        "n_paths": bundle.n_paths,
        "n_steps": bundle.n_steps,
        "reflection_fraction": float(bundle.reflection_flags.mean()),
        "terminal_mean": bundle.states[:, -1, :].mean(axis=0).tolist(),
    }
    _dump_json(report, out_dir / "report.json")
    return report, EXIT_OK, {}


def _cmd_solve_bsde(cfg, out_dir, seed, threads, fmt):
    domain = _parse_domain(cfg)
    sim = _sim_config(cfg, domain, seed)
    problem = _parse_bsde_problem(cfg)
    basis = _parse_basis(cfg, domain)
    bundle = simulate(sim, threads=threads)
    mode = cfg.get("mode", "picard")
    if mode == "picard":
        solution = solve_picard(
            problem, bundle, basis=basis,
            tol=float(cfg.get("tol", 1e-4)), max_iter=int(cfg.get("max_iter", 25)),
            threads=threads,
        )
    elif mode == "backward-euler":
        solution = solve_backward_euler(problem, bundle, basis=basis, threads=threads)
    else:
        raise InputError(f"unknown solver mode {mode!r}")
    report = {
        "command": "solve-bsde",
        "config": sim.describe(),
        "problem": problem.describe(),
        "solution": solution.to_json_dict(),
    }
    _dump_json(report, out_dir / "report.json")
    if fmt == "csv":
        _write_csv(out_dir / "steps.csv", ["t", "mean_y", "mean_abs_z"],
                   _solution_csv_rows(solution, bundle.times))
        _write_csv(out_dir / "trace.csv", ["window", "iteration", "delta"],
                   [(w, i, float(d)) for w, win in enumerate(solution.trace)
                    for i, d in enumerate(win, start=1)])
    code = EXIT_OK if solution.converged else EXIT_NON_CONVERGENCE
    return report, code, {"converged": solution.converged}


def _cmd_solve_pde_stochastic(cfg, out_dir, seed, threads, fmt):
    domain = _parse_domain(cfg)
    problem, descriptor = _parse_pde_problem(cfg)
    sim = _sim_config({**cfg, "horizon": descriptor["time"]}, domain, seed)
    basis = _parse_basis(cfg, domain)
    result = stochastic_solution(
        problem, sim, basis=basis,
        tol=float(cfg.get("tol", 1e-4)), max_iter=int(cfg.get("max_iter", 25)),
        threads=threads,
    )
    report = {
        "command": "solve-pde-stochastic",
        "pde": descriptor,
        "result": result.to_json_dict(),
    }
    _dump_json(report, out_dir / "report.json")
    if fmt == "csv":
        times = np.minimum(np.arange(result.solution.mean_y.shape[0]) * sim.dt, sim.horizon)
        _write_csv(out_dir / "steps.csv", ["t", "mean_y", "mean_abs_z"],
                   _solution_csv_rows(result.solution, times))
    code = EXIT_OK if result.solution.converged else EXIT_NON_CONVERGENCE
    return report, code, {"converged": result.solution.converged}


def _run_fd(cfg, descriptor, domain):
    fd_cfg = cfg.get("fd", {})
    field = field_from_name(cfg.get("field", "identity"), domain.dimension)
    fn, _, _ = driver_from_name(descriptor["driver"])
    terminal = terminal_from_name(descriptor["terminal"])
    driver = None if descriptor["driver"] == "zero" else fn
    t_end = float(fd_cfg.get("time", descriptor["time"]))
    solution = solve_fd(
        domain, field, driver, terminal.phi,
        horizon=t_end,
        n_grid=int(fd_cfg.get("n_grid", 201)),
        dt_fd=float(fd_cfg.get("dt", 1e-5)),
        snapshot_times=fd_cfg.get("snapshot_times"),
        mode=fd_cfg.get("mode", "explicit"),
    )
    return solution, t_end


def _cmd_solve_pde_fd(cfg, out_dir, seed, threads, fmt):
    domain = _parse_domain(cfg)
    _, descriptor = _parse_pde_problem(cfg)
    solution, t_end = _run_fd(cfg, descriptor, domain)
    mass = mass_check(solution) if descriptor["driver"] == "zero" else None
    report = {
        "command": "solve-pde-fd",
        "pde": descriptor,
        "scheme": solution.scheme,
        "times": list(solution.times),
        "final_min": float(solution.snapshots[-1].min()),
        "final_max": float(solution.snapshots[-1].max()),
        "mass_check": mass,
    }
    _dump_json(report, out_dir / "report.json")
    if fmt == "csv":
        rows = []
        for t, snap in zip(solution.times, solution.snapshots):
            if len(solution.axes) == 1:
                for x, u in zip(solution.axes[0], snap):
                    rows.append((float(t), float(x), float(u)))
            else:
                for i, x1 in enumerate(solution.axes[0]):
                    for j, x2 in enumerate(solution.axes[1]):
                        rows.append((float(t), float(x1), float(x2), float(snap[i, j])))
        header = ["t", "x", "u"] if len(solution.axes) == 1 else ["t", "x1", "x2", "u"]
        _write_csv(out_dir / "solution.csv", header, rows)
    return report, EXIT_OK, {}


def integrate_against_law(solution, law: InitialLaw, t: float) -> float:
    """Quadrature of the grid snapshot against the initial law's density."""
    snap = solution.snapshot(t)
    axes = solution.axes
    if law.kind == "point":
        return fd_evaluate(solution, t, law.point)
    if law.kind == "uniform":
        volume = float(np.prod([ax[-1] - ax[0] for ax in axes]))
        return trapezoid_integral(solution, snap) / volume
    densities = []
    for axis, (xs, ps) in enumerate(law.tables):
        densities.append(np.interp(axes[axis], xs, ps, left=0.0, right=0.0))
    if len(axes) == 1:
        return trapezoid_integral(solution, snap * densities[0])
    return trapezoid_integral(solution, snap * np.outer(densities[0], densities[1]))


def compare_reports(stochastic_result, fd_solution, fd_descriptor: dict,
                    stochastic_descriptor: dict, law: InitialLaw, tolerance: float,
                    fd_error_estimate: float | None = None) -> dict:
    """Pair the probabilistic and deterministic solutions of one problem."""
    mismatches = {}
    for key in ("driver", "terminal", "time", "field", "domain"):
        if fd_descriptor.get(key) != stochastic_descriptor.get(key):
            mismatches[key] = {
                "stochastic": stochastic_descriptor.get(key),
                "fd": fd_descriptor.get(key),
            }
    if mismatches:
        raise InputError(f"problem descriptors do not match: {json.dumps(mismatches, sort_keys=True)}")
    t = float(fd_descriptor["time"])
    u_stoch = float(stochastic_result.value[0])
    se = float(stochastic_result.standard_error[0])
    u_fd = integrate_against_law(fd_solution, law, t)
    diff = u_stoch - u_fd
    return {
        "u_stochastic": u_stoch,
        "u_fd": u_fd,
        "difference": diff,
        "tolerance": tolerance,
        "pass": bool(abs(diff) <= tolerance),
        "error_budget": {
            "mc_standard_error": se,
            "fd_error_estimate": fd_error_estimate,
            "dt_bias_note": (
                "path-discretization bias is O(dt) in the driver quadrature and "
                "O(sqrt(dt)) at the reflecting boundary; not included in the tolerance"
            ),
        },
    }


def _cmd_compare(cfg, out_dir, seed, threads, fmt):
    domain = _parse_domain(cfg)
    problem, descriptor = _parse_pde_problem(cfg)
    fd_descriptor = dict(descriptor)
    fd_cfg = cfg.get("fd", {})
    if "time" in fd_cfg:
        fd_descriptor["time"] = float(fd_cfg["time"])
    sim = _sim_config({**cfg, "horizon": descriptor["time"]}, domain, seed)
    result = stochastic_solution(
        problem, sim, basis=_parse_basis(cfg, domain),
        tol=float(cfg.get("tol", 1e-4)), max_iter=int(cfg.get("max_iter", 25)),
        threads=threads,
    )
    fd_solution, _ = _run_fd(cfg, fd_descriptor, domain)
    tolerance = float(cfg.get("compare", {}).get("tolerance", 0.01))
    comparison = compare_reports(
        result, fd_solution, fd_descriptor, descriptor, sim.initial_law, tolerance
    )
    report = {
        "command": "compare",
        "pde": descriptor,
        "comparison": comparison,
        "stochastic": result.to_json_dict(),
    }
    _dump_json(report, out_dir / "report.json")
    code = EXIT_OK if comparison["pass"] else EXIT_NUMERICAL
    return report, code, {"pass": comparison["pass"]}


def _cmd_verify_resolvent(cfg, out_dir, seed, threads, fmt):
    domain = _parse_domain(cfg)
    res = cfg.get("resolvent")
    if not isinstance(res, dict):
        raise InputError("config requires a 'resolvent' object")
    sim = _sim_config(cfg, domain, seed)
    names = list(res.get("functions", []))
    alphas = [float(a) for a in res.get("alphas", [])]
    functions = tuple(terminal_from_name(n).phi for n in names)
    check = res.get("check", "product")
    if check == "potential":
        est = estimate_potential(
            functions[0], alphas[0], sim,
            f_bound=res.get("f_bound"), bias_tolerance=res.get("bias_tolerance"),
            threads=threads,
        )
        report = {"command": "verify-resolvent", "check": "potential", **est.to_dict()}
        code = EXIT_OK
    elif check == "nested":
        spec = NestedPotentialSpec(functions=functions, alphas=tuple(alphas), names=tuple(names))
        est = nested_potential(
            spec, sim, grid_points=int(res.get("grid_points", 33)),
            inner_paths=int(res.get("inner_paths", 5000)), threads=threads,
        )
        report = {"command": "verify-resolvent", "check": "nested", **est.to_dict()}
        code = EXIT_OK
    elif check == "product":
        spec = NestedPotentialSpec(functions=functions, alphas=tuple(alphas), names=tuple(names))
        ver = verify_product_formula(
            spec, sim, grid_points=int(res.get("grid_points", 33)),
            inner_paths=int(res.get("inner_paths", 5000)), threads=threads,
        )
        report = {"command": "verify-resolvent", **ver.to_dict()}
        code = EXIT_OK if ver.passed else EXIT_NUMERICAL
    elif check == "martingale":
        rep = potential_martingale_check(
            functions[0], alphas[0], sim,
            grid_points=int(res.get("grid_points", 33)),
            inner_paths=int(res.get("inner_paths", 5000)), threads=threads,
        )
        report = {"command": "verify-resolvent", "check": "martingale", **rep.to_dict()}
        code = EXIT_OK if rep.max_abs_t < 4.0 else EXIT_NUMERICAL
    else:
        raise InputError(f"unknown resolvent check {check!r}")
    _dump_json(report, out_dir / "report.json")
    return report, code, {}


_COMMANDS = {
    "simulate": _cmd_simulate,
    "solve-bsde": _cmd_solve_bsde,
    "solve-pde-stochastic": _cmd_solve_pde_stochastic,
    "solve-pde-fd": _cmd_solve_pde_fd,
    "verify-resolvent": _cmd_verify_resolvent,
    "compare": _cmd_compare,
}


def run(command: str, config: dict, out_dir, seed: int | None = None,
        threads: int = 1, fmt: str = "json") -> int:
    """Execute one pipeline; returns the process exit code."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    started = time.time()
    try:
        handler = _COMMANDS[command]
    except KeyError:
        raise InputError(f"unknown command {command!r}") from None
    try:
        _, code, diagnostics = handler(config, out_dir, seed, threads, fmt)
    except InputError as exc:
        _dump_json({"error": {"type": "validation", "message": str(exc)}},
                   out_dir / "error.json")
        print(f"error: {exc}", file=sys.stderr)
        _write_manifest(out_dir, config, command, started, {"failed": True})
        return EXIT_VALIDATION
    except NumericalError as exc:
        _dump_json({"error": {"type": "numerical", "message": str(exc)}},
                   out_dir / "error.json")
        print(f"error: {exc}", file=sys.stderr)
        _write_manifest(out_dir, config, command, started, {"failed": True})
        return EXIT_NUMERICAL
    _write_manifest(out_dir, config, command, started, diagnostics)
    return code


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="bsdelab",
        description=(
            "Reflecting-diffusion Monte Carlo, regression-based BSDE solving, and "
            "finite-difference cross-checks for semilinear Neumann problems."
        ),
    )
    parser.add_argument("command", choices=sorted(_COMMANDS))
    parser.add_argument("--config", required=True, help="path to the JSON run config")
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--threads", type=int, default=1)
    parser.add_argument("--format", choices=["json", "csv"], default="json", dest="fmt")
    args = parser.parse_args(argv)
    try:
        config = json.loads(Path(args.config).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: cannot read config: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    try:
        return run(args.command, config, args.out, seed=args.seed,
                   threads=args.threads, fmt=args.fmt)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
