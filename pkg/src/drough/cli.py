"""Command line entry point: ``drough <command> [--config FILE | --preset NAME] [--out DIR]``.

Commands: ``gen-driver``, ``validate``, ``solve``, ``converge``, ``stability``.
A config is one JSON document; missing keys fall back to :data:`DEFAULTS`.
Exit codes: 0 success, 1 a check failed, 2 usage or I/O error.
"""
from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .controlled import constant_history, linear_history
from .driver import (DriverError, atomic_write_bytes, chen_residual, chen_tolerance, driver_from_fine_path,
                     driver_to_bytes, enhance_deterministic, load_driver, reconstruct_area, sample_fbm_path)
from .scale import Grid, GridError, SpectralVector, interpolation_inequality_check, norm_array
from .semigroup import NonlinearitySpec, SemigroupSpec, smoothing_constants, verify_H4_product_bound
from .solver import (ModelSpec, SolverError, delay_convergence_experiment, fixed_point_residual, self_derivative_defect,
                     solve, stability_experiment)

log = logging.getLogger("drough")

EXIT_OK, EXIT_CHECK, EXIT_USAGE = 0, 1, 2

DEFAULTS = {
    "grid": {"T": 1.0, "n_steps": 128, "r": 0.25},
    "driver": {"flavor": "fbm_symmetric", "hurst": 0.45, "d": 1, "subgrid_factor": 4, "seed": 0,
               "path": None, "deterministic": "sin"},
    "model": {
        "semigroup": {"diffusivity": 1.0},
        "F": {"kind": "affine", "a": [-0.5], "b": [0.0]},
        "G": {"kind": "frac_laplacian_affine", "a": [0.5], "b": [0.5], "sigma": 0.24},
        "theta": 0.0, "alpha": 0.4, "alpha_tilde": 0.35, "alpha_bar": 0.35, "alpha_hat": 0.35,
    },
    "initial": {"K": 16, "modes": {"0": 1.0, "1": 0.5, "-1": 0.5, "2": 0.25, "-2": 0.25},
                "kind": "constant", "slope": 0.0},
    "validate": {"sigmas": [0.0, 0.25, 0.5, 0.75, 1.0], "interpolation_samples": 32, "h4_samples": 16,
                 "inject_defect": None},
    "converge": {"r_list": [0.2, 0.1, 0.05, 0.025], "seeds": 16, "n_steps": 640, "subgrid_factor": 2,
                 "flavor": "bm_stratonovich", "history": "constant"},
    "stability": {"magnitudes": [1e-4, 1e-3, 1e-2], "kinds": ["initial", "driver"]},
}

PRESETS = {
    # heat equation with noise (-Lap)^s (y_t + y_{t-r}) against a fractional Brownian driver
    "heat-fbm": {"driver": {"flavor": "fbm_symmetric", "hurst": 0.45},
                 "model": {"F": {"kind": "smooth_bounded", "a": [1.0], "b": [0.5], "cutoff": 8, "scale": 0.5},
                           "G": {"kind": "frac_laplacian_affine", "a": [0.5], "b": [0.5], "sigma": 0.24}}},
    # same equation with a Brownian driver and geometric areas
    "heat-brownian": {"driver": {"flavor": "bm_stratonovich", "hurst": 0.5},
                      "model": {"F": {"kind": "smooth_bounded", "a": [1.0], "b": [0.5], "cutoff": 8,
                                      "scale": 0.5},
                                "G": {"kind": "frac_laplacian_affine", "a": [0.5], "b": [0.5], "sigma": 0.24}}},
    # delayed noise (-Lap)^s y_{t-r} dW against the undelayed (-Lap)^s z_t dW
    "delayed-noise": {"grid": {"T": 1.0, "n_steps": 640, "r": 0.2},
                      "driver": {"flavor": "bm_stratonovich", "hurst": 0.5, "subgrid_factor": 2},
                      "model": {"F": {"kind": "affine", "a": [-0.5], "b": [0.0]},
                                "G": {"kind": "frac_laplacian_affine", "a": [1.0], "b": [0.0], "sigma": 0.18},
                                "alpha": 0.35, "alpha_tilde": 0.3, "alpha_bar": 0.3, "alpha_hat": 0.3}},
    # scalar ODE y' = -y, exact solution exp(-t)
    "ode": {"grid": {"T": 1.0, "n_steps": 512, "r": 0.25},
            "driver": {"flavor": "deterministic", "deterministic": "linear", "subgrid_factor": 1},
            "model": {"semigroup": {"diffusivity": 0.0},
                      "F": {"kind": "affine", "a": [-1.0], "b": [0.0]},
                      "G": {"kind": "affine", "a": [0.0], "b": [0.0]}},
            "initial": {"K": 0, "modes": {"0": 1.0}}},
}


class UsageError(Exception):
    """Bad command line, config or file access; maps to exit code 2."""


# ---------------------------------------------------------------------------
# config


def deep_merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for key, val in over.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict) and key not in ("modes",):
            out[key] = deep_merge(out[key], val)
        else:
            out[key] = copy.deepcopy(val)
    return out


def resolve_config(raw: dict) -> dict:
    """Defaults, then the named preset (if any), then the document itself."""
    raw = dict(raw)
    preset = raw.pop("preset", None)
    cfg = DEFAULTS
    if preset is not None:
        if preset not in PRESETS:
            raise UsageError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        cfg = deep_merge(cfg, PRESETS[preset])
    unknown = set(raw) - set(DEFAULTS)
    if unknown:
        raise UsageError(f"unknown config sections: {sorted(unknown)}")
    return deep_merge(cfg, raw)


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(canonical_json(cfg).encode()).hexdigest()


def load_config(path: str | None, preset: str | None) -> dict:
    raw = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except OSError as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise UsageError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise UsageError("config must be a JSON object")
    if preset is not None:
        raw = {**raw, "preset": preset}
    return resolve_config(raw)


# ---------------------------------------------------------------------------
# builders


def build_grid(cfg: dict, r: float | None = None, n_steps: int | None = None) -> Grid:
    g = cfg["grid"]
    return Grid.with_delay(float(g["T"]), int(n_steps or g["n_steps"]), float(g["r"] if r is None else r))


def _deterministic_path(name: str, d: int):
    if name == "linear":
        return lambda t: np.repeat(t[:, None], d, axis=1)
    if name == "sin":
        return lambda t: np.stack([np.sin((i + 1) * t) for i in range(d)], axis=1)
    raise UsageError(f"unknown deterministic path {name!r}")


def _hurst(dc: dict) -> float:
    return 0.5 if dc["flavor"].startswith("bm_") else float(dc["hurst"])


def fine_path(cfg: dict, seed: int, grid: Grid) -> np.ndarray:
    dc = cfg["driver"]
    fine_grid = grid.refine(int(dc["subgrid_factor"]))
    if dc["flavor"] == "deterministic":
        return _deterministic_path(dc["deterministic"], int(dc["d"]))(fine_grid.times)
    return sample_fbm_path(seed, _hurst(dc), fine_grid, int(dc["d"]))


def build_driver(cfg: dict, seed: int, grid: Grid | None = None):
    dc = cfg["driver"]
    if dc.get("path"):
        try:
            drv = load_driver(dc["path"])
        except FileNotFoundError as exc:
            raise UsageError(f"driver file not found: {dc['path']}") from exc
        except OSError as exc:
            raise UsageError(f"cannot read driver file {dc['path']}: {exc}") from exc
        return drv
    grid = build_grid(cfg) if grid is None else grid
    f = int(dc["subgrid_factor"])
    if dc["flavor"] == "deterministic":
        return enhance_deterministic(_deterministic_path(dc["deterministic"], int(dc["d"])), grid, f)
    return driver_from_fine_path(fine_path(cfg, seed, grid), grid, f, dc["flavor"], seed)


def _nonlinearity(spec: dict, d: int | None = None) -> NonlinearitySpec:
    spec = dict(spec)
    kind = spec.pop("kind")
    if d is not None and len(spec.get("a", [1.0])) != d:
        # one weight given for a d-dimensional driver: repeat it per component
        if len(spec.get("a", [])) == 1:
            spec["a"] = list(spec["a"]) * d
            spec["b"] = list(spec.get("b", [0.0])) * d
        else:
            raise UsageError(f"G needs {d} components, got {len(spec['a'])}")
    return NonlinearitySpec(kind, **{k: tuple(v) if isinstance(v, list) else v for k, v in spec.items()})


def build_model(cfg: dict, grid: Grid) -> ModelSpec:
    mc = cfg["model"]
    return ModelSpec(
        semigroup=SemigroupSpec(**mc["semigroup"]),
        F=_nonlinearity(mc["F"]),
        G=_nonlinearity(mc["G"], int(cfg["driver"]["d"])),
        r=grid.r, T=grid.T,
        theta=float(mc["theta"]), alpha=float(mc["alpha"]), alpha_tilde=float(mc["alpha_tilde"]),
        alpha_bar=float(mc["alpha_bar"]), alpha_hat=float(mc["alpha_hat"]),
    )


def initial_coeffs(cfg: dict) -> np.ndarray:
    ic = cfg["initial"]
    K = int(ic["K"])
    c = np.zeros(2 * K + 1, dtype=complex)
    for k, v in ic["modes"].items():
        k = int(k)
        if abs(k) > K:
            raise UsageError(f"initial mode {k} exceeds K={K}")
        c[K + k] = complex(v) if not isinstance(v, list) else complex(*v)
    return c


def build_history(cfg: dict, driver):
    phi0 = initial_coeffs(cfg)
    ic = cfg["initial"]
    theta = float(cfg["model"]["theta"])
    if ic["kind"] == "constant":
        return constant_history(driver, phi0, theta)
    if ic["kind"] == "linear":
        slope = float(ic["slope"]) * np.broadcast_to(phi0, (driver.d,) + phi0.shape)
        return linear_history(driver, phi0, slope, theta)
    raise UsageError(f"unknown history kind {ic['kind']!r}")


# ---------------------------------------------------------------------------
# output


def fmt(x) -> str:
    return format(float(x), ".17g")


def provenance(cfg: dict, seed) -> dict:
    return {"config_hash": config_hash(cfg), "seed": seed, "version": __version__}


def csv_text(header: list[str], rows, prov: dict) -> str:
    """CSV with ``#`` provenance lines, a header row and 17-digit floats."""
    lines = [f"# {k}={prov[k]}" for k in sorted(prov)]
    lines.append(",".join(header))
    for row in rows:
        lines.append(",".join(v if isinstance(v, str) else fmt(v) for v in row))
    return "\n".join(lines) + "\n"


def json_text(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def write_text(out: Path, name: str, text: str) -> Path:
    path = out / name
    try:
        out.mkdir(parents=True, exist_ok=True)
        atomic_write_bytes(path, text.encode())
    except OSError as exc:
        raise UsageError(f"cannot write {path}: {exc}") from exc
    return path


# ---------------------------------------------------------------------------
# commands


def _seed(cfg: dict, args) -> int:
    return int(args.seed) if args.seed is not None else int(cfg["driver"]["seed"])


def cmd_gen_driver(cfg: dict, args) -> int:
    seed = _seed(cfg, args)
    drv = build_driver({**cfg, "driver": {**cfg["driver"], "path": None}}, seed)
    data = driver_to_bytes(drv)
    out = Path(args.out)
    name = f"driver-{drv.flavor}-{seed}.drpd"
    try:
        out.mkdir(parents=True, exist_ok=True)
        atomic_write_bytes(out / name, data)
    except OSError as exc:
        raise UsageError(f"cannot write {out / name}: {exc}") from exc
    res, res_d = chen_residual(drv)
    tol = chen_tolerance(drv)
    summary = {**provenance(cfg, seed), "file": name, "sha256": hashlib.sha256(data).hexdigest(),
               "chen_residual": res, "chen_residual_delayed": res_d, "chen_tolerance": tol,
               "flavor": drv.flavor, "n_points": drv.grid.n_points, "d": drv.d}
    write_text(out, f"driver-{drv.flavor}-{seed}.json", json_text(summary))
    print(f"chen residual {res:.3e}, delayed {res_d:.3e} (tolerance {tol:.1e})")
    return EXIT_OK if max(res, res_d) <= tol else EXIT_CHECK


def validation_checks(cfg: dict, seed: int) -> dict:
    """Named checks with a ``passed`` flag each, plus the smoothing-constant table."""
    vc = cfg["validate"]
    drv = build_driver(cfg, seed)
    if vc.get("inject_defect"):
        inj = vc["inject_defect"]
        drv = drv.with_cell_perturbation(int(inj["cell"]), float(inj["amount"]), bool(inj.get("delayed", False)))
    checks = {}
    res, res_d = chen_residual(drv)
    tol = chen_tolerance(drv)
    checks["chen_area"] = {"residual": res, "tolerance": tol, "passed": res <= tol}
    checks["chen_delayed_area"] = {"residual": res_d, "tolerance": tol, "passed": res_d <= tol}
    n, m = drv.grid.n_points, drv.m
    pairs = [(m, n - 1), (m + (n - m) // 3, n - 1), (m, m + (n - m) // 2)]
    split = 0.0
    for s, t in pairs:
        split = max(split, float(np.abs(reconstruct_area(drv, s, t) - drv.area(s, t)).max()),
                    float(np.abs(reconstruct_area(drv, s, t, True) - drv.delayed_area(s, t)).max()))
    split_tol = 1e-13 * (1.0 + float(np.max(np.abs(drv.X))) ** 2)
    checks["area_split_invariance"] = {"residual": split, "tolerance": split_tol, "passed": split <= split_tol}
    sg = SemigroupSpec(**cfg["model"]["semigroup"])
    K = max(int(cfg["initial"]["K"]), 1)
    t_grid = drv.grid.dt * np.arange(1, drv.grid.n_steps + 1)
    table = []
    for sigma in vc["sigmas"]:
        c0, c1 = smoothing_constants(sg, float(cfg["model"]["theta"]), float(sigma), K, t_grid)
        table.append({"sigma": float(sigma), "smoothing": c0, "continuity": c1})
    checks["smoothing_constants"] = {"passed": all(np.isfinite([r["smoothing"], r["continuity"]]).all()
                                                   for r in table)}
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(int(vc["interpolation_samples"])):
        v = SpectralVector.random(rng, K, decay=1.0)
        th = np.sort(rng.uniform(-1.0, 1.0, 3))
        worst = max(worst, interpolation_inequality_check(v, *th))
    checks["interpolation_inequality"] = {"worst_ratio": worst, "passed": worst <= 1.0 + 1e-12}
    model = build_model(cfg, drv.grid)
    lip = verify_H4_product_bound(model.G, int(vc["h4_samples"]), model.theta, model.alpha, K, seed)
    checks["product_lipschitz"] = {"constant": lip, "passed": bool(np.isfinite(lip))}
    for c in checks.values():
        c["passed"] = bool(c["passed"])
    return {"checks": checks, "smoothing_table": table}


def cmd_validate(cfg: dict, args) -> int:
    seed = _seed(cfg, args)
    report = validation_checks(cfg, seed)
    failed = sorted(k for k, v in report["checks"].items() if not v["passed"])
    report.update(provenance(cfg, seed))
    report["failed"] = failed
    write_text(Path(args.out), "validate.json", json_text(report))
    for name in failed:
        print(f"FAILED {name}: {report['checks'][name]}", file=sys.stderr)
    if not failed:
        print("all checks passed")
    return EXIT_CHECK if failed else EXIT_OK


def cmd_solve(cfg: dict, args) -> int:
    seed = _seed(cfg, args)
    drv = build_driver(cfg, seed)
    model = build_model(cfg, drv.grid)
    phi = build_history(cfg, drv)
    rep = solve(model, drv, phi)
    y = rep.y
    th, a = model.theta, model.alpha
    n1, n2 = norm_array(y, th), norm_array(y, th - a)
    iters = np.zeros(rep.solution.L, dtype=int)
    g = drv.grid
    for st in rep.steps:
        lo = int(round(st.t_start / g.dt)) + 1
        hi = int(round(st.t_end / g.dt)) + 1
        iters[lo:hi] = st.picard_iterations
    prov = provenance(cfg, seed)
    rows = [(fmt(t), fmt(u), fmt(v), str(k)) for t, u, v, k in zip(rep.times, n1, n2, iters)]
    write_text(Path(args.out), "solve.csv",
               csv_text(["t", "norm_theta", "norm_theta_minus_alpha", "picard_iterations"], rows, prov))
    summary = {**prov,
               "steps": [{"t_start": s.t_start, "t_end": s.t_end, "picard_iterations": s.picard_iterations,
                          "contraction_ratio": s.contraction_ratio} for s in rep.steps],
               "exponents": model.exponents(), "constraint_violations": model.check(),
               "final_norm_theta": float(n1[-1]), "max_norm_theta": float(n1.max()),
               "fixed_point_residual": fixed_point_residual(rep),
               "self_derivative_defect": self_derivative_defect(rep),
               "macro_sup": rep.macro_sup, "envelope_rate": rep.envelope_rate}
    write_text(Path(args.out), "solve.json", json_text(summary))
    print(f"solved {len(rep.steps)} windows; |y_T| = {n1[-1]:.12g}")
    return EXIT_OK


def _seed_list(cfg: dict, args) -> list[int]:
    seeds = cfg["converge"]["seeds"]
    count = seeds if isinstance(seeds, int) else len(seeds)
    if args.seed is not None:
        return list(range(int(args.seed), int(args.seed) + count))
    return list(range(count)) if isinstance(seeds, int) else [int(s) for s in seeds]


def cmd_converge(cfg: dict, args) -> int:
    cc = cfg["converge"]
    seeds = _seed_list(cfg, args)
    r_list = [float(r) for r in cc["r_list"]]
    T = float(cfg["grid"]["T"])
    n_steps, f = int(cc["n_steps"]), int(cc["subgrid_factor"])
    conv_cfg = {**cfg, "driver": {**cfg["driver"], "flavor": cc["flavor"], "subgrid_factor": f}}
    top = Grid.with_delay(T, n_steps, max(r_list))
    fines = {s: fine_path(conv_cfg, s, top) for s in seeds}
    template = build_model(conv_cfg, top)
    phi0 = initial_coeffs(cfg)
    threads = max(1, int(args.threads))
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            table = delay_convergence_experiment(template, r_list, seeds, fines, n_steps, f, cc["flavor"], phi0,
                                                 map_fn=pool.map, history=cc["history"])
    else:
        table = delay_convergence_experiment(template, r_list, seeds, fines, n_steps, f, cc["flavor"], phi0,
                                             history=cc["history"])
    prov = provenance(cfg, seeds)
    rows = [(r, d, h, table.slope) for r, d, h in zip(table.r_values, table.median_distance, table.median_h)]
    write_text(Path(args.out), "converge.csv", csv_text(["r", "median_rho", "median_h", "slope"], rows, prov))
    cells = [(row.r, str(row.seed), row.distance, row.h, str(int(row.ok))) for row in table.rows]
    write_text(Path(args.out), "converge_cells.csv", csv_text(["r", "seed", "rho", "h", "ok"], cells, prov))
    failed = [row for row in table.rows if not row.ok]
    print(f"slope {table.slope:.4g}; {len(failed)} failed cells")
    return EXIT_CHECK if failed else EXIT_OK


def cmd_stability(cfg: dict, args) -> int:
    seed = _seed(cfg, args)
    sc = cfg["stability"]
    grid = build_grid(cfg)
    dc = cfg["driver"]
    if dc["flavor"] == "deterministic":
        raise UsageError("stability runs need a sampled driver flavor")
    fine = fine_path(cfg, seed, grid)
    model = build_model(cfg, grid)
    rows = []
    for kind in sc["kinds"]:
        for row in stability_experiment(model, fine, grid, int(dc["subgrid_factor"]), dc["flavor"],
                                        initial_coeffs(cfg), [float(x) for x in sc["magnitudes"]], kind, seed):
            rows.append((row.kind, row.magnitude, row.distance, row.U))
    write_text(Path(args.out), "stability.csv",
               csv_text(["kind", "magnitude", "rho", "U"], rows, provenance(cfg, seed)))
    print(f"{len(rows)} stability rows")
    return EXIT_OK


COMMANDS = {"gen-driver": cmd_gen_driver, "validate": cmd_validate, "solve": cmd_solve,
            "converge": cmd_converge, "stability": cmd_stability}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="drough", description="Delay rough PDE experiments")
    p.add_argument("--version", action="version", version=f"drough {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        c = sub.add_parser(name)
        src = c.add_mutually_exclusive_group()
        src.add_argument("--config", help="JSON config file")
        src.add_argument("--preset", choices=sorted(PRESETS), help="start from a shipped preset")
        c.add_argument("--out", default=".", help="output directory")
        c.add_argument("--seed", type=int, default=None, help="override the config seed")
        c.add_argument("--threads", type=int, default=1, help="worker threads for independent cells")
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("DROUGH_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    if args.seed is not None and not 0 <= args.seed < 2 ** 64:
        print("error: --seed must be an unsigned 64-bit integer", file=sys.stderr)
        return EXIT_USAGE
    try:
        cfg = load_config(args.config, args.preset)
        return COMMANDS[args.command](cfg, args)
    except (UsageError, DriverError, GridError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SolverError as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_CHECK


if __name__ == "__main__":
    sys.exit(main())
