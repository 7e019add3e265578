"""Command line front end: seeded runs, studies and artifact files.

Every command writes plain CSV outputs plus a manifest.json recording the
config snapshot, the root seed, sha256 hashes of all inputs and outputs,
per-phase timings and row counts, so a finished run can be audited or
reproduced file by file.  Exit codes: 0 done, 2 bad configuration or
input file, 3 numeric failure during a run.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import time
from dataclasses import replace

import numpy as np

from .enkf import KalmanConfig, run_enkf, substream
from .errors import (ConfigError, EllipticityError, ForwardEvalError,
                     MeshIdentificationError, MisalignmentError,
                     ParameterRangeError, SolverError)
from .model_error import (OnlineSchedule, estimate_constant, estimate_offline,
                          load_model, run_online, save_model)
from .prior import kl_expand
from .scenario import (PRESETS, HomogenizedForward, MultiscaleForward,
                       ScenarioConfig, _FILE_KEYS, _KEY_TO_FIELD, build_basis,
                       build_scenario_map, config_hash, generate_observations,
                       initial_ensemble, macro_mesh, noise_model,
                       prior_sampler, relative_field_error, truth_sigma)
from .studies import STUDY_KINDS, write_report

NUMERIC_ERRORS = (EllipticityError, MisalignmentError,
                  MeshIdentificationError, ParameterRangeError, SolverError,
                  ForwardEvalError, np.linalg.LinAlgError,
                  FloatingPointError, ZeroDivisionError)


# -- artifact helpers -------------------------------------------------------

def _sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(65536), b""):
            h.update(block)
    return h.hexdigest()


def _write_csv(path: str, header: tuple[str, ...], rows) -> int:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(header)
        n = 0
        for row in rows:
            wr.writerow([repr(float(v)) if isinstance(v, (float, np.floating))
                         else v for v in row])
            n += 1
    return n


def _config_snapshot(config: ScenarioConfig) -> dict:
    return {key: getattr(config, _KEY_TO_FIELD[key]) for key in _FILE_KEYS}


def _write_manifest(out_dir: str, command: str, config: ScenarioConfig | None,
                    inputs: dict[str, str], timings: dict[str, float],
                    files: dict[str, int], extra: dict | None = None) -> str:
    manifest = {
        "command": command,
        "config": _config_snapshot(config) if config else None,
        "config_hash": config_hash(config) if config else None,
        "seed": config.seed if config else None,
        "inputs": {name: _sha256(path) for name, path in inputs.items()},
        "timings": {k: round(v, 3) for k, v in timings.items()},
        "files": {name: {"rows": rows,
                         "sha256": _sha256(os.path.join(out_dir, name))}
                  for name, rows in files.items()},
    }
    manifest.update(extra or {})
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


_MAP_CACHE: dict[tuple, object] = {}


def _scenario_map(cfg: ScenarioConfig, n_cell: int = 128):
    """Homogenized tensor table, cached per parameter range and grid.

    The table depends only on the admissible range and the resolution,
    not on the run seed, so repeated in-process commands reuse it.
    """
    key = (round(cfg.sigma_minus, 12), round(cfg.sigma_plus, 12), n_cell)
    if key not in _MAP_CACHE:
        _MAP_CACHE[key] = build_scenario_map(cfg, n_cell=n_cell)
    return _MAP_CACHE[key]


def _resolve_config(args) -> tuple[ScenarioConfig, dict[str, str]]:
    """Config from --config or --preset plus CLI overrides; also returns
    the input files that went into it (for manifest hashing)."""
    inputs: dict[str, str] = {}
    if getattr(args, "config", None):
        cfg = load_config_file(args.config)
        inputs["config"] = args.config
    elif getattr(args, "preset", None):
        cfg = PRESETS[args.preset]
    else:
        raise ConfigError("provide --config FILE or --preset NAME")
    over = {}
    if getattr(args, "seed", None) is not None:
        over["seed"] = args.seed
    if getattr(args, "mode", None):
        over["mode"] = args.mode
    if getattr(args, "model_error", None):
        over["model_error"] = args.model_error
    if over:
        cfg = replace(cfg, **over)
    cfg.validate()
    return cfg, inputs


def load_config_file(path: str) -> ScenarioConfig:
    from .scenario import load_config
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    return load_config(path)


def _read_observations(path: str) -> np.ndarray:
    if not os.path.exists(path):
        raise ConfigError(f"observation file not found: {path}")
    with open(path, newline="") as fh:
        rd = csv.reader(fh)
        header = next(rd, None)
        if header is None or [c.strip() for c in header[:2]] != ["index", "value"]:
            raise ConfigError(f"{path} is not an index,value observation file")
        pairs = [(int(row[0]), float(row[1])) for row in rd]
    pairs.sort()
    if [i for i, _ in pairs] != list(range(len(pairs))):
        raise ConfigError(f"{path} has missing or duplicate indices")
    return np.array([v for _, v in pairs])


# -- commands ---------------------------------------------------------------

def cmd_generate(args) -> int:
    cfg, inputs = _resolve_config(args)
    os.makedirs(args.out, exist_ok=True)
    t0 = time.perf_counter()
    obs = generate_observations(cfg, gamma_override=args.gamma)
    t_solve = time.perf_counter() - t0
    n = _write_csv(os.path.join(args.out, "observations.csv"),
                   ("index", "value"), enumerate(obs.y))
    _write_manifest(args.out, "generate", cfg, inputs,
                    {"solve": t_solve},
                    {"observations.csv": n},
                    {"gamma_used": obs.gamma_used,
                     "noiseless": obs.gamma_used == 0.0})
    print(f"wrote {n} observations to {args.out}")
    return 0


def _error_model_for(cfg: ScenarioConfig, args, coarse, basis, mesh):
    if getattr(args, "model", None):
        return load_model(args.model)
    fine = MultiscaleForward(cfg, basis=basis, macro=mesh)
    return estimate_offline(prior_sampler(cfg), fine, coarse, cfg.N_E,
                            substream(cfg.seed, "model-error"))


def cmd_invert(args) -> int:
    cfg, inputs = _resolve_config(args)
    y = _read_observations(args.data)
    inputs["data"] = args.data
    if y.size != cfg.output_dim:
        raise ValueError(f"data has {y.size} entries, config expects "
                         f"{cfg.output_dim}")
    os.makedirs(args.out, exist_ok=True)
    timings: dict[str, float] = {}

    t0 = time.perf_counter()
    mesh = macro_mesh(cfg)
    basis = build_basis(cfg, mesh)
    hmap = _scenario_map(cfg)
    coarse = HomogenizedForward(cfg, basis, hmap, mesh=mesh)
    noise = noise_model(cfg)
    ens0 = initial_ensemble(cfg, cfg.seed)
    timings["setup"] = time.perf_counter() - t0

    kconf = KalmanConfig(n_iterations=cfg.N, mode=cfg.mode, seed=cfg.seed,
                         threads=args.threads)
    t0 = time.perf_counter()
    models_meta = None
    if cfg.model_error == "offline":
        model = _error_model_for(cfg, args, coarse, basis, mesh)
        timings["estimate"] = time.perf_counter() - t0
        t0 = time.perf_counter()
        res = run_enkf(replace(kconf, model_error=model), coarse, y, ens0,
                       noise)
    elif cfg.model_error == "online":
        fine = MultiscaleForward(cfg, basis=basis, macro=mesh)
        schedule = OnlineSchedule.uniform(cfg.levels,
                                          cfg.N_E // cfg.levels, cfg.N)
        out = run_online(kconf, schedule, fine, coarse, y, ens0, noise)
        res = out.result
        models_meta = [{"level": i, "n_samples": m.n_samples}
                       for i, m in enumerate(out.level_models)]
    else:
        res = run_enkf(kconf, coarse, y, ens0, noise)
    timings["invert"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    sigma = kl_expand(basis, res.mean)
    rel_err = relative_field_error(mesh, sigma, truth_sigma)
    files = {}
    files["sigma.csv"] = _write_csv(
        os.path.join(args.out, "sigma.csv"), ("x", "y", "value"),
        ((float(p[0]), float(p[1]), float(v))
         for p, v in zip(mesh.nodes, sigma)))
    files["diagnostics.csv"] = _write_csv(
        os.path.join(args.out, "diagnostics.csv"),
        ("iter", "misfit", "spread", "mean_norm"),
        ((int(r[0]), float(r[1]), float(r[2]), float(r[3]))
         for r in res.diagnostics))
    if args.save_ensemble:
        J, M = res.ensemble.particles.shape
        files["ensemble.csv"] = _write_csv(
            os.path.join(args.out, "ensemble.csv"),
            ("particle", "coeff", "value"),
            ((j, m, float(res.ensemble.particles[j, m]))
             for j in range(J) for m in range(M)))
    timings["write"] = time.perf_counter() - t0
    extra = {"relative_error": rel_err, "mode": cfg.mode,
             "model_error": cfg.model_error, "threads": args.threads}
    if models_meta:
        extra["online_levels"] = models_meta
    _write_manifest(args.out, "invert", cfg, inputs, timings, files, extra)
    print(f"relative field error {rel_err:.6f}; outputs in {args.out}")
    return 0


def cmd_study(args) -> int:
    os.makedirs(args.out, exist_ok=True)
    t0 = time.perf_counter()
    report = STUDY_KINDS[args.kind](seed=args.seed if args.seed is not None
                                    else 0)
    elapsed = time.perf_counter() - t0
    files = write_report(report, args.out)
    _write_manifest(args.out, "study", None, {}, {"study": elapsed}, files,
                    {"study": {"kind": report.kind, "passed": report.passed,
                               "summary": report.summary},
                     "seed": args.seed if args.seed is not None else 0})
    print(f"study {args.kind}: {'pass' if report.passed else 'FAIL'} "
          f"({elapsed:.1f}s)")
    return 0


def cmd_homog_table(args) -> int:
    cfg, inputs = _resolve_config(args)
    os.makedirs(args.out, exist_ok=True)
    t0 = time.perf_counter()
    hmap = build_scenario_map(cfg, n_cell=args.n_cell)
    elapsed = time.perf_counter() - t0
    n = hmap.export_csv(os.path.join(args.out, "homog_table.csv"))
    _write_manifest(args.out, "homog-table", cfg, inputs,
                    {"tabulate": elapsed}, {"homog_table.csv": n},
                    {"n_cell": args.n_cell})
    print(f"tabulated {n} parameter nodes in {args.out}")
    return 0


def cmd_model_error_estimate(args) -> int:
    cfg, inputs = _resolve_config(args)
    os.makedirs(args.out, exist_ok=True)
    t0 = time.perf_counter()
    mesh = macro_mesh(cfg)
    basis = build_basis(cfg, mesh)
    hmap = _scenario_map(cfg)
    coarse = HomogenizedForward(cfg, basis, hmap, mesh=mesh)
    fine = MultiscaleForward(cfg, basis=basis, macro=mesh)
    sampler = prior_sampler(cfg)
    setup = time.perf_counter() - t0

    t0 = time.perf_counter()
    c_e = estimate_constant(sampler, fine, coarse,
                            substream(cfg.seed, "model-error-pilot"),
                            cfg.epsilon, cfg.h)
    model = estimate_offline(sampler, fine, coarse, cfg.N_E,
                             substream(cfg.seed, "model-error"),
                             meta={"N_E": cfg.N_E, "eps": cfg.epsilon,
                                   "h": cfg.h, "C_E": c_e})
    estimate = time.perf_counter() - t0
    frag = save_model(model, args.out)
    _write_manifest(args.out, "model-error-estimate", cfg, inputs,
                    {"setup": setup, "estimate": estimate}, frag["files"],
                    {"model": frag["meta"]})
    print(f"estimated error model from {cfg.N_E} full solves "
          f"(pilot C_E {c_e:.3f}) in {args.out}")
    return 0


COMMANDS = {
    "generate": cmd_generate,
    "invert": cmd_invert,
    "study": cmd_study,
    "homog-table": cmd_homog_table,
    "model-error-estimate": cmd_model_error_estimate,
}


# -- argument plumbing ------------------------------------------------------

def _common_arguments(sp, out_default: str) -> None:
    sp.add_argument("--config", help="flat key=value run configuration")
    sp.add_argument("--preset", choices=sorted(PRESETS),
                    help="named built-in configuration")
    sp.add_argument("--seed", type=int, default=None,
                    help="override the config seed")
    sp.add_argument("--out", default=out_default, help="output directory")
    sp.add_argument("--threads", type=int, default=1,
                    help="forward evaluations run in this many threads")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="mskinv",
        description="Ensemble Kalman inversion for multiscale diffusion "
                    "with a homogenized surrogate")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="solve the truth problem and write "
                                        "noisy flux observations")
    _common_arguments(g, "generate-out")
    g.add_argument("--gamma", type=float, default=None,
                   help="noise level override for this draw (0 = noiseless)")

    i = sub.add_parser("invert", help="run the ensemble inversion on an "
                                      "observation file")
    _common_arguments(i, "invert-out")
    i.add_argument("--data", required=True, help="observations.csv to invert")
    i.add_argument("--mode", choices=("point", "bayes"),
                   help="override the config estimation mode")
    i.add_argument("--model-error", dest="model_error",
                   choices=("none", "offline", "online"),
                   help="override the config correction strategy")
    i.add_argument("--model", help="directory with a previously saved "
                                   "error model (offline runs)")
    i.add_argument("--save-ensemble", action="store_true",
                   help="also write the final particle block")

    s = sub.add_parser("study", help="run a named verification study")
    s.add_argument("--kind", required=True, choices=sorted(STUDY_KINDS))
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--out", default="study-out")

    h = sub.add_parser("homog-table", help="tabulate the effective tensor "
                                           "over the parameter range")
    _common_arguments(h, "homog-out")
    h.add_argument("--n-cell", type=int, default=128,
                   help="cell-problem mesh resolution")

    m = sub.add_parser("model-error-estimate",
                       help="fit and save the offline error model")
    _common_arguments(m, "model-out")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except NUMERIC_ERRORS as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except (ValueError, RuntimeError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
