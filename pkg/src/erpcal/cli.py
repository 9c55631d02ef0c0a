"""Command-line pipeline: each subcommand reads and writes artifact files.

Options can come from a TOML or JSON config file (a table per subcommand
plus an optional ``[global]`` table); command-line flags override the file.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import traceback
from dataclasses import asdict, fields, replace
from pathlib import Path

import numpy as np

from . import calibration as cal
from . import gp, io, mesh as meshmod, surrogate as sg, tissue
from .cell import PARAM_NAMES, PARAM_RANGES, EPFields
from .hmc import HMCConfig, PosteriorSamples
from .strip import StripConfig

log = logging.getLogger("erpcal")

DEFAULTS = {
    "global": {"seed": 0, "threads": 0, "out": "."},
    "eigen": {"mesh": None, "format": None, "unit_scale": 1.0, "k": 256},
    "design": {"mesh": None, "format": None, "unit_scale": 1.0, "eigen": "eigenbasis.npz",
               "n": 10, "exclusion_cm": 0.6, "candidate_fraction": 1.0},
    "surrogate": {"n": 100, "table": None, "precision": 1.0, "s1": 600.0, "s2": 300.0,
                  "n_s1_beats": 8, "cutoff": 280.0, "lhs_iterations": 2000, "workers": 1},
    "sensitivity": {"n": 500, "table": None, "precision": 1.0, "s1": 600.0, "s2": 300.0,
                    "n_s1_beats": 8, "lhs_iterations": 2000, "workers": 1},
    "truth": {"mesh": None, "format": None, "unit_scale": 1.0, "eigen": "eigenbasis.npz",
              "surrogate": "surrogate.txt", "rho": 20.0, "length_unit": 1.0, "kernel": "matern52",
              "k": 256},
    "observe": {"truth": "truth.vtk", "sites": "design.csv", "res": 10.0, "origin": 0.0,
                "kinds": "S2,S3"},
    "calibrate": {"mesh": None, "format": None, "unit_scale": 1.0, "eigen": "eigenbasis.npz",
                  "surrogate": "surrogate.txt", "observations": "observations.csv", "k": 24,
                  "kernel": "rbf", "length_unit": 1.0, "iterations": 5000, "chains": 8,
                  "warmup_fraction": 0.5, "thin_to": 200, "pad": 0.0, "repair": True},
    "predict": {"mesh": None, "format": None, "unit_scale": 1.0, "eigen": "eigenbasis.npz",
                "surrogate": "surrogate.txt", "posterior": "posterior.txt", "repair": True},
    "simulate": {"fields": "truth.vtk", "source": "truth", "pacing_vertex": None,
                 "pacing_point": None, "n_beats": 8, "cycle_ms": 600.0},
    "validate": {"mesh": None, "format": None, "unit_scale": 1.0, "eigen": "eigenbasis.npz",
                 "surrogate": "surrogate.txt", "grid": "small", "length_unit": 1.0},
}

POSTERIOR_KIND = "erpcal-posterior"


class StageError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# config handling

def load_config(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise StageError(f"config file {path} not found")
    text = path.read_text()
    if path.suffix.lower() == ".json":
        return json.loads(text)
    try:
        import tomllib
    except ModuleNotFoundError:  # Python < 3.11
        import tomli as tomllib
    return tomllib.loads(text)


def resolve(stage: str, args: argparse.Namespace) -> dict:
    """Merge defaults, config-file tables and explicit flags for ``stage``."""
    conf = load_config(args.config) if args.config else {}
    opts = dict(DEFAULTS["global"])
    opts.update(DEFAULTS[stage])
    for table in ("global", stage):
        section = conf.get(table, {})
        unknown = set(section) - set(opts)
        if unknown:
            raise StageError(f"config table [{table}] has unknown keys {sorted(unknown)}")
        opts.update(section)
    for k, v in vars(args).items():
        if k in opts and v is not None:
            opts[k] = v
    return opts


PATH_KEYS = ("mesh", "eigen", "surrogate", "table", "truth", "sites", "observations", "posterior", "fields")


def _meta(stage, opts):
    # input files enter the hash by name so reruns elsewhere hash the same
    hashed = {k: (Path(v).name if k in PATH_KEYS and v else v) for k, v in opts.items()
              if k not in ("out", "threads", "workers")}
    return {"stage": stage, "config_hash": io.config_hash(hashed)}


def _out(opts, name) -> Path:
    d = Path(opts["out"])
    d.mkdir(parents=True, exist_ok=True)
    return d / name


def _need(path, what):
    if path is None or not Path(path).exists():
        raise StageError(f"missing upstream artifact: {what} ({path})")
    return Path(path)


def _load_mesh(opts):
    return meshmod.load_mesh(_need(opts["mesh"], "mesh"), opts.get("format"), opts.get("unit_scale", 1.0))


def _load_basis(opts, mesh):
    basis = meshmod.Eigenbasis.load(_need(opts["eigen"], "eigenbasis"), mesh)
    if basis.n_vertices != mesh.n_vertices:
        raise StageError("eigenbasis does not belong to this mesh")
    return basis


def _load_surrogate(opts):
    return sg.SurrogateModel.load(_need(opts["surrogate"], "surrogate model"))


# ---------------------------------------------------------------------------
# stages

def cmd_eigen(opts):
    m = _load_mesh(opts)
    basis = meshmod.solve_eigenbasis(m, int(opts["k"]))
    basis.save(_out(opts, "eigenbasis.npz"))
    io.write_csv(_out(opts, "spectrum.csv"), {"k": np.arange(1, basis.K + 1),
                                              "eigenvalue": basis.eigenvalues}, _meta("eigen", opts))
    log.info("mesh: %d vertices, %d triangles; %d eigenpairs", m.n_vertices, m.n_triangles, basis.K)


def cmd_design(opts):
    m = _load_mesh(opts)
    basis = _load_basis(opts, m)
    d = meshmod.maximin_design(m, basis, int(opts["n"]), float(opts["exclusion_cm"]), seed=opts["seed"],
                               candidate_fraction=float(opts["candidate_fraction"]))
    io.write_csv(_out(opts, "design.csv"), {"site": np.arange(d.vertices.size), "vertex_id": d.vertices},
                 dict(_meta("design", opts), exclusion_cm=d.exclusion_cm))


def _strip_kw(opts):
    return dict(s1=float(opts["s1"]), s2=float(opts["s2"]), n_s1_beats=int(opts["n_s1_beats"]),
                precision=float(opts["precision"]), workers=int(opts["workers"]))


def cmd_surrogate(opts):
    if opts["table"]:
        table = sg.TrainingTable.from_csv(_need(opts["table"], "training table"))
    else:
        design = sg.surrogate_design(int(opts["n"]), opts["seed"], int(opts["lhs_iterations"]))
        table = sg.build_training_set(design, **_strip_kw(opts))
    meta = _meta("surrogate", opts)
    table.to_csv(_out(opts, "training.csv"), meta)
    model = sg.fit_surrogates(table, float(opts["cutoff"]))
    model.save(_out(opts, "surrogate.txt"), meta)
    log.info("surrogate residual RMS: S2 %.2f ms, S3 %.2f ms", model.rms["erp_s2"], model.rms["erp_s3"])


def cmd_sensitivity(opts):
    if opts["table"]:
        table = sg.TrainingTable.from_csv(_need(opts["table"], "training table"))
    else:
        design = sg.sensitivity_design(int(opts["n"]), opts["seed"], int(opts["lhs_iterations"]))
        table = sg.build_training_set(design, **_strip_kw(opts))
    meta = _meta("sensitivity", opts)
    table.to_csv(_out(opts, "sensitivity_table.csv"), meta)
    idx = sg.sensitivity_table(table)
    rows = [(t, p, idx[t][p]) for t in sg.TARGETS for p in PARAM_NAMES]
    io.write_csv(_out(opts, "sensitivity.csv"), {"target": [r[0] for r in rows], "input": [r[1] for r in rows],
                                                 "index": [r[2] for r in rows]}, meta)


def _field_arrays(fields: EPFields, model=None) -> dict:
    out = {n: getattr(fields, n) for n in PARAM_NAMES}
    if model is not None:
        out["erp_s2"], out["erp_s3"] = model.predict(fields.tau_out, fields.apd_max)
    return out


def cmd_truth(opts):
    m = _load_mesh(opts)
    basis = _load_basis(opts, m)
    model = _load_surrogate(opts)
    f = gp.generate_ground_truth(basis, float(opts["rho"]), seed=opts["seed"], surrogate=model,
                                 kernel=opts["kernel"], K=int(opts["k"]),
                                 length_unit=float(opts["length_unit"]))
    arrays = _field_arrays(f, model)
    meta = _meta("truth", opts)
    io.write_vtk(_out(opts, "truth.vtk"), m, arrays, meta)
    io.write_csv(_out(opts, "truth.csv"), dict(vertex_id=np.arange(m.n_vertices), **arrays), meta)


def _read_fields(path):
    path = _need(path, "field file")
    if path.suffix == ".vtk":
        m, arrays, _ = io.read_vtk(path)
        return m, arrays
    cols, _ = io.read_csv(path)
    return None, cols


def cmd_observe(opts):
    _, arrays = _read_fields(opts["truth"])
    io.require_columns(arrays, ("erp_s2", "erp_s3"), opts["truth"])
    cols, _ = io.read_csv(_need(opts["sites"], "design sites"))
    io.require_columns(cols, ("vertex_id",), opts["sites"])
    kinds = tuple(k.strip() for k in str(opts["kinds"]).split(","))
    obs = cal.make_observations(arrays["erp_s2"], arrays["erp_s3"], cols["vertex_id"].astype(int),
                                float(opts["res"]), float(opts["origin"]), kinds)
    cal.observations_to_csv(obs, _out(opts, "observations.csv"), _meta("observe", opts))


def _hmc_config(opts):
    return HMCConfig(iterations=int(opts["iterations"]), chains=int(opts["chains"]),
                     warmup_fraction=float(opts["warmup_fraction"]), thin_to=int(opts["thin_to"]),
                     seed=int(opts["seed"]))


def save_posterior(path, samples: PosteriorSamples, K, kernel, length_unit, meta, map_point=None):
    values = {"K": K, "kernel": kernel, "length_unit": float(length_unit),
              "names": " ".join(samples.names), "n_draws": len(samples.draws),
              "log_density": samples.log_density}
    if map_point is not None:
        values["map_point"] = map_point
    for i, d in enumerate(samples.draws):
        values[f"draw_{i}"] = d
    io.write_keyvalue(path, POSTERIOR_KIND, 1, values, meta)


def load_posterior(path):
    v, _ = io.read_keyvalue(_need(path, "posterior draws"), POSTERIOR_KIND, 1)
    n = int(v["n_draws"])
    draws = np.array([io.floats(v[f"draw_{i}"]) for i in range(n)])
    map_point = io.floats(v["map_point"]) if "map_point" in v else None
    return draws, io.floats(v["log_density"]), int(v["K"]), v["kernel"], float(v["length_unit"]), map_point


def _write_summary(opts, m, summary, stage, meta):
    arrays = {}
    for k in ("tau_out", "apd_max", "erp_s2", "erp_s3"):
        arrays[f"{k}_mean"] = summary.mean[k]
        arrays[f"{k}_sd"] = summary.sd[k]
        arrays[f"{k}_map"] = summary.map_fields[k]
    io.write_csv(_out(opts, f"{stage}_fields.csv"), dict(vertex_id=np.arange(m.n_vertices), **arrays), meta)
    io.write_vtk(_out(opts, f"{stage}_fields.vtk"), m, arrays, meta)


def cmd_calibrate(opts):
    m = _load_mesh(opts)
    basis = _load_basis(opts, m)
    model = _load_surrogate(opts)
    obs = cal.observations_from_csv(_need(opts["observations"], "observations"))
    K = int(opts["k"])
    target = cal.PosteriorTarget(basis, obs, model, K, opts["kernel"], float(opts["length_unit"]),
                                 pad=float(opts["pad"]))
    samples = cal.calibrate(target, _hmc_config(opts))
    # MAP refined by L-BFGS from the prior mode and the best posterior draws
    top = samples.draws[np.argsort(samples.log_density)[::-1][:8]]
    map_point, map_lp = cal.find_map(target, n_starts=4, seed=int(opts["seed"]), starts=top)
    meta = _meta("calibrate", opts)
    save_posterior(_out(opts, "posterior.txt"), samples, K, opts["kernel"], opts["length_unit"], meta,
                   map_point)
    io.write_csv(_out(opts, "diagnostics.csv"), {
        "parameter": samples.names, "rhat": samples.rhat,
        "post_mean": samples.chain_draws.reshape(-1, target.dim).mean(axis=0)}, meta)
    io.write_csv(_out(opts, "chains.csv"), {
        "chain": np.arange(len(samples.divergences)), "divergences": samples.divergences,
        "accept_stat": samples.accept_stat, "step_size": samples.step_size}, meta)
    summary = cal.posterior_fields(samples, basis, model, K, opts["kernel"], float(opts["length_unit"]),
                                   repair=bool(opts["repair"]), map_point=map_point)
    _write_summary(opts, m, summary, "posterior", meta)
    log.info("max split R-hat %.3f, %d divergences, %d unrepairable draws, MAP log density %.2f",
             samples.rhat.max(), samples.n_divergent, summary.n_unrepairable, map_lp)


def cmd_predict(opts):
    m = _load_mesh(opts)
    basis = _load_basis(opts, m)
    model = _load_surrogate(opts)
    draws, lp, K, kernel, unit, map_point = load_posterior(opts["posterior"])
    summary = cal.posterior_fields(draws, basis, model, K, kernel, unit, repair=bool(opts["repair"]),
                                   log_density=lp, map_point=map_point)
    _write_summary(opts, m, summary, "predicted", _meta("predict", opts))


def cmd_simulate(opts):
    m, arrays = _read_fields(opts["fields"])
    if m is None:
        raise StageError("simulate needs a VTK field file (it carries the mesh)")
    src = opts["source"]
    suffix = "" if src == "truth" else f"_{src}"
    vals = {}
    for n in PARAM_NAMES:
        key = n + suffix if n + suffix in arrays else n
        if key not in arrays:
            if n in ("tau_in", "tau_open", "cv_max"):
                vals[n] = {"tau_in": 0.05, "tau_open": 120.0, "cv_max": 0.7}[n]
                continue
            raise StageError(f"field {n}{suffix} missing from {opts['fields']}")
        lo, hi = PARAM_RANGES[n]
        v = np.asarray(arrays[key], dtype=float)
        n_out = int(np.count_nonzero((v < lo) | (v > hi)))
        if n_out:
            log.warning("%s: %d vertices clipped into [%g, %g] before simulation", key, n_out, lo, hi)
        vals[n] = np.clip(v, lo, hi)
    fields = EPFields(**vals)
    if opts["pacing_vertex"] is not None:
        pv = int(opts["pacing_vertex"])
    elif opts["pacing_point"] is not None:
        p = np.asarray([float(x) for x in str(opts["pacing_point"]).split(",")])
        pv = int(np.argmin(np.linalg.norm(m.vertices - p, axis=1)))
    else:
        raise StageError("give --pacing-vertex or --pacing-point")
    maps = tissue.run_monodomain(m, fields, pv, int(opts["n_beats"]), float(opts["cycle_ms"]))
    meta = dict(_meta("simulate", opts), pacing_vertex=pv)
    maps.to_vtk(_out(opts, f"apd_{src}.vtk"), m, meta)
    maps.to_csv(_out(opts, f"apd_{src}.csv"), meta)


def cmd_validate(opts):
    m = _load_mesh(opts)
    basis = _load_basis(opts, m)
    model = _load_surrogate(opts)
    grid = opts["grid"]
    if grid not in cal.GRIDS:
        raise StageError(f"unknown grid {grid!r}; choose from {sorted(cal.GRIDS)}")
    config = cal.ValidationConfig(length_unit=float(opts["length_unit"]), seed=int(opts["seed"]),
                                  **cal.GRIDS[grid])
    res = cal.validate(config, m, basis, model)
    meta = _meta("validate", opts)
    io.write_csv(_out(opts, "validation.csv"), res.columns(), meta)
    summary = res.summary()
    io.write_csv(_out(opts, "validation_summary.csv"), summary, meta)
    log.info("trend fractions: %s", cal.trend_fractions(summary))


COMMANDS = {
    "eigen": cmd_eigen, "design": cmd_design, "surrogate": cmd_surrogate, "sensitivity": cmd_sensitivity,
    "truth": cmd_truth, "observe": cmd_observe, "calibrate": cmd_calibrate, "predict": cmd_predict,
    "simulate": cmd_simulate, "validate": cmd_validate,
}


# ---------------------------------------------------------------------------

def _add(p, *names, **kw):
    p.add_argument(*names, default=None, **kw)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    _add(common, "--config", help="TOML or JSON config file")
    _add(common, "--seed", type=int)
    _add(common, "--threads", type=int, help="numba thread count (0: default)")
    _add(common, "--out", help="output directory")
    _add(common, "-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="erpcal", parents=[common],
                                     description="Calibrate EP parameter fields from ERP intervals.")
    sub = parser.add_subparsers(dest="command", required=True)

    def stage(name, help_):
        return sub.add_parser(name, help=help_, parents=[common])

    def mesh_opts(p, eigen=True):
        _add(p, "--mesh")
        _add(p, "--format", choices=["ply", "carp-pts-elem"])
        _add(p, "--unit-scale", dest="unit_scale", type=float)
        if eigen:
            _add(p, "--eigen")

    p = stage("eigen", "Laplace-Beltrami eigenbasis and spectrum")
    mesh_opts(p, eigen=False)
    _add(p, "--k", type=int)

    p = stage("design", "maximin measurement sites")
    mesh_opts(p)
    _add(p, "--n", type=int)
    _add(p, "--exclusion-cm", dest="exclusion_cm", type=float)
    _add(p, "--candidate-fraction", dest="candidate_fraction", type=float)

    for name, help_ in (("surrogate", "strip-simulation design and cubic ERP surrogates"),
                        ("sensitivity", "variance-based sensitivity of ERP to all parameters")):
        p = stage(name, help_)
        _add(p, "--n", type=int)
        _add(p, "--table", help="reuse an existing training table CSV")
        _add(p, "--precision", type=float)
        _add(p, "--workers", type=int)
        _add(p, "--lhs-iterations", dest="lhs_iterations", type=int)
        if name == "surrogate":
            _add(p, "--cutoff", type=float)

    p = stage("truth", "random ground-truth parameter fields")
    mesh_opts(p)
    _add(p, "--surrogate")
    _add(p, "--rho", type=float)
    _add(p, "--length-unit", dest="length_unit", type=float)
    _add(p, "--kernel", choices=list(gp.KERNELS))
    _add(p, "--k", type=int)

    p = stage("observe", "interval ERP observations at design sites")
    _add(p, "--truth")
    _add(p, "--sites")
    _add(p, "--res", type=float)
    _add(p, "--origin", type=float)
    _add(p, "--kinds")

    p = stage("calibrate", "posterior sampling of GP hyperparameters")
    mesh_opts(p)
    _add(p, "--surrogate")
    _add(p, "--observations")
    _add(p, "--k", type=int)
    _add(p, "--kernel", choices=list(gp.KERNELS))
    _add(p, "--length-unit", dest="length_unit", type=float)
    _add(p, "--iterations", type=int)
    _add(p, "--chains", type=int)
    _add(p, "--warmup-fraction", dest="warmup_fraction", type=float)
    _add(p, "--thin-to", dest="thin_to", type=int)
    _add(p, "--pad", type=float)
    p.add_argument("--no-repair", dest="repair", action="store_false", default=None)

    p = stage("predict", "posterior field summaries from saved draws")
    mesh_opts(p)
    _add(p, "--surrogate")
    _add(p, "--posterior")
    p.add_argument("--no-repair", dest="repair", action="store_false", default=None)

    p = stage("simulate", "monodomain APD maps for truth or predicted fields")
    _add(p, "--fields")
    _add(p, "--source", help="truth, or a summary suffix such as map or mean")
    _add(p, "--pacing-vertex", dest="pacing_vertex", type=int)
    _add(p, "--pacing-point", dest="pacing_point", help="x,y,z snapped to the nearest vertex")
    _add(p, "--n-beats", dest="n_beats", type=int)
    _add(p, "--cycle-ms", dest="cycle_ms", type=float)

    p = stage("validate", "RMSE sweep over lengthscale, observation count and resolution")
    mesh_opts(p)
    _add(p, "--surrogate")
    _add(p, "--grid", choices=sorted(cal.GRIDS))
    _add(p, "--length-unit", dest="length_unit", type=float)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        opts = resolve(args.command, args)
        if opts["threads"]:
            import numba
            numba.set_num_threads(min(int(opts["threads"]), numba.config.NUMBA_NUM_THREADS))
        COMMANDS[args.command](opts)
    except Exception as exc:
        report = {"command": args.command, "error": type(exc).__name__, "message": str(exc)}
        if args.verbose:
            report["traceback"] = traceback.format_exc()
        print(json.dumps(report), file=sys.stderr)
        return 2 if isinstance(exc, (StageError, io.ArtifactError)) else 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
