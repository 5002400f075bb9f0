"""Command-line pipeline: phantom, forward, divfree, invert, metrics, export.

Settings come from an optional flat ``key = value`` file with dotted keys,
then ``--set key=value`` overrides, then the dedicated flags. Every command
writes ``run_report.json`` (config echo, timings, diagnostics, versions) into
its output directory. Exit codes: 0 success, 2 configuration or usage error,
3 numerical failure. ``GLYMPH_LOG`` sets the log level.
"""

import argparse
import configparser
import csv
import json
import logging
import os
import platform
import sys
import time
from dataclasses import asdict
from importlib import metadata

import numpy as np
import scipy

from .divfree import solve_correction, weak_divergence_residual
from .errors import ConfigurationError, DomainError, NumericalError
from .forward import FORMULATIONS, ForwardProblem, TransportCoefficients, relative_error
from .immersed import LevelSet, build_domain
from .inverse import CalibrationWindow, InverseOptions, InverseProblem, ParameterVector, run_inversion
from .phantom import PhantomSpec, corrupt_fd_velocity, fd_velocity_field, generate, truth_coefficients
from .spline_space import Field, SplineSpace, VectorField, l2_project
from .volume_io import (VoxelVolume, export_structured_grid, read_field, read_manifest, read_snapshot_series,
                        read_volume, write_field)

log = logging.getLogger("glymph")

DEFAULTS = {
    "mesh.elements": None,
    "mesh.n_q_forward": 2,
    "mesh.n_q_inverse": 1,
    "forward.formulation": "hw",
    "forward.dt": None,
    "forward.steps": None,
    "forward.rtol": 1e-10,
    "forward.velocity": "truth",
    "forward.params": None,
    "forward.D": 0.05,
    "forward.gamma": 0.01,
    "fd.D": 0.0,
    "fd.eps_rel": 1e-4,
    "fd.max_speed": None,
    "divfree.velocity": "fd",
    "inverse.window": "0:5",
    "inverse.objective": "final_step",
    "inverse.max_iter": 50,
    "inverse.damping": True,
    "inverse.damping_matrix": "levenberg",
    "inverse.lam0": 1e-6,
    "inverse.plateau_eps": 1e-3,
    "inverse.plateau_p": 3,
    "inverse.sensitivity": "exact",
    "inverse.surface_penalty": 0.0,
    "inverse.init": "constant",
    "inverse.init_D": 0.05,
    "inverse.init_u": "zero",
    "inverse.init_gamma": 0.01,
    "inverse.scale_D": 1.0,
    "inverse.scale_u": 1.0,
    "inverse.scale_gamma": 1.0,
    "export.voxels": None,
    "run.threads": 1,
    "run.allow_nan": False,
}

OBJECTIVE_ALIASES = {"final": "final_step", "final_step": "final_step", "sum": "sum_over_steps",
                     "sum_over_steps": "sum_over_steps"}


# -- configuration ------------------------------------------------------------------------

def parse_value(text):
    """Interpret a config string as JSON, a comma-separated tuple, or a plain string."""
    text = text.strip()
    if text.lower() in ("true", "false"):
        return text.lower() == "true"
    if text.lower() in ("none", "null", ""):
        return None
    try:
        return json.loads(text)
    except ValueError:
        pass
    if "," in text:
        return [parse_value(t) for t in text.split(",")]
    return text


def read_config(path):
    """Flat ``key = value`` file with dotted keys; ``#`` starts a comment."""
    parser = configparser.ConfigParser(delimiters=("=",), comment_prefixes=("#",), inline_comment_prefixes=("#",),
                                       interpolation=None)
    parser.optionxform = str
    try:
        with open(path) as fh:
            parser.read_string("[config]\n" + fh.read())
    except configparser.Error as exc:
        raise ConfigurationError(f"cannot parse config {path}: {exc}") from exc
    return {k: parse_value(v) for k, v in parser["config"].items()}


def build_config(args):
    cfg = dict(DEFAULTS)
    if args.config:
        if not os.path.exists(args.config):
            raise ConfigurationError(f"config file {args.config} does not exist")
        cfg.update(read_config(args.config))
    for item in args.set or []:
        if "=" not in item:
            raise ConfigurationError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        cfg[k.strip()] = parse_value(v)
    flags = {"form": "forward.formulation", "steps": "forward.steps", "dt": "forward.dt",
             "window": "inverse.window", "objective": "inverse.objective", "threads": "run.threads",
             "elements": "mesh.elements", "seed": "phantom.seed", "max_iter": "inverse.max_iter"}
    for attr, key in flags.items():
        v = getattr(args, attr, None)
        if v is not None:
            cfg[key] = parse_value(str(v)) if attr == "elements" else v
    if getattr(args, "allow_nan", False):
        cfg["run.allow_nan"] = True
    _validate(cfg)
    return cfg


def _validate(cfg):
    if cfg["forward.formulation"] not in FORMULATIONS:
        raise ConfigurationError(f"formulation must be one of {FORMULATIONS}, got {cfg['forward.formulation']!r}")
    for key in ("forward.rtol", "inverse.plateau_eps", "inverse.lam0"):
        if not (isinstance(cfg[key], (int, float)) and cfg[key] > 0):
            raise ConfigurationError(f"{key} must be a positive number")
    if cfg["inverse.objective"] not in OBJECTIVE_ALIASES:
        raise ConfigurationError(f"unknown objective {cfg['inverse.objective']!r}")
    if int(cfg["run.threads"]) < 1:
        raise ConfigurationError("run.threads must be >= 1")


def phantom_spec(cfg):
    fields = PhantomSpec.__dataclass_fields__
    kw = {}
    for key, v in cfg.items():
        if key.startswith("phantom."):
            name = key.split(".", 1)[1]
            if name not in fields:
                raise ConfigurationError(f"unknown phantom setting {key!r}")
            kw[name] = tuple(v) if isinstance(v, list) and name != "gaussians" else v
    return PhantomSpec(**kw)


def _elements(cfg, default):
    e = cfg["mesh.elements"]
    if e is None:
        e = default
    e = [int(e)] * 3 if np.isscalar(e) else [int(x) for x in e]
    if len(e) != 3 or min(e) < 1:
        raise ConfigurationError(f"mesh.elements must be three positive integers, got {e}")
    return tuple(e)


# -- data sets ----------------------------------------------------------------------------

class DataSet:
    """Snapshot manifest plus the domain recipe derived from it."""

    def __init__(self, manifest, allow_nan=False):
        if not os.path.exists(manifest):
            raise ConfigurationError(f"manifest {manifest} does not exist")
        self.path = os.path.abspath(manifest)
        self.base = os.path.dirname(self.path)
        self.doc = read_manifest(self.path)
        self.times, self.dt, self.volumes = read_snapshot_series(self.path, allow_nan=allow_nan)
        self.spec = PhantomSpec(**_spec_kwargs(self.doc["spec"])) if "spec" in self.doc else None
        self.mask = (read_volume(os.path.join(self.base, self.doc["mask"])) if "mask" in self.doc
                     else None)

    def domain(self, cfg, n_q):
        grid = self.volumes[0]
        if self.spec is not None:
            elements = _elements(cfg, self.spec.elements)
            space = SplineSpace(self.spec.lower, self.spec.upper, elements)
            return build_domain(space, self.spec.level_set(), n_q)
        if self.mask is None:
            raise ConfigurationError("data set has neither a phantom spec nor a mask volume")
        elements = _elements(cfg, tuple(max(1, d // 2) for d in grid.dims))
        space = SplineSpace(grid.lower, grid.upper, elements)
        return build_domain(space, LevelSet.from_mask(self.mask), n_q)

    def fields(self, domain, indices=None):
        idx = range(len(self.volumes)) if indices is None else indices
        return [l2_project(domain.space, domain, self.volumes[i]) for i in idx]


def _spec_kwargs(d):
    out = {}
    for k, v in d.items():
        out[k] = tuple(v) if isinstance(v, list) and k != "gaussians" else v
    return out


def _coefficients(cfg, data, domain, velocity):
    """Transport coefficients on ``domain`` from a parameter directory, the phantom truth or constants."""
    space = domain.space
    if cfg["forward.params"]:
        p = cfg["forward.params"]
        D, u, gamma = (read_field(os.path.join(p, name), space) for name in ("D", "u_bar", "gamma"))
        return TransportCoefficients(D, u, gamma)
    truth = truth_coefficients(domain, data.spec) if data.spec is not None else None
    D = truth.D if truth is not None else Field.constant(space, float(cfg["forward.D"]))
    gamma = truth.gamma if truth is not None else Field.constant(space, float(cfg["forward.gamma"]))
    if velocity == "truth":
        if truth is None:
            raise ConfigurationError("velocity 'truth' needs a phantom data set")
        u = truth.u_bar
    elif velocity == "fd":
        vols = corrupt_fd_velocity(data.volumes, data.dt, D=float(cfg["fd.D"]), eps_rel=float(cfg["fd.eps_rel"]),
                                   max_speed=cfg["fd.max_speed"])
        u = fd_velocity_field(domain, vols)
    elif velocity == "zero":
        u = VectorField.zeros(space)
    else:
        raise ConfigurationError(f"unknown velocity source {velocity!r}")
    return TransportCoefficients(D, u, gamma)


def _parse_window(text, n_snap):
    try:
        a, b = (int(x) for x in str(text).split(":"))
    except ValueError as exc:
        raise ConfigurationError(f"window must look like start:stop, got {text!r}") from exc
    if not (0 <= a < b <= n_snap) or b - a < 2:
        raise ConfigurationError(f"window {text} does not select at least two of {n_snap} snapshots")
    return a, b


# -- commands -----------------------------------------------------------------------------

def cmd_phantom(cfg, args, report):
    spec = phantom_spec(cfg)
    ph = generate(spec)
    path = ph.write(args.out)
    report["diagnostics"] = {"n_cp": ph.domain.space.n_cp, "snapshots": len(ph.volumes), "manifest": path,
                             "volume_mm3": ph.domain.volume, "area_mm2": ph.domain.area}


def cmd_forward(cfg, args, report):
    data = DataSet(args.data, cfg["run.allow_nan"])
    domain = data.domain(cfg, int(cfg["mesh.n_q_forward"]))
    coeffs = _coefficients(cfg, data, domain, cfg["forward.velocity"])
    dt = float(cfg["forward.dt"] or data.dt)
    steps = int(cfg["forward.steps"] or len(data.volumes) - 1)
    prob = ForwardProblem(domain, coeffs, dt, cfg["forward.formulation"], rtol=float(cfg["forward.rtol"]))
    c0 = data.fields(domain, [0])[0]
    traj = prob.run(c0, steps, t0=data.times[0])
    os.makedirs(os.path.join(args.out, "fields"), exist_ok=True)
    entries = []
    for n, (t, f) in enumerate(zip(traj.times, traj.fields)):
        entries.append({"time_min": t, "path": os.path.relpath(
            write_field(f, os.path.join(args.out, "fields", f"c_{n:04d}")), args.out)})
    with open(os.path.join(args.out, "run.json"), "w") as fh:
        json.dump({"data": data.path, "elements": list(domain.full_space.shape), "n_q": domain.n_q,
                   "fields": entries}, fh, indent=1)
    traj.to_csv(os.path.join(args.out, "trajectory.csv"), include_initial=False)
    mass = traj.column("total_mass")
    report["diagnostics"] = {"n_cp": domain.space.n_cp, "steps": steps, "dt": dt,
                             "max_abs_delta_mass_rel": float(np.max(np.abs(mass - mass[0])) / abs(mass[0])),
                             "min_c": float(np.min(traj.column("min_c"))),
                             "max_c": float(np.max(traj.column("max_c")))}


def cmd_divfree(cfg, args, report):
    data = DataSet(args.data, cfg["run.allow_nan"])
    domain = data.domain(cfg, int(cfg["mesh.n_q_forward"]))
    coeffs = _coefficients(cfg, data, domain, cfg["divfree.velocity"])
    u = coeffs.u_bar
    before = weak_divergence_residual(domain, u, phi=Field.zeros(domain.space))
    phi = solve_correction(domain, u)
    after = weak_divergence_residual(domain, u, phi=phi)
    os.makedirs(args.out, exist_ok=True)
    write_field(u, os.path.join(args.out, "u_bar"))
    write_field(phi, os.path.join(args.out, "phi"))
    report["diagnostics"] = {"before": asdict(before), "after": asdict(after),
                             "orders_of_magnitude": float(np.log10(before.l2_normalized
                                                                   / max(after.l2_normalized, 1e-300)))}


def _initial_guess(cfg, data, domain):
    space = domain.space
    if cfg["inverse.init"] == "truth":
        if data.spec is None:
            raise ConfigurationError("inverse.init = truth needs a phantom data set")
        theta = ParameterVector.from_coeffs(truth_coefficients(domain, data.spec))
    elif cfg["inverse.init"] == "constant":
        u = _coefficients(dict(cfg, **{"forward.params": None}), data, domain, cfg["inverse.init_u"]).u_bar
        theta = ParameterVector.from_blocks(np.full(space.n_cp, float(cfg["inverse.init_D"])), u.coef,
                                            np.full(space.n_cp, float(cfg["inverse.init_gamma"])))
    else:
        raise ConfigurationError(f"inverse.init must be 'truth' or 'constant', got {cfg['inverse.init']!r}")
    return theta.scaled(float(cfg["inverse.scale_D"]), float(cfg["inverse.scale_u"]),
                        float(cfg["inverse.scale_gamma"]))


def cmd_invert(cfg, args, report):
    data = DataSet(args.data, cfg["run.allow_nan"])
    domain = data.domain(cfg, int(cfg["mesh.n_q_inverse"]))
    a, b = _parse_window(cfg["inverse.window"], len(data.volumes))
    fields = data.fields(domain)
    window = CalibrationWindow(fields[a:b], data.times[a:b], OBJECTIVE_ALIASES[cfg["inverse.objective"]])
    problem = InverseProblem(domain, window, sensitivity=cfg["inverse.sensitivity"],
                             surface_penalty=float(cfg["inverse.surface_penalty"]))
    options = InverseOptions(max_iter=int(cfg["inverse.max_iter"]), damping=bool(cfg["inverse.damping"]),
                             lam0=float(cfg["inverse.lam0"]), plateau_eps=float(cfg["inverse.plateau_eps"]),
                             plateau_p=int(cfg["inverse.plateau_p"]), sensitivity=cfg["inverse.sensitivity"],
                             surface_penalty=float(cfg["inverse.surface_penalty"]),
                             damping_matrix=cfg["inverse.damping_matrix"])
    theta0 = _initial_guess(cfg, data, domain)
    res = run_inversion(theta0, problem, options)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "residuals.csv"), "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["iteration", "J", "lambda"])
        for i, J in enumerate(res.history):
            wr.writerow([i, repr(float(J)), repr(float(res.lambdas[i - 1])) if i else ""])
    coeffs = res.theta.to_coeffs(domain.space)
    for name, f in (("D", coeffs.D), ("u_bar", coeffs.u_bar), ("gamma", coeffs.gamma)):
        write_field(f, os.path.join(args.out, name))
    prob = ForwardProblem(domain, coeffs, window.dt, "hw")
    traj = prob.run(fields[a], len(fields) - 1 - a, t0=data.times[a])
    with open(os.path.join(args.out, "validation.csv"), "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["snapshot", "t_min", "rel_error", "calibration"])
        for n in range(1, len(traj.fields)):
            i = a + n
            wr.writerow([i, repr(float(data.times[i])), repr(relative_error(traj.fields[n], fields[i], domain)),
                         int(i < b)])
    report["diagnostics"] = {"n_cp": domain.space.n_cp, "iterations": res.iterations, "converged": res.converged,
                             "reason": res.reason, "J_initial": res.history[0], "J_final": res.history[-1]}


def _load_run(sim_dir):
    path = os.path.join(sim_dir, "run.json")
    if not os.path.exists(path):
        raise ConfigurationError(f"{sim_dir} does not contain run.json")
    with open(path) as fh:
        return json.load(fh)


def cmd_metrics(cfg, args, report):
    run = _load_run(args.sim)
    ref = DataSet(args.ref, cfg["run.allow_nan"])
    cfg = dict(cfg, **{"mesh.elements": run["elements"]})
    domain = ref.domain(cfg, int(run["n_q"]))
    times = np.asarray(ref.times)
    rows = []
    for n, e in enumerate(run["fields"]):
        match = np.flatnonzero(np.isclose(times, e["time_min"], rtol=0, atol=1e-9))
        if match.size == 0:
            continue
        sim = read_field(os.path.join(args.sim, e["path"]), domain.space)
        data = l2_project(domain.space, domain, ref.volumes[match[0]])
        rows.append((n, e["time_min"], relative_error(sim, data, domain)))
    if not rows:
        raise ConfigurationError("no simulated time matches a reference snapshot")
    out = args.out or os.path.join(args.sim, "metrics.csv")
    os.makedirs(os.path.dirname(os.path.abspath(out)), exist_ok=True)
    with open(out, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["step", "t_min", "rel_error"])
        for r in rows:
            wr.writerow([r[0], repr(float(r[1])), repr(float(r[2]))])
    report["diagnostics"] = {"rows": len(rows), "max_rel_error": max(r[2] for r in rows), "csv": out}
    args.out = os.path.dirname(os.path.abspath(out))


def cmd_export(cfg, args, report):
    data = DataSet(args.data, cfg["run.allow_nan"])
    first = read_field(args.fields[0])
    space = first.space
    fields = [first] + [read_field(p, space) for p in args.fields[1:]]
    cfg = dict(cfg, **{"mesh.elements": list(space.shape)})
    domain = data.domain(cfg, int(cfg["mesh.n_q_forward"]))
    if not domain.space.compatible(space):
        domain = None
        log.warning("fields do not live on the data set's domain; exporting without the outside sentinel")
    grid = data.volumes[0]
    vox = cfg["export.voxels"]
    if vox is not None:
        vox = [int(vox)] * 3 if np.isscalar(vox) else [int(v) for v in vox]
        grid = VoxelVolume(np.zeros(vox), tuple((grid.upper - grid.lower) / np.asarray(vox)), tuple(grid.lower))
    names = [os.path.splitext(os.path.basename(p))[0] for p in args.fields]
    out = args.out if args.out.endswith(".vtk") else os.path.join(args.out, "fields.vtk")
    os.makedirs(os.path.dirname(os.path.abspath(out)), exist_ok=True)
    export_structured_grid(out, dict(zip(names, fields)), grid, domain)
    report["diagnostics"] = {"path": out, "fields": names, "dims": list(grid.dims)}
    args.out = os.path.dirname(os.path.abspath(out))


COMMANDS = {"phantom": cmd_phantom, "forward": cmd_forward, "divfree": cmd_divfree, "invert": cmd_invert,
            "metrics": cmd_metrics, "export": cmd_export}


# -- entry point --------------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(prog="glymph", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", help="flat key = value settings file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one setting")
        p.add_argument("--threads", type=int, help="BLAS/assembly threads (1 = deterministic)")
        p.add_argument("--out", required=out_required, help="output directory")
        p.add_argument("--allow-nan", action="store_true", help="accept NaN voxels when reading volumes")

    p = sub.add_parser("phantom", help="generate a synthetic data set")
    common(p)
    p.add_argument("--seed", type=int)
    p.add_argument("--elements")
    for name in ("forward", "divfree", "invert"):
        p = sub.add_parser(name, help=f"{name} run on a snapshot manifest")
        common(p)
        p.add_argument("--data", required=True, help="snapshot manifest (JSON)")
        p.add_argument("--elements", help="spline elements per axis, e.g. 16,16,16")
        if name == "forward":
            p.add_argument("--form", choices=FORMULATIONS)
            p.add_argument("--steps", type=int)
            p.add_argument("--dt", type=float)
        if name == "invert":
            p.add_argument("--window", help="snapshot slice start:stop used for calibration")
            p.add_argument("--objective", choices=sorted(OBJECTIVE_ALIASES))
            p.add_argument("--max-iter", dest="max_iter", type=int)
    p = sub.add_parser("metrics", help="per-step relative error of a run against reference snapshots")
    common(p, out_required=False)
    p.add_argument("--ref", required=True, help="reference snapshot manifest")
    p.add_argument("--sim", required=True, help="forward run directory")
    p = sub.add_parser("export", help="write fields as a legacy VTK structured grid")
    common(p)
    p.add_argument("--data", required=True, help="snapshot manifest defining the domain and grid")
    p.add_argument("--fields", nargs="+", required=True, help="field headers written by glymph")
    return parser


def _versions():
    try:
        own = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        own = "unknown"
    return {"glymph": own, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__}


def _setup_logging():
    level = os.environ.get("GLYMPH_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s", stream=sys.stderr)


def main(argv=None):
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    report = {"command": args.command, "argv": list(sys.argv[1:] if argv is None else argv),
              "versions": _versions()}
    t0 = time.perf_counter()
    code = 0
    try:
        cfg = build_config(args)
        report["config"] = cfg
        from threadpoolctl import threadpool_limits
        with threadpool_limits(limits=int(cfg["run.threads"])):
            COMMANDS[args.command](cfg, args, report)
        report["status"] = "ok"
    except (ConfigurationError, DomainError, FileNotFoundError) as exc:
        code = 2
        report["status"] = "configuration error"
        report["error"] = str(exc)
        print(f"glymph: error: {exc}", file=sys.stderr)
    except NumericalError as exc:
        code = 3
        report["status"] = "numerical failure"
        report["error"] = str(exc)
        print(f"glymph: numerical failure: {exc}", file=sys.stderr)
    report["exit_code"] = code
    report["elapsed_s"] = time.perf_counter() - t0
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "run_report.json"), "w") as fh:
            json.dump(report, fh, indent=1, sort_keys=True, default=_json_default)
    return code


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return str(obj)


if __name__ == "__main__":
    sys.exit(main())
