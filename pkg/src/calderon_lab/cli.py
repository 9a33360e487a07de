"""Batch experiment runner.

Usage::

    python -m calderon_lab.cli cgo --config configs/cgo_decay.json --out runs/cgo --seed 7

Each subcommand reads a JSON config, runs one pipeline and writes CSV
tables, a JSON report, SVG figures and a manifest with content hashes.
Exit codes: 0 success, 2 validation error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import platform
import sys
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .geometry import GeometryError, load_description
from .pde import NumericalError
from .report import FORMATS, Plot, Report, Table, emit_report, file_hash, write_json

KINDS = (
    "forward",
    "carleman-sweep",
    "cgo-decay",
    "transform-vanishing",
    "reconstruct-O",
    "broken-ray",
    "linearized-sb",
)
SUBCOMMANDS = {
    "forward": "forward",
    "carleman": "carleman-sweep",
    "cgo": "cgo-decay",
    "transform": "transform-vanishing",
    "reconstruct": "reconstruct-O",
    "broken-ray": "broken-ray",
    "linearized": "linearized-sb",
}
TOP_KEYS = (
    "kind",
    "seed",
    "output_dir",
    "domain",
    "E_intervals",
    "weight",
    "margins",
    "tau_list",
    "lambda_list",
    "h_list",
    "lines",
    "params",
)
DOMAIN_KEYS = ("center", "radius_samples", "x1_interval", "grid_resolution")
DEFAULT_DOMAIN = {"center": [0.0, 0.0], "radius_samples": [0.5], "x1_interval": [-0.5, 0.5], "grid_resolution": [16, 8, 32]}

PHANTOM_DEFAULT = {
    "profile": {"center": 0.0, "width": 0.5},
    "bump": {"center": [0.0, 0.2], "width": 0.7, "amplitude": 1.0},
    "x1_range": [-2.5, 2.5],
}
PARAMS = {
    "forward": {"q": 0.0, "g": "x1", "method": "auto"},
    "carleman-sweep": {"n_functions": 20, "delta": 0.3, "cutoff": "smooth", "q": 0.0},
    "cgo-decay": {"omega": [1.0, 0.0], "sigma": 0.0, "lam": 0.0, "bump_width": None, "phi_sign": 1, "delta": 0.3, "q": 0.0},
    "transform-vanishing": {"phantom": PHANTOM_DEFAULT, "sampler": "halton", "tol": None},
    "reconstruct-O": {"phantom": PHANTOM_DEFAULT, "sampler": "halton", "n_grid": 65, "spacing": 0.1, "regularization": 1e-4},
    "broken-ray": {"start_angle": 10.0, "direction_angle": 100.0, "max_bounces": 100, "phantom": None},
    "linearized-sb": {"scene_radius": 0.9, "c": 0.2, "n_each": 20, "delta": 0.05, "margin": 2e-3},
}
BOUNDARY_DATA = {
    "x1": lambda x1, x2, x3: x1,
    "x2": lambda x1, x2, x3: x2,
    "x3": lambda x1, x2, x3: x3,
    "1": lambda x1, x2, x3: np.ones_like(x1),
    "x2^2-x3^2": lambda x1, x2, x3: x2**2 - x3**2,
}
# fixed offsets for per-stage random substreams
STREAM_LINES = 101
STREAM_FAMILIES = 202
STREAM_TRIALS = 303


class ConfigError(ValueError):
    """Schema violation in an experiment config."""


class StageError(RuntimeError):
    """A module error raised inside a named pipeline stage."""

    def __init__(self, stage: str, original: BaseException):
        super().__init__(f"[{stage}] {type(original).__name__}: {original}")
        self.stage = stage
        self.original = original

    @property
    def numerical(self) -> bool:
        return isinstance(self.original, (NumericalError, FloatingPointError, np.linalg.LinAlgError, ArithmeticError))


@dataclass
class ExperimentConfig:
    kind: str
    seed: int
    output_dir: str = "runs/out"
    domain: dict = field(default_factory=lambda: dict(DEFAULT_DOMAIN))
    E_intervals: list = field(default_factory=lambda: [[-60.0, 60.0]])
    weight: dict = field(default_factory=lambda: {"variant": "linear", "params": {"alpha": [1.0, 0.0, 0.0]}})
    margins: list = field(default_factory=lambda: [0.0, 0.0])
    tau_list: list = field(default_factory=list)
    lambda_list: list = field(default_factory=list)
    h_list: list = field(default_factory=list)
    lines: int = 64
    params: dict = field(default_factory=dict)

    def description(self) -> dict:
        d = dict(self.domain)
        d["E_intervals"] = self.E_intervals
        d["weight"] = self.weight
        d["margins"] = self.margins
        return d

    def resolved_params(self) -> dict:
        p = dict(PARAMS[self.kind])
        p.update(self.params)
        return p

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        return hashlib.sha256(serialize_config(self).encode()).hexdigest()


def _line_of(text: str, key: str) -> int | None:
    needle = f'"{key}"'
    for i, line in enumerate(text.splitlines(), 1):
        if needle in line:
            return i
    return None


def _fail(text: str, key: str, msg: str):
    ln = _line_of(text, key)
    where = f" (line {ln})" if ln else ""
    raise ConfigError(f"{msg}: {key!r}{where}")


def parse_config(text: str) -> ExperimentConfig:
    """Parse and validate a JSON experiment config; unknown keys are errors."""
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"malformed JSON at line {e.lineno}, column {e.colno}: {e.msg}") from None
    if not isinstance(raw, dict):
        raise ConfigError("the config must be a JSON object")
    for k in raw:
        if k not in TOP_KEYS:
            _fail(text, k, "unknown key")
    if "kind" not in raw:
        raise ConfigError("missing key 'kind'")
    if raw["kind"] not in KINDS:
        _fail(text, "kind", f"unknown experiment kind {raw['kind']!r}; expected one of {KINDS}")
    if "seed" not in raw:
        raise ConfigError("missing key 'seed' (seeds must be explicit integers)")
    if not isinstance(raw["seed"], int) or isinstance(raw["seed"], bool) or raw["seed"] < 0:
        _fail(text, "seed", "seed must be a non-negative integer")
    dom = raw.get("domain", dict(DEFAULT_DOMAIN))
    if not isinstance(dom, dict):
        _fail(text, "domain", "domain must be an object")
    for k in dom:
        if k not in DOMAIN_KEYS:
            _fail(text, k, "unknown domain key")
    dom = {**DEFAULT_DOMAIN, **dom}
    params = raw.get("params", {})
    if not isinstance(params, dict):
        _fail(text, "params", "params must be an object")
    for k in params:
        if k not in PARAMS[raw["kind"]]:
            _fail(text, k, f"unknown parameter for {raw['kind']}")
    for k in ("tau_list", "lambda_list", "h_list", "E_intervals", "margins"):
        if k in raw and not isinstance(raw[k], list):
            _fail(text, k, "expected a list")
    if "lines" in raw and (not isinstance(raw["lines"], int) or raw["lines"] < 1):
        _fail(text, "lines", "lines must be a positive integer")
    cfg = ExperimentConfig(
        kind=raw["kind"],
        seed=int(raw["seed"]),
        output_dir=str(raw.get("output_dir", "runs/out")),
        domain=dom,
        E_intervals=[list(map(float, iv)) for iv in raw.get("E_intervals", [[-60.0, 60.0]])],
        weight=raw.get("weight", {"variant": "linear", "params": {"alpha": [1.0, 0.0, 0.0]}}),
        margins=list(map(float, raw.get("margins", [0.0, 0.0]))),
        tau_list=list(map(float, raw.get("tau_list", []))),
        lambda_list=list(map(float, raw.get("lambda_list", []))),
        h_list=list(map(float, raw.get("h_list", []))),
        lines=int(raw.get("lines", 64)),
        params=dict(params),
    )
    try:
        load_description(cfg.description())
    except (GeometryError, KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"invalid domain/partition spec: {e}") from None
    return cfg


def serialize_config(cfg: ExperimentConfig) -> str:
    return json.dumps(cfg.to_dict(), sort_keys=True, indent=2)


def load_config(path: str) -> ExperimentConfig:
    with open(path) as fh:
        return parse_config(fh.read())


# ---------------------------------------------------------------------------
# pipelines


class _Stage:
    def __init__(self, name):
        self.name = name

    def __enter__(self):
        return self

    def __exit__(self, et, ev, tb):
        if ev is not None and not isinstance(ev, (StageError, KeyboardInterrupt)):
            raise StageError(self.name, ev) from ev
        return False


def _phantom(spec):
    from .phantoms import bump2d, gaussian_profile, separable

    spec = {**PHANTOM_DEFAULT, **(spec or {})}
    prof = spec["profile"]
    b = spec["bump"]
    h2 = bump2d(tuple(b["center"]), float(b["width"]), float(b.get("amplitude", 1.0)))
    return separable(gaussian_profile(float(prof["center"]), float(prof["width"])), h2, tuple(spec["x1_range"]))


def _setup(cfg):
    from .geometry import AngularIntervals

    dom, w, E, margins = load_description(cfg.description())
    return dom, w, E, margins, AngularIntervals


def _run_forward(cfg, p):
    from .pde import TraceFunction, neumann_trace, sample_set, solve_dirichlet

    with _Stage("setup"):
        dom, *_ = _setup(cfg)
        if p["g"] not in BOUNDARY_DATA:
            raise ConfigError(f"unknown boundary data {p['g']!r}; choose from {sorted(BOUNDARY_DATA)}")
        grid = dom.grid
        S = sample_set(grid)
        g = TraceFunction.from_callable(S, BOUNDARY_DATA[p["g"]])
    with _Stage("solve"):
        u = solve_dirichlet(dom, float(p["q"]), g, method=p["method"])
        dn = neumann_trace(u)
    t = Table(["sample", "face", "x1", "x2", "x3", "dirichlet", "neumann"])
    for i in range(len(S)):
        t.rows.append([i, int(S.face[i]), *map(float, S.points[i]), float(np.real(g.values[i])), float(np.real(dn.values[i]))])
    rep = Report(cfg.kind, {"boundary": t})
    caps = S.face < 2
    rep.scalars = {
        "max_abs_neumann_lateral": float(np.max(np.abs(dn.values[~caps]))) if np.any(~caps) else 0.0,
        "mean_neumann_cap_a1": float(np.mean(np.real(dn.values[S.face == 0]))),
        "mean_neumann_cap_b1": float(np.mean(np.real(dn.values[S.face == 1]))),
    }
    rep.plots.append(Plot("boundary", "x1", ["neumann"], kind="scatter", title="Neumann trace against x1"))
    return rep


def _run_carleman(cfg, p):
    from .carleman import BumpFamily, carleman_sweep, fit_constants, per_h_constants

    with _Stage("setup"):
        dom, w, *_ = _setup(cfg)
        grid = dom.grid
        hs = cfg.h_list or [0.2, 0.1, 0.05, 0.025]
        rng = np.random.default_rng(cfg.seed + STREAM_FAMILIES)
        fams = [BumpFamily.random(rng, grid) for _ in range(int(p["n_functions"]))]
    with _Stage("sweep"):
        sweep = carleman_sweep(grid, fams, hs, q=float(p["q"]) or None, weight=w, delta=float(p["delta"]), cutoff=p["cutoff"])
        C0, h0 = fit_constants(sweep)
    t = Table(["h", "function", "lhs", "rhs", "ratio"])
    n = len(fams)
    for i, v in enumerate(sweep):
        t.rows.append([float(v.h_used), i % n, float(v.lhs), float(v.rhs), float(v.ratio)])
    per_h = per_h_constants(sweep)
    th = Table(["h", "C0_h"], [[float(h), float(c)] for h, c in per_h.items()])
    rep = Report(cfg.kind, {"sweep": t, "per_h": th})
    rep.scalars = {"fitted_C0": C0, "h0": h0}
    rep.plots.append(Plot("per_h", "h", ["C0_h"], logx=True, title="fitted constant per h"))
    return rep


def _run_cgo(cfg, p):
    from .cgo import AngularBump, ComplexFrequency, build_cgo, default_bump_width, place_frame
    from .geometry import StarDomain2D, partition_boundary

    with _Stage("setup"):
        dom, w, E, margins, _ = _setup(cfg)
        grid = dom.grid
        part = partition_boundary(grid, w, E, margins)
        dom0 = StarDomain2D.disk(grid.disk.center, grid.disk.radius)
        frame = place_frame(dom0, tuple(p["omega"]), float(p["sigma"]))
        width = p["bump_width"] or default_bump_width(frame, dom0, E)
        bump = AngularBump(frame.theta0, float(width))
        taus = cfg.tau_list or [16.0, 32.0, 64.0, 128.0]
    t = Table(["tau", "ratio", "norm_r0", "support_defect", "pde_residual"])
    for tau in taus:
        with _Stage(f"cgo tau={tau:g}"):
            sol = build_cgo(grid, float(p["q"]), part, frame, bump, ComplexFrequency(tau, float(p["lam"])), int(p["phi_sign"]), E=E, delta=float(p["delta"]))
        t.rows.append([float(tau), float(sol.ratio()), float(sol.r0.norm()), float(sol.boundary_support_defect), float(sol.pde_residual)])
    r = np.array([row[1] for row in t.rows])
    rep = Report(cfg.kind, {"decay": t})
    rep.scalars = {
        "strictly_decreasing": bool(np.all(np.diff(r) < 0)),
        "total_decrease": float(r[0] / r[-1]),
        "bump_width": float(width),
        "frame": {"x0_prime": list(map(float, frame.x0_prime)), "theta0": float(frame.theta0)},
    }
    rep.plots.append(Plot("decay", "tau", ["ratio"], logx=True, logy=True, title="||r0|| / ||m|| against tau"))
    return rep


def _lines(cfg, p, dom0, E):
    from .reconstruct import admissible_lines

    return admissible_lines(dom0, E, cfg.lines, sampler=p["sampler"], seed=cfg.seed + STREAM_LINES)


def _cross_section(cfg):
    from .geometry import StarDomain2D

    d = cfg.domain
    return StarDomain2D(tuple(d["center"]), tuple(d["radius_samples"]))


def _run_transform(cfg, p):
    from .reconstruct import admissible_samples, moment_support_check, vanishing_verdict

    with _Stage("setup"):
        _, _, E, _, _ = _setup(cfg)
        dom0 = _cross_section(cfg)
        f = _phantom(p["phantom"])
        lines = _lines(cfg, p, dom0, E)
        lams = cfg.lambda_list or [-1.0, -0.5, 0.0, 0.5, 1.0]
    with _Stage("transform"):
        samples = admissible_samples(f, lines, lams)
        verdict = vanishing_verdict(samples, p["tol"])
    with _Stage("moments"):
        mom = moment_support_check(f, dom0, E, lines=lines)
    t = Table(["lam", "line", "omega_x", "omega_y", "sigma", "re", "im", "err_est"])
    nl = len(lines)
    for i, s in enumerate(samples):
        ln = s.line_or_ray
        t.rows.append([float(s.lam), i % nl, float(ln.omega[0]), float(ln.omega[1]), float(ln.sigma), float(s.value.real), float(s.value.imag), float(s.quadrature_error_estimate)])
    tm = Table(["k", "max_abs", "tol", "holds"], [[r["k"], r["max_abs"], r["tol"], r["holds"]] for r in mom.rows])
    rep = Report(cfg.kind, {"samples": t, "moments": tm})
    rep.scalars = {"vanishing": verdict.holds, "max_abs": verdict.max_abs, "tol": verdict.tol, "moments_pass": mom.passes}
    rep.plots.append(Plot("samples", "sigma", ["re"], kind="scatter", title="admissible-line transform values"))
    return rep


def _run_reconstruct(cfg, p):
    from .geometry import reachable_set
    from .reconstruct import invert_on_O
    from .transforms import mixed_transform

    with _Stage("setup"):
        _, _, E, _, _ = _setup(cfg)
        dom0 = _cross_section(cfg)
        f = _phantom(p["phantom"])
        reach = reachable_set(dom0, E, n_grid=int(p["n_grid"]))
        lines = _lines(cfg, p, dom0, E)
        lams = np.asarray(cfg.lambda_list or np.linspace(-4, 4, 33).tolist())
    with _Stage("data"):
        data = np.array([[mixed_transform(f, lam, ln).value for ln in lines] for lam in lams])
    with _Stage("inversion"):
        rec = invert_on_O(data, lines, lams, reach, dom0, f.x1_range, spacing=float(p["spacing"]), regularization=float(p["regularization"]))
    truth = f(rec.x1[:, None], rec.points[None, :, 0], rec.points[None, :, 1])
    t = Table(["x1", "x2", "x3", "re", "im", "truth"])
    for i, x1 in enumerate(rec.x1):
        for j, (x2, x3) in enumerate(rec.points):
            t.rows.append([float(x1), float(x2), float(x3), float(rec.values[i, j].real), float(rec.values[i, j].imag), float(truth[i, j])])
    ts = Table(["lam", "residual", "sv_ratio"], [[float(a), float(b), float(c)] for a, b, c in zip(rec.lambdas, rec.residuals, rec.sv_ratio)])
    tmask = Table(["x2", "x3"], [[float(a), float(b)] for a, b in rec.points])
    rep = Report(cfg.kind, {"reconstruction": t, "slices": ts, "o_mask": tmask})
    rep.scalars = {"relative_error": rec.relative_error(f), "area_O": float(reach.area()), "n_lines": len(lines), "warnings": len(rec.warnings)}
    rep.plots.append(Plot("o_mask", "x2", ["x3"], kind="scatter", title="reachable set O"))
    rep.plots.append(Plot("slices", "lam", ["residual"], logy=True, title="data residual per lambda"))
    return rep


def _run_broken_ray(cfg, p):
    from .transforms import broken_ray_transform, trace_broken_ray

    with _Stage("setup"):
        _, _, E, _, _ = _setup(cfg)
        dom0 = _cross_section(cfg)
        a = np.deg2rad(float(p["start_angle"]))
        b = np.deg2rad(float(p["direction_angle"]))
        start = dom0.point(a)
    with _Stage("trace"):
        ray = trace_broken_ray(dom0, E, start, (np.cos(b), np.sin(b)), max_bounces=int(p["max_bounces"]))
        defects = ray.reflection_defects(dom0) if ray.n_reflections else np.zeros(0)
    tv = Table(["vertex", "x2", "x3"], [[i, float(v[0]), float(v[1])] for i, v in enumerate(ray.vertices)])
    tables = {"vertices": tv}
    rep = Report(cfg.kind, tables)
    rep.scalars = {
        "exits_in_E": ray.exits_in_E,
        "termination": ray.termination,
        "n_reflections": int(ray.n_reflections),
        "length": float(ray.length),
        "max_reflection_defect": float(np.max(np.abs(defects))) if len(defects) else 0.0,
    }
    if p["phantom"] is not None and ray.exits_in_E:
        with _Stage("transform"):
            f = _phantom(p["phantom"])
            vals = [broken_ray_transform(f, ray, lam) for lam in (cfg.lambda_list or [0.0])]
        tables["transform"] = Table(["lam", "re", "im", "err_est"], [[float(s.lam), float(s.value.real), float(s.value.imag), float(s.quadrature_error_estimate)] for s in vals])
    rep.plots.append(Plot("vertices", "x2", ["x3"], title="broken ray"))
    return rep


def _run_linearized(cfg, p):
    from .linearized import DEFAULT_H_LIST, LinearizedScene, classifier_trials

    with _Stage("setup"):
        scene = LinearizedScene.disk(float(p["scene_radius"]), float(p["c"]))
        hl = tuple(cfg.h_list) if cfg.h_list else DEFAULT_H_LIST
    with _Stage("classifier"):
        res = classifier_trials(scene, int(p["n_each"]), seed=cfg.seed + STREAM_TRIALS, h_list=hl, delta=float(p["delta"]), margin=float(p["margin"]))
    t = Table(["trial", "truth", "verdict", "rate", "center_x", "center_y", "width"])
    for i, r in enumerate(res["trials"]):
        t.rows.append([i, r["truth"], r["verdict"], float(r["rate"]), float(r["center"][0]), float(r["center"][1]), float(r["width"])])
    rep = Report(cfg.kind, {"trials": t})
    rep.scalars = {"accuracy": res["accuracy"]}
    rep.plots.append(Plot("trials", "trial", ["rate"], kind="scatter", title="fitted decay rate per trial"))
    return rep


RUNNERS = {
    "forward": _run_forward,
    "carleman-sweep": _run_carleman,
    "cgo-decay": _run_cgo,
    "transform-vanishing": _run_transform,
    "reconstruct-O": _run_reconstruct,
    "broken-ray": _run_broken_ray,
    "linearized-sb": _run_linearized,
}


def versions() -> dict:
    import scipy

    return {"python": platform.python_version(), "numpy": np.__version__, "scipy": scipy.__version__}


def run_experiment(cfg: ExperimentConfig, out_dir: str | None = None, formats=("csv", "json", "svg"), threads: int = 1) -> Report:
    """Run the configured pipeline, emit its files and a manifest."""
    out_dir = out_dir or cfg.output_dir
    t0 = time.perf_counter()
    rep = RUNNERS[cfg.kind](cfg, cfg.resolved_params())
    wall = time.perf_counter() - t0
    files = emit_report(rep, formats, out_dir)
    cfg_path = os.path.join(out_dir, "config.json")
    with open(cfg_path, "w") as fh:
        fh.write(serialize_config(cfg) + "\n")
    files.append(cfg_path)
    manifest = {
        "kind": cfg.kind,
        "seed": cfg.seed,
        "config_hash": cfg.hash(),
        "versions": versions(),
        "threads": int(threads),
        "wall_time_s": round(wall, 3),
        "scalars": rep.scalars,
        "files": {os.path.relpath(p, out_dir): file_hash(p) for p in sorted(files)},
    }
    write_json(manifest, os.path.join(out_dir, "manifest.json"))
    return rep


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="calderon-lab", description="Partial-data Calderon numerical experiments.")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, help="JSON experiment config")
        sp.add_argument("--out", default=None, help="output directory (overrides output_dir)")
        sp.add_argument("--seed", type=int, default=None, help="overrides the config seed")
        sp.add_argument("--threads", type=int, default=1, help="worker threads (recorded; sweeps run serially)")
        sp.add_argument("--formats", default="csv,json,svg", help="comma-separated subset of csv,json,svg")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if SUBCOMMANDS[args.command] != cfg.kind:
            raise ConfigError(f"subcommand {args.command!r} expects kind {SUBCOMMANDS[args.command]!r}, config has {cfg.kind!r}")
        if args.seed is not None:
            if args.seed < 0:
                raise ConfigError("seed must be a non-negative integer")
            cfg.seed = args.seed
        if args.threads < 1:
            raise ConfigError("threads must be >= 1")
        formats = tuple(s for s in args.formats.split(",") if s)
        bad = [f for f in formats if f not in FORMATS]
        if bad or not formats:
            raise ConfigError(f"unsupported formats {bad}; choose from {FORMATS}")
        rep = run_experiment(cfg, args.out, formats, args.threads)
    except (ConfigError, OSError) as e:
        print(f"validation error: {e}", file=sys.stderr)
        return 2
    except StageError as e:
        print(("numerical failure: " if e.numerical else "validation error: ") + str(e), file=sys.stderr)
        return 3 if e.numerical else 2
    print(json.dumps({"kind": cfg.kind, "scalars": rep.scalars}, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
