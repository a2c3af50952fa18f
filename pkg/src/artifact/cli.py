"""Command line driver: JSON scenario configs, runs, sweeps and effective-law tables.

Every artifact starts with a header line carrying the sha256 of the resolved
config, so identical configs and seeds produce byte-identical files.
"""
from __future__ import annotations

import copy
import csv
import hashlib
import io
import json
import sys
from pathlib import Path

import click
import jsonschema
import numpy as np

from . import homogenize as hom
from . import tensorkit as tk
from .evolution import (EvolutionProblem, Reduced, Scaled3D, energy_balance_residual, run_evolution,
                        state_energies, to_tensor)
from .materials import MultiphaseLaw, PhaseMaterial, YieldSet
from .plate import PlateGrid, _ramp, admissibility_check, make_datum
from .reduction import InterfaceJump, interface_dissipation, reduced_elasticity, single_phase_jump_integral

CONFIG_DIR = Path(__file__).parent / "configs"

_pos = {"type": "number", "exclusiveMinimum": 0}
_nonneg = {"type": "number", "minimum": 0}

SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["phases", "grid", "datum", "times", "mode"],
    "properties": {
        "name": {"type": "string"},
        "seed": {"type": "integer", "minimum": 0},
        "phases": {
            "type": "array", "minItems": 1, "maxItems": 3,
            "items": {
                "type": "object", "additionalProperties": False, "required": ["mu", "k"],
                "properties": {
                    "mu": _pos, "k": _pos, "h_kin": _nonneg, "h_iso": _nonneg,
                    "yield": {
                        "type": "object", "additionalProperties": False,
                        "properties": {"kind": {"enum": ["von_mises", "tresca"]}, "radius": _pos},
                    },
                },
            },
        },
        "torus": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "pattern": {"enum": ["single", "stripes", "checkerboard", "file"]},
                "resolution": {"type": "integer", "minimum": 1},
                "fraction": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "axis": {"enum": [0, 1]},
                "path": {"type": "string"},
            },
        },
        "grid": {
            "type": "object", "additionalProperties": False, "required": ["nx", "ny"],
            "properties": {
                "nx": {"type": "integer", "minimum": 3, "maximum": 33},
                "ny": {"type": "integer", "minimum": 3, "maximum": 33},
                "Lx": _pos, "Ly": _pos,
                "gamma_D": {"type": "array", "minItems": 1, "uniqueItems": True,
                            "items": {"enum": ["left", "right", "bottom", "top"]}},
            },
        },
        "datum": {
            "type": "object", "additionalProperties": False, "required": ["family"],
            "properties": {
                "family": {"enum": ["membrane", "bending", "mixed", "affine", "zero"]},
                "amplitude": {"type": "number"},
                "profile": {"enum": ["linear", "cyclic", "constant"]},
                "gradient": {"type": "array", "minItems": 2, "maxItems": 2,
                             "items": {"type": "array", "minItems": 2, "maxItems": 2,
                                       "items": {"type": "number"}}},
            },
        },
        "loads": {
            "type": "object", "additionalProperties": False, "required": ["force"],
            "properties": {
                "force": {"type": "array", "minItems": 3, "maxItems": 3, "items": {"type": "number"}},
                "profile": {"enum": ["linear", "cyclic", "constant"]},
            },
        },
        "times": {
            "type": "object", "additionalProperties": False, "required": ["steps"],
            "properties": {"T": _pos, "steps": {"type": "integer", "minimum": 1, "maximum": 64}},
        },
        "mode": {
            "type": "object", "additionalProperties": False, "required": ["kind"],
            "properties": {
                "kind": {"enum": ["reduced", "scaled3d"]},
                "h": _pos, "epsilon": _pos, "delta": _nonneg,
            },
        },
        "alpha0": _nonneg,
        "solver": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "tol_obj": _pos, "max_iters": {"type": "integer", "minimum": 1},
                "linear_solver": {"enum": ["direct", "cg"]}, "tol_lin": _pos,
                "nq": {"type": "integer", "minimum": 1, "maximum": 5},
            },
        },
        "audit": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "stability_probes": {"type": "integer", "minimum": 0},
                "slack_tol": _nonneg,
                "elastic_balance_tol": _nonneg,
                "plastic_balance_tol": _nonneg,
                "snapshot": {"type": "boolean"},
            },
        },
        "sweep": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "eps_values": {"type": "array", "minItems": 1, "items": _pos},
                "h_values": {"type": "array", "minItems": 1, "items": _pos},
                "delta_law": {"enum": ["eps", "eps2", "sqrt", "const"]},
                "stability_probes": {"type": "integer", "minimum": 0},
            },
        },
        "effective_law": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "n_normals": {"type": "integer", "minimum": 1},
                "n_jumps": {"type": "integer", "minimum": 1},
                "n_iter": {"type": "integer", "minimum": 1},
            },
        },
    },
}

DEFAULTS = {
    "name": "scenario",
    "seed": 0,
    "torus": {"pattern": "single", "resolution": 2, "fraction": 0.5, "axis": 0},
    "grid": {"Lx": 1.0, "Ly": 1.0, "gamma_D": ["left"]},
    "datum": {"amplitude": 1e-3, "profile": "linear"},
    "times": {"T": 1.0},
    "mode": {"epsilon": 1.0, "delta": 1.0},
    "alpha0": 0.0,
    "solver": {"tol_obj": 1e-10, "max_iters": 200, "linear_solver": "direct", "tol_lin": 1e-12},
    "audit": {"stability_probes": 20, "slack_tol": 1e-8, "elastic_balance_tol": 1e-6,
              "plastic_balance_tol": 0.05, "snapshot": True},
    "sweep": {"delta_law": "eps", "stability_probes": 6},
    "effective_law": {"n_normals": 4, "n_jumps": 3, "n_iter": 200},
}
PHASE_DEFAULTS = {"h_kin": 0.0, "h_iso": 0.0, "yield": {"kind": "von_mises", "radius": 1.0}}


class ConfigError(ValueError):
    pass


def _merge(base, extra):
    out = copy.deepcopy(base)
    for k, v in extra.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def _path(err):
    return ".".join(str(p) for p in err.absolute_path) or "<root>"


def resolve_config(raw: dict) -> dict:
    """Validate against SCHEMA and fill defaults; errors name the field path."""
    errors = sorted(jsonschema.Draft7Validator(SCHEMA).iter_errors(raw), key=lambda e: [str(p) for p in e.absolute_path])
    if errors:
        e = errors[0]
        raise ConfigError(f"{_path(e)}: {e.message}")
    cfg = _merge(DEFAULTS, raw)
    cfg["phases"] = [_merge(PHASE_DEFAULTS, p) for p in raw["phases"]]
    mode = cfg["mode"]
    if mode["kind"] == "scaled3d" and "h" not in mode:
        raise ConfigError("mode.h: required for the scaled3d mode")
    if mode["kind"] == "scaled3d" and ("epsilon" in raw["mode"] or "delta" in raw["mode"]):
        raise ConfigError("mode: epsilon and delta apply to the reduced mode only")
    if "loads" in cfg and mode["kind"] == "reduced":
        raise ConfigError("loads: the reduced mode runs without applied loads")
    if cfg["torus"]["pattern"] == "file" and "path" not in cfg["torus"]:
        raise ConfigError("torus.path: required for the file pattern")
    for i, ph in enumerate(cfg["phases"]):
        if ph["yield"]["kind"] == "tresca" and mode["kind"] == "reduced":
            raise ConfigError(f"phases.{i}.yield.kind: tresca is available in the scaled3d mode only")
    return cfg


def load_config(path) -> dict:
    path = Path(path)
    if not path.exists():
        # bundled configs can be named with or without the .json suffix
        for cand in (CONFIG_DIR / path.name, CONFIG_DIR / f"{path.name}.json"):
            if cand.exists():
                path = cand
                break
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    cfg = resolve_config(raw)
    cfg["_base"] = str(path.parent)
    return cfg


def config_hash(cfg) -> str:
    clean = {k: v for k, v in cfg.items() if not k.startswith("_")}
    return hashlib.sha256(json.dumps(clean, sort_keys=True).encode()).hexdigest()


# ---------------------------------------------------------------------------
# building objects

def build_torus(cfg):
    t = cfg["torus"]
    if t["pattern"] == "single":
        return hom.TorusGeometry.single()
    if t["pattern"] == "stripes":
        return hom.TorusGeometry.stripes(t["resolution"], t["fraction"], t["axis"])
    if t["pattern"] == "checkerboard":
        return hom.TorusGeometry.checkerboard(t["resolution"])
    return hom.TorusGeometry.from_file(Path(cfg.get("_base", ".")) / t["path"])


def build_phases(cfg):
    return [PhaseMaterial(p["mu"], p["k"], p["h_kin"], p["h_iso"], YieldSet(p["yield"]["kind"], p["yield"]["radius"]))
            for p in cfg["phases"]]


def build_problem(cfg, mode=None) -> EvolutionProblem:
    try:
        law = MultiphaseLaw(build_phases(cfg), build_torus(cfg))
    except ValueError as exc:
        raise ConfigError(f"phases: {exc}") from exc
    g = cfg["grid"]
    grid = PlateGrid(g["nx"], g["ny"], g["Lx"], g["Ly"], tuple(g["gamma_D"]))
    d = cfg["datum"]
    T = cfg["times"]["T"]
    datum = make_datum(d["family"], d["amplitude"], d["profile"], T, d.get("gradient"))
    times = np.linspace(0.0, T, cfg["times"]["steps"] + 1)
    m = cfg["mode"]
    if mode is None:
        mode = Scaled3D(m["h"]) if m["kind"] == "scaled3d" else Reduced(m["epsilon"], m["delta"])
    loads = None
    if "loads" in cfg:
        f = np.asarray(cfg["loads"]["force"], dtype=float)
        ramp, _ = _ramp(cfg["loads"].get("profile", "linear"), T)
        loads = lambda t, x: ramp(t) * np.broadcast_to(f, x.shape[:-1] + (3,))
    s = cfg["solver"]
    try:
        return EvolutionProblem(mode, law, grid, datum, times, loads=loads, nq=s.get("nq"), alpha0=cfg["alpha0"],
                                tol_obj=s["tol_obj"], max_iters=s["max_iters"],
                                linear_solver=s["linear_solver"], tol_lin=s["tol_lin"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


# ---------------------------------------------------------------------------
# output

def _fmt(v):
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    return "%.17g" % float(v)


def write_csv(path, header_hash, columns, rows):
    buf = io.StringIO()
    buf.write(f"# config_sha256={header_hash}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(v) if not isinstance(v, str) else v for v in r])
    Path(path).write_text(buf.getvalue())


def write_json(path, header_hash, payload):
    body = {"config_sha256": header_hash, **payload}
    Path(path).write_text(json.dumps(body, indent=2, sort_keys=True, default=float) + "\n")


def trace_csv(trace, path, h):
    write_csv(path, h, trace.COLUMNS, trace.rows())


SNAPSHOT_COLUMNS = ("x", "y", "x3_index", "u1", "u2", "u3", "e11", "e22", "e12", "s11", "s22", "s12", "alpha")


def snapshot_rows(trace):
    """Per cell and x3 point: cell-averaged displacements, in-plane elastic
    strain and stress tensors, hardening variable."""
    prob, disc, s = trace.problem, trace.disc, trace.final_state
    g = prob.grid
    N = g.n_nodes
    avg = g.ops["avg"]
    u = np.stack([avg @ s.u[k * N:(k + 1) * N] for k in range(3)], -1)
    _, _, sig, e = state_energies(disc, s)
    sig = to_tensor(sig)
    if sig.shape[-1] == 6:
        sig, e = tk.inplane(sig), tk.inplane(e)
    alpha = s.alpha.reshape(-1)
    nq = prob.nq
    for c, (x, y) in enumerate(g.centers):
        for q in range(nq):
            n = c * nq + q
            yield (x, y, q, *u[c], *e[n], *sig[n], alpha[n])


def run_audits(trace, cfg):
    a = cfg["audit"]
    failures = []
    prob = trace.problem
    for st in trace.states:
        rep = admissibility_check(st, prob.law, prob.datum)
        if not rep.ok:
            failures.append(f"admissibility at t={st.time:g}: violation {rep.max_violation:.3e}")
            break
    plastic = trace.v_r[-1] > 0
    bal = energy_balance_residual(trace, relative=True)
    tol = a["plastic_balance_tol"] if plastic else a["elastic_balance_tol"]
    if bal > tol:
        failures.append(f"energy balance: relative residual {bal:.3e} > {tol:g}")
    if min(trace.slack) < -a["slack_tol"]:
        failures.append(f"stability: slack {min(trace.slack):.3e} < -{a['slack_tol']:g}")
    summary = {
        "plastic": bool(plastic),
        "balance_relative": bal,
        "min_stability_slack": min(trace.slack),
        "max_res_membrane": max(trace.res_membrane),
        "max_res_bending": max(trace.res_bending),
        "final_energy": trace.total_energy(len(trace.t) - 1),
        "dissipation": trace.v_r[-1],
        "newton_iterations": int(sum(trace.iterations)),
        "failures": failures,
        "passed": not failures,
    }
    return summary


def _out_dir(out):
    p = Path(out)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _fail(msg):
    click.echo(f"error: {msg}", err=True)
    sys.exit(2)


def _load(config, seed):
    try:
        cfg = load_config(config)
    except (ConfigError, FileNotFoundError) as exc:
        _fail(str(exc))
    if seed is not None:
        cfg["seed"] = seed
    return cfg


# ---------------------------------------------------------------------------
# commands

@click.group()
@click.version_option(package_name="artifact")
def main():
    """Quasistatic thin-plate elastoplasticity with periodic microstructure."""


@main.command()
@click.argument("config")
@click.option("--out", default="out", show_default=True, help="Output directory.")
@click.option("--seed", type=int, default=None, help="Override the config seed.")
@click.option("--threads", type=int, default=1, show_default=True, help="Unused for single runs.")
def run(config, out, seed, threads):
    """Run one evolution and write the trace, a field snapshot and an audit summary."""
    cfg = _load(config, seed)
    try:
        prob = build_problem(cfg)
    except ConfigError as exc:
        _fail(str(exc))
    h = config_hash(cfg)
    tr = run_evolution(prob, stability_probes=cfg["audit"]["stability_probes"], seed=cfg["seed"])
    d = _out_dir(out)
    name = cfg["name"]
    trace_csv(tr, d / f"{name}_trace.csv", h)
    if cfg["audit"]["snapshot"]:
        write_csv(d / f"{name}_fields.csv", h, SNAPSHOT_COLUMNS, snapshot_rows(tr))
    summary = run_audits(tr, cfg)
    write_json(d / f"{name}_audit.json", h, summary)
    click.echo(f"{name}: balance {summary['balance_relative']:.3e}, slack {summary['min_stability_slack']:.3e}, "
               f"V_R {summary['dissipation']:.3e}")
    if not summary["passed"]:
        for f in summary["failures"]:
            click.echo(f"audit failed: {f}", err=True)
        sys.exit(1)


SWEEP_RUN_COLUMNS = ("param", "delta", "energy", "Q_el", "dQ_hard", "V_R", "sup_Q_el", "sup_delta_p2",
                     "sup_delta_alpha2", "avg_s11", "avg_s22", "avg_s12", "balance_relative", "min_slack")


def _plan(cfg, threads):
    sw = cfg["sweep"]
    return hom.SweepPlan(sw.get("eps_values", [1.0]), build_problem(cfg), sw["delta_law"],
                         sw.get("h_values", []), sw["stability_probes"], threads, cfg["seed"],
                         delta_const=cfg["mode"]["delta"])


@main.command()
@click.argument("config")
@click.option("--kind", type=click.Choice(["eps", "h"]), required=True)
@click.option("--out", default="out", show_default=True)
@click.option("--seed", type=int, default=None)
@click.option("--threads", type=int, default=1, show_default=True, help="Parallel runs.")
def sweep(config, kind, out, seed, threads):
    """eps- or h-sweep with the decreasing-difference audit."""
    cfg = _load(config, seed)
    sw = cfg["sweep"]
    key = "eps_values" if kind == "eps" else "h_values"
    if key not in sw:
        _fail(f"sweep.{key}: required for --kind {kind}")
    if kind == "h" and cfg["mode"]["kind"] != "reduced":
        _fail("mode.kind: the h-sweep template is the reduced limit scenario")
    try:
        plan = _plan(cfg, threads)
        rep = hom.epsilon_sweep(plan) if kind == "eps" else hom.h_sweep(plan)
    except (ValueError, ConfigError) as exc:
        _fail(str(exc))
    except hom.SweepError as exc:
        click.echo(f"audit failed: {exc}", err=True)
        sys.exit(1)
    h = config_hash(cfg)
    d = _out_dir(out)
    name = cfg["name"]
    rows = []
    for r in rep["runs"]:
        rows.append((r["eps"] if kind == "eps" else r["h"], r.get("delta", 1.0), r["energy"], r["q_el"],
                     r["dq_hard"], r["v_r"], r["sup_q_el"], r["sup_delta_p2"], r["sup_delta_alpha2"],
                     *r["avg_stress"], r["balance_rel"], r["min_slack"]))
    write_csv(d / f"{name}_sweep_{kind}.csv", h, SWEEP_RUN_COLUMNS, rows)
    if kind == "eps":
        urows = []
        for r in rep["runs"]:
            for ix, jx in np.ndindex(*np.shape(r["unfolded_stress"])[:2]):
                urows.append((r["eps"], ix, jx, *r["unfolded_stress"][ix][jx]))
        write_csv(d / f"{name}_unfolded.csv", h, ("eps", "pixel_i", "pixel_j", "s11", "s22", "s12"), urows)
    summary = {k: v for k, v in rep.items() if k not in ("traces",)}
    for r in summary["runs"]:
        r.pop("unfolded_stress", None)
    write_json(d / f"{name}_sweep_{kind}.json", h, summary)
    click.echo(f"{name}: {kind}-sweep {'passed' if rep['passed'] else 'FAILED'}")
    if not rep["passed"]:
        sys.exit(1)


def effective_law_tables(cfg):
    """(c_red rows, R_ij rows) for the configured phases."""
    phases = build_phases(cfg)
    el = cfg["effective_law"]
    c_rows = []
    for i, m in enumerate(phases):
        c = reduced_elasticity(m, i).c_red
        for a, b in np.ndindex(3, 3):
            c_rows.append((i, a, b, c[a, b]))
    rng = np.random.default_rng(cfg["seed"])
    angles = np.pi * np.arange(el["n_normals"]) / el["n_normals"]
    jumps = [np.zeros(3)] + [rng.normal(size=3) * 1e-2 for _ in range(el["n_jumps"])]
    r_rows = []
    for i in range(len(phases)):
        for j in range(i, len(phases)):
            for th in angles:
                nu = (float(np.cos(th)), float(np.sin(th)))
                for jv in jumps:
                    jump = InterfaceJump(nu, (float(jv[0]), float(jv[1])), float(jv[2]))
                    val = interface_dissipation(phases[i], phases[j], jump, n_iter=el["n_iter"], seed=cfg["seed"])
                    single = single_phase_jump_integral(phases[i], jump) if i == j else float("nan")
                    r_rows.append((i, j, nu[0], nu[1], jv[0], jv[1], jv[2], val, single))
    return c_rows, r_rows


@main.command("effective-law")
@click.argument("config")
@click.option("--out", default="out", show_default=True)
@click.option("--seed", type=int, default=None)
@click.option("--threads", type=int, default=1, show_default=True)
def effective_law(config, out, seed, threads):
    """Tabulate reduced elasticity matrices and interface dissipation samples."""
    cfg = _load(config, seed)
    try:
        c_rows, r_rows = effective_law_tables(cfg)
    except ValueError as exc:
        _fail(str(exc))
    h = config_hash(cfg)
    d = _out_dir(out)
    name = cfg["name"]
    write_csv(d / f"{name}_c_red.csv", h, ("phase", "row", "col", "value"), c_rows)
    write_csv(d / f"{name}_R_interface.csv", h,
              ("phase_i", "phase_j", "nu1", "nu2", "c1", "c2", "c_hat", "R_ij", "single_phase"), r_rows)
    click.echo(f"{name}: {len(c_rows)} c_red entries, {len(r_rows)} interface samples")


@main.command()
@click.option("--quick", is_flag=True, help="Skip the slow sweeps.")
def selftest(quick):
    """Run the acceptance suite (needs pytest and a source checkout)."""
    here = Path(__file__).resolve()
    target = None
    for parent in here.parents:
        cand = parent / "tests" / "test_acceptance.py"
        if cand.exists():
            target = cand
            break
    if target is None:
        _fail("tests/test_acceptance.py not found; selftest needs a source checkout")
    try:
        import pytest
    except ImportError:
        _fail("selftest needs pytest")
    args = [str(target), "-q", "-s"]
    if quick:
        args += ["-m", "not slow"]
    sys.exit(pytest.main(args))


if __name__ == "__main__":
    main()
