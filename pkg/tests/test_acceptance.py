"""End-to-end acceptance checks, one block per criterion.

Each check records its outcome in criteria.RESULTS; the terminal summary
prints one PASS/FAIL line per criterion (also printed inline with -s).
"""
import dataclasses

import numpy as np
import pytest
from click.testing import CliRunner

from artifact import tensorkit as tk
from artifact.cli import build_problem, load_config, main
from artifact.evolution import (EvolutionProblem, Reduced, continuous_dependence_probe, energy_balance_residual,
                                equilibrium_residuals, run_evolution)
from artifact.homogenize import (SweepPlan, TorusGeometry, epsilon_sweep, h_sweep, max_plastic_work_check,
                                 random_admissible_stress)
from artifact.materials import MultiphaseLaw, PhaseMaterial, YieldSet, dissipation_R
from artifact.plate import PlateGrid, make_datum
from artifact.reduction import (InterfaceJump, complete_strain, interface_dissipation, m_map,
                                reduced_ball_constants, reduced_dissipation, reduced_elasticity,
                                single_phase_jump_integral)

from criteria import record
from oracles import (brute_force_completion, dense_elastic_solve, frob, interface_grid_oracle,
                     scalar_return_map)

N_SAMPLES = 10_000


def check(key, ok, detail=""):
    record(key, ok, detail)
    print(f"\ncriterion {key}: {'PASS' if ok else 'FAIL'} {detail}")
    assert ok, detail


def _cfg(name, **over):
    cfg = load_config(name)
    for path, val in over.items():
        sect, leaf = path.split(".")
        cfg[sect][leaf] = val
    return cfg


# ---------------------------------------------------------------------------
# 1. tensor identities

def test_c1_tensor_identities():
    rng = np.random.default_rng(1)
    scale = np.exp(rng.uniform(-3, 3, size=(N_SAMPLES, 1)))
    a, b = rng.normal(size=(2, N_SAMPLES, 6)) * scale
    u, v = rng.normal(size=(2, N_SAMPLES, 3)) * scale
    na, nb = tk.norm(a), tk.norm(b)
    worst = {}
    worst["inner"] = np.max(np.abs(tk.inner(a, b) - frob(a, b)) / (na * nb))
    d = tk.dev3(a)
    worst["dev"] = max(np.max(np.abs(tk.trace(d)) / na),
                       np.max(np.abs(d + tk.trace(a)[:, None] / 3 * tk.I3 - a).max(-1) / na))
    s = tk.sym_outer(u, v)
    nu, nv = np.linalg.norm(u, axis=-1), np.linalg.norm(v, axis=-1)
    worst["sym_trace"] = np.max(np.abs(tk.trace(s) - (u * v).sum(-1)) / (nu * nv))
    ns = tk.norm(s) / (nu * nv)
    worst["sandwich"] = max(np.max(1 / np.sqrt(2) - ns), np.max(ns - 1.0), 0.0)
    hs = np.exp(rng.uniform(np.log(1e-2), np.log(10.0), size=100))
    c = rng.normal(size=(N_SAMPLES, 5)) * scale
    P = c @ tk.deviatoric_basis().T
    lam_trace = lam_round = 0.0
    for k, h in enumerate(hs):
        sl = slice(100 * k, 100 * (k + 1))
        p = tk.lambda_h_inv(P[sl], h)
        ref = np.abs(p).max(-1) * (2 + 1 / h**2)
        lam_trace = max(lam_trace, np.max(np.abs(p[:, 0] + p[:, 1] + p[:, 2] / h**2) / ref))
        lam_trace = max(lam_trace, np.max(np.abs(tk.trace(tk.lambda_h(p, h))) / ref))
        back = tk.lambda_h(tk.lambda_h_inv(a[sl], h), h)
        lam_round = max(lam_round, np.max(np.abs(back - a[sl]).max(-1) / na[sl]))
    worst["lambda_trace"] = lam_trace
    worst["lambda_roundtrip"] = lam_round
    e2 = rng.normal(size=(N_SAMPLES, 3))
    worst["embed"] = np.max(np.abs(tk.inplane(tk.embed(e2)) - e2))
    top = max(worst, key=worst.get)
    check("1", all(v <= 1e-13 for v in worst.values()), f"max rel error {worst[top]:.1e} ({top})")


# ---------------------------------------------------------------------------
# 2. dissipation ball bounds

def test_c2_dissipation_bounds():
    rng = np.random.default_rng(2)
    m = PhaseMaterial(1.0, 1.0, 0.5, 0.2, YieldSet("von_mises", 0.7))
    p = tk.dev3(rng.normal(size=(N_SAMPLES, 6)) * np.exp(rng.uniform(-3, 3, size=(N_SAMPLES, 1))))
    R = dissipation_R(m, p)
    n = tk.norm(p)
    r_K, R_K = m.yield_set.r_inner, m.yield_set.r_outer
    ok3 = np.all(r_K * n * (1 - 1e-12) <= R) and np.all(R <= R_K * n * (1 + 1e-12))
    q = rng.normal(size=(N_SAMPLES, 3)) * np.exp(rng.uniform(-3, 3, size=(N_SAMPLES, 1)))
    r_H, R_H = reduced_ball_constants(m)
    Rr = reduced_dissipation(m, q)
    nq = tk.norm(q)
    tight_lo = float(np.min(Rr / nq))
    tight_hi = float(np.max(Rr / nq))
    okr = r_H * (1 - 1e-12) <= tight_lo and tight_hi <= R_H * (1 + 1e-12)
    check("2", ok3 and okr, f"r_K={r_K:g} R_K={R_K:g}; r_H={r_H:g} R_H={R_H:.6g}, "
                            f"observed R_red/|p| in [{tight_lo:.4g}, {tight_hi:.4g}]")


# ---------------------------------------------------------------------------
# 3. out-of-plane completion

def test_c3_completion():
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(100):
        m = PhaseMaterial(rng.uniform(0.2, 5.0), rng.uniform(0.2, 5.0))
        xi = rng.normal(size=3) * np.exp(rng.uniform(-2, 2))
        lam = brute_force_completion(m, xi)
        got = complete_strain(m, xi)[[4, 5, 2]]
        worst = max(worst, float(np.max(np.abs(got - lam))))
    x33 = complete_strain(PhaseMaterial(1.0, 1.0), tk.I2)[2]
    ok = worst <= 1e-8 and abs(x33 + 2 / 7) <= 1e-10
    check("3", ok, f"max |A xi - brute force| = {worst:.1e}; unit case xi33 + 2/7 = {x33 + 2 / 7:.1e}")


# ---------------------------------------------------------------------------
# 4. interface dissipation

@pytest.mark.slow
def test_c4_interface_dissipation():
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(50):
        a = PhaseMaterial(rng.uniform(0.5, 2), rng.uniform(0.5, 2), 0.5, 0.2,
                          YieldSet("von_mises", rng.uniform(0.005, 0.05)))
        b = PhaseMaterial(rng.uniform(0.5, 2), rng.uniform(0.5, 2), 0.3, 0.1,
                          YieldSet("von_mises", rng.uniform(0.005, 0.05)))
        th = rng.uniform(0, 2 * np.pi)
        nu = (float(np.cos(th)), float(np.sin(th)))
        j = rng.normal(size=3) * np.exp(rng.uniform(-6, -2))
        val = interface_dissipation(a, b, InterfaceJump(nu, tuple(j[:2]), float(j[2])))
        ref, _ = interface_grid_oracle(a, b, nu, j[:2], j[2])
        worst = max(worst, abs(val - ref) / ref)
    soft = PhaseMaterial(1.0, 1.0, 0.5, 0.2, YieldSet("von_mises", 0.01))
    stiff = PhaseMaterial(2.0, 1.5, 0.3, 0.1, YieldSet("von_mises", 0.02))
    zero = interface_dissipation(soft, stiff, InterfaceJump((0.6, 0.8), (0.0, 0.0), 0.0))
    hom = coll = 0.0
    for _ in range(5):
        th = rng.uniform(0, 2 * np.pi)
        nu = (float(np.cos(th)), float(np.sin(th)))
        j = rng.normal(size=3) * 1e-2
        J = InterfaceJump(nu, tuple(j[:2]), float(j[2]))
        v = interface_dissipation(soft, stiff, J)
        for t in (0.5, 3.0):
            vt = interface_dissipation(soft, stiff, InterfaceJump(nu, tuple(t * j[:2]), float(t * j[2])))
            hom = max(hom, abs(vt - t * v) / (t * v))
        coll = max(coll, abs(interface_dissipation(soft, soft, J) / single_phase_jump_integral(soft, J) - 1))
    ok = worst <= 0.02 and zero == 0.0 and hom <= 1e-6 and coll <= 1e-6
    check("4", ok, f"max rel gap to grid oracle {worst:.1e}; zero jump {zero}; "
                   f"homogeneity {hom:.1e}; identical phases {coll:.1e}")


# ---------------------------------------------------------------------------
# 5. incremental solver

def test_c5a_subyield_matches_linear_elastic():
    soft = PhaseMaterial(1.0, 1.0, 0.5, 0.2, YieldSet("von_mises", 10.0))
    stiff = PhaseMaterial(2.0, 1.5, 0.3, 0.1, YieldSet("von_mises", 20.0))
    law = MultiphaseLaw([soft, stiff], TorusGeometry.stripes(2))
    grid = PlateGrid(9, 9, gamma_D=("left", "right"))
    prob = EvolutionProblem(Reduced(0.25, 1.0), law, grid, make_datum("mixed", 1e-3), np.linspace(0, 1, 5))
    tr = run_evolution(prob, residuals=False)
    disc = tr.disc
    Q = [reduced_elasticity(m).metric for m in law.phases]
    cells = prob.law.phase_at(grid.centers)
    worst = 0.0
    for s in tr.states[1:]:
        ref = dense_elastic_solve(grid, prob.nq, cells, Q, disc.datum_vector(prob.datum, s.time),
                                  grid.clamped_nodes, grid.clamped_nodes_u3)
        worst = max(worst, float(np.abs(s.u - ref).max() / np.abs(ref).max()))
        assert not np.any(s.p)
    check("5a", worst <= 1e-9, f"max rel displacement gap {worst:.1e}")


@pytest.mark.parametrize("grad", [((1.0, 0.0), (0.0, -1.0)), ((1.0, 0.0), (0.0, 1.0))],
                         ids=["pure_shear", "equibiaxial"])
def test_c5b_homogeneous_return_map(grad):
    m = PhaseMaterial(1.0, 1.0, 0.5, 0.2, YieldSet("von_mises", 0.01))
    law = MultiphaseLaw([m], TorusGeometry.single())
    grid = PlateGrid(9, 9, gamma_D=("left", "right", "bottom", "top"))
    amp, delta = 0.05, 0.5
    G = np.asarray(grad)
    prob = EvolutionProblem(Reduced(1.0, delta), law, grid, make_datum("affine", amp, gradient=G),
                            np.linspace(0, 1, 9))
    tr = run_evolution(prob, residuals=False)
    n = np.array([G[0, 0], G[1, 1], 0.5 * (G[0, 1] + G[1, 0])])
    Q = reduced_elasticity(m).metric
    Qnn, Mn = float(n @ Q @ n), float(tk.norm(m_map(n)))
    c, a = 0.0, 0.0
    worst = 0.0
    for s in tr.states[1:]:
        c, a = scalar_return_map(amp * s.time, n, Qnn, Mn, m, delta, c, a)
        worst = max(worst, float(np.abs(s.p.reshape(-1, 3) - c * n).max()), float(np.abs(s.alpha - a).max()))
    assert c != 0.0
    check("5b", worst <= 1e-8, f"max |(p, alpha) - 0D return map| {worst:.1e} ({tr.v_r[-1]:.2e} dissipated)")


def test_c5c_stability_slack():
    prob = build_problem(load_config("hardening"))
    tr = run_evolution(prob, stability_probes=100, seed=5, residuals=False)
    check("5c", min(tr.slack) >= -1e-8, f"min slack over {len(tr.slack)} steps x 100 probes {min(tr.slack):.1e}")


# ---------------------------------------------------------------------------
# 6. energy balance

def test_c6a_elastic_balance():
    tr = run_evolution(build_problem(load_config("elastic_smoke")), residuals=False)
    rels = [energy_balance_residual(tr, relative=True)]
    prob = build_problem(_cfg("hardening", **{"times.steps": 8}))
    stiff = [dataclasses.replace(m, yield_set=YieldSet("von_mises", 100.0)) for m in prob.law.phases]
    tr = run_evolution(dataclasses.replace(prob, law=dataclasses.replace(prob.law, phases=stiff)), residuals=False)
    assert tr.v_r[-1] == 0.0
    rels.append(energy_balance_residual(tr, relative=True))
    check("6a", max(rels) <= 1e-6, f"elastic relative residuals {', '.join(f'{r:.1e}' for r in rels)}")


@pytest.mark.slow
def test_c6b_plastic_balance_contracts():
    res = []
    for N in (16, 32, 64):
        tr = run_evolution(build_problem(_cfg("hardening", **{"times.steps": N})), residuals=False)
        res.append(energy_balance_residual(tr, relative=True))
    factors = [a / b for a, b in zip(res, res[1:])]
    check("6b", min(factors) >= 1.5, f"residuals {', '.join(f'{r:.2e}' for r in res)}; "
                                      f"contraction {', '.join(f'{f:.2f}' for f in factors)}")


# ---------------------------------------------------------------------------
# 7. continuous dependence

def test_c7_continuous_dependence():
    cases = {}
    for label, n, scale in (("base", 17, 1.0), ("refined", 33, 1.0), ("rescaled", 17, 2.0)):
        cfg = _cfg("hardening", **{"grid.nx": n, "grid.ny": n})
        prob = build_problem(cfg)
        w1 = prob.datum if scale == 1.0 else prob.datum.scaled(scale)
        cases[label] = continuous_dependence_probe(prob, w1, w1.scaled(1.05))
    var = {}
    for key in ("elastic", "plastic", "alpha"):
        vals = np.array([c[key] for c in cases.values()])
        var[key] = float(vals.max() / vals.min() - 1) if np.all(np.isfinite(vals)) and vals.min() > 0 else np.inf
    ok = all(v < 0.2 for v in var.values())
    vals = ", ".join(f"{k} {cases['base'][k]:.3g} (spread {v:.0%})" for k, v in var.items())
    check("7", ok, vals)


# ---------------------------------------------------------------------------
# 8. equilibrium residual order

def test_c8_equilibrium_order():
    lines, worst = [], np.inf
    for name, steps in (("hardening", 4), ("elastic_smoke", 4)):
        res = []
        for n in (9, 17, 33):
            cfg = _cfg(name, **{"grid.nx": n, "grid.ny": n, "times.steps": steps})
            prob = build_problem(cfg)
            tr = run_evolution(prob, residuals=False)
            assert (tr.v_r[-1] > 0) == (name == "hardening")
            res.append(equilibrium_residuals(tr.final_state, prob, tr.disc))
        res = np.array(res)
        worst = min(worst, float(np.log2(res[:-1] / res[1:]).min()))
        lines.append(f"{name}: membrane {', '.join(f'{r:.1e}' for r in res[:, 0])}, "
                     f"bending {', '.join(f'{r:.1e}' for r in res[:, 1])}")
    check("8", worst >= 1.0, "; ".join(lines) + f"; min order {worst:.2f}")


# ---------------------------------------------------------------------------
# 9 and 10. sweeps

def _plan(name, **kw):
    cfg = load_config(name)
    sw = cfg["sweep"]
    return SweepPlan(sw.get("eps_values", [1.0]), build_problem(cfg), sw["delta_law"], sw.get("h_values", []),
                     sw["stability_probes"], 1, cfg["seed"], delta_const=cfg["mode"]["delta"], **kw)


@pytest.fixture(scope="module")
def stripes_sweep():
    return epsilon_sweep(_plan("stripes_eps"))


def test_c9_uniform_bounds(stripes_sweep):
    rep = stripes_sweep
    K = rep["datum_bound"]
    worst = max(max(r["sup_q_el"], r["v_r"], r["sup_delta_p2"], r["sup_delta_alpha2"]) for r in rep["runs"])
    dq = [r["dq_hard"] for r in rep["runs"]]
    mono = all(b < a for a, b in zip(dq, dq[1:]))
    ok = rep["bounded"] and worst <= K and mono and all(d > 0 for d in dq)
    check("9", ok, f"largest controlled quantity {worst:.2e} <= bound {K:.2e}; "
                   f"delta Q_hard {', '.join(f'{d:.2e}' for d in dq)}")


def test_c10a_eps_sweep(stripes_sweep):
    rep = stripes_sweep
    ok = rep["energy_differences_nonincreasing"] and rep["stress_differences_nonincreasing"]
    check("10a", ok, "energy diffs " + ", ".join(f"{d:.2e}" for d in rep["energy_differences"])
          + "; stress diffs " + ", ".join(f"{d:.2e}" for d in rep["stress_differences"]))


@pytest.mark.slow
def test_c10b_h_sweep():
    rep = h_sweep(_plan("h_sweep"))
    ok = rep["energy_differences_nonincreasing"] and rep["stress_differences_nonincreasing"]
    check("10b", ok, "energy diffs " + ", ".join(f"{d:.2e}" for d in rep["energy_differences"])
          + "; stress diffs " + ", ".join(f"{d:.2e}" for d in rep["stress_differences"]))


def test_c10c_single_phase_invariance():
    rep = epsilon_sweep(_plan("single_eps"))
    ok = rep["invariant"]
    check("10c", ok, f"energy spread {rep['energy_spread_rel']:.1e}, stress spread "
                     f"{rep['stress_spread_rel']:.1e} (tolerance {rep['invariance_tol']:.0e})")


# ---------------------------------------------------------------------------
# 11. maximum plastic work

def test_c11_max_plastic_work():
    # the run's own stress lies in K only without hardening
    cfg = _cfg("hardening", **{"mode.delta": 0.0, "times.steps": 8})
    tr = run_evolution(build_problem(cfg), residuals=False)
    scale = max(tr.q_el[-1], tr.v_r[-1])
    rng = np.random.default_rng(11)
    slacks = {"zero": max_plastic_work_check(tr, np.zeros((tr.disc.npts, 3))),
              "own": max_plastic_work_check(tr, tr.stresses[-1])}
    rand = [max_plastic_work_check(tr, random_admissible_stress(tr, rng)) for _ in range(10)]
    worst = min(min(slacks.values()), min(rand)) / scale
    ok = worst >= -1e-6 and tr.v_r[-1] > 0
    check("11", ok, f"slack / energy scale: zero {slacks['zero'] / scale:.2e}, own {slacks['own'] / scale:.2e}, "
                    f"random min {min(rand) / scale:.2e}")


# ---------------------------------------------------------------------------
# 12. determinism

def test_c12_byte_identical(tmp_path):
    runner = CliRunner()
    for d in ("a", "b"):
        res = runner.invoke(main, ["run", "hardening", "--seed", "3", "--out", str(tmp_path / d)])
        assert res.exit_code == 0, res.output
    same = all((tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
               for f in ("hardening_trace.csv", "hardening_fields.csv"))
    check("12", same, "trace and field CSVs identical across two runs")
