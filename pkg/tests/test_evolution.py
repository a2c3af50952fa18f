import numpy as np
import pytest

from artifact import tensorkit as tk
from artifact.evolution import (ConvergenceError, EvolutionProblem, PointLaw, Reduced, Scaled3D,
                                continuous_dependence_probe, dissipation_variation, energy_balance_residual,
                                equilibrium_residuals, run_evolution, safe_load_pairing_check, stability_check)
from artifact.homogenize import TorusGeometry
from artifact.materials import MultiphaseLaw, PhaseMaterial, YieldSet
from artifact.plate import admissibility_check, make_datum
from artifact.reduction import reduced_dissipation


def classical_radial_return(m, delta, eps, q0, a0):
    """Textbook 3D von Mises return with linear kinematic/isotropic hardening, tensor form."""
    mu, r = m.mu, m.yield_set.radius
    hk, hi = delta * m.h_kin, delta * m.h_iso
    xi = 2 * mu * tk.dev3(eps - q0) - hk * q0
    nx = tk.norm(xi)
    f = nx - r * (1 + hi * a0)
    if f <= 0:
        return q0, a0
    dg = f / (2 * mu + hk + hi * r**2)
    return q0 + dg * xi / nx, a0 + r * dg


def test_point_law_3d_matches_classical_return(rng):
    m = PhaseMaterial(1.3, 2.1, 0.4, 0.7, YieldSet("von_mises", 0.05))
    pl = PointLaw(m, "scaled3d", 0.8)
    eps = rng.normal(size=(200, 6)) * 0.05
    q0 = tk.dev3(rng.normal(size=(200, 6))) * 0.01
    a0 = rng.uniform(0, 0.02, size=200)
    q, a, psi, s, T = pl.update(eps, q0, a0)
    for k in range(200):
        qo, ao = classical_radial_return(m, 0.8, eps[k], q0[k], a0[k])
        np.testing.assert_allclose(q[k], qo, atol=1e-12)
        assert a[k] == pytest.approx(ao, abs=1e-12)


def test_point_law_tangent_is_derivative(rng):
    m = PhaseMaterial(1.0, 1.0, 0.5, 0.2, YieldSet("von_mises", 0.01))
    for kind in ("reduced", "scaled3d"):
        pl = PointLaw(m, kind, 0.7)
        nc = pl.Mel.shape[0]
        eps = rng.normal(size=(20, nc)) * 0.05
        q0 = np.zeros((20, nc))
        a0 = np.zeros(20)
        _, _, _, s, T = pl.update(eps, q0, a0)
        h = 1e-7
        for i in range(nc):
            d = np.zeros(nc)
            d[i] = h
            sp = pl.update(eps + d, q0, a0, tangent=False)[3]
            sm = pl.update(eps - d, q0, a0, tangent=False)[3]
            np.testing.assert_allclose((sp - sm) / (2 * h), T[:, :, i], atol=1e-5)


def test_point_law_reduced_minimises(rng):
    # the returned q beats random perturbations of the condensed energy
    m = PhaseMaterial(1.0, 1.0, 0.5, 0.2, YieldSet("von_mises", 0.01))
    pl = PointLaw(m, "reduced", 0.5)
    eps = rng.normal(size=(10, 3)) * 0.05
    q0 = np.zeros((10, 3))
    a0 = np.zeros(10)
    q, a, psi, s, _ = pl.update(eps, q0, a0)

    def energy(qq):
        e = eps - qq
        x = reduced_dissipation(m, qq - q0)
        return (0.5 * np.einsum("ni,ij,nj->n", e, pl.Mel, e) + 0.5 * pl.hk * np.einsum("ni,ij,nj->n", qq, pl.N, qq)
                + x + 0.5 * pl.hi * (a0 + x) ** 2)

    np.testing.assert_allclose(energy(q), psi, rtol=1e-12)
    for _ in range(50):
        assert np.all(energy(q + rng.normal(size=q.shape) * 1e-4) >= psi - 1e-15)


def test_tresca_reduced_refused():
    with pytest.raises(NotImplementedError):
        PointLaw(PhaseMaterial(yield_set=YieldSet("tresca", 1.0)), "reduced", 1.0)


def _problem(mode, law, grid, datum, n=4, **kw):
    return EvolutionProblem(mode, law, grid, datum, np.linspace(0, 1, n + 1), **kw)


def test_problem_validation(soft, small_grid, mixed_datum):
    law = MultiphaseLaw([soft], TorusGeometry.single())
    with pytest.raises(ValueError):
        Reduced(1.0, -0.1)
    with pytest.raises(ValueError):
        Scaled3D(0.0)
    with pytest.raises(ValueError):
        EvolutionProblem(Reduced(), law, small_grid, mixed_datum, [0.0, 0.5, 0.5])
    with pytest.raises(ValueError):
        EvolutionProblem(Reduced(), law, small_grid, mixed_datum, [0.1, 0.5])
    with pytest.raises(ValueError):
        EvolutionProblem(Reduced(), law, small_grid, mixed_datum, [0, 1], loads=lambda t, x: 0 * x)
    with pytest.raises(ValueError):
        EvolutionProblem(Scaled3D(0.1), law, small_grid, mixed_datum, [0, 1], nq=2)
    assert EvolutionProblem(Scaled3D(0.1), law, small_grid, mixed_datum, [0, 1]).nq == 3


def test_newton_failure_reports_gap(soft, small_grid, mixed_datum):
    law = MultiphaseLaw([soft], TorusGeometry.single())
    prob = _problem(Reduced(1, 1), law, small_grid, mixed_datum, max_iters=1)
    with pytest.raises(ConvergenceError) as err:
        run_evolution(prob)
    assert err.value.gap > 0


@pytest.mark.parametrize("mode", [Reduced(0.5, 0.5), Scaled3D(0.1)])
def test_run_invariants(soft, stiff, small_grid, mixed_datum, mode):
    law = MultiphaseLaw([soft, stiff], TorusGeometry.stripes(2))
    prob = _problem(mode, law, small_grid, mixed_datum)
    tr = run_evolution(prob, stability_probes=6)
    assert tr.v_r[-1] > 0
    for s in tr.states:
        assert admissibility_check(s, prob.law, prob.datum).ok
        if prob.kind == "scaled3d":
            # stored plastic strain is the rescaled deviator
            np.testing.assert_allclose(tk.trace(s.p), 0, atol=1e-13)
            np.testing.assert_allclose(tk.trace(tk.lambda_h(s.p_unscaled, mode.h)), 0, atol=1e-13)
    assert min(tr.slack) >= -1e-8
    assert all(np.diff(tr.v_r) >= 0)
    # dissipation recorded per step equals the generalised variation over the history
    disc = tr.disc

    def diss(dq):
        rows = dq.reshape(disc.npts, -1)
        return np.array([disc.laws[int(ph)].dissipation(x[None])[0] for x, ph in zip(rows, disc.phase)])
    ps = [s.p for s in tr.states]
    al = [s.alpha.reshape(-1) for s in tr.states]
    var = dissipation_variation(ps, al, 0, len(ps) - 1, diss, weights=disc.w)
    assert var == pytest.approx(tr.v_r[-1], rel=1e-10)


def test_dissipation_variation_detects_inadmissible():
    diss = lambda dq: np.abs(np.asarray(dq)).sum(-1)
    p = [np.zeros((2, 1)), np.ones((2, 1))]
    assert dissipation_variation(p, [np.zeros(2), np.ones(2)], 0, 1, diss) == 2.0
    assert np.isinf(dissipation_variation(p, [np.zeros(2), 0.5 * np.ones(2)], 0, 1, diss))
    assert dissipation_variation(p, [np.zeros(2), np.ones(2)], 1, 1, diss) == 0.0
    with pytest.raises(ValueError):
        dissipation_variation(p, p, 1, 0, diss)


def test_continuous_dependence_refusals(soft, small_grid, mixed_datum):
    law = MultiphaseLaw([soft], TorusGeometry.single())
    prob = _problem(Reduced(1.0, 0.0), law, small_grid, mixed_datum)
    with pytest.raises(ValueError):
        continuous_dependence_probe(prob, mixed_datum, mixed_datum.scaled(1.1))
    prob = _problem(Reduced(1.0, 1.0), law, small_grid, mixed_datum)
    with pytest.raises(ValueError):
        continuous_dependence_probe(prob, mixed_datum, mixed_datum)
    r = continuous_dependence_probe(prob, mixed_datum, mixed_datum.scaled(1.1))
    assert all(np.isfinite(v) for v in r.values())


def test_safe_load_pairing(soft, small_grid):
    law = MultiphaseLaw([soft], TorusGeometry.single())
    loads = lambda t, x: t * np.broadcast_to([1e-4, -2e-4, 3e-4], x.shape[:-1] + (3,))
    prob = _problem(Scaled3D(0.2), law, small_grid, make_datum("membrane", 0.02), n=2, loads=loads)
    tr = run_evolution(prob)
    for seed in range(3):
        assert safe_load_pairing_check(tr.final_state, prob, seed=seed) <= 1e-10


def test_perfect_plasticity_run(soft, small_grid, mixed_datum):
    law = MultiphaseLaw([soft], TorusGeometry.single())
    prob = _problem(Reduced(1.0, 0.0), law, small_grid, mixed_datum)
    tr = run_evolution(prob, stability_probes=6)
    assert tr.v_r[-1] > 0 and min(tr.slack) >= -1e-8
    assert all(q == 0.0 for q in tr.dq_hard)


def test_cg_solver_agrees_with_direct(soft, small_grid, mixed_datum):
    law = MultiphaseLaw([soft], TorusGeometry.single())
    a = run_evolution(_problem(Reduced(1, 1), law, small_grid, mixed_datum, n=2), residuals=False)
    b = run_evolution(_problem(Reduced(1, 1), law, small_grid, mixed_datum, n=2, linear_solver="cg"), residuals=False)
    np.testing.assert_allclose(a.final_state.u, b.final_state.u, atol=1e-9 * np.abs(a.final_state.u).max())


def test_cyclic_path_keeps_dissipating(soft, small_grid):
    law = MultiphaseLaw([soft], TorusGeometry.single())
    prob = _problem(Reduced(1, 1), law, small_grid, make_datum("membrane", 0.05, "cyclic"), n=8)
    tr = run_evolution(prob, residuals=False)
    # plastic flow on both the loading and the unloading branch
    assert tr.d_r[2] > 0 and tr.d_r[-1] > 0
    assert energy_balance_residual(tr, relative=True) < 0.1


def test_dissipation_variation_subpartitions(rng):
    diss = lambda dq: np.abs(np.asarray(dq)).sum(-1)
    steps = np.cumsum(rng.normal(size=(12, 3, 1)), axis=0)
    ps = list(steps)
    al = [np.full(3, 100.0 * k) for k in range(12)]
    full = dissipation_variation(ps, al, 0, 11, diss)
    for _ in range(20):
        idx = np.sort(np.concatenate([[0, 11], rng.choice(np.arange(1, 11), size=4, replace=False)]))
        sub = dissipation_variation([ps[i] for i in idx], [al[i] for i in idx], 0, len(idx) - 1, diss)
        assert sub <= full + 1e-12


def test_zero_datum_run_is_exactly_zero(soft, small_grid):
    law = MultiphaseLaw([soft], TorusGeometry.single())
    tr = run_evolution(_problem(Reduced(1, 1), law, small_grid, make_datum("zero")), stability_probes=3)
    assert energy_balance_residual(tr) == 0.0
    assert max(tr.q_el) == 0.0 and tr.v_r[-1] == 0.0 and min(tr.slack) == 0.0


def test_stability_detects_perturbed_state(soft, small_grid, mixed_datum):
    law = MultiphaseLaw([soft], TorusGeometry.single())
    prob = _problem(Reduced(1, 1), law, small_grid, mixed_datum, n=2)
    tr = run_evolution(prob)
    s = tr.final_state
    assert stability_check(s, prob, 30, disc=tr.disc) >= -1e-8
    bad = s.copy()
    bad.u[tr.disc.free] += 1e-3 * np.random.default_rng(0).normal(size=tr.disc.free.size)
    assert stability_check(bad, prob, 30, disc=tr.disc) < -1e-6


def test_safe_load_detects_corrupted_stress(soft, small_grid):
    law = MultiphaseLaw([soft], TorusGeometry.single())
    loads = lambda t, x: t * np.broadcast_to([1e-4, -2e-4, 3e-4], x.shape[:-1] + (3,))
    prob = _problem(Scaled3D(0.2), law, small_grid, make_datum("membrane", 0.02), n=2, loads=loads)
    tr = run_evolution(prob, residuals=False)
    sig = tr.stresses[-1].copy()
    good = safe_load_pairing_check(tr.final_state, prob, stress=sig)
    sig[::7, 0] += 1e-2
    assert safe_load_pairing_check(tr.final_state, prob, stress=sig) > 1e3 * max(good, 1e-14)


def test_continuous_dependence_scaling(soft, small_grid, mixed_datum):
    law = MultiphaseLaw([soft], TorusGeometry.single())
    prob = _problem(Reduced(1, 1), law, small_grid, mixed_datum)
    bump = make_datum("bending", 1e-4)
    r1 = continuous_dependence_probe(prob, mixed_datum, mixed_datum.plus(bump))
    r2 = continuous_dependence_probe(prob, mixed_datum, mixed_datum.plus(bump.scaled(2.0)))
    for key in ("elastic", "plastic", "alpha"):
        assert r2[key] == pytest.approx(r1[key], rel=0.05)


def test_equilibrium_residual_of_constant_stress(soft, small_grid, mixed_datum):
    law = MultiphaseLaw([soft], TorusGeometry.single())
    prob = _problem(Reduced(1, 1), law, small_grid, mixed_datum, n=1)
    tr = run_evolution(prob, residuals=False)
    const = np.broadcast_to([0.3, -0.1, 0.2], tr.stresses[-1].shape)
    rm, rb = equilibrium_residuals(tr.final_state, prob, tr.disc, stress=const)
    assert rm <= 1e-14 and rb <= 1e-14
