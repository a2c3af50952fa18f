"""Time-incremental quasistatic solver and its audits.

Each time step minimises

    Q_el(e) + delta Q_hard(p, alpha) + R(p - p_prev) - <l(t_k), u>

over displacements matching the datum on gamma_D, with the tight isotropic
update alpha = alpha_prev + R(p - p_prev). The plastic variables are
condensed out pointwise (closed-form return map), which leaves a convex
C^{1,1} functional of the displacement; it is minimised by a damped
semismooth Newton method whose line search keeps the objective monotone.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import tensorkit as tk
from .materials import MultiphaseLaw, PhaseMaterial, project_tresca
from .plate import BoundaryDatum, PlateGrid, PlateState, interleave, kl_blocks
from .reduction import N_RED, reduced_elasticity


class ConvergenceError(RuntimeError):
    def __init__(self, msg, gap):
        super().__init__(f"{msg} (last gap {gap:.3e})")
        self.gap = gap


@dataclass(frozen=True)
class Scaled3D:
    h: float

    def __post_init__(self):
        if not self.h > 0:
            raise ValueError("mode.h must be positive")

    @property
    def delta(self):
        return 1.0


@dataclass(frozen=True)
class Reduced:
    epsilon: float = 1.0
    delta: float = 1.0

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("mode.epsilon must be positive")
        if self.delta < 0:
            raise ValueError("mode.delta must be nonnegative")


@dataclass
class EvolutionProblem:
    mode: object
    law: MultiphaseLaw
    grid: PlateGrid
    datum: BoundaryDatum
    times: np.ndarray
    loads: object = None  # callable (t, x) -> (..., 3) body force, Scaled3D only
    nq: int | None = None  # x3 points; 2 for reduced, 3 for scaled3d
    alpha0: float = 0.0
    tol_obj: float = 1e-10
    max_iters: int = 200
    linear_solver: str = "direct"
    tol_lin: float = 1e-12

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        if self.times.ndim != 1 or self.times.size < 1 or self.times[0] != 0.0:
            raise ValueError("times must start at 0")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("times must be strictly increasing")
        if self.nq is None:
            self.nq = 3 if isinstance(self.mode, Scaled3D) else 2
        if isinstance(self.mode, Scaled3D) and self.nq < 3:
            # the quadratic corrector mode z^2 - 1/12 vanishes at both 2-point Gauss nodes
            raise ValueError("solver.nq: the scaled 3D mode needs at least 3 x3 points")
        if isinstance(self.mode, Reduced):
            if self.loads is not None:
                raise ValueError("the reduced model runs without applied loads")
            self.law = dataclasses.replace(self.law, epsilon=self.mode.epsilon)
        elif not isinstance(self.mode, Scaled3D):
            raise TypeError("mode must be Scaled3D or Reduced")
        if self.alpha0 < 0:
            raise ValueError("alpha0 must be nonnegative")

    @property
    def delta(self):
        return self.mode.delta

    @property
    def kind(self):
        return "reduced" if isinstance(self.mode, Reduced) else "scaled3d"


# ---------------------------------------------------------------------------
# pointwise condensed law

class PointLaw:
    """Condensed pointwise energy psi(eps) = min over plastic q of

        1/2 (eps-q).Mel(eps-q) + delta/2 h_kin q.N q + g(r |q - q0|_N),
        g(x) = x + delta/2 h_iso (alpha0 + x)^2,

    with the plastic space spanned by the columns of L (L^T N L = I).
    """

    def __init__(self, m: PhaseMaterial, kind, delta, h=1.0):
        self.m, self.kind, self.delta = m, kind, float(delta)
        if kind == "reduced":
            self.Mel = reduced_elasticity(m).metric
            self.N = N_RED
            self.L = np.linalg.inv(np.linalg.cholesky(N_RED)).T
        else:
            self.Mel = m.metric_matrix()
            self.N = tk.G3
            self.L = tk.deviatoric_basis()
        self.G = tk.metric(np.zeros(self.Mel.shape[0]))
        self.r = m.yield_set.radius
        self.tresca = m.yield_set.kind == "tresca"
        if self.tresca and kind == "reduced":
            raise NotImplementedError("Tresca return map is only available in the scaled 3D mode")
        self.hk = self.delta * m.h_kin
        self.hi = self.delta * m.h_iso
        self.A = self.L.T @ (self.Mel + self.hk * self.N) @ self.L
        self.lam, self.U = np.linalg.eigh(self.A)
        self.LtM = self.L.T @ self.Mel

    def dissipation(self, dq):
        if self.kind == "reduced":
            return self.r * np.sqrt(np.maximum(np.einsum("...i,ij,...j->...", dq, self.N, dq), 0.0))
        return self.m.yield_set.support(dq)

    def update(self, eps, q0, a0, tangent=True):
        n, nc = eps.shape
        b = (eps - q0) @ self.LtM.T - self.hk * (q0 @ self.N) @ self.L
        if self.tresca:
            z, kap, plastic = self._tresca(b, a0)
        else:
            z, kap, plastic = self._radial(b, a0)
        dq = z @ self.L.T
        q = q0 + dq
        x = self.dissipation(dq)
        alpha = a0 + x
        e = eps - q
        s = e @ self.Mel
        psi = (0.5 * np.einsum("ni,ni->n", e, s) + 0.5 * self.hk * np.einsum("ni,ij,nj->n", q, self.N, q)
               + x + 0.5 * self.hi * alpha**2)
        T = None
        if tangent:
            T = np.broadcast_to(self.Mel, (n, nc, nc)).copy()
            if plastic.any() and not self.tresca:
                zp = z[plastic]
                m = np.linalg.norm(zp, axis=1)
                c0 = self.r * (1.0 + self.hi * a0[plastic])
                J = self.A + kap[plastic][:, None, None] * np.eye(self.A.shape[0])
                J -= (c0 / m**3)[:, None, None] * np.einsum("ni,nj->nij", zp, zp)
                W = np.linalg.solve(J, np.broadcast_to(self.LtM, (zp.shape[0],) + self.LtM.shape))
                T[plastic] -= np.einsum("ki,nkj->nij", self.LtM, W)
        return q, alpha, psi, s, T

    def _radial(self, b, a0):
        n, nz = b.shape
        c0 = self.r * (1.0 + self.hi * a0)
        bn = np.linalg.norm(b, axis=1)
        plastic = bn > c0 * (1.0 + 1e-14)
        z = np.zeros_like(b)
        kap = np.zeros(n)
        if not plastic.any():
            return z, kap, plastic
        c = b[plastic] @ self.U
        cp, bp, c0p = c, bn[plastic], c0[plastic]
        beta = self.hi * self.r**2
        lo = (c0p * self.lam[0] + beta * bp) / (bp - c0p)
        hi = (c0p * self.lam[-1] + beta * bp) / (bp - c0p)
        k = 0.5 * (lo + hi)
        for _ in range(100):
            d = self.lam[None, :] + k[:, None]
            m = np.sqrt(((cp / d) ** 2).sum(1))
            dm = -((cp**2) / d**3).sum(1) / m
            phi = (k - beta) * m - c0p
            dphi = m + (k - beta) * dm
            lo = np.where(phi < 0, k, lo)
            hi = np.where(phi > 0, k, hi)
            kn = k - phi / dphi
            bad = ~((kn > lo) & (kn < hi))
            kn = np.where(bad, 0.5 * (lo + hi), kn)
            done = np.abs(phi) <= 4e-16 * (c0p + bp)
            k = np.where(done, k, kn)
            if done.all() or np.all(hi - lo <= 1e-15 * np.abs(hi)):
                break
        zp = (cp / (self.lam[None, :] + k[:, None])) @ self.U.T
        z[plastic] = zp
        kap[plastic] = k
        return z, kap, plastic

    def _tresca(self, b, a0):
        # isotropic elasticity on deviators: A = a I; solve s = g'(R(d(s)))
        # with d(s) = (B - proj_{sK} B) / a in tensor form
        a = self.lam.mean()
        B = b @ self.L.T  # deviatoric tensor with components b in the G-orthonormal basis L
        r = self.r
        inside = self.m.yield_set.distance(B / (1.0 + self.hi * a0)[:, None]) <= 1e-14 * (1 + tk.norm(B))
        plastic = ~inside
        z = np.zeros_like(b)
        kap = np.zeros(b.shape[0])
        if not plastic.any():
            return z, kap, plastic
        Bp, a0p = B[plastic], a0[plastic]

        def d_of(s):
            return (Bp - project_tresca(Bp / s[:, None], r) * s[:, None]) / a

        lo = 1.0 + self.hi * a0p
        hi = 1.0 + self.hi * (a0p + self.m.yield_set.r_outer * tk.norm(Bp) / a)
        for _ in range(200):
            s = 0.5 * (lo + hi)
            f = s - 1.0 - self.hi * (a0p + self.m.yield_set.support(d_of(s)))
            lo = np.where(f < 0, s, lo)
            hi = np.where(f >= 0, s, hi)
            if np.all(hi - lo <= 1e-16 * hi):
                break
        d = d_of(0.5 * (lo + hi))
        z[plastic] = (d * np.array([1, 1, 1, 2, 2, 2.0])) @ self.L
        return z, kap, plastic


# ---------------------------------------------------------------------------
# discretisation

class Discretization:
    """Strain operator, quadrature weights, dof bookkeeping for one problem."""

    def __init__(self, prob: EvolutionProblem):
        g = prob.grid
        self.prob, self.grid = prob, g
        self.z, self.wq = tk.gauss_interval(prob.nq)
        N = g.n_nodes
        mem, hes = kl_blocks(g)
        if prob.kind == "reduced":
            self.ncomp, self.ndof = 3, 3 * N
            blocks = [[mem[c] - z * hes[c] for c in range(3)] for z in self.z]
        else:
            self.ncomp, self.ndof = 6, 9 * N
            blocks = [self._scaled_blocks(mem, hes, z, prob.mode.h) for z in self.z]
        self.B = interleave(blocks, blocks)
        self.npts = g.n_cells * prob.nq
        self.w = np.repeat(np.full(g.n_cells, g.cell_area), prob.nq) * np.tile(self.wq, g.n_cells)
        self.phase_cell = prob.law.phase_at(g.centers)
        self.phase = np.repeat(self.phase_cell, prob.nq)
        used = np.unique(self.phase)
        self.laws = {int(i): PointLaw(prob.law.phases[i], prob.kind, prob.delta,
                                      getattr(prob.mode, "h", 1.0)) for i in used}
        clamped = [g.clamped_nodes, N + g.clamped_nodes, 2 * N + g.clamped_nodes_u3]
        if prob.kind == "scaled3d":
            clamped += [(3 + k) * N + g.clamped_nodes for k in range(6)]
        self.clamped = np.unique(np.concatenate(clamped))
        mask = np.ones(self.ndof, bool)
        mask[self.clamped] = False
        self.free = np.flatnonzero(mask)
        self.Mel_pts = np.empty((self.npts, self.ncomp, self.ncomp))
        for i, pl in self.laws.items():
            self.Mel_pts[self.phase == i] = pl.Mel
        self._Kel = None

    def _scaled_blocks(self, mem, hes, z, h):
        g = self.grid
        o = g.ops
        N = g.n_nodes
        Z = sp.csr_matrix((g.n_cells, N))

        def row(**parts):
            # parts: dof-block index -> operator
            cols = [Z] * 9
            for k, op in parts.items():
                cols[int(k[1:])] = op
            return sp.hstack(cols)

        b1 = z                    # value of the first corrector basis at z
        b2 = z * z - 1.0 / 12.0   # second basis
        d1, d2 = 1.0, 2.0 * z     # their x3 derivatives
        pad = sp.csr_matrix((g.n_cells, 6 * N))
        ip = [sp.hstack([mem[c] - z * hes[c], pad]).tocsr() for c in range(3)]
        # in-plane correction 2h E'V
        ip[0] = ip[0] + row(b3=2 * h * b1 * o["dx"], b4=2 * h * b2 * o["dx"])
        ip[1] = ip[1] + row(b5=2 * h * b1 * o["dy"], b6=2 * h * b2 * o["dy"])
        ip[2] = ip[2] + row(b3=h * b1 * o["dy"], b4=h * b2 * o["dy"], b5=h * b1 * o["dx"], b6=h * b2 * o["dx"])
        e13 = row(b3=d1 * o["avg"], b4=d2 * o["avg"], b7=0.5 * h * b1 * o["dx"], b8=0.5 * h * b2 * o["dx"])
        e23 = row(b5=d1 * o["avg"], b6=d2 * o["avg"], b7=0.5 * h * b1 * o["dy"], b8=0.5 * h * b2 * o["dy"])
        e33 = row(b7=d1 * o["avg"], b8=d2 * o["avg"])
        return [ip[0], ip[1], e33, ip[2], e13, e23]

    # -- datum and loads -------------------------------------------------
    def datum_vector(self, datum: BoundaryDatum, t):
        d = datum.nodal(self.grid, t)
        u = np.zeros(self.ndof)
        u[: 3 * self.grid.n_nodes] = d.as_vector()
        return u

    def load_vector(self, t):
        ell = np.zeros(self.ndof)
        if self.prob.loads is None:
            return ell
        g = self.grid
        f = np.asarray(self.prob.loads(t, g.nodes), dtype=float)
        N = g.n_nodes
        for k in range(3):
            ell[k * N:(k + 1) * N] = g.node_weights * f[:, k]
        return ell

    # -- pointwise pass ----------------------------------------------------
    def pointwise(self, u, q0, a0, tangent=True):
        eps = (self.B @ u).reshape(self.npts, self.ncomp)
        q = np.empty_like(q0)
        alpha = np.empty_like(a0)
        psi = np.empty(self.npts)
        s = np.empty_like(eps)
        T = np.empty((self.npts, self.ncomp, self.ncomp)) if tangent else None
        for i, pl in self.laws.items():
            sel = self.phase == i
            qi, ai, pi, si, Ti = pl.update(eps[sel], q0[sel], a0[sel], tangent)
            q[sel], alpha[sel], psi[sel], s[sel] = qi, ai, pi, si
            if tangent:
                T[sel] = Ti
        return eps, q, alpha, psi, s, T

    def assemble(self, T):
        n, c = self.npts, self.ncomp
        T = T * self.w[:, None, None]
        rows = np.repeat(np.arange(n * c).reshape(n, c), c, axis=1).ravel()
        cols = np.tile(np.arange(n * c).reshape(n, c), (1, c)).ravel()
        D = sp.csr_matrix((T.ravel(), (rows, cols)), shape=(n * c, n * c))
        return (self.B.T @ D @ self.B).tocsc()

    @property
    def K_el(self):
        if self._Kel is None:
            self._Kel = self.assemble(self.Mel_pts)
        return self._Kel

    def pairing(self, a, b):
        """sum_pts w a.b for per-point packed covector a and strain b."""
        return float(np.dot(self.w, np.einsum("ni,ni->n", a, b)))


# ---------------------------------------------------------------------------
# solver

@dataclass
class StepInfo:
    iterations: int
    objective: float
    grad_norm: float
    objectives: list


def _solve(prob, H, rhs, M_diag=None):
    if prob.linear_solver == "cg":
        d = H.diagonal()
        P = spla.LinearOperator(H.shape, matvec=lambda x: x / d)
        x, info = spla.cg(H, rhs, rtol=prob.tol_lin, atol=0.0, M=P, maxiter=20 * H.shape[0])
        if info != 0:
            raise ConvergenceError("conjugate gradient did not converge", float(np.linalg.norm(H @ x - rhs)))
        return x
    return spla.splu(H).solve(rhs)


def incremental_step(prev: PlateState, t_k: float, prob: EvolutionProblem, disc: Discretization | None = None,
                     datum: BoundaryDatum | None = None, info_out: list | None = None):
    """One energetic time step from prev to t_k; returns the new PlateState."""
    disc = disc or Discretization(prob)
    datum = datum or prob.datum
    q0 = prev.p.reshape(disc.npts, disc.ncomp)
    a0 = prev.alpha.reshape(disc.npts)
    w_prev = disc.datum_vector(datum, prev.time)
    w_new = disc.datum_vector(datum, t_k)
    ell = disc.load_vector(t_k)
    u = prev.u + (w_new - w_prev)  # datum-shift start: admissible at t_k
    u[disc.clamped] = w_new[disc.clamped]
    free = disc.free

    def objective(u):
        eps, q, a, psi, s, T = disc.pointwise(u, q0, a0, tangent=False)
        return float(np.dot(disc.w, psi) - ell @ u)

    eps, q, a, psi, s, T = disc.pointwise(u, q0, a0)
    F = float(np.dot(disc.w, psi) - ell @ u)
    hist = [F]
    mu = 1e-10 if prob.delta > 0 else 1e-8
    it = 0
    gnorm = np.inf
    gh = []
    for it in range(1, prob.max_iters + 1):
        fint = disc.B.T @ (disc.w[:, None] * s).ravel()
        g = (fint - ell)[free]
        # roundoff floor of the gradient: magnitude of the summed terms
        scale = np.linalg.norm(abs(disc.B).T @ np.abs(disc.w[:, None] * s).ravel()) + np.linalg.norm(ell) + 1e-300
        gnorm = float(np.linalg.norm(g))
        gh.append(gnorm)
        if gnorm <= 1e-12 * scale or free.size == 0:
            break
        if len(gh) > 6 and min(gh[-5:]) > 0.5 * min(gh[:-5]) and gnorm <= 1e-9 * scale:
            break  # stagnation at the roundoff floor
        H = disc.assemble(T)
        Hff = H[free][:, free] + mu * disc.K_el[free][:, free]
        du = _solve(prob, Hff, -g)
        slope = float(g @ du)
        step = 1.0
        accepted = False
        if -slope <= 1e-13 * (abs(F) + 1e-300):
            # predicted decrease below the roundoff of F: Armijo is meaningless here
            un = u.copy()
            un[free] += du
            accepted = True
        for _ in range(0 if accepted else 60):
            un = u.copy()
            un[free] += step * du
            Fn = objective(un)
            if Fn <= F + 1e-4 * step * slope or Fn <= F and abs(Fn - F) <= 1e-15 * (abs(F) + 1e-300):
                accepted = True
                break
            step *= 0.5
        if not accepted:
            if gnorm <= 1e-9 * scale:
                break
            raise ConvergenceError("line search failed", gnorm / scale)
        mu = max(mu * 0.1, 1e-12) if step == 1.0 else min(mu * 10.0, 1.0)
        u = un
        eps, q, a, psi, s, T = disc.pointwise(u, q0, a0)
        Fold, F = F, float(np.dot(disc.w, psi) - ell @ u)
        hist.append(F)
        # stagnation at roundoff level after an already small gradient
        if abs(Fold - F) <= prob.tol_obj * 1e-5 * (abs(F) + 1e-300) and gnorm <= 1e-9 * scale:
            break
    else:
        raise ConvergenceError("no convergence within max_iters", gnorm)
    if info_out is not None:
        info_out.append(StepInfo(it, F, gnorm, hist))
    return PlateState(u, q.reshape(prev.p.shape), a.reshape(prev.alpha.shape), float(t_k), prob.grid,
                      prob.kind, getattr(prob.mode, "h", 1.0))


def initial_state(prob: EvolutionProblem, disc: Discretization | None = None, datum=None):
    disc = disc or Discretization(prob)
    datum = datum or prob.datum
    u = disc.datum_vector(datum, prob.times[0])
    p = np.zeros((prob.grid.n_cells, prob.nq, disc.ncomp))
    alpha = np.full((prob.grid.n_cells, prob.nq), float(prob.alpha0))
    s0 = PlateState(u, p, alpha, float(prob.times[0]), prob.grid, prob.kind, getattr(prob.mode, "h", 1.0))
    if np.any(u[disc.free] != 0) or np.any(disc.load_vector(prob.times[0]) != 0):
        # equilibrate the initial elastic state at t0 with p = 0
        s0 = incremental_step(s0, prob.times[0], prob, disc, datum)
        s0.p[:] = 0.0
        s0.alpha[:] = prob.alpha0
    return s0


# ---------------------------------------------------------------------------
# trace and diagnostics

@dataclass
class EvolutionTrace:
    t: list = field(default_factory=list)
    q_el: list = field(default_factory=list)
    q_hard: list = field(default_factory=list)
    dq_hard: list = field(default_factory=list)
    load_pot: list = field(default_factory=list)
    d_r: list = field(default_factory=list)
    v_r: list = field(default_factory=list)
    work: list = field(default_factory=list)
    balance: list = field(default_factory=list)
    slack: list = field(default_factory=list)
    res_membrane: list = field(default_factory=list)
    res_bending: list = field(default_factory=list)
    iterations: list = field(default_factory=list)
    states: list = field(default_factory=list)
    stresses: list = field(default_factory=list)
    delta: float = 1.0

    COLUMNS = ("step", "t", "Q_el", "dQ_hard", "dR", "V_R", "work", "balance_residual",
               "stability_slack", "res_membrane", "res_bending", "newton_iters")

    def total_energy(self, k):
        return self.q_el[k] + self.dq_hard[k] - self.load_pot[k]

    def rows(self):
        for k in range(len(self.t)):
            yield (k, self.t[k], self.q_el[k], self.dq_hard[k], self.d_r[k], self.v_r[k], self.work[k],
                   self.balance[k], self.slack[k], self.res_membrane[k], self.res_bending[k], self.iterations[k])


def to_tensor(cov):
    """Packed stress covector (G sigma) -> packed stress tensor."""
    cov = np.asarray(cov, dtype=float)
    return cov / np.diag(tk.metric(cov))


def state_energies(disc: Discretization, s: PlateState):
    """(Q_el, Q_hard, stress covector, elastic strain) of a state."""
    eps = (disc.B @ s.u).reshape(disc.npts, disc.ncomp)
    q = s.p.reshape(disc.npts, -1)
    e = eps - q
    sig = np.einsum("nij,nj->ni", disc.Mel_pts, e)
    q_el = 0.5 * disc.pairing(sig, e)
    q_hard = 0.0
    for i, pl in disc.laws.items():
        sel = disc.phase == i
        m = pl.m
        qq = np.einsum("ni,ij,nj->n", q[sel], pl.N, q[sel])
        q_hard += 0.5 * float(np.dot(disc.w[sel], m.h_kin * qq + m.h_iso * s.alpha.reshape(-1)[sel] ** 2))
    return q_el, q_hard, sig, e


def dissipation_increment(disc: Discretization, p_new, p_old):
    dq = (p_new - p_old).reshape(disc.npts, -1)
    out = np.zeros(disc.npts)
    for i, pl in disc.laws.items():
        sel = disc.phase == i
        out[sel] = pl.dissipation(dq[sel])
    return out


def dissipation_variation(p_history, alpha_history, a, b, diss, weights=None, tol=1e-12):
    """sum_{i=a}^{b-1} of the generalised dissipation of consecutive increments.

    diss maps an array of plastic increments to pointwise values; returns +inf
    if some increment violates R(dp) <= d alpha.
    """
    if a > b:
        raise ValueError("need a <= b")
    total = 0.0
    for i in range(a, b):
        dp = np.asarray(p_history[i + 1]) - np.asarray(p_history[i])
        da = np.asarray(alpha_history[i + 1]) - np.asarray(alpha_history[i])
        r = np.asarray(diss(dp))
        if np.any(r > da + tol * (1.0 + np.abs(da))):
            return np.inf
        total += float(np.sum(r if weights is None else weights * r))
    return total


def energy_balance_residual(trace: EvolutionTrace, upto=None, relative=False):
    k = len(trace.t) - 1 if upto is None else upto
    lhs = trace.total_energy(k) + trace.v_r[k]
    rhs = trace.total_energy(0) + trace.work[k]
    res = abs(lhs - rhs)
    if relative:
        scale = max(abs(trace.q_el[k]), abs(trace.dq_hard[k]), trace.v_r[k], abs(trace.work[k]),
                    abs(trace.load_pot[k]), 1e-300)
        return res / scale
    return res


def _bump(x, c, rad):
    d = (x - c) / rad
    r2 = (d**2).sum(-1)
    return np.where(r2 < 1.0, (1.0 - r2) ** 4, 0.0)


def _bump_derivs(x, c, rad):
    """Value, gradient and Hessian (packed 11, 22, 12) of (1 - |d|^2)^4."""
    d = (x - c) / rad
    r2 = (d**2).sum(-1)
    inside = r2 < 1.0
    s = np.where(inside, 1.0 - r2, 0.0)
    v = s**4
    grad = (-8.0 * s**3)[..., None] * d / rad
    f2 = 48.0 * s**2
    hes = np.stack([f2 * d[..., 0] ** 2 - 8 * s**3, f2 * d[..., 1] ** 2 - 8 * s**3, f2 * d[..., 0] * d[..., 1]], -1) / rad**2
    return v, grad, hes


def _test_family(grid):
    L = np.array([grid.Lx, grid.Ly])
    return [(L * np.array(c), rad * min(grid.Lx, grid.Ly)) for c, rad in
            (((0.5, 0.5), 0.3), ((0.38, 0.42), 0.2), ((0.62, 0.58), 0.2))]


def equilibrium_residuals(s: PlateState, prob: EvolutionProblem, disc: Discretization | None = None, stress=None):
    """Weak residuals of the membrane and bending equilibrium equations.

    Tested against smooth bumps supported inside omega: max over the family
    of |int sigma_bar : E phi - int f_bar.phi| / |phi|_{H1} and
    |-(1/12) int sigma_hat : D^2 phi - int f3 phi| / |phi|_{H2}.
    """
    disc = disc or Discretization(prob)
    g = prob.grid
    if stress is None:
        stress = to_tensor(state_energies(disc, s)[2])
    sig = stress.reshape(g.n_cells, prob.nq, -1)
    if sig.shape[-1] == 6:
        sig = tk.inplane(sig)
    sbar = (disc.wq[None, :, None] * sig).sum(1)
    shat = 12.0 * (disc.wq[None, :, None] * disc.z[None, :, None] * sig).sum(1)
    gx, gw = np.polynomial.legendre.leggauss(4)
    hx, hy = 0.5 * g.dx, 0.5 * g.dy
    f = None if prob.loads is None else np.asarray(prob.loads(s.time, g.nodes), dtype=float)
    res_m, res_b = 0.0, 0.0
    for c, rad in _test_family(g):
        # cell averages of the gradient and Hessian from edge integrals: the
        # sums over cells telescope, so constant stresses are exactly balanced
        gbar = np.zeros((g.n_cells, 2))
        hbar = np.zeros((g.n_cells, 3))
        for a, w in zip(gx, 0.5 * gw):
            # k = 0: right/left edges at height a; k = 1: top/bottom edges at abscissa a
            for k, along in enumerate((np.array([0.0, a * hy]), np.array([a * hx, 0.0]))):
                off = np.array([hx, 0.0]) if k == 0 else np.array([0.0, hy])
                hi, lo = g.centers + along + off, g.centers + along - off
                step = 2 * off[k]
                gbar[:, k] += w * (_bump(hi, c, rad) - _bump(lo, c, rad)) / step
                hbar[:, k] += w * (_bump_derivs(hi, c, rad)[1][:, k] - _bump_derivs(lo, c, rad)[1][:, k]) / step
        corner = lambda sx, sy: _bump(g.centers + np.array([sx * hx, sy * hy]), c, rad)
        hbar[:, 2] = (corner(1, 1) - corner(-1, 1) - corner(1, -1) + corner(-1, -1)) / (4 * hx * hy)
        vn = _bump(g.nodes, c, rad)
        # membrane: phi = bump * e_k
        for k in range(2):
            Ephi = np.zeros((g.n_cells, 3))
            Ephi[:, k] = gbar[:, k]
            Ephi[:, 2] = 0.5 * gbar[:, 1 - k]
            lhs = g.cell_area * tk.inner(sbar, Ephi).sum()
            rhs = 0.0 if f is None else float(np.dot(g.node_weights * f[:, k], vn))
            nrm = np.sqrt(g.cell_area * (gbar**2).sum())
            res_m = max(res_m, abs(lhs - rhs) / nrm)
        lhs = -g.cell_area * tk.inner(shat, hbar).sum() / 12.0
        rhs = 0.0 if f is None else float(np.dot(g.node_weights * f[:, 2], vn))
        nrm = np.sqrt(g.cell_area * tk.inner(hbar, hbar).sum())
        res_b = max(res_b, abs(lhs - rhs) / nrm)
    return res_m, res_b


def _random_probe(disc: Discretization, rng, kind):
    ups = np.zeros(disc.ndof)
    pi = np.zeros((disc.npts, disc.ncomp))
    if kind in ("disp", "mixed"):
        ups[disc.free] = rng.normal(size=disc.free.size)
    if kind in ("plastic", "mixed"):
        zdim = next(iter(disc.laws.values())).L.shape[1]
        Ls = {i: pl.L for i, pl in disc.laws.items()}
        zz = rng.normal(size=(disc.npts, zdim))
        for i, L in Ls.items():
            sel = disc.phase == i
            pi[sel] = zz[sel] @ L.T
        if kind == "plastic":
            # localise to a random subset so flow directions get probed too
            pi *= (rng.random(disc.npts) < 0.2)[:, None]
    Bu = (disc.B @ ups).reshape(disc.npts, disc.ncomp)
    nrm = np.sqrt(disc.pairing(Bu, Bu @ tk.metric(Bu[0])) + disc.pairing(pi, pi @ tk.metric(pi[0])))
    if nrm == 0:
        return ups, pi
    return ups / nrm, pi / nrm


def stability_slack(disc: Discretization, s: PlateState, ups, pi, ell=None):
    """Right side minus left side of the minimality inequality for one probe
    (upsilon, eta = E upsilon - pi, pi, beta = R(pi))."""
    prob = disc.prob
    eps = (disc.B @ s.u).reshape(disc.npts, disc.ncomp)
    q = s.p.reshape(disc.npts, disc.ncomp)
    alpha = s.alpha.reshape(-1)
    sig = np.einsum("nij,nj->ni", disc.Mel_pts, eps - q)
    eta = (disc.B @ ups).reshape(disc.npts, disc.ncomp) - pi
    beta = dissipation_increment(disc, pi, np.zeros_like(pi))
    hard = np.zeros(disc.npts)
    for i, pl in disc.laws.items():
        sel = disc.phase == i
        hard[sel] = pl.m.h_kin * np.einsum("ni,ij,nj->n", q[sel], pl.N, pi[sel]) + pl.m.h_iso * alpha[sel] * beta[sel]
    ell = disc.load_vector(s.time) if ell is None else ell
    rhs = disc.pairing(sig, eta) + prob.delta * float(np.dot(disc.w, hard)) - float(ell @ ups)
    return float(np.dot(disc.w, beta)) + rhs


def stability_check(s: PlateState, prob: EvolutionProblem, n_probes=100, seed=0, disc=None):
    """Most negative slack over random admissible probes (0 if n_probes == 0)."""
    disc = disc or Discretization(prob)
    rng = np.random.default_rng(seed)
    ell = disc.load_vector(s.time)
    worst = 0.0
    kinds = ("disp", "plastic", "mixed")
    for n in range(n_probes):
        ups, pi = _random_probe(disc, rng, kinds[n % 3])
        worst = min(worst, stability_slack(disc, s, ups, pi, ell))
    return worst


def run_evolution(prob: EvolutionProblem, stability_probes=0, seed=0, store_states=True, datum=None,
                  residuals=True):
    """Full time loop with the per-step audit trail."""
    disc = Discretization(prob)
    datum = datum or prob.datum
    tr = EvolutionTrace(delta=prob.delta)
    s = initial_state(prob, disc, datum)
    rng = np.random.default_rng(seed)
    prev_sig = None
    prev_w = prev_ell = None
    V = W = 0.0
    for k, t in enumerate(prob.times):
        info = []
        if k > 0:
            s_new = incremental_step(s, t, prob, disc, datum, info)
        else:
            s_new = s
        q_el, q_hard, sig, _ = state_energies(disc, s_new)
        w_vec = disc.datum_vector(datum, t)
        ell = disc.load_vector(t)
        dR = 0.0
        if k > 0:
            dR = float(np.dot(disc.w, dissipation_increment(disc, s_new.p, s.p)))
            V += dR
            Bdw = (disc.B @ (w_vec - prev_w)).reshape(disc.npts, disc.ncomp)
            W += 0.5 * disc.pairing(sig + prev_sig, Bdw)
            W -= 0.5 * float((ell + prev_ell) @ (w_vec - prev_w))
            W -= 0.5 * float((ell - prev_ell) @ (s_new.u + s.u))
        tr.t.append(float(t))
        tr.q_el.append(q_el)
        tr.q_hard.append(q_hard)
        tr.dq_hard.append(prob.delta * q_hard)
        tr.load_pot.append(float(ell @ s_new.u))
        tr.d_r.append(dR)
        tr.v_r.append(V)
        tr.work.append(W)
        tr.balance.append(energy_balance_residual(tr))
        tr.slack.append(stability_check(s_new, prob, stability_probes, int(rng.integers(2**31)), disc)
                        if stability_probes else 0.0)
        if residuals:
            rm, rb = equilibrium_residuals(s_new, prob, disc, stress=to_tensor(sig))
        else:
            rm = rb = 0.0
        tr.res_membrane.append(rm)
        tr.res_bending.append(rb)
        tr.iterations.append(info[0].iterations if info else 0)
        tr.stresses.append(to_tensor(sig))
        if store_states:
            tr.states.append(s_new)
        s, prev_sig, prev_w, prev_ell = s_new, sig, w_vec, ell
    tr.final_state = s
    tr.disc = disc
    tr.problem = prob
    return tr


def continuous_dependence_probe(prob: EvolutionProblem, w1: BoundaryDatum, w2: BoundaryDatum, t=None, prev=None):
    """Ratios |e2-e1|, |p2-p1|, |alpha2-alpha1| over |E w2 - E w1| for one step."""
    if prob.kind == "reduced" and prob.delta <= 0:
        raise ValueError("continuous dependence needs coercive hardening (delta > 0)")
    disc = Discretization(prob)
    t = prob.times[-1] if t is None else t
    dw = disc.datum_vector(w2, t) - disc.datum_vector(w1, t)
    if not np.any(dw):
        raise ValueError("data coincide: the ratio has a zero denominator")
    states = []
    for w in (w1, w2):
        s0 = initial_state(prob, disc, w) if prev is None else prev
        states.append(incremental_step(s0, t, prob, disc, w))
    Bdw = (disc.B @ dw).reshape(disc.npts, disc.ncomp)
    G = tk.metric(Bdw[0])
    den = np.sqrt(disc.pairing(Bdw, Bdw @ G))
    e = [(disc.B @ s.u).reshape(disc.npts, -1) - s.p.reshape(disc.npts, -1) for s in states]
    de = e[1] - e[0]
    dp = (states[1].p - states[0].p).reshape(disc.npts, -1)
    da = (states[1].alpha - states[0].alpha).reshape(-1)
    r_e = np.sqrt(disc.pairing(de, de @ G)) / den
    r_p = np.sqrt(disc.pairing(dp, dp @ G)) / den
    r_a = np.sqrt(float(np.dot(disc.w, da**2))) / den
    return {"elastic": r_e, "plastic": r_p, "alpha": r_a, "max": max(r_e, r_p, r_a)}


def safe_load_pairing_check(s: PlateState, prob: EvolutionProblem, stress=None, seed=0, disc=None):
    """|<l, v> - (int s:(E eta - E w) + int dev(s):pi + <l, w>)| for a random
    tuple (v, eta, pi) with E v = eta + pi and v = w on gamma_D."""
    disc = disc or Discretization(prob)
    rng = np.random.default_rng(seed)
    G = tk.metric(np.zeros(disc.ncomp))
    if stress is None:
        eps = (disc.B @ s.u).reshape(disc.npts, disc.ncomp)
        cov = np.einsum("nij,nj->ni", disc.Mel_pts, eps - s.p.reshape(disc.npts, -1))
    else:
        cov = np.asarray(stress).reshape(disc.npts, disc.ncomp) @ G
    w = disc.datum_vector(prob.datum, s.time)
    ell = disc.load_vector(s.time)
    v = w.copy()
    v[disc.free] += rng.normal(size=disc.free.size) * (1.0 + np.abs(w).max())
    zdim = next(iter(disc.laws.values())).L.shape[1]
    pi = np.zeros((disc.npts, disc.ncomp))
    for i, pl in disc.laws.items():
        sel = disc.phase == i
        pi[sel] = rng.normal(size=(int(sel.sum()), zdim)) @ pl.L.T
    eta = (disc.B @ v).reshape(disc.npts, disc.ncomp) - pi
    Ew = (disc.B @ w).reshape(disc.npts, disc.ncomp)
    rhs = disc.pairing(cov, eta - Ew) + disc.pairing(cov, pi) + float(ell @ w)
    return abs(float(ell @ v) - rhs)
