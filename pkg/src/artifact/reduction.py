"""Plane-stress reduced laws and the interface inf-convolution dissipation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import optimize

from . import tensorkit as tk
from .materials import PhaseMaterial

# packed SymMat3 slots of the out-of-plane unknowns (l1, l2, l3) = (a13, a23, a33)
_OUT = (4, 5, 2)


def _require_isotropic(m):
    if not isinstance(m, PhaseMaterial):
        raise TypeError("reduced laws need an isotropic PhaseMaterial")


def completion_matrix(m: PhaseMaterial):
    """6x3 matrix of the linear map xi (packed SymMat2) -> A xi (packed SymMat3).

    The out-of-plane entries solve: C(A xi) has vanishing (i,3) entries.
    """
    M = m.metric_matrix()
    emb = tk.embed(np.eye(3))  # rows: embedded basis of SymMat2
    # stress (i,3) components equal (G^-1 M a)[OUT]; G is invertible diagonal
    S = np.linalg.solve(tk.G3, M)
    K = S[np.ix_(_OUT, _OUT)]
    rhs = -S[np.ix_(_OUT, [0, 1, 3])]
    try:
        lam = np.linalg.solve(K, rhs)
    except np.linalg.LinAlgError as exc:
        raise ValueError("completion system is singular") from exc
    A = np.zeros((6, 3))
    A[:, :] = emb.T
    A[list(_OUT), :] = lam
    return A


def complete_strain(m: PhaseMaterial, xi):
    """Return A xi: in-plane block xi, out-of-plane part minimising xi_hat:C xi_hat."""
    return np.asarray(xi, dtype=float) @ completion_matrix(m).T


def m_map(p):
    """M p: embed with 33-entry -tr p (deviatoric completion of a plastic strain)."""
    p = np.asarray(p, dtype=float)
    out = tk.embed(p)
    out[..., 2] = -(p[..., 0] + p[..., 1])
    return out


# in packed SymMat2 coordinates |M p|^2 = p @ N_RED @ p
N_RED = tk.G2 + np.outer(tk.I2, tk.I2)


@dataclass
class ReducedLaw:
    c_red: np.ndarray  # packed SymMat2 -> packed SymMat2
    a_map: np.ndarray  # 6x3
    h_kin_red: np.ndarray
    phase: int = 0

    @property
    def metric(self):
        """Matrix Q with xi:C_red(zeta) = xi @ Q @ zeta."""
        return tk.G2 @ self.c_red


def reduced_elasticity(m: PhaseMaterial, phase=0) -> ReducedLaw:
    A = completion_matrix(m)
    M = m.metric_matrix()
    # C_red xi : zeta = C(A xi) : embed(zeta); Q = E^T M A with E the embedding
    E = tk.embed(np.eye(3)).T
    Q = E.T @ M @ A
    Q = 0.5 * (Q + Q.T)
    c_red = np.linalg.solve(tk.G2, Q)
    h_red = m.h_kin * np.linalg.solve(tk.G2, N_RED)
    return ReducedLaw(c_red=c_red, a_map=A, h_kin_red=h_red, phase=phase)


def reduced_hardening(m: PhaseMaterial, p):
    """In-plane block of h_kin M p; p:H_red p = h_kin |M p|^2."""
    _require_isotropic(m)
    mp = m_map(p)
    out = tk.inplane(mp) * m.h_kin
    # the 33-entry of Mp pairs with tr p; fold it into the in-plane coefficients
    tr = -mp[..., 2] * m.h_kin
    out[..., 0] += tr
    out[..., 1] += tr
    return out


def reduced_dissipation_via_completion(m: PhaseMaterial, p):
    """R(M p) for a homogeneous isotropic phase."""
    _require_isotropic(m)
    return m.yield_set.support(m_map(p))


def _shear_embed(lam):
    out = np.zeros(np.shape(lam)[:-1] + (6,))
    out[..., 4] = lam[..., 0]
    out[..., 5] = lam[..., 1]
    return out


def reduced_dissipation(m: PhaseMaterial, p):
    """Support function of K_red = {s : dev(embed s) in K} evaluated at p.

    Equals the sup of S : M p over S in K with vanishing (i,3) entries. For
    von Mises this is r |M p|; for Tresca the dual form
    min over shears l of R(M p + shear(l)) is minimised numerically.
    """
    ys = m.yield_set
    mp = m_map(p)
    if ys.kind == "von_mises":
        return ys.radius * tk.norm(mp)
    mp = np.atleast_2d(mp)
    out = np.empty(mp.shape[0])
    for n, v in enumerate(mp):
        f = lambda l: float(ys.support(v + _shear_embed(l)))
        best = min(
            (optimize.minimize(f, x0, method="Nelder-Mead",
                               options=dict(xatol=1e-12, fatol=1e-14, maxiter=4000))
             for x0 in (np.zeros(2), np.array([0.3, -0.2]) * (1 + tk.norm(v)))),
            key=lambda r: r.fun,
        )
        out[n] = min(best.fun, f(np.zeros(2)))
    return out.reshape(np.shape(p)[:-1]) if np.ndim(p) > 1 else out[0]


def reduced_ball_constants(m: PhaseMaterial):
    """(r_H, R_H) with r_H |p| <= R_red(p) <= R_H |p|.

    |p|^2 <= |M p|^2 <= 3 |p|^2 (eigenvalues of N_RED w.r.t. G2 are 1, 1, 3).
    """
    ys = m.yield_set
    return ys.r_inner, ys.r_outer * np.sqrt(3.0)


# ---------------------------------------------------------------------------
# interface inf-convolution

@dataclass(frozen=True)
class InterfaceJump:
    nu: tuple
    c_bar: tuple
    c_hat: float

    def __post_init__(self):
        if abs(np.hypot(*self.nu) - 1.0) > 1e-12:
            raise ValueError("interface normal must be a unit vector")


def _jump_tensor(nu, cbar, chat, z):
    """cbar (.) nu + z chat nu (x) nu, packed SymMat2; cbar (..., 2), chat (...)."""
    nu = np.asarray(nu, dtype=float)
    a = tk.sym_outer(cbar, np.broadcast_to(nu, np.shape(cbar)))
    return a + (z * np.asarray(chat))[..., None] * tk.sym_outer(nu, nu)


def interface_integrand(law_i, law_j, nu, cbar, chat, x, quad):
    """Objective of the split x = (c_bar^i, c_hat^i), vectorised over leading axes of x."""
    x = np.asarray(x, dtype=float)
    zs, ws = quad
    ci, hi = x[..., :2], x[..., 2]
    cj, hj = np.asarray(cbar) - ci, chat - hi
    val = 0.0
    for z, w in zip(zs, ws):
        val = val + w * (_red_diss(law_i, _jump_tensor(nu, ci, hi, z))
                         + _red_diss(law_j, _jump_tensor(nu, cj, hj, z)))
    return val


def _red_diss(m, p):
    if m.yield_set.kind == "von_mises":
        return m.yield_set.radius * tk.norm(m_map(p))
    return reduced_dissipation(m, p)


def _vm_linear_maps(nu, quad):
    """Per x3 node z the 6x3 matrix P_z with M(jump tensor(x, z)) = P_z x."""
    zs, _ = quad
    E = np.eye(3)
    return np.stack([m_map(_jump_tensor(nu, E[:, :2], E[:, 2], z)).T for z in zs])


def _objective(law_i, law_j, nu, cbar, chat, quad):
    """(f, grad) of the split objective; grad is None without a closed form."""
    full = np.array([cbar[0], cbar[1], chat])
    if law_i.yield_set.kind == "von_mises" and law_j.yield_set.kind == "von_mises":
        P = _vm_linear_maps(nu, quad)
        w = np.asarray(quad[1])
        ri, rj = law_i.yield_set.radius, law_j.yield_set.radius
        G = tk.G3

        def parts(x):
            a = P @ x
            b = P @ (full - x)
            na = np.sqrt(np.einsum("zi,ij,zj->z", a, G, a))
            nb = np.sqrt(np.einsum("zi,ij,zj->z", b, G, b))
            return a, b, na, nb

        def f(x):
            _, _, na, nb = parts(x)
            return float(np.dot(w, ri * na + rj * nb))

        def grad(x):
            a, b, na, nb = parts(x)
            ga = np.where(na[:, None] > 0, (a @ G) / np.where(na > 0, na, 1.0)[:, None], 0.0)
            gb = np.where(nb[:, None] > 0, (b @ G) / np.where(nb > 0, nb, 1.0)[:, None], 0.0)
            return np.einsum("z,zi,zij->j", w, ri * ga - rj * gb, P)

        return f, grad
    return (lambda x: float(interface_integrand(law_i, law_j, nu, cbar, chat, x, quad))), None


def interface_dissipation(law_i: PhaseMaterial, law_j: PhaseMaterial, jump: InterfaceJump,
                          quad=None, n_iter=500, seed=0):
    """Inf over splits of the jump between two phases of the x3-integrated reduced dissipation.

    Convex nonsmooth 3-variable problem: multi-start subgradient descent with
    Polyak-type steps, then a coordinate pattern search and a simplex polish.
    """
    quad = tk.gauss_interval(5) if quad is None else quad
    nu = np.asarray(jump.nu, dtype=float)
    cbar = np.asarray(jump.c_bar, dtype=float)
    chat = float(jump.c_hat)
    L = np.linalg.norm(cbar) + abs(chat)
    if L == 0.0:
        return 0.0
    f, grad = _objective(law_i, law_j, nu, cbar, chat, quad)
    if grad is None:
        grad = lambda x: _num_grad(f, x, 1e-7 * L)
    full = np.array([cbar[0], cbar[1], chat])
    rng = np.random.default_rng(seed)
    starts = [np.zeros(3), full, 0.5 * full]
    starts += [full * rng.uniform(-0.5, 1.5) + rng.normal(scale=0.5 * L, size=3) for _ in range(5)]
    best_x, best_f = None, np.inf
    for x0 in starts:
        x, fx = _subgradient(f, grad, x0, n_iter, L)
        if fx < best_f:
            best_x, best_f = x, fx
    best_x, best_f = _pattern_search(f, best_x, best_f, 0.25 * L)
    res = optimize.minimize(f, best_x, method="Nelder-Mead",
                            options=dict(xatol=1e-10 * L, fatol=1e-13 * L, maxiter=3000,
                                         initial_simplex=best_x + 1e-3 * L * np.vstack([np.zeros(3), np.eye(3)])))
    if res.fun < best_f:
        best_f = res.fun
    return max(best_f, 0.0)


def _num_grad(f, x, step):
    g = np.zeros(3)
    for i in range(3):
        e = np.zeros(3)
        e[i] = step
        g[i] = (f(x + e) - f(x - e)) / (2 * step)
    return g


def _subgradient(f, grad, x0, n_iter, L):
    x = np.array(x0, dtype=float)
    fx = f(x)
    best_x, best_f = x.copy(), fx
    for it in range(n_iter):
        g = grad(x)
        gn = np.dot(g, g)
        if gn < 1e-30:
            break
        # Polyak step with an estimated optimum that shrinks toward the best value
        target = best_f * (1.0 - 0.5 / (it + 1))
        step = max(fx - max(target, 0.0), 1e-12 * L) / gn
        x = x - step * g
        fx = f(x)
        if fx < best_f:
            best_x, best_f = x.copy(), fx
    return best_x, best_f


def _pattern_search(f, x, fx, step, tol=1e-10):
    dirs = np.vstack([np.eye(3), -np.eye(3),
                      np.array([[1, 1, 0], [1, -1, 0], [1, 0, 1], [0, 1, 1], [1, 0, -1], [0, 1, -1]]) / np.sqrt(2)])
    dirs = np.vstack([dirs, -dirs[6:]])
    while step > tol * max(1.0, np.abs(x).max()):
        moved = False
        for d in dirs:
            y = x + step * d
            fy = f(y)
            if fy < fx - 1e-16:
                x, fx, moved = y, fy, True
                break
        if not moved:
            step *= 0.5
    return x, fx


def single_phase_jump_integral(m: PhaseMaterial, jump: InterfaceJump, quad=None):
    """int_I R_red(c_bar (.) nu + x3 c_hat nu (x) nu) dx3."""
    zs, ws = tk.gauss_interval(5) if quad is None else quad
    return float(sum(w * _red_diss(m, _jump_tensor(jump.nu, np.asarray(jump.c_bar, float), jump.c_hat, z))
                     for z, w in zip(zs, ws)))
