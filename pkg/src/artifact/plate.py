"""Kirchhoff-Love plate kinematics on a uniform rectangular grid.

Unknowns live at grid nodes (node index n = i * ny + j, i along x1); strains,
plastic strains and hardening variables live at cell centers times x3
quadrature nodes. Strain rows are ordered (cell, x3 node, component).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from . import tensorkit as tk

EDGES = ("left", "right", "bottom", "top")


@dataclass(frozen=True)
class PlateGrid:
    nx: int
    ny: int
    Lx: float = 1.0
    Ly: float = 1.0
    gamma_D: tuple = ("left",)

    def __post_init__(self):
        if self.nx < 3 or self.ny < 3:
            raise ValueError("plate grid needs at least 3 nodes per axis")
        gd = tuple(self.gamma_D)
        if not gd:
            raise ValueError("Dirichlet boundary gamma_D must be nonempty")
        bad = [e for e in gd if e not in EDGES]
        if bad:
            raise ValueError(f"unknown boundary edges {bad}")
        object.__setattr__(self, "gamma_D", gd)

    @property
    def dx(self):
        return self.Lx / (self.nx - 1)

    @property
    def dy(self):
        return self.Ly / (self.ny - 1)

    @property
    def spacing(self):
        return max(self.dx, self.dy)

    @property
    def n_nodes(self):
        return self.nx * self.ny

    @property
    def n_cells(self):
        return (self.nx - 1) * (self.ny - 1)

    @property
    def cell_area(self):
        return self.dx * self.dy

    @cached_property
    def nodes(self):
        x = np.linspace(0.0, self.Lx, self.nx)
        y = np.linspace(0.0, self.Ly, self.ny)
        X, Y = np.meshgrid(x, y, indexing="ij")
        return np.stack([X.ravel(), Y.ravel()], axis=-1)

    @cached_property
    def centers(self):
        x = (np.arange(self.nx - 1) + 0.5) * self.dx
        y = (np.arange(self.ny - 1) + 0.5) * self.dy
        X, Y = np.meshgrid(x, y, indexing="ij")
        return np.stack([X.ravel(), Y.ravel()], axis=-1)

    @cached_property
    def node_weights(self):
        """Trapezoid (lumped) nodal areas."""
        wx = np.full(self.nx, self.dx)
        wx[[0, -1]] *= 0.5
        wy = np.full(self.ny, self.dy)
        wy[[0, -1]] *= 0.5
        return np.outer(wx, wy).ravel()

    def node(self, i, j):
        return i * self.ny + j

    def edge_nodes(self, edge, depth=0):
        """Node indices on an edge, or on the line `depth` nodes inside it."""
        I, J = np.meshgrid(np.arange(self.nx), np.arange(self.ny), indexing="ij")
        sel = {"left": I == depth, "right": I == self.nx - 1 - depth,
               "bottom": J == depth, "top": J == self.ny - 1 - depth}[edge]
        return np.flatnonzero(sel.ravel())

    @cached_property
    def clamped_nodes(self):
        """Nodes on gamma_D (values of u_bar and corrector pinned)."""
        return np.unique(np.concatenate([self.edge_nodes(e) for e in self.gamma_D]))

    @cached_property
    def clamped_nodes_u3(self):
        """gamma_D nodes plus the adjacent line: pins u3 and its normal slope."""
        return np.unique(np.concatenate([self.edge_nodes(e, d) for e in self.gamma_D for d in (0, 1)]))

    @cached_property
    def interior_cells(self):
        """Cells not touching the boundary of omega."""
        I, J = np.meshgrid(np.arange(self.nx - 1), np.arange(self.ny - 1), indexing="ij")
        ok = (I > 0) & (I < self.nx - 2) & (J > 0) & (J < self.ny - 2)
        return np.flatnonzero(ok.ravel())

    # -- difference operators: nodal scalar -> cell-center values ---------
    @cached_property
    def ops(self):
        return _build_ops(self)


def _build_ops(g: PlateGrid):
    nx, ny, dx, dy = g.nx, g.ny, g.dx, g.dy
    nc = g.n_cells
    ci, cj = np.meshgrid(np.arange(nx - 1), np.arange(ny - 1), indexing="ij")
    ci, cj = ci.ravel(), cj.ravel()
    cells = np.arange(nc)
    rows, cols, vals = {}, {}, {}

    def add(name, r, c, v):
        rows.setdefault(name, []).append(r)
        cols.setdefault(name, []).append(c)
        vals.setdefault(name, []).append(np.broadcast_to(v, r.shape).astype(float))

    n00, n10 = g.node(ci, cj), g.node(ci + 1, cj)
    n01, n11 = g.node(ci, cj + 1), g.node(ci + 1, cj + 1)
    for n, v in ((n00, 0.25), (n10, 0.25), (n01, 0.25), (n11, 0.25)):
        add("avg", cells, n, v)
    for n, v in ((n00, -1), (n10, 1), (n01, -1), (n11, 1)):
        add("dx", cells, n, v / (2 * dx))
    for n, v in ((n00, -1), (n10, -1), (n01, 1), (n11, 1)):
        add("dy", cells, n, v / (2 * dy))
    for n, v in ((n00, 1), (n10, -1), (n01, -1), (n11, 1)):
        add("dxy", cells, n, v / (dx * dy))

    # second derivative along one axis at the cell center: average of the
    # nodal second differences at the two bracketing nodes, or the single
    # interior one when the cell touches the boundary
    def second(name, along_x):
        a = ci if along_x else cj
        m = (nx if along_x else ny) - 1  # cells along that axis
        h2 = (dx if along_x else dy) ** 2
        node = (lambda s, t: g.node(s, t)) if along_x else (lambda s, t: g.node(t, s))
        other = cj if along_x else ci
        for o in (0, 1):
            oo = other + o
            mid = (a > 0) & (a < m - 1)
            lo_b = a == 0
            hi_b = a == m - 1
            for s, v in ((-1, 1), (0, -1), (1, -1), (2, 1)):
                add(name, cells[mid], node(a[mid] + s, oo[mid]), 0.25 * v / h2)
            # boundary cells: second difference centered at the inner node
            for sel, centre in ((lo_b, a + 1), (hi_b, a)):
                for s, v in ((-1, 1), (0, -2), (1, 1)):
                    add(name, cells[sel], node(centre[sel] + s, oo[sel]), 0.5 * v / h2)

    second("dxx", True)
    second("dyy", False)
    out = {}
    for name in rows:
        r = np.concatenate(rows[name])
        c = np.concatenate(cols[name])
        v = np.concatenate(vals[name])
        out[name] = sp.csr_matrix((v, (r, c)), shape=(nc, g.n_nodes))
    return out


@dataclass
class KLDisplacement:
    u_bar: np.ndarray  # (n_nodes, 2)
    u3: np.ndarray  # (n_nodes,)

    def as_vector(self):
        return np.concatenate([self.u_bar[:, 0], self.u_bar[:, 1], self.u3])

    @classmethod
    def from_vector(cls, grid: PlateGrid, u):
        N = grid.n_nodes
        return cls(np.stack([u[:N], u[N:2 * N]], axis=-1), np.array(u[2 * N:3 * N]))

    @classmethod
    def from_functions(cls, grid: PlateGrid, ubar=None, u3=None):
        x = grid.nodes
        ub = np.zeros((grid.n_nodes, 2)) if ubar is None else np.asarray(ubar(x), dtype=float)
        w = np.zeros(grid.n_nodes) if u3 is None else np.asarray(u3(x), dtype=float)
        return cls(ub, w)


def membrane_strain(grid: PlateGrid, u_bar):
    o = grid.ops
    u1, u2 = u_bar[:, 0], u_bar[:, 1]
    return np.stack([o["dx"] @ u1, o["dy"] @ u2, 0.5 * (o["dy"] @ u1 + o["dx"] @ u2)], axis=-1)


def hessian(grid: PlateGrid, u3):
    o = grid.ops
    return np.stack([o["dxx"] @ u3, o["dyy"] @ u3, o["dxy"] @ u3], axis=-1)


def kl_strain(d: KLDisplacement, x3, grid: PlateGrid):
    """E'u_bar - x3 D^2 u3 at cell centers, packed SymMat2 per cell."""
    return membrane_strain(grid, d.u_bar) - x3 * hessian(grid, d.u3)


def kl_blocks(grid: PlateGrid):
    """Sparse maps from [u1, u2, u3] nodal vectors to packed membrane strain and Hessian."""
    o = grid.ops
    Z = sp.csr_matrix((grid.n_cells, grid.n_nodes))
    mem = [sp.hstack([o["dx"], Z, Z]), sp.hstack([Z, o["dy"], Z]), sp.hstack([0.5 * o["dy"], 0.5 * o["dx"], Z])]
    hes = [sp.hstack([Z, Z, o["dxx"]]), sp.hstack([Z, Z, o["dyy"]]), sp.hstack([Z, Z, o["dxy"]])]
    return mem, hes


def interleave(blocks, nq_blocks):
    """Stack per-(x3 node, component) sparse blocks (each n_cells rows) into
    one matrix with rows ordered (cell, x3 node, component)."""
    nq = len(nq_blocks)
    ncomp = len(nq_blocks[0])
    nc = nq_blocks[0][0].shape[0]
    stacked = sp.vstack([nq_blocks[q][c] for q in range(nq) for c in range(ncomp)]).tocsr()
    # stacked row = (q * ncomp + c) * nc + cell  ->  (cell * nq + q) * ncomp + c
    cell = np.arange(nc)
    perm = np.empty(nq * ncomp * nc, dtype=int)
    for q in range(nq):
        for c in range(ncomp):
            perm[(cell * nq + q) * ncomp + c] = (q * ncomp + c) * nc + cell
    return stacked[perm]


# ---------------------------------------------------------------------------
# Dirichlet data

def _ramp(profile, T):
    if profile == "linear":
        return lambda t: t / T, lambda t: 1.0 / T
    if profile == "cyclic":  # load to full amplitude at T/2, unload to zero
        return (lambda t: 1.0 - abs(1.0 - 2.0 * t / T),
                lambda t: (2.0 / T) * (1.0 if t < 0.5 * T else -1.0))
    if profile == "constant":
        return lambda t: 1.0, lambda t: 0.0
    raise ValueError(f"unknown ramp profile {profile!r}")


@dataclass
class BoundaryDatum:
    """w(t, x') = s(t) * (W_bar(x'), W3(x')) with a scalar ramp s."""

    shape_bar: object
    shape_3: object
    ramp: object
    name: str = "custom"

    def w_bar(self, t, x):
        return self.ramp(t) * np.asarray(self.shape_bar(x), dtype=float)

    def w3(self, t, x):
        return self.ramp(t) * np.asarray(self.shape_3(x), dtype=float)

    def nodal(self, grid: PlateGrid, t):
        return KLDisplacement(self.w_bar(t, grid.nodes), self.w3(t, grid.nodes))

    def scaled(self, factor):
        sb, s3 = self.shape_bar, self.shape_3
        return BoundaryDatum(lambda x: factor * np.asarray(sb(x)), lambda x: factor * np.asarray(s3(x)),
                             self.ramp, f"{self.name}*{factor:g}")

    def plus(self, other: "BoundaryDatum"):
        """Sum of two data sharing this ramp."""
        a, b = self, other
        return BoundaryDatum(lambda x: np.asarray(a.shape_bar(x)) + np.asarray(b.shape_bar(x)),
                             lambda x: np.asarray(a.shape_3(x)) + np.asarray(b.shape_3(x)),
                             self.ramp, f"{a.name}+{b.name}")


def _zero_bar(x):
    return np.zeros(np.shape(x)[:-1] + (2,))


def _zero_3(x):
    return np.zeros(np.shape(x)[:-1])


def make_datum(family, amplitude=1e-3, profile="linear", T=1.0, gradient=None):
    """Closed-form Kirchhoff-Love Dirichlet data.

    membrane: w_bar = a (x1, 0)          bending: w3 = a x1^2 / 2
    mixed:    both of the above          affine:  w_bar = a G x' for a 2x2 G
    zero:     w = 0
    """
    a = float(amplitude)
    s, _ = _ramp(profile, T)
    if family == "membrane":
        sb, s3 = (lambda x: a * np.stack([x[..., 0], 0 * x[..., 0]], -1)), _zero_3
    elif family == "bending":
        sb, s3 = _zero_bar, (lambda x: 0.5 * a * x[..., 0] ** 2)
    elif family == "mixed":
        sb = lambda x: a * np.stack([x[..., 0], 0 * x[..., 0]], -1)
        s3 = lambda x: 0.5 * a * x[..., 0] ** 2
    elif family == "affine":
        G = np.asarray(gradient if gradient is not None else np.eye(2), dtype=float)
        sb, s3 = (lambda x: a * x @ G.T), _zero_3
    elif family == "zero":
        sb, s3 = _zero_bar, _zero_3
    else:
        raise ValueError(f"unknown datum family {family!r}")
    return BoundaryDatum(sb, s3, s, family)


# ---------------------------------------------------------------------------
# state and admissibility

@dataclass
class PlateState:
    """One time slice. kind 'reduced': p is (cells, nq, 3) SymMat2;
    kind 'scaled3d': p holds the rescaled deviator Lambda_h p, (cells, nq, 6)."""

    u: np.ndarray
    p: np.ndarray
    alpha: np.ndarray
    time: float
    grid: PlateGrid
    kind: str = "reduced"
    h: float = 1.0

    @property
    def disp(self):
        return KLDisplacement.from_vector(self.grid, self.u)

    @property
    def corrector(self):
        return None if self.kind == "reduced" else self.u[3 * self.grid.n_nodes:]

    @property
    def p_unscaled(self):
        """p^h = Lambda_h^{-1} P in scaled3d mode; p itself otherwise."""
        return self.p if self.kind == "reduced" else tk.lambda_h_inv(self.p, self.h)

    def copy(self):
        return PlateState(self.u.copy(), self.p.copy(), self.alpha.copy(), self.time, self.grid, self.kind, self.h)


@dataclass
class AdmissibilityReport:
    ok: bool
    max_violation: float
    location: tuple | None
    boundary_mismatch: float
    details: dict = field(default_factory=dict)


def admissibility_check(s: PlateState, law, datum: BoundaryDatum | None = None, tol=1e-9):
    """Largest R(p) - alpha over quadrature points and gamma_D datum mismatch."""
    from .reduction import reduced_dissipation

    phase = law.phase_at(s.grid.centers)
    viol = np.zeros(s.alpha.shape)
    for i, m in enumerate(law.phases):
        sel = phase == i
        if not sel.any():
            continue
        if s.kind == "reduced":
            r = reduced_dissipation(m, s.p[sel].reshape(-1, 3)).reshape(s.alpha[sel].shape)
        else:
            r = m.yield_set.support(s.p[sel])
        viol[sel] = r - s.alpha[sel]
    k = int(np.argmax(viol))
    vmax = float(viol.ravel()[k])
    loc = np.unravel_index(k, viol.shape) if vmax > tol else None
    mism = 0.0
    if datum is not None:
        g = s.grid
        w = datum.nodal(g, s.time)
        d = s.disp
        cn, c3 = g.clamped_nodes, g.clamped_nodes_u3
        mism = max(np.abs(d.u_bar[cn] - w.u_bar[cn]).max(initial=0.0),
                   np.abs(d.u3[c3] - w.u3[c3]).max(initial=0.0))
        if s.corrector is not None:
            V = s.corrector.reshape(6, -1)
            mism = max(mism, np.abs(V[:, cn]).max(initial=0.0))
    neg = float(max(-s.alpha.min(initial=0.0), 0.0))
    ok = vmax <= tol and mism <= tol and neg <= tol
    return AdmissibilityReport(ok, vmax, None if loc is None else tuple(int(v) for v in loc), float(mism),
                               {"negative_alpha": neg})
