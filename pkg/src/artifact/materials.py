"""Phase materials: isotropic elasticity, scalar hardening, yield sets."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensorkit as tk

DEV_TOL = 1e-10


@dataclass(frozen=True)
class YieldSet:
    """Deviatoric yield set. kind is 'von_mises' or 'tresca'.

    Tresca is normalised as {s : s_max - s_min <= sqrt(2) r}, so that it
    contains the deviatoric ball of radius r and sits inside radius 2r/sqrt(3).
    """

    kind: str = "von_mises"
    radius: float = 1.0

    def __post_init__(self):
        if self.kind not in ("von_mises", "tresca"):
            raise ValueError(f"unknown yield set kind {self.kind!r}")
        if not self.radius > 0:
            raise ValueError("yield radius must be positive")

    @property
    def r_inner(self):
        return self.radius

    @property
    def r_outer(self):
        return self.radius if self.kind == "von_mises" else 2.0 * self.radius / np.sqrt(3.0)

    def support(self, p):
        """Support function of the set evaluated on deviatoric packed p."""
        p = np.asarray(p, dtype=float)
        if self.kind == "von_mises":
            return self.radius * tk.norm(p)
        ev = np.linalg.eigvalsh(tk.to_full(p))
        return self.radius / np.sqrt(2.0) * np.abs(ev).sum(-1)

    def distance(self, s):
        """Euclidean distance of deviatoric stress s to the set."""
        s = np.asarray(s, dtype=float)
        if self.kind == "von_mises":
            return np.maximum(tk.norm(s) - self.radius, 0.0)
        return tk.norm(s - project_tresca(s, self.radius))


def project_tresca(s, radius):
    """Nearest point projection of deviatoric packed s onto the Tresca hexagon."""
    s = np.asarray(s, dtype=float)
    ev, vec = np.linalg.eigh(tk.to_full(s))
    lam = ev[..., ::-1].copy()  # descending
    c = np.sqrt(2.0) * radius
    excess = lam[..., 0] - lam[..., 2] - c
    out = lam.copy()
    act = excess > 0
    out[..., 0] = np.where(act, lam[..., 0] - 0.5 * excess, lam[..., 0])
    out[..., 2] = np.where(act, lam[..., 2] + 0.5 * excess, lam[..., 2])
    hi = act & (lam[..., 1] > out[..., 0])
    lo = act & (lam[..., 1] < out[..., 2])
    out[hi] = np.array([c / 3, c / 3, -2 * c / 3])
    out[lo] = np.array([2 * c / 3, -c / 3, -c / 3])
    full = np.einsum("...ik,...k,...jk->...ij", vec, out[..., ::-1], vec)
    return tk.from_full(full, check=False)


@dataclass(frozen=True)
class PhaseMaterial:
    """C A = 2 mu dev(A) + k tr(A) I, H_kin = h_kin Id, scalar H_iso."""

    mu: float = 1.0
    k: float = 1.0
    h_kin: float = 0.0
    h_iso: float = 0.0
    yield_set: YieldSet = field(default_factory=YieldSet)

    def __post_init__(self):
        if not (self.mu > 0 and self.k > 0):
            raise ValueError("mu and k must be positive")
        if self.h_kin < 0 or self.h_iso < 0:
            raise ValueError("hardening moduli must be nonnegative")

    # bounds r_C |A|^2 <= A:CA <= R_C |A|^2
    @property
    def r_C(self):
        return min(2.0 * self.mu, 3.0 * self.k)

    @property
    def R_C(self):
        return max(2.0 * self.mu, 3.0 * self.k)

    @property
    def hardening_active(self):
        return self.h_kin + self.h_iso > 0

    def metric_matrix(self):
        """Matrix M with A:C(B) = A @ M @ B in packed SymMat3 coordinates."""
        t = tk.I3
        return 2.0 * self.mu * tk.G3 + (self.k - 2.0 * self.mu / 3.0) * np.outer(t, t)


def elasticity_apply(m: PhaseMaterial, a):
    a = np.asarray(a, dtype=float)
    return 2.0 * m.mu * tk.dev3(a) + m.k * tk.trace(a)[..., None] * tk.I3


def hardening_apply(m: PhaseMaterial, p):
    return m.h_kin * np.asarray(p, dtype=float)


def _check_deviatoric(p):
    tr = np.abs(tk.trace(p))
    if np.any(tr > DEV_TOL * np.maximum(1.0, tk.norm(p))):
        raise ValueError(f"plastic strain must be deviatoric (|tr p| = {np.max(tr):.3e})")


def dissipation_R(m: PhaseMaterial, p):
    p = np.asarray(p, dtype=float)
    _check_deviatoric(p)
    return m.yield_set.support(p)


def gen_dissipation(m: PhaseMaterial, p, alpha):
    """R(p) if R(p) <= alpha else +inf."""
    r = dissipation_R(m, p)
    return np.where(r <= alpha, r, np.inf)


# ---------------------------------------------------------------------------
# periodic microstructure

@dataclass
class MultiphaseLaw:
    phases: list
    geometry: object  # homogenize.TorusGeometry
    epsilon: float = 1.0

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        nlab = int(np.max(self.geometry.labels)) + 1
        if nlab > len(self.phases):
            raise ValueError(f"torus uses {nlab} phases but only {len(self.phases)} were given")

    def phase_at(self, x):
        """Phase label at plate point(s) x via the pixel containing frac(x/eps)."""
        x = np.asarray(x, dtype=float)
        y = np.mod(x / self.epsilon, 1.0)
        n = self.geometry.resolution
        ij = np.minimum((y * n).astype(int), n - 1)
        return self.geometry.labels[ij[..., 0], ij[..., 1]]


def phase_at(law: MultiphaseLaw, x):
    return law.phase_at(x)
