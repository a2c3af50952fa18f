"""Small symmetric tensor algebra on packed coefficient vectors.

Packing convention (no sqrt(2) factors):

    SymMat3  ->  (a11, a22, a33, a12, a13, a23)
    SymMat2  ->  (a11, a22, a12)

Every function accepts a single packed vector or a stack of them with the
packed axis last, so the same code runs pointwise and over whole grids.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

TOL = 1e-13

# index pairs of the packed entries
_IDX3 = ((0, 0), (1, 1), (2, 2), (0, 1), (0, 2), (1, 2))
_IDX2 = ((0, 0), (1, 1), (0, 1))

# Frobenius metric in packed coordinates: a:b = a @ G @ b
G3 = np.diag([1.0, 1.0, 1.0, 2.0, 2.0, 2.0])
G2 = np.diag([1.0, 1.0, 2.0])
I3 = np.array([1.0, 1.0, 1.0, 0.0, 0.0, 0.0])
I2 = np.array([1.0, 1.0, 0.0])


def to_full(a):
    """Packed (..., 6) or (..., 3) -> full (..., n, n) symmetric matrices."""
    a = np.asarray(a, dtype=float)
    if a.shape[-1] == 6:
        n, idx = 3, _IDX3
    elif a.shape[-1] == 3:
        n, idx = 2, _IDX2
    else:
        raise ValueError(f"packed symmetric tensor must have 3 or 6 entries, got {a.shape[-1]}")
    out = np.zeros(a.shape[:-1] + (n, n))
    for k, (i, j) in enumerate(idx):
        out[..., i, j] = a[..., k]
        out[..., j, i] = a[..., k]
    return out


def from_full(m, check=True):
    """Full (..., n, n) -> packed; symmetric part is taken."""
    m = np.asarray(m, dtype=float)
    n = m.shape[-1]
    if m.shape[-2] != n or n not in (2, 3):
        raise ValueError("expected (..., 2, 2) or (..., 3, 3) matrices")
    if check and not np.allclose(m, np.swapaxes(m, -1, -2), atol=1e-12, rtol=0.0):
        raise ValueError("matrix is not symmetric")
    idx = _IDX3 if n == 3 else _IDX2
    return np.stack([0.5 * (m[..., i, j] + m[..., j, i]) for i, j in idx], axis=-1)


def metric(a):
    """Metric matrix G for the packed dimension of a."""
    return G3 if np.shape(a)[-1] == 6 else G2


def inner(a, b):
    """Frobenius product a:b of packed tensors (broadcasting)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape[-1] == 6:
        return (a[..., :3] * b[..., :3]).sum(-1) + 2.0 * (a[..., 3:] * b[..., 3:]).sum(-1)
    return a[..., 0] * b[..., 0] + a[..., 1] * b[..., 1] + 2.0 * a[..., 2] * b[..., 2]


def norm(a):
    return np.sqrt(np.maximum(inner(a, a), 0.0))


def trace(a):
    a = np.asarray(a, dtype=float)
    return a[..., :3].sum(-1) if a.shape[-1] == 6 else a[..., 0] + a[..., 1]


def dev3(a):
    """Deviatoric part A - (tr A / 3) I3."""
    a = np.array(a, dtype=float)
    t = a[..., :3].sum(-1, keepdims=True) / 3.0
    a[..., :3] -= t
    return a


def dev2(a):
    a = np.array(a, dtype=float)
    t = (a[..., 0] + a[..., 1])[..., None] / 2.0
    a[..., :2] -= t
    return a


def sym_outer(a, b):
    """Symmetrized tensor product (a_i b_j + a_j b_i) / 2, packed."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape[-1] != b.shape[-1]:
        raise ValueError("sym_outer needs vectors of equal dimension")
    if a.shape[-1] == 3:
        idx = _IDX3
    elif a.shape[-1] == 2:
        idx = _IDX2
    else:
        raise ValueError("sym_outer is defined for 2- or 3-vectors")
    return np.stack([0.5 * (a[..., i] * b[..., j] + a[..., j] * b[..., i]) for i, j in idx], axis=-1)


def _lambda_scale(h):
    if not h > 0:
        raise ValueError(f"thickness scale h must be positive, got {h}")
    return np.array([1.0, 1.0, 1.0 / h**2, 1.0, 1.0 / h, 1.0 / h])


def lambda_h(a, h):
    """Scale (i,3) entries by 1/h and the (3,3) entry by 1/h^2."""
    return np.asarray(a, dtype=float) * _lambda_scale(h)


def lambda_h_inv(a, h):
    return np.asarray(a, dtype=float) / _lambda_scale(h)


def embed(a2):
    """SymMat2 -> SymMat3 with zero out-of-plane entries."""
    a2 = np.asarray(a2, dtype=float)
    out = np.zeros(a2.shape[:-1] + (6,))
    out[..., 0] = a2[..., 0]
    out[..., 1] = a2[..., 1]
    out[..., 3] = a2[..., 2]
    return out


def inplane(a3):
    """In-plane block of a packed SymMat3."""
    a3 = np.asarray(a3, dtype=float)
    return np.stack([a3[..., 0], a3[..., 1], a3[..., 3]], axis=-1)


def deviatoric_basis():
    """Columns form a G3-orthonormal basis of traceless SymMat3 (6 x 5)."""
    q = np.zeros((6, 5))
    q[:3, 0] = np.array([1.0, -1.0, 0.0]) / np.sqrt(2.0)
    q[:3, 1] = np.array([1.0, 1.0, -2.0]) / np.sqrt(6.0)
    for k in range(3):
        q[3 + k, 2 + k] = 1.0 / np.sqrt(2.0)
    return q


# ---------------------------------------------------------------------------
# through-thickness quadrature and moments

def gauss_interval(n=2):
    """Gauss-Legendre nodes/weights on I = (-1/2, 1/2), weights summing to 1."""
    if not 1 <= n <= 5:
        raise ValueError("x3 quadrature supports 1 to 5 points")
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * x, 0.5 * w


@dataclass
class ThicknessField:
    """Packed tensors sampled at x3 quadrature nodes; axis -2 runs over nodes."""

    values: np.ndarray
    nodes: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        self.nodes = np.asarray(self.nodes, dtype=float)
        self.weights = np.asarray(self.weights, dtype=float)
        if self.values.shape[-2] != self.nodes.size or self.nodes.size != self.weights.size:
            raise ValueError("values, nodes and weights disagree on the number of x3 nodes")
        if abs(self.weights.sum() - 1.0) > 1e-12:
            raise ValueError("x3 weights must sum to 1")

    @classmethod
    def from_function(cls, f, n=2):
        nodes, weights = gauss_interval(n)
        return cls(np.stack([np.asarray(f(z), dtype=float) for z in nodes], axis=-2), nodes, weights)


def moments(f: ThicknessField):
    """Return (zeroth, first, perp) with zeroth = int f, first = 12 int x3 f."""
    w = f.weights[:, None]
    z = f.nodes[:, None]
    zeroth = (w * f.values).sum(-2)
    first = 12.0 * (w * z * f.values).sum(-2)
    perp = f.values - zeroth[..., None, :] - z * first[..., None, :]
    return zeroth, first, ThicknessField(perp, f.nodes, f.weights)
