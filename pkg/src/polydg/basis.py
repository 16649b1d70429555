"""Orthonormal Legendre bases on element bounding boxes.

Basis functions live in physical coordinates: each element carries a degree
and an axis-aligned box [a_1,b_1] x ... x [a_d,b_d], and the basis is the
tensor product of 1D Legendre polynomials orthonormalized on the box sides,
restricted to the element.  No reference-element map is involved; evaluation
anywhere in R^d is legitimate.

Index-ordering contract (part of the matrix block layout):

* family ``P`` (total degree): multi-indices are graded lexicographic --
  ascending total degree, lexicographically ascending within a degree level.
* family ``PQ`` (space-time tensor): the temporal exponent occupies the LAST
  coordinate and varies slowest; within each temporal degree the spatial
  multi-indices repeat the ``P`` ordering.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from math import comb

import numpy as np


class Family(Enum):
    """Polynomial space family: total-degree or space-time tensor product."""

    P = "P"
    PQ = "PQ"


@dataclass(frozen=True)
class BasisSpec:
    """Degree, family, and bounding box of one element's basis.

    ``box`` is a (2, d) array: row 0 the lower corner, row 1 the upper.
    """

    degree: int
    family: Family
    box: np.ndarray

    def __post_init__(self):
        box = np.asarray(self.box, dtype=float)
        if box.ndim != 2 or box.shape[0] != 2:
            raise ValueError(f"box must have shape (2, d), got {box.shape}")
        if not np.all(box[1] > box[0]):
            raise ValueError("bounding box must have positive side lengths")
        object.__setattr__(self, "box", box)
        if self.degree < 0:
            raise ValueError("degree must be nonnegative")

    @property
    def dim(self) -> int:
        return self.box.shape[1]

    @property
    def n_funcs(self) -> int:
        return num_basis(self.degree, self.dim, self.family)

    @property
    def total_degree(self) -> int:
        """Largest total polynomial degree in the space (2p for PQ)."""
        return self.degree if self.family is Family.P else 2 * self.degree

    def indices(self) -> np.ndarray:
        return multi_indices(self.degree, self.dim, self.family)


def num_basis(p: int, d: int, family: Family = Family.P) -> int:
    """Dimension of the local polynomial space."""
    if p < 0 or d < 1:
        raise ValueError("need p >= 0 and d >= 1")
    if family is Family.P:
        return comb(p + d, d)
    s = d - 1
    if s < 1:
        raise ValueError("PQ family needs d >= 2")
    return (p + 1) * comb(p + s, s)


def _graded_lex(p: int, d: int):
    for total in range(p + 1):
        for alpha in itertools.product(range(total + 1), repeat=d):
            if sum(alpha) == total:
                yield alpha


@lru_cache(maxsize=None)
def multi_indices(p: int, d: int, family: Family = Family.P) -> np.ndarray:
    """Exponent table, shape (n_funcs, d); see the module ordering contract."""
    if family is Family.P:
        table = np.array(list(_graded_lex(p, d)), dtype=np.int64).reshape(-1, d)
    else:
        s = d - 1
        spatial = list(_graded_lex(p, s))
        rows = [(*alpha, k) for k in range(p + 1) for alpha in spatial]
        table = np.array(rows, dtype=np.int64).reshape(-1, d)
    table.setflags(write=False)
    return table


def _legendre_tables(p: int, t: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Values and derivatives of P_0..P_p at reference coordinates t.

    Three-term recurrence in multiply-add form; derivative by the companion
    recurrence P'_{n+1} = (2n+1) P_n + P'_{n-1}.
    """
    nq = t.shape[0]
    vals = np.empty((p + 1, nq))
    ders = np.empty((p + 1, nq))
    vals[0] = 1.0
    ders[0] = 0.0
    if p >= 1:
        vals[1] = t
        ders[1] = 1.0
    for n in range(1, p):
        a = (2 * n + 1) / (n + 1)
        b = n / (n + 1)
        vals[n + 1] = a * t * vals[n] - b * vals[n - 1]
        ders[n + 1] = (2 * n + 1) * vals[n] + ders[n - 1]
    return vals, ders


def tabulate(spec: BasisSpec, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Evaluate all basis functions and gradients at physical points.

    Returns ``(vals, grads)`` with shapes (n, nq) and (n, d, nq).
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    d = spec.dim
    if points.shape[1] != d:
        raise ValueError(f"points have dim {points.shape[1]}, basis has dim {d}")
    p = spec.degree
    a, b = spec.box[0], spec.box[1]
    half = 0.5 * (b - a)
    t = (points - 0.5 * (a + b)) / half  # (nq, d)

    nq = points.shape[0]
    vals1d = np.empty((d, p + 1, nq))
    ders1d = np.empty((d, p + 1, nq))
    # Orthonormalization on [a_i, b_i]: scale L_n by sqrt((2n+1)/(b_i-a_i)).
    norms = np.sqrt((2.0 * np.arange(p + 1) + 1.0))
    for i in range(d):
        v, dv = _legendre_tables(p, t[:, i])
        scale = norms / np.sqrt(b[i] - a[i])
        vals1d[i] = v * scale[:, None]
        ders1d[i] = dv * (scale / half[i])[:, None]

    alpha = spec.indices()
    dims = np.arange(d)
    picked = vals1d[dims[None, :], alpha, :]  # (n, d, nq)
    vals = picked.prod(axis=1)
    picked_d = ders1d[dims[None, :], alpha, :]
    grads = np.empty((alpha.shape[0], d, nq))
    for k in range(d):
        factors = picked.copy()
        factors[:, k, :] = picked_d[:, k, :]
        grads[:, k, :] = factors.prod(axis=1)
    return vals, grads


def eval_basis(spec: BasisSpec, index, x) -> float:
    """Value of the basis function with exponent tuple ``index`` at point x."""
    row = _index_row(spec, index)
    vals, _ = tabulate(spec, np.asarray(x, dtype=float)[None, :])
    return float(vals[row, 0])


def eval_grad(spec: BasisSpec, index, x) -> np.ndarray:
    """Analytic gradient of ``eval_basis`` at x."""
    row = _index_row(spec, index)
    _, grads = tabulate(spec, np.asarray(x, dtype=float)[None, :])
    return grads[row, :, 0].copy()


def _index_row(spec: BasisSpec, index) -> int:
    alpha = np.asarray(index, dtype=np.int64)
    table = spec.indices()
    hits = np.flatnonzero((table == alpha).all(axis=1))
    if hits.size == 0:
        raise ValueError(f"multi-index {tuple(alpha)} not in the {spec.family.value} "
                         f"space of degree {spec.degree}")
    return int(hits[0])


def build_basis(mesh, degrees, family: Family = Family.P) -> list[BasisSpec]:
    """Per-element BasisSpec list for a polytopic mesh.

    ``degrees`` is an int (uniform) or a per-element sequence.
    """
    n = mesh.n_elements
    if np.isscalar(degrees):
        degrees = np.full(n, int(degrees))
    degrees = np.asarray(degrees, dtype=np.int64)
    if degrees.shape != (n,):
        raise ValueError("degrees must be scalar or one per element")
    return [BasisSpec(int(degrees[e]), family, mesh.bounding_boxes[e]) for e in range(n)]
