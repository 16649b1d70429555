"""Reference-domain quadrature rules and their affine push-forwards.

Rules are built by conical products of Gauss-Jacobi rules (a Duffy-type
collapse of the unit simplex onto the unit cube), so any exactness order up
to ``MAX_ORDER`` is available in d = 1, 2, 3.  Space-time prisms use the
tensor product of a simplex rule with a Gauss-Legendre interval rule.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import roots_jacobi, roots_legendre

#: Largest supported exactness order for simplex/interval rules.
MAX_ORDER = 40

SIMPLEX = "simplex"
INTERVAL = "interval"
PRISM = "prism"


class QuadratureError(ValueError):
    pass


@dataclass(frozen=True)
class QuadratureRule:
    """Points and weights on a reference domain.

    ``points`` has shape (nq, dim); weights sum to the reference measure
    (1/d! for the unit simplex, 1 for the unit interval, their product for
    a prism).
    """

    domain: str
    dim: int
    order: int
    points: np.ndarray
    weights: np.ndarray

    @property
    def n_points(self) -> int:
        return self.weights.shape[0]


def _check_order(order: int) -> None:
    if order < 0:
        raise QuadratureError(f"quadrature order must be nonnegative, got {order}")
    if order > MAX_ORDER:
        raise QuadratureError(
            f"quadrature order {order} exceeds the supported cap {MAX_ORDER}"
        )


def _gauss_jacobi_01(n: int, alpha: int) -> tuple[np.ndarray, np.ndarray]:
    """n-point rule for integrals of f(t) (1-t)^alpha over (0, 1)."""
    if alpha == 0:
        x, w = roots_legendre(n)
    else:
        x, w = roots_jacobi(n, alpha, 0.0)
    t = 0.5 * (x + 1.0)
    return t, w * 0.5 ** (alpha + 1)


@lru_cache(maxsize=None)
def simplex_rule(d: int, order: int) -> QuadratureRule:
    """Rule exact for total degree <= order on the unit d-simplex.

    The collapsed coordinates use one Gauss-Jacobi rule per direction with
    weight (1-t)^j absorbing the Jacobian factor, hence exactness for any
    requested order at (ceil((order+1)/2))^d points.
    """
    if d not in (1, 2, 3):
        raise QuadratureError(f"simplex rules support d in {{1, 2, 3}}, got {d}")
    _check_order(order)
    n = (order + 2) // 2
    axes = [_gauss_jacobi_01(n, j) for j in range(d)]
    # Tensor the collapsed coordinates, then unfold: x_i = xi_i * prod_{j>i}(1 - xi_j).
    grids = np.meshgrid(*(t for t, _ in axes), indexing="ij")
    wgrids = np.meshgrid(*(w for _, w in axes), indexing="ij")
    xi = np.stack([g.ravel() for g in grids], axis=1)
    weights = np.ones(xi.shape[0])
    for wg in wgrids:
        weights *= wg.ravel()
    points = np.empty_like(xi)
    for i in range(d):
        points[:, i] = xi[:, i]
        for j in range(i + 1, d):
            points[:, i] *= 1.0 - xi[:, j]
    return QuadratureRule(SIMPLEX, d, order, points, weights)


@lru_cache(maxsize=None)
def interval_rule(order: int) -> QuadratureRule:
    """Gauss-Legendre rule on (0, 1) exact for degree <= order."""
    _check_order(order)
    n = (order + 2) // 2
    t, w = _gauss_jacobi_01(n, 0)
    return QuadratureRule(INTERVAL, 1, order, t[:, None].copy(), w.copy())


def prism_rule(spatial: QuadratureRule, interval: QuadratureRule) -> QuadratureRule:
    """Tensor product rule on (unit simplex) x (0, 1)."""
    if interval.domain != INTERVAL:
        raise QuadratureError("second factor must be an interval rule")
    ns, nt = spatial.n_points, interval.n_points
    pts = np.empty((ns * nt, spatial.dim + 1))
    pts[:, : spatial.dim] = np.repeat(spatial.points, nt, axis=0)
    pts[:, spatial.dim] = np.tile(interval.points[:, 0], ns)
    w = (spatial.weights[:, None] * interval.weights[None, :]).ravel()
    return QuadratureRule(PRISM, spatial.dim + 1, min(spatial.order, interval.order), pts, w)


def map_to_simplex(
    rule: QuadratureRule, vertices: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Push a reference-simplex rule onto the physical simplex ``vertices``.

    ``vertices`` is (d+1, d).  Weights are scaled by |det J| so that they sum
    to the simplex volume.
    """
    vertices = np.asarray(vertices, dtype=float)
    d = vertices.shape[1]
    if vertices.shape != (d + 1, d):
        raise QuadratureError(f"expected (d+1, d) vertex array, got {vertices.shape}")
    edges = vertices[1:] - vertices[0]
    det = np.linalg.det(edges)
    scale = float(np.max(np.abs(edges))) or 1.0
    if abs(det) < 1e-14 * scale**d:
        raise QuadratureError("degenerate simplex in quadrature map")
    points = vertices[0] + rule.points @ edges
    return points, rule.weights * abs(det)


def map_to_subsimplex(
    rule: QuadratureRule, vertices: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Map a reference k-simplex rule onto a k-simplex embedded in R^d.

    Used for face quadrature: ``vertices`` is (k+1, d) with k < d.  Weights
    are scaled with the Gram determinant so they sum to the k-measure.
    """
    vertices = np.asarray(vertices, dtype=float)
    k = vertices.shape[0] - 1
    edges = vertices[1:] - vertices[0]
    gram = edges @ edges.T
    detg = np.linalg.det(gram)
    if detg <= 0.0:
        raise QuadratureError("degenerate sub-simplex in face quadrature map")
    points = vertices[0] + rule.points @ edges
    # Reference weights sum to 1/k!, so sqrt(det G) restores the k-measure.
    return points, rule.weights * math.sqrt(detg)


def tensor_with_interval(
    base_points: np.ndarray,
    base_weights: np.ndarray,
    t0: float,
    t1: float,
    time_rule: QuadratureRule,
) -> tuple[np.ndarray, np.ndarray]:
    """Tensor already-mapped base quadrature with an interval (t0, t1).

    Returns points of shape (nb*nt, d_base+1) with the time coordinate last.
    """
    tau = t1 - t0
    tpts = t0 + tau * time_rule.points[:, 0]
    tw = tau * time_rule.weights
    nb, nt = base_weights.shape[0], tw.shape[0]
    pts = np.empty((nb * nt, base_points.shape[1] + 1))
    pts[:, :-1] = np.repeat(base_points, nt, axis=0)
    pts[:, -1] = np.tile(tpts, nb)
    w = (base_weights[:, None] * tw[None, :]).ravel()
    return pts, w
