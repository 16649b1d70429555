"""PDE coefficient fields, boundary classification, and the penalty parameter.

Coefficient callables are vectorized: they receive an (n, d) point array and
return (n,) scalars, (n, d) vectors, or (n, d, d) tensors.  A ``None``
diffusion/advection/reaction/source field means identically zero and lets
the kernels skip the corresponding terms.

Boundary pieces are classified per face at the mean of the face quadrature
points: elliptic faces (n'An > 0) become Dirichlet or Neumann according to a
user predicate, the rest split into inflow (b.n < 0) and outflow.  A face on
which b.n changes sign beyond tolerance is rejected: kernels are selected
statically per face, so such a face must be refined away.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Callable, Optional, Sequence

import numpy as np

from .mesh import BOUNDARY, BoundaryTag, Face, MeshError, PolytopicMesh
from .quadrature import interval_rule, map_to_subsimplex, simplex_rule

CLASSIFY_ORDER = 2  # facet rule order used for classification sampling


class ClassificationError(MeshError):
    """Raised when a face straddles the inflow/outflow transition."""


class FlowSide(Enum):
    INFLOW_FOR_ELEMENT = "inflow"
    OUTFLOW_FOR_ELEMENT = "outflow"


@dataclass
class PdeCoefficients:
    """Fields of - div(A grad u) + b . grad u + c u = f plus boundary data.

    ``energy_weight`` is the zeroth-order weight c - div(b)/2 used by the
    energy norm; it must be supplied analytically when b is not
    divergence-free (this module never differentiates b numerically).
    """

    diffusion: Optional[Callable] = None      # (n, d) -> (n, d, d), symmetric psd
    advection: Optional[Callable] = None      # (n, d) -> (n, d)
    reaction: Optional[Callable] = None       # (n, d) -> (n,)
    source: Optional[Callable] = None         # (n, d) -> (n,)
    dirichlet_data: Optional[Callable] = None  # (n, d) -> (n,)
    neumann_data: Optional[Callable] = None    # (n, d) -> (n,)
    exact_solution: Optional[Callable] = None
    exact_gradient: Optional[Callable] = None  # (n, d) -> (n, d)
    energy_weight: Optional[Callable] = None


@dataclass
class PenaltyConfig:
    """Penalty constant and per-element coverability flags.

    ``coverable`` marks elements admitting the milder penalty cap
    p^(2(d-1)); the default (all False) is the safe infinite-cap branch.
    """

    constant: float = 10.0
    coverable: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.constant <= 0.0:
            raise ValueError("penalty constant must be positive")

    def is_coverable(self, element: int) -> bool:
        return bool(self.coverable is not None and self.coverable[element])


@dataclass
class PenaltySideData:
    """Per-(element, face) inputs of the penalty formula."""

    volume: float
    degree: int
    a_bar: float
    max_adjacent_volume: float
    cov_cap: float  # p^(2(d-1)) if coverable else inf


# -- coefficient builders ---------------------------------------------------

def constant_scalar(value: float) -> Callable:
    def f(points):
        return np.full(points.shape[0], float(value))
    return f


def constant_vector(values: Sequence[float]) -> Callable:
    vec = np.asarray(values, dtype=float)

    def f(points):
        return np.broadcast_to(vec, (points.shape[0], vec.shape[0])).copy()
    return f


def constant_tensor(matrix) -> Callable:
    mat = np.atleast_2d(np.asarray(matrix, dtype=float))

    def f(points):
        return np.broadcast_to(mat, (points.shape[0],) + mat.shape).copy()
    return f


def isotropic_diffusion(value: float, dim: int) -> Callable:
    return constant_tensor(np.eye(dim) * value)


# -- boundary classification ------------------------------------------------

def _face_sample_points(mesh: PolytopicMesh, face: Face) -> np.ndarray:
    d = mesh.dim
    rule = interval_rule(CLASSIFY_ORDER) if d == 2 else simplex_rule(d - 1, CLASSIFY_ORDER)
    chunks = []
    for row in range(face.n_facets):
        pts, _ = map_to_subsimplex(rule, mesh.facet_coordinates(face, row))
        chunks.append(pts)
    return np.concatenate(chunks, axis=0)


def _checked_flow_sign(bn: np.ndarray, where: str) -> float:
    tol = 1e-10 * max(1.0, float(np.abs(bn).max()))
    if bn.min() < -tol and bn.max() > tol:
        raise ClassificationError(
            f"advection flux changes sign across {where}; refine the mesh so "
            "faces do not straddle the inflow/outflow transition"
        )
    return float(bn.mean())


def classify_boundary_face(
    mesh: PolytopicMesh,
    face: Face,
    coeffs: PdeCoefficients,
    dirichlet_predicate: Optional[Callable] = None,
) -> BoundaryTag:
    """Fichera-set tag of one boundary face (does not mutate the face)."""
    if not face.is_boundary:
        raise MeshError("classify_boundary_face needs a boundary face")
    pts = _face_sample_points(mesh, face)
    mean = pts.mean(axis=0)[None, :]
    n = face.normal
    if coeffs.diffusion is not None:
        a = coeffs.diffusion(mean)[0]
        tau_ell = 1e-12 * max(1.0, float(np.abs(a).max()))
        if float(n @ a @ n) > tau_ell:
            if dirichlet_predicate is None or dirichlet_predicate(mean[0]):
                return BoundaryTag.DIRICHLET
            return BoundaryTag.NEUMANN
    if coeffs.advection is None:
        return BoundaryTag.OUTFLOW
    bn = coeffs.advection(pts) @ n
    sign = _checked_flow_sign(bn, "a boundary face")
    return BoundaryTag.INFLOW if sign < 0.0 else BoundaryTag.OUTFLOW


def classify_boundary_faces(
    mesh: PolytopicMesh,
    coeffs: PdeCoefficients,
    dirichlet_predicate: Optional[Callable] = None,
) -> PolytopicMesh:
    """Tag every boundary face of the mesh in place; returns the mesh."""
    for f in mesh.faces:
        if f.is_boundary:
            f.tag = classify_boundary_face(mesh, f, coeffs, dirichlet_predicate)
    return mesh


def elemental_inflow_part(
    mesh: PolytopicMesh, element: int, face: Face, coeffs: PdeCoefficients
) -> FlowSide:
    """Whether the face lies on the element's inflow or outflow boundary.

    Convention: b.n = 0 counts as outflow.
    """
    if coeffs.advection is None:
        return FlowSide.OUTFLOW_FOR_ELEMENT
    n = face.outward_normal(element)
    pts = _face_sample_points(mesh, face)
    bn = coeffs.advection(pts) @ n
    sign = _checked_flow_sign(bn, f"a face of element {element}")
    if sign < 0.0:
        return FlowSide.INFLOW_FOR_ELEMENT
    return FlowSide.OUTFLOW_FOR_ELEMENT


# -- discontinuity penalization ---------------------------------------------

def penalty_side_data(
    mesh: PolytopicMesh,
    element: int,
    face: Face,
    degree: int,
    volume_points: np.ndarray,
    coeffs: PdeCoefficients,
    config: PenaltyConfig,
) -> PenaltySideData:
    """Assemble the per-side penalty inputs for ``penalty_sigma``.

    ``a_bar`` is estimated as the max of n'A(x)n over the element's volume
    quadrature points (with the face normal); ``max_adjacent_volume`` is the
    largest subdivision simplex of the element touching the face.
    """
    n = face.normal
    if coeffs.diffusion is None:
        a_bar = 0.0
    else:
        a = coeffs.diffusion(volume_points)
        a_bar = float(np.einsum("i,qij,j->q", n, a, n).max())
    if element == face.owner:
        adj = face.owner_simplices
    elif element == face.neighbor:
        adj = face.neighbor_simplices
    else:
        raise MeshError("element is not adjacent to the face")
    adj = adj[adj != BOUNDARY]
    if adj.size == 0:
        raise MeshError("no subdivision simplex adjacent to the face")
    max_adj = float(mesh.base.simplex_volumes[adj].max())
    d = mesh.dim
    cov_cap = float(degree ** (2 * (d - 1))) if config.is_coverable(element) else np.inf
    return PenaltySideData(
        volume=float(mesh.element_volumes[element]),
        degree=degree,
        a_bar=a_bar,
        max_adjacent_volume=max_adj,
        cov_cap=cov_cap,
    )


def penalty_sigma(
    face: Face,
    owner_data: PenaltySideData,
    neighbor_data: Optional[PenaltySideData],
    config: PenaltyConfig,
) -> float:
    """Discontinuity-penalization value on one face.

    sigma = C * max over adjacent elements of
            min(|k| / sup|K^F|, cov_cap) * a_bar * p^2 * |F| / |k|,
    with the max over the owner only on Dirichlet faces.
    """
    sides = [owner_data] if neighbor_data is None else [owner_data, neighbor_data]
    best = 0.0
    for s in sides:
        if s.max_adjacent_volume <= 0.0:
            raise MeshError("penalty data has no adjacent subdivision simplex")
        ratio = min(s.volume / s.max_adjacent_volume, s.cov_cap)
        best = max(best, ratio * s.a_bar * s.degree**2 * face.measure / s.volume)
    return config.constant * best


# -- built-in problems -------------------------------------------------------

@dataclass
class ParabolicProblem:
    """Space-time description of a parabolic model problem.

    ``coeffs`` are the block-form space-time fields (time is the last
    coordinate): diffusion [[a, 0], [0, 0]], advection (w, 1).  ``initial``
    takes spatial points.
    """

    spatial_dim: int
    coeffs: PdeCoefficients
    initial: Callable
    t_final: float = 1.0


def parabolic_sine_problem() -> ParabolicProblem:
    """2D heat equation with u = sin(pi x) sin(pi y) (1 - t) on (0,1)^2."""
    pi = np.pi

    def u(p):
        return np.sin(pi * p[:, 0]) * np.sin(pi * p[:, 1]) * (1.0 - p[:, 2])

    def grad_u(p):
        sx, cx = np.sin(pi * p[:, 0]), np.cos(pi * p[:, 0])
        sy, cy = np.sin(pi * p[:, 1]), np.cos(pi * p[:, 1])
        w = 1.0 - p[:, 2]
        return np.stack([pi * cx * sy * w, pi * sx * cy * w, -sx * sy], axis=1)

    def f(p):
        s = np.sin(pi * p[:, 0]) * np.sin(pi * p[:, 1])
        return s * ((2.0 * pi**2 + 1.0) * (1.0 - p[:, 2]) - 1.0)

    block_a = np.diag([1.0, 1.0, 0.0])
    coeffs = PdeCoefficients(
        diffusion=constant_tensor(block_a),
        advection=constant_vector([0.0, 0.0, 1.0]),
        reaction=constant_scalar(1.0),
        source=f,
        dirichlet_data=u,
        exact_solution=u,
        exact_gradient=grad_u,
        energy_weight=constant_scalar(1.0),
    )

    def initial(xy):
        return np.sin(pi * xy[:, 0]) * np.sin(pi * xy[:, 1])

    return ParabolicProblem(spatial_dim=2, coeffs=coeffs, initial=initial)


def advection_diffusion_3d_problem() -> PdeCoefficients:
    """3D advection-diffusion-reaction with u = sin(pi x)sin(pi y)sin(pi z)."""
    pi = np.pi

    def u(p):
        return np.sin(pi * p[:, 0]) * np.sin(pi * p[:, 1]) * np.sin(pi * p[:, 2])

    def grad_u(p):
        sx, cx = np.sin(pi * p[:, 0]), np.cos(pi * p[:, 0])
        sy, cy = np.sin(pi * p[:, 1]), np.cos(pi * p[:, 1])
        sz, cz = np.sin(pi * p[:, 2]), np.cos(pi * p[:, 2])
        return np.stack([pi * cx * sy * sz, pi * sx * cy * sz, pi * sx * sy * cz], axis=1)

    def advection(p):
        return 1.0 + p

    def reaction(p):
        return 3.0 + p[:, 0] * p[:, 1] * p[:, 2]

    def f(p):
        g = grad_u(p)
        return (
            0.01 * 3.0 * pi**2 * u(p)
            + np.einsum("qd,qd->q", advection(p), g)
            + reaction(p) * u(p)
        )

    def energy_weight(p):  # c - div(b)/2 with div(b) = 3
        return 1.5 + p[:, 0] * p[:, 1] * p[:, 2]

    return PdeCoefficients(
        diffusion=isotropic_diffusion(0.01, 3),
        advection=advection,
        reaction=reaction,
        source=f,
        dirichlet_data=u,
        exact_solution=u,
        exact_gradient=grad_u,
        energy_weight=energy_weight,
    )


#: Problems selectable by name from the CLI.
NAMED_PROBLEMS = {
    "parabolic-sine": parabolic_sine_problem,
    "advdiff3d": advection_diffusion_3d_problem,
}
