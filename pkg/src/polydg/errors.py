"""Discretization-error measurement and convergence-order extraction.

The energy norm is the standard dG one assembled from the same quadrature
machinery as the matrices:

    ||v||^2 = sum_K int A grad(v).grad(v) + int w0 v^2
            + sum_F int sigma [v]^2 + 1/2 sum_F int |b.n| (jump of v)^2,

with w0 the zeroth-order weight (c - div(b)/2 when supplied analytically,
else the reaction coefficient), sigma the assembly's own penalty values,
and the |b.n| jump terms collected once per interior face plus the full
trace on boundary faces.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .assembly import AssemblyConfig, MeshGeometry
from .basis import BasisSpec, tabulate
from .mesh import BoundaryTag, PolytopicMesh
from .model import PdeCoefficients


@dataclass
class ErrorReport:
    l2: float
    energy: float
    dofs: int
    h_max: float
    components: dict = field(default_factory=dict)


def _element_dof_values(dof_map, specs, vec, el, pts):
    vals, grads = tabulate(specs[el], pts)
    sl = slice(dof_map.start(el), dof_map.start(el) + dof_map.count(el))
    uh = vec[sl] @ vals
    guh = np.einsum("n,ndq->dq", vec[sl], grads)
    return uh, guh


def compute_errors(
    mesh: PolytopicMesh,
    specs: list[BasisSpec],
    solution: np.ndarray,
    coeffs: PdeCoefficients,
    config: Optional[AssemblyConfig] = None,
    quad_increment: int = 4,
) -> ErrorReport:
    """Quadrature-evaluated L2 and dG-energy errors against the exact fields.

    Needs ``coeffs.exact_solution``; the A-weighted seminorm additionally
    needs ``coeffs.exact_gradient`` (otherwise that component is skipped).
    """
    if coeffs.exact_solution is None:
        raise ValueError("compute_errors needs an exact solution")
    config = config or AssemblyConfig(quad_increment=quad_increment)
    config = AssemblyConfig(
        quad_increment=max(config.quad_increment, quad_increment),
        penalty=config.penalty,
    )
    geom = MeshGeometry(mesh, coeffs, specs, config)
    dof_map = geom.dof_map
    u, grad_u = coeffs.exact_solution, coeffs.exact_gradient

    l2_sq = 0.0
    seminorm_sq = 0.0
    weight_sq = 0.0
    for el in range(mesh.n_elements):
        for k in range(mesh.elements[el].shape[0]):
            pts, w = geom.volume_quad(el, k)
            uh, guh = _element_dof_values(dof_map, specs, solution, el, pts)
            err = uh - u(pts)
            l2_sq += float(w @ err**2)
            if coeffs.energy_weight is not None:
                weight_sq += float(w @ (coeffs.energy_weight(pts) * err**2))
            elif coeffs.reaction is not None:
                weight_sq += float(w @ (coeffs.reaction(pts) * err**2))
            if coeffs.diffusion is not None and grad_u is not None:
                gerr = guh - grad_u(pts).T
                a = coeffs.diffusion(pts)
                seminorm_sq += float(
                    np.einsum("q,qde,dq,eq->", w, a, gerr, gerr)
                )

    penalty_sq = 0.0
    upwind_sq = 0.0
    for fid in range(mesh.n_faces):
        f = mesh.faces[fid]
        for row in range(f.n_facets):
            pts, w = geom.face_quad(fid, row)
            uh_o, _ = _element_dof_values(dof_map, specs, solution, f.owner, pts)
            if f.is_boundary:
                jump = uh_o - u(pts)
            else:
                uh_n, _ = _element_dof_values(
                    dof_map, specs, solution, f.neighbor, pts
                )
                jump = uh_o - uh_n
            if f.tag in (BoundaryTag.INTERIOR, BoundaryTag.DIRICHLET):
                sigma = geom.face_sigma(fid)
                penalty_sq += sigma * float(w @ jump**2)
            if coeffs.advection is not None:
                bn = np.abs(coeffs.advection(pts) @ f.normal)
                upwind_sq += 0.5 * float((w * bn) @ jump**2)

    energy = math.sqrt(max(seminorm_sq + weight_sq + penalty_sq + upwind_sq, 0.0))
    return ErrorReport(
        l2=math.sqrt(max(l2_sq, 0.0)),
        energy=energy,
        dofs=dof_map.n_dofs,
        h_max=float(mesh.element_diameters().max()),
        components={
            "seminorm_sq": seminorm_sq,
            "weight_sq": weight_sq,
            "penalty_sq": penalty_sq,
            "upwind_sq": upwind_sq,
        },
    )


def observed_orders(hs, errors) -> list[float]:
    """Successive orders log(e_k / e_{k+1}) / log(h_k / h_{k+1})."""
    out = []
    for k in range(len(errors) - 1):
        if errors[k + 1] == 0.0 or errors[k] == 0.0:
            out.append(float("inf"))
        else:
            out.append(math.log(errors[k] / errors[k + 1]) / math.log(hs[k] / hs[k + 1]))
    return out


def study_rows_to_csv(rows: list[dict]) -> str:
    """CSV with header h,dofs,l2,energy,l2_order,energy_order."""
    lines = ["h,dofs,l2,energy,l2_order,energy_order"]
    for r in rows:
        lines.append(
            f"{r['h']:.17g},{r['dofs']},{r['l2']:.17g},{r['energy']:.17g},"
            f"{r.get('l2_order', float('nan')):.6g},"
            f"{r.get('energy_order', float('nan')):.6g}"
        )
    return "\n".join(lines) + "\n"
