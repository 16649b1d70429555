"""Space-time slabs over prismatic elements and the marching solver.

A slab is one time interval crossed with a spatial polytopic mesh; its
elements are prisms (spatial element x interval) with bounding boxes
(spatial box x interval), its quadrature subdivisions are sub-prisms
(spatial fine simplex x interval) under tensor rules, and its faces are:

* lateral faces (spatial face x interval), carrying the usual interior /
  Dirichlet / Neumann machinery with normals (n_spatial, 0);
* bottom facets (spatial subdivision at the initial time), statically
  classified inflow: the time-jump coupling to the previous slab;
* top facets, statically outflow (no contribution).

The same discretization is reachable through the generic d-dimensional
assembly applied to an extruded simplicial mesh with the block coefficient
form (diffusion [[a, 0], [0, 0]], advection (w, 1)); that path ships as a
cross-validation oracle (``assemble_slab_generic``).  Lateral-face penalty
data uses the extruded-split simplex volumes (spatial sub-simplex volume x
tau / (s+1)) so both paths produce identical sigma; exact cross-path
equality additionally assumes the diffusion sampled by a-bar is constant
per element, which holds for the shipped model problems.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np

from .assembly import (
    AssemblyConfig,
    FaceInfo,
    _SIDE_NEIGHBOR,
    _SIDE_OWNER,
    _assemble_approach1,
    _assemble_approach2,
)
from .basis import BasisSpec, Family, tabulate
from .mesh import BOUNDARY, BoundaryTag, MeshError, PolytopicMesh, SimplicialMesh, agglomerate
from .model import (
    PdeCoefficients,
    PenaltySideData,
    ParabolicProblem,
    _checked_flow_sign,
)
from .quadrature import (
    interval_rule,
    map_to_simplex,
    map_to_subsimplex,
    simplex_rule,
    tensor_with_interval,
)


@dataclass
class TimePartition:
    """Strictly increasing time nodes t_0 = 0 < ... < t_N = T."""

    nodes: np.ndarray

    def __post_init__(self):
        self.nodes = np.asarray(self.nodes, dtype=float)
        if self.nodes.ndim != 1 or self.nodes.shape[0] < 2:
            raise ValueError("need at least two time nodes")
        if np.any(np.diff(self.nodes) <= 0):
            raise ValueError("time nodes must be strictly increasing")

    @classmethod
    def uniform(cls, t_final: float, n_steps: int) -> "TimePartition":
        return cls(np.linspace(0.0, t_final, n_steps + 1))

    @property
    def n_steps(self) -> int:
        return self.nodes.shape[0] - 1

    def interval(self, n: int) -> tuple[float, float]:
        return float(self.nodes[n]), float(self.nodes[n + 1])


@dataclass
class SlabMesh:
    """One space-time slab: spatial mesh x (t0, t1)."""

    spatial: PolytopicMesh
    t0: float
    t1: float

    @property
    def tau(self) -> float:
        return self.t1 - self.t0

    @property
    def dim(self) -> int:
        return self.spatial.dim + 1

    @property
    def n_elements(self) -> int:
        return self.spatial.n_elements

    def prism_volume(self, element: int) -> float:
        return float(self.spatial.element_volumes[element] * self.tau)


def build_slab(
    spatial_mesh: PolytopicMesh,
    interval: tuple[float, float],
    degrees,
    family: Family = Family.PQ,
) -> tuple[SlabMesh, list[BasisSpec]]:
    """Slab mesh plus per-prism basis specs on (spatial box) x interval."""
    t0, t1 = float(interval[0]), float(interval[1])
    if not t1 > t0:
        raise ValueError("slab interval must have positive length")
    slab = SlabMesh(spatial_mesh, t0, t1)
    n = spatial_mesh.n_elements
    if np.isscalar(degrees):
        degrees = np.full(n, int(degrees))
    degrees = np.asarray(degrees, dtype=np.int64)
    specs = []
    for e in range(n):
        sbox = spatial_mesh.bounding_boxes[e]
        box = np.empty((2, slab.dim))
        box[:, :-1] = sbox
        box[0, -1], box[1, -1] = t0, t1
        specs.append(BasisSpec(int(degrees[e]), family, box))
    return slab, specs


# -- slab geometry provider ---------------------------------------------------

class SlabGeometry:
    """Assembly-provider view of a slab: prisms, lateral faces, time facets.

    Face ids enumerate the spatial faces first (lateral faces), then one
    bottom face per element, then one top face per element.
    """

    def __init__(
        self,
        slab: SlabMesh,
        coeffs: PdeCoefficients,
        specs: list[BasisSpec],
        config: AssemblyConfig,
        previous: Union[None, Callable, tuple] = None,
        dirichlet_predicate: Optional[Callable] = None,
    ):
        from .assembly import DofMap

        self.slab = slab
        self.coeffs = coeffs
        self.specs = specs
        self.config = config
        self.dof_map = DofMap.from_specs(specs)
        self.previous = previous
        sp = slab.spatial
        self._n_lateral = sp.n_faces
        self._volume_points_cache: dict[int, np.ndarray] = {}
        self._lateral_tags = [None] * sp.n_faces
        for fid, f in enumerate(sp.faces):
            if f.is_boundary:
                self._lateral_tags[fid] = self._classify_lateral(fid, dirichlet_predicate)
            else:
                self._lateral_tags[fid] = BoundaryTag.INTERIOR

    # -- volume ---------------------------------------------------------------
    def volume_items(self):
        sp = self.slab.spatial
        items = [
            (el, k)
            for el in range(sp.n_elements)
            for k in range(sp.elements[el].shape[0])
        ]
        items.sort(key=lambda it: (self.specs[it[0]].degree, it[0], it[1]))
        return items

    def _orders(self, *elements):
        p = max(self.specs[e].degree for e in elements)
        return 2 * p + self.config.quad_increment

    def volume_quad(self, el, k):
        sp = self.slab.spatial
        order = self._orders(el)
        simplex = sp.elements[el][k]
        coords = sp.base.vertices[sp.base.simplices[simplex]]
        bpts, bw = map_to_simplex(simplex_rule(sp.dim, order), coords)
        return tensor_with_interval(bpts, bw, self.slab.t0, self.slab.t1,
                                    interval_rule(order))

    def element_volume_points(self, el):
        pts = self._volume_points_cache.get(el)
        if pts is None:
            chunks = [self.volume_quad(el, k)[0]
                      for k in range(self.slab.spatial.elements[el].shape[0])]
            pts = np.concatenate(chunks, axis=0)
            self._volume_points_cache[el] = pts
        return pts

    # -- faces ------------------------------------------------------------------
    @property
    def n_faces(self):
        return self._n_lateral + 2 * self.slab.spatial.n_elements

    def _face_kind(self, fid):
        """('lateral', spatial fid) | ('bottom', element) | ('top', element)."""
        if fid < self._n_lateral:
            return "lateral", fid
        fid -= self._n_lateral
        nel = self.slab.spatial.n_elements
        if fid < nel:
            return "bottom", fid
        return "top", fid - nel

    def _lateral_normal(self, spatial_face):
        n = np.zeros(self.slab.dim)
        n[:-1] = spatial_face.normal
        return n

    def _classify_lateral(self, spatial_fid, predicate):
        sp = self.slab.spatial
        f = sp.faces[spatial_fid]
        pts = self._lateral_sample_points(spatial_fid)
        n = self._lateral_normal(f)
        mean = pts.mean(axis=0)[None, :]
        if self.coeffs.diffusion is not None:
            a = self.coeffs.diffusion(mean)[0]
            tau_ell = 1e-12 * max(1.0, float(np.abs(a).max()))
            if float(n @ a @ n) > tau_ell:
                if predicate is None or predicate(mean[0]):
                    return BoundaryTag.DIRICHLET
                return BoundaryTag.NEUMANN
        if self.coeffs.advection is None:
            return BoundaryTag.OUTFLOW
        bn = self.coeffs.advection(pts) @ n
        sign = _checked_flow_sign(bn, "a lateral slab face")
        return BoundaryTag.INFLOW if sign < 0.0 else BoundaryTag.OUTFLOW

    def _lateral_sample_points(self, spatial_fid, order=2):
        sp = self.slab.spatial
        f = sp.faces[spatial_fid]
        rule = (interval_rule(order) if sp.dim == 2
                else simplex_rule(sp.dim - 1, order))
        chunks = []
        for row in range(f.n_facets):
            bpts, bw = map_to_subsimplex(rule, sp.facet_coordinates(f, row))
            pts, _ = tensor_with_interval(bpts, bw, self.slab.t0, self.slab.t1,
                                          interval_rule(order))
            chunks.append(pts)
        return np.concatenate(chunks, axis=0)

    def face_info(self, fid) -> FaceInfo:
        kind, key = self._face_kind(fid)
        sp = self.slab.spatial
        if kind == "lateral":
            f = sp.faces[key]
            return FaceInfo(
                f.owner, f.neighbor, self._lateral_tags[key],
                self._lateral_normal(f), f.measure * self.slab.tau, f.n_facets,
            )
        normal = np.zeros(self.slab.dim)
        normal[-1] = -1.0 if kind == "bottom" else 1.0
        tag = BoundaryTag.INFLOW if kind == "bottom" else BoundaryTag.OUTFLOW
        return FaceInfo(
            key, BOUNDARY, tag, normal, float(sp.element_volumes[key]),
            sp.elements[key].shape[0],
        )

    def face_quad(self, fid, row):
        kind, key = self._face_kind(fid)
        sp = self.slab.spatial
        if kind == "lateral":
            f = sp.faces[key]
            order = self._orders(f.owner, *(() if f.is_boundary else (f.neighbor,)))
            rule = (interval_rule(order) if sp.dim == 2
                    else simplex_rule(sp.dim - 1, order))
            bpts, bw = map_to_subsimplex(rule, sp.facet_coordinates(f, row))
            return tensor_with_interval(bpts, bw, self.slab.t0, self.slab.t1,
                                        interval_rule(order))
        order = self._orders(key)
        simplex = sp.elements[key][row]
        coords = sp.base.vertices[sp.base.simplices[simplex]]
        spts, sw = map_to_simplex(simplex_rule(sp.dim, order), coords)
        t = self.slab.t0 if kind == "bottom" else self.slab.t1
        pts = np.concatenate([spts, np.full((spts.shape[0], 1), t)], axis=1)
        return pts, sw

    def upwind_side(self, fid) -> int:
        kind, key = self._face_kind(fid)
        if kind != "lateral" or self.coeffs.advection is None:
            return -1
        f = self.slab.spatial.faces[key]
        pts = self._lateral_sample_points(key)
        bn = self.coeffs.advection(pts) @ self._lateral_normal(f)
        sign = _checked_flow_sign(bn, "a lateral slab face")
        if sign < 0.0:
            return _SIDE_OWNER
        if sign > 0.0:
            return _SIDE_NEIGHBOR
        return -1

    def dirichlet_inflow(self, fid) -> bool:
        kind, key = self._face_kind(fid)
        if kind != "lateral" or self.coeffs.advection is None:
            return False
        f = self.slab.spatial.faces[key]
        pts = self._lateral_sample_points(key)
        bn = self.coeffs.advection(pts) @ self._lateral_normal(f)
        return _checked_flow_sign(bn, "a lateral slab face") < 0.0

    def face_sigma(self, fid) -> float:
        from .model import penalty_sigma

        kind, key = self._face_kind(fid)
        if kind != "lateral":
            return 0.0
        f = self.slab.spatial.faces[key]
        own = self._lateral_penalty_side(f, f.owner)
        nbr = None if f.is_boundary else self._lateral_penalty_side(f, f.neighbor)
        lateral = FaceInfo(f.owner, f.neighbor, self._lateral_tags[key],
                           self._lateral_normal(f), f.measure * self.slab.tau,
                           f.n_facets)
        return penalty_sigma(lateral, own, nbr, self.config.penalty)

    def _lateral_penalty_side(self, spatial_face, element) -> PenaltySideData:
        sp = self.slab.spatial
        n = self._lateral_normal(spatial_face)
        if self.coeffs.diffusion is None:
            a_bar = 0.0
        else:
            pts = self.element_volume_points(element)
            a = self.coeffs.diffusion(pts)
            a_bar = float(np.einsum("i,qij,j->q", n, a, n).max())
        if element == spatial_face.owner:
            adj = spatial_face.owner_simplices
        else:
            adj = spatial_face.neighbor_simplices
        adj = adj[adj != BOUNDARY]
        if adj.size == 0:
            raise MeshError("no subdivision simplex adjacent to the lateral face")
        s = sp.dim
        # extruded staircase split: each sub-prism yields s+1 equal simplices
        max_adj = float(sp.base.simplex_volumes[adj].max()) * self.slab.tau / (s + 1)
        degree = self.specs[element].degree
        cov = self.config.penalty.is_coverable(element)
        cov_cap = float(degree ** (2 * (self.slab.dim - 1))) if cov else np.inf
        return PenaltySideData(
            volume=self.slab.prism_volume(element),
            degree=degree,
            a_bar=a_bar,
            max_adjacent_volume=max_adj,
            cov_cap=cov_cap,
        )

    def inflow_values(self, fid, pts):
        kind, key = self._face_kind(fid)
        if kind == "bottom":
            return _evaluate_previous(self.previous, key, pts)
        if self.coeffs.dirichlet_data is None:
            return None
        return self.coeffs.dirichlet_data(pts)

    def interface_pairs(self):
        return [(i.owner, i.neighbor) for i in self.slab.spatial.interfaces]


@dataclass
class _PreviousSlab:
    """Previous slab's basis and coefficients, for time-jump traces."""

    specs: list
    vec: np.ndarray
    dof: object

    def trace(self, element: int, pts: np.ndarray) -> np.ndarray:
        vals, _ = tabulate(self.specs[element], pts)
        sl = slice(self.dof.start(element),
                   self.dof.start(element) + self.dof.count(element))
        return self.vec[sl] @ vals


def _evaluate_previous(previous, element, pts):
    """Trace of the previous solution (or initial data) at bottom points."""
    if previous is None:
        raise MeshError("slab assembly needs initial data or a previous solution")
    if callable(previous):
        return previous(pts[:, :-1])
    return previous.trace(element, pts)


def assemble_slab(
    slab: SlabMesh,
    coeffs: PdeCoefficients,
    specs: list[BasisSpec],
    u_prev,
    config: Optional[AssemblyConfig] = None,
    approach: int = 2,
    dirichlet_predicate: Optional[Callable] = None,
):
    """Assemble one slab system.

    ``u_prev``: initial-condition callable (spatial points -> values) for the
    first slab, or (previous specs, previous coefficient vector) afterwards.
    Returns (matrix, rhs, stats).
    """
    config = config or AssemblyConfig()
    previous = _wrap_previous(slab, specs, u_prev)
    geom = SlabGeometry(slab, coeffs, specs, config, previous, dirichlet_predicate)
    if approach == 1:
        matrix, rhs, stats = _assemble_approach1(geom, config)
    else:
        matrix, rhs, stats, _ = _assemble_approach2(geom, config)
    return matrix, rhs, stats


def _wrap_previous(slab, specs, u_prev):
    if u_prev is None or callable(u_prev):
        return u_prev
    prev_specs, prev_vec = u_prev
    from .assembly import DofMap

    prev_vec = np.asarray(prev_vec, dtype=float)
    prev_dof = DofMap.from_specs(prev_specs)
    if prev_dof.n_dofs != prev_vec.shape[0]:
        raise MeshError(
            f"previous solution has {prev_vec.shape[0]} dofs, "
            f"expected {prev_dof.n_dofs}"
        )
    if len(prev_specs) != slab.spatial.n_elements:
        raise MeshError("previous slab has a different spatial element count")
    return _PreviousSlab(prev_specs, prev_vec, prev_dof)


def march(
    spatial_mesh: PolytopicMesh,
    time_partition: TimePartition,
    problem: ParabolicProblem,
    degrees,
    family: Family = Family.PQ,
    config: Optional[AssemblyConfig] = None,
    solver: Optional[Callable] = None,
    approach: int = 2,
    dirichlet_predicate: Optional[Callable] = None,
    dump_path: Optional[str] = None,
):
    """Sequential slab-by-slab solve; returns per-slab coefficient vectors."""
    config = config or AssemblyConfig()
    if solver is None:
        from .solver import solve as _solve

        def solver(matrix, rhs, dof_map):
            result = _solve(matrix, rhs, dof_map=dof_map)
            if not result.converged:
                raise RuntimeError(
                    f"linear solve stagnated (residual {result.residual:.3e})"
                )
            return result.x

    solutions = []
    slabs = []
    prev = problem.initial
    for n in range(time_partition.n_steps):
        slab, specs = build_slab(
            spatial_mesh, time_partition.interval(n), degrees, family
        )
        matrix, rhs, _ = assemble_slab(
            slab, problem.coeffs, specs, prev, config, approach, dirichlet_predicate
        )
        from .assembly import DofMap

        dof_map = DofMap.from_specs(specs)
        try:
            vec = solver(matrix, rhs, dof_map)
        except Exception as exc:
            raise RuntimeError(f"slab {n}: {exc}") from exc
        solutions.append(vec)
        slabs.append((slab, specs))
        prev = (specs, vec)
        if dump_path is not None:
            save_solution_vector(f"{dump_path}.slab{n:04d}.bin", vec)
    return solutions, slabs


# -- generic-path oracle ------------------------------------------------------------

def extrude_slab_to_polytopic(spatial: PolytopicMesh, t0: float, t1: float) -> PolytopicMesh:
    """Extrude a 2D spatial polytopic mesh into a 3D simplicial slab mesh.

    Each prism splits into the staircase simplices over its globally
    sorted vertex order, which is conforming across prisms; the
    agglomeration map sends all pieces of a prism to its spatial element.
    """
    base = spatial.base
    if base.dim != 2:
        raise MeshError("the generic-path extrusion supports 2D spatial meshes")
    nv = base.n_vertices
    verts = np.empty((2 * nv, 3))
    verts[:nv, :2] = base.vertices
    verts[:nv, 2] = t0
    verts[nv:, :2] = base.vertices
    verts[nv:, 2] = t1
    tets = []
    agg = []
    s = base.dim
    for j in range(base.n_simplices):
        bottom = np.sort(base.simplices[j])
        top = bottom + nv
        for k in range(s + 1):
            cell = np.concatenate([bottom[: k + 1], top[k:]])
            tets.append(cell)
        agg.extend([int(spatial.agg_map[j])] * (s + 1))
    mesh3 = SimplicialMesh(3, verts, np.asarray(tets, dtype=np.int64))
    return agglomerate(mesh3, np.asarray(agg, dtype=np.int64))


def assemble_slab_generic(
    slab: SlabMesh,
    coeffs: PdeCoefficients,
    specs: list[BasisSpec],
    u_prev,
    config: Optional[AssemblyConfig] = None,
    dirichlet_predicate: Optional[Callable] = None,
):
    """Assemble the slab through the generic d-dimensional path (oracle).

    Builds the extruded simplicial mesh, classifies its boundary with the
    block coefficients (bottom facets land on the inflow branch), and routes
    the time-jump data through the Dirichlet field dispatched by time
    coordinate.
    """
    from .assembly import MeshGeometry, _assemble_approach1
    from .model import classify_boundary_faces

    config = config or AssemblyConfig()
    pmesh3 = extrude_slab_to_polytopic(slab.spatial, slab.t0, slab.t1)
    previous = _wrap_previous(slab, specs, u_prev)

    t0, tau = slab.t0, slab.tau
    lateral_g = coeffs.dirichlet_data
    agg_of = pmesh3.agg_map

    def dispatched_dirichlet(pts):
        out = np.zeros(pts.shape[0])
        on_bottom = np.abs(pts[:, -1] - t0) <= 1e-9 * max(tau, 1.0)
        if on_bottom.any():
            sub = pts[on_bottom]
            if callable(previous) or previous is None:
                out[on_bottom] = _evaluate_previous(previous, -1, sub)
            else:
                # group by spatial element to evaluate the right local basis
                els = _elements_of_points(slab.spatial, sub[:, :-1])
                for e in np.unique(els):
                    mask = np.flatnonzero(els == e)
                    out_idx = np.flatnonzero(on_bottom)[mask]
                    out[out_idx] = previous.trace(int(e), sub[mask])
        if (~on_bottom).any() and lateral_g is not None:
            out[~on_bottom] = lateral_g(pts[~on_bottom])
        return out

    wrapped = PdeCoefficients(
        diffusion=coeffs.diffusion,
        advection=coeffs.advection,
        reaction=coeffs.reaction,
        source=coeffs.source,
        dirichlet_data=dispatched_dirichlet,
        neumann_data=coeffs.neumann_data,
    )
    classify_boundary_faces(pmesh3, wrapped, dirichlet_predicate)
    geom = MeshGeometry(pmesh3, wrapped, specs, config)
    matrix, rhs, stats = _assemble_approach1(geom, config)
    return matrix, rhs, stats


def _elements_of_points(spatial: PolytopicMesh, pts: np.ndarray) -> np.ndarray:
    """Locate the spatial element containing each point (small meshes only)."""
    base = spatial.base
    out = np.full(pts.shape[0], -1, dtype=np.int64)
    for s in range(base.n_simplices):
        coords = base.vertices[base.simplices[s]]
        edges = (coords[1:] - coords[0]).T
        lam = np.linalg.solve(edges, (pts - coords[0]).T)
        inside = (lam >= -1e-12).all(axis=0) & (lam.sum(axis=0) <= 1.0 + 1e-12)
        out[inside & (out == -1)] = spatial.agg_map[s]
    if (out == -1).any():
        raise MeshError("a bottom-facet quadrature point escaped the spatial mesh")
    return out


# -- error measurement over slabs ------------------------------------------------------

def spacetime_l2_error(slabs, solutions, exact, quad_increment=4) -> float:
    """L2(L2) error over all slabs against an exact space-time solution."""
    total = 0.0
    for (slab, specs), vec in zip(slabs, solutions):
        from .assembly import DofMap

        dof = DofMap.from_specs(specs)
        sp = slab.spatial
        for el in range(sp.n_elements):
            order = 2 * specs[el].degree + quad_increment
            trule = interval_rule(order)
            srule = simplex_rule(sp.dim, order)
            sl = slice(dof.start(el), dof.start(el) + dof.count(el))
            for simplex in sp.elements[el]:
                coords = sp.base.vertices[sp.base.simplices[simplex]]
                bpts, bw = map_to_simplex(srule, coords)
                pts, w = tensor_with_interval(bpts, bw, slab.t0, slab.t1, trule)
                vals, _ = tabulate(specs[el], pts)
                err = vec[sl] @ vals - exact(pts)
                total += float(w @ err**2)
    return float(np.sqrt(total))


def evaluate_slab_solution(slab, specs, vec, pts) -> np.ndarray:
    """Point values of a slab solution (points must lie in the slab)."""
    from .assembly import DofMap

    dof = DofMap.from_specs(specs)
    els = _elements_of_points(slab.spatial, pts[:, :-1])
    out = np.empty(pts.shape[0])
    for e in np.unique(els):
        mask = els == e
        vals, _ = tabulate(specs[e], pts[mask])
        sl = slice(dof.start(e), dof.start(e) + dof.count(e))
        out[mask] = vec[sl] @ vals
    return out


# -- binary solution dumps ---------------------------------------------------------------

def save_solution_vector(path, vec: np.ndarray) -> None:
    """Little-endian binary dump: uint64 length header, then float64 data."""
    vec = np.asarray(vec, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", vec.shape[0]))
        fh.write(vec.tobytes())


def load_solution_vector(path) -> np.ndarray:
    with open(path, "rb") as fh:
        (n,) = struct.unpack("<Q", fh.read(8))
        data = np.frombuffer(fh.read(8 * n), dtype="<f8")
    if data.shape[0] != n:
        raise MeshError(f"{path}: truncated solution vector")
    return data.astype(float)
