"""Stiffness-matrix and load-vector assembly.

Two interchangeable algorithms produce the same CSR matrix:

* ``assemble_approach1``: every work item writes (row, col, value) triplets
  into a private, pre-sized stripe of three flat arrays; a parallel-capable
  sort then merges duplicates and emits CSR.
* ``assemble_approach2``: the block sparsity pattern (one diagonal block per
  element, one block pair per element-pair interface) is precomputed; work
  items locate their value slots by binary search within the row and
  accumulate, either scattered as results arrive ("atomic" mode) or staged
  and applied in one canonical pass ("deterministic" mode).

A work item is one subdivision simplex (volume terms) or one sub-face (face
terms); items are grouped per kernel: element, interior, dirichlet, inflow,
neumann_outflow.  Load-vector accumulation is direct indexed addition in
canonical work-item order, shared by both approaches.

Workers are separate forked processes reading the immutable plan; with one
worker everything runs inline.  Deterministic mode yields bit-identical
matrices for any worker count.
"""

from __future__ import annotations

import os
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .basis import BasisSpec, tabulate
from .mesh import BOUNDARY, BoundaryTag, PolytopicMesh
from .model import (
    FlowSide,
    PdeCoefficients,
    PenaltyConfig,
    elemental_inflow_part,
    penalty_side_data,
    penalty_sigma,
)
from .quadrature import interval_rule, map_to_simplex, map_to_subsimplex, simplex_rule

KERNEL_NAMES = ("element", "interior", "dirichlet", "inflow", "neumann_outflow")

_SIDE_BOTH = 2
_SIDE_OWNER = 0
_SIDE_NEIGHBOR = 1


class AssemblyError(RuntimeError):
    pass


class PatternMissError(AssemblyError):
    """A kernel addressed a (row, col) absent from the sparsity pattern."""


# -- degrees of freedom -------------------------------------------------------

@dataclass
class DofMap:
    """Contiguous per-element spans of the global unknown vector."""

    offsets: np.ndarray  # (nel + 1,)

    @classmethod
    def from_specs(cls, specs: list[BasisSpec]) -> "DofMap":
        counts = np.array([s.n_funcs for s in specs], dtype=np.int64)
        offsets = np.zeros(len(specs) + 1, dtype=np.int64)
        np.cumsum(counts, out=offsets[1:])
        return cls(offsets)

    @property
    def n_dofs(self) -> int:
        return int(self.offsets[-1])

    @property
    def n_elements(self) -> int:
        return self.offsets.shape[0] - 1

    def count(self, element: int) -> int:
        return int(self.offsets[element + 1] - self.offsets[element])

    def start(self, element: int) -> int:
        return int(self.offsets[element])


# -- sparse containers --------------------------------------------------------

@dataclass
class CSRMatrix:
    """Compressed sparse rows with sorted, duplicate-free column indices."""

    n_rows: int
    n_cols: int
    row_ptr: np.ndarray
    col_idx: np.ndarray
    values: np.ndarray

    @property
    def nnz(self) -> int:
        return int(self.col_idx.shape[0])

    def validate(self) -> None:
        if self.row_ptr.shape != (self.n_rows + 1,):
            raise AssemblyError("row_ptr has wrong length")
        if np.any(np.diff(self.row_ptr) < 0) or self.row_ptr[-1] != self.nnz:
            raise AssemblyError("row_ptr is not a nondecreasing nnz prefix")
        for r in range(self.n_rows):
            cols = self.col_idx[self.row_ptr[r] : self.row_ptr[r + 1]]
            if cols.size and (np.any(np.diff(cols) <= 0) or cols[0] < 0
                              or cols[-1] >= self.n_cols):
                raise AssemblyError(f"row {r} columns not strictly increasing/in range")

    def to_scipy(self):
        from scipy.sparse import csr_matrix

        return csr_matrix(
            (self.values, self.col_idx, self.row_ptr), shape=(self.n_rows, self.n_cols)
        )

    def to_dense(self) -> np.ndarray:
        out = np.zeros((self.n_rows, self.n_cols))
        for r in range(self.n_rows):
            sl = slice(self.row_ptr[r], self.row_ptr[r + 1])
            out[r, self.col_idx[sl]] = self.values[sl]
        return out

    def max_relative_difference(self, other: "CSRMatrix", floor_rel: float = 1e-3) -> float:
        """Entrywise relative difference; requires identical patterns.

        Entries are compared relative to max(|a|, |b|), with the denominator
        floored at ``floor_rel`` x the largest magnitude in either matrix:
        entries assembled from addends of matrix scale carry absolute
        rounding noise at that scale, so tinier entries (exact cancellations)
        are measured against the floor rather than against themselves.
        """
        if (
            self.n_rows != other.n_rows
            or self.n_cols != other.n_cols
            or not np.array_equal(self.row_ptr, other.row_ptr)
            or not np.array_equal(self.col_idx, other.col_idx)
        ):
            raise AssemblyError("sparsity patterns differ")
        if self.nnz == 0:
            return 0.0
        scale = max(np.abs(self.values).max(), np.abs(other.values).max(), 1e-300)
        denom = np.maximum(
            np.maximum(np.abs(self.values), np.abs(other.values)), floor_rel * scale
        )
        return float(np.max(np.abs(self.values - other.values) / denom))


@dataclass
class TripletStream:
    """Approach-1 staging arrays with per-work-item stripe offsets.

    Unused slots keep the sentinel row (= number of global rows) and are
    filtered before sorting.
    """

    rows: np.ndarray
    cols: np.ndarray
    vals: np.ndarray
    stripe_offsets: np.ndarray
    sentinel: int

    @property
    def n_written(self) -> int:
        return int(np.count_nonzero(self.rows != self.sentinel))


def write_matrix_market(path, matrix: CSRMatrix) -> None:
    """Coordinate Matrix Market, 17 significant digits (exact round-trip)."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("%%MatrixMarket matrix coordinate real general\n")
        fh.write(f"{matrix.n_rows} {matrix.n_cols} {matrix.nnz}\n")
        for r in range(matrix.n_rows):
            for k in range(matrix.row_ptr[r], matrix.row_ptr[r + 1]):
                fh.write(f"{r + 1} {matrix.col_idx[k] + 1} {matrix.values[k]:.17g}\n")


def read_matrix_market(path) -> CSRMatrix:
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline()
        if "matrix coordinate real general" not in header:
            raise AssemblyError(f"{path}: unsupported Matrix Market header")
        line = fh.readline()
        while line.startswith("%"):
            line = fh.readline()
        n_rows, n_cols, nnz = (int(t) for t in line.split())
        rows = np.empty(nnz, dtype=np.int64)
        cols = np.empty(nnz, dtype=np.int64)
        vals = np.empty(nnz)
        for k in range(nnz):
            toks = fh.readline().split()
            rows[k] = int(toks[0]) - 1
            cols[k] = int(toks[1]) - 1
            vals[k] = float(toks[2])
    return triplets_to_csr(rows, cols, vals, n_rows, n_cols)


# -- block sparsity pattern ---------------------------------------------------

@dataclass
class BlockPattern:
    """CSR skeleton with one dense block per adjacent element pair.

    Rows may be restricted to a subset of elements (distributed assembly);
    ``global_rows`` maps local rows to global row indices.
    """

    dof_map: DofMap
    row_elements: np.ndarray           # elements owning local row blocks, ascending
    neighbors: list[np.ndarray]        # per row element: sorted adjacent elements (incl self)
    col_starts: list[np.ndarray]       # per row element: column offset of each block
    row_ptr: np.ndarray
    col_idx: np.ndarray
    global_rows: np.ndarray
    _row_pos: dict = field(repr=False, default_factory=dict)

    @property
    def n_local_rows(self) -> int:
        return int(self.row_ptr.shape[0] - 1)

    @property
    def nnz(self) -> int:
        return int(self.col_idx.shape[0])

    def local_block_start(self, element: int) -> int:
        return self._row_pos[element]

    def block_slots(self, row_element: int, col_element: int) -> np.ndarray:
        """Flat value-slot indices of a block, shape (n_row, n_col).

        The column block is located by binary search in the row's sorted
        neighbor list; a miss is a fatal pattern bug.
        """
        local = self._row_pos.get(row_element)
        if local is None:
            raise PatternMissError(f"element {row_element} owns no rows here")
        nbrs = self.neighbors[local]
        pos = int(np.searchsorted(nbrs, col_element))
        if pos >= nbrs.shape[0] or nbrs[pos] != col_element:
            raise PatternMissError(
                f"block ({row_element}, {col_element}) missing from pattern"
            )
        ni = self.dof_map.count(row_element)
        nj = self.dof_map.count(col_element)
        row0 = self._row_offsets[local]
        base = self.row_ptr[row0 : row0 + ni] + self.col_starts[local][pos]
        return base[:, None] + np.arange(nj, dtype=np.int64)[None, :]

    def __post_init__(self):
        self._row_pos = {int(e): k for k, e in enumerate(self.row_elements)}
        counts = np.array([self.dof_map.count(int(e)) for e in self.row_elements],
                          dtype=np.int64)
        self._row_offsets = np.zeros(len(counts) + 1, dtype=np.int64)
        np.cumsum(counts, out=self._row_offsets[1:])

    def empty_matrix(self) -> CSRMatrix:
        return CSRMatrix(
            self.n_local_rows,
            self.dof_map.n_dofs,
            self.row_ptr.copy(),
            self.col_idx.copy(),
            np.zeros(self.nnz),
        )


def build_block_pattern(
    mesh: PolytopicMesh,
    specs: list[BasisSpec],
    row_elements: Optional[np.ndarray] = None,
) -> BlockPattern:
    """Block pattern and CSR skeleton of a mesh/basis pair.

    One diagonal block per element plus one block pair per interface;
    ``empty_matrix()`` on the result materializes the zero-valued skeleton.
    """
    dof_map = DofMap.from_specs(specs)
    pairs = [(i.owner, i.neighbor) for i in mesh.interfaces]
    return _pattern_from_adjacency(dof_map, pairs, row_elements)


def _pattern_from_adjacency(
    dof_map: DofMap,
    interface_pairs,
    row_elements: Optional[np.ndarray] = None,
) -> BlockPattern:
    """Expand element adjacency into a CSR skeleton with sorted columns."""
    nel = dof_map.n_elements
    if row_elements is None:
        row_elements = np.arange(nel, dtype=np.int64)
    else:
        row_elements = np.asarray(sorted(row_elements), dtype=np.int64)
    adj: dict[int, set[int]] = {int(e): {int(e)} for e in row_elements}
    for i, j in interface_pairs:
        if int(i) in adj:
            adj[int(i)].add(int(j))
        if int(j) in adj:
            adj[int(j)].add(int(i))

    neighbors, col_starts, row_chunks = [], [], []
    counts = np.diff(dof_map.offsets)
    row_lengths = []
    global_rows = []
    for e in row_elements:
        nbrs = np.array(sorted(adj[int(e)]), dtype=np.int64)
        widths = counts[nbrs]
        starts = np.zeros(nbrs.shape[0], dtype=np.int64)
        np.cumsum(widths[:-1], out=starts[1:])
        neighbors.append(nbrs)
        col_starts.append(starts)
        cols = np.concatenate(
            [np.arange(dof_map.start(int(j)), dof_map.start(int(j)) + counts[j],
                       dtype=np.int64) for j in nbrs]
        )
        ni = counts[e]
        row_chunks.append(np.tile(cols, ni))
        row_lengths.extend([cols.shape[0]] * int(ni))
        global_rows.extend(range(dof_map.start(int(e)), dof_map.start(int(e)) + int(ni)))

    row_ptr = np.zeros(len(row_lengths) + 1, dtype=np.int64)
    np.cumsum(np.asarray(row_lengths, dtype=np.int64), out=row_ptr[1:])
    col_idx = (np.concatenate(row_chunks) if row_chunks
               else np.empty(0, dtype=np.int64))
    return BlockPattern(
        dof_map=dof_map,
        row_elements=row_elements,
        neighbors=neighbors,
        col_starts=col_starts,
        row_ptr=row_ptr,
        col_idx=col_idx,
        global_rows=np.asarray(global_rows, dtype=np.int64),
    )


# -- configuration and statistics ----------------------------------------------

@dataclass
class AssemblyConfig:
    quad_increment: int = 2
    penalty: PenaltyConfig = field(default_factory=PenaltyConfig)
    n_workers: int = 1
    mode: str = "deterministic"  # or "atomic"
    chunk_size: int = 256

    def __post_init__(self):
        if self.mode not in ("deterministic", "atomic"):
            raise ValueError(f"unknown accumulation mode {self.mode!r}")
        if self.n_workers < 1:
            raise ValueError("n_workers must be >= 1")


@dataclass
class KernelTiming:
    kernel: str
    work_items: int = 0
    seconds: float = 0.0
    nnz_written: int = 0


@dataclass
class AssemblyStats:
    """Per-kernel work/time accounting plus index-phase and duplicate stats."""

    kernels: dict[str, KernelTiming]
    index_seconds: float = 0.0
    kernel_wall_seconds: float = 0.0
    total_seconds: float = 0.0
    triplet_count: int = 0
    nnz: int = 0

    @property
    def duplicate_ratio(self) -> float:
        return self.triplet_count / self.nnz if self.nnz else 0.0

    def to_csv(self) -> str:
        lines = ["kernel,work_items,seconds,nnz_written"]
        for name in KERNEL_NAMES:
            k = self.kernels[name]
            lines.append(f"{k.kernel},{k.work_items},{k.seconds:.6g},{k.nnz_written}")
        total_items = sum(k.work_items for k in self.kernels.values())
        lines.append(f"indices,{self.triplet_count},{self.index_seconds:.6g},{self.nnz}")
        lines.append(f"total,{total_items},{self.total_seconds:.6g},{self.nnz}")
        return "\n".join(lines) + "\n"


# -- kernel mathematics ---------------------------------------------------------

def _volume_block(spec, pts, w, coeffs):
    """Local volume contribution of one subdivision simplex/prism."""
    vals, grads = tabulate(spec, pts)
    n = vals.shape[0]
    block = np.zeros((n, n))
    if coeffs.diffusion is not None:
        a = coeffs.diffusion(pts)
        ag = np.einsum("qde,neq->ndq", a, grads)
        block += np.einsum("q,jdq,idq->ij", w, ag, grads)
    if coeffs.advection is not None:
        b = coeffs.advection(pts)
        bg = np.einsum("qd,ndq->nq", b, grads)
        block += np.einsum("q,jq,iq->ij", w, bg, vals)
    if coeffs.reaction is not None:
        block += np.einsum("q,jq,iq->ij", w * coeffs.reaction(pts), vals, vals)
    if coeffs.source is not None:
        load = vals @ (w * coeffs.source(pts))
    else:
        load = np.zeros(n)
    return block, load


def _interior_face_blocks(
    spec_own,
    spec_nbr,
    pts,
    w,
    normal,
    coeffs,
    sigma,
    upwind_side,
    include_gradient_terms=True,
):
    """Four dense blocks ((oo, on), (no, nn)) of one interior sub-face.

    ``upwind_side`` names the downwind element (_SIDE_OWNER/_SIDE_NEIGHBOR)
    of the static per-face upwind attribution, or -1 for none.
    """
    vo, go = tabulate(spec_own, pts)
    vn, gn = tabulate(spec_nbr, pts)
    sides = ((vo, go, 1.0), (vn, gn, -1.0))
    blocks = [[None, None], [None, None]]
    for a in range(2):
        for b in range(2):
            blocks[a][b] = np.zeros((sides[a][0].shape[0], sides[b][0].shape[0]))

    fluxes = [None, None]
    if coeffs.diffusion is not None and include_gradient_terms:
        a_pts = coeffs.diffusion(pts)
        for s, (_, g, _) in enumerate(sides):
            fluxes[s] = np.einsum("qde,neq,d->nq", a_pts, g, normal)
    for a, (va, _, sa) in enumerate(sides):
        for b, (vb, _, sb) in enumerate(sides):
            if fluxes[0] is not None:
                blocks[a][b] -= 0.5 * sa * np.einsum("q,jq,iq->ij", w, fluxes[b], va)
                blocks[a][b] -= 0.5 * sb * np.einsum("q,jq,iq->ij", w, vb, fluxes[a])
            if sigma:
                blocks[a][b] += sigma * sa * sb * np.einsum("q,jq,iq->ij", w, vb, va)

    if upwind_side in (_SIDE_OWNER, _SIDE_NEIGHBOR) and coeffs.advection is not None:
        wbn = w * (coeffs.advection(pts) @ normal)
        if upwind_side == _SIDE_OWNER:  # flow enters the owner: owner rows
            blocks[0][0] -= np.einsum("q,jq,iq->ij", wbn, vo, vo)
            blocks[0][1] += np.einsum("q,jq,iq->ij", wbn, vn, vo)
        else:
            blocks[1][1] += np.einsum("q,jq,iq->ij", wbn, vn, vn)
            blocks[1][0] -= np.einsum("q,jq,iq->ij", wbn, vo, vn)
    return blocks


def _dirichlet_face_block(
    spec, pts, w, normal, coeffs, sigma, with_inflow, include_gradient_terms=True
):
    """Single-sided IP block and load of one Dirichlet sub-face."""
    vals, grads = tabulate(spec, pts)
    n = vals.shape[0]
    block = np.zeros((n, n))
    load = np.zeros(n)
    g = coeffs.dirichlet_data(pts) if coeffs.dirichlet_data is not None else None
    flux = None
    if coeffs.diffusion is not None and include_gradient_terms:
        a_pts = coeffs.diffusion(pts)
        flux = np.einsum("qde,neq,d->nq", a_pts, grads, normal)
        block -= np.einsum("q,jq,iq->ij", w, flux, vals)
        block -= np.einsum("q,jq,iq->ij", w, vals, flux)
    if sigma:
        block += sigma * np.einsum("q,jq,iq->ij", w, vals, vals)
    if g is not None:
        if flux is not None:
            load -= flux @ (w * g)
        if sigma:
            load += sigma * (vals @ (w * g))
    if with_inflow and coeffs.advection is not None:
        wbn = w * (coeffs.advection(pts) @ normal)
        block -= np.einsum("q,jq,iq->ij", wbn, vals, vals)
        if g is not None:
            load -= vals @ (wbn * g)
    return block, load


def _inflow_face_block(spec, pts, w, normal, coeffs, boundary_values):
    """Hyperbolic inflow sub-face: weakly imposed upwind boundary term."""
    vals, _ = tabulate(spec, pts)
    wbn = w * (coeffs.advection(pts) @ normal)
    block = -np.einsum("q,jq,iq->ij", wbn, vals, vals)
    if boundary_values is None:
        load = np.zeros(vals.shape[0])
    else:
        load = -(vals @ (wbn * boundary_values))
    return block, load


def _neumann_face_load(spec, pts, w, coeffs):
    vals, _ = tabulate(spec, pts)
    if coeffs.neumann_data is None:
        return np.zeros(vals.shape[0])
    return vals @ (w * coeffs.neumann_data(pts))


# -- mesh geometry provider ------------------------------------------------------

@dataclass
class FaceInfo:
    owner: int
    neighbor: int
    tag: BoundaryTag
    normal: np.ndarray
    measure: float
    n_rows: int


class MeshGeometry:
    """Quadrature/geometry provider for d-dimensional polytopic meshes."""

    def __init__(
        self,
        mesh: PolytopicMesh,
        coeffs: PdeCoefficients,
        specs: list[BasisSpec],
        config: AssemblyConfig,
    ):
        if len(specs) != mesh.n_elements:
            raise AssemblyError("one BasisSpec per element required")
        self.mesh = mesh
        self.coeffs = coeffs
        self.specs = specs
        self.config = config
        self.dof_map = DofMap.from_specs(specs)
        self._volume_points_cache: dict[int, np.ndarray] = {}

    # volume items -----------------------------------------------------------
    def volume_items(self):
        items = []
        for el in range(self.mesh.n_elements):
            for k in range(self.mesh.elements[el].shape[0]):
                items.append((el, k))
        items.sort(key=lambda it: (self.specs[it[0]].degree, it[0], it[1]))
        return items

    def _volume_rule(self, el):
        order = 2 * self.specs[el].total_degree + self.config.quad_increment
        return simplex_rule(self.mesh.dim, order)

    def volume_quad(self, el, k):
        simplex = self.mesh.elements[el][k]
        coords = self.mesh.base.vertices[self.mesh.base.simplices[simplex]]
        return map_to_simplex(self._volume_rule(el), coords)

    def element_volume_points(self, el):
        pts = self._volume_points_cache.get(el)
        if pts is None:
            chunks = [self.volume_quad(el, k)[0]
                      for k in range(self.mesh.elements[el].shape[0])]
            pts = np.concatenate(chunks, axis=0)
            self._volume_points_cache[el] = pts
        return pts

    # faces --------------------------------------------------------------------
    @property
    def n_faces(self):
        return self.mesh.n_faces

    def face_info(self, fid) -> FaceInfo:
        f = self.mesh.faces[fid]
        return FaceInfo(f.owner, f.neighbor, f.tag, f.normal, f.measure, f.n_facets)

    def _face_rule(self, fid):
        f = self.mesh.faces[fid]
        p = self.specs[f.owner].total_degree
        if f.neighbor != BOUNDARY:
            p = max(p, self.specs[f.neighbor].total_degree)
        order = 2 * p + self.config.quad_increment
        if self.mesh.dim == 2:
            return interval_rule(order)
        return simplex_rule(self.mesh.dim - 1, order)

    def face_quad(self, fid, row):
        f = self.mesh.faces[fid]
        return map_to_subsimplex(self._face_rule(fid), self.mesh.facet_coordinates(f, row))

    def upwind_side(self, fid) -> int:
        f = self.mesh.faces[fid]
        if self.coeffs.advection is None:
            return -1
        if elemental_inflow_part(self.mesh, f.owner, f, self.coeffs) is FlowSide.INFLOW_FOR_ELEMENT:
            return _SIDE_OWNER
        if elemental_inflow_part(self.mesh, f.neighbor, f, self.coeffs) is FlowSide.INFLOW_FOR_ELEMENT:
            return _SIDE_NEIGHBOR
        return -1

    def dirichlet_inflow(self, fid) -> bool:
        f = self.mesh.faces[fid]
        if self.coeffs.advection is None:
            return False
        side = elemental_inflow_part(self.mesh, f.owner, f, self.coeffs)
        return side is FlowSide.INFLOW_FOR_ELEMENT

    def face_sigma(self, fid) -> float:
        f = self.mesh.faces[fid]
        own = penalty_side_data(
            self.mesh, f.owner, f, self.specs[f.owner].degree,
            self.element_volume_points(f.owner), self.coeffs, self.config.penalty,
        )
        nbr = None
        if f.neighbor != BOUNDARY:
            nbr = penalty_side_data(
                self.mesh, f.neighbor, f, self.specs[f.neighbor].degree,
                self.element_volume_points(f.neighbor), self.coeffs,
                self.config.penalty,
            )
        return penalty_sigma(f, own, nbr, self.config.penalty)

    def inflow_values(self, fid, pts):
        if self.coeffs.dirichlet_data is None:
            return None
        return self.coeffs.dirichlet_data(pts)

    def interface_pairs(self):
        return [(ifc.owner, ifc.neighbor) for ifc in self.mesh.interfaces]


# -- work plan ---------------------------------------------------------------------

@dataclass
class _FaceItem:
    fid: int
    row: int
    sides: int = _SIDE_BOTH  # which element rows to emit (interior only)
    sigma: float = 0.0
    upwind: int = -1
    with_inflow: bool = False


@dataclass
class WorkPlan:
    geom: object
    volume: list
    interior: list
    dirichlet: list
    inflow: list
    neumann_outflow: list
    staging: str = "triplets"  # or "slots"
    pattern: Optional[BlockPattern] = None
    stripe_width: dict = field(default_factory=dict)

    def items_of(self, kernel):
        return getattr(self, kernel if kernel != "element" else "volume")


def build_work_plan(geom, owned=None) -> WorkPlan:
    """Classify faces, compute penalties, and list all work items.

    ``owned``: optional boolean mask of elements whose rows this assembly
    produces (distributed mode); interior faces with one owned side run the
    modified one-sided kernel.
    """
    volume = geom.volume_items()
    if owned is not None:
        volume = [it for it in volume if owned[it[0]]]

    interior, dirichlet, inflow, neumann_outflow = [], [], [], []
    max_degree = {}
    for fid in range(geom.n_faces):
        info = geom.face_info(fid)
        if info.tag is BoundaryTag.INTERIOR:
            if info.neighbor == BOUNDARY:
                raise AssemblyError(
                    f"boundary face {fid} is unclassified; run classify_boundary_faces"
                )
            if owned is None:
                sides = _SIDE_BOTH
            else:
                o, n = owned[info.owner], owned[info.neighbor]
                if o and n:
                    sides = _SIDE_BOTH
                elif o:
                    sides = _SIDE_OWNER
                elif n:
                    sides = _SIDE_NEIGHBOR
                else:
                    continue
            sigma = geom.face_sigma(fid)
            up = geom.upwind_side(fid)
            md = max(geom.specs[info.owner].degree, geom.specs[info.neighbor].degree)
            for row in range(info.n_rows):
                it = _FaceItem(fid, row, sides=sides, sigma=sigma, upwind=up)
                interior.append(it)
                max_degree[id(it)] = md
        else:
            if owned is not None and not owned[info.owner]:
                continue
            if info.tag is BoundaryTag.DIRICHLET:
                sigma = geom.face_sigma(fid)
                wi = geom.dirichlet_inflow(fid)
                for row in range(info.n_rows):
                    dirichlet.append(
                        _FaceItem(fid, row, sigma=sigma, with_inflow=wi)
                    )
            elif info.tag is BoundaryTag.INFLOW:
                for row in range(info.n_rows):
                    inflow.append(_FaceItem(fid, row))
            else:  # NEUMANN and OUTFLOW share the load-only kernel
                for row in range(info.n_rows):
                    neumann_outflow.append(_FaceItem(fid, row))

    # Group by polynomial degree (faces by the max of the two sides), keeping
    # a deterministic order within each group.
    interior.sort(key=lambda it: (max_degree[id(it)], it.fid, it.row))
    key = lambda it: (geom.specs[geom.face_info(it.fid).owner].degree, it.fid, it.row)
    dirichlet.sort(key=key)
    inflow.sort(key=key)
    neumann_outflow.sort(key=key)
    return WorkPlan(geom, volume, interior, dirichlet, inflow, neumann_outflow)


def _item_stripe_width(plan: WorkPlan, kernel: str, item) -> int:
    counts = plan.geom.dof_map
    if kernel == "element":
        n = counts.count(item[0])
        return n * n
    info = plan.geom.face_info(item.fid)
    if kernel == "interior":
        n_max = max(counts.count(info.owner), counts.count(info.neighbor))
        return (4 if item.sides == _SIDE_BOTH else 2) * n_max * n_max
    if kernel in ("dirichlet", "inflow"):
        n = counts.count(info.owner)
        return n * n
    return 0  # neumann_outflow writes no matrix entries


# -- work item execution -----------------------------------------------------------

def _run_item(plan: WorkPlan, kernel: str, item):
    """Compute one work item; returns (rows, cols, vals, load_rows, load_vals)."""
    geom = plan.geom
    coeffs = geom.coeffs
    dof = geom.dof_map
    if kernel == "element":
        el, k = item
        pts, w = geom.volume_quad(el, k)
        block, load = _volume_block(geom.specs[el], pts, w, coeffs)
        n = block.shape[0]
        off = dof.start(el)
        rows = np.repeat(np.arange(off, off + n, dtype=np.int64), n)
        cols = np.tile(np.arange(off, off + n, dtype=np.int64), n)
        return rows, cols, block.ravel(), np.arange(off, off + n, dtype=np.int64), load

    info = geom.face_info(item.fid)
    pts, w = geom.face_quad(item.fid, item.row)
    off_o = dof.start(info.owner)
    n_o = dof.count(info.owner)
    idx_o = np.arange(off_o, off_o + n_o, dtype=np.int64)

    if kernel == "interior":
        n_n = dof.count(info.neighbor)
        off_n = dof.start(info.neighbor)
        idx_n = np.arange(off_n, off_n + n_n, dtype=np.int64)
        blocks = _interior_face_blocks(
            geom.specs[info.owner], geom.specs[info.neighbor], pts, w, info.normal,
            coeffs, item.sigma, item.upwind,
        )
        rows_list, cols_list, vals_list = [], [], []
        emit = (
            (0, 1) if item.sides == _SIDE_BOTH
            else ((0,) if item.sides == _SIDE_OWNER else (1,))
        )
        row_idx = (idx_o, idx_n)
        for a in emit:
            for b in (0, 1):
                blk = blocks[a][b]
                rows_list.append(np.repeat(row_idx[a], blk.shape[1]))
                cols_list.append(np.tile(row_idx[b], blk.shape[0]))
                vals_list.append(blk.ravel())
        return (
            np.concatenate(rows_list),
            np.concatenate(cols_list),
            np.concatenate(vals_list),
            np.empty(0, dtype=np.int64),
            np.empty(0),
        )

    if kernel == "dirichlet":
        block, load = _dirichlet_face_block(
            geom.specs[info.owner], pts, w, info.normal, coeffs, item.sigma,
            item.with_inflow,
        )
        rows = np.repeat(idx_o, n_o)
        cols = np.tile(idx_o, n_o)
        return rows, cols, block.ravel(), idx_o, load

    if kernel == "inflow":
        block, load = _inflow_face_block(
            geom.specs[info.owner], pts, w, info.normal, coeffs,
            geom.inflow_values(item.fid, pts),
        )
        rows = np.repeat(idx_o, n_o)
        cols = np.tile(idx_o, n_o)
        return rows, cols, block.ravel(), idx_o, load

    # neumann_outflow: load only (zero for pure outflow faces)
    if info.tag is BoundaryTag.NEUMANN:
        load = _neumann_face_load(geom.specs[info.owner], pts, w, coeffs)
        return (np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64),
                np.empty(0), idx_o, load)
    return (np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64), np.empty(0),
            np.empty(0, dtype=np.int64), np.empty(0))


_WORKER_PLAN: Optional[WorkPlan] = None


def _run_chunk(task):
    """Execute one contiguous chunk of same-kernel work items.

    Returns stripe-format triplets (Approach 1) or pattern slots (Approach 2)
    plus load contributions and timing.
    """
    kernel, start, stop, chunk_id = task
    plan = _WORKER_PLAN
    items = plan.items_of(kernel)[start:stop]
    t0 = time.perf_counter()
    sentinel = plan.geom.dof_map.n_dofs

    trip_rows, trip_cols, trip_vals = [], [], []
    slot_list, slot_vals = [], []
    load_rows, load_vals = [], []
    nnz_written = 0
    for item in items:
        rows, cols, vals, lrows, lvals = _run_item(plan, kernel, item)
        nnz_written += rows.shape[0]
        if lrows.size:
            load_rows.append(lrows)
            load_vals.append(lvals)
        if plan.staging == "triplets":
            width = _item_stripe_width(plan, kernel, item)
            r = np.full(width, sentinel, dtype=np.int64)
            c = np.zeros(width, dtype=np.int64)
            v = np.zeros(width)
            r[: rows.shape[0]] = rows
            c[: cols.shape[0]] = cols
            v[: vals.shape[0]] = vals
            trip_rows.append(r)
            trip_cols.append(c)
            trip_vals.append(v)
        elif rows.size:
            slot_list.append(_locate_slots(plan, kernel, item, rows.shape[0]))
            slot_vals.append(vals)

    seconds = time.perf_counter() - t0

    def _cat(chunks, dtype=None):
        if chunks:
            return np.concatenate(chunks)
        return np.empty(0, dtype=dtype if dtype is not None else float)

    if plan.staging == "triplets":
        payload = (_cat(trip_rows, np.int64), _cat(trip_cols, np.int64), _cat(trip_vals))
    else:
        payload = (_cat(slot_list, np.int64), _cat(slot_vals))
    return (kernel, chunk_id, payload, _cat(load_rows, np.int64), _cat(load_vals),
            seconds, nnz_written)


def _locate_slots(plan: WorkPlan, kernel: str, item, n_entries: int) -> np.ndarray:
    """Pattern slots of one item's entries, in the kernel's emission order."""
    pattern = plan.pattern
    geom = plan.geom
    if kernel == "element":
        el = item[0]
        return pattern.block_slots(el, el).ravel()
    info = geom.face_info(item.fid)
    if kernel == "interior":
        emit = (
            (0, 1) if item.sides == _SIDE_BOTH
            else ((0,) if item.sides == _SIDE_OWNER else (1,))
        )
        els = (info.owner, info.neighbor)
        parts = [pattern.block_slots(els[a], els[b]).ravel()
                 for a in emit for b in (0, 1)]
        return np.concatenate(parts)
    return pattern.block_slots(info.owner, info.owner).ravel()


def _chunk_tasks(plan: WorkPlan, config: AssemblyConfig):
    tasks = []
    cid = 0
    for kernel in KERNEL_NAMES:
        items = plan.items_of(kernel)
        n = len(items)
        step = max(1, min(config.chunk_size, -(-n // max(config.n_workers, 1))))
        for start in range(0, n, step):
            tasks.append((kernel, start, min(start + step, n), cid))
            cid += 1
    return tasks


def _execute_plan(plan: WorkPlan, config: AssemblyConfig, matrix_sink, n_dofs: int):
    """Run all work items; feed matrix payloads to ``matrix_sink``.

    Returns (rhs, per-kernel stats, wall seconds).  Deterministic mode and
    the load vector consume chunks in canonical chunk order; atomic mode
    hands matrix payloads over in completion order.
    """
    global _WORKER_PLAN
    tasks = _chunk_tasks(plan, config)
    stats = {name: KernelTiming(name, len(plan.items_of(name))) for name in KERNEL_NAMES}
    rhs_chunks: dict[int, tuple] = {}
    wall0 = time.perf_counter()

    n_workers = config.n_workers
    if n_workers > 1:
        import multiprocessing as mp

        if "fork" not in mp.get_all_start_methods():
            warnings.warn("fork start method unavailable; assembling serially")
            n_workers = 1

    def _consume(result, ordered_payloads):
        kernel, chunk_id, payload, lrows, lvals, seconds, nnz_written = result
        stats[kernel].seconds += seconds
        stats[kernel].nnz_written += nnz_written
        rhs_chunks[chunk_id] = (lrows, lvals)
        if ordered_payloads is None:
            matrix_sink(payload)  # arrival order (atomic mode)
        else:
            ordered_payloads[chunk_id] = payload

    ordered = None if (plan.staging == "slots" and config.mode == "atomic"
                       and n_workers > 1) else {}
    _WORKER_PLAN = plan
    try:
        if n_workers == 1:
            for task in tasks:
                _consume(_run_chunk(task), ordered)
        else:
            import multiprocessing as mp

            ctx = mp.get_context("fork")
            with ctx.Pool(processes=n_workers) as pool:
                it = (pool.imap_unordered(_run_chunk, tasks) if ordered is None
                      else pool.imap(_run_chunk, tasks))
                for result in it:
                    _consume(result, ordered)
    finally:
        _WORKER_PLAN = None

    if ordered is not None:
        for cid in sorted(ordered):
            matrix_sink(ordered[cid])

    rhs = np.zeros(n_dofs)
    for cid in sorted(rhs_chunks):
        lrows, lvals = rhs_chunks[cid]
        if lrows.size:
            np.add.at(rhs, lrows, lvals)
    wall = time.perf_counter() - wall0
    return rhs, stats, wall


# -- triplet sort and merge ----------------------------------------------------------

def _ordered_triplet_permutation(rows, key, n_rows, n_workers):
    """Stable permutation sorting triplets by (row, col).

    Bucketing by row ranges keeps the result identical to one global stable
    sort while allowing the per-bucket sorts to run on threads.
    """
    if n_workers <= 1 or rows.shape[0] < 1 << 15:
        return np.argsort(key, kind="stable")
    n_buckets = n_workers
    bucket = (rows * n_buckets) // max(n_rows, 1)
    grouped = np.argsort(bucket, kind="stable")
    counts = np.bincount(bucket, minlength=n_buckets)
    bounds = np.concatenate([[0], np.cumsum(counts)])

    pieces: list[np.ndarray] = [None] * n_buckets  # type: ignore[list-item]

    def _sort_bucket(bi):
        idx = grouped[bounds[bi] : bounds[bi + 1]]
        pieces[bi] = idx[np.argsort(key[idx], kind="stable")]

    with ThreadPoolExecutor(max_workers=n_workers) as pool:
        list(pool.map(_sort_bucket, range(n_buckets)))
    return np.concatenate(pieces)


def triplets_to_csr(rows, cols, vals, n_rows, n_cols, n_workers=1, sentinel=None):
    """Sort triplets by (row, col), sum duplicates, emit CSR.

    Duplicates merge in stable input order, so the result is independent of
    the worker count.  Returns the matrix; use ``merge_statistics`` via the
    returned nnz versus ``len(rows)`` for duplicate accounting.
    """
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    vals = np.asarray(vals, dtype=float)
    if sentinel is not None:
        keep = rows != sentinel
        rows, cols, vals = rows[keep], cols[keep], vals[keep]
    if rows.size == 0:
        return CSRMatrix(n_rows, n_cols, np.zeros(n_rows + 1, dtype=np.int64),
                         np.empty(0, dtype=np.int64), np.empty(0))
    if rows.min() < 0 or rows.max() >= n_rows or cols.min() < 0 or cols.max() >= n_cols:
        raise AssemblyError("triplet index out of matrix bounds")
    key = rows * np.int64(n_cols) + cols
    order = _ordered_triplet_permutation(rows, key, n_rows, n_workers)
    key_s = key[order]
    vals_s = vals[order]
    starts = np.flatnonzero(np.concatenate([[True], key_s[1:] != key_s[:-1]]))
    sums = np.add.reduceat(vals_s, starts)
    ukey = key_s[starts]
    urows = ukey // n_cols
    ucols = ukey % n_cols
    row_ptr = np.zeros(n_rows + 1, dtype=np.int64)
    np.cumsum(np.bincount(urows, minlength=n_rows), out=row_ptr[1:])
    return CSRMatrix(n_rows, n_cols, row_ptr, ucols.astype(np.int64), sums)


# -- public assembly entry points ------------------------------------------------------

def assemble_approach1(
    mesh: PolytopicMesh,
    coeffs: PdeCoefficients,
    specs: list[BasisSpec],
    config: Optional[AssemblyConfig] = None,
):
    """Stage-and-sort assembly: stripe triplets, then sort/merge into CSR."""
    config = config or AssemblyConfig()
    geom = MeshGeometry(mesh, coeffs, specs, config)
    return _assemble_approach1(geom, config)


def _assemble_approach1(geom, config: AssemblyConfig):
    t_total = time.perf_counter()
    plan = build_work_plan(geom)
    plan.staging = "triplets"
    n_dofs = geom.dof_map.n_dofs

    payloads = []
    rhs, stats, wall = _execute_plan(plan, config, payloads.append, n_dofs)
    rows = np.concatenate([p[0] for p in payloads]) if payloads else np.empty(0, np.int64)
    cols = np.concatenate([p[1] for p in payloads]) if payloads else np.empty(0, np.int64)
    vals = np.concatenate([p[2] for p in payloads]) if payloads else np.empty(0)

    widths = [
        _item_stripe_width(plan, kernel, item)
        for kernel in KERNEL_NAMES
        for item in plan.items_of(kernel)
    ]
    offsets = np.zeros(len(widths) + 1, dtype=np.int64)
    np.cumsum(np.asarray(widths, dtype=np.int64), out=offsets[1:])
    stream = TripletStream(rows, cols, vals, offsets, sentinel=n_dofs)
    if rows.shape[0] != offsets[-1]:
        raise AssemblyError("triplet stripe layout inconsistent with the plan")

    t_idx = time.perf_counter()
    written = stream.n_written
    matrix = triplets_to_csr(
        stream.rows, stream.cols, stream.vals, n_dofs, n_dofs,
        n_workers=config.n_workers, sentinel=stream.sentinel,
    )
    index_seconds = time.perf_counter() - t_idx

    result = AssemblyStats(
        kernels=stats,
        index_seconds=index_seconds,
        kernel_wall_seconds=wall,
        total_seconds=time.perf_counter() - t_total,
        triplet_count=written,
        nnz=matrix.nnz,
    )
    return matrix, rhs, result


def assemble_approach2(
    mesh: PolytopicMesh,
    coeffs: PdeCoefficients,
    specs: list[BasisSpec],
    config: Optional[AssemblyConfig] = None,
):
    """Preset-sparsity assembly: build the block CSR skeleton, then populate."""
    config = config or AssemblyConfig()
    geom = MeshGeometry(mesh, coeffs, specs, config)
    return _assemble_approach2(geom, config)


def _assemble_approach2(geom, config: AssemblyConfig, row_elements=None):
    t_total = time.perf_counter()
    t_idx = time.perf_counter()
    pattern = _pattern_from_adjacency(geom.dof_map, geom.interface_pairs(), row_elements)
    matrix = pattern.empty_matrix()
    index_seconds = time.perf_counter() - t_idx

    owned = None
    if row_elements is not None:
        owned = np.zeros(geom.dof_map.n_elements, dtype=bool)
        owned[np.asarray(row_elements, dtype=np.int64)] = True
    plan = build_work_plan(geom, owned=owned)
    plan.staging = "slots"
    plan.pattern = pattern

    values = matrix.values

    def sink(payload):
        slots, vals = payload
        if slots.size:
            np.add.at(values, slots, vals)

    rhs, stats, wall = _execute_plan(plan, config, sink, geom.dof_map.n_dofs)

    result = AssemblyStats(
        kernels=stats,
        index_seconds=index_seconds,
        kernel_wall_seconds=wall,
        total_seconds=time.perf_counter() - t_total,
        triplet_count=sum(k.nnz_written for k in stats.values()),
        nnz=matrix.nnz,
    )
    return matrix, rhs, result, pattern


# -- single-item public kernels (spec operations) ----------------------------------------

def element_kernel(mesh, element, coeffs, spec, quad_increment=2):
    """Volume block and load of one element (sum over its simplices)."""
    order = 2 * spec.total_degree + quad_increment
    rule = simplex_rule(mesh.dim, order)
    n = spec.n_funcs
    block = np.zeros((n, n))
    load = np.zeros(n)
    for simplex in mesh.elements[element]:
        coords = mesh.base.vertices[mesh.base.simplices[simplex]]
        pts, w = map_to_simplex(rule, coords)
        b, l = _volume_block(spec, pts, w, coeffs)
        block += b
        load += l
    return block, load


def _single_face_quad(mesh, face, row, order):
    rule = interval_rule(order) if mesh.dim == 2 else simplex_rule(mesh.dim - 1, order)
    return map_to_subsimplex(rule, mesh.facet_coordinates(face, row))


def interior_face_kernel(
    mesh, face, coeffs, spec_owner, spec_neighbor, sigma,
    quad_increment=2, include_gradient_terms=True, upwind_side=None,
):
    """Four dense blocks (oo, on, no, nn) integrated over all sub-faces."""
    order = 2 * max(spec_owner.total_degree, spec_neighbor.total_degree) + quad_increment
    if upwind_side is None:
        up = -1
        if coeffs.advection is not None:
            if elemental_inflow_part(mesh, face.owner, face, coeffs) is FlowSide.INFLOW_FOR_ELEMENT:
                up = _SIDE_OWNER
            elif elemental_inflow_part(mesh, face.neighbor, face, coeffs) is FlowSide.INFLOW_FOR_ELEMENT:
                up = _SIDE_NEIGHBOR
    else:
        up = upwind_side
    no, nn = spec_owner.n_funcs, spec_neighbor.n_funcs
    acc = [[np.zeros((no, no)), np.zeros((no, nn))],
           [np.zeros((nn, no)), np.zeros((nn, nn))]]
    for row in range(face.n_facets):
        pts, w = _single_face_quad(mesh, face, row, order)
        blocks = _interior_face_blocks(
            spec_owner, spec_neighbor, pts, w, face.normal, coeffs, sigma, up,
            include_gradient_terms,
        )
        for a in range(2):
            for b in range(2):
                acc[a][b] += blocks[a][b]
    return acc[0][0], acc[0][1], acc[1][0], acc[1][1]


def dirichlet_kernel(mesh, face, coeffs, spec, sigma, quad_increment=2,
                     include_gradient_terms=True):
    order = 2 * spec.total_degree + quad_increment
    with_inflow = False
    if coeffs.advection is not None:
        with_inflow = (
            elemental_inflow_part(mesh, face.owner, face, coeffs)
            is FlowSide.INFLOW_FOR_ELEMENT
        )
    n = spec.n_funcs
    block, load = np.zeros((n, n)), np.zeros(n)
    for row in range(face.n_facets):
        pts, w = _single_face_quad(mesh, face, row, order)
        b, l = _dirichlet_face_block(
            spec, pts, w, face.normal, coeffs, sigma, with_inflow,
            include_gradient_terms,
        )
        block += b
        load += l
    return block, load


def inflow_kernel(mesh, face, coeffs, spec, quad_increment=2):
    order = 2 * spec.total_degree + quad_increment
    n = spec.n_funcs
    block, load = np.zeros((n, n)), np.zeros(n)
    for row in range(face.n_facets):
        pts, w = _single_face_quad(mesh, face, row, order)
        g = coeffs.dirichlet_data(pts) if coeffs.dirichlet_data is not None else None
        b, l = _inflow_face_block(spec, pts, w, face.normal, coeffs, g)
        block += b
        load += l
    return block, load


def neumann_outflow_kernel(mesh, face, coeffs, spec, quad_increment=2):
    """Load-only boundary kernel; outflow faces contribute nothing."""
    load = np.zeros(spec.n_funcs)
    if face.tag is not BoundaryTag.NEUMANN:
        return load
    order = 2 * spec.total_degree + quad_increment
    for row in range(face.n_facets):
        pts, w = _single_face_quad(mesh, face, row, order)
        load += _neumann_face_load(spec, pts, w, coeffs)
    return load
