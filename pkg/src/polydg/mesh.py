"""Simplicial meshes, agglomeration into polytopic elements, and faces.

A polytopic mesh is built from a fine simplicial mesh plus a map sending
each simplex to an element.  Element boundaries decompose into planar
``Face`` objects (each a union of co-hyperplanar (d-1)-simplices); the set
of all faces shared by one element pair forms an ``Interface``.  The fine
simplices double as the quadrature subdivision.

File formats (whitespace-delimited UTF-8 text):

* mesh: header line ``dim nv ns``, then nv vertex lines of d floats, then
  ns simplex lines of d+1 0-based vertex indices;
* agglomeration map: ns lines, one element index per line.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

#: Neighbor marker for boundary faces.
BOUNDARY = -1

# Facet-merging tolerances (double-precision geometry from file input).
NORMAL_TOL = 1e-9
PLANE_TOL = 1e-9


class MeshError(Exception):
    """Invalid mesh topology or geometry."""


class MeshFormatError(MeshError):
    """Malformed mesh or agglomeration file; message carries the line number."""


class BoundaryTag(Enum):
    INTERIOR = "interior"
    DIRICHLET = "dirichlet"
    NEUMANN = "neumann"
    INFLOW = "inflow"
    OUTFLOW = "outflow"


@dataclass
class SimplicialMesh:
    """Fine simplicial mesh in R^d, d in {2, 3}.

    Simplices are reoriented to positive volume on construction.
    """

    dim: int
    vertices: np.ndarray  # (nv, d)
    simplices: np.ndarray  # (ns, d+1)
    simplex_volumes: np.ndarray = field(init=False)

    def __post_init__(self):
        if self.dim not in (2, 3):
            raise MeshError(f"mesh dimension must be 2 or 3, got {self.dim}")
        self.vertices = np.ascontiguousarray(self.vertices, dtype=float)
        self.simplices = np.ascontiguousarray(self.simplices, dtype=np.int64)
        nv = self.vertices.shape[0]
        if self.vertices.ndim != 2 or self.vertices.shape[1] != self.dim:
            raise MeshError("vertex array must be (nv, dim)")
        if self.simplices.ndim != 2 or self.simplices.shape[1] != self.dim + 1:
            raise MeshError("simplex array must be (ns, dim+1)")
        if self.simplices.size and (
            self.simplices.min() < 0 or self.simplices.max() >= nv
        ):
            raise MeshError("simplex vertex index out of range")
        uniq = np.unique(np.sort(self.simplices, axis=1), axis=0)
        if uniq.shape[0] != self.simplices.shape[0]:
            raise MeshError("duplicate simplices in mesh")

        vols = self._signed_volumes()
        flip = vols < 0.0
        if flip.any():
            self.simplices[flip, -2], self.simplices[flip, -1] = (
                self.simplices[flip, -1].copy(),
                self.simplices[flip, -2].copy(),
            )
            vols = np.abs(vols)
        box = self.vertices.max(axis=0) - self.vertices.min(axis=0)
        scale = float(np.prod(np.where(box > 0, box, 1.0)))
        bad = np.flatnonzero(vols <= 1e-14 * scale)
        if bad.size:
            raise MeshError(f"degenerate simplex {int(bad[0])} (volume {vols[bad[0]]:g})")
        self.simplex_volumes = vols

    def _signed_volumes(self) -> np.ndarray:
        v0 = self.vertices[self.simplices[:, 0]]
        edges = self.vertices[self.simplices[:, 1:]] - v0[:, None, :]
        return np.linalg.det(edges) / math.factorial(self.dim)

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_simplices(self) -> int:
        return self.simplices.shape[0]


@dataclass
class Face:
    """One planar piece of an element boundary.

    ``vertex_ids`` holds the constituent (d-1)-simplices, one per row; all
    rows lie in a common hyperplane with unit ``normal`` pointing outward
    from ``owner``.  ``owner_simplices``/``neighbor_simplices`` record the
    fine simplex adjacent to each row on either side (BOUNDARY marks none).
    """

    vertex_ids: np.ndarray  # (m, d)
    normal: np.ndarray  # (d,)
    owner: int
    neighbor: int
    owner_simplices: np.ndarray  # (m,)
    neighbor_simplices: np.ndarray  # (m,)
    facet_measures: np.ndarray  # (m,)
    measure: float
    tag: BoundaryTag = BoundaryTag.INTERIOR

    @property
    def is_boundary(self) -> bool:
        return self.neighbor == BOUNDARY

    @property
    def n_facets(self) -> int:
        return self.vertex_ids.shape[0]

    def outward_normal(self, element: int) -> np.ndarray:
        """Unit normal pointing out of ``element`` (owner or neighbor)."""
        if element == self.owner:
            return self.normal
        if element == self.neighbor:
            return -self.normal
        raise MeshError(f"element {element} is not adjacent to this face")


@dataclass
class Interface:
    """All faces shared by one pair of elements."""

    owner: int
    neighbor: int
    face_ids: list[int]


@dataclass
class PolytopicMesh:
    """Agglomerated mesh: elements are unions of fine simplices."""

    base: SimplicialMesh
    agg_map: np.ndarray  # (ns,)
    elements: list[np.ndarray]  # per element, constituent simplex ids
    bounding_boxes: np.ndarray  # (nel, 2, d)
    element_volumes: np.ndarray  # (nel,)
    faces: list[Face]
    interfaces: list[Interface]

    @property
    def dim(self) -> int:
        return self.base.dim

    @property
    def n_elements(self) -> int:
        return len(self.elements)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def boundary_face_ids(self) -> list[int]:
        return [i for i, f in enumerate(self.faces) if f.is_boundary]

    def interior_face_ids(self) -> list[int]:
        return [i for i, f in enumerate(self.faces) if not f.is_boundary]

    def element_diameters(self) -> np.ndarray:
        span = self.bounding_boxes[:, 1, :] - self.bounding_boxes[:, 0, :]
        return np.linalg.norm(span, axis=1)

    def facet_coordinates(self, face: Face, row: int) -> np.ndarray:
        return self.base.vertices[face.vertex_ids[row]]


def load_simplicial_mesh(path) -> SimplicialMesh:
    """Read a mesh file; raises MeshFormatError with the offending line."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.readlines()
    rows = [(i + 1, ln.split()) for i, ln in enumerate(lines) if ln.strip()]
    if not rows:
        raise MeshFormatError(f"{path}: empty mesh file")
    lineno, header = rows[0]
    if len(header) != 3:
        raise MeshFormatError(f"{path}:{lineno}: header must be 'dim nv ns'")
    try:
        dim, nv, ns = (int(tok) for tok in header)
    except ValueError as exc:
        raise MeshFormatError(f"{path}:{lineno}: bad header: {exc}") from None
    if len(rows) != 1 + nv + ns:
        raise MeshFormatError(
            f"{path}: expected {1 + nv + ns} content lines, found {len(rows)}"
        )
    vertices = np.empty((nv, dim))
    for k in range(nv):
        lineno, toks = rows[1 + k]
        if len(toks) != dim:
            raise MeshFormatError(f"{path}:{lineno}: expected {dim} coordinates")
        try:
            vertices[k] = [float(t) for t in toks]
        except ValueError:
            raise MeshFormatError(f"{path}:{lineno}: bad vertex coordinate") from None
    simplices = np.empty((ns, dim + 1), dtype=np.int64)
    for k in range(ns):
        lineno, toks = rows[1 + nv + k]
        if len(toks) != dim + 1:
            raise MeshFormatError(f"{path}:{lineno}: expected {dim + 1} vertex indices")
        try:
            simplices[k] = [int(t) for t in toks]
        except ValueError:
            raise MeshFormatError(f"{path}:{lineno}: bad vertex index") from None
    try:
        return SimplicialMesh(dim, vertices, simplices)
    except MeshError as exc:
        raise MeshError(f"{path}: {exc}") from None


def save_simplicial_mesh(path, mesh: SimplicialMesh) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{mesh.dim} {mesh.n_vertices} {mesh.n_simplices}\n")
        for v in mesh.vertices:
            fh.write(" ".join(f"{c:.17g}" for c in v) + "\n")
        for s in mesh.simplices:
            fh.write(" ".join(str(int(i)) for i in s) + "\n")


def load_agglomeration_map(path, n_simplices: int) -> np.ndarray:
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.readlines()
    entries = [(i + 1, ln.strip()) for i, ln in enumerate(lines) if ln.strip()]
    if len(entries) != n_simplices:
        raise MeshFormatError(
            f"{path}: expected {n_simplices} entries, found {len(entries)}"
        )
    out = np.empty(n_simplices, dtype=np.int64)
    for k, (lineno, tok) in enumerate(entries):
        try:
            out[k] = int(tok)
        except ValueError:
            raise MeshFormatError(f"{path}:{lineno}: bad element index") from None
    return out


def save_agglomeration_map(path, agg_map: np.ndarray) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for e in agg_map:
            fh.write(f"{int(e)}\n")


def _facet_normal_and_measure(coords: np.ndarray) -> tuple[np.ndarray, float]:
    """Unit normal (unoriented) and (d-1)-measure of a facet in R^d."""
    if coords.shape[0] == 2:  # edge in 2D
        t = coords[1] - coords[0]
        length = float(np.linalg.norm(t))
        normal = np.array([t[1], -t[0]]) / length
        return normal, length
    # triangle in 3D
    c = np.cross(coords[1] - coords[0], coords[2] - coords[0])
    area2 = float(np.linalg.norm(c))
    return c / area2, 0.5 * area2


class _UnionFind:
    def __init__(self, n: int):
        self.parent = list(range(n))

    def find(self, a: int) -> int:
        while self.parent[a] != a:
            self.parent[a] = self.parent[self.parent[a]]
            a = self.parent[a]
        return a

    def union(self, a: int, b: int) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[rb] = ra


def _group_by_hyperplane(
    vertices: np.ndarray, facet_rows: list[int], normals: np.ndarray,
    facet_vertex_ids: np.ndarray,
) -> list[list[int]]:
    """Split a facet collection into co-hyperplanar groups (greedy)."""
    groups: list[dict] = []
    out: list[list[int]] = []
    for idx in facet_rows:
        n = normals[idx]
        verts = vertices[facet_vertex_ids[idx]]
        placed = False
        for g, members in zip(groups, out):
            if np.max(np.abs(n - g["normal"])) > NORMAL_TOL:
                continue
            lo = np.minimum(g["lo"], verts.min(axis=0))
            hi = np.maximum(g["hi"], verts.max(axis=0))
            diam = float(np.linalg.norm(hi - lo)) or 1.0
            dist = np.abs((verts - g["point"]) @ g["normal"])
            if dist.max() <= PLANE_TOL * diam:
                members.append(idx)
                g["lo"], g["hi"] = lo, hi
                placed = True
                break
        if not placed:
            groups.append({
                "normal": n,
                "point": verts[0].copy(),
                "lo": verts.min(axis=0),
                "hi": verts.max(axis=0),
            })
            out.append([idx])
    return out


def agglomerate(mesh: SimplicialMesh, agg_map: np.ndarray) -> PolytopicMesh:
    """Group fine simplices into polytopic elements and extract faces.

    Boundary facets are those incident to one simplex; facets between two
    simplices of the same element are discarded; the rest become interior
    faces.  Co-hyperplanar facets of the same (owner, neighbor) pair merge
    into one Face; distinct planes stay separate Faces of one Interface.
    """
    agg_map = np.asarray(agg_map, dtype=np.int64)
    ns, d = mesh.n_simplices, mesh.dim
    if agg_map.shape != (ns,):
        raise MeshError(f"agglomeration map must have one entry per simplex")
    n_el = int(agg_map.max()) + 1 if ns else 0
    present = np.unique(agg_map)
    if present.min(initial=0) < 0 or present.size != n_el:
        raise MeshError("agglomeration map must be surjective onto 0..max")

    elements = [np.flatnonzero(agg_map == e) for e in range(n_el)]

    # Enumerate facets: facet k of simplex s omits local vertex k.
    n_loc = d + 1
    facet_local = np.array(
        [[j for j in range(n_loc) if j != k] for k in range(n_loc)], dtype=np.int64
    )
    facets = mesh.simplices[:, facet_local].reshape(ns * n_loc, d)
    facet_simplex = np.repeat(np.arange(ns), n_loc)
    opposite_vertex = mesh.simplices[:, np.arange(n_loc)].reshape(ns * n_loc)

    keys = np.sort(facets, axis=1)
    order = np.lexsort(keys.T[::-1])
    keys_sorted = keys[order]
    new_group = np.ones(keys_sorted.shape[0], dtype=bool)
    new_group[1:] = (keys_sorted[1:] != keys_sorted[:-1]).any(axis=1)
    group_starts = np.flatnonzero(new_group)
    group_sizes = np.diff(np.append(group_starts, keys_sorted.shape[0]))
    if (group_sizes > 2).any():
        raise MeshError("non-manifold facet shared by more than two simplices")

    # Precompute geometry for the facets we keep (one representative per
    # unique facet, oriented outward from the owner-side simplex later).
    uf = _UnionFind(ns)
    boundary_by_el: dict[int, list] = {}
    interior_by_pair: dict[tuple[int, int], list] = {}
    verts = mesh.vertices
    centroids = verts[mesh.simplices].mean(axis=1)

    kept_vertex_ids = []
    kept_normals = []
    kept_measures = []
    kept_owner_simplex = []
    kept_neighbor_simplex = []

    for start, size in zip(group_starts, group_sizes):
        rows = order[start : start + size]
        s0 = int(facet_simplex[rows[0]])
        if size == 2:
            s1 = int(facet_simplex[rows[1]])
            e0, e1 = int(agg_map[s0]), int(agg_map[s1])
            if e0 == e1:
                uf.union(s0, s1)  # internal facet: connectivity only
                continue
            if e0 > e1:
                s0, s1 = s1, s0
                e0, e1 = e1, e0
            owner_s, neighbor_s = s0, s1
            bucket = interior_by_pair.setdefault((e0, e1), [])
        else:
            owner_s, neighbor_s = s0, BOUNDARY
            bucket = boundary_by_el.setdefault(int(agg_map[s0]), [])

        fid = len(kept_vertex_ids)
        vids = facets[rows[0]]
        coords = verts[vids]
        normal, measure = _facet_normal_and_measure(coords)
        facet_centroid = coords.mean(axis=0)
        if normal @ (facet_centroid - centroids[owner_s]) < 0.0:
            normal = -normal
        kept_vertex_ids.append(vids)
        kept_normals.append(normal)
        kept_measures.append(measure)
        kept_owner_simplex.append(owner_s)
        kept_neighbor_simplex.append(neighbor_s)
        bucket.append(fid)

    kept_vertex_ids = np.asarray(kept_vertex_ids, dtype=np.int64).reshape(-1, d)
    kept_normals = np.asarray(kept_normals, dtype=float).reshape(-1, mesh.dim)
    kept_measures = np.asarray(kept_measures, dtype=float)
    kept_owner_simplex = np.asarray(kept_owner_simplex, dtype=np.int64)
    kept_neighbor_simplex = np.asarray(kept_neighbor_simplex, dtype=np.int64)

    for e, simps in enumerate(elements):
        if simps.size == 0:
            raise MeshError(f"element {e} has no simplices")
        root = uf.find(int(simps[0]))
        if any(uf.find(int(s)) != root for s in simps[1:]):
            raise MeshError(
                f"element {e} is not facet-connected; refine the agglomeration map"
            )

    faces: list[Face] = []
    interfaces: list[Interface] = []

    def _emit(rows: list[int], owner: int, neighbor: int) -> list[int]:
        ids = []
        for members in _group_by_hyperplane(
            verts, rows, kept_normals, kept_vertex_ids
        ):
            members = np.asarray(members, dtype=np.int64)
            ids.append(len(faces))
            faces.append(
                Face(
                    vertex_ids=kept_vertex_ids[members],
                    normal=kept_normals[members[0]].copy(),
                    owner=owner,
                    neighbor=neighbor,
                    owner_simplices=kept_owner_simplex[members],
                    neighbor_simplices=kept_neighbor_simplex[members],
                    facet_measures=kept_measures[members],
                    measure=float(kept_measures[members].sum()),
                )
            )
        return ids

    for (e0, e1) in sorted(interior_by_pair):
        ids = _emit(interior_by_pair[(e0, e1)], e0, e1)
        interfaces.append(Interface(e0, e1, ids))
    for e in sorted(boundary_by_el):
        _emit(boundary_by_el[e], e, BOUNDARY)

    boxes = np.empty((n_el, 2, d))
    volumes = np.zeros(n_el)
    for e, simps in enumerate(elements):
        pts = verts[mesh.simplices[simps].ravel()]
        boxes[e, 0] = pts.min(axis=0)
        boxes[e, 1] = pts.max(axis=0)
        volumes[e] = mesh.simplex_volumes[simps].sum()

    return PolytopicMesh(
        base=mesh,
        agg_map=agg_map,
        elements=elements,
        bounding_boxes=boxes,
        element_volumes=volumes,
        faces=faces,
        interfaces=interfaces,
    )


def identity_agglomeration(mesh: SimplicialMesh) -> PolytopicMesh:
    """One element per simplex."""
    return agglomerate(mesh, np.arange(mesh.n_simplices, dtype=np.int64))


def subdivision_for_quadrature(mesh: PolytopicMesh, element: int) -> np.ndarray:
    """Fine simplex ids providing the element's quadrature subdivision."""
    return mesh.elements[element]


def face_subdivision(face: Face) -> np.ndarray:
    """Constituent (d-1)-simplices of a face, as vertex-index rows."""
    return face.vertex_ids
