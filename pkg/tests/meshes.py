"""Structured test meshes and agglomeration maps.

Everything here is deterministic so frozen expected values stay valid.
"""

from __future__ import annotations

import numpy as np

from polydg.mesh import PolytopicMesh, SimplicialMesh, agglomerate

#: Kuhn subdivision of the unit cube into 6 tetrahedra (vertex permutations
#: along the three monotone lattice paths).
_KUHN_TETS = [
    (0, 1, 3, 7),
    (0, 1, 5, 7),
    (0, 2, 3, 7),
    (0, 2, 6, 7),
    (0, 4, 5, 7),
    (0, 4, 6, 7),
]


def unit_square_mesh(n: int) -> SimplicialMesh:
    """n x n grid of cells, two triangles each, on (0, 1)^2."""
    xs = np.linspace(0.0, 1.0, n + 1)
    vid = lambda i, j: i * (n + 1) + j
    vertices = np.array([[xs[i], xs[j]] for i in range(n + 1) for j in range(n + 1)])
    tris = []
    for i in range(n):
        for j in range(n):
            a, b = vid(i, j), vid(i + 1, j)
            c, d = vid(i + 1, j + 1), vid(i, j + 1)
            tris.append((a, b, c))
            tris.append((a, c, d))
    return SimplicialMesh(2, vertices, np.array(tris, dtype=np.int64))


def unit_cube_mesh(n: int) -> SimplicialMesh:
    """n^3 cells of 6 Kuhn tetrahedra each on (0, 1)^3 (conforming)."""
    xs = np.linspace(0.0, 1.0, n + 1)
    vid = lambda i, j, k: (i * (n + 1) + j) * (n + 1) + k
    vertices = np.array(
        [[xs[i], xs[j], xs[k]]
         for i in range(n + 1) for j in range(n + 1) for k in range(n + 1)]
    )
    tets = []
    for i in range(n):
        for j in range(n):
            for k in range(n):
                corner = [
                    vid(i + a, j + b, k + c)
                    for a in (0, 1) for b in (0, 1) for c in (0, 1)
                ]
                for t in _KUHN_TETS:
                    tets.append(tuple(corner[v] for v in t))
    return SimplicialMesh(3, vertices, np.array(tets, dtype=np.int64))


def square_block_agg(n: int, block: int) -> np.ndarray:
    """Agglomerate the n x n triangle grid into (n/block)^2 square patches."""
    assert n % block == 0
    nb = n // block
    agg = np.empty(2 * n * n, dtype=np.int64)
    idx = 0
    for i in range(n):
        for j in range(n):
            e = (i // block) * nb + (j // block)
            agg[idx] = e
            agg[idx + 1] = e
            idx += 2
    return agg


def cube_block_agg(n: int, block: int) -> np.ndarray:
    assert n % block == 0
    nb = n // block
    agg = np.empty(6 * n**3, dtype=np.int64)
    idx = 0
    for i in range(n):
        for j in range(n):
            for k in range(n):
                e = ((i // block) * nb + (j // block)) * nb + (k // block)
                agg[idx : idx + 6] = e
                idx += 6
    return agg


def bfs_agglomeration(mesh: SimplicialMesh, n_clusters: int, seed: int = 0) -> np.ndarray:
    """Balanced BFS clustering over facet adjacency; clusters stay connected."""
    ns, d = mesh.n_simplices, mesh.dim
    facets = {}
    neighbors = [[] for _ in range(ns)]
    for s in range(ns):
        vs = mesh.simplices[s]
        for k in range(d + 1):
            key = tuple(sorted(v for m, v in enumerate(vs) if m != k))
            other = facets.pop(key, None)
            if other is None:
                facets[key] = s
            else:
                neighbors[s].append(other)
                neighbors[other].append(s)

    rng = np.random.default_rng(seed)
    target = ns / n_clusters
    agg = np.full(ns, -1, dtype=np.int64)
    unassigned = set(range(ns))
    for e in range(n_clusters):
        remaining_clusters = n_clusters - e
        quota = int(round(len(unassigned) / remaining_clusters))
        seed_simplex = min(unassigned) if e % 2 == 0 else int(
            rng.choice(sorted(unassigned))
        )
        frontier = [seed_simplex]
        grabbed = []
        while frontier and len(grabbed) < max(quota, 1):
            s = frontier.pop(0)
            if agg[s] != -1:
                continue
            agg[s] = e
            grabbed.append(s)
            unassigned.discard(s)
            for t in sorted(neighbors[s]):
                if agg[t] == -1:
                    frontier.append(t)
        if not grabbed:  # ran dry: reseed from any leftover
            s = min(unassigned)
            agg[s] = e
            unassigned.discard(s)
    # sweep leftovers onto an assigned neighbor (keeps connectivity)
    while unassigned:
        progressed = False
        for s in sorted(unassigned):
            hit = [t for t in neighbors[s] if agg[t] != -1]
            if hit:
                agg[s] = agg[min(hit)]
                unassigned.discard(s)
                progressed = True
                break
        assert progressed, "mesh has an isolated component"
    return agg


def two_triangle_square() -> SimplicialMesh:
    vertices = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
    simplices = np.array([[0, 1, 2], [0, 2, 3]], dtype=np.int64)
    return SimplicialMesh(2, vertices, simplices)


def single_square_element() -> PolytopicMesh:
    return agglomerate(two_triangle_square(), np.array([0, 0]))


def two_squares_side_by_side() -> PolytopicMesh:
    """[0,1]^2 and [1,2]x[0,1], one element each, sharing the edge x = 1."""
    vertices = np.array(
        [[0.0, 0.0], [1.0, 0.0], [2.0, 0.0], [0.0, 1.0], [1.0, 1.0], [2.0, 1.0]]
    )
    simplices = np.array(
        [[0, 1, 4], [0, 4, 3], [1, 2, 5], [1, 5, 4]], dtype=np.int64
    )
    mesh = SimplicialMesh(2, vertices, simplices)
    return agglomerate(mesh, np.array([0, 0, 1, 1]))


def zigzag_pair(n_segments: int = 2) -> PolytopicMesh:
    """Two polygons on [0,2]x[0,1] whose interface is a non-collinear zigzag.

    The interface holds ``n_segments`` planar faces, exercising the
    one-block-per-interface bookkeeping.
    """
    assert n_segments in (2, 3)
    if n_segments == 2:
        mid = [(1.0, 0.0), (1.2, 0.5), (1.0, 1.0)]
    else:
        mid = [(1.0, 0.0), (1.2, 1.0 / 3.0), (0.95, 2.0 / 3.0), (1.0, 1.0)]
    left = [(0.0, 0.0), (0.0, 1.0)]
    right = [(2.0, 0.0), (2.0, 1.0)]
    vertices = np.array(mid + left + right)
    n_mid = len(mid)
    L0, L1 = n_mid, n_mid + 1
    R0, R1 = n_mid + 2, n_mid + 3
    tris = []
    agg = []
    for k in range(n_mid - 1):  # fans from the left/right walls onto the zigzag
        tris.append((L0, k, k + 1))
        agg.append(0)
        tris.append((R0, k + 1, k))
        agg.append(1)
    tris.append((L0, n_mid - 1, L1))
    agg.append(0)
    tris.append((R0, R1, n_mid - 1))
    agg.append(1)
    mesh = SimplicialMesh(2, vertices, np.array(tris, dtype=np.int64))
    return agglomerate(mesh, np.array(agg, dtype=np.int64))
