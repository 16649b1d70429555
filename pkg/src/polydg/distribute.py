"""Weighted mesh partitioning and independent per-part assembly.

``partition_mesh`` splits the element adjacency graph (edges = interfaces)
by recursive greedy graph growing with boundary-refinement passes,
deterministically for a given seed.  ``assemble_partition`` then builds the
rows owned by one part: volume and interior-face work over owned elements,
with cut interfaces handled by a modified interior kernel that emits only
the owned side's rows.  Parts never exchange assembled values; every input
they read (mesh, coefficients, penalty data of foreign neighbors) is an
immutable pure function of the shared mesh, so the parts can run in any
order or concurrently and ``gather_and_verify`` only stacks rows.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .assembly import (
    AssemblyConfig,
    AssemblyError,
    CSRMatrix,
    MeshGeometry,
    _assemble_approach2,
    write_matrix_market,
)
from .basis import BasisSpec
from .mesh import PolytopicMesh
from .model import PdeCoefficients
from .quadrature import simplex_rule


class PartitionError(ValueError):
    pass


@dataclass
class Partition:
    """Element-to-part map plus derived bookkeeping."""

    n_parts: int
    part_of: np.ndarray                # (nel,)
    owned: list[np.ndarray]            # per part, sorted element ids
    cut_interfaces: np.ndarray         # interface ids crossing parts
    weights: np.ndarray                # per-part weight totals

    def validate(self, mesh: PolytopicMesh) -> None:
        if self.part_of.shape != (mesh.n_elements,):
            raise PartitionError("partition map has wrong length")
        for p in range(self.n_parts):
            if self.owned[p].size == 0:
                raise PartitionError(f"part {p} owns no elements")
        cut = {
            i for i, ifc in enumerate(mesh.interfaces)
            if self.part_of[ifc.owner] != self.part_of[ifc.neighbor]
        }
        if cut != set(int(c) for c in self.cut_interfaces):
            raise PartitionError("cut-interface list inconsistent with the map")


def quadrature_cost_weights(
    mesh: PolytopicMesh, specs: list[BasisSpec], quad_increment: int = 2
) -> np.ndarray:
    """Per-element cost model: simplices x quadrature points x n_basis^2."""
    w = np.empty(mesh.n_elements)
    for e in range(mesh.n_elements):
        rule = simplex_rule(mesh.dim, 2 * specs[e].total_degree + quad_increment)
        n = specs[e].n_funcs
        w[e] = mesh.elements[e].shape[0] * rule.n_points * n * n
    return w


def _adjacency(mesh: PolytopicMesh) -> list[list[int]]:
    adj = [[] for _ in range(mesh.n_elements)]
    for ifc in mesh.interfaces:
        adj[ifc.owner].append(ifc.neighbor)
        adj[ifc.neighbor].append(ifc.owner)
    return [sorted(set(a)) for a in adj]


def _grow_half(nodes, adj, weights, target, start):
    """Greedy BFS-flavored growth: absorb the frontier node adding the
    fewest new cut edges (ties by index) until the target weight is met."""
    in_set = {start}
    total = weights[start]
    gain = {}  # candidate -> edges into the grown set
    for v in adj[start]:
        if v in nodes:
            gain[v] = gain.get(v, 0) + 1
    while total < target and gain:
        best = max(sorted(gain), key=lambda v: gain[v])
        del gain[best]
        if best in in_set:
            continue
        in_set.add(best)
        total += weights[best]
        for v in adj[best]:
            if v in nodes and v not in in_set:
                gain[v] = gain.get(v, 0) + 1
    return in_set, total


def _refine_bisection(nodes, adj, weights, side_a, target_a, tol):
    """Boundary moves that reduce the cut while keeping balance in bounds."""
    side = {v: (0 if v in side_a else 1) for v in nodes}
    wa = sum(weights[v] for v in side_a)
    total = sum(weights[v] for v in nodes)
    for _ in range(10):
        best_move, best_gain = None, 0
        for v in sorted(nodes):
            s = side[v]
            internal = external = 0
            for u in adj[v]:
                if u in side:
                    if side[u] == s:
                        internal += 1
                    else:
                        external += 1
            if external == 0:
                continue
            gain = external - internal
            new_wa = wa + (weights[v] if s == 1 else -weights[v])
            if abs(new_wa - target_a) > tol * total:
                continue
            if gain > best_gain:
                best_gain, best_move = gain, v
        if best_move is None:
            break
        s = side[best_move]
        side[best_move] = 1 - s
        wa += weights[best_move] if s == 1 else -weights[best_move]
    return {v for v in nodes if side[v] == 0}


def partition_mesh(
    mesh: PolytopicMesh,
    n_parts: int,
    weights: Optional[np.ndarray] = None,
    seed: int = 0,
) -> Partition:
    """Recursive graph-growing bisection with refinement; deterministic."""
    nel = mesh.n_elements
    if n_parts < 1:
        raise PartitionError("n_parts must be >= 1")
    if n_parts > nel:
        raise PartitionError(f"cannot split {nel} elements into {n_parts} parts")
    weights = (np.ones(nel) if weights is None
               else np.asarray(weights, dtype=float))
    adj = _adjacency(mesh)
    part_of = np.zeros(nel, dtype=np.int64)

    def bisect(nodes: set, parts: list[int], salt: int):
        if len(parts) == 1:
            for v in nodes:
                part_of[v] = parts[0]
            return
        k = len(parts) // 2
        frac = k / len(parts)
        total = sum(weights[v] for v in nodes)
        ordered = sorted(nodes)
        start = ordered[(seed + salt) % len(ordered)]
        side_a, _ = _grow_half(nodes, adj, weights, frac * total, start)
        side_a = _refine_bisection(nodes, adj, weights, side_a, frac * total, 0.10)
        side_b = nodes - side_a
        if not side_a or not side_b:  # degenerate growth: force a split
            side_a = set(ordered[: max(1, len(ordered) // 2)])
            side_b = nodes - side_a
        bisect(side_a, parts[:k], salt + 1)
        bisect(side_b, parts[k:], salt + 1 + k)

    bisect(set(range(nel)), list(range(n_parts)), 0)

    owned = [np.flatnonzero(part_of == p) for p in range(n_parts)]
    cut = np.array(
        [i for i, ifc in enumerate(mesh.interfaces)
         if part_of[ifc.owner] != part_of[ifc.neighbor]],
        dtype=np.int64,
    )
    totals = np.array([weights[o].sum() for o in owned])
    partition = Partition(n_parts, part_of, owned, cut, totals)
    partition.validate(mesh)
    return partition


@dataclass
class PartialMatrix:
    """Rows of the global matrix owned by one part (global column ids)."""

    part: int
    row_ranges: list[tuple[int, int]]  # half-open global row spans, ascending
    matrix: CSRMatrix                  # local rows, global columns

    @property
    def n_rows(self) -> int:
        return self.matrix.n_rows


def assemble_partition(
    mesh: PolytopicMesh,
    partition: Partition,
    part_id: int,
    coeffs: PdeCoefficients,
    specs: list[BasisSpec],
    config: Optional[AssemblyConfig] = None,
):
    """Assemble the rows of one part; no data from other parts is written.

    Returns (PartialMatrix, partial load over owned rows, stats).  Cut
    interfaces are processed by the one-sided interior kernel, so each cut
    sub-face is visited once per adjacent part.
    """
    config = config or AssemblyConfig()
    if not 0 <= part_id < partition.n_parts:
        raise PartitionError(f"part {part_id} out of range")
    geom = MeshGeometry(mesh, coeffs, specs, config)
    own = partition.owned[part_id]
    matrix, rhs, stats, pattern = _assemble_approach2(geom, config, row_elements=own)

    ranges: list[tuple[int, int]] = []
    for e in own:
        start = geom.dof_map.start(int(e))
        stop = start + geom.dof_map.count(int(e))
        if ranges and ranges[-1][1] == start:
            ranges[-1] = (ranges[-1][0], stop)
        else:
            ranges.append((start, stop))
    own_rows = np.concatenate(
        [np.arange(a, b, dtype=np.int64) for a, b in ranges]
    )
    return PartialMatrix(part_id, ranges, matrix), rhs[own_rows], stats


def gather_and_verify(partials: list[PartialMatrix], n_dofs: int) -> CSRMatrix:
    """Stack row-distributed partials into the global CSR.

    Every global row must be covered exactly once; overlap or gaps raise.
    """
    coverage = np.zeros(n_dofs, dtype=np.int64)
    for pm in partials:
        for a, b in pm.row_ranges:
            coverage[a:b] += 1
    if (coverage != 1).any():
        bad = int(np.flatnonzero(coverage != 1)[0])
        raise AssemblyError(f"row {bad} covered {coverage[bad]} times")

    row_counts = np.zeros(n_dofs, dtype=np.int64)
    sources = {}
    for pm in partials:
        local = 0
        for a, b in pm.row_ranges:
            for r in range(a, b):
                sl = slice(pm.matrix.row_ptr[local], pm.matrix.row_ptr[local + 1])
                sources[r] = (pm.matrix.col_idx[sl], pm.matrix.values[sl])
                row_counts[r] = sl.stop - sl.start
                local += 1
    row_ptr = np.zeros(n_dofs + 1, dtype=np.int64)
    np.cumsum(row_counts, out=row_ptr[1:])
    col_idx = np.empty(row_ptr[-1], dtype=np.int64)
    values = np.empty(row_ptr[-1])
    for r in range(n_dofs):
        cols, vals = sources[r]
        col_idx[row_ptr[r] : row_ptr[r + 1]] = cols
        values[row_ptr[r] : row_ptr[r + 1]] = vals
    return CSRMatrix(n_dofs, n_dofs, row_ptr, col_idx, values)


def gather_load(partials_loads, partials, n_dofs: int) -> np.ndarray:
    out = np.zeros(n_dofs)
    for load, pm in zip(partials_loads, partials):
        local = 0
        for a, b in pm.row_ranges:
            out[a:b] = load[local : local + (b - a)]
            local += b - a
    return out


# -- file formats -------------------------------------------------------------

def save_partition_map(path, partition: Partition) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in partition.part_of:
            fh.write(f"{int(p)}\n")


def load_partition_map(path, n_elements: int) -> np.ndarray:
    out = np.empty(n_elements, dtype=np.int64)
    with open(path, "r", encoding="utf-8") as fh:
        entries = [ln.strip() for ln in fh if ln.strip()]
    if len(entries) != n_elements:
        raise PartitionError(f"{path}: expected {n_elements} entries")
    for k, tok in enumerate(entries):
        out[k] = int(tok)
    return out


def save_partial_matrix(path_prefix, partial: PartialMatrix) -> None:
    """Matrix Market body plus a companion row-range header file."""
    write_matrix_market(f"{path_prefix}.mtx", partial.matrix)
    with open(f"{path_prefix}.rows", "w", encoding="utf-8") as fh:
        fh.write(f"{partial.part} {len(partial.row_ranges)}\n")
        for a, b in partial.row_ranges:
            fh.write(f"{a} {b}\n")
