"""Restarted GMRES with element-block Jacobi preconditioning.

Element blocks are dense and small, so the preconditioner inverts them
once (batched by block size) and applies the inverses per matrix-vector
product.  The reported residual is always recomputed explicitly.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .assembly import CSRMatrix, DofMap


class SolverError(RuntimeError):
    pass


@dataclass
class SolveResult:
    x: np.ndarray
    residual: float
    iterations: int
    converged: bool


def _extract_diagonal_blocks(matrix: CSRMatrix, dof_map: DofMap) -> list[np.ndarray]:
    blocks = []
    for e in range(dof_map.n_elements):
        off, n = dof_map.start(e), dof_map.count(e)
        block = np.zeros((n, n))
        for a in range(n):
            r = off + a
            sl = slice(matrix.row_ptr[r], matrix.row_ptr[r + 1])
            cols = matrix.col_idx[sl]
            lo = np.searchsorted(cols, off)
            hi = np.searchsorted(cols, off + n)
            block[a, cols[lo:hi] - off] = matrix.values[sl][lo:hi]
        blocks.append(block)
    return blocks


class BlockJacobiPreconditioner:
    """Action of the inverse block diagonal, batched by block size."""

    def __init__(self, matrix: CSRMatrix, dof_map: DofMap):
        self.dof_map = dof_map
        self.n = matrix.n_rows
        blocks = _extract_diagonal_blocks(matrix, dof_map)
        by_size: dict[int, list[int]] = {}
        for e, b in enumerate(blocks):
            by_size.setdefault(b.shape[0], []).append(e)
        self._groups = []
        for size, els in sorted(by_size.items()):
            stack = np.stack([blocks[e] for e in els])
            try:
                inv = np.linalg.inv(stack)
            except np.linalg.LinAlgError as exc:
                raise SolverError(f"singular diagonal block (size {size}): {exc}")
            starts = np.array([dof_map.start(e) for e in els], dtype=np.int64)
            idx = starts[:, None] + np.arange(size, dtype=np.int64)[None, :]
            self._groups.append((idx, inv))

    def apply(self, r: np.ndarray) -> np.ndarray:
        out = np.empty_like(r)
        for idx, inv in self._groups:
            out[idx] = np.einsum("bij,bj->bi", inv, r[idx])
        return out


def solve(
    matrix: CSRMatrix,
    rhs: np.ndarray,
    tol: float = 1e-10,
    max_iter: int = 2000,
    restart: int = 150,
    dof_map: Optional[DofMap] = None,
) -> SolveResult:
    """Solve matrix x = rhs by preconditioned restarted GMRES.

    Without a ``dof_map`` the preconditioner degrades to point Jacobi.
    Non-convergence is reported through ``converged``, not raised.
    """
    from scipy.sparse.linalg import LinearOperator, gmres

    if matrix.n_rows != matrix.n_cols:
        raise SolverError("solve needs a square matrix")
    if tol <= 0.0:
        raise SolverError("tolerance must be positive")
    a = matrix.to_scipy()
    rhs = np.asarray(rhs, dtype=float)
    rhs_norm = float(np.linalg.norm(rhs))
    if rhs_norm == 0.0:
        return SolveResult(np.zeros(matrix.n_rows), 0.0, 0, True)

    if dof_map is not None:
        pre = BlockJacobiPreconditioner(matrix, dof_map)
        m_op = LinearOperator(a.shape, matvec=pre.apply)
    else:
        diag = a.diagonal()
        diag = np.where(np.abs(diag) > 0, diag, 1.0)
        m_op = LinearOperator(a.shape, matvec=lambda r: r / diag)

    iters = 0

    def count(_):
        nonlocal iters
        iters += 1

    x, _info = gmres(
        a, rhs, rtol=tol, atol=0.0, restart=restart, maxiter=max_iter, M=m_op,
        callback=count, callback_type="pr_norm",
    )
    residual = float(np.linalg.norm(rhs - a @ x)) / rhs_norm
    return SolveResult(x, residual, iters, residual <= tol * 10.0)
