"""
Singular value decomposition by one-sided (Hestenes) Jacobi rotations.

Column pairs are swept in a round-robin tournament order, so every round
rotates disjoint pairs and can be applied as one vectorized update. The order
is fixed, which keeps the result bit-reproducible for a given input.
"""
import logging
from dataclasses import dataclass
from functools import lru_cache
from typing import List, Tuple

import numpy as np

from dama.core.exceptions import ShapeMismatchError
from dama.numcore.matrix import Matrix, as_matrix

logger = logging.getLogger(__name__)

MAX_SWEEPS = 60
ROTATION_TOL = 1e-12
MAX_ELEMENTS = 10**7


@dataclass(frozen=True)
class SvdResult:
    """W = u . diag(sigma) . vt with k = min(m, n)."""

    u: Matrix
    sigma: np.ndarray
    vt: Matrix

    @property
    def rank_bound(self) -> int:
        return int(self.sigma.shape[0])

    def reconstruct(self) -> Matrix:
        return (self.u * self.sigma) @ self.vt

    def right_vectors(self, start: int, stop: int) -> Matrix:
        """Rows ``start:stop`` of vt (right singular vectors, 0-based)."""
        return np.ascontiguousarray(self.vt[start:stop])


@lru_cache(maxsize=64)
def _tournament(n: int) -> List[Tuple[np.ndarray, np.ndarray]]:
    """Round-robin pairing of n columns: n-1 (or n) rounds of disjoint pairs."""
    players = list(range(n))
    if n % 2:
        players.append(-1)
    size = len(players)
    rounds = []
    for _ in range(size - 1):
        p_idx, q_idx = [], []
        for i in range(size // 2):
            a, b = players[i], players[size - 1 - i]
            if a < 0 or b < 0:
                continue
            p_idx.append(min(a, b))
            q_idx.append(max(a, b))
        rounds.append((np.array(p_idx, dtype=np.intp), np.array(q_idx, dtype=np.intp)))
        players = [players[0]] + [players[-1]] + players[1:-1]
    return rounds


def _jacobi_columns(a: Matrix) -> Tuple[Matrix, np.ndarray, Matrix]:
    """Orthogonalize the columns of a tall matrix; returns (U, sigma, V) unsorted."""
    m, n = a.shape
    # Work on rows of the transpose so every column is contiguous
    cols = np.ascontiguousarray(a.T)
    v_rows = np.eye(n)
    rounds = _tournament(n) if n > 1 else []

    converged = n == 1
    for sweep in range(MAX_SWEEPS):
        rotated = False
        for p, q in rounds:
            cp, cq = cols[p], cols[q]
            alpha = np.einsum("ij,ij->i", cp, cp)
            beta = np.einsum("ij,ij->i", cq, cq)
            gamma = np.einsum("ij,ij->i", cp, cq)
            active = np.abs(gamma) > ROTATION_TOL * np.sqrt(alpha * beta)
            if not np.any(active):
                continue
            rotated = True
            safe_gamma = np.where(active, gamma, 1.0)
            zeta = (beta - alpha) / (2.0 * safe_gamma)
            sign = np.where(zeta >= 0.0, 1.0, -1.0)
            t = sign / (np.abs(zeta) + np.hypot(1.0, zeta))
            c = np.where(active, 1.0 / np.sqrt(1.0 + t * t), 1.0)
            s = np.where(active, c * t, 0.0)

            c_col, s_col = c[:, None], s[:, None]
            new_p = c_col * cp - s_col * cq
            new_q = s_col * cp + c_col * cq
            cols[p], cols[q] = new_p, new_q

            vp, vq = v_rows[p], v_rows[q]
            v_rows[p], v_rows[q] = c_col * vp - s_col * vq, s_col * vp + c_col * vq
        if not rotated:
            converged = True
            logger.debug(f"Jacobi SVD converged after {sweep + 1} sweeps ({m}x{n})")
            break

    if not converged:
        logger.warning(f"Jacobi SVD hit the {MAX_SWEEPS}-sweep cap without converging ({m}x{n})")

    sigma = np.sqrt(np.einsum("ij,ij->i", cols, cols))
    return cols, sigma, v_rows


def _complete_basis(u_cols: Matrix, valid: np.ndarray) -> Matrix:
    """Replace invalid (null-space) columns with unit vectors orthogonal to the rest."""
    m, k = u_cols.shape
    basis = u_cols.copy()
    kept = [j for j in range(k) if valid[j]]
    for j in range(k):
        if valid[j]:
            continue
        for i in range(m):
            cand = np.zeros(m)
            cand[i] = 1.0
            for _ in range(2):
                if kept:
                    q = basis[:, kept]
                    cand = cand - q @ (q.T @ cand)
            norm = np.linalg.norm(cand)
            if norm > 0.5:
                basis[:, j] = cand / norm
                kept.append(j)
                break
    return basis


def svd(w: Matrix) -> SvdResult:
    """
    Thin SVD of a dense matrix.

    Singular values are sorted non-increasing (exact ties keep Jacobi's arrival
    order) and each singular pair is signed so that the largest-magnitude entry
    of its u-column is positive.
    """
    w = as_matrix(w, "w")
    m, n = w.shape
    if m * n > MAX_ELEMENTS:
        raise ShapeMismatchError(
            f"svd input {m}x{n} exceeds the {MAX_ELEMENTS} element bound"
        )

    transposed = m < n
    tall = w.T if transposed else w
    cols, sigma, v_rows = _jacobi_columns(tall)

    order = np.argsort(-sigma, kind="stable")
    sigma = sigma[order]
    cols = cols[order]
    v_rows = v_rows[order]

    tiny = max(tall.shape) * np.finfo(np.float64).eps * max(sigma[0], np.finfo(np.float64).tiny)
    valid = sigma > tiny
    u_tall = np.zeros((tall.shape[0], sigma.shape[0]))
    u_tall[:, valid] = (cols[valid] / sigma[valid, None]).T
    if not np.all(valid):
        u_tall = _complete_basis(u_tall, valid)

    # tall = u_tall diag(sigma) v_rows
    if transposed:
        u, vt = v_rows.T.copy(), u_tall.T.copy()
    else:
        u, vt = u_tall, v_rows.copy()

    for j in range(sigma.shape[0]):
        lead = int(np.argmax(np.abs(u[:, j])))
        if u[lead, j] < 0.0:
            u[:, j] = -u[:, j]
            vt[j, :] = -vt[j, :]

    return SvdResult(u=np.ascontiguousarray(u), sigma=sigma, vt=np.ascontiguousarray(vt))
