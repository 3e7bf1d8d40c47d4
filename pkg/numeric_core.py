"""Dense numeric helpers shared by the model zoo, training and evaluation code.

Matrices are plain float64 ``numpy.ndarray`` objects with two dimensions.
"""

import logging
from typing import Callable, Dict, List, NamedTuple, Tuple

import numpy as np

logger = logging.getLogger(__name__)

Matrix = np.ndarray
Gradients = Dict[str, np.ndarray]

JACOBI_TOLERANCE = 1e-12
JACOBI_MAX_SWEEPS = 100
SYMMETRY_TOLERANCE = 1e-9


class NumericError(ValueError):
    """Raised when an input violates a numeric precondition."""


class NormalizedRows(NamedTuple):
    """Result of row normalization."""
    matrix: Matrix
    warnings: List[str]


def as_matrix(values: object, name: str = "matrix") -> Matrix:
    """Coerce ``values`` to a finite 2-D float64 array."""
    matrix = np.array(values, dtype=np.float64)
    if matrix.ndim == 1:
        matrix = matrix.reshape(1, -1)
    if matrix.ndim != 2:
        raise NumericError(f"{name} must be 2-D, got shape {matrix.shape}")
    finite_rows = np.isfinite(matrix).all(axis=1)
    if not finite_rows.all():
        bad_row = int(np.flatnonzero(~finite_rows)[0])
        raise NumericError(f"{name} has non-finite values in row {bad_row}")
    return matrix


def softmax_rows(m: Matrix) -> Matrix:
    """Row-wise softmax, stabilized by subtracting each row's maximum."""
    m = as_matrix(m, "softmax input")
    shifted = m - m.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=1, keepdims=True)


def l2_normalize_rows(m: Matrix) -> NormalizedRows:
    """Scale each row to unit Euclidean norm.

    All-zero rows stay zero and are reported in the warning list instead of
    raising, so degenerate embeddings show up in evaluation.
    """
    m = as_matrix(m, "normalize input")
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    zero_rows = np.flatnonzero(norms[:, 0] == 0.0)
    warnings = [f"row {int(i)} has zero norm; left as zero row" for i in zero_rows]
    for warning in warnings:
        logger.warning(warning)
    safe = np.where(norms == 0.0, 1.0, norms)
    return NormalizedRows(matrix=m / safe, warnings=warnings)


def similarity_matrix(q: Matrix, d: Matrix) -> Matrix:
    """All-pairs dot products: ``out[i, j] = q_i . d_j``."""
    q = as_matrix(q, "query matrix")
    d = as_matrix(d, "document matrix")
    if q.shape[1] != d.shape[1]:
        raise NumericError(f"dimension mismatch: queries have {q.shape[1]} columns, documents have {d.shape[1]}")
    return q @ d.T


def sym_eigenvalues(cov: Matrix) -> np.ndarray:
    """Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, sorted descending."""
    a = as_matrix(cov, "covariance").copy()
    n, cols = a.shape
    if n != cols:
        raise NumericError(f"matrix must be square, got {a.shape}")
    asymmetry = float(np.max(np.abs(a - a.T))) if n else 0.0
    if asymmetry > SYMMETRY_TOLERANCE:
        raise NumericError(f"matrix is not symmetric (max |a - a^T| = {asymmetry:.3e})")
    a = (a + a.T) / 2.0

    for sweep in range(JACOBI_MAX_SWEEPS):
        off = np.sqrt(np.sum(np.triu(a, 1) ** 2))
        if off < JACOBI_TOLERANCE:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) < 1e-300:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0)) if theta != 0.0 else 1.0
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                # rotate rows/columns p and q
                col_p = a[:, p].copy()
                col_q = a[:, q].copy()
                a[:, p] = c * col_p - s * col_q
                a[:, q] = s * col_p + c * col_q
                row_p = a[p, :].copy()
                row_q = a[q, :].copy()
                a[p, :] = c * row_p - s * row_q
                a[q, :] = s * row_p + c * row_q
                a[p, q] = a[q, p] = 0.0
    else:
        logger.warning(f"Jacobi iteration hit the {JACOBI_MAX_SWEEPS}-sweep cap; spectrum may be inexact")

    return np.sort(np.diag(a))[::-1].copy()


def grad_check(
    f: Callable[[Dict[str, np.ndarray]], Tuple[float, Gradients]],
    params: Dict[str, np.ndarray],
    eps: float = 1e-5,
) -> float:
    """Compare analytic gradients of ``f`` with central differences.

    ``f`` maps a parameter dict to ``(loss, gradients)``. The error for each
    parameter is ``|analytic - numeric| / (|numeric| + 1e-8)`` with norms taken
    over the whole parameter matrix; the maximum over parameters is returned.
    """
    if not 0.0 < eps <= 1e-2:
        raise NumericError(f"eps must be in (0, 1e-2], got {eps}")
    base = {name: np.array(value, dtype=np.float64) for name, value in params.items()}
    _, analytic = f({name: value.copy() for name, value in base.items()})

    worst = 0.0
    for name, value in base.items():
        numeric = np.zeros_like(value)
        for index in np.ndindex(value.shape):
            losses = []
            for sign in (1.0, -1.0):
                shifted = {key: val.copy() for key, val in base.items()}
                shifted[name][index] += sign * eps
                loss, _ = f(shifted)
                if not np.isfinite(loss):
                    raise NumericError(f"non-finite loss at perturbed point {name}{list(index)}")
                losses.append(loss)
            numeric[index] = (losses[0] - losses[1]) / (2.0 * eps)
        given = np.asarray(analytic.get(name, np.zeros_like(value)), dtype=np.float64)
        error = float(np.linalg.norm(given - numeric) / (np.linalg.norm(numeric) + 1e-8))
        logger.debug(f"grad_check {name}: relative error {error:.3e}")
        worst = max(worst, error)
    return worst
