"""Dense linear algebra kernel: Jacobi SVD, Householder QR, symmetric eigensolver.

Everything operates on plain 2-D float64 ndarrays. The matrices handled here
are small (a few hundred rows/columns at most), so the routines favour
accuracy, determinism and simplicity over asymptotic speed. All functions are
pure and safe to call concurrently.
"""

from __future__ import annotations

import math
from typing import NamedTuple

import numpy as np

# Jacobi sweeps stop once every off-diagonal Gram entry is below this
# relative threshold; the sweep count is hard-capped.
JACOBI_TOL = 1e-12
MAX_SWEEPS = 100

# Singular values below rank_tol * sigma_max count as zero for rank decisions.
DEFAULT_RANK_TOL = 1e-10


class ConvergenceError(RuntimeError):
    """Jacobi iteration failed to converge within the sweep cap."""


class SvdResult(NamedTuple):
    u: np.ndarray                # m x k, orthonormal columns
    singular_values: np.ndarray  # length k, nonincreasing, >= 0
    vt: np.ndarray               # k x n, orthonormal rows


def as_matrix(m, name: str = "matrix") -> np.ndarray:
    """Validate and return `m` as a non-empty 2-D float64 array."""
    a = np.asarray(m, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {a.shape}")
    if a.size == 0:
        raise ValueError(f"{name} must be non-empty, got shape {a.shape}")
    if not np.isfinite(a).all():
        raise ValueError(f"{name} contains non-finite entries")
    return a


def qr_thin(m) -> tuple[np.ndarray, np.ndarray]:
    """Thin Householder QR of an m x n matrix with m >= n.

    Returns (q, r) with q of shape m x n (orthonormal columns) and r of
    shape n x n upper triangular such that q @ r reconstructs the input.
    """
    a = as_matrix(m)
    rows, cols = a.shape
    if rows < cols:
        raise ValueError(f"qr_thin requires rows >= cols, got {rows}x{cols}")
    r = a.copy()
    reflectors: list[np.ndarray | None] = []
    for k in range(cols):
        x = r[k:, k]
        normx = math.sqrt(float(x @ x))
        if normx == 0.0:
            reflectors.append(None)
            continue
        alpha = -math.copysign(normx, x[0] if x[0] != 0.0 else 1.0)
        v = x.copy()
        v[0] -= alpha
        vnorm = math.sqrt(float(v @ v))
        if vnorm == 0.0:
            reflectors.append(None)
            continue
        v /= vnorm
        r[k:, k:] -= 2.0 * np.outer(v, v @ r[k:, k:])
        reflectors.append(v)
    q = np.eye(rows, cols)
    for k in reversed(range(cols)):
        v = reflectors[k]
        if v is None:
            continue
        q[k:, :] -= 2.0 * np.outer(v, v @ q[k:, :])
    return q, np.triu(r[:cols, :])


def _apply_sign_convention(u: np.ndarray, vt: np.ndarray) -> None:
    # Per singular triplet, flip signs so the largest-magnitude entry of the
    # right singular vector is positive (argmax breaks ties at lowest index).
    for k in range(vt.shape[0]):
        row = vt[k]
        jmax = int(np.argmax(np.abs(row)))
        if row[jmax] < 0.0:
            vt[k] = -row
            u[:, k] = -u[:, k]


def _complete_orthonormal(u: np.ndarray, filled: int) -> None:
    # Fill columns filled..k-1 of u with an orthonormal completion, chosen
    # deterministically from re-orthogonalized identity candidates.
    rows, k = u.shape
    col = filled
    cand = 0
    while col < k and cand < rows:
        e = np.zeros(rows)
        e[cand] = 1.0
        for _ in range(2):
            e -= u[:, :col] @ (u[:, :col].T @ e)
        nrm = math.sqrt(float(e @ e))
        if nrm > 1e-3:
            u[:, col] = e / nrm
            col += 1
        cand += 1
    if col < k:
        raise ConvergenceError(
            f"failed to complete an orthonormal basis for a {rows}x{k} factor"
        )


def svd(m) -> SvdResult:
    """Thin SVD via one-sided Jacobi on the smaller Gram side.

    Returns u (m x k), singular values (nonincreasing, length k = min(m, n))
    and vt (k x n) with a deterministic sign convention: in each right
    singular vector the entry of largest magnitude is made positive.
    Singular values below max(m, n) * eps * sigma_max are flushed to zero and
    the corresponding left singular vectors are orthonormal completions.
    """
    a = as_matrix(m)
    transpose = a.shape[0] < a.shape[1]
    w = np.array(a.T if transpose else a, dtype=np.float64, copy=True)
    rows, cols = w.shape
    v = np.eye(cols)

    for _sweep in range(MAX_SWEEPS):
        g = w.T @ w  # fresh Gram matrix each sweep; updated in place below
        rotated = False
        for i in range(cols - 1):
            for j in range(i + 1, cols):
                gii, gjj, gij = g[i, i], g[j, j], g[i, j]
                if gii <= 0.0 or gjj <= 0.0:
                    continue  # numerically zero column, nothing to rotate
                if abs(gij) <= JACOBI_TOL * math.sqrt(gii * gjj):
                    continue
                rotated = True
                zeta = (gjj - gii) / (2.0 * gij)
                t = math.copysign(1.0, zeta) / (abs(zeta) + math.hypot(1.0, zeta))
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = c * t
                rot = np.array([[c, s], [-s, c]])
                w[:, [i, j]] = w[:, [i, j]] @ rot
                v[:, [i, j]] = v[:, [i, j]] @ rot
                g[:, [i, j]] = g[:, [i, j]] @ rot
                g[[i, j], :] = rot.T @ g[[i, j], :]
                g[i, j] = g[j, i] = 0.0
        if not rotated:
            break
    else:
        raise ConvergenceError(
            f"one-sided Jacobi SVD did not converge within {MAX_SWEEPS} sweeps "
            f"for a {a.shape[0]}x{a.shape[1]} matrix"
        )

    norms = np.sqrt(np.sum(w * w, axis=0))
    order = np.argsort(-norms, kind="stable")
    sigma = norms[order]
    w = w[:, order]
    v = v[:, order]

    k = cols
    u = np.zeros((rows, k))
    cutoff = max(a.shape) * np.finfo(np.float64).eps * (sigma[0] if k else 0.0)
    rank = int(np.sum(sigma > cutoff))
    if rank:
        u[:, :rank] = w[:, :rank] / sigma[:rank]
    sigma[rank:] = 0.0
    _complete_orthonormal(u, rank)

    if transpose:
        u_out, vt_out = v, np.ascontiguousarray(u.T)
    else:
        u_out, vt_out = u, np.ascontiguousarray(v.T)
    _apply_sign_convention(u_out, vt_out)
    return SvdResult(u_out, sigma, vt_out)


def lowrank_svd(b, a) -> SvdResult:
    """Thin rank-r SVD of the product b @ a without forming it densely.

    With b of shape d_out x r and a of shape r x d_in (r <= both outer
    dimensions), factor b = Q_b R_b and a.T = Q_a R_a, take the r x r SVD of
    R_b @ R_a.T and lift the factors back through Q_b and Q_a.
    """
    b = as_matrix(b, "b")
    a = as_matrix(a, "a")
    if b.shape[1] != a.shape[0]:
        raise ValueError(
            f"inner dimensions disagree: b is {b.shape[0]}x{b.shape[1]}, "
            f"a is {a.shape[0]}x{a.shape[1]}"
        )
    r = b.shape[1]
    if r > b.shape[0] or r > a.shape[1]:
        raise ValueError(
            f"rank {r} exceeds outer dimensions {b.shape[0]}x{a.shape[1]}"
        )
    qb, rb = qr_thin(b)
    qa, ra = qr_thin(a.T)
    core = svd(rb @ ra.T)
    u = qb @ core.u
    vt = core.vt @ qa.T
    _apply_sign_convention(u, vt)
    return SvdResult(u, core.singular_values, vt)


def spectral_norm(m) -> float:
    """Largest singular value."""
    return float(svd(m).singular_values[0])


def condition_number(m, rank_tol: float = DEFAULT_RANK_TOL) -> float:
    """Ratio of the largest to the smallest non-zero singular value.

    Singular values at or below rank_tol * sigma_max are treated as zero, so
    a numerically rank-1 matrix has condition number 1. Raises for the
    all-zero matrix, whose condition number is undefined.
    """
    if rank_tol <= 0.0:
        raise ValueError(f"rank_tol must be positive, got {rank_tol}")
    s = svd(m).singular_values
    if s[0] <= 0.0:
        raise ValueError("condition number is undefined for an all-zero matrix")
    kept = s[s > rank_tol * s[0]]
    return float(kept[0] / kept[-1])


def _round_robin_pairs(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    # Tournament schedule: n-1 (or n) sub-steps of disjoint index pairs that
    # together cover every unordered pair exactly once.
    players = list(range(n)) + ([-1] if n % 2 else [])
    m = len(players)
    steps = []
    for _ in range(m - 1):
        ps, qs = [], []
        for i in range(m // 2):
            p, q = players[i], players[m - 1 - i]
            if p >= 0 and q >= 0:
                ps.append(min(p, q))
                qs.append(max(p, q))
        steps.append((np.array(ps), np.array(qs)))
        players = [players[0], players[m - 1]] + players[1 : m - 1]
    return steps


def eig_sym(m) -> tuple[np.ndarray, np.ndarray]:
    """Eigendecomposition of a symmetric matrix by cyclic two-sided Jacobi.

    Returns (eigenvalues, eigenvectors) with eigenvalues nonincreasing and
    eigenvectors in matching columns. Input must be symmetric to within
    1e-10 relative to its largest entry. Rotations are scheduled in disjoint
    batches (round-robin ordering) so each batch is one pair of matrix
    products; this is exactly equivalent to a sequential cyclic sweep.
    """
    a = as_matrix(m)
    n, ncols = a.shape
    if n != ncols:
        raise ValueError(f"eig_sym requires a square matrix, got {n}x{ncols}")
    amax = float(np.max(np.abs(a)))
    if float(np.max(np.abs(a - a.T))) > 1e-10 * max(1.0, amax):
        raise ValueError("eig_sym requires a symmetric matrix")
    a = (a + a.T) / 2.0
    vecs = np.eye(n)
    scale = math.sqrt(float(np.sum(a * a)))
    if scale == 0.0 or n == 1:
        return np.diag(a).copy(), vecs
    stop = JACOBI_TOL * scale

    schedule = _round_robin_pairs(n)
    iu, ju = np.triu_indices(n, 1)
    for _sweep in range(MAX_SWEEPS):
        if float(np.max(np.abs(a[iu, ju]))) <= stop:
            break
        for ps, qs in schedule:
            apq = a[ps, qs]
            active = np.abs(apq) > stop
            if not active.any():
                continue
            app = a[ps, ps]
            aqq = a[qs, qs]
            with np.errstate(divide="ignore", invalid="ignore"):
                theta = np.where(active, (aqq - app) / (2.0 * apq), 1.0)
            t = np.where(
                active,
                np.copysign(1.0, theta) / (np.abs(theta) + np.hypot(1.0, theta)),
                0.0,
            )
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            jrot = np.eye(n)
            jrot[ps, ps] = c
            jrot[qs, qs] = c
            jrot[ps, qs] = s
            jrot[qs, ps] = -s
            a = jrot.T @ a @ jrot
            a[ps[active], qs[active]] = 0.0
            a[qs[active], ps[active]] = 0.0
            vecs = vecs @ jrot
        a = (a + a.T) / 2.0
    else:
        raise ConvergenceError(
            f"Jacobi eigensolver did not converge within {MAX_SWEEPS} sweeps "
            f"for a {n}x{n} matrix"
        )

    w = np.diag(a).copy()
    order = np.argsort(-w, kind="stable")
    return w[order], vecs[:, order]


def frobenius(m) -> float:
    a = np.asarray(m, dtype=np.float64)
    return math.sqrt(float(np.sum(a * a)))


def rel_frobenius_error(actual, expected) -> float:
    """|actual - expected|_F / |expected|_F (absolute error if expected = 0)."""
    diff = frobenius(np.asarray(actual) - np.asarray(expected))
    denom = frobenius(expected)
    return diff / denom if denom > 0.0 else diff
