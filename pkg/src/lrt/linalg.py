"""Small dense kernels used by the streaming accumulator.

Everything here works on modest sizes (basis widths of a few tens of
columns), so the implementations favour determinism and clarity over
blocking tricks. No LAPACK calls: results must be bit-reproducible
across BLAS builds.
"""

from __future__ import annotations

import math

import numpy as np

# Residual below this fraction of the input norm is treated as "already
# in span" and the inserted column becomes exactly zero.
TOL_MGS = 1e-10

# Householder direction shorter than this means x0 is (numerically) e1
# and the complement basis is just the remaining identity columns.
TOL_HOUSEHOLDER = 1e-10

_MAX_JACOBI_SWEEPS = 30
_JACOBI_OFF_TOL = 1e-14


def mgs_insert(basis: np.ndarray, v: np.ndarray, tol: float = TOL_MGS):
    """Deflate ``v`` against the columns of ``basis`` (modified Gram-Schmidt).

    ``basis`` is n x r with orthonormal or exactly-zero columns. Returns
    ``(coeffs, residual_norm, new_column)`` where ``coeffs`` are the
    sequential projection coefficients, and ``new_column`` is the unit
    residual direction (all zeros when the residual norm falls below
    ``tol`` relative to the input norm). A second deflation pass runs when
    heavy cancellation is detected, with its coefficients folded in, so the
    identity ``v = basis @ coeffs + residual_norm * new_column`` holds to
    working precision.
    """
    v = np.asarray(v, dtype=np.float64)
    if basis.ndim != 2 or v.ndim != 1 or basis.shape[0] != v.shape[0]:
        raise ValueError(
            f"shape mismatch: basis {basis.shape} vs vector {v.shape}"
        )
    if not np.isfinite(v).all():
        raise ValueError("non-finite entries in inserted vector")

    n = v.shape[0]
    r = basis.shape[1]
    if n <= 32:
        # Scalar path: at these lengths the loop beats array dispatch.
        return _mgs_insert_small(basis, v, tol)

    norm_in = math.sqrt(float(v @ v))
    coeffs = np.zeros(r)
    w = v.copy()
    cols = basis.T
    for j in range(r):
        col = cols[j]
        c = float(col @ w)
        coeffs[j] = c
        w -= c * col
    residual = math.sqrt(float(w @ w))

    if 0.0 < residual < 1e-4 * norm_in:
        # Cancellation ate most of the vector; one reorthogonalization
        # pass keeps the residual direction genuinely orthogonal.
        for j in range(r):
            col = cols[j]
            c = float(col @ w)
            coeffs[j] += c
            w -= c * col
        residual = math.sqrt(float(w @ w))

    if norm_in == 0.0 or residual < tol * norm_in:
        return coeffs, 0.0, np.zeros_like(w)
    return coeffs, residual, w / residual


def _mgs_insert_small(basis: np.ndarray, v: np.ndarray, tol: float):
    """Scalar-arithmetic body of :func:`mgs_insert` for short vectors."""
    n, r = basis.shape
    rng_n = range(n)
    w = v.tolist()
    cols = basis.T.tolist()
    coeffs = [0.0] * r

    norm_in = 0.0
    for x in w:
        norm_in += x * x
    norm_in = math.sqrt(norm_in)

    for _ in range(2):
        for j in range(r):
            col = cols[j]
            c = 0.0
            for k in rng_n:
                c += col[k] * w[k]
            coeffs[j] += c
            for k in rng_n:
                w[k] -= c * col[k]
        residual = 0.0
        for x in w:
            residual += x * x
        residual = math.sqrt(residual)
        if not 0.0 < residual < 1e-4 * norm_in:
            break

    coeffs = np.asarray(coeffs)
    if norm_in == 0.0 or residual < tol * norm_in:
        return coeffs, 0.0, np.zeros(n)
    return coeffs, residual, np.asarray(w) / residual


def _fill_zero_columns(u: np.ndarray, live: np.ndarray) -> None:
    """Replace dead columns of ``u`` with a deterministic orthonormal fill.

    ``live`` flags columns that already hold unit vectors. Candidates are
    standard basis vectors, chosen by largest residual after projection
    (earliest index on near-ties) so the completion never degenerates.
    """
    n = u.shape[0]
    for j in np.flatnonzero(~live):
        # Column k of the projector residual I - u u^T is e_k projected
        # away from the current columns; score all candidates at once.
        resid = -(u @ u.T)
        resid.ravel()[:: n + 1] += 1.0
        norms = np.sqrt(np.einsum("ij,ij->j", resid, resid))
        best = 0
        best_norm = -1.0
        for k, cn in enumerate(norms.tolist()):
            if cn > best_norm + 1e-12:
                best_norm = cn
                best = k
        u[:, j] = resid[:, best] / best_norm
        live[j] = True


def svd_small(c: np.ndarray):
    """Deterministic SVD of a small square matrix by one-sided Jacobi.

    Returns ``(u, sigma, v)`` with ``c = u @ diag(sigma) @ v.T``, singular
    values sorted descending, and each u-column's first significant entry
    made nonnegative (the matching v-column is flipped with it). Right
    rotations are applied cyclically until the off-diagonal mass of the
    implicit Gram matrix drops below 1e-14 of its trace, capped at 30
    sweeps.

    The rotation sweeps run in scalar Python on the matrix columns: the
    matrices here are tiny (working rank plus one), so array-op dispatch
    costs more than the arithmetic. Column dot products are recomputed
    fresh at every pair visit; only the squared column norms are carried
    through rotations, where the update is an exact trig identity.
    """
    c = np.asarray(c, dtype=np.float64)
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise ValueError(f"expected a square matrix, got {c.shape}")
    q = c.shape[0]
    if q > 64:
        raise ValueError(f"matrix side {q} exceeds the supported cap of 64")
    if not np.all(np.isfinite(c)):
        raise ValueError("non-finite entries in matrix")

    trace_gram = float(np.sum(c * c))  # == ||c||_F^2, invariant under rotations
    tol_off = _JACOBI_OFF_TOL * max(trace_gram, np.finfo(np.float64).tiny)
    rng_q = range(q)

    mcols = c.T.tolist()
    vcols = np.eye(q).tolist()
    norms2 = [sum(x * x for x in col) for col in mcols]
    for _ in range(_MAX_JACOBI_SWEEPS):
        off2 = 0.0
        for i in range(q - 1):
            mi = mcols[i]
            for j in range(i + 1, q):
                mj = mcols[j]
                d = 0.0
                for k in rng_q:
                    d += mi[k] * mj[k]
                off2 += d * d
        if math.sqrt(2.0 * off2) <= tol_off:
            break
        for i in range(q - 1):
            mi = mcols[i]
            for j in range(i + 1, q):
                mj = mcols[j]
                a = norms2[i]
                b = norms2[j]
                d = 0.0
                for k in rng_q:
                    d += mi[k] * mj[k]
                if abs(d) <= 1e-15 * math.sqrt(a * b):
                    continue
                theta = 0.5 * math.atan2(2.0 * d, a - b)
                cs = math.cos(theta)
                sn = math.sin(theta)
                for k in rng_q:
                    x = mi[k]
                    y = mj[k]
                    mi[k] = cs * x + sn * y
                    mj[k] = cs * y - sn * x
                vi = vcols[i]
                vj = vcols[j]
                for k in rng_q:
                    x = vi[k]
                    y = vj[k]
                    vi[k] = cs * x + sn * y
                    vj[k] = cs * y - sn * x
                csn2 = 2.0 * cs * sn * d
                norms2[i] = max(cs * cs * a + csn2 + sn * sn * b, 0.0)
                norms2[j] = max(a + b - norms2[i], 0.0)

    m = np.array(mcols).T
    v = np.array(vcols).T
    sigma = np.sqrt(np.einsum("ij,ij->j", m, m))
    scale = float(sigma.max(initial=0.0))
    live = sigma > 1e-15 * max(scale, 1.0)
    u = np.zeros_like(m)
    u[:, live] = m[:, live] / sigma[live]
    sigma = np.where(live, sigma, 0.0)
    if not live.all():
        _fill_zero_columns(u, live.copy())

    order = np.argsort(-sigma, kind="stable")
    u, sigma, v = u[:, order], sigma[order], v[:, order]

    # Flip columns so the first significant u entry is nonnegative.
    significant = np.abs(u) > 1e-12
    first = significant.argmax(axis=0)
    lead = u[first, np.arange(q)]
    flip = (lead < 0.0) & significant.any(axis=0)
    if flip.any():
        u[:, flip] = -u[:, flip]
        v[:, flip] = -v[:, flip]
    return u, sigma, v


def householder_basis(x0: np.ndarray, tol: float = TOL_HOUSEHOLDER) -> np.ndarray:
    """Orthonormal basis of the hyperplane orthogonal to a unit vector.

    Returns the last k columns of the reflector H = I - 2 v v^T / ||v||^2
    with v = x0 - e1, i.e. a (k+1) x k matrix X with X^T X = I and
    X^T x0 = 0. When x0 is already e1 the reflector degenerates and the
    identity columns e2..e_{k+1} are returned directly.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.ndim != 1 or x0.size < 2:
        raise ValueError("x0 must be a vector of length >= 2")
    if abs(np.linalg.norm(x0) - 1.0) > 1e-8:
        raise ValueError("x0 must have unit norm")

    n = x0.size
    v = x0.copy()
    v[0] -= 1.0
    vnorm2 = float(v @ v)
    if np.sqrt(vnorm2) < tol:
        return np.eye(n)[:, 1:]
    h = np.eye(n) - (2.0 / vnorm2) * np.outer(v, v)
    return h[:, 1:]


def condition_estimate(c: np.ndarray) -> float:
    """Diagonal-ratio condition proxy |C[0,0]| / |C[q-1,q-1]|.

    The matrices this sees are nearly diagonal with descending weights, so
    the corner ratio tracks the true condition number without an SVD.
    Returns +inf when the bottom corner is exactly zero.
    """
    c = np.asarray(c)
    top = abs(float(c[0, 0]))
    bottom = abs(float(c[-1, -1]))
    if bottom == 0.0:
        return float("inf")
    return top / bottom
