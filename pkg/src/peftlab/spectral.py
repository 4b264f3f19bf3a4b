"""SVD and spectral analysis of weight-matrix perturbations.

The factorization is a one-sided Jacobi sweep over column pairs, chosen for
determinism and accuracy at the small matrix sizes this package works with.
All computation here is float64 regardless of the caller's training dtype.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "SvdFactorization",
    "SpectralReport",
    "SvdConvergenceError",
    "svd",
    "reconstruct",
    "effective_rank",
    "spectral_perturbation_report",
    "verify_singular_item_identity",
]

JACOBI_TOL = 1e-12
MAX_SWEEPS = 60
SIGN_EPS = 1e-12


class SvdConvergenceError(RuntimeError):
    def __init__(self, residual: float):
        self.residual = residual
        super().__init__(
            f"Jacobi SVD did not converge in {MAX_SWEEPS} sweeps "
            f"(off-diagonal residual {residual:.3e})"
        )


@dataclass
class SvdFactorization:
    """U (m x k), sigma (k,) non-increasing, V (n x k); W = U diag(sigma) V^T."""

    U: np.ndarray
    sigma: np.ndarray
    V: np.ndarray

    @property
    def k(self) -> int:
        return self.sigma.shape[0]


@dataclass
class SpectralReport:
    """How a perturbation moved the spectrum and singular subspaces of a matrix."""

    spectrum_before: np.ndarray
    spectrum_after: np.ndarray
    subspace_alignment: np.ndarray
    delta_effective_rank: int
    orthogonality_defect: float


def _orthonormal_complete(U: np.ndarray, start: int) -> None:
    """Fill columns start.. of U with unit vectors orthogonal to the earlier ones."""
    m = U.shape[0]
    col = start
    basis = 0
    while col < U.shape[1] and basis < m:
        v = np.zeros(m)
        v[basis] = 1.0
        basis += 1
        v -= U[:, :col] @ (U[:, :col].T @ v)
        norm = np.linalg.norm(v)
        if norm > 1e-8:
            U[:, col] = v / norm
            col += 1


def _apply_sign_convention(U: np.ndarray, V: np.ndarray) -> None:
    for j in range(U.shape[1]):
        col = U[:, j]
        nz = np.nonzero(np.abs(col) > SIGN_EPS)[0]
        if nz.size and col[nz[0]] < 0:
            U[:, j] = -col
            V[:, j] = -V[:, j]


def svd(w: np.ndarray) -> SvdFactorization:
    """One-sided Jacobi SVD of a real matrix.

    Rotations orthogonalize column pairs of a working copy until every pair
    is orthogonal relative to JACOBI_TOL; column norms are the singular
    values.  Raises SvdConvergenceError after MAX_SWEEPS sweeps.
    """
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2 or w.shape[0] < 1 or w.shape[1] < 1:
        raise ValueError(f"svd needs a non-empty 2-D matrix, got shape {w.shape}")
    if not np.all(np.isfinite(w)):
        raise ValueError("svd input contains non-finite entries")

    m, n = w.shape
    if m < n:
        f = svd(w.T)
        # swapping the factors moves the sign convention onto V; re-anchor it on U
        U, V = f.V.copy(), f.U.copy()
        _apply_sign_convention(U, V)
        _order_degenerate_clusters(U, f.sigma, V)
        return SvdFactorization(U=U, sigma=f.sigma, V=V)

    A = w.copy()
    V = np.eye(n)

    converged = False
    last_off = 0.0
    for _ in range(MAX_SWEEPS):
        rotated = False
        last_off = 0.0
        for i in range(n - 1):
            for j in range(i + 1, n):
                ai = A[:, i]
                aj = A[:, j]
                gamma = float(ai @ aj)
                alpha = float(ai @ ai)
                beta = float(aj @ aj)
                denom = np.sqrt(alpha * beta)
                if denom == 0.0 or abs(gamma) <= JACOBI_TOL * denom:
                    continue
                rotated = True
                last_off = max(last_off, abs(gamma) / denom)
                zeta = (beta - alpha) / (2.0 * gamma)
                t = np.sign(zeta) / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                if zeta == 0.0:
                    t = 1.0
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                A[:, i], A[:, j] = c * ai - s * aj, s * ai + c * aj
                V[:, i], V[:, j] = c * V[:, i] - s * V[:, j], s * V[:, i] + c * V[:, j]
        if not rotated:
            converged = True
            break
    if not converged:
        raise SvdConvergenceError(last_off)

    tol = JACOBI_TOL * max(np.linalg.norm(w), 1.0)
    sigma = np.linalg.norm(A, axis=0)
    order = np.argsort(-sigma, kind="stable")
    sigma = sigma[order]
    A = A[:, order]
    V = V[:, order]

    U = np.zeros((m, n))
    rank = 0
    for j in range(n):
        if sigma[j] > tol:
            U[:, j] = A[:, j] / sigma[j]
            rank = j + 1
    sigma[rank:] = 0.0
    _orthonormal_complete(U, rank)
    _apply_sign_convention(U, V)
    _order_degenerate_clusters(U, sigma, V)
    return SvdFactorization(U=U, sigma=sigma, V=V)


def _order_degenerate_clusters(U: np.ndarray, sigma: np.ndarray, V: np.ndarray) -> None:
    """Within a cluster of equal singular values, order columns lexicographically by U."""
    k = sigma.shape[0]
    start = 0
    while start < k:
        stop = start + 1
        while stop < k and sigma[stop] == sigma[start]:
            stop += 1
        if stop - start > 1:
            keys = sorted(range(start, stop), key=lambda j: tuple(-U[:, j]))
            U[:, start:stop] = U[:, keys]
            V[:, start:stop] = V[:, keys]
        start = stop


def reconstruct(f: SvdFactorization) -> np.ndarray:
    return (f.U * f.sigma) @ f.V.T


def effective_rank(delta: np.ndarray, tol: float = 1e-8) -> int:
    """Number of singular values above tol * sigma_max; 0 for the zero matrix."""
    if tol <= 0:
        raise ValueError("effective_rank tolerance must be positive")
    sigma = svd(delta).sigma
    if sigma.size == 0 or sigma[0] == 0.0:
        return 0
    return int(np.count_nonzero(sigma > tol * sigma[0]))


def _cluster_bounds(sigma: np.ndarray, rel_tol: float = 1e-8):
    """Split spectrum indices into clusters of (near-)degenerate singular values."""
    k = sigma.size
    scale = max(float(sigma[0]) if k else 0.0, 1.0)
    bounds = []
    start = 0
    for j in range(1, k):
        if abs(sigma[j] - sigma[j - 1]) > rel_tol * scale:
            bounds.append((start, j))
            start = j
    bounds.append((start, k))
    return bounds


def subspace_alignment(before: SvdFactorization, after: SvdFactorization) -> np.ndarray:
    """|cos| of principal angles between corresponding right singular subspaces.

    Computed cluster-wise over degenerate groups of the unperturbed spectrum
    so the quantity stays well defined under repeated singular values.
    """
    k = before.k
    out = np.zeros(k)
    for start, stop in _cluster_bounds(before.sigma):
        Vb = before.V[:, start:stop]
        Va = after.V[:, start:stop]
        # singular values of Vb^T Va are the cosines of the principal angles
        cosines = svd(Vb.T @ Va).sigma
        out[start:stop] = np.sort(cosines)[::-1][: stop - start]
    return np.clip(out, 0.0, None)


def _perturbed_right_frame_defect(w: np.ndarray, delta: np.ndarray, before: SvdFactorization) -> float:
    """Orthogonality defect ||V'^T V' - I||_F of the perturbed right vectors.

    The perturbed right vector for singular item d keeps the unperturbed left
    vector and singular value as the frame: v'_d = (W + dW)^T u_d / sigma_d.
    For a pure column-scaling perturbation this reduces to scaling each right
    vector elementwise, the structure the scaling-based methods induce.
    Items with (near-)zero singular value are excluded.
    """
    tol = 1e-12 * max(float(before.sigma[0]) if before.k else 0.0, 1.0)
    keep = before.sigma > tol
    if not np.any(keep):
        return 0.0
    U = before.U[:, keep]
    sig = before.sigma[keep]
    Vp = (w + delta).T @ U / sig
    gram = Vp.T @ Vp
    return float(np.linalg.norm(gram - np.eye(gram.shape[0])))


def spectral_perturbation_report(w: np.ndarray, delta: np.ndarray) -> SpectralReport:
    """Compare the factorization of w against w + delta."""
    w = np.asarray(w, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    if w.shape != delta.shape:
        raise ValueError(f"shape mismatch: w {w.shape} vs delta {delta.shape}")
    before = svd(w)
    after = svd(w + delta)
    return SpectralReport(
        spectrum_before=before.sigma,
        spectrum_after=after.sigma,
        subspace_alignment=subspace_alignment(before, after),
        delta_effective_rank=effective_rank(delta) if np.any(delta) else 0,
        orthogonality_defect=_perturbed_right_frame_defect(w, delta, before),
    )


def verify_singular_item_identity(
    w: np.ndarray, s_left: np.ndarray, s_right: np.ndarray
) -> float:
    """Max deviation between the direct and SVD-expanded forms of W + dW.

    Direct: W + s_left ⊙ W ⊙ s_right^T.  Expanded: sum over singular items of
    (1 + s_left[i] * s_right[j]) * sigma_d * U[i,d] * V[j,d].  The two are
    equal in exact arithmetic; the return value is pure rounding error.
    """
    w = np.asarray(w, dtype=np.float64)
    s_left = np.asarray(s_left, dtype=np.float64).reshape(-1)
    s_right = np.asarray(s_right, dtype=np.float64).reshape(-1)
    if s_left.shape[0] != w.shape[0] or s_right.shape[0] != w.shape[1]:
        raise ValueError(
            f"scale shapes {s_left.shape}/{s_right.shape} incompatible with W {w.shape}"
        )
    direct = w + s_left[:, None] * w * s_right[None, :]

    f = svd(w)
    coupling = 1.0 + np.outer(s_left, s_right)
    expanded = np.zeros_like(w)
    for d in range(f.k):
        item = f.sigma[d] * np.outer(f.U[:, d], f.V[:, d])
        expanded += coupling * item
    return float(np.abs(direct - expanded).max())
