"""Linear-system utilities: Schur test, DARE, discrete Lyapunov equation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SCHUR_MARGIN = 1e-10


class StabilizabilityError(RuntimeError):
    """DARE iteration diverged or hit its cap."""


def _mat(m):
    return np.atleast_2d(np.asarray(m, dtype=float))


@dataclass(frozen=True)
class LinearSystem:
    """``x+ = A x + B u + D w``."""

    a_matrix: np.ndarray
    b_matrix: np.ndarray
    d_matrix: np.ndarray

    def __post_init__(self):
        A, B, D = _mat(self.a_matrix), _mat(self.b_matrix), _mat(self.d_matrix)
        n = A.shape[0]
        if A.shape != (n, n):
            raise ValueError(f"A must be square, got {A.shape}")
        if B.shape[0] != n or D.shape[0] != n:
            raise ValueError(f"B and D need {n} rows, got {B.shape} and {D.shape}")
        for name, m in (("a_matrix", A), ("b_matrix", B), ("d_matrix", D)):
            m.setflags(write=False)
            object.__setattr__(self, name, m)

    @property
    def n(self) -> int:
        return self.a_matrix.shape[0]

    @property
    def m(self) -> int:
        return self.b_matrix.shape[1]

    @property
    def q(self) -> int:
        return self.d_matrix.shape[1]

    def step(self, x, u, w):
        return self.a_matrix @ x + self.b_matrix @ u + self.d_matrix @ w

    def to_json(self) -> dict:
        return {"A": self.a_matrix.tolist(), "B": self.b_matrix.tolist(), "D": self.d_matrix.tolist()}

    @classmethod
    def from_json(cls, obj) -> "LinearSystem":
        return cls(obj["A"], obj["B"], obj["D"])


@dataclass(frozen=True)
class RiccatiSolution:
    p_matrix: np.ndarray
    k_gain: np.ndarray
    residual: float
    iterations: int = 0


def spectral_radius(phi) -> float:
    phi = _mat(phi)
    if phi.shape[0] != phi.shape[1]:
        raise ValueError("spectral radius needs a square matrix")
    return float(np.max(np.abs(np.linalg.eigvals(phi))))


def is_schur(phi, margin: float = SCHUR_MARGIN) -> bool:
    """True iff the spectral radius of ``phi`` is below ``1 - margin``."""
    return spectral_radius(phi) < 1.0 - margin


def riccati_residual(sys: LinearSystem, q_matrix, r_matrix, P) -> float:
    A, B = sys.a_matrix, sys.b_matrix
    S = r_matrix + B.T @ P @ B
    K = -np.linalg.solve(S, B.T @ P @ A)
    res = P - q_matrix - A.T @ P @ A + K.T @ S @ K
    return float(np.max(np.abs(res)))


def dare(sys: LinearSystem, q_matrix, r_matrix, tol: float = 1e-12, max_iter: int = 100_000) -> RiccatiSolution:
    """Solve the discrete algebraic Riccati equation by fixed-point iteration.

    Iterates ``P <- Q + A'PA - A'PB (R + B'PB)^{-1} B'PA`` from ``P = Q``
    until the max-abs change drops below ``tol``.  Returns ``P`` and the
    gain ``K = -(R + B'PB)^{-1} B'PA`` so that ``u = K x``.
    """
    A, B = sys.a_matrix, sys.b_matrix
    Q, R = _mat(q_matrix), _mat(r_matrix)
    if Q.shape != (sys.n, sys.n) or R.shape != (sys.m, sys.m):
        raise ValueError("Q must be n x n and R must be m x m")
    if np.min(np.linalg.eigvalsh(0.5 * (R + R.T))) <= 0:
        raise ValueError("R must be positive definite")
    P = Q.copy()
    for it in range(1, max_iter + 1):
        S = R + B.T @ P @ B
        PA = P @ A
        P_new = Q + A.T @ PA - PA.T @ B @ np.linalg.solve(S, B.T @ PA)
        P_new = 0.5 * (P_new + P_new.T)
        if not np.all(np.isfinite(P_new)) or np.max(np.abs(P_new)) > 1e15:
            raise StabilizabilityError("DARE iteration diverged: (A, B) not stabilizable?")
        delta = np.max(np.abs(P_new - P))
        P = P_new
        if delta < tol * max(1.0, np.max(np.abs(P))):
            break
    else:
        raise StabilizabilityError(f"DARE iteration did not converge in {max_iter} steps")
    S = R + B.T @ P @ B
    K = -np.linalg.solve(S, B.T @ P @ A)
    if not is_schur(A + B @ K):
        raise StabilizabilityError("closed loop A + BK is not Schur: detectability violated")
    return RiccatiSolution(P, K, riccati_residual(sys, Q, R, P), it)


def _doubling_series(phi, S, tol, max_iter):
    P = S.copy()
    T = phi.copy()
    for _ in range(max_iter):
        add = T.T @ P @ T
        P = P + add
        T = T @ T
        if np.max(np.abs(add)) <= tol * max(1.0, np.max(np.abs(P))):
            break
    return 0.5 * (P + P.T)


def dlyap(phi, s_matrix, tol: float = 1e-14, max_iter: int = 200) -> np.ndarray:
    """Solve ``P - phi' P phi = S`` as the series ``sum_j (phi')^j S phi^j``.

    The series is summed by doubling (``P_{k+1} = P_k + T_k' P_k T_k``,
    ``T_{k+1} = T_k^2``), stopping once the added block is below ``tol``
    relative to ``P``.  A few refinement sweeps re-solve for the residual.
    """
    phi, S = _mat(phi), _mat(s_matrix)
    if phi.shape[0] != phi.shape[1] or S.shape != phi.shape:
        raise ValueError("phi and S must be square and of equal size")
    if not is_schur(phi):
        raise ValueError("phi is not Schur stable")
    P = _doubling_series(phi, S, tol, max_iter)
    for _ in range(3):
        res = S - (P - phi.T @ P @ phi)
        if np.max(np.abs(res)) <= tol:
            break
        P = P + _doubling_series(phi, 0.5 * (res + res.T), tol, max_iter)
    return P


def min_eig_power(M, iters: int = 10_000, tol: float = 1e-13) -> float:
    """Smallest eigenvalue of a symmetric matrix via power iteration on a shift."""
    M = _mat(M)
    n = M.shape[0]
    shift = float(np.max(np.sum(np.abs(M), axis=1)))  # Gershgorin bound on |lambda|
    Sh = shift * np.eye(n) - M
    v = np.ones(n) / np.sqrt(n)
    lam = 0.0
    for _ in range(iters):
        w = Sh @ v
        nw = np.linalg.norm(w)
        if nw == 0:
            return shift
        v_new = w / nw
        lam_new = float(v_new @ Sh @ v_new)
        if abs(lam_new - lam) <= tol * max(1.0, abs(lam_new)):
            lam = lam_new
            break
        v, lam = v_new, lam_new
    return shift - lam


def batch_matvec(X, M) -> np.ndarray:
    """``X @ M.T`` summed column by column.

    Each output row depends only on the matching input row, bit for bit,
    whatever the batch size; BLAS blocking does not give that guarantee.
    """
    X = np.atleast_2d(np.asarray(X, float))
    M = _mat(M)
    out = np.zeros((X.shape[0], M.shape[0]))
    for c in range(M.shape[1]):
        out += X[:, c, None] * M[None, :, c]
    return out
