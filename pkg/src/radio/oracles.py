"""Independent reference implementations used only in tests.

Optimal-brain-surgeon pruning: remove the weight whose compensated removal
costs the least under the quadratic output-distortion model with Hessian
E[J^T J], then update the survivors to absorb the damage.  Dense inverse
throughout; oracle clarity over speed (dims <= 64).
"""

from __future__ import annotations

import numpy as np


class OracleError(ValueError):
    pass


def _checked_inverse(hess: np.ndarray) -> np.ndarray:
    h = np.asarray(hess, dtype=np.float64)
    if h.ndim != 2 or h.shape[0] != h.shape[1]:
        raise OracleError("Hessian must be square")
    if not np.allclose(h, h.T, atol=1e-10):
        raise OracleError("Hessian must be symmetric")
    try:
        np.linalg.cholesky(h)
    except np.linalg.LinAlgError as exc:
        raise OracleError("Hessian must be positive definite") from exc
    return np.linalg.inv(h)


def obs_prune_step(theta: np.ndarray, hess: np.ndarray) -> tuple[int, np.ndarray, float]:
    """One pruning step: (index p, full update delta, quadratic loss).

    p minimizes theta_i^2 / (2 * Hinv_ii); ties break to the lowest index.
    delta = -(theta_p / Hinv_pp) * Hinv e_p, so delta_p = -theta_p exactly.
    """
    theta = np.asarray(theta, dtype=np.float64)
    hinv = _checked_inverse(hess)
    diag = np.diag(hinv)
    losses = theta**2 / (2.0 * diag)
    p = int(np.argmin(losses))
    scale = theta[p] / diag[p]
    delta = -scale * hinv[:, p]
    delta[p] = -theta[p]  # exact by construction; pin against rounding
    return p, delta, float(losses[p])


def obs_loop(theta: np.ndarray, hess: np.ndarray, k: int) -> np.ndarray:
    """k sequential pruning steps, each restricted to the surviving weights.

    Pruned coordinates are frozen at zero; every step re-solves the
    compensation on the active submatrix of the (fixed) Hessian.
    """
    theta = np.asarray(theta, dtype=np.float64).copy()
    hess = np.asarray(hess, dtype=np.float64)
    n = theta.size
    if k >= n:
        raise OracleError("cannot prune every weight")
    active = np.arange(n)
    for _ in range(k):
        sub_p, sub_delta, _ = obs_prune_step(theta[active], hess[np.ix_(active, active)])
        theta[active] = theta[active] + sub_delta
        theta[active[sub_p]] = 0.0
        active = np.delete(active, sub_p)
    return theta


def obs_step_losses(theta: np.ndarray, hess: np.ndarray, k: int) -> list[float]:
    """Greedy per-step losses alongside obs_loop (for accounting checks)."""
    theta = np.asarray(theta, dtype=np.float64).copy()
    hess = np.asarray(hess, dtype=np.float64)
    active = np.arange(theta.size)
    losses = []
    for _ in range(k):
        sub_p, sub_delta, loss = obs_prune_step(theta[active], hess[np.ix_(active, active)])
        losses.append(loss)
        theta[active] = theta[active] + sub_delta
        theta[active[sub_p]] = 0.0
        active = np.delete(active, sub_p)
    return losses


def constrained_qp_prune(theta: np.ndarray, hess: np.ndarray) -> tuple[int, np.ndarray, float]:
    """Brute-force oracle: for every index i, solve the KKT system of
    min 1/2 d^T H d  s.t.  d_i = -theta_i, then pick the cheapest index.

    Solves the bordered linear system directly rather than reusing the
    inverse-Hessian formula, so it is an independent check.
    """
    theta = np.asarray(theta, dtype=np.float64)
    h = np.asarray(hess, dtype=np.float64)
    n = theta.size
    best = None
    for i in range(n):
        kkt = np.zeros((n + 1, n + 1))
        kkt[:n, :n] = h
        kkt[n, i] = kkt[i, n] = 1.0
        rhs = np.zeros(n + 1)
        rhs[n] = -theta[i]
        sol = np.linalg.solve(kkt, rhs)
        d = sol[:n]
        loss = 0.5 * float(d @ h @ d)
        if best is None or loss < best[2] - 1e-15:
            best = (i, d, loss)
    assert best is not None
    return best
