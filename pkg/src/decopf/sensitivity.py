"""Derivatives of a smoothed subproblem's optimal value in its parameters.

For a parameterized problem solved to a tight tolerance at a fixed barrier
weight, the primal-dual solution is an implicit function of the parameters,
and each sensitivity column solves one linear system against the Jacobian
factorized by the interior-point solver.  Because the parameters enter the
constraints only linearly, the value function's gradient and Hessian follow
from contractions of those sensitivities with constant matrices; no new
factorizations are required.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .nlp import QcqpProblem
from .pdipm import KktFactorization, PdipmSolution

__all__ = [
    "SensitivityBundle",
    "parameter_jacobian",
    "solution_sensitivity",
    "value_gradient",
    "value_hessian",
    "envelope_gradient",
    "bundle",
]


@dataclass
class SensitivityBundle:
    """Value, gradient, and Hessian of the smoothed value function at one
    parameter point, plus the full primal-dual solution sensitivity."""

    value: float
    gradient: np.ndarray
    hessian: np.ndarray
    solution_sensitivity: np.ndarray
    mu: float

    def __post_init__(self):
        if not np.all(np.isfinite(self.gradient)) or not np.all(
            np.isfinite(self.hessian)
        ):
            raise ValueError("non-finite value-function derivatives")


def parameter_jacobian(problem: QcqpProblem) -> sp.csr_matrix:
    """Constant dF/dx: residual rows differentiated in the parameter slots.

    Only the equality and inequality value rows can depend on the parameters
    (they enter linearly), so the stationarity and complementarity blocks are
    zero.
    """
    c = problem.compiled
    npar = len(c.param_idx)
    zero_top = sp.csr_matrix((c.n_free, npar))
    zero_bot = sp.csr_matrix((c.mi, npar))
    return sp.vstack([zero_top, c.dfdx_eq, c.dfdx_ineq, zero_bot], format="csr")


def solution_sensitivity(
    fact: KktFactorization, df_dx: sp.spmatrix
) -> np.ndarray:
    """d(y, s, nu, lam)/dx, one factorized solve per parameter column."""
    df_dx = sp.csc_matrix(df_dx)
    cols = []
    for k in range(df_dx.shape[1]):
        rhs = -np.asarray(df_dx[:, k].todense()).ravel()
        cols.append(fact.solve(rhs))
    return np.column_stack(cols) if cols else np.zeros((df_dx.shape[0], 0))


def value_gradient(
    sol: PdipmSolution, sens: np.ndarray, mu: float | None = None
) -> np.ndarray:
    """Total derivative of the barrier objective in the parameters.

    Contracts the objective gradient with dy/dx and the barrier term with
    ds/dx; at the solved point this coincides with the multiplier-based
    envelope formula (see :func:`envelope_gradient`).
    """
    c = sol.problem.compiled
    if mu is None:
        mu = sol.mu
    n, mi = c.n_free, c.mi
    g = c.obj_grad_free(sol.z)
    grad = sens[:n, :].T @ g
    if mi:
        grad = grad - mu * (sens[n : n + mi, :].T @ (1.0 / sol.s))
    return grad


def envelope_gradient(sol: PdipmSolution) -> np.ndarray:
    """Multiplier form of the value gradient: (dg/dx)' nu + (dh/dx)' lam."""
    c = sol.problem.compiled
    out = np.zeros(len(c.param_idx))
    if c.me:
        out = out + c.dfdx_eq.T @ sol.nu
    if c.mi:
        out = out + c.dfdx_ineq.T @ sol.lam
    return np.asarray(out).ravel()


def value_hessian(sol: PdipmSolution, sens: np.ndarray) -> np.ndarray:
    """Hessian of the value function, symmetrized.

    Differentiating the envelope gradient once more leaves only the
    multiplier sensitivities (the parameters enter the Lagrangian linearly),
    so the Hessian is a contraction of constant parameter Jacobians with the
    multiplier rows of the solution sensitivity.
    """
    c = sol.problem.compiled
    n, mi, me = c.n_free, c.mi, c.me
    npar = len(c.param_idx)
    hess = np.zeros((npar, npar))
    if me:
        dnu = sens[n + mi : n + mi + me, :]
        hess = hess + c.dfdx_eq.T @ dnu
    if mi:
        dlam = sens[n + mi + me :, :]
        hess = hess + c.dfdx_ineq.T @ dlam
    hess = np.asarray(hess)
    asym = np.max(np.abs(hess - hess.T)) if npar else 0.0
    if asym > 1e-6 * (1.0 + np.max(np.abs(hess), initial=0.0)):
        raise ValueError(f"value Hessian asymmetry {asym:.3e} too large")
    return 0.5 * (hess + hess.T)


def bundle(sol: PdipmSolution, mu: float | None = None) -> SensitivityBundle:
    """Full value/gradient/Hessian package for one solved subproblem."""
    if mu is None:
        mu = sol.mu
    df_dx = sol.problem.meta.get("df_dx")
    if df_dx is None:
        df_dx = parameter_jacobian(sol.problem)
        sol.problem.meta["df_dx"] = df_dx
    sens = solution_sensitivity(sol.fact, df_dx)
    return SensitivityBundle(
        value=sol.barrier_objective(mu),
        gradient=value_gradient(sol, sens, mu),
        hessian=value_hessian(sol, sens),
        solution_sensitivity=sens,
        mu=mu,
    )
