"""Primal-dual interior-point solver for quadratically-constrained problems.

Newton's method is applied to the perturbed optimality system

    F(y, s, nu, lam; x, mu) = [ grad f + Jg' nu + Jh' lam
                                g(y)
                                h(y) + s
                                s * lam - mu ] = 0

with a fraction-to-the-boundary step cap and a backtracking line search on
||F||.  Two termination modes exist: the usual run-to-tolerance mode drives
``mu`` toward zero, while the hold-at mode stops decreasing at a prescribed
weight and then solves that single barrier problem tightly, which is what
makes the optimal-value function of a parameterized problem differentiable.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .nlp import BarrierInstance, QcqpProblem, flat_primal, kkt_residual

__all__ = [
    "PdipmOptions",
    "PdipmSolution",
    "KktFactorization",
    "PdipmError",
    "LineSearchError",
    "IterationLimitError",
    "SingularKktError",
    "solve",
    "newton_step",
    "fraction_to_boundary",
    "update_mu",
]


class PdipmError(RuntimeError):
    pass


class LineSearchError(PdipmError):
    pass


class IterationLimitError(PdipmError):
    pass


class SingularKktError(PdipmError):
    pass


@dataclass
class PdipmOptions:
    """Solver options.

    ``mode`` is ``"tol"`` (drive mu below ``eps_mu``) or ``"hold"`` (stop
    decreasing mu at the barrier instance's weight and solve to ``eps``).
    The barrier subproblem at each mu is solved to ``0.1 * mu``.
    """

    mode: str = "tol"
    eps_mu: float = 1e-8
    eps: float = 1e-12
    mu0: float = 0.1
    tau: float = 0.995
    max_iter: int = 400
    delta_min: float = 1e-8
    verbose: int = 0

    def __post_init__(self):
        if self.mode not in ("tol", "hold"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if not (0 < self.tau < 1):
            raise ValueError("tau must lie in (0, 1)")
        if self.mu0 <= 0 or self.eps_mu <= 0 or self.eps <= 0:
            raise ValueError("tolerances and mu0 must be positive")


class KktFactorization:
    """Reusable factorization of the primal-dual Jacobian at one iterate.

    The factorization is computed lazily on first solve and reused for any
    number of right-hand sides; one step of iterative refinement is applied
    when the direct solve leaves a relative residual above 1e-10.
    """

    def __init__(self, matrix: sp.spmatrix, dims: tuple[int, int, int, int]):
        self.matrix = matrix.tocsc()
        self.dims = dims  # (n_free, mi, me, mi)
        self._lu = None
        self.n_factorizations = 0
        self.n_solves = 0

    def _factorize(self):
        if self._lu is None:
            try:
                self._lu = spla.splu(self.matrix)
            except RuntimeError as exc:
                raise SingularKktError(str(exc)) from exc
            self.n_factorizations += 1
        return self._lu

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        lu = self._factorize()
        self.n_solves += 1
        sol = lu.solve(rhs)
        norm = np.linalg.norm(rhs)
        if norm > 0:
            resid = self.matrix @ sol - rhs
            if np.linalg.norm(resid) > 1e-10 * norm:
                sol = sol - lu.solve(resid)
                resid = self.matrix @ sol - rhs
                if not np.all(np.isfinite(sol)) or np.linalg.norm(
                    resid
                ) > 1e-8 * norm:
                    raise SingularKktError("refinement failed to reach tolerance")
        if not np.all(np.isfinite(sol)):
            raise SingularKktError("non-finite solution from factorization")
        return sol

    def split(self, delta: np.ndarray):
        n, mi, me, _ = self.dims
        return (
            delta[:n],
            delta[n : n + mi],
            delta[n + mi : n + mi + me],
            delta[n + mi + me :],
        )


@dataclass
class PdipmSolution:
    """Converged primal-dual point plus the factorization at that point."""

    y: np.ndarray
    s: np.ndarray
    lam: np.ndarray
    nu: np.ndarray
    mu: float
    f_norm: float
    iterations: int
    status: str
    fact: KktFactorization
    problem: QcqpProblem
    x_params: np.ndarray | None
    stats: dict = field(default_factory=dict)

    @property
    def z(self) -> np.ndarray:
        return self.problem.compiled.inject(self.y, self.x_params)

    @property
    def objective(self) -> float:
        """Objective of the underlying problem (no barrier term)."""
        return self.problem.compiled.obj_value(self.z)

    def barrier_objective(self, mu: float | None = None) -> float:
        """Objective including the -mu * sum(log s) barrier term."""
        if mu is None:
            mu = self.mu
        if len(self.s):
            return self.objective - mu * float(np.sum(np.log(self.s)))
        return self.objective


def fraction_to_boundary(
    s: np.ndarray,
    lam: np.ndarray,
    ds: np.ndarray,
    dlam: np.ndarray,
    tau: float,
) -> float:
    """Largest step in (0, 1] keeping s and lam above (1 - tau) times current."""
    alpha = 1.0
    for v, dv in ((s, ds), (lam, dlam)):
        neg = dv < 0
        if np.any(neg):
            alpha = min(alpha, float(np.min(-tau * v[neg] / dv[neg])))
    return alpha


def update_mu(
    mu: float, mode: str = "tol", eps_mu: float = 1e-8, mu_tilde: float | None = None
) -> float:
    """Barrier-weight decrease: superlinear near zero, clamped at the target."""
    nxt = min(0.2 * mu, mu**1.5)
    if mode == "hold":
        if mu_tilde is None:
            raise ValueError("hold mode needs mu_tilde")
        return max(mu_tilde, nxt)
    return max(eps_mu / 10.0, nxt)


def assemble_jacobian(
    problem: QcqpProblem,
    z: np.ndarray,
    s: np.ndarray,
    lam: np.ndarray,
    nu: np.ndarray,
) -> sp.csc_matrix:
    """Jacobian of F at an iterate, rows/columns in the documented order."""
    c = problem.compiled
    n, me, mi = c.n_free, c.me, c.mi
    H = c.lag_hess(nu, lam)
    jeq = c.eq_jac(z) if me else None
    jineq = c.ineq_jac(z) if mi else None
    blocks = [
        [H, None, jeq.T if me else None, jineq.T if mi else None],
        [jeq, None, None, None] if me else None,
        [jineq, sp.identity(mi, format="csr"), None, None] if mi else None,
        [None, sp.diags(lam), None, sp.diags(s)] if mi else None,
    ]
    rows = [r for r in blocks if r is not None]
    # bmat needs explicit zero blocks when a whole column would vanish
    if mi == 0 and me == 0:
        return sp.csc_matrix(H)
    keep = [True, mi > 0, me > 0, mi > 0]
    cols_keep = [k for k, flag in enumerate(keep) if flag]
    rows = [[row[k] for k in cols_keep] for row in rows]
    return sp.bmat(rows, format="csc")


def newton_step(fact: KktFactorization, f_vec: np.ndarray):
    """Solve J * delta = -F against a current factorization."""
    delta = fact.solve(-f_vec)
    return fact.split(delta)


def _regularization(problem: QcqpProblem) -> sp.csc_matrix:
    """Unit-size pattern for primal-dual regularization: +I on the Hessian
    block, -I on the equality rows at the multiplier columns."""
    c = problem.compiled
    n, me, mi = c.n_free, c.me, c.mi
    dim = n + 2 * mi + me
    rows = list(range(n)) + [n + k for k in range(me)]
    cols = list(range(n)) + [n + mi + k for k in range(me)]
    data = [1.0] * n + [-1.0] * me
    return sp.csc_matrix((data, (rows, cols)), shape=(dim, dim))


def _cold_start(problem: QcqpProblem, x_params, mu0: float):
    c = problem.compiled
    y = flat_primal(problem)
    z = c.inject(y, x_params)
    h = c.ineq_values(z)
    s = np.maximum(0.1, -h)
    lam = mu0 / s if len(s) else np.zeros(0)
    nu = np.zeros(c.me)
    return y, s, lam, nu


def solve(
    inst: BarrierInstance | QcqpProblem,
    x_params: np.ndarray | None = None,
    opts: PdipmOptions | None = None,
    warm_start: PdipmSolution | None = None,
) -> PdipmSolution:
    """Run the interior-point iteration to the mode's termination test.

    In hold mode the target weight is the barrier instance's ``mu``.  A warm
    start reuses the given primal-dual point and, in hold mode, begins
    directly at the target weight.
    """
    if isinstance(inst, QcqpProblem):
        inst = BarrierInstance(inst, mu=1.0)
    problem = inst.base
    opts = opts or PdipmOptions()
    c = problem.compiled
    mu_tilde = inst.mu if opts.mode == "hold" else None
    if x_params is not None:
        x_params = np.asarray(x_params, dtype=float)

    if warm_start is not None:
        y = warm_start.y.copy()
        s = np.maximum(warm_start.s.copy(), 1e-12)
        lam = np.maximum(warm_start.lam.copy(), 1e-12)
        nu = warm_start.nu.copy()
        # resume the schedule near the warm point's centrality level rather
        # than jumping; for a re-solve at the same weight this is the target
        comp = float(np.mean(s * lam)) if len(s) else 0.0
        if opts.mode == "hold":
            mu = min(opts.mu0, max(mu_tilde, comp))
        else:
            mu = min(opts.mu0, max(opts.eps_mu, comp))
    else:
        y, s, lam, nu = _cold_start(problem, x_params, opts.mu0)
        mu = opts.mu0
        if opts.mode == "hold":
            mu = max(mu, mu_tilde)

    def residual(yv, sv, lv, nv, muv):
        return kkt_residual(inst, yv, sv, lv, nv, x_params, muv)

    t0 = time.perf_counter()
    iters = 0
    n_fact = 0
    f_vec = residual(y, s, lam, nu, mu)
    f_norm = float(np.linalg.norm(f_vec, np.inf))
    reg_pattern = None
    stall_ref = f_norm
    stall_count = 0

    while True:
        if opts.mode == "hold" and mu <= mu_tilde:
            mu = mu_tilde
            target = opts.eps
        else:
            target = 0.1 * mu

        while f_norm > target:
            if iters >= opts.max_iter:
                raise IterationLimitError(
                    f"no convergence in {opts.max_iter} iterations "
                    f"(mu={mu:.3e}, |F|={f_norm:.3e})"
                )
            z = c.inject(y, x_params)
            jac = assemble_jacobian(problem, z, s, lam, nu)
            delta = None
            fact = KktFactorization(jac, (c.n_free, c.mi, c.me, c.mi))
            try:
                delta = fact.solve(-f_vec)
            except SingularKktError:
                if reg_pattern is None:
                    reg_pattern = _regularization(problem)
                delta_reg = opts.delta_min
                while delta is None:
                    if delta_reg > 1e8:
                        raise SingularKktError(
                            "KKT matrix singular beyond regularization range"
                        )
                    fact = KktFactorization(
                        jac + delta_reg * reg_pattern, (c.n_free, c.mi, c.me, c.mi)
                    )
                    try:
                        delta = fact.solve(-f_vec)
                    except SingularKktError:
                        delta_reg *= 2.0
            n_fact += fact.n_factorizations
            dy, ds, dnu, dlam = fact.split(delta)

            alpha = fraction_to_boundary(s, lam, ds, dlam, opts.tau)
            while True:
                y_n = y + alpha * dy
                s_n = s + alpha * ds
                nu_n = nu + alpha * dnu
                lam_n = lam + alpha * dlam
                f_new = residual(y_n, s_n, lam_n, nu_n, mu)
                f_new_norm = float(np.linalg.norm(f_new, np.inf))
                if f_new_norm <= (1.0 - 1e-4 * alpha) * f_norm:
                    break
                alpha *= 0.5
                if alpha < 1e-12:
                    raise LineSearchError(
                        f"step size underflow at mu={mu:.3e}, |F|={f_norm:.3e}"
                    )
            y, s, nu, lam = y_n, s_n, nu_n, lam_n
            f_vec, f_norm = f_new, f_new_norm
            iters += 1
            # a long run of near-minimal decreases means Newton's direction
            # has stopped making progress on this barrier problem
            stall_count += 1
            if f_norm < 0.5 * stall_ref:
                stall_ref = f_norm
                stall_count = 0
            elif stall_count >= 60:
                raise IterationLimitError(
                    f"stagnation at mu={mu:.3e}, |F|={f_norm:.3e}"
                )
            if opts.verbose:
                print(
                    f"[pdipm] it={iters:3d} mu={mu:9.3e} |F|={f_norm:9.3e} "
                    f"alpha={alpha:8.2e}"
                )

        if opts.mode == "hold":
            if mu <= mu_tilde:
                break
            mu = update_mu(mu, "hold", mu_tilde=mu_tilde)
        else:
            if mu <= opts.eps_mu:
                break
            mu = update_mu(mu, "tol", eps_mu=opts.eps_mu)
        f_vec = residual(y, s, lam, nu, mu)
        f_norm = float(np.linalg.norm(f_vec, np.inf))
        stall_ref = f_norm
        stall_count = 0

    z = c.inject(y, x_params)
    final_fact = KktFactorization(
        assemble_jacobian(problem, z, s, lam, nu), (c.n_free, c.mi, c.me, c.mi)
    )
    return PdipmSolution(
        y=y,
        s=s,
        lam=lam,
        nu=nu,
        mu=mu,
        f_norm=f_norm,
        iterations=iters,
        status="converged",
        fact=final_fact,
        problem=problem,
        x_params=None if x_params is None else x_params.copy(),
        stats={
            "iterations": iters,
            "factorizations": n_fact,
            "final_mu": mu,
            "f_norm": f_norm,
            "wall_s": time.perf_counter() - t0,
        },
    )
