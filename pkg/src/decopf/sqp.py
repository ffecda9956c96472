"""Sequential quadratic programming with an l1 merit line search.

Solves problems of the form

    min  f_q(x) + phi(x)     s.t.  g(x) = 0,  h(x) <= 0

where ``f_q``, ``g``, ``h`` come from a quadratic problem description and
``phi`` is an optional black-box objective extension supplying exact value,
gradient, and Hessian (the second-stage oracle in the decomposed setting, or
any smooth test function).  Each iteration solves a QP with the exact
Lagrangian Hessian (convexified by a Levenberg shift when necessary) through
the interior-point machinery, then backtracks on the l1 merit.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import pdipm
from .nlp import QcqpProblem, QuadraticForm

__all__ = [
    "SqpOptions",
    "SqpTrace",
    "SqpResult",
    "NlpModel",
    "SqpError",
    "sqp_solve",
    "qp_step",
    "l1_merit",
]


class SqpError(RuntimeError):
    pass


@dataclass
class SqpOptions:
    tol: float = 1e-6
    max_iter: int = 50
    rho_min: float = 1.0
    shift_min: float = 1e-8
    shift_max: float = 1e8
    alpha_min: float = 1e-10
    qp_eps_mu: float = 1e-10
    verbose: int = 0


@dataclass
class SqpTrace:
    """Append-only per-iteration record of the master solve."""

    rows: list[dict] = field(default_factory=list)

    def append(self, **kw) -> None:
        self.rows.append(dict(kw))

    @property
    def iterations(self) -> int:
        return len(self.rows)


@dataclass
class SqpResult:
    x: np.ndarray
    nu: np.ndarray
    lam: np.ndarray
    objective: float
    kkt_residual: float
    iterations: int
    fevals: int
    trace: SqpTrace
    status: str


class NlpModel:
    """QCQP constraints/objective plus an optional objective extension.

    The extension must provide ``evaluate(x, order) -> (value, grad, blocks)``
    where ``grad`` is a full-length vector (order >= 1) and ``blocks`` is a
    list of ``(indices, dense_hessian)`` contributions (order >= 2).
    """

    def __init__(self, problem: QcqpProblem, extension=None):
        if len(problem.param_idx):
            raise SqpError("master problems cannot carry parameter slots")
        self.problem = problem
        self.extension = extension
        self.fevals = 0

    @property
    def n(self) -> int:
        return self.problem.n

    def evaluate(self, x: np.ndarray):
        c = self.problem.compiled
        out = {
            "x": x.copy(),
            "f": c.obj_value(x),
            "grad": c.obj_grad_free(x),
            "g": c.eq_values(x),
            "h": c.ineq_values(x),
            "jeq": c.eq_jac(x),
            "jineq": c.ineq_jac(x),
            "blocks": [],
        }
        if self.extension is not None:
            val, grad, blocks = self.extension.evaluate(x, order=2)
            self.fevals += 1
            out["f"] += val
            out["grad"] = out["grad"] + grad
            out["blocks"] = blocks
        return out

    def lag_hess(self, ev, nu: np.ndarray, lam: np.ndarray) -> sp.csr_matrix:
        h = self.problem.compiled.lag_hess(nu, lam)
        if ev["blocks"]:
            rows, cols, data = [], [], []
            for idx, dense in ev["blocks"]:
                for a, ia in enumerate(idx):
                    for b, jb in enumerate(idx):
                        rows.append(ia)
                        cols.append(jb)
                        data.append(dense[a, b])
            h = h + sp.csr_matrix((data, (rows, cols)), shape=h.shape)
        return h


def l1_merit(
    f: float, g: np.ndarray, h: np.ndarray, rho: float
) -> float:
    """Objective plus rho times the l1 norm of constraint violations."""
    viol = 0.0
    if len(g):
        viol += float(np.sum(np.abs(g)))
    if len(h):
        viol += float(np.sum(np.maximum(h, 0.0)))
    return f + rho * viol


def _violation(g: np.ndarray, h: np.ndarray) -> float:
    v = 0.0
    if len(g):
        v += float(np.sum(np.abs(g)))
    if len(h):
        v += float(np.sum(np.maximum(h, 0.0)))
    return v


def _qp_problem(
    hess: sp.spmatrix,
    grad: np.ndarray,
    jeq: sp.spmatrix,
    geq: np.ndarray,
    jineq: sp.spmatrix,
    hval: np.ndarray,
) -> QcqpProblem:
    n = len(grad)
    obj = QuadraticForm(n)
    hcoo = sp.coo_matrix(hess)
    seen = set()
    for i, j, a in zip(hcoo.row, hcoo.col, hcoo.data):
        if i > j:
            continue
        key = (int(i), int(j))
        if key in seen:
            obj.quad[key] += a
        else:
            obj.quad[key] = float(a)
            seen.add(key)
    for i, b in enumerate(grad):
        if b:
            obj.add_lin(i, float(b))

    def rows(jac, vals):
        jac = sp.csr_matrix(jac)
        out = []
        for k in range(jac.shape[0]):
            f = QuadraticForm(n, const=float(vals[k]))
            sl = slice(jac.indptr[k], jac.indptr[k + 1])
            for col, coef in zip(jac.indices[sl], jac.data[sl]):
                f.add_lin(int(col), float(coef))
            out.append(f)
        return out

    return QcqpProblem(
        n=n,
        objective=obj,
        eq=rows(jeq, geq) if geq is not None and len(geq) else [],
        ineq=rows(jineq, hval) if hval is not None and len(hval) else [],
    )


def qp_step(
    hess: sp.spmatrix,
    grad: np.ndarray,
    jeq: sp.spmatrix,
    geq: np.ndarray,
    jineq: sp.spmatrix,
    hval: np.ndarray,
    opts: SqpOptions | None = None,
):
    """Solve the SQP quadratic subproblem; returns (step, nu, lam, info).

    On an infeasible linearization the equalities are relaxed elastically
    with a large penalty and the relaxation is flagged in ``info``.
    """
    opts = opts or SqpOptions()
    qp = _qp_problem(hess, grad, jeq, geq, jineq, hval)
    qp_opts = pdipm.PdipmOptions(
        mode="tol", eps_mu=opts.qp_eps_mu, max_iter=300
    )
    try:
        sol = pdipm.solve(qp, opts=qp_opts)
        return sol.y, sol.nu, sol.lam, {"elastic": False}
    except pdipm.PdipmError:
        pass
    # elastic relaxation: g + J d = u - v with u, v >= 0 heavily penalized
    n = len(grad)
    me = len(geq)
    big = 1e4 * (1.0 + float(np.max(np.abs(grad), initial=0.0)))
    ne = n + 2 * me
    obj = QuadraticForm(ne)
    hcoo = sp.coo_matrix(hess)
    for i, j, a in zip(hcoo.row, hcoo.col, hcoo.data):
        if i <= j:
            key = (int(i), int(j))
            obj.quad[key] = obj.quad.get(key, 0.0) + float(a)
    for i, b in enumerate(grad):
        if b:
            obj.add_lin(i, float(b))
    for k in range(2 * me):
        obj.add_lin(n + k, big)
    eq_forms = []
    jeq = sp.csr_matrix(jeq)
    for k in range(me):
        f = QuadraticForm(ne, const=float(geq[k]))
        sl = slice(jeq.indptr[k], jeq.indptr[k + 1])
        for col, coef in zip(jeq.indices[sl], jeq.data[sl]):
            f.add_lin(int(col), float(coef))
        f.add_lin(n + k, -1.0)
        f.add_lin(n + me + k, 1.0)
        eq_forms.append(f)
    ineq_forms = []
    jineq = sp.csr_matrix(jineq)
    for k in range(jineq.shape[0]):
        f = QuadraticForm(ne, const=float(hval[k]))
        sl = slice(jineq.indptr[k], jineq.indptr[k + 1])
        for col, coef in zip(jineq.indices[sl], jineq.data[sl]):
            f.add_lin(int(col), float(coef))
        ineq_forms.append(f)
    for k in range(2 * me):
        f = QuadraticForm(ne)
        f.add_lin(n + k, -1.0)
        ineq_forms.append(f)
    qp2 = QcqpProblem(n=ne, objective=obj, eq=eq_forms, ineq=ineq_forms)
    sol = pdipm.solve(qp2, opts=pdipm.PdipmOptions(mode="tol", eps_mu=opts.qp_eps_mu, max_iter=300))
    lam = sol.lam[: jineq.shape[0]] if jineq.shape[0] else sol.lam[:0]
    return sol.y[:n], sol.nu, lam, {"elastic": True}


def _soc_correction(jeq: sp.spmatrix, g_trial: np.ndarray) -> np.ndarray | None:
    """Minimum-norm step restoring the linearized equalities at a trial point."""
    jeq = sp.csr_matrix(jeq)
    jjt = (jeq @ jeq.T).tocsc()
    try:
        w = spla.splu(jjt).solve(-g_trial)
    except RuntimeError:
        return None
    dc = jeq.T @ w
    return dc if np.all(np.isfinite(dc)) else None


def kkt_residual_nlp(ev, nu: np.ndarray, lam: np.ndarray) -> float:
    """Max-norm KKT residual of the constrained model at an evaluated point."""
    stat = ev["grad"].copy()
    if len(nu):
        stat = stat + ev["jeq"].T @ nu
    if len(lam):
        stat = stat + ev["jineq"].T @ lam
    parts = [np.max(np.abs(stat), initial=0.0)]
    if len(ev["g"]):
        parts.append(np.max(np.abs(ev["g"]), initial=0.0))
    if len(ev["h"]):
        parts.append(np.max(np.maximum(ev["h"], 0.0), initial=0.0))
        parts.append(np.max(np.abs(lam * ev["h"]), initial=0.0))
    return float(max(parts))


def sqp_solve(
    model: NlpModel,
    start: np.ndarray,
    opts: SqpOptions | None = None,
    warm_multipliers: tuple[np.ndarray, np.ndarray] | None = None,
) -> SqpResult:
    """Run the SQP iteration from ``start`` to the KKT tolerance."""
    opts = opts or SqpOptions()
    c = model.problem.compiled
    x = np.asarray(start, dtype=float).copy()
    if warm_multipliers is not None:
        nu, lam = (v.copy() for v in warm_multipliers)
    else:
        nu = np.zeros(c.me)
        lam = np.zeros(c.mi)
    rho = opts.rho_min
    trace = SqpTrace()
    fevals0 = model.fevals
    ev = model.evaluate(x)
    t0 = time.perf_counter()
    status = "max_iter"

    for _ in range(opts.max_iter):
        res = kkt_residual_nlp(ev, nu, lam)
        if res <= opts.tol:
            status = "converged"
            break

        shift = 0.0
        while True:
            d = None
            hess = model.lag_hess(ev, nu, lam)
            if shift:
                hess = hess + shift * sp.identity(model.n, format="csr")
            try:
                d, nu_qp, lam_qp, info = qp_step(
                    hess, ev["grad"], ev["jeq"], ev["g"], ev["jineq"], ev["h"], opts
                )
            except pdipm.PdipmError:
                info = {}
            if d is not None:
                mult_norm = max(
                    float(np.max(np.abs(nu_qp), initial=0.0)),
                    float(np.max(np.abs(lam_qp), initial=0.0)),
                )
                rho = max(rho, 2.0 * mult_norm, opts.rho_min)
                dderiv = float(ev["grad"] @ d) - rho * _violation(ev["g"], ev["h"])
                small = np.linalg.norm(d) <= 1e-11 * (1.0 + np.linalg.norm(x))
                if small or dderiv < -1e-14 * (1.0 + abs(ev["f"])):
                    break
            shift = opts.shift_min if shift == 0.0 else 2.0 * shift
            if shift > opts.shift_max:
                raise SqpError("no descent direction within shift range")

        if np.linalg.norm(d) <= 1e-11 * (1.0 + np.linalg.norm(x)):
            # stationary for the merit; accept multipliers and re-test
            nu, lam = nu_qp, lam_qp
            res = kkt_residual_nlp(ev, nu, lam)
            trace.append(
                objective=ev["f"], kkt=res, step_norm=0.0, alpha=0.0,
                fevals=model.fevals - fevals0, elastic=info.get("elastic", False),
            )
            if res <= opts.tol:
                status = "converged"
                break
            raise SqpError("zero step but KKT residual above tolerance")

        merit0 = l1_merit(ev["f"], ev["g"], ev["h"], rho)
        alpha = 1.0
        step = d
        soc_tried = False
        while True:
            ev_trial = model.evaluate(x + alpha * step)
            merit_t = l1_merit(ev_trial["f"], ev_trial["g"], ev_trial["h"], rho)
            if merit_t <= merit0 + 1e-4 * alpha * dderiv:
                break
            if alpha == 1.0 and not soc_tried and len(ev["g"]):
                # second-order correction: the unit step often lowers the
                # objective while the quadratic equalities curve away from
                # their linearization; correct back onto the manifold once
                soc_tried = True
                dc = _soc_correction(ev["jeq"], ev_trial["g"])
                if dc is not None and np.linalg.norm(dc) <= np.linalg.norm(d):
                    ev_soc = model.evaluate(x + d + dc)
                    merit_soc = l1_merit(ev_soc["f"], ev_soc["g"], ev_soc["h"], rho)
                    if merit_soc <= merit0 + 1e-4 * dderiv:
                        ev_trial = ev_soc
                        step = d + dc
                        break
            alpha *= 0.5
            if alpha < opts.alpha_min:
                raise SqpError("merit line search failed")
        x = x + alpha * step
        nu, lam = nu_qp, lam_qp
        ev = ev_trial
        trace.append(
            objective=ev["f"],
            kkt=res,
            step_norm=float(np.linalg.norm(d)),
            alpha=alpha,
            fevals=model.fevals - fevals0,
            elastic=info.get("elastic", False),
        )
        if opts.verbose:
            print(
                f"[sqp] it={trace.iterations:3d} f={ev['f']:.8e} "
                f"kkt={res:9.3e} |d|={np.linalg.norm(d):9.3e} alpha={alpha:6.3f}"
            )

    res = kkt_residual_nlp(ev, nu, lam)
    if status != "converged" and res <= opts.tol:
        status = "converged"
    if status != "converged":
        raise SqpError(
            f"SQP did not converge in {opts.max_iter} iterations (kkt={res:.3e})"
        )
    return SqpResult(
        x=x,
        nu=nu,
        lam=lam,
        objective=ev["f"],
        kkt_residual=res,
        iterations=trace.iterations,
        fevals=model.fevals - fevals0,
        trace=trace,
        status=status,
    )
