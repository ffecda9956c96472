"""Sparse quadratically-constrained problem construction and evaluation.

Every objective and constraint arising from the rectangular branch-flow
equations is at most quadratic in the real variables, so problems are stored
as collections of :class:`QuadraticForm` with exact gradients and Hessians.
A compiled, vectorized evaluator backs the solver hot path.

Variable layout for a network with ``nb`` buses and ``nl`` branches::

    [V_re (nb) | V_im (nb) | p (nb) | q (nb) | I_re (nl) | I_im (nl)
     | P (nl) | Q (nl) | r (4) | t (4) | x (4)]

where the trailing ``r``/``t`` penalty slacks and ``x`` parameter slots exist
only in subproblems.  Parameter slots enter all constraints linearly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .netmodel import Coupling, Network, StateVars, scale_loads

__all__ = [
    "QuadraticForm",
    "QcqpProblem",
    "BarrierInstance",
    "VarMap",
    "ModelError",
    "build_centralized",
    "build_master",
    "build_subproblem",
    "eval_form",
    "kkt_residual",
]

INF = float("inf")


class ModelError(ValueError):
    """Raised for inconsistent problem construction or evaluation."""


class QuadraticForm:
    """x -> 0.5 x^T A x + b^T x + c with sparse symmetric A.

    Quadratic entries are stored as matrix coefficients ``A[i, j]`` keyed by
    ``(min(i,j), max(i,j))``; :meth:`add_term` accepts monomial coefficients
    and performs the factor-of-two bookkeeping.
    """

    __slots__ = ("n", "quad", "lin", "const")

    def __init__(self, n: int, const: float = 0.0):
        self.n = n
        self.quad: dict[tuple[int, int], float] = {}
        self.lin: dict[int, float] = {}
        self.const = float(const)

    def add_term(self, i: int, j: int, coef: float) -> None:
        """Add ``coef * x_i * x_j`` to the form."""
        key = (i, j) if i <= j else (j, i)
        a = 2.0 * coef if i == j else coef
        self.quad[key] = self.quad.get(key, 0.0) + a

    def add_lin(self, i: int, coef: float) -> None:
        self.lin[i] = self.lin.get(i, 0.0) + coef

    def value(self, x: np.ndarray) -> float:
        v = self.const
        for i, b in self.lin.items():
            v += b * x[i]
        for (i, j), a in self.quad.items():
            v += (0.5 * a * x[i] * x[i]) if i == j else (a * x[i] * x[j])
        return v

    def grad(self, x: np.ndarray) -> np.ndarray:
        g = np.zeros(self.n)
        for i, b in self.lin.items():
            g[i] += b
        for (i, j), a in self.quad.items():
            if i == j:
                g[i] += a * x[i]
            else:
                g[i] += a * x[j]
                g[j] += a * x[i]
        return g

    def hess(self) -> sp.csr_matrix:
        rows, cols, data = [], [], []
        for (i, j), a in self.quad.items():
            rows.append(i)
            cols.append(j)
            data.append(a)
            if i != j:
                rows.append(j)
                cols.append(i)
                data.append(a)
        return sp.csr_matrix((data, (rows, cols)), shape=(self.n, self.n))

    def touches(self, idx: set[int]) -> bool:
        """True if any quadratic entry involves an index from ``idx``."""
        return any(i in idx or j in idx for (i, j) in self.quad)


def eval_form(form: QuadraticForm, x: np.ndarray):
    """Value, gradient, and (constant) Hessian of a quadratic form."""
    x = np.asarray(x, dtype=float)
    if x.shape != (form.n,):
        raise ModelError(f"point has dimension {x.shape}, expected ({form.n},)")
    return form.value(x), form.grad(x), form.hess()


@dataclass
class VarMap:
    """Variable-index bookkeeping mapping solver coordinates to state roles."""

    n: int
    v_re: np.ndarray
    v_im: np.ndarray
    p: np.ndarray
    q: np.ndarray
    i_re: np.ndarray
    i_im: np.ndarray
    fp: np.ndarray
    fq: np.ndarray
    r: np.ndarray | None = None
    t: np.ndarray | None = None
    x: np.ndarray | None = None

    def extract_state(self, z: np.ndarray) -> StateVars:
        return StateVars(
            v_re=z[self.v_re].copy(),
            v_im=z[self.v_im].copy(),
            p=z[self.p].copy(),
            q=z[self.q].copy(),
            i_re=z[self.i_re].copy(),
            i_im=z[self.i_im].copy(),
            fp=z[self.fp].copy(),
            fq=z[self.fq].copy(),
        )


class _Stack:
    """Vectorized evaluator for a stack of quadratic forms."""

    def __init__(self, forms: list[QuadraticForm], n: int, free_pos: np.ndarray):
        m = len(forms)
        self.m = m
        self.const = np.array([f.const for f in forms]) if m else np.zeros(0)
        lr, lc, ld = [], [], []
        qr, qi, qj, qa = [], [], [], []
        for k, f in enumerate(forms):
            for i, b in f.lin.items():
                lr.append(k)
                lc.append(i)
                ld.append(b)
            for (i, j), a in f.quad.items():
                qr.append(k)
                qi.append(i)
                qj.append(j)
                qa.append(a)
        self.lin = sp.csr_matrix((ld, (lr, lc)), shape=(m, n))
        self.qr = np.array(qr, dtype=np.int64)
        self.qi = np.array(qi, dtype=np.int64)
        self.qj = np.array(qj, dtype=np.int64)
        self.qa = np.array(qa, dtype=float)
        self.qw = np.where(self.qi == self.qj, 0.5, 1.0) * self.qa
        # Jacobian triplets: d/dz_i gets qa*z_j, and for off-diagonal entries
        # d/dz_j gets qa*z_i.
        off = self.qi != self.qj
        self.jac_rows = np.concatenate([self.qr, self.qr[off]])
        jac_cols = np.concatenate([self.qi, self.qj[off]])
        self.jac_mul = np.concatenate([self.qj, self.qi[off]])
        self.jac_coef = np.concatenate([self.qa, self.qa[off]])
        self.jac_cols_free = free_pos[jac_cols]
        if np.any(self.jac_cols_free < 0):
            raise ModelError("quadratic term involves a parameter slot")
        self.lin_free = None  # filled by CompiledQcqp

    def values(self, z: np.ndarray) -> np.ndarray:
        out = self.const + self.lin @ z
        if len(self.qr):
            out = out + np.bincount(
                self.qr, weights=self.qw * z[self.qi] * z[self.qj], minlength=self.m
            )
        return out

    def jac_free(self, z: np.ndarray, n_free: int) -> sp.csr_matrix:
        j = sp.csr_matrix(
            (self.jac_coef * z[self.jac_mul], (self.jac_rows, self.jac_cols_free)),
            shape=(self.m, n_free),
        )
        return self.lin_free + j


class CompiledQcqp:
    """Flattened arrays and sparse blocks for fast repeated evaluation."""

    def __init__(self, problem: "QcqpProblem"):
        n = problem.n
        self.n = n
        self.param_idx = np.asarray(problem.param_idx, dtype=np.int64)
        mask = np.ones(n, dtype=bool)
        mask[self.param_idx] = False
        self.free_idx = np.nonzero(mask)[0]
        self.n_free = len(self.free_idx)
        free_pos = -np.ones(n, dtype=np.int64)
        free_pos[self.free_idx] = np.arange(self.n_free)
        self.free_pos = free_pos

        self.eq = _Stack(problem.eq, n, free_pos)
        self.ineq = _Stack(problem.ineq, n, free_pos)
        self.me = self.eq.m
        self.mi = self.ineq.m
        for stack in (self.eq, self.ineq):
            stack.lin_free = stack.lin[:, self.free_idx].tocsr()
        self.dfdx_eq = sp.csr_matrix(self.eq.lin[:, self.param_idx])
        self.dfdx_ineq = sp.csr_matrix(self.ineq.lin[:, self.param_idx])

        obj = problem.objective
        pset = set(self.param_idx.tolist())
        if obj.touches(pset) or any(i in pset for i in obj.lin):
            raise ModelError("objective must not involve parameter slots")
        self.obj = _Stack([obj], n, free_pos)
        self.obj.lin_free = self.obj.lin[:, self.free_idx].tocsr()

        # Lagrangian Hessian triplets over free coordinates, tagged by the
        # weight slot: 0 = objective, 1..me = equalities, me+1.. = inequalities.
        hr, hc, ha, hw = [], [], [], []
        for widx, forms in (
            (0, [obj]),
            (1, problem.eq),
            (1 + self.me, problem.ineq),
        ):
            for k, f in enumerate(forms):
                for (i, j), a in f.quad.items():
                    fi, fj = free_pos[i], free_pos[j]
                    hr.append(fi)
                    hc.append(fj)
                    ha.append(a)
                    hw.append(widx + k if widx else 0)
                    if i != j:
                        hr.append(fj)
                        hc.append(fi)
                        ha.append(a)
                        hw.append(widx + k if widx else 0)
        self.hess_rows = np.array(hr, dtype=np.int64)
        self.hess_cols = np.array(hc, dtype=np.int64)
        self.hess_data = np.array(ha, dtype=float)
        self.hess_widx = np.array(hw, dtype=np.int64)

    def inject(self, y: np.ndarray, x_params: np.ndarray | None) -> np.ndarray:
        z = np.zeros(self.n)
        z[self.free_idx] = y
        if len(self.param_idx):
            if x_params is None:
                raise ModelError("problem has parameter slots but no values given")
            z[self.param_idx] = x_params
        return z

    def obj_value(self, z: np.ndarray) -> float:
        return float(self.obj.values(z)[0])

    def obj_grad_free(self, z: np.ndarray) -> np.ndarray:
        return np.asarray(self.obj.jac_free(z, self.n_free).todense()).ravel()

    def eq_values(self, z: np.ndarray) -> np.ndarray:
        return self.eq.values(z)

    def ineq_values(self, z: np.ndarray) -> np.ndarray:
        return self.ineq.values(z)

    def eq_jac(self, z: np.ndarray) -> sp.csr_matrix:
        return self.eq.jac_free(z, self.n_free)

    def ineq_jac(self, z: np.ndarray) -> sp.csr_matrix:
        return self.ineq.jac_free(z, self.n_free)

    def lag_hess(self, nu: np.ndarray, lam: np.ndarray, obj_weight: float = 1.0):
        w = np.concatenate([[obj_weight], nu, lam])
        return sp.csr_matrix(
            (self.hess_data * w[self.hess_widx], (self.hess_rows, self.hess_cols)),
            shape=(self.n_free, self.n_free),
        )


@dataclass
class QcqpProblem:
    """An NLP whose objective and constraints are at most quadratic.

    ``eq`` forms are constrained to zero, ``ineq`` forms to be nonpositive.
    ``param_idx`` marks coordinates treated as fixed parameters; they may
    appear only linearly.  ``meta`` carries builder annotations such as the
    coupling-row positions of subproblems.
    """

    n: int
    objective: QuadraticForm
    eq: list[QuadraticForm]
    ineq: list[QuadraticForm]
    varmap: VarMap | None = None
    param_idx: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    meta: dict = field(default_factory=dict)
    _compiled: CompiledQcqp | None = field(default=None, repr=False, compare=False)

    @property
    def compiled(self) -> CompiledQcqp:
        if self._compiled is None:
            self._compiled = CompiledQcqp(self)
        return self._compiled

    @property
    def n_free(self) -> int:
        return self.compiled.n_free


@dataclass
class BarrierInstance:
    """A problem in slack/barrier form at weight ``mu``.

    The inequality block ``h(y) <= 0`` is read as ``h(y) + s = 0`` with
    ``s > 0`` and objective contribution ``-mu * sum(log s)``.
    """

    base: QcqpProblem
    mu: float

    def __post_init__(self):
        if not self.mu > 0:
            raise ModelError("barrier weight must be positive")

    @property
    def m(self) -> int:
        return self.base.compiled.mi

    def objective_value(self, z: np.ndarray, s: np.ndarray) -> float:
        if np.any(s <= 0):
            raise ModelError("slacks must be strictly positive")
        return self.base.compiled.obj_value(z) - self.mu * float(np.sum(np.log(s)))


def kkt_residual(
    inst: BarrierInstance,
    y: np.ndarray,
    s: np.ndarray,
    lam: np.ndarray,
    nu: np.ndarray,
    x_params: np.ndarray | None = None,
    mu: float | None = None,
) -> np.ndarray:
    """Primal-dual optimality residual, in fixed row order.

    Rows: stationarity over the free variables, equality values, inequality
    values plus slacks, and the complementarity products ``s * lam - mu``.
    """
    if np.any(s <= 0):
        raise ModelError("slacks must be strictly positive")
    c = inst.base.compiled
    if mu is None:
        mu = inst.mu
    z = c.inject(y, x_params)
    stat = c.obj_grad_free(z)
    if c.me:
        stat = stat + c.eq_jac(z).T @ nu
    if c.mi:
        stat = stat + c.ineq_jac(z).T @ lam
    return np.concatenate(
        [stat, c.eq_values(z), c.ineq_values(z) + s, s * lam - mu]
    )


# ---------------------------------------------------------------------------
# Problem builders
# ---------------------------------------------------------------------------


def _varmap(nb: int, nl: int, with_penalty: bool) -> VarMap:
    base = 4 * nb + 4 * nl
    extra = 12 if with_penalty else 0
    idx = lambda k0, cnt: np.arange(k0, k0 + cnt, dtype=np.int64)
    vm = VarMap(
        n=base + extra,
        v_re=idx(0, nb),
        v_im=idx(nb, nb),
        p=idx(2 * nb, nb),
        q=idx(3 * nb, nb),
        i_re=idx(4 * nb, nl),
        i_im=idx(4 * nb + nl, nl),
        fp=idx(4 * nb + 2 * nl, nl),
        fq=idx(4 * nb + 3 * nl, nl),
    )
    if with_penalty:
        vm.r = idx(base, 4)
        vm.t = idx(base + 4, 4)
        vm.x = idx(base + 8, 4)
    return vm


def _flow_equalities(net: Network, vm: VarMap) -> list[QuadraticForm]:
    """Current-definition, power-definition, and balance rows, branch-major."""
    n = vm.n
    eq: list[QuadraticForm] = []
    for k, br in enumerate(net.branches):
        i = net.bus_pos(br.from_bus)
        j = net.bus_pos(br.to_bus)
        g, b = br.y.real, br.y.imag
        # I_re = g (Vre_i - Vre_j) - b (Vim_i - Vim_j)
        f = QuadraticForm(n)
        f.add_lin(vm.i_re[k], 1.0)
        f.add_lin(vm.v_re[i], -g)
        f.add_lin(vm.v_re[j], g)
        f.add_lin(vm.v_im[i], b)
        f.add_lin(vm.v_im[j], -b)
        eq.append(f)
        # I_im = b (Vre_i - Vre_j) + g (Vim_i - Vim_j)
        f = QuadraticForm(n)
        f.add_lin(vm.i_im[k], 1.0)
        f.add_lin(vm.v_re[i], -b)
        f.add_lin(vm.v_re[j], b)
        f.add_lin(vm.v_im[i], -g)
        f.add_lin(vm.v_im[j], g)
        eq.append(f)
    for k, br in enumerate(net.branches):
        i = net.bus_pos(br.from_bus)
        # P = Vre_i I_re + Vim_i I_im
        f = QuadraticForm(n)
        f.add_lin(vm.fp[k], 1.0)
        f.add_term(vm.v_re[i], vm.i_re[k], -1.0)
        f.add_term(vm.v_im[i], vm.i_im[k], -1.0)
        eq.append(f)
        # Q = Vim_i I_re - Vre_i I_im
        f = QuadraticForm(n)
        f.add_lin(vm.fq[k], 1.0)
        f.add_term(vm.v_im[i], vm.i_re[k], -1.0)
        f.add_term(vm.v_re[i], vm.i_im[k], 1.0)
        eq.append(f)
    for pos in range(net.n_bus):
        fp_row = QuadraticForm(n)
        fq_row = QuadraticForm(n)
        fp_row.add_lin(vm.p[pos], 1.0)
        fq_row.add_lin(vm.q[pos], 1.0)
        eq.append(fp_row)
        eq.append(fq_row)
    # balance: p_j - sum_out P + sum_in P - sum_in r |I|^2 = 0 (q analogous)
    row0 = len(eq) - 2 * net.n_bus
    for k, br in enumerate(net.branches):
        i = net.bus_pos(br.from_bus)
        j = net.bus_pos(br.to_bus)
        eq[row0 + 2 * i].add_lin(vm.fp[k], -1.0)
        eq[row0 + 2 * i + 1].add_lin(vm.fq[k], -1.0)
        eq[row0 + 2 * j].add_lin(vm.fp[k], 1.0)
        eq[row0 + 2 * j + 1].add_lin(vm.fq[k], 1.0)
        for iv in (vm.i_re[k], vm.i_im[k]):
            eq[row0 + 2 * j].add_term(iv, iv, -br.z.real)
            eq[row0 + 2 * j + 1].add_term(iv, iv, -br.z.imag)
    return eq


def _gen_cost_form(n: int, vm: VarMap, pos: int, bus) -> QuadraticForm | None:
    """Quadratic cost of active generation p + Re(load), expanded in p."""
    if bus.gen_cost is None:
        return None
    c2, c1, c0 = bus.gen_cost
    pd = bus.load.real
    f = QuadraticForm(n, const=c2 * pd * pd + c1 * pd + c0)
    f.add_lin(vm.p[pos], 2.0 * c2 * pd + c1)
    f.add_term(vm.p[pos], vm.p[pos], c2)
    return f


def _merge_into(target: QuadraticForm, extra: QuadraticForm) -> None:
    target.const += extra.const
    for i, b in extra.lin.items():
        target.add_lin(i, b)
    for (i, j), a in extra.quad.items():
        key = (i, j)
        target.quad[key] = target.quad.get(key, 0.0) + a


def _bound_rows(
    net: Network, vm: VarMap, skip_injection: set[int], pinned_slack: bool = False
) -> tuple[list[QuadraticForm], list[QuadraticForm]]:
    """Voltage and injection bound rows; tight injection bounds become
    equalities.  Returns (extra equalities, inequalities).

    A slack bus with ``v_min == v_max`` is pinned linearly elsewhere
    (``pinned_slack``), so its quadratic voltage rows are skipped here.
    """
    n = vm.n
    eq: list[QuadraticForm] = []
    ineq: list[QuadraticForm] = []
    for pos, bus in enumerate(net.buses):
        if pinned_slack and bus.id == net.slack_bus and bus.v_min == bus.v_max:
            continue
        lo = QuadraticForm(n, const=bus.v_min)
        lo.add_term(vm.v_re[pos], vm.v_re[pos], -1.0)
        lo.add_term(vm.v_im[pos], vm.v_im[pos], -1.0)
        hi = QuadraticForm(n, const=-bus.v_max)
        hi.add_term(vm.v_re[pos], vm.v_re[pos], 1.0)
        hi.add_term(vm.v_im[pos], vm.v_im[pos], 1.0)
        if bus.v_min == bus.v_max:
            eq.append(hi)
        else:
            ineq.append(lo)
            ineq.append(hi)
    for pos, bus in enumerate(net.buses):
        if bus.id in skip_injection:
            continue
        for var, lo_v, hi_v in (
            (vm.p[pos], bus.s_min.real, bus.s_max.real),
            (vm.q[pos], bus.s_min.imag, bus.s_max.imag),
        ):
            if lo_v == hi_v:
                f = QuadraticForm(n, const=-lo_v)
                f.add_lin(var, 1.0)
                eq.append(f)
                continue
            if lo_v > -INF:
                f = QuadraticForm(n, const=lo_v)
                f.add_lin(var, -1.0)
                ineq.append(f)
            if hi_v < INF:
                f = QuadraticForm(n, const=-hi_v)
                f.add_lin(var, 1.0)
                ineq.append(f)
    return eq, ineq


def _build_network_problem(
    net: Network,
    skip_injection: set[int],
    skip_cost: set[int],
    line_loss_weight: float,
    slack_rows: bool,
) -> QcqpProblem:
    vm = _varmap(net.n_bus, net.n_branch, with_penalty=False)
    n = vm.n
    spos = net.bus_pos(net.slack_bus)
    slack_bus = net.buses[spos]
    pinned = slack_rows and slack_bus.v_min == slack_bus.v_max
    eq: list[QuadraticForm] = []
    if slack_rows:
        f = QuadraticForm(n)
        f.add_lin(vm.v_im[spos], 1.0)
        eq.append(f)
        if pinned:
            # fixed reference magnitude: V_re = sqrt(v), linear
            f = QuadraticForm(n, const=-math.sqrt(slack_bus.v_min))
            f.add_lin(vm.v_re[spos], 1.0)
            eq.append(f)
    eq.extend(_flow_equalities(net, vm))
    tight_eq, ineq = _bound_rows(net, vm, skip_injection, pinned_slack=pinned)
    eq.extend(tight_eq)
    if slack_rows and not pinned:
        # pin the positive voltage branch at the reference bus
        f = QuadraticForm(n, const=math.sqrt(slack_bus.v_min))
        f.add_lin(vm.v_re[spos], -1.0)
        ineq.append(f)
    obj = QuadraticForm(n)
    for pos, bus in enumerate(net.buses):
        if bus.id in skip_cost:
            continue
        cost = _gen_cost_form(n, vm, pos, bus)
        if cost is not None:
            _merge_into(obj, cost)
    if line_loss_weight:
        for k, br in enumerate(net.branches):
            for iv in (vm.i_re[k], vm.i_im[k]):
                obj.add_term(iv, iv, line_loss_weight * br.z.real)
    return QcqpProblem(n=n, objective=obj, eq=eq, ineq=ineq, varmap=vm)


def build_centralized(net: Network, line_loss_weight: float = 0.0) -> QcqpProblem:
    """Full AC optimal power flow problem for one network.

    Equality rows in order: reference-angle fix, branch current definitions,
    branch power definitions, bus balances, tight injection pins.  Inequality
    rows: voltage bounds, injection bounds, reference positive-voltage pin.
    """
    return _build_network_problem(
        net,
        skip_injection=set(),
        skip_cost=set(),
        line_loss_weight=line_loss_weight,
        slack_rows=True,
    )


def build_master(
    net: Network, coupling_buses: list[int], line_loss_weight: float = 0.0
) -> QcqpProblem:
    """Master-network problem: the centralized rows minus injection bounds
    and generation cost at coupling buses, whose injections become the
    quantities communicated to the subnetworks."""
    skip = set(coupling_buses)
    prob = _build_network_problem(
        net,
        skip_injection=skip,
        skip_cost=skip,
        line_loss_weight=line_loss_weight,
        slack_rows=True,
    )
    vm = prob.varmap
    prob.meta["coupling_vars"] = {
        b: np.array(
            [vm.v_re[net.bus_pos(b)], vm.v_im[net.bus_pos(b)],
             vm.p[net.bus_pos(b)], vm.q[net.bus_pos(b)]],
            dtype=np.int64,
        )
        for b in coupling_buses
    }
    return prob


def build_subproblem(
    sub: Network,
    coupling: Coupling,
    eta: float,
    xi: dict[int, float] | None = None,
) -> QcqpProblem:
    """Penalty-form subnetwork problem parameterized by the coupling vector.

    The coupling bus voltage and injection are tied to the four parameter
    slots through ``r - t`` slack splits penalized at weight ``eta``, so the
    problem stays feasible for any requested coupling values.  ``xi`` scales
    the subnetwork loads per bus id.
    """
    if not eta >= 0:
        raise ModelError("penalty weight must be nonnegative")
    if xi:
        sub = scale_loads(sub, xi)
    root = coupling.sub_bus
    vm = _varmap(sub.n_bus, sub.n_branch, with_penalty=True)
    n = vm.n
    eq = _flow_equalities(sub, vm)
    tight_eq, ineq = _bound_rows(sub, vm, skip_injection={root})
    eq.extend(tight_eq)
    rpos = sub.bus_pos(root)
    coupling_rows = []
    # rows: V_re - x1, V_im - x2, p + x3, q + x4, each minus r + t
    for comp, (var, sign) in enumerate(
        [(vm.v_re[rpos], -1.0), (vm.v_im[rpos], -1.0),
         (vm.p[rpos], 1.0), (vm.q[rpos], 1.0)]
    ):
        f = QuadraticForm(n)
        f.add_lin(var, 1.0)
        f.add_lin(vm.x[comp], sign)
        f.add_lin(vm.r[comp], -1.0)
        f.add_lin(vm.t[comp], 1.0)
        coupling_rows.append(len(eq))
        eq.append(f)
    for comp in range(4):
        for var in (vm.r[comp], vm.t[comp]):
            f = QuadraticForm(n)
            f.add_lin(var, -1.0)
            ineq.append(f)
    obj = QuadraticForm(n)
    for pos, bus in enumerate(sub.buses):
        if bus.id == root:
            continue
        cost = _gen_cost_form(n, vm, pos, bus)
        if cost is not None:
            _merge_into(obj, cost)
    for comp in range(4):
        obj.add_lin(vm.r[comp], eta)
        obj.add_lin(vm.t[comp], eta)
    prob = QcqpProblem(
        n=n,
        objective=obj,
        eq=eq,
        ineq=ineq,
        varmap=vm,
        param_idx=vm.x.copy(),
    )
    prob.meta["coupling_rows"] = np.array(coupling_rows, dtype=np.int64)
    prob.meta["coupling_bus"] = root
    prob.meta["eta"] = eta
    return prob


def flat_primal(problem: QcqpProblem) -> np.ndarray:
    """Flat-profile starting point: unit voltage, everything else zero."""
    y = np.zeros(problem.n_free)
    vm = problem.varmap
    if vm is not None:
        pos = problem.compiled.free_pos
        y[pos[vm.v_re]] = 1.0
    return y
