"""Two-stage coordination between a master network and its subnetworks.

The master problem carries the master network's flow physics and bounds
(injection bounds released at coupling buses) plus a black-box objective
term: the scenario-averaged smoothed optimal value of every subnetwork as a
function of the four coupling quantities per subnetwork.  Each smoothing
weight in the schedule yields one master solve, warm-started from the
previous one; subproblem solves are warm-started from their own last
solution and may run on a thread pool.  All reductions run in a fixed
(subnetwork, scenario) order so results do not depend on the worker count.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import nlp, pdipm, sensitivity, sqp
from .netmodel import Decomposition, StateVars

__all__ = [
    "CouplingVector",
    "MuSchedule",
    "TwoStageOptions",
    "SecondStageOracle",
    "SecondStageError",
    "StageReport",
    "TwoStageResult",
    "assemble_master",
    "evaluate_second_stage",
    "run",
    "verify_recomposition",
]

DEFAULT_SCHEDULE = (1e-2, 1e-3, 1e-6)


@dataclass(frozen=True)
class CouplingVector:
    """The four quantities communicated to one subnetwork: coupling-bus
    voltage (rectangular) and net master-side injection."""

    v_re: float
    v_im: float
    p: float
    q: float

    def as_array(self) -> np.ndarray:
        return np.array([self.v_re, self.v_im, self.p, self.q])


@dataclass(frozen=True)
class MuSchedule:
    """Strictly decreasing positive smoothing weights; the last entry is the
    tightest smoothing the run reaches."""

    weights: tuple[float, ...] = DEFAULT_SCHEDULE

    def __post_init__(self):
        w = self.weights
        if not w or any(v <= 0 for v in w) or any(
            w[k + 1] >= w[k] for k in range(len(w) - 1)
        ):
            raise ValueError("schedule must be strictly decreasing and positive")

    def __iter__(self):
        return iter(self.weights)


@dataclass
class TwoStageOptions:
    eta: float = 9.0
    master_tol: float = 1e-6
    sub_eps: float = 1e-12
    workers: int = 1
    max_master_iter: int = 50
    max_sub_iter: int = 400
    verbose: int = 0


class SecondStageError(RuntimeError):
    def __init__(self, subnet: int, scenario: int, cause: Exception):
        super().__init__(
            f"subproblem (subnet={subnet}, scenario={scenario}) failed: {cause}"
        )
        self.subnet = subnet
        self.scenario = scenario
        self.cause = cause


class _SubTask:
    """Problem object and warm-start cache for one (subnetwork, scenario)."""

    __slots__ = ("problem", "solution", "solved_before")

    def __init__(self, problem: nlp.QcqpProblem):
        self.problem = problem
        self.solution: pdipm.PdipmSolution | None = None
        self.solved_before = False


class SecondStageOracle:
    """Scenario-averaged value/gradient/Hessian of the subnetwork responses.

    Implements the objective-extension protocol consumed by the SQP solver:
    ``evaluate(x, order)`` solves every (subnetwork, scenario) subproblem at
    the current smoothing weight, warm-started from its own cache, and
    aggregates in fixed index order.
    """

    def __init__(
        self,
        decomp: Decomposition,
        coupling_vars: list[np.ndarray],
        scenarios=None,
        opts: TwoStageOptions | None = None,
    ):
        self.opts = opts or TwoStageOptions()
        self.mu = DEFAULT_SCHEDULE[0]
        self.coupling_vars = coupling_vars
        self.tasks: dict[tuple[int, int], _SubTask] = {}
        self.n_scen: list[int] = []
        for d, (sub, cpl) in enumerate(decomp.subnets):
            if scenarios is None:
                mults = [None]
            else:
                mults = scenarios.multiplier_maps(d)
            self.n_scen.append(len(mults))
            for i, xi in enumerate(mults):
                prob = nlp.build_subproblem(sub, cpl, self.opts.eta, xi)
                self.tasks[(d, i)] = _SubTask(prob)
        self.stats = {
            "evaluations": 0,
            "solves": 0,
            "iterations": 0,
            "max_warm_iterations": 0,
        }
        self._executor: ThreadPoolExecutor | None = None

    @property
    def n_subnets(self) -> int:
        return len(self.n_scen)

    def set_mu(self, mu: float) -> None:
        self.mu = mu

    def close(self) -> None:
        if self._executor is not None:
            self._executor.shutdown()
            self._executor = None

    def _solve_one(self, key: tuple[int, int], x_d: np.ndarray):
        task = self.tasks[key]
        try:
            inst = nlp.BarrierInstance(task.problem, self.mu)
            opts = pdipm.PdipmOptions(
                mode="hold",
                eps=self.opts.sub_eps,
                max_iter=self.opts.max_sub_iter,
            )
            sol = pdipm.solve(inst, x_d, opts, warm_start=task.solution)
            bun = sensitivity.bundle(sol)
        except Exception as exc:  # noqa: BLE001 - reported with task identity
            raise SecondStageError(key[0], key[1], exc) from exc
        warm = task.solved_before
        task.solution = sol
        task.solved_before = True
        return key, sol.iterations, warm, bun

    def evaluate(self, x: np.ndarray, order: int = 2):
        """Value, full-length gradient, and per-subnetwork Hessian blocks."""
        xs = [x[idx] for idx in self.coupling_vars]
        keys = sorted(self.tasks)
        if self.opts.workers > 1:
            if self._executor is None:
                self._executor = ThreadPoolExecutor(max_workers=self.opts.workers)
            futures = {
                key: self._executor.submit(self._solve_one, key, xs[key[0]])
                for key in keys
            }
            results = {key: futures[key].result() for key in keys}
        else:
            results = {key: self._solve_one(key, xs[key[0]]) for key in keys}

        value = 0.0
        grad = np.zeros(len(x))
        blocks = []
        for d in range(self.n_subnets):
            inv_n = 1.0 / self.n_scen[d]
            val_d = 0.0
            grad_d = np.zeros(4)
            hess_d = np.zeros((4, 4))
            for i in range(self.n_scen[d]):
                _, iters, warm, bun = results[(d, i)]
                self.stats["solves"] += 1
                self.stats["iterations"] += iters
                if warm:
                    self.stats["max_warm_iterations"] = max(
                        self.stats["max_warm_iterations"], iters
                    )
                val_d += bun.value
                grad_d += bun.gradient
                hess_d += bun.hessian
            value += inv_n * val_d
            grad[self.coupling_vars[d]] += inv_n * grad_d
            blocks.append((self.coupling_vars[d], inv_n * hess_d))
        self.stats["evaluations"] += 1
        return value, grad, blocks

    def snapshot_stats(self) -> dict:
        return dict(self.stats)


def assemble_master(
    decomp: Decomposition,
    scenarios=None,
    opts: TwoStageOptions | None = None,
) -> tuple[sqp.NlpModel, SecondStageOracle | None]:
    """Master problem plus its second-stage oracle.

    The master QCQP is the master network's problem with injection bounds
    and generation cost removed at coupling buses; with no subnetworks it is
    exactly the centralized problem of the master network.
    """
    opts = opts or TwoStageOptions()
    coupling_ids = [cpl.master_bus for _, cpl in decomp.subnets]
    problem = nlp.build_master(decomp.master, coupling_ids)
    if not decomp.subnets:
        return sqp.NlpModel(problem), None
    coupling_vars = [problem.meta["coupling_vars"][b] for b in coupling_ids]
    oracle = SecondStageOracle(decomp, coupling_vars, scenarios, opts)
    return sqp.NlpModel(problem, extension=oracle), oracle


def evaluate_second_stage(
    oracle: SecondStageOracle, x: np.ndarray, mu: float
) -> tuple[float, np.ndarray, list]:
    """One oracle evaluation at explicit smoothing weight ``mu``."""
    oracle.set_mu(mu)
    return oracle.evaluate(x)


@dataclass
class StageReport:
    mu: float
    sqp_iterations: int
    function_evaluations: int
    subproblem_solves: int
    subproblem_iterations: int
    max_warm_iterations: int
    objective: float
    wall_s: float


@dataclass
class TwoStageResult:
    decomp: Decomposition
    x: np.ndarray
    master_state: StateVars
    sub_solutions: dict[tuple[int, int], pdipm.PdipmSolution]
    objective: float
    master_cost: float
    second_stage_cost: float
    smoothed_objective: float
    penalty_total: float
    stages: list[StageReport]
    options: TwoStageOptions
    schedule: tuple[float, ...]
    coupling_vars: list[np.ndarray] = field(default_factory=list)

    @property
    def final_mu(self) -> float:
        return self.schedule[-1]


def run(
    decomp: Decomposition,
    scenarios=None,
    schedule: MuSchedule | None = None,
    opts: TwoStageOptions | None = None,
) -> TwoStageResult:
    """Full two-stage solve over the smoothing schedule.

    Each stage solves the smoothed master problem by SQP, warm-started from
    the previous stage's optimum and multipliers; every oracle call solves
    all subproblems in hold-at mode at the stage's weight.
    """
    opts = opts or TwoStageOptions()
    schedule = schedule or MuSchedule()
    model, oracle = assemble_master(decomp, scenarios, opts)
    x = nlp.flat_primal(model.problem)
    multipliers = None
    stages: list[StageReport] = []
    sqp_opts = sqp.SqpOptions(
        tol=opts.master_tol, max_iter=opts.max_master_iter, verbose=opts.verbose
    )
    try:
        for mu in schedule:
            if oracle is not None:
                oracle.set_mu(mu)
            before = oracle.snapshot_stats() if oracle else None
            t0 = time.perf_counter()
            res = sqp.sqp_solve(model, x, sqp_opts, warm_multipliers=multipliers)
            wall = time.perf_counter() - t0
            x = res.x
            multipliers = (res.nu, res.lam)
            after = oracle.snapshot_stats() if oracle else None
            stages.append(
                StageReport(
                    mu=mu,
                    sqp_iterations=res.iterations,
                    function_evaluations=res.fevals,
                    subproblem_solves=(after["solves"] - before["solves"]) if oracle else 0,
                    subproblem_iterations=(
                        after["iterations"] - before["iterations"]
                    ) if oracle else 0,
                    max_warm_iterations=after["max_warm_iterations"] if oracle else 0,
                    objective=res.objective,
                    wall_s=wall,
                )
            )
            if oracle is None:
                # no subnetworks: nothing changes across stages
                break
    finally:
        if oracle is not None:
            oracle.close()

    master_cost = model.problem.compiled.obj_value(x)
    sub_solutions = {}
    second_stage_cost = 0.0
    penalty_total = 0.0
    smoothed = master_cost
    if oracle is not None:
        for d in range(oracle.n_subnets):
            inv_n = 1.0 / oracle.n_scen[d]
            for i in range(oracle.n_scen[d]):
                task = oracle.tasks[(d, i)]
                sol = task.solution
                sub_solutions[(d, i)] = sol
                vm = task.problem.varmap
                slacks = float(np.sum(sol.z[vm.r]) + np.sum(sol.z[vm.t]))
                gen_cost = sol.objective - task.problem.meta["eta"] * slacks
                second_stage_cost += inv_n * gen_cost
                penalty_total += inv_n * task.problem.meta["eta"] * slacks
                smoothed += inv_n * sol.barrier_objective(schedule.weights[-1])
    return TwoStageResult(
        decomp=decomp,
        x=x,
        master_state=model.problem.varmap.extract_state(x),
        sub_solutions=sub_solutions,
        objective=master_cost + second_stage_cost,
        master_cost=master_cost,
        second_stage_cost=second_stage_cost,
        smoothed_objective=smoothed,
        penalty_total=penalty_total,
        stages=stages,
        options=opts,
        schedule=tuple(schedule.weights),
        coupling_vars=[] if oracle is None else oracle.coupling_vars,
    )


def verify_recomposition(result: TwoStageResult) -> dict:
    """Boundary residual report: voltage and injection mismatch at every
    coupling bus plus penalty slack magnitudes, maximized over scenarios."""
    decomp = result.decomp
    master = decomp.master
    mstate = result.master_state
    max_v = 0.0
    max_s = 0.0
    max_slack = 0.0
    details = []
    for d, (sub, cpl) in enumerate(decomp.subnets):
        mpos = master.bus_pos(cpl.master_bus)
        v_m = complex(mstate.v_re[mpos], mstate.v_im[mpos])
        s_m = complex(mstate.p[mpos], mstate.q[mpos])
        i = 0
        while (d, i) in result.sub_solutions:
            sol = result.sub_solutions[(d, i)]
            vm = sol.problem.varmap
            rpos = sub.bus_pos(cpl.sub_bus)
            z = sol.z
            v_s = complex(z[vm.v_re[rpos]], z[vm.v_im[rpos]])
            s_s = complex(z[vm.p[rpos]], z[vm.q[rpos]])
            rv = abs(v_m - v_s)
            rs = abs(s_m + s_s)
            slack = float(max(np.max(z[vm.r]), np.max(z[vm.t])))
            max_v = max(max_v, rv)
            max_s = max(max_s, rs)
            max_slack = max(max_slack, slack)
            details.append(
                {
                    "subnet": d,
                    "scenario": i,
                    "voltage_residual": rv,
                    "injection_residual": rs,
                    "max_slack": slack,
                }
            )
            i += 1
    return {
        "max_voltage_residual": max_v,
        "max_injection_residual": max_s,
        "max_slack": max_slack,
        "penalty_inactive": result.options.eta == 0.0,
        "details": details,
    }
