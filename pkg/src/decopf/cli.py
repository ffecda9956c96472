"""Command-line front end.

Commands: ``solve`` (centralized interior-point solve), ``dsolve``
(decomposed two-stage solve), ``compose`` (attach feeders to a transmission
case), ``scenarios`` (write a load-fluctuation scenario file), and ``bench``
(timing sweeps over scenario counts or worker counts).

Exit codes: 0 success, 2 usage, 3 case/decomposition error, 4 solver
failure, 5 I/O error.
"""

from __future__ import annotations

import argparse
import sys
import time

from . import caseio, nlp, pdipm, sqp, twostage
from .caseio import CaseError, CaseIOError
from .netmodel import Decomposition, Network, NetworkError
from .nlp import ModelError

EXIT_OK = 0
EXIT_CASE = 3
EXIT_SOLVER = 4
EXIT_IO = 5

DEFAULT_MU_SCHEDULE = "1e-2,1e-3,1e-6"


def _read_text(path: str) -> str:
    try:
        with open(path) as fh:
            return fh.read()
    except OSError as exc:
        raise CaseIOError(f"cannot read {path}: {exc}") from exc


def _load_network(path: str) -> Network:
    return caseio.to_network(caseio.parse_case(_read_text(path)))


def _load_decomp(net: Network, decomp_arg: str | None) -> Decomposition:
    if decomp_arg is None or decomp_arg == "none":
        return Decomposition(net, ())
    spec = caseio.read_decomp_spec(decomp_arg)
    return caseio.apply_decomp_spec(net, spec)


def _mu_schedule(text: str) -> twostage.MuSchedule:
    try:
        weights = tuple(float(tok) for tok in text.split(",") if tok)
        return twostage.MuSchedule(weights)
    except ValueError as exc:
        raise CaseError(f"bad mu schedule {text!r}: {exc}") from exc


def _state_doc(net: Network, state) -> dict:
    return {
        "bus_ids": [b.id for b in net.buses],
        "v_re": list(map(float, state.v_re)),
        "v_im": list(map(float, state.v_im)),
        "p": list(map(float, state.p)),
        "q": list(map(float, state.q)),
        "i_re": list(map(float, state.i_re)),
        "i_im": list(map(float, state.i_im)),
        "fp": list(map(float, state.fp)),
        "fq": list(map(float, state.fq)),
    }


def cmd_solve(args) -> int:
    net = _load_network(args.case)
    problem = nlp.build_centralized(net)
    opts = pdipm.PdipmOptions(
        mode="tol", eps_mu=args.tol, max_iter=args.max_iter, verbose=args.verbose
    )
    sol = pdipm.solve(problem, opts=opts)
    doc = {
        "command": "solve",
        "config": {"case": args.case, "tol": args.tol},
        "objective": sol.objective,
        "iterations": sol.iterations,
        "final_mu": sol.mu,
        "residual_norm": sol.f_norm,
        "master": _state_doc(net, problem.varmap.extract_state(sol.z)),
    }
    if args.out:
        caseio.write_solution(doc, args.out)
    print(f"objective {sol.objective!r} in {sol.iterations} iterations")
    return EXIT_OK


def _dsolve_result_doc(args, result: twostage.TwoStageResult, residuals: dict) -> dict:
    decomp = result.decomp
    subnet_docs = []
    for (d, i), sol in sorted(result.sub_solutions.items()):
        sub = decomp.subnets[d][0]
        vm = sol.problem.varmap
        doc = _state_doc(sub, vm.extract_state(sol.z))
        doc.update(
            {
                "subnet": d,
                "scenario": i,
                "r": list(map(float, sol.z[vm.r])),
                "t": list(map(float, sol.z[vm.t])),
                "iterations": sol.iterations,
            }
        )
        subnet_docs.append(doc)
    return {
        "command": "dsolve",
        "config": {
            "case": args.case,
            "decomp": args.decomp or "none",
            "scenarios": args.scenarios,
            "seed": args.seed,
            "amplitude": args.amplitude,
            "eta": args.eta,
            "mu_schedule": list(result.schedule),
            "tol": args.tol,
            "sub_tol": args.sub_tol,
        },
        "objective": result.objective,
        "master_cost": result.master_cost,
        "second_stage_cost": result.second_stage_cost,
        "smoothed_objective": result.smoothed_objective,
        "penalty_total": result.penalty_total,
        "coupling": {
            k: residuals[k]
            for k in ("max_voltage_residual", "max_injection_residual", "max_slack")
        },
        "equivalent_bus_count": caseio.equivalent_bus_count(
            result.decomp, args.scenarios
        ),
        "stages": [
            {
                "mu": st.mu,
                "sqp_iterations": st.sqp_iterations,
                "function_evaluations": st.function_evaluations,
                "subproblem_solves": st.subproblem_solves,
                "subproblem_iterations": st.subproblem_iterations,
                "max_warm_iterations": st.max_warm_iterations,
                "objective": st.objective,
            }
            for st in result.stages
        ],
        "master": _state_doc(result.decomp.master, result.master_state),
        "subnets": subnet_docs,
    }


def _run_dsolve(args):
    net = _load_network(args.case)
    decomp = _load_decomp(net, args.decomp)
    scen = None
    if decomp.subnets:
        scen = caseio.gen_scenarios(
            decomp, args.scenarios, args.seed, args.amplitude
        )
    opts = twostage.TwoStageOptions(
        eta=args.eta,
        master_tol=args.tol,
        sub_eps=args.sub_tol,
        workers=args.workers,
        verbose=args.verbose,
    )
    schedule = _mu_schedule(args.mu_schedule)
    t0 = time.perf_counter()
    result = twostage.run(decomp, scen, schedule, opts)
    wall = time.perf_counter() - t0
    return result, wall


def cmd_dsolve(args) -> int:
    result, wall = _run_dsolve(args)
    residuals = twostage.verify_recomposition(result)
    doc = _dsolve_result_doc(args, result, residuals)
    if args.out:
        caseio.write_solution(doc, args.out)
    if args.bench_out:
        caseio.write_bench([_bench_record(args, result, wall)], args.bench_out)
    print(
        f"objective {result.objective!r}  "
        f"coupling residual {max(residuals['max_voltage_residual'], residuals['max_injection_residual']):.3e}"
    )
    if residuals["penalty_inactive"]:
        print("note: eta = 0, coupling penalty inactive")
    return EXIT_OK


def _bench_record(args, result: twostage.TwoStageResult, wall: float) -> dict:
    return {
        "case": args.case,
        "mode": "dsolve",
        "n_subnets": result.decomp.n_subnets,
        "n_scenarios": args.scenarios,
        "workers": args.workers,
        "seed": args.seed,
        "objective": result.objective,
        "sqp_iterations": sum(st.sqp_iterations for st in result.stages),
        "function_evaluations": sum(st.function_evaluations for st in result.stages),
        "subproblem_solves": sum(st.subproblem_solves for st in result.stages),
        "subproblem_iterations": sum(
            st.subproblem_iterations for st in result.stages
        ),
        "wall_seconds": wall,
    }


def cmd_compose(args) -> int:
    trans = caseio.parse_case(_read_text(args.case))
    feeder = caseio.parse_case(_read_text(args.feeder))
    decomp = caseio.compose_system(trans, feeder, args.degree)
    from .netmodel import recompose

    combined = recompose(decomp)
    case_doc = caseio.network_to_case(
        combined, name="composed", base_mva=trans.base_mva
    )
    try:
        with open(args.out, "w") as fh:
            fh.write(caseio.emit_case(case_doc))
    except OSError as exc:
        raise CaseIOError(f"cannot write {args.out}: {exc}") from exc
    spec = [
        {
            "coupling": cpl.master_bus,
            "buses": [b.id for b in sub.buses],
        }
        for sub, cpl in decomp.subnets
    ]
    caseio.write_decomp_spec(spec, args.decomp_out)
    print(
        f"composed {decomp.n_subnets} subnetworks; "
        f"recomposed buses {combined.n_bus}; "
        f"equivalent buses at N={args.scenarios}: "
        f"{caseio.equivalent_bus_count(decomp, args.scenarios)}"
    )
    return EXIT_OK


def cmd_scenarios(args) -> int:
    net = _load_network(args.case)
    decomp = _load_decomp(net, args.decomp)
    scen = caseio.gen_scenarios(decomp, args.scenarios, args.seed, args.amplitude)
    caseio.write_scenarios(scen, args.out)
    print(f"wrote {scen.n} scenarios for {len(scen.load_buses)} subnetworks")
    return EXIT_OK


def cmd_bench(args) -> int:
    values = [int(tok) for tok in args.list.split(",") if tok]
    records = []
    for v in values:
        run_args = argparse.Namespace(**vars(args))
        if args.sweep == "scenarios":
            run_args.scenarios = v
        elif args.sweep == "workers":
            run_args.workers = v
        elif args.sweep == "weak-scenarios":
            run_args.workers = v
            run_args.scenarios = args.scenarios * v
        elif args.sweep == "weak-subnets":
            run_args.workers = v
            run_args.subnet_limit = v
        result, wall = _run_dsolve_limited(run_args)
        records.append(_bench_record(run_args, result, wall))
        print(
            f"sweep={args.sweep} value={v}: objective {result.objective!r} "
            f"wall {wall:.3f}s"
        )
    caseio.write_bench(records, args.bench_out)
    return EXIT_OK


def _run_dsolve_limited(args):
    """dsolve run that optionally uses only the first K subnetworks."""
    limit = getattr(args, "subnet_limit", None)
    if limit is None:
        return _run_dsolve(args)
    net = _load_network(args.case)
    spec = caseio.read_decomp_spec(args.decomp)
    if len(spec) < limit:
        raise CaseError(f"decomposition has fewer than {limit} subnetworks")
    # buses of dropped subnetworks return to the master
    decomp = caseio.apply_decomp_spec(net, spec[:limit])
    scen = caseio.gen_scenarios(decomp, args.scenarios, args.seed, args.amplitude)
    opts = twostage.TwoStageOptions(
        eta=args.eta,
        master_tol=args.tol,
        sub_eps=args.sub_tol,
        workers=args.workers,
        verbose=args.verbose,
    )
    schedule = _mu_schedule(args.mu_schedule)
    t0 = time.perf_counter()
    result = twostage.run(decomp, scen, schedule, opts)
    return result, time.perf_counter() - t0


def _add_common(p: argparse.ArgumentParser, dsolve: bool = False) -> None:
    p.add_argument("--case", required=True, help="case file path")
    p.add_argument("--verbose", action="count", default=0)
    if dsolve:
        p.add_argument("--decomp", default=None, help="decomposition spec path or 'none'")
        p.add_argument(
            "--subnets",
            choices=["none"],
            default=None,
            help="'none' solves the undecomposed master (alias for --decomp none)",
        )
        p.add_argument("--scenarios", type=int, default=1, help="scenarios per subnetwork")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--amplitude", type=float, default=0.1)
        p.add_argument("--eta", type=float, default=9.0, help="coupling penalty weight")
        p.add_argument("--mu-schedule", default=DEFAULT_MU_SCHEDULE)
        p.add_argument("--tol", type=float, default=1e-6, help="master KKT tolerance")
        p.add_argument("--sub-tol", type=float, default=1e-12, help="subproblem tolerance")
        p.add_argument("--workers", type=int, default=1)
        p.add_argument("--out", default=None, help="solution document path")
        p.add_argument("--bench-out", default=None, help="benchmark table path")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="decopf",
        description="Decomposed AC optimal power flow solver",
    )
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("solve", help="centralized interior-point solve")
    _add_common(p)
    p.add_argument("--tol", type=float, default=1e-9, help="barrier target eps_mu")
    p.add_argument("--max-iter", type=int, default=400)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("dsolve", help="decomposed two-stage solve")
    _add_common(p, dsolve=True)
    p.set_defaults(func=cmd_dsolve)

    p = sub.add_parser("compose", help="attach feeder copies to a transmission case")
    _add_common(p)
    p.add_argument("--feeder", required=True)
    p.add_argument("--degree", type=int, default=2, help="attach at degree <= this")
    p.add_argument("--scenarios", type=int, default=1, help="N for the reported equivalent size")
    p.add_argument("--out", required=True, help="recomposed case output path")
    p.add_argument("--decomp-out", required=True, help="decomposition spec output path")
    p.set_defaults(func=cmd_compose)

    p = sub.add_parser("scenarios", help="write a scenario file")
    _add_common(p)
    p.add_argument("--decomp", required=True)
    p.add_argument("--scenarios", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--amplitude", type=float, default=0.1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_scenarios)

    p = sub.add_parser("bench", help="timing sweeps")
    _add_common(p, dsolve=True)
    p.add_argument(
        "--sweep",
        choices=["scenarios", "workers", "weak-scenarios", "weak-subnets"],
        required=True,
    )
    p.add_argument("--list", required=True, help="comma-separated sweep values")
    p.set_defaults(func=cmd_bench)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "subnets", None) == "none":
        args.decomp = "none"
    if args.command == "bench" and not args.bench_out:
        print("error: bench requires --bench-out", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except CaseIOError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (CaseError, NetworkError, ModelError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CASE
    except (pdipm.PdipmError, sqp.SqpError, twostage.SecondStageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
