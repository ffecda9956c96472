"""Case-file parsing, test-system composition, scenarios, and result files.

The case grammar is a MATPOWER-style subset: ``%`` comments, an optional
``function mpc = name`` header, scalar assignments, and matrix blocks with
``;``-terminated rows.  Recognized tables and their columns::

    mpc.baseMVA = <scalar>;
    mpc.bus     = [ id type Pd Qd Vmin Vmax; ... ];   % type 3 = reference
    mpc.gen     = [ bus Pmin Pmax Qmin Qmax; ... ];   % MW / MVAr limits
    mpc.branch  = [ from to r x; ... ];               % per-unit impedance
    mpc.gencost = [ c2 c1 c0; ... ];                  % row i costs gen row i

Solution and scenario documents are JSON with a leading ``format_version``
field; benchmark tables are CSV with a ``format_version`` first line.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .netmodel import Branch, Bus, Coupling, Decomposition, Network, NetworkError

__all__ = [
    "CaseDocument",
    "CaseError",
    "CaseParseError",
    "CaseIOError",
    "CaseSemanticError",
    "ScenarioSet",
    "parse_case",
    "emit_case",
    "to_network",
    "compose_system",
    "gen_scenarios",
    "equivalent_bus_count",
    "write_solution",
    "read_solution",
    "write_scenarios",
    "read_scenarios",
    "write_bench",
    "network_to_case",
    "read_bench",
    "write_decomp_spec",
    "read_decomp_spec",
    "apply_decomp_spec",
]

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
BENCH_FIELDS = (
    "case",
    "mode",
    "n_subnets",
    "n_scenarios",
    "workers",
    "seed",
    "objective",
    "sqp_iterations",
    "function_evaluations",
    "subproblem_solves",
    "subproblem_iterations",
    "wall_seconds",
)


class CaseError(ValueError):
    pass


class CaseParseError(CaseError):
    def __init__(self, msg: str, line: int, col: int = 0):
        super().__init__(f"line {line}, col {col}: {msg}")
        self.line = line
        self.col = col


class CaseSemanticError(CaseError):
    def __init__(self, msg: str, table: str, row: int):
        super().__init__(f"table {table}, row {row}: {msg}")
        self.table = table
        self.row = row


class CaseIOError(CaseError):
    """File-level read/write failure, with path context in the message."""


@dataclass
class CaseDocument:
    """Parsed case data in the file's units (MW, MVAr, per-unit impedance)."""

    base_mva: float
    bus: list[list[float]]
    gen: list[list[float]]
    branch: list[list[float]]
    gencost: list[list[float]]
    name: str = "case"


_TABLE_COLS = {"bus": 6, "gen": 5, "branch": 4, "gencost": 3}


def _strip_comment(line: str) -> str:
    pos = line.find("%")
    return line if pos < 0 else line[:pos]


def parse_case(text: str) -> CaseDocument:
    """Parse case text; every malformed input raises a located error."""
    doc = CaseDocument(base_mva=0.0, bus=[], gen=[], branch=[], gencost=[])
    tables: dict[str, list[list[float]]] = {}
    have_base = False
    current: str | None = None
    rows: list[list[float]] = []
    pending: list[float] = []

    lines = text.splitlines()
    for lineno, raw in enumerate(lines, start=1):
        line = _strip_comment(raw).strip()
        if not line:
            continue
        if current is None:
            if line.startswith("function"):
                parts = line.replace("=", " = ").split()
                if len(parts) >= 4 and parts[0] == "function" and parts[2] == "=":
                    doc.name = parts[3].rstrip(";")
                    continue
                raise CaseParseError("malformed function header", lineno)
            if not line.startswith("mpc."):
                raise CaseParseError(f"unexpected statement {line!r}", lineno)
            body = line[4:]
            eq = body.find("=")
            if eq < 0:
                raise CaseParseError("expected '=' after field name", lineno, 4)
            name = body[:eq].strip()
            value = body[eq + 1 :].strip()
            if name == "version":
                continue
            if name == "baseMVA":
                value = value.rstrip(";").strip()
                try:
                    doc.base_mva = float(value)
                except ValueError:
                    raise CaseParseError(f"bad baseMVA value {value!r}", lineno)
                if doc.base_mva <= 0:
                    raise CaseParseError("baseMVA must be positive", lineno)
                have_base = True
                continue
            if name not in _TABLE_COLS:
                raise CaseParseError(f"unknown field mpc.{name}", lineno, 4)
            if name in tables:
                raise CaseParseError(f"duplicate table mpc.{name}", lineno)
            if not value.startswith("["):
                raise CaseParseError("expected '[' to open a matrix", lineno)
            current = name
            rows = []
            pending = []
            if _consume_rows(value[1:], lineno, name, rows, pending):
                if pending:
                    rows.append(_check_row(pending, name, lineno))
                    pending.clear()
                tables[current] = rows
                current = None
            continue
        # inside a matrix block
        closed = _consume_rows(line, lineno, current, rows, pending)
        if closed:
            if pending:
                rows.append(_check_row(pending, current, lineno))
                pending.clear()
            tables[current] = rows
            current = None
    if current is not None:
        raise CaseParseError(f"unterminated matrix mpc.{current}", len(lines) or 1)
    if not have_base:
        raise CaseParseError("missing mpc.baseMVA", len(lines) or 1)
    for key in ("bus", "branch"):
        if key not in tables:
            raise CaseParseError(f"missing table mpc.{key}", len(lines) or 1)
    doc.bus = tables["bus"]
    doc.branch = tables["branch"]
    doc.gen = tables.get("gen", [])
    doc.gencost = tables.get("gencost", [])
    _validate(doc)
    return doc


def _consume_rows(chunk, lineno, table, rows, pending) -> bool:
    """Feed one line's worth of matrix content; returns True on ']'."""
    closed = False
    close = chunk.find("]")
    if close >= 0:
        trailing = chunk[close + 1 :].strip().rstrip(";").strip()
        if trailing:
            raise CaseParseError("content after ']'", lineno, close + 1)
        chunk = chunk[:close]
        closed = True
    parts = chunk.split(";")
    for k, part in enumerate(parts):
        terminated = k < len(parts) - 1
        for tok in part.split():
            col = chunk.find(tok)
            try:
                pending.append(float(tok))
            except ValueError:
                raise CaseParseError(
                    f"bad numeral {tok!r} in mpc.{table}", lineno, max(col, 0)
                )
        if terminated:
            if not pending:
                raise CaseParseError(f"empty row in mpc.{table}", lineno)
            rows.append(_check_row(pending, table, lineno))
            pending.clear()
    return closed


def _check_row(vals: list[float], table: str, lineno: int) -> list[float]:
    want = _TABLE_COLS[table]
    if len(vals) != want:
        raise CaseParseError(
            f"mpc.{table} row has {len(vals)} columns, expected {want}", lineno
        )
    return list(vals)


def _validate(doc: CaseDocument) -> None:
    ids = [int(r[0]) for r in doc.bus]
    idset = set(ids)
    if len(idset) != len(ids):
        raise CaseSemanticError("duplicate bus id", "bus", 0)
    for k, r in enumerate(doc.bus):
        if r[4] <= 0 or r[4] > r[5]:
            raise CaseSemanticError("need 0 < Vmin <= Vmax", "bus", k)
    n_slack = sum(1 for r in doc.bus if int(r[1]) == 3)
    if n_slack != 1:
        raise CaseSemanticError(
            f"need exactly one type-3 bus, found {n_slack}", "bus", 0
        )
    for k, r in enumerate(doc.branch):
        if int(r[0]) not in idset or int(r[1]) not in idset:
            raise CaseSemanticError("branch endpoint not a bus", "branch", k)
        if r[2] ** 2 + r[3] ** 2 <= 0:
            raise CaseSemanticError("zero impedance", "branch", k)
    for k, r in enumerate(doc.gen):
        if int(r[0]) not in idset:
            raise CaseSemanticError("generator bus not a bus", "gen", k)
        if r[1] > r[2] or r[3] > r[4]:
            raise CaseSemanticError("generator limits crossed", "gen", k)
    if len(doc.gencost) > len(doc.gen):
        raise CaseSemanticError("more cost rows than generators", "gencost", 0)


def _fmt(v: float) -> str:
    return repr(float(v))


def emit_case(doc: CaseDocument) -> str:
    """Canonical text for a case document; reparses to an equal document."""
    out = [f"function mpc = {doc.name}", f"mpc.baseMVA = {_fmt(doc.base_mva)};"]
    for name in ("bus", "gen", "branch", "gencost"):
        rows = getattr(doc, name)
        out.append(f"mpc.{name} = [")
        for r in rows:
            out.append("  " + "\t".join(_fmt(v) for v in r) + ";")
        out.append("];")
    return "\n".join(out) + "\n"


def to_network(doc: CaseDocument) -> Network:
    """Per-unit Network: loads folded into injection bounds, generator
    limits merged per bus, cost coefficients rescaled to per-unit power."""
    base = doc.base_mva
    gens_at: dict[int, list[int]] = {}
    for k, row in enumerate(doc.gen):
        gens_at.setdefault(int(row[0]), []).append(k)
    buses = []
    slack = None
    for k, row in enumerate(doc.bus):
        bid, btype = int(row[0]), int(row[1])
        load = complex(row[2], row[3]) / base
        vmin, vmax = row[4] ** 2, row[5] ** 2
        gk = gens_at.get(bid, [])
        cost = None
        if gk:
            pmin = sum(doc.gen[g][1] for g in gk) / base
            pmax = sum(doc.gen[g][2] for g in gk) / base
            qmin = sum(doc.gen[g][3] for g in gk) / base
            qmax = sum(doc.gen[g][4] for g in gk) / base
            s_min = complex(pmin, qmin) - load
            s_max = complex(pmax, qmax) - load
            costed = [g for g in gk if g < len(doc.gencost)]
            if len(costed) > 1:
                raise CaseSemanticError(
                    "multiple costed generators at one bus are not supported",
                    "gencost",
                    costed[1],
                )
            if costed:
                c2, c1, c0 = doc.gencost[costed[0]]
                cost = (c2 * base * base, c1 * base, c0)
        else:
            s_min = -load
            s_max = -load
        if btype == 3:
            slack = bid
        try:
            buses.append(
                Bus(bid, vmin, vmax, s_min, s_max, load=load, gen_cost=cost)
            )
        except NetworkError as exc:
            raise CaseSemanticError(str(exc), "bus", k) from exc
    branches = tuple(
        Branch(int(r[0]), int(r[1]), complex(r[2], r[3])) for r in doc.branch
    )
    return Network(tuple(buses), branches, slack)


def network_to_case(net: Network, name: str = "case", base_mva: float = 100.0) -> CaseDocument:
    """Inverse of :func:`to_network`, for emitting composed systems.

    Buses whose injection range differs from the pure-load fold get a
    generator row; costed generators are listed first so that gencost rows
    align with their generators.
    """
    bus_rows = []
    gens_costed = []
    gens_plain = []
    costs = []
    for b in net.buses:
        btype = 3 if b.id == net.slack_bus else (2 if b.gen_cost else 1)
        bus_rows.append(
            [
                float(b.id),
                float(btype),
                b.load.real * base_mva,
                b.load.imag * base_mva,
                math.sqrt(b.v_min),
                math.sqrt(b.v_max),
            ]
        )
        gmin = b.s_min + b.load
        gmax = b.s_max + b.load
        if gmin != 0 or gmax != 0:
            row = [
                float(b.id),
                gmin.real * base_mva,
                gmax.real * base_mva,
                gmin.imag * base_mva,
                gmax.imag * base_mva,
            ]
            if b.gen_cost is not None:
                c2, c1, c0 = b.gen_cost
                gens_costed.append(row)
                costs.append([c2 / (base_mva * base_mva), c1 / base_mva, c0])
            else:
                gens_plain.append(row)
    branch_rows = [
        [float(br.from_bus), float(br.to_bus), br.z.real, br.z.imag]
        for br in net.branches
    ]
    return CaseDocument(
        base_mva=base_mva,
        bus=bus_rows,
        gen=gens_costed + gens_plain,
        branch=branch_rows,
        gencost=costs,
        name=name,
    )


def _junction(bus: Bus) -> Bus:
    return Bus(bus.id, bus.v_min, bus.v_max, 0j, 0j, load=0j, gen_cost=None)


def compose_system(
    transmission: CaseDocument,
    feeder: CaseDocument,
    degree_threshold: int,
    scale: str = "match-load",
) -> Decomposition:
    """Attach one feeder copy at every transmission bus of low degree.

    Feeder loads are scaled componentwise so each copy's total active and
    reactive load equals the host bus load, the host bus load moves into the
    feeder, and the host becomes a pure junction (any host generator is
    dropped, with a log notice).  The feeder's reference bus becomes the
    shared coupling bus and must carry no load or generation of its own.
    """
    if degree_threshold < 0:
        raise CaseError("degree threshold must be nonnegative")
    if scale != "match-load":
        raise CaseError(f"unknown scaling policy {scale!r}")
    t_net = to_network(transmission)
    f_net = to_network(feeder)
    root = f_net.slack_bus
    root_bus = f_net.bus(root)
    if root_bus.load != 0 or root_bus.gen_cost is not None or any(
        int(r[0]) == root for r in feeder.gen
    ):
        raise CaseError(
            "feeder root carries load or generation; incompatible with the "
            "coupling-bus convention"
        )
    hosts = sorted(
        b.id
        for b in t_net.buses
        if t_net.degree(b.id) <= degree_threshold and b.id != t_net.slack_bus
    )
    feeder_p = sum(b.load.real for b in f_net.buses)
    feeder_q = sum(b.load.imag for b in f_net.buses)

    next_id = max(b.id for b in t_net.buses) + 1
    master_buses = []
    dropped_gens = 0
    host_set = set(hosts)
    for b in t_net.buses:
        if b.id in host_set:
            if b.gen_cost is not None or b.s_max != b.s_min:
                dropped_gens += b.gen_cost is not None
            master_buses.append(_junction(b))
        else:
            master_buses.append(b)
    master = Network(tuple(master_buses), t_net.branches, t_net.slack_bus)
    if dropped_gens:
        log.info(
            "compose_system: dropped %d host-bus generators (hosts become "
            "pure junctions)",
            dropped_gens,
        )

    subnets = []
    for host in hosts:
        host_bus = t_net.bus(host)
        sp = host_bus.load.real / feeder_p if feeder_p else 0.0
        sq = host_bus.load.imag / feeder_q if feeder_q else 0.0
        if feeder_p == 0 and host_bus.load.real != 0:
            raise CaseError("feeder has no active load to scale")
        if feeder_q == 0 and host_bus.load.imag != 0:
            raise CaseError("feeder has no reactive load to scale")
        id_map = {root: host}
        for b in f_net.buses:
            if b.id != root:
                id_map[b.id] = next_id
                next_id += 1
        buses = []
        for b in f_net.buses:
            if b.id == root:
                buses.append(
                    Bus(host, host_bus.v_min, host_bus.v_max, 0j, 0j)
                )
                continue
            load = complex(sp * b.load.real, sq * b.load.imag)
            shift = b.load - load
            buses.append(
                Bus(
                    id_map[b.id],
                    b.v_min,
                    b.v_max,
                    b.s_min + shift,
                    b.s_max + shift,
                    load=load,
                    gen_cost=b.gen_cost,
                )
            )
        branches = tuple(
            Branch(id_map[br.from_bus], id_map[br.to_bus], br.z)
            for br in f_net.branches
        )
        subnets.append((Network(tuple(buses), branches, host), Coupling(host, host)))
    return Decomposition(master, tuple(subnets))


def equivalent_bus_count(decomp: Decomposition, n_scenarios: int = 1) -> int:
    """Bus count of the undecomposed equivalent with scenario replication."""
    total = decomp.master.n_bus
    for sub, _ in decomp.subnets:
        total += n_scenarios * (sub.n_bus - 1)
    return total


@dataclass
class ScenarioSet:
    """Per-(subnetwork, scenario) load multipliers with replayable streams.

    One independent uniform multiplier in ``[1 - amplitude, 1 + amplitude]``
    per load-carrying bus.  Stream splitting: the multipliers for subnetwork
    ``d``, scenario ``i`` come from ``SeedSequence(seed, spawn_key=(d, i))``
    feeding PCG64, so any (d, i) cell can be generated independently and the
    set is bit-identical for a given (seed, N, amplitude, network shape).
    """

    seed: int
    n: int
    amplitude: float
    load_buses: tuple[tuple[int, ...], ...]
    xi: tuple[tuple[np.ndarray, ...], ...]

    def multiplier_maps(self, d: int) -> list[dict[int, float]]:
        ids = self.load_buses[d]
        return [
            {b: float(m) for b, m in zip(ids, self.xi[d][i])}
            for i in range(self.n)
        ]


def gen_scenarios(
    decomp: Decomposition, n: int, seed: int, amplitude: float = 0.1
) -> ScenarioSet:
    """Draw load-fluctuation multipliers for every subnetwork and scenario."""
    if n < 1:
        raise CaseError("scenario count must be at least 1")
    if not 0 <= amplitude < 1:
        raise CaseError("amplitude must lie in [0, 1)")
    load_buses = []
    xi = []
    for d, (sub, cpl) in enumerate(decomp.subnets):
        ids = tuple(
            b.id for b in sub.buses if b.load != 0 and b.id != cpl.sub_bus
        )
        load_buses.append(ids)
        rows = []
        for i in range(n):
            ss = np.random.SeedSequence(entropy=seed, spawn_key=(d, i))
            gen = np.random.Generator(np.random.PCG64(ss))
            rows.append(1.0 + amplitude * (2.0 * gen.random(len(ids)) - 1.0))
        xi.append(tuple(rows))
    return ScenarioSet(
        seed=seed,
        n=n,
        amplitude=amplitude,
        load_buses=tuple(load_buses),
        xi=tuple(xi),
    )


# ---------------------------------------------------------------------------
# Documents
# ---------------------------------------------------------------------------


def write_scenarios(scen: ScenarioSet, path) -> None:
    doc = {
        "format_version": FORMAT_VERSION,
        "kind": "scenarios",
        "seed": scen.seed,
        "n": scen.n,
        "amplitude": scen.amplitude,
        "subnets": [
            {
                "load_buses": list(scen.load_buses[d]),
                "xi": [list(map(float, row)) for row in scen.xi[d]],
            }
            for d in range(len(scen.load_buses))
        ],
    }
    _write_json(doc, path)


def read_scenarios(path) -> ScenarioSet:
    doc = _read_json(path, kind="scenarios")
    return ScenarioSet(
        seed=doc["seed"],
        n=doc["n"],
        amplitude=doc["amplitude"],
        load_buses=tuple(tuple(s["load_buses"]) for s in doc["subnets"]),
        xi=tuple(
            tuple(np.array(row) for row in s["xi"]) for s in doc["subnets"]
        ),
    )


def write_solution(result: dict, path) -> None:
    doc = {"format_version": FORMAT_VERSION, "kind": "solution"}
    doc.update(result)
    _write_json(doc, path)


def read_solution(path) -> dict:
    return _read_json(path, kind="solution")


def write_decomp_spec(spec: list[dict], path) -> None:
    _write_json(
        {"format_version": FORMAT_VERSION, "kind": "decomposition", "subnets": spec},
        path,
    )


def read_decomp_spec(path) -> list[dict]:
    return _read_json(path, kind="decomposition")["subnets"]


def apply_decomp_spec(net: Network, spec: list[dict]) -> Decomposition:
    from .netmodel import decompose

    attachments = [
        (int(entry["coupling"]), {int(b) for b in entry["buses"]}) for entry in spec
    ]
    return decompose(net, attachments)


def write_bench(records: list[dict], path) -> None:
    lines = [f"format_version,{FORMAT_VERSION}", ",".join(BENCH_FIELDS)]
    for rec in records:
        lines.append(",".join(_csv_cell(rec.get(k)) for k in BENCH_FIELDS))
    text = "\n".join(lines) + "\n"
    try:
        with open(path, "w") as fh:
            fh.write(text)
    except OSError as exc:
        raise CaseIOError(f"cannot write benchmark table {path}: {exc}") from exc


def read_bench(path) -> list[dict]:
    try:
        with open(path) as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise CaseIOError(f"cannot read benchmark table {path}: {exc}") from exc
    if not lines or not lines[0].startswith("format_version,"):
        raise CaseError(f"{path}: missing format_version header")
    header = lines[1].split(",")
    out = []
    for line in lines[2:]:
        if not line:
            continue
        out.append(dict(zip(header, line.split(","))))
    return out


def _csv_cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _write_json(doc: dict, path) -> None:
    try:
        with open(path, "w") as fh:
            json.dump(doc, fh, indent=1)
            fh.write("\n")
    except OSError as exc:
        raise CaseIOError(f"cannot write {path}: {exc}") from exc


def _read_json(path, kind: str) -> dict:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise CaseIOError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise CaseError(f"{path}: invalid document: {exc}") from exc
    if doc.get("format_version") != FORMAT_VERSION:
        raise CaseError(f"{path}: unsupported format_version")
    if doc.get("kind") != kind:
        raise CaseError(f"{path}: expected a {kind} document")
    return doc
