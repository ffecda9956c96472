"""Power network model in rectangular coordinates.

Buses carry squared-voltage-magnitude bounds and complex injection bounds
(a pure load is a bus with ``s_min == s_max == -load``).  Branches carry a
series impedance.  Networks are immutable once constructed and can be split
into a master network plus subnetworks that each share exactly one bus with
the master.
"""

from __future__ import annotations

import cmath
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Bus",
    "Branch",
    "Network",
    "Coupling",
    "Decomposition",
    "StateVars",
    "NetworkError",
    "branch_current",
    "branch_power",
    "bus_injection",
    "coupling_injection",
    "decompose",
    "recompose",
    "scale_loads",
    "state_from_voltages",
]


class NetworkError(ValueError):
    """Raised for structurally invalid networks or decompositions."""


@dataclass(frozen=True)
class Bus:
    """A bus with voltage and injection operating limits.

    ``v_min``/``v_max`` bound the squared voltage magnitude (per-unit^2);
    ``s_min``/``s_max`` bound the complex net power injection componentwise
    (per-unit).  ``load`` is the local demand, kept separately so that
    generation (= injection + load) can be costed.  ``gen_cost`` holds
    quadratic coefficients (c2, c1, c0) applied to active generation.
    """

    id: int
    v_min: float
    v_max: float
    s_min: complex
    s_max: complex
    load: complex = 0j
    gen_cost: tuple[float, float, float] | None = None

    def __post_init__(self):
        if not self.v_min > 0:
            raise NetworkError(f"bus {self.id}: v_min must be positive")
        if self.v_min > self.v_max:
            raise NetworkError(f"bus {self.id}: v_min > v_max")
        if self.s_min.real > self.s_max.real or self.s_min.imag > self.s_max.imag:
            raise NetworkError(f"bus {self.id}: injection bounds crossed")

    @property
    def is_junction(self) -> bool:
        """True when the bus carries no load, generation, or injection range."""
        return (
            self.load == 0
            and self.gen_cost is None
            and self.s_min == 0
            and self.s_max == 0
        )


@dataclass(frozen=True)
class Branch:
    """A directed branch with series impedance ``z`` (admittance ``y = 1/z``)."""

    from_bus: int
    to_bus: int
    z: complex

    def __post_init__(self):
        if self.z == 0:
            raise NetworkError(
                f"branch {self.from_bus}->{self.to_bus}: zero impedance"
            )

    @property
    def y(self) -> complex:
        return 1.0 / self.z


@dataclass(frozen=True)
class Network:
    """A connected directed power network with one designated slack bus."""

    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    slack_bus: int
    _index: dict[int, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        index = {b.id: k for k, b in enumerate(self.buses)}
        if len(index) != len(self.buses):
            raise NetworkError("duplicate bus ids")
        for br in self.branches:
            if br.from_bus not in index or br.to_bus not in index:
                raise NetworkError(
                    f"branch {br.from_bus}->{br.to_bus} references unknown bus"
                )
        if self.slack_bus not in index:
            raise NetworkError(f"slack bus {self.slack_bus} not in network")
        object.__setattr__(self, "_index", index)
        if self.buses and not self._connected():
            raise NetworkError("network is not connected")

    def _connected(self) -> bool:
        adj: dict[int, list[int]] = {b.id: [] for b in self.buses}
        for br in self.branches:
            adj[br.from_bus].append(br.to_bus)
            adj[br.to_bus].append(br.from_bus)
        seen = {self.buses[0].id}
        stack = [self.buses[0].id]
        while stack:
            for nxt in adj[stack.pop()]:
                if nxt not in seen:
                    seen.add(nxt)
                    stack.append(nxt)
        return len(seen) == len(self.buses)

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @property
    def n_branch(self) -> int:
        return len(self.branches)

    def bus_pos(self, bus_id: int) -> int:
        """Position of a bus id in the bus tuple."""
        try:
            return self._index[bus_id]
        except KeyError:
            raise NetworkError(f"unknown bus id {bus_id}") from None

    def bus(self, bus_id: int) -> Bus:
        return self.buses[self.bus_pos(bus_id)]

    def degree(self, bus_id: int) -> int:
        """Number of incident branch endpoints (parallel branches counted)."""
        self.bus_pos(bus_id)
        return sum(
            (br.from_bus == bus_id) + (br.to_bus == bus_id) for br in self.branches
        )


@dataclass(frozen=True)
class Coupling:
    """The bus shared between master (``master_bus``) and a subnetwork (``sub_bus``)."""

    master_bus: int
    sub_bus: int


@dataclass(frozen=True)
class Decomposition:
    """A master network plus subnetworks overlapping it in one bus each."""

    master: Network
    subnets: tuple[tuple[Network, Coupling], ...]

    def __post_init__(self):
        seen = set()
        for sub, cpl in self.subnets:
            if cpl.master_bus not in self.master._index:
                raise NetworkError(f"coupling bus {cpl.master_bus} not in master")
            sub.bus_pos(cpl.sub_bus)
            if cpl.master_bus in seen:
                raise NetworkError(
                    f"coupling bus {cpl.master_bus} used by two subnetworks"
                )
            seen.add(cpl.master_bus)

    @property
    def n_subnets(self) -> int:
        return len(self.subnets)


@dataclass
class StateVars:
    """Rectangular operating state aligned with a Network's bus/branch order.

    Bus arrays: voltage (``v_re``, ``v_im``), net injection (``p``, ``q``).
    Branch arrays: current (``i_re``, ``i_im``) and sending-end power flow
    (``fp``, ``fq``).
    """

    v_re: np.ndarray
    v_im: np.ndarray
    p: np.ndarray
    q: np.ndarray
    i_re: np.ndarray
    i_im: np.ndarray
    fp: np.ndarray
    fq: np.ndarray

    @classmethod
    def zeros(cls, net: Network) -> "StateVars":
        nb, nl = net.n_bus, net.n_branch
        return cls(*(np.zeros(nb) for _ in range(4)), *(np.zeros(nl) for _ in range(4)))

    def check_dims(self, net: Network) -> None:
        nb, nl = net.n_bus, net.n_branch
        for name in ("v_re", "v_im", "p", "q"):
            if len(getattr(self, name)) != nb:
                raise NetworkError(f"state field {name} has wrong length")
        for name in ("i_re", "i_im", "fp", "fq"):
            if len(getattr(self, name)) != nl:
                raise NetworkError(f"state field {name} has wrong length")

    def voltage(self, pos: int) -> complex:
        return complex(self.v_re[pos], self.v_im[pos])

    def current(self, k: int) -> complex:
        return complex(self.i_re[k], self.i_im[k])

    def flow(self, k: int) -> complex:
        return complex(self.fp[k], self.fq[k])


def branch_current(v_i: complex, v_j: complex, y: complex) -> complex:
    """Series current y * (V_i - V_j) on a branch i->j."""
    return y * (v_i - v_j)


def branch_power(v_i: complex, i_ij: complex) -> complex:
    """Sending-end complex power V_i * conj(I_ij)."""
    return v_i * i_ij.conjugate()


def bus_injection(net: Network, state: StateVars, bus_id: int) -> complex:
    """Net power injection at a bus implied by the branch flows.

    Outgoing flows count positively; each incoming flow is received net of
    the series loss z * |I|^2 on its branch.
    """
    state.check_dims(net)
    net.bus_pos(bus_id)
    total = 0j
    for k, br in enumerate(net.branches):
        if br.from_bus == bus_id:
            total += state.flow(k)
        if br.to_bus == bus_id:
            i_k = state.current(k)
            total -= state.flow(k) - br.z * (i_k.real**2 + i_k.imag**2)
    return total


def coupling_injection(net: Network, state: StateVars, coupling_bus: int) -> complex:
    """Net flow from one side of a decomposition into its coupling bus.

    Identical to :func:`bus_injection` evaluated on the side-restricted
    network; provided under its own name because callers pass the master or
    subnetwork half rather than the full network.
    """
    return bus_injection(net, state, coupling_bus)


def state_from_voltages(net: Network, voltages: np.ndarray) -> StateVars:
    """Build a physically consistent state from complex bus voltages.

    Currents, flows, and injections follow from the voltage profile, so the
    result satisfies the branch-flow equations exactly.
    """
    if len(voltages) != net.n_bus:
        raise NetworkError("voltage vector length mismatch")
    st = StateVars.zeros(net)
    st.v_re = np.asarray(voltages).real.astype(float)
    st.v_im = np.asarray(voltages).imag.astype(float)
    for k, br in enumerate(net.branches):
        vi = complex(voltages[net.bus_pos(br.from_bus)])
        vj = complex(voltages[net.bus_pos(br.to_bus)])
        i_k = branch_current(vi, vj, br.y)
        s_k = branch_power(vi, i_k)
        st.i_re[k], st.i_im[k] = i_k.real, i_k.imag
        st.fp[k], st.fq[k] = s_k.real, s_k.imag
    for pos, bus in enumerate(net.buses):
        inj = bus_injection(net, st, bus.id)
        st.p[pos], st.q[pos] = inj.real, inj.imag
    return st


def split_state(
    decomp: Decomposition, net: Network, state: StateVars
) -> list[tuple[StateVars, StateVars]]:
    """Restrict a full-network state to (master, subnet) pairs per subnetwork.

    Bus variables are copied to both sides that contain the bus; branch
    variables follow the branch.  Injections on each side are recomputed from
    the side's own branches, which is what the boundary conditions compare.
    """
    out = []
    master = decomp.master
    for sub, _cpl in decomp.subnets:
        m_st = _restrict(master, net, state)
        s_st = _restrict(sub, net, state)
        out.append((m_st, s_st))
    return out


def _restrict(side: Network, net: Network, state: StateVars) -> StateVars:
    st = StateVars.zeros(side)
    for pos, bus in enumerate(side.buses):
        src = net.bus_pos(bus.id)
        st.v_re[pos] = state.v_re[src]
        st.v_im[pos] = state.v_im[src]
    branch_of = {(br.from_bus, br.to_bus): k for k, br in enumerate(net.branches)}
    for k, br in enumerate(side.branches):
        src = branch_of[(br.from_bus, br.to_bus)]
        st.i_re[k] = state.i_re[src]
        st.i_im[k] = state.i_im[src]
        st.fp[k] = state.fp[src]
        st.fq[k] = state.fq[src]
    for pos, bus in enumerate(side.buses):
        inj = bus_injection(side, st, bus.id)
        st.p[pos], st.q[pos] = inj.real, inj.imag
    return st


def decompose(
    net: Network, attachments: list[tuple[int, set[int]]]
) -> Decomposition:
    """Split a network into a master plus one subnetwork per attachment.

    Each attachment is ``(coupling_bus, bus_set)`` where ``bus_set`` contains
    the coupling bus and the buses that move into the subnetwork.  Subnetwork
    bus sets must be pairwise disjoint and may intersect the remaining master
    set only in the coupling bus; no branch may straddle the cut anywhere
    else.  With no attachments the master is the whole network.
    """
    all_ids = {b.id for b in net.buses}
    interior: set[int] = set()
    for cpl_bus, bus_set in attachments:
        if cpl_bus not in bus_set:
            raise NetworkError(f"coupling bus {cpl_bus} not in its subnetwork set")
        if not bus_set <= all_ids:
            raise NetworkError("subnetwork set references unknown buses")
        inner = bus_set - {cpl_bus}
        if interior & inner:
            raise NetworkError("subnetwork bus sets overlap")
        interior |= inner
    couplings = [c for c, _ in attachments]
    if len(set(couplings)) != len(couplings):
        raise NetworkError("duplicate coupling bus")
    master_ids = all_ids - interior
    for cpl_bus, bus_set in attachments:
        if bus_set & master_ids != {cpl_bus}:
            raise NetworkError(
                f"subnetwork at bus {cpl_bus} overlaps the master in more than one bus"
            )
    if net.slack_bus not in master_ids:
        raise NetworkError("slack bus must remain in the master network")

    def take(ids: set[int], slack: int) -> Network:
        buses = tuple(b for b in net.buses if b.id in ids)
        branches = tuple(
            br for br in net.branches if br.from_bus in ids and br.to_bus in ids
        )
        return Network(buses, branches, slack)

    # every branch must land wholly on one side
    for br in net.branches:
        for cpl_bus, bus_set in attachments:
            inner = bus_set - {cpl_bus}
            ends_in = (br.from_bus in inner) + (br.to_bus in inner)
            if ends_in == 1 and not (
                br.from_bus == cpl_bus or br.to_bus == cpl_bus
            ):
                if br.from_bus in master_ids or br.to_bus in master_ids:
                    raise NetworkError(
                        f"branch {br.from_bus}->{br.to_bus} crosses the cut at "
                        f"bus {cpl_bus} away from the coupling bus"
                    )

    master = take(master_ids, net.slack_bus)
    subnets = []
    for cpl_bus, bus_set in attachments:
        sub = take(set(bus_set), cpl_bus)
        if not sub._connected():
            raise NetworkError(f"subnetwork at bus {cpl_bus} is disconnected")
        subnets.append((sub, Coupling(cpl_bus, cpl_bus)))
    return Decomposition(master, tuple(subnets))


def recompose(decomp: Decomposition) -> Network:
    """Merge coupling buses to recover the undecomposed network.

    The master-side copy of each coupling bus is authoritative for bus data;
    the subnetwork side contributes its interior buses and all its branches.
    """
    buses = list(decomp.master.buses)
    ids = {b.id for b in buses}
    branches = list(decomp.master.branches)
    for sub, cpl in decomp.subnets:
        for b in sub.buses:
            if b.id == cpl.sub_bus:
                continue
            if b.id in ids:
                raise NetworkError(f"bus id {b.id} appears in two components")
            ids.add(b.id)
            buses.append(b)
        branches.extend(sub.branches)
    return Network(tuple(buses), tuple(branches), decomp.master.slack_bus)


def scale_loads(net: Network, multipliers: dict[int, float]) -> Network:
    """Scale bus loads, shifting the folded injection bounds to match.

    A bus whose load L is scaled to m*L keeps its generation range: the
    injection bounds move by (1 - m) * L so that ``s_min = gen_min - m*L``
    still holds.
    """
    new_buses = []
    for b in net.buses:
        m = multipliers.get(b.id)
        if m is None or b.load == 0:
            new_buses.append(b)
            continue
        shift = (1.0 - m) * b.load
        new_buses.append(
            Bus(
                id=b.id,
                v_min=b.v_min,
                v_max=b.v_max,
                s_min=b.s_min + shift,
                s_max=b.s_max + shift,
                load=m * b.load,
                gen_cost=b.gen_cost,
            )
        )
    return Network(tuple(new_buses), net.branches, net.slack_bus)
