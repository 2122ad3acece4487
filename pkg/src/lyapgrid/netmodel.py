"""Network data model, MATPOWER-subset importer, native JSON format and
bus admittance construction.

All electrical quantities inside a :class:`PowerNetwork` are per unit on the
network MVA base. Renewable injections are stored separately from loads and
enter the power balance as negative load (``renewable_p > 0`` injects power).
"""
from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field, replace, asdict
from enum import Enum
from pathlib import Path
from typing import Mapping

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .errors import CaseParseError, InputError, NetworkValidationError

OMEGA0 = 120.0 * math.pi
NETWORK_SCHEMA = "lyapgrid.network/1"


class BusKind(str, Enum):
    SLACK = "slack"
    GENERATOR = "generator"
    LOAD = "load"


@dataclass(frozen=True)
class Bus:
    id: int
    kind: BusKind
    base_voltage_kv: float = 1.0
    load_p: float = 0.0
    load_q: float = 0.0
    renewable_p: float = 0.0
    renewable_q: float = 0.0
    shunt_g: float = 0.0
    shunt_b: float = 0.0
    v_set: float = 1.0

    def __post_init__(self):
        if self.base_voltage_kv <= 0:
            raise NetworkValidationError(f"bus {self.id}: base voltage must be positive")
        if self.v_set <= 0:
            raise NetworkValidationError(f"bus {self.id}: voltage setpoint must be positive")


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    resistance: float
    reactance: float
    line_charging: float = 0.0

    def __post_init__(self):
        if self.from_bus == self.to_bus:
            raise NetworkValidationError(f"branch {self.from_bus}-{self.to_bus} is a self loop")
        if self.resistance < 0 or self.line_charging < 0:
            raise NetworkValidationError(
                f"branch {self.from_bus}-{self.to_bus}: negative resistance or charging")


@dataclass(frozen=True)
class GeneratorParams:
    """Fourth-order machine constants.

    ``M`` and ``D`` are in pu*s^2 with rotor speed in rad/s, i.e. ``M = 2H/omega0``
    and ``D = D_pu/omega0`` for the usual per-unit inertia and damping.
    """

    M: float
    D: float
    x_d: float
    x_q: float
    x_d_prime: float
    T_d0_prime: float
    T_CH: float = 0.2
    R_D: float = 0.2

    def __post_init__(self):
        positive = ("M", "x_d", "x_q", "x_d_prime", "T_d0_prime", "T_CH", "R_D")
        for name in positive:
            if not getattr(self, name) > 0:
                raise NetworkValidationError(f"generator parameter {name} must be positive")
        if self.D < 0:
            raise NetworkValidationError("generator damping D must be non-negative")
        if not self.x_d_prime < self.x_d:
            raise NetworkValidationError("transient reactance x_d_prime must be below x_d")

    @classmethod
    def from_mapping(cls, data: Mapping, omega0: float = OMEGA0) -> "GeneratorParams":
        data = dict(data)
        if "M" not in data:
            if "H" not in data:
                raise InputError("generator parameters need either M or H")
            data["M"] = 2.0 * float(data.pop("H")) / omega0
        data.pop("H", None)
        if "D" not in data:
            data["D"] = float(data.pop("D_pu", 0.0)) / omega0
        data.pop("D_pu", None)
        unknown = set(data) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise InputError(f"unknown generator parameters: {sorted(unknown)}")
        return cls(**{k: float(v) for k, v in data.items()})


# Used for any generator the sidecar file does not mention.
DEFAULT_GENERATOR = {"H": 5.0, "D_pu": 2.0, "x_d": 1.8, "x_q": 1.7, "x_d_prime": 0.3,
                     "T_d0_prime": 8.0, "T_CH": 0.2, "R_D": 0.2}


@dataclass(frozen=True)
class Generator:
    bus: int
    p_set: float
    v_set: float
    params: GeneratorParams


@dataclass(frozen=True)
class AdmittanceMatrix:
    G: np.ndarray
    B: np.ndarray

    @property
    def Y(self) -> np.ndarray:
        return self.G + 1j * self.B


@dataclass(frozen=True)
class PowerNetwork:
    buses: tuple
    branches: tuple
    generators: tuple
    base_mva: float = 100.0
    name: str = ""
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "buses", tuple(self.buses))
        object.__setattr__(self, "branches", tuple(self.branches))
        object.__setattr__(self, "generators", tuple(self.generators))
        object.__setattr__(self, "_index", {b.id: i for i, b in enumerate(self.buses)})
        validate_network(self)

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @property
    def n_gen(self) -> int:
        return len(self.generators)

    @property
    def bus_ids(self) -> list[int]:
        return [b.id for b in self.buses]

    def index_of(self, bus_id: int) -> int:
        try:
            return self._index[bus_id]
        except KeyError:
            raise InputError(f"unknown bus id {bus_id}") from None

    def bus(self, bus_id: int) -> Bus:
        return self.buses[self.index_of(bus_id)]

    @property
    def slack_index(self) -> int:
        return next(i for i, b in enumerate(self.buses) if b.kind is BusKind.SLACK)

    @property
    def gen_bus_index(self) -> np.ndarray:
        return np.array([self.index_of(g.bus) for g in self.generators], dtype=int)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(b, name) for b in self.buses], dtype=float)

    def with_renewables(self, injections: Mapping[int, tuple[float, float]]) -> "PowerNetwork":
        """Copy of the network with renewable injections replaced at the given buses."""
        buses = list(self.buses)
        for bus_id, (p, q) in injections.items():
            i = self.index_of(bus_id)
            buses[i] = replace(buses[i], renewable_p=float(p), renewable_q=float(q))
        return replace(self, buses=tuple(buses))


def validate_network(net: PowerNetwork) -> None:
    ids = [b.id for b in net.buses]
    if not ids:
        raise NetworkValidationError("network has no buses")
    if len(set(ids)) != len(ids):
        dup = sorted({i for i in ids if ids.count(i) > 1})
        raise NetworkValidationError(f"duplicate bus ids: {dup}")
    slacks = [b.id for b in net.buses if b.kind is BusKind.SLACK]
    if len(slacks) != 1:
        raise NetworkValidationError(f"expected exactly one slack bus, found {len(slacks)}")
    known = set(ids)
    for br in net.branches:
        if br.from_bus not in known or br.to_bus not in known:
            raise NetworkValidationError(
                f"branch {br.from_bus}-{br.to_bus} references a missing bus")
    gen_buses = [g.bus for g in net.generators]
    if len(set(gen_buses)) != len(gen_buses):
        raise NetworkValidationError("at most one generator per bus is supported")
    for g in net.generators:
        if g.bus not in known:
            raise NetworkValidationError(f"generator at missing bus {g.bus}")
    for b in net.buses:
        has_gen = b.id in gen_buses
        if b.kind is BusKind.LOAD and has_gen:
            raise NetworkValidationError(f"bus {b.id} has a generator but is typed as load")
        if b.kind is not BusKind.LOAD and not has_gen:
            raise NetworkValidationError(f"bus {b.id} is typed {b.kind.value} but has no generator")
    _check_load_reachability(net)


def _check_load_reachability(net: PowerNetwork) -> None:
    # every load must have a path to some generator bus
    n = net.n_bus
    rows = [net._index[br.from_bus] for br in net.branches]
    cols = [net._index[br.to_bus] for br in net.branches]
    adj = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    _, labels = connected_components(adj, directed=False)
    powered = {labels[net._index[g.bus]] for g in net.generators}
    stranded = [b.id for i, b in enumerate(net.buses) if labels[i] not in powered]
    if stranded:
        raise NetworkValidationError(f"buses without a path to a generator: {stranded}")


def build_admittance(net: PowerNetwork) -> AdmittanceMatrix:
    """Bus admittance matrix from the pi-model of every branch plus bus shunts."""
    n = net.n_bus
    Y = np.zeros((n, n), dtype=complex)
    for br in net.branches:
        if br.resistance == 0 and br.reactance == 0:
            raise NetworkValidationError(
                f"branch {br.from_bus}-{br.to_bus} has zero impedance")
        if br.reactance == 0:
            raise NetworkValidationError(f"branch {br.from_bus}-{br.to_bus} has zero reactance")
        i, j = net.index_of(br.from_bus), net.index_of(br.to_bus)
        ys = 1.0 / complex(br.resistance, br.reactance)
        ysh = 0.5j * br.line_charging
        Y[i, i] += ys + ysh
        Y[j, j] += ys + ysh
        Y[i, j] -= ys
        Y[j, i] -= ys
    Y[np.diag_indices(n)] += net.column("shunt_g") + 1j * net.column("shunt_b")
    return AdmittanceMatrix(G=Y.real.copy(), B=Y.imag.copy())


# --------------------------------------------------------------------------
# generator parameter sidecar

def load_generator_params(source, gen_buses, omega0: float = OMEGA0) -> dict[int, GeneratorParams]:
    """Resolve machine constants for every generator bus.

    ``source`` is a path to a sidecar JSON file, an already-decoded mapping,
    or None for defaults. Entries given under ``"defaults"`` fill gaps in the
    per-generator records.
    """
    if source is None:
        data = {}
    elif isinstance(source, Mapping):
        data = source
    else:
        try:
            data = json.loads(Path(source).read_text())
        except json.JSONDecodeError as exc:
            raise InputError(f"{source}: invalid JSON ({exc})") from None
    base = dict(DEFAULT_GENERATOR)
    base.update(data.get("defaults", {}))
    per_gen = {int(k): v for k, v in data.get("generators", {}).items()}
    unknown = set(per_gen) - set(gen_buses)
    if unknown:
        raise InputError(f"sidecar lists generators at buses without a generator: {sorted(unknown)}")
    out = {}
    for bus in gen_buses:
        entry = dict(base)
        record = per_gen.get(bus, {})
        # a record that names M/D explicitly overrides H/D_pu coming from defaults
        if "M" in record:
            entry.pop("H", None)
        if "D" in record:
            entry.pop("D_pu", None)
        entry.update(record)
        out[bus] = GeneratorParams.from_mapping(entry, omega0)
    return out


def generator_params_mapping(net: PowerNetwork) -> dict:
    return {"generators": {str(g.bus): asdict(g.params) for g in net.generators}}


# --------------------------------------------------------------------------
# MATPOWER subset

_MATRIX_START = re.compile(r"^\s*mpc\.(\w+)\s*=\s*\[(.*)$")
_SCALAR = re.compile(r"^\s*mpc\.(\w+)\s*=\s*([^\[;]+);")


def _strip_comment(line: str) -> str:
    pos = line.find("%")
    return line if pos < 0 else line[:pos]


def _read_tables(text: str) -> tuple[dict, dict]:
    tables: dict[str, list[tuple[int, list[float]]]] = {}
    scalars: dict[str, str] = {}
    current = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = _strip_comment(raw)
        if current is None:
            m = _MATRIX_START.match(line)
            if m:
                current = m.group(1)
                tables[current] = []
                line = m.group(2)
            else:
                s = _SCALAR.match(line)
                if s:
                    scalars[s.group(1)] = s.group(2).strip()
                continue
        closed = "]" in line
        if closed:
            line = line[: line.index("]")]
        for chunk in line.split(";"):
            tokens = chunk.replace(",", " ").split()
            if not tokens:
                continue
            try:
                tables[current].append((lineno, [float(t) for t in tokens]))
            except ValueError:
                raise CaseParseError(f"non-numeric entry in mpc.{current}: {chunk.strip()!r}",
                                     lineno) from None
        if closed:
            current = None
    if current is not None:
        raise CaseParseError(f"unterminated table mpc.{current}")
    return tables, scalars


def _as_matrix(name: str, rows, min_cols: int) -> np.ndarray:
    if not rows:
        raise CaseParseError(f"mpc.{name} is empty")
    width = len(rows[0][1])
    for lineno, values in rows:
        if len(values) != width:
            raise CaseParseError(f"mpc.{name}: expected {width} columns, got {len(values)}",
                                 lineno)
    if width < min_cols:
        raise CaseParseError(f"mpc.{name} needs at least {min_cols} columns, got {width}",
                             rows[0][0])
    return np.array([v for _, v in rows], dtype=float)


def parse_matpower_case(text: str, gen_params=None, name: str = "") -> PowerNetwork:
    """Parse the ``mpc.bus``/``mpc.gen``/``mpc.branch`` tables of a MATPOWER case.

    An optional ``mpc.rer`` table (bus, P in MW, Q in MVAr) declares renewable
    injections. Generator dynamics come from ``gen_params`` (sidecar path,
    mapping or None for defaults).
    """
    tables, scalars = _read_tables(text)
    for required in ("bus", "gen", "branch"):
        if required not in tables:
            raise CaseParseError(f"missing table mpc.{required}")
    base = float(scalars.get("baseMVA", 100.0))
    bus = _as_matrix("bus", tables["bus"], 10)
    gen = _as_matrix("gen", tables["gen"], 8)
    branch = _as_matrix("branch", tables["branch"], 11)

    gen = gen[gen[:, 7] > 0]
    gen_buses = [int(g[0]) for g in gen]
    params = load_generator_params(gen_params, gen_buses)
    generators = [Generator(bus=int(g[0]), p_set=g[1] / base, v_set=g[5], params=params[int(g[0])])
                  for g in gen]

    rer = {}
    if "rer" in tables and tables["rer"]:
        for row in _as_matrix("rer", tables["rer"], 3):
            rer[int(row[0])] = (row[1] / base, row[2] / base)

    buses = []
    vset = {g.bus: g.v_set for g in generators}
    for row in bus:
        bid, btype = int(row[0]), int(row[1])
        if btype == 4:
            raise NetworkValidationError(f"bus {bid}: isolated buses are not supported")
        if btype == 3:
            kind = BusKind.SLACK
        elif bid in vset:
            kind = BusKind.GENERATOR
        else:
            kind = BusKind.LOAD
        p_r, q_r = rer.get(bid, (0.0, 0.0))
        buses.append(Bus(id=bid, kind=kind, base_voltage_kv=row[9] if row[9] > 0 else 1.0,
                         load_p=row[2] / base, load_q=row[3] / base,
                         renewable_p=p_r, renewable_q=q_r,
                         shunt_g=row[4] / base, shunt_b=row[5] / base,
                         v_set=vset.get(bid, 1.0)))

    branches = []
    for row in branch:
        if row[10] <= 0:
            continue
        ratio, shift = row[8], row[9]
        if ratio not in (0.0, 1.0):
            raise NetworkValidationError(
                f"branch {int(row[0])}-{int(row[1])}: off-nominal tap ratio {ratio} unsupported")
        if shift != 0.0:
            raise NetworkValidationError(
                f"branch {int(row[0])}-{int(row[1])}: phase shifters unsupported")
        branches.append(Branch(int(row[0]), int(row[1]), row[2], row[3], row[4]))
    return PowerNetwork(buses=buses, branches=branches, generators=generators,
                        base_mva=base, name=name)


def _num(v: float) -> str:
    v = float(v)
    return str(int(v)) if v.is_integer() and abs(v) < 1e15 else repr(v)


def _mw(pu: float, base: float) -> float:
    """MW value that divides back to exactly ``pu`` (nudged by ulps when the product rounds)."""
    v = float(pu) * base
    for _ in range(64):
        back = v / base
        if back == pu:
            return v
        v = np.nextafter(v, np.inf if back < pu else -np.inf)
    return float(pu) * base


def to_matpower(net: PowerNetwork) -> str:
    """Serialize back to the MATPOWER subset (generator dynamics are not included)."""
    base = net.base_mva
    code = {BusKind.SLACK: 3, BusKind.GENERATOR: 2, BusKind.LOAD: 1}
    name = net.name or "case"
    out = [f"function mpc = {name}", "mpc.version = '2';", f"mpc.baseMVA = {_num(base)};",
           "%\tbus_i\ttype\tPd\tQd\tGs\tBs\tarea\tVm\tVa\tbaseKV\tzone\tVmax\tVmin",
           "mpc.bus = ["]
    for b in net.buses:
        row = [b.id, code[b.kind], _mw(b.load_p, base), _mw(b.load_q, base), _mw(b.shunt_g, base),
               _mw(b.shunt_b, base), 1, b.v_set, 0, b.base_voltage_kv, 1, 1.1, 0.9]
        out.append("\t" + "\t".join(_num(v) for v in row) + ";")
    out += ["];", "%\tbus\tPg\tQg\tQmax\tQmin\tVg\tmBase\tstatus", "mpc.gen = ["]
    for g in net.generators:
        row = [g.bus, _mw(g.p_set, base), 0, 9999, -9999, g.v_set, base, 1]
        out.append("\t" + "\t".join(_num(v) for v in row) + ";")
    out += ["];", "%\tfbus\ttbus\tr\tx\tb\trateA\trateB\trateC\tratio\tangle\tstatus",
            "mpc.branch = ["]
    for br in net.branches:
        row = [br.from_bus, br.to_bus, br.resistance, br.reactance, br.line_charging,
               0, 0, 0, 0, 0, 1]
        out.append("\t" + "\t".join(_num(v) for v in row) + ";")
    out.append("];")
    rer = [b for b in net.buses if b.renewable_p != 0 or b.renewable_q != 0]
    if rer:
        out += ["%\tbus\tP\tQ", "mpc.rer = ["]
        for b in rer:
            row = [b.id, _mw(b.renewable_p, base), _mw(b.renewable_q, base)]
            out.append("\t" + "\t".join(_num(v) for v in row) + ";")
        out.append("];")
    return "\n".join(out) + "\n"


# --------------------------------------------------------------------------
# native JSON

def network_to_dict(net: PowerNetwork) -> dict:
    return {
        "schema": NETWORK_SCHEMA,
        "name": net.name,
        "base_mva": net.base_mva,
        "buses": [{"id": b.id, "kind": b.kind.value, "base_kv": b.base_voltage_kv,
                   "load_p": b.load_p, "load_q": b.load_q,
                   "renewable_p": b.renewable_p, "renewable_q": b.renewable_q,
                   "shunt_g": b.shunt_g, "shunt_b": b.shunt_b, "v_set": b.v_set}
                  for b in net.buses],
        "branches": [{"from": br.from_bus, "to": br.to_bus, "r": br.resistance,
                      "x": br.reactance, "b": br.line_charging} for br in net.branches],
        "generators": [{"bus": g.bus, "p_set": g.p_set, "v_set": g.v_set,
                        "params": asdict(g.params)} for g in net.generators],
    }


def network_from_dict(data: Mapping, gen_params=None) -> PowerNetwork:
    if data.get("schema") != NETWORK_SCHEMA:
        raise InputError(f"unsupported network schema {data.get('schema')!r}")
    try:
        buses = [Bus(id=int(b["id"]), kind=BusKind(b["kind"]),
                     base_voltage_kv=float(b.get("base_kv", 1.0)),
                     load_p=float(b.get("load_p", 0.0)), load_q=float(b.get("load_q", 0.0)),
                     renewable_p=float(b.get("renewable_p", 0.0)),
                     renewable_q=float(b.get("renewable_q", 0.0)),
                     shunt_g=float(b.get("shunt_g", 0.0)), shunt_b=float(b.get("shunt_b", 0.0)),
                     v_set=float(b.get("v_set", 1.0)))
                 for b in data["buses"]]
        branches = [Branch(int(br["from"]), int(br["to"]), float(br["r"]), float(br["x"]),
                           float(br.get("b", 0.0))) for br in data["branches"]]
        gen_rows = data["generators"]
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError(f"malformed network JSON: {exc}") from None
    sidecar = load_generator_params(gen_params, [int(g["bus"]) for g in gen_rows])
    generators = []
    for g in gen_rows:
        bus = int(g["bus"])
        params = (GeneratorParams.from_mapping(g["params"]) if "params" in g and gen_params is None
                  else sidecar[bus])
        generators.append(Generator(bus=bus, p_set=float(g.get("p_set", 0.0)),
                                    v_set=float(g.get("v_set", 1.0)), params=params))
    return PowerNetwork(buses=buses, branches=branches, generators=generators,
                        base_mva=float(data.get("base_mva", 100.0)), name=data.get("name", ""))


def to_json(net: PowerNetwork) -> str:
    return json.dumps(network_to_dict(net), indent=2)


def load_case(path, gen_params=None) -> PowerNetwork:
    """Load a ``.m`` or ``.json`` case.

    Without an explicit ``gen_params`` a sibling ``<stem>_gen.json`` is used when present.
    """
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise InputError(f"cannot read case file {path}: {exc}") from None
    if gen_params is None:
        sidecar = path.with_name(path.stem + "_gen.json")
        if sidecar.exists():
            gen_params = sidecar
    if path.suffix == ".json":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise InputError(f"{path}: invalid JSON ({exc})") from None
        return network_from_dict(data, gen_params)
    return parse_matpower_case(text, gen_params, name=path.stem)


def bundled_case(name: str) -> Path:
    """Path of a case file shipped with the package (``case9`` or ``case39``)."""
    path = Path(__file__).parent / "cases" / f"{name}.m"
    if not path.exists():
        raise InputError(f"no bundled case named {name!r}")
    return path
