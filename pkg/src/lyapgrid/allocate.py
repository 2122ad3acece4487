"""Per-node renewable perturbation experiments and greedy log-det allocation.

Each experiment scales the renewable injection at one bus, simulates the
disturbed system with tangent maps, and condenses the result into a
deformation tensor. Summing tensors over a node set and taking the
log-determinant gives a monotone submodular set function that is maximized
greedily.
"""
from __future__ import annotations

import itertools
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .dynamics import ControlInput, MachineModel
from .errors import InputError, NumericalError
from .integrator import PowerSystemODE, SimConfig, Trajectory, settling_time, simulate
from .lyapunov import (DeformationTensor, StateSelector, deformation_tensor, flow_from_products,
                       flow_from_qr, full_selector, global_selector, node_selector,
                       qr_accumulate, tensor_exponent)
from .netmodel import PowerNetwork
from .powerflow import solve_powerflow

DEFAULT_RIDGE = 1e-8
BRUTE_FORCE_LIMIT = 20


@dataclass(frozen=True)
class ExperimentConfig:
    """Settings shared by every per-node experiment.

    ``rer_base_p``/``rer_base_q`` is the pre-disturbance renewable injection
    placed at a perturbed bus that declares none of its own.
    """

    sim: SimConfig = field(default_factory=SimConfig)
    rer_base_p: float = 0.5
    rer_base_q: float = 0.0
    pf_tol: float = 1e-10
    pf_max_iter: int = 20
    literal_qbalance: bool = False
    literal_governor: bool = False


@dataclass(frozen=True)
class PerturbationSpec:
    node: int
    beta: float
    base_injection: tuple

    def __post_init__(self):
        if not (0.0 <= self.beta <= 100.0):
            raise InputError(f"beta = {self.beta}% is outside [0, 100]")

    @property
    def perturbed_injection(self) -> tuple:
        k = 1.0 + self.beta / 100.0
        return (k * self.base_injection[0], k * self.base_injection[1])


def perturbation_spec(net: PowerNetwork, node: int, beta: float,
                      cfg: ExperimentConfig) -> PerturbationSpec:
    bus = net.bus(node)
    if bus.renewable_p != 0.0 or bus.renewable_q != 0.0:
        base = (bus.renewable_p, bus.renewable_q)
    else:
        base = (cfg.rer_base_p, cfg.rer_base_q)
    return PerturbationSpec(node=node, beta=float(beta), base_injection=base)


@dataclass
class Experiment:
    """A disturbed system ready to simulate.

    ``model`` carries the post-disturbance injections; ``x0`` keeps the
    pre-disturbance machine states with the network states re-solved.
    """

    spec: PerturbationSpec | None
    model: MachineModel
    u: ControlInput
    x0: np.ndarray
    x_equilibrium: np.ndarray

    @property
    def system(self) -> PowerSystemODE:
        return PowerSystemODE(self.model, self.u)


def prepare_experiment(net: PowerNetwork, spec: PerturbationSpec,
                       cfg: ExperimentConfig) -> Experiment:
    before = net.with_renewables({spec.node: spec.base_injection})
    ss = solve_powerflow(before, tol=cfg.pf_tol, max_iter=cfg.pf_max_iter,
                         literal_q=cfg.literal_qbalance)
    base_model = MachineModel(before, cfg.literal_qbalance, cfg.literal_governor)
    state, u = base_model.consistent_initialization(ss)
    after = net.with_renewables({spec.node: spec.perturbed_injection})
    model = MachineModel(after, cfg.literal_qbalance, cfg.literal_governor)
    x0 = model.solve_algebraic(state.x)
    return Experiment(spec=spec, model=model, u=u, x0=x0, x_equilibrium=state.x)


def run_experiment(net: PowerNetwork, node: int, beta: float, cfg: ExperimentConfig,
                   variational: bool = True) -> tuple[Experiment, Trajectory]:
    exp = prepare_experiment(net, perturbation_spec(net, node, beta, cfg), cfg)
    return exp, simulate(exp.system, exp.x0, cfg.sim, variational=variational)


def run_equilibrium(net: PowerNetwork, cfg: ExperimentConfig,
                    variational: bool = False) -> tuple[Experiment, Trajectory]:
    """Simulate the undisturbed case from its own power-flow operating point."""
    ss = solve_powerflow(net, tol=cfg.pf_tol, max_iter=cfg.pf_max_iter,
                         literal_q=cfg.literal_qbalance)
    model = MachineModel(net, cfg.literal_qbalance, cfg.literal_governor)
    state, u = model.consistent_initialization(ss)
    exp = Experiment(spec=None, model=model, u=u, x0=state.x, x_equilibrium=state.x)
    return exp, simulate(exp.system, exp.x0, cfg.sim, variational=variational)


def frequency_settling(exp: Experiment, traj: Trajectory, band: float = 0.02) -> float:
    omega = traj.states[:, exp.model.layout.block("omega")]
    return settling_time(traj.times, omega, band)


def per_node_tensor(net: PowerNetwork, node: int, beta: float,
                    cfg: ExperimentConfig) -> DeformationTensor:
    """Global-selector deformation tensor of the experiment at ``node``."""
    exp, traj = run_experiment(net, node, beta, cfg)
    return deformation_tensor(flow_from_qr(traj), global_selector(exp.model.layout))


# --------------------------------------------------------------------------
# sweeps

@dataclass(frozen=True)
class NodeResult:
    node: int
    tensor: np.ndarray | None
    exponent: float | None
    settling: float | None
    max_nr_iterations: int | None
    error: str | None = None

    @property
    def failed(self) -> bool:
        return self.error is not None


def _node_job(args) -> NodeResult:
    net, node, beta, cfg = args
    try:
        exp, traj = run_experiment(net, node, beta, cfg)
        flow = flow_from_qr(traj)
        layout = exp.model.layout
        tensor = deformation_tensor(flow, global_selector(layout)).matrix
        lam = tensor_exponent(deformation_tensor(flow, node_selector(layout, node)))
        return NodeResult(node=node, tensor=tensor, exponent=lam,
                          settling=frequency_settling(exp, traj),
                          max_nr_iterations=int(traj.nr_iterations.max()))
    except NumericalError as exc:
        return NodeResult(node=node, tensor=None, exponent=None, settling=None,
                          max_nr_iterations=None, error=f"{type(exc).__name__}: {exc}")


def sweep_nodes(net: PowerNetwork, beta: float, cfg: ExperimentConfig, nodes=None,
                workers: int = 1) -> list[NodeResult]:
    """Run the experiment at every node; results come back in ascending node order."""
    nodes = sorted(net.bus_ids if nodes is None else nodes)
    jobs = [(net, n, beta, cfg) for n in nodes]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_node_job, jobs))
    else:
        results = [_node_job(j) for j in jobs]
    return results


# --------------------------------------------------------------------------
# set function and maximization

@dataclass(frozen=True)
class NodeTensorBank:
    tensors: dict
    horizon: int = 0
    selector_policy: str = "global"

    def __post_init__(self):
        shapes = {np.shape(t) for t in self.tensors.values()}
        if len(shapes) > 1:
            raise InputError("all tensors in a bank must share one shape")
        for t in self.tensors.values():
            if np.shape(t)[0] != np.shape(t)[1]:
                raise InputError("tensors must be square")

    @property
    def nodes(self) -> list[int]:
        return sorted(self.tensors)

    @property
    def dim(self) -> int:
        return next(iter(self.tensors.values())).shape[0] if self.tensors else 0

    @classmethod
    def from_results(cls, results, horizon: int) -> "NodeTensorBank":
        return cls({r.node: r.tensor for r in results if not r.failed}, horizon)


def set_objective(S, bank: NodeTensorBank, ridge: float = DEFAULT_RIDGE) -> float:
    """``log det(sum_{i in S} Xi_i + ridge I) - n log ridge`` (zero on the empty set)."""
    if ridge <= 0:
        raise InputError("ridge must be positive")
    n = bank.dim
    total = ridge * np.eye(n)
    for i in S:
        total = total + bank.tensors[i]
    sign, logdet = np.linalg.slogdet(total)
    if sign <= 0:
        raise NumericalError("summed tensor is not positive definite")
    return float(logdet - n * math.log(ridge))


@dataclass(frozen=True)
class AllocationResult:
    ordered_nodes: list
    marginal_gains: list
    objective_trace: list
    failed_nodes: list = field(default_factory=list)


def greedy_allocate(bank: NodeTensorBank, s: int, ridge: float = DEFAULT_RIDGE) -> AllocationResult:
    """Pick ``s`` nodes one at a time, each maximizing the objective gain.

    Equal gains go to the smaller bus id. The order of the result runs from
    most critical (first pick) to most stable (last pick).
    """
    nodes = bank.nodes
    if not 0 <= s <= len(nodes):
        raise InputError(f"s = {s} outside [0, {len(nodes)}]")
    chosen, gains, trace = [], [], []
    current = 0.0
    for _ in range(s):
        best, best_val = None, -math.inf
        for a in nodes:
            if a in chosen:
                continue
            val = set_objective(chosen + [a], bank, ridge)
            if val > best_val:
                best, best_val = a, val
        chosen.append(best)
        gains.append(best_val - current)
        trace.append(best_val)
        current = best_val
    return AllocationResult(chosen, gains, trace)


def allocate_with_failures(results, s: int, ridge: float = DEFAULT_RIDGE,
                           horizon: int = 0) -> AllocationResult:
    """Greedy order over successful experiments with failed nodes placed first.

    A node whose simulation failed is treated as the least stable, so it leads
    the ordering ahead of every greedy pick.
    """
    failed = sorted(r.node for r in results if r.failed)
    bank = NodeTensorBank.from_results(results, horizon)
    total = len(failed) + len(bank.nodes)
    if not 0 <= s <= total:
        raise InputError(f"s = {s} outside [0, {total}]")
    lead = failed[:s]
    rest = greedy_allocate(bank, s - len(lead), ridge)
    pad = [math.nan] * len(lead)
    return AllocationResult(lead + rest.ordered_nodes, pad + rest.marginal_gains,
                            pad + rest.objective_trace, failed)


def brute_force_allocate(bank: NodeTensorBank, s: int, ridge: float = DEFAULT_RIDGE):
    """Exhaustive optimum over all size-``s`` subsets; returns ``(set, value)``."""
    nodes = bank.nodes
    if len(nodes) > BRUTE_FORCE_LIMIT:
        raise InputError(f"brute force limited to {BRUTE_FORCE_LIMIT} nodes")
    if not 0 <= s <= len(nodes):
        raise InputError(f"s = {s} outside [0, {len(nodes)}]")
    best, best_val = None, -math.inf
    for combo in itertools.combinations(nodes, s):
        val = set_objective(combo, bank, ridge)
        if val > best_val:
            best, best_val = list(combo), val
    return best, best_val


# --------------------------------------------------------------------------
# spectrum-sum identity

@dataclass(frozen=True)
class SumIdentityCheck:
    """Sum of tensor exponents compared through independent routes.

    ``lhs``: log det of the QR-path tensor from its eigenvalues.
    ``rhs``: ``2 (N-1)`` times the sum of per-eigenvalue exponents.
    ``logdet_direct``: log det of the same tensor from an LU factorization.
    ``sum_qr`` / ``sum_eigen``: exponent sums from the QR-path tensor and from
    the tensor built by multiplying raw step maps.
    ``sum_spectrum``: sum of the discrete-QR spectrum (endpoint rates).
    """

    lhs: float
    rhs: float
    rel_error: float
    logdet_direct: float
    same_tensor_rel_error: float
    sum_qr: float
    sum_eigen: float
    cross_path_rel_error: float
    sum_spectrum: float
    steps: int


def _log_eigs(matrix):
    w = np.linalg.eigvalsh(matrix)
    if w[0] <= 0:
        raise NumericalError(f"deformation tensor is not positive definite (min eig {w[0]:.3e})")
    return np.log(w)


def verify_theorem1(traj, selector: StateSelector | None = None,
                    endpoint: bool = False) -> SumIdentityCheck:
    """Cross-check the exponent sum against the log-determinant of the tensor.

    ``traj`` is a :class:`Trajectory` or a stack of step maps. The selector
    defaults to every state.
    """
    maps = traj.step_maps if isinstance(traj, Trajectory) else np.asarray(traj)
    if maps is None:
        raise InputError("trajectory carries no tangent maps; simulate with variational=True")
    n = maps.shape[1]
    selector = full_selector(n) if selector is None else selector
    k = maps.shape[0]
    t_qr = deformation_tensor(flow_from_qr(maps), selector, endpoint).matrix
    t_raw = deformation_tensor(flow_from_products(maps), selector, endpoint).matrix
    logs = _log_eigs(t_qr)
    lambdas = logs / (2 * k)
    lhs = float(np.sum(logs))
    rhs = float(2 * k * np.sum(lambdas))
    sign, direct = np.linalg.slogdet(t_qr)
    if sign <= 0:
        raise NumericalError("deformation tensor is not positive definite")
    sum_qr = float(np.sum(lambdas))
    sum_eigen = float(np.sum(_log_eigs(t_raw)) / (2 * k))
    spectrum = qr_accumulate(maps)
    return SumIdentityCheck(
        lhs=lhs, rhs=rhs, rel_error=abs(lhs - rhs) / max(abs(lhs), 1e-300),
        logdet_direct=float(direct),
        same_tensor_rel_error=abs(sum_qr - direct / (2 * k)) / max(abs(sum_qr), 1e-300),
        sum_qr=sum_qr, sum_eigen=sum_eigen,
        cross_path_rel_error=abs(sum_qr - sum_eigen) / max(abs(sum_qr), 1e-300),
        sum_spectrum=spectrum.total, steps=k)
