"""Finite-time Lyapunov analysis of a stored trajectory.

Spectra come from the discrete QR method: the per-step tangent maps are
re-orthonormalized every step and the logs of the diagonal of R are summed.
Deformation tensors (time-summed Cauchy-Green matrices restricted to selected
state rows) are built from the same QR factors, and per-bus exponents are read
off their largest eigenvalue.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .dynamics import StateLayout
from .errors import InputError, NumericalError
from .integrator import Trajectory
from .netmodel import PowerNetwork


def _maps(source) -> np.ndarray:
    maps = source.step_maps if isinstance(source, Trajectory) else source
    if maps is None:
        raise InputError("trajectory carries no tangent maps; simulate with variational=True")
    maps = np.asarray(maps, dtype=float)
    if maps.ndim != 3 or maps.shape[1] != maps.shape[2]:
        raise InputError("tangent maps must have shape (steps, n, n)")
    if maps.shape[0] < 1:
        raise InputError("need at least one step (N >= 2)")
    return maps


def _positive_qr(A):
    Q, R = np.linalg.qr(A)
    s = np.where(np.diag(R) < 0, -1.0, 1.0)
    return Q * s, R * s[:, None]


@dataclass(frozen=True)
class LyapunovSpectrum:
    """Exponents per unit step, sorted descending.

    ``directions[j]`` is the column of the QR basis that produced
    ``exponents[j]``; ``log_diag_accum`` is kept in basis order.
    """

    exponents: np.ndarray
    directions: np.ndarray
    horizon: int
    log_diag_accum: np.ndarray
    averaged_steps: int

    @property
    def total(self) -> float:
        return float(np.sum(self.exponents))


def qr_accumulate(source, q0=None, transient: int = 0) -> LyapunovSpectrum:
    """Discrete QR iteration ``Phi_k Q_{k-1} = Q_k R_k`` with ``diag(R_k) > 0``.

    Parameters
    ----------
    source : Trajectory or ndarray
        Tangent maps of shape ``(N-1, n, n)``.
    q0 : ndarray, optional
        Initial orthonormal basis, ``n x p``; identity by default. With
        ``p < n`` the iteration tracks the ``p`` leading exponents, or the
        exponents of the restriction when the columns span an invariant
        subspace.
    transient : int
        Leading steps propagated but left out of the average.
    """
    maps = _maps(source)
    steps, n, _ = maps.shape
    if not 0 <= transient < steps:
        raise InputError("transient must leave at least one averaged step")
    Q = np.eye(n) if q0 is None else np.asarray(q0, dtype=float)
    acc = np.zeros(Q.shape[1])
    for k in range(steps):
        if not np.all(np.isfinite(maps[k])):
            raise NumericalError(f"non-finite tangent map at step {k + 1}")
        Q, R = _positive_qr(maps[k] @ Q)
        if k >= transient:
            acc += np.log(np.diag(R))
    if not np.all(np.isfinite(acc)):
        raise NumericalError("tangent maps are rank deficient; exponent is -inf")
    rates = acc / (steps - transient)
    order = np.argsort(-rates, kind="stable")
    return LyapunovSpectrum(exponents=rates[order], directions=order, horizon=steps + 1,
                            log_diag_accum=acc, averaged_steps=steps - transient)


def max_le(spectrum: LyapunovSpectrum) -> float:
    return float(spectrum.exponents[0])


def is_stable(spectrum: LyapunovSpectrum, tol: float = 1e-9) -> bool:
    """Stable unless the maximal exponent exceeds ``tol``.

    The tolerance absorbs round-off in neutral directions (exponent exactly 0
    in exact arithmetic), which the reduced power-system ODE always has.
    """
    return max_le(spectrum) <= tol


# --------------------------------------------------------------------------
# transition matrices from the origin

def flow_from_qr(source) -> np.ndarray:
    """``Phi_0^i = Q_i (R_i ... R_1)`` for ``i = 0..N-1`` (identity first)."""
    maps = _maps(source)
    steps, n, _ = maps.shape
    out = np.empty((steps + 1, n, n))
    out[0] = np.eye(n)
    Q, T = np.eye(n), np.eye(n)
    for k in range(steps):
        Q, R = _positive_qr(maps[k] @ Q)
        T = R @ T
        out[k + 1] = Q @ T
    return out


def flow_from_products(source) -> np.ndarray:
    """``Phi_0^i`` by direct multiplication of the step maps."""
    maps = _maps(source)
    steps, n, _ = maps.shape
    out = np.empty((steps + 1, n, n))
    out[0] = np.eye(n)
    for k in range(steps):
        out[k + 1] = maps[k] @ out[k]
    return out


# --------------------------------------------------------------------------
# selectors and tensors

@dataclass(frozen=True)
class StateSelector:
    gamma: np.ndarray
    provenance: Mapping = field(default_factory=dict)

    def __post_init__(self):
        g = np.asarray(self.gamma, dtype=bool)
        if not g.any():
            raise InputError("state selector is empty")
        object.__setattr__(self, "gamma", g)

    @property
    def rows(self) -> np.ndarray:
        return np.flatnonzero(self.gamma)

    def __or__(self, other: "StateSelector") -> "StateSelector":
        return StateSelector(self.gamma | other.gamma, {**self.provenance, **other.provenance})


def bus_channels(layout: StateLayout, bus: int) -> tuple[str, ...]:
    """Stability channels of a bus: angle, speed and voltage at generators, voltage elsewhere."""
    if bus in layout.gen_buses:
        return ("delta", "omega", "v")
    if bus not in layout.bus_ids:
        raise InputError(f"unknown bus {bus}")
    return ("v",)


def channel_selector(layout: StateLayout, bus: int, quantities) -> StateSelector:
    gamma = np.zeros(layout.n, dtype=bool)
    for q in quantities:
        gamma[layout.index(q, bus)] = True
    return StateSelector(gamma, {bus: tuple(quantities)})


def node_selector(layout: StateLayout, bus: int) -> StateSelector:
    return channel_selector(layout, bus, bus_channels(layout, bus))


def global_selector(layout: StateLayout) -> StateSelector:
    sel = None
    for b in layout.bus_ids:
        s = node_selector(layout, b)
        sel = s if sel is None else sel | s
    return sel


def full_selector(n: int) -> StateSelector:
    return StateSelector(np.ones(n, dtype=bool), {"all": "every state"})


@dataclass(frozen=True)
class DeformationTensor:
    matrix: np.ndarray
    selector: StateSelector
    horizon: int

    @property
    def steps(self) -> int:
        return self.horizon - 1


def deformation_tensor(flow: np.ndarray, selector: StateSelector,
                       endpoint: bool = False) -> DeformationTensor:
    """``sum_i Phi_0^i^T diag(gamma) Phi_0^i`` over all stored states.

    ``flow`` is the stack returned by :func:`flow_from_qr` or
    :func:`flow_from_products`. With ``endpoint=True`` only the final
    transition matrix enters (the plain Cauchy-Green matrix).
    """
    flow = np.asarray(flow)
    if selector.gamma.size != flow.shape[1]:
        raise InputError("selector length does not match the state dimension")
    rows = flow[-1:, selector.rows, :] if endpoint else flow[:, selector.rows, :]
    T = np.einsum("kri,krj->ij", rows, rows)
    T = 0.5 * (T + T.T)
    return DeformationTensor(matrix=T, selector=selector, horizon=flow.shape[0])


def tensor_exponent(tensor: DeformationTensor) -> float:
    """``log(lambda_max) / (2 (N - 1))`` of a deformation tensor."""
    top = float(np.linalg.eigvalsh(tensor.matrix)[-1])
    if not top > 0:
        raise NumericalError("deformation tensor vanishes; trajectory is degenerate")
    return np.log(top) / (2.0 * tensor.steps)


def node_exponent(flow: np.ndarray, bus: int, layout: StateLayout) -> float:
    return tensor_exponent(deformation_tensor(flow, node_selector(layout, bus)))


def node_exponents(flow: np.ndarray, layout: StateLayout, buses=None) -> dict[int, float]:
    buses = layout.bus_ids if buses is None else buses
    return {b: node_exponent(flow, b, layout) for b in buses}


# --------------------------------------------------------------------------
# ranking

@dataclass(frozen=True)
class RankEntry:
    bus: int
    exponent: float
    index: int


@dataclass(frozen=True)
class StabilityRanking:
    entries: tuple

    @property
    def order(self) -> list[int]:
        return [e.bus for e in self.entries]

    def index_of(self, bus: int) -> int:
        return next(e.index for e in self.entries if e.bus == bus)


def stability_ranking(lambdas: Mapping[int, float]) -> StabilityRanking:
    """Ascending exponents; equal exponents fall back to ascending bus id."""
    ordered = sorted(lambdas.items(), key=lambda kv: (kv[1], kv[0]))
    return StabilityRanking(tuple(RankEntry(bus=b, exponent=float(lam), index=i + 1)
                                  for i, (b, lam) in enumerate(ordered)))


def layout_for(net: PowerNetwork) -> StateLayout:
    return StateLayout(tuple(g.bus for g in net.generators), tuple(net.bus_ids))
