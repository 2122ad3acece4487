"""Newton-Raphson AC power flow in polar coordinates.

The bus injection helpers at the top are shared with the dynamic model, which
evaluates the same network equations inside its algebraic constraints. They are
written with plain arithmetic on the inputs (no ``abs``/``conj``) so they also
accept complex arguments.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import PowerFlowError, SingularJacobianError
from .netmodel import AdmittanceMatrix, BusKind, PowerNetwork, build_admittance


def _angle_kernels(theta, G, B, literal_q=False):
    """Return (Kp, Lp, Kq, Lq) with injection_i = v_i sum_j K_ij v_j and dK_ij/dtheta_ij = -L_ij."""
    d = theta[:, None] - theta[None, :]
    c, s = np.cos(d), np.sin(d)
    Kp = G * c + B * s
    Lp = G * s - B * c
    if literal_q:
        Kq = G * c - B * s
        Lq = G * s + B * c
    else:
        Kq = Lp
        Lq = -Kp
    return Kp, Lp, Kq, Lq


def bus_injections(v, theta, adm: AdmittanceMatrix, literal_q=False):
    """Active and reactive power flowing out of every bus into the network."""
    Kp, _, Kq, _ = _angle_kernels(theta, adm.G, adm.B, literal_q)
    return v * (Kp @ v), v * (Kq @ v)


def _injection_derivs(v, K, L):
    dth = (v[:, None] * L * v[None, :]) - np.diag(v * (L @ v))
    dv = np.diag(K @ v) + v[:, None] * K
    return dth, dv


def bus_injection_jacobian(v, theta, adm: AdmittanceMatrix, literal_q=False):
    """Derivatives of :func:`bus_injections`.

    Returns
    -------
    dP_dtheta, dP_dv, dQ_dtheta, dQ_dv : ndarray, each N x N
    """
    Kp, Lp, Kq, Lq = _angle_kernels(theta, adm.G, adm.B, literal_q)
    dP_dth, dP_dv = _injection_derivs(v, Kp, Lp)
    dQ_dth, dQ_dv = _injection_derivs(v, Kq, Lq)
    return dP_dth, dP_dv, dQ_dth, dQ_dv


@dataclass(frozen=True)
class SteadyState:
    """Converged operating point. Powers are per unit; angles in radians."""

    v: np.ndarray
    theta: np.ndarray
    p_inj: np.ndarray
    q_inj: np.ndarray
    p_gen: np.ndarray
    q_gen: np.ndarray
    iterations: int
    mismatch: float
    history: tuple = field(default=())


def scheduled_injections(net: PowerNetwork):
    """Specified net injections (generation minus load plus renewables)."""
    p = net.column("renewable_p") - net.column("load_p")
    q = net.column("renewable_q") - net.column("load_q")
    for g, i in zip(net.generators, net.gen_bus_index):
        p[i] += g.p_set
    return p, q


def solve_powerflow(net: PowerNetwork, tol: float = 1e-8, max_iter: int = 20,
                    literal_q: bool = False, adm: AdmittanceMatrix | None = None) -> SteadyState:
    """Full Newton iteration from a flat start.

    Generator buses hold their voltage setpoint; the slack bus fixes the angle
    reference and absorbs the active power imbalance.

    Raises
    ------
    PowerFlowError
        No convergence within ``max_iter`` iterations.
    SingularJacobianError
        The mismatch Jacobian cannot be factorized.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    adm = build_admittance(net) if adm is None else adm
    n = net.n_bus
    slack = net.slack_index
    pv = [i for i, b in enumerate(net.buses) if b.kind is BusKind.GENERATOR]
    pq = [i for i, b in enumerate(net.buses) if b.kind is BusKind.LOAD]
    ang = np.array(sorted(pv + pq), dtype=int)
    mag = np.array(pq, dtype=int)

    v = np.ones(n)
    for g, i in zip(net.generators, net.gen_bus_index):
        v[i] = g.v_set
    theta = np.zeros(n)
    p_sched, q_sched = scheduled_injections(net)

    history = []
    for it in range(max_iter + 1):
        p, q = bus_injections(v, theta, adm, literal_q)
        mis = np.concatenate([p_sched[ang] - p[ang], q_sched[mag] - q[mag]])
        norm = float(np.max(np.abs(mis))) if mis.size else 0.0
        history.append(norm)
        if norm < tol:
            break
        if it == max_iter:
            raise PowerFlowError(f"power flow did not converge in {max_iter} iterations "
                                 f"(mismatch {norm:.3e})", mismatch=norm, iterations=it)
        dP_dth, dP_dv, dQ_dth, dQ_dv = bus_injection_jacobian(v, theta, adm, literal_q)
        J = np.block([[dP_dth[np.ix_(ang, ang)], dP_dv[np.ix_(ang, mag)]],
                      [dQ_dth[np.ix_(mag, ang)], dQ_dv[np.ix_(mag, mag)]]])
        try:
            dx = np.linalg.solve(J, mis)
        except np.linalg.LinAlgError:
            raise SingularJacobianError("power-flow Jacobian is singular") from None
        if not np.all(np.isfinite(dx)):
            raise SingularJacobianError("power-flow Jacobian is singular")
        theta[ang] += dx[: ang.size]
        v[mag] += dx[ang.size:]
    theta = theta - theta[slack]

    p, q = bus_injections(v, theta, adm, literal_q)
    load_p = net.column("load_p") - net.column("renewable_p")
    load_q = net.column("load_q") - net.column("renewable_q")
    gi = net.gen_bus_index
    return SteadyState(v=v, theta=theta, p_inj=p, q_inj=q,
                       p_gen=p[gi] + load_p[gi], q_gen=q[gi] + load_q[gi],
                       iterations=it, mismatch=norm, history=tuple(history))
