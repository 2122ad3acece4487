"""Fourth-order synchronous machine network model as a semi-explicit DAE.

State layout (G generators, N buses)::

    x_d = [delta (G), omega (G), E' (G), T_N (G)]
    x_a = [P_G (G), Q_G (G), v (N), theta (N)]

The algebraic states are eliminated through the implicit function theorem,
giving the ODE ``x' = fhat(x) = [f(x); -G_xa^{-1} G_xd f(x)]`` that the
integrator advances.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import LinAlgWarning, lu_factor, lu_solve, null_space

from .errors import InitializationError, RegularityError
from .netmodel import OMEGA0, PowerNetwork, build_admittance
from .powerflow import SteadyState, bus_injection_jacobian, bus_injections

QUANTITIES = ("delta", "omega", "Eq", "TN", "PG", "QG", "v", "theta")
GEN_QUANTITIES = QUANTITIES[:6]
# threshold on min |U_ii| / max |U_ii| of the LU factor below which G_xa counts as singular
SINGULAR_PIVOT_RATIO = 1e-14


@dataclass(frozen=True)
class StateLayout:
    """Bijection between (quantity, bus id) pairs and flat state indices."""

    gen_buses: tuple
    bus_ids: tuple

    @property
    def n_gen(self) -> int:
        return len(self.gen_buses)

    @property
    def n_bus(self) -> int:
        return len(self.bus_ids)

    @property
    def n_d(self) -> int:
        return 4 * self.n_gen

    @property
    def n_a(self) -> int:
        return 2 * self.n_gen + 2 * self.n_bus

    @property
    def n(self) -> int:
        return self.n_d + self.n_a

    def block(self, quantity: str) -> slice:
        g, b = self.n_gen, self.n_bus
        starts = {"delta": 0, "omega": g, "Eq": 2 * g, "TN": 3 * g,
                  "PG": 4 * g, "QG": 5 * g, "v": 6 * g, "theta": 6 * g + b}
        size = g if quantity in GEN_QUANTITIES else b
        start = starts[quantity]
        return slice(start, start + size)

    def index(self, quantity: str, bus: int) -> int:
        owners = self.gen_buses if quantity in GEN_QUANTITIES else self.bus_ids
        try:
            pos = owners.index(bus)
        except ValueError:
            raise KeyError(f"no {quantity} state at bus {bus}") from None
        return self.block(quantity).start + pos

    def labels(self) -> list[str]:
        out = []
        for q in QUANTITIES:
            owners = self.gen_buses if q in GEN_QUANTITIES else self.bus_ids
            out += [f"{q}_{b}" for b in owners]
        return out

    def lookup(self, flat: int) -> tuple[str, int]:
        for q in QUANTITIES:
            sl = self.block(q)
            if sl.start <= flat < sl.stop:
                owners = self.gen_buses if q in GEN_QUANTITIES else self.bus_ids
                return q, owners[flat - sl.start]
        raise IndexError(flat)


@dataclass(frozen=True)
class SystemState:
    x: np.ndarray
    layout: StateLayout

    def __post_init__(self):
        if self.x.shape != (self.layout.n,):
            raise ValueError(f"state has shape {self.x.shape}, expected ({self.layout.n},)")

    @property
    def x_d(self) -> np.ndarray:
        return self.x[: self.layout.n_d]

    @property
    def x_a(self) -> np.ndarray:
        return self.x[self.layout.n_d:]

    def __getitem__(self, quantity: str) -> np.ndarray:
        return self.x[self.layout.block(quantity)]


@dataclass(frozen=True)
class ControlInput:
    E_fd: np.ndarray
    T_r: np.ndarray

    def __post_init__(self):
        if not (np.all(np.isfinite(self.E_fd)) and np.all(np.isfinite(self.T_r))):
            raise ValueError("control inputs must be finite")


def ift_reduce(f, G_xd, G_xa):
    """Algebraic-state velocity ``-G_xa^{-1} G_xd f`` of an index-1 DAE."""
    return -np.linalg.solve(G_xa, G_xd @ f)


class MachineModel:
    """Residuals and Jacobians of the machine-network DAE.

    Parameters
    ----------
    net : PowerNetwork
    literal_qbalance : bool
        Use ``G cos - B sin`` in the reactive balance instead of the standard
        ``G sin - B cos``.
    literal_governor : bool
        Use ``+T_N`` in the turbine equation instead of the stabilizing ``-T_N``.
    omega0 : float
        Synchronous speed in rad/s.
    """

    def __init__(self, net: PowerNetwork, literal_qbalance=False, literal_governor=False,
                 omega0=OMEGA0):
        self.net = net
        self.literal_qbalance = literal_qbalance
        self.literal_governor = literal_governor
        self.omega0 = omega0
        self.adm = build_admittance(net)
        self.layout = StateLayout(tuple(g.bus for g in net.generators), tuple(net.bus_ids))
        self.gi = net.gen_bus_index
        par = [g.params for g in net.generators]
        for name in ("M", "D", "x_d", "x_q", "x_d_prime", "T_d0_prime", "T_CH", "R_D"):
            setattr(self, name, np.array([getattr(p, name) for p in par]))
        self.a = (self.x_q - self.x_d_prime) / (2 * self.x_d_prime * self.x_q)
        self.b = (self.x_q + self.x_d_prime) / (2 * self.x_d_prime * self.x_q)
        self.c = (self.x_d - self.x_d_prime) / self.x_d_prime
        self.tn_sign = 1.0 if literal_governor else -1.0
        self.p_demand = net.column("load_p") - net.column("renewable_p")
        self.q_demand = net.column("load_q") - net.column("renewable_q")
        n_g, n_b = self.layout.n_gen, self.layout.n_bus
        # generator-to-bus incidence for the balance rows
        self.C_gen = np.zeros((n_b, n_g))
        self.C_gen[self.gi, np.arange(n_g)] = 1.0

    # -- unpacking ------------------------------------------------------------
    def _split(self, x):
        g, b = self.layout.n_gen, self.layout.n_bus
        parts = np.split(x, np.cumsum([g, g, g, g, g, g, b]))
        return parts  # delta, omega, Eq, TN, PG, QG, v, theta

    def _stator(self, x):
        delta, _, Eq, _, _, _, v, theta = self._split(x)
        vg = v[self.gi]
        phi = delta - theta[self.gi]
        return vg, phi, Eq

    # -- residuals ------------------------------------------------------------
    def f(self, x, u: ControlInput):
        delta, omega, Eq, TN, PG, _, v, theta = self._split(x)
        dw = omega - self.omega0
        phi = delta - theta[self.gi]
        return np.concatenate([
            dw,
            (TN - PG - self.D * dw) / self.M,
            (-(self.x_d / self.x_d_prime) * Eq + self.c * v[self.gi] * np.cos(phi) + u.E_fd)
            / self.T_d0_prime,
            (self.tn_sign * TN - dw / self.R_D + u.T_r) / self.T_CH,
        ])

    def stator_powers(self, x):
        vg, phi, Eq = self._stator(x)
        xdp = self.x_d_prime
        p = Eq * vg * np.sin(phi) / xdp - self.a * vg**2 * np.sin(2 * phi)
        q = Eq * vg * np.cos(phi) / xdp - self.b * vg**2 - self.a * vg**2 * np.cos(2 * phi)
        return p, q

    def g(self, x):
        _, _, _, _, PG, QG, v, theta = self._split(x)
        ps, qs = self.stator_powers(x)
        p, q = bus_injections(v, theta, self.adm, self.literal_qbalance)
        return np.concatenate([
            ps - PG,
            qs - QG,
            self.C_gen @ PG - self.p_demand - p,
            self.C_gen @ QG - self.q_demand - q,
        ])

    # -- Jacobians ------------------------------------------------------------
    def F_x(self, x):
        """Jacobian of f with respect to the full state (n_d x n)."""
        L = self.layout
        n_g = L.n_gen
        _, _, _, _, _, _, v, theta = self._split(x)
        vg, phi, _ = self._stator(x)
        F = np.zeros((L.n_d, L.n), dtype=np.result_type(x, float))
        rg = np.arange(n_g)
        d, w, e, t = (L.block(q).start for q in ("delta", "omega", "Eq", "TN"))
        pg = L.block("PG").start
        vs, ts = L.block("v").start, L.block("theta").start
        F[rg, w + rg] = 1.0
        F[n_g + rg, w + rg] = -self.D / self.M
        F[n_g + rg, t + rg] = 1.0 / self.M
        F[n_g + rg, pg + rg] = -1.0 / self.M
        k = self.c / self.T_d0_prime
        F[2 * n_g + rg, e + rg] = -(self.x_d / self.x_d_prime) / self.T_d0_prime
        F[2 * n_g + rg, d + rg] = -k * vg * np.sin(phi)
        F[2 * n_g + rg, ts + self.gi] = k * vg * np.sin(phi)
        F[2 * n_g + rg, vs + self.gi] = k * np.cos(phi)
        F[3 * n_g + rg, t + rg] = self.tn_sign / self.T_CH
        F[3 * n_g + rg, w + rg] = -1.0 / (self.R_D * self.T_CH)
        return F

    def G_x(self, x):
        """Jacobian of g with respect to the full state (n_a x n). Complex-safe."""
        L = self.layout
        n_g, n_b = L.n_gen, L.n_bus
        _, _, Eq, _, _, _, v, theta = self._split(x)
        vg, phi, _ = self._stator(x)
        xdp = self.x_d_prime
        s, c = np.sin(phi), np.cos(phi)
        s2, c2 = np.sin(2 * phi), np.cos(2 * phi)
        dps_dphi = Eq * vg * c / xdp - 2 * self.a * vg**2 * c2
        dqs_dphi = -Eq * vg * s / xdp + 2 * self.a * vg**2 * s2
        dps_dv = Eq * s / xdp - 2 * self.a * vg * s2
        dqs_dv = Eq * c / xdp - 2 * self.b * vg - 2 * self.a * vg * c2

        Gx = np.zeros((L.n_a, L.n), dtype=np.result_type(x, float))
        rg = np.arange(n_g)
        d, e = L.block("delta").start, L.block("Eq").start
        pg, qg = L.block("PG").start, L.block("QG").start
        vs, ts = L.block("v").start, L.block("theta").start
        # stator rows
        Gx[rg, d + rg] = dps_dphi
        Gx[rg, e + rg] = vg * s / xdp
        Gx[rg, pg + rg] = -1.0
        Gx[rg, vs + self.gi] = dps_dv
        Gx[rg, ts + self.gi] = -dps_dphi
        Gx[n_g + rg, d + rg] = dqs_dphi
        Gx[n_g + rg, e + rg] = vg * c / xdp
        Gx[n_g + rg, qg + rg] = -1.0
        Gx[n_g + rg, vs + self.gi] = dqs_dv
        Gx[n_g + rg, ts + self.gi] = -dqs_dphi
        # network balance rows
        dP_dth, dP_dv, dQ_dth, dQ_dv = bus_injection_jacobian(v, theta, self.adm,
                                                              self.literal_qbalance)
        rp, rq = 2 * n_g, 2 * n_g + n_b
        Gx[rp:rp + n_b, pg:pg + n_g] = self.C_gen
        Gx[rq:rq + n_b, qg:qg + n_g] = self.C_gen
        Gx[rp:rp + n_b, vs:vs + n_b] = -dP_dv
        Gx[rp:rp + n_b, ts:ts + n_b] = -dP_dth
        Gx[rq:rq + n_b, vs:vs + n_b] = -dQ_dv
        Gx[rq:rq + n_b, ts:ts + n_b] = -dQ_dth
        return Gx

    def algebraic_jacobians(self, x):
        """Return ``(G_xd, G_xa)``."""
        Gx = self.G_x(x)
        n_d = self.layout.n_d
        return Gx[:, :n_d], Gx[:, n_d:]

    # -- reduced ODE ----------------------------------------------------------
    def factor_algebraic(self, x):
        """LU factors of G_xa; raises RegularityError when the index-1 condition fails."""
        v = x[self.layout.block("v")]
        if np.any(v <= 0):
            bad = [self.layout.bus_ids[i] for i in np.flatnonzero(v <= 0)]
            raise RegularityError(f"non-positive voltage at buses {bad}", state=x.copy())
        _, G_xa = self.algebraic_jacobians(x)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", LinAlgWarning)
            lu, piv = lu_factor(G_xa, check_finite=False)
        pivots = np.abs(np.diag(lu))
        if not np.all(np.isfinite(pivots)) or pivots.min() <= SINGULAR_PIVOT_RATIO * pivots.max():
            raise RegularityError("algebraic Jacobian G_xa is singular", state=x.copy())
        return lu, piv

    def ode_rhs(self, x, u: ControlInput):
        fx = self.f(x, u)
        G_xd, _ = self.algebraic_jacobians(x)
        lu = self.factor_algebraic(x)
        return np.concatenate([fx, -lu_solve(lu, G_xd @ fx)])

    def ode_jacobian(self, x, u: ControlInput, step=1e-20):
        """Exact Jacobian of :meth:`ode_rhs`.

        The algebraic rows need the curvature term ``d/dx [G_x(x)] w`` with
        ``w = fhat(x)`` held fixed. By symmetry of second derivatives this is the
        directional derivative of ``G_x`` along ``w``, evaluated here with a
        single complex-step perturbation (exact to round-off).
        """
        n_d = self.layout.n_d
        fx = self.f(x, u)
        Gx = self.G_x(x)
        lu = self.factor_algebraic(x)
        w = np.concatenate([fx, -lu_solve(lu, Gx[:, :n_d] @ fx)])
        curvature = self.G_x(x + 1j * step * w).imag / step
        Fx = self.F_x(x)
        rows_a = -lu_solve(lu, Gx[:, :n_d] @ Fx + curvature)
        return np.vstack([Fx, rows_a])

    def constraint_tangent_basis(self, x):
        """Orthonormal basis of the null space of ``G_x`` (``n x n_d``).

        The reduced ODE keeps ``g`` constant along solutions, so this tangent
        space of the constraint manifold is invariant under the tangent maps.
        """
        return null_space(self.G_x(x))

    # -- linearization --------------------------------------------------------
    def linearization(self, x, u: ControlInput):
        """Pencil ``(E, A)`` of the DAE linearized at ``x``."""
        n_d, n = self.layout.n_d, self.layout.n
        E = np.zeros((n, n))
        E[:n_d, :n_d] = np.eye(n_d)
        A = np.vstack([self.F_x(x), self.G_x(x)])
        return E, A

    def regularity_certificate(self, x, u: ControlInput, s=1.0 + 1.0j):
        """``(sign, log|det(sE - A)|)``; a finite log-magnitude certifies a regular pencil."""
        E, A = self.linearization(x, u)
        return np.linalg.slogdet(s * E - A)

    # -- initialization -------------------------------------------------------
    def solve_algebraic(self, x, tol=1e-12, max_iter=20):
        """Newton solve of ``g = 0`` for the algebraic states, differential states fixed."""
        x = np.array(x, dtype=float)
        n_d = self.layout.n_d
        for _ in range(max_iter):
            r = self.g(x)
            if np.max(np.abs(r)) <= tol:
                return x
            lu = self.factor_algebraic(x)
            x[n_d:] -= lu_solve(lu, r)
        if np.max(np.abs(self.g(x))) <= tol:
            return x
        raise InitializationError("algebraic states did not converge after the disturbance")

    def assemble(self, delta, omega, Eq, TN, PG, QG, v, theta) -> np.ndarray:
        return np.concatenate([delta, omega, Eq, TN, PG, QG, v, theta]).astype(float)

    def consistent_initialization(self, ss: SteadyState):
        """Back-solve machine states and inputs from a converged power flow.

        Returns
        -------
        state : SystemState
            Satisfies ``f = 0`` and ``g = 0`` to round-off.
        u : ControlInput
        """
        vg = ss.v[self.gi]
        if np.any(vg <= 0):
            raise InitializationError("zero terminal voltage at a generator bus")
        V = vg * np.exp(1j * ss.theta[self.gi])
        S = ss.p_gen + 1j * ss.q_gen
        I = np.conj(S / V)
        delta = np.angle(V + 1j * self.x_q * I)
        i_dq = I * np.exp(-1j * (delta - np.pi / 2))
        vq = vg * np.cos(delta - ss.theta[self.gi])
        Eq = vq + self.x_d_prime * i_dq.real
        E_fd = (self.x_d / self.x_d_prime) * Eq - self.c * vq
        TN = ss.p_gen.copy()
        T_r = -self.tn_sign * TN
        x = self.assemble(delta, np.full(len(delta), self.omega0), Eq, TN,
                          ss.p_gen, ss.q_gen, ss.v, ss.theta)
        if not np.all(np.isfinite(x)):
            raise InitializationError("machine back-solution produced non-finite values")
        return SystemState(x, self.layout), ControlInput(E_fd=E_fd, T_r=T_r)
