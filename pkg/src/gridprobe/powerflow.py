"""Power-flow output functions in rectangular coordinates and their Jacobians.

A state is a real vector ``v = [v_r; v_i]`` of length ``2(N+1)``. The outputs
per bus are the squared voltage magnitude, the voltage angle and the net
active/reactive injections.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np
import scipy.sparse as sp

from .feeder import AdmittanceMatrix


class ZeroVoltageError(ArithmeticError):
    """A bus voltage is exactly zero, so its angle is undefined."""


class PowerFlowError(RuntimeError):
    def __init__(self, message: str, residual: float, iterations: int):
        super().__init__(f"{message} (residual {residual:.3e} after {iterations} iterations)")
        self.residual = residual
        self.iterations = iterations


@dataclass(frozen=True)
class BusOutputs:
    u_sq: np.ndarray
    theta: np.ndarray
    p: np.ndarray
    q: np.ndarray


@dataclass(frozen=True)
class JacobianSet:
    J_u: sp.csr_matrix
    J_theta: sp.csr_matrix
    J_p: sp.csr_matrix
    J_q: sp.csr_matrix


@dataclass(frozen=True)
class ZipLoad:
    """Composite load ``-p = a u^2 + b u + c`` (likewise q), u = |v|."""

    alpha_p: float
    beta_p: float
    gamma_p: float
    alpha_q: float
    beta_q: float
    gamma_q: float

    def injection(self, u: float) -> tuple[float, float]:
        p = -(self.alpha_p * u * u + self.beta_p * u + self.gamma_p)
        q = -(self.alpha_q * u * u + self.beta_q * u + self.gamma_q)
        return p, q

    def injection_slope(self, u: float) -> tuple[float, float]:
        """Derivatives of the (p, q) injection with respect to u."""
        return (-(2 * self.alpha_p * u + self.beta_p),
                -(2 * self.alpha_q * u + self.beta_q))


def stack(voltages: np.ndarray) -> np.ndarray:
    """Complex bus voltages -> stacked real state [v_r; v_i]."""
    voltages = np.asarray(voltages, dtype=complex)
    return np.concatenate([voltages.real, voltages.imag])


def to_complex(state: np.ndarray) -> np.ndarray:
    state = np.asarray(state, dtype=float)
    n = state.size // 2
    return state[:n] + 1j * state[n:]


def flat_state(n_buses: int) -> np.ndarray:
    return np.concatenate([np.ones(n_buses), np.zeros(n_buses)])


def _split(state: np.ndarray, Y: AdmittanceMatrix):
    state = np.asarray(state, dtype=float)
    n = Y.n
    if state.shape != (2 * n,):
        raise ValueError(f"state has shape {state.shape}, expected ({2 * n},)")
    return state[:n], state[n:]


def injections(state: np.ndarray, Y: AdmittanceMatrix) -> tuple[np.ndarray, np.ndarray]:
    """Net (p, q) at every bus. Does not need nonzero voltages."""
    vr, vi = _split(state, Y)
    a = Y.G @ vr - Y.B @ vi
    b = Y.B @ vr + Y.G @ vi
    return vr * a + vi * b, vi * a - vr * b


def eval_outputs(state: np.ndarray, Y: AdmittanceMatrix) -> BusOutputs:
    vr, vi = _split(state, Y)
    u_sq = vr ** 2 + vi ** 2
    if np.any(u_sq == 0):
        raise ZeroVoltageError(f"zero-voltage bus {np.flatnonzero(u_sq == 0).tolist()}")
    p, q = injections(state, Y)
    return BusOutputs(u_sq, np.arctan2(vi, vr), p, q)


def jacobians(state: np.ndarray, Y: AdmittanceMatrix) -> JacobianSet:
    vr, vi = _split(state, Y)
    u_sq = vr ** 2 + vi ** 2
    if np.any(u_sq == 0):
        raise ZeroVoltageError(f"zero-voltage bus {np.flatnonzero(u_sq == 0).tolist()}")
    G, B = Y.G, Y.B
    a = G @ vr - B @ vi
    b = B @ vr + G @ vi

    def D(v):
        return sp.diags(v, format="csr")

    def R(v, M):
        # diag(v) @ M, scaling the CSR data in place of a sparse product
        out = M.copy()
        out.data = out.data * np.repeat(v, np.diff(M.indptr))
        return out

    J_u = sp.hstack([D(2 * vr), D(2 * vi)], format="csr")
    J_theta = sp.hstack([D(-vi / u_sq), D(vr / u_sq)], format="csr")
    J_p = sp.hstack([D(a) + R(vr, G) + R(vi, B),
                     D(b) - R(vr, B) + R(vi, G)], format="csr")
    J_q = sp.hstack([-D(b) + R(vi, G) - R(vr, B),
                     D(a) - R(vi, B) - R(vr, G)], format="csr")
    return JacobianSet(J_u, J_theta, J_p, J_q)


def solve_power_flow(Y: AdmittanceMatrix, injections_pq, slack_voltage: complex = 1 + 0j,
                     zip_loads: Mapping[int, ZipLoad] | None = None,
                     tol: float = 1e-10, max_iter: int = 50) -> np.ndarray:
    """Newton power flow in rectangular coordinates from a flat start.

    Parameters
    ----------
    injections_pq : array_like, shape (N, 2)
        Specified (p, q) net injections for buses 1..N.
    zip_loads : mapping bus -> ZipLoad, optional
        Voltage-dependent loads added on top of ``injections_pq``; they are
        re-evaluated at every iterate.

    Returns
    -------
    ndarray
        Stacked state [v_r; v_i] with the substation at ``slack_voltage``.
    """
    n = Y.n
    spec = np.asarray(injections_pq, dtype=float)
    if spec.shape != (n - 1, 2):
        raise ValueError(f"injections must have shape ({n - 1}, 2), got {spec.shape}")
    zip_loads = dict(zip_loads or {})
    for bus in zip_loads:
        if not 1 <= bus < n:
            raise ValueError(f"ZIP load at invalid bus {bus}")

    v = np.ones(n, dtype=complex)
    v[0] = slack_voltage
    # flat start: every bus at the slack voltage
    v[1:] = slack_voltage
    free = np.arange(1, n)
    idx = np.concatenate([free, n + free])

    def mismatch(state):
        p, q = injections(state, Y)
        p_spec, q_spec = spec[:, 0].copy(), spec[:, 1].copy()
        for bus, load in zip_loads.items():
            u = np.hypot(state[bus], state[n + bus])
            dp, dq = load.injection(u)
            p_spec[bus - 1] += dp
            q_spec[bus - 1] += dq
        return np.concatenate([p[1:] - p_spec, q[1:] - q_spec])

    def newton_step(state, F):
        J = jacobians(state, Y)
        Jf = sp.vstack([J.J_p[1:], J.J_q[1:]]).toarray()[:, idx]
        for bus, load in zip_loads.items():
            u = np.hypot(state[bus], state[n + bus])
            sp_, sq_ = load.injection_slope(u)
            k = bus - 1
            for col, comp in ((k, state[bus] / u), (n - 1 + k, state[n + bus] / u)):
                Jf[k, col] -= sp_ * comp
                Jf[n - 1 + k, col] -= sq_ * comp
        dx = np.linalg.solve(Jf, -F)
        state = state.copy()
        state[idx] += dx
        return state

    state = stack(v)
    residual = np.inf
    for it in range(max_iter + 1):
        F = mismatch(state)
        residual = float(np.max(np.abs(F))) if F.size else 0.0
        if not np.isfinite(residual):
            break
        if residual < tol:
            # one polishing step so the solution is consistent to round-off
            try:
                polished = newton_step(state, F)
            except np.linalg.LinAlgError:
                return state
            F2 = mismatch(polished)
            return polished if F2.size and np.max(np.abs(F2)) < residual else state
        if it == max_iter:
            break
        try:
            state = newton_step(state, F)
        except np.linalg.LinAlgError:
            break
    raise PowerFlowError("power flow did not converge", residual, it)
