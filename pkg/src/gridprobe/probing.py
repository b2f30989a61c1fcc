"""Noiseless probing simulator, coupled load recovery and ZIP fitting."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.optimize import least_squares

from .feeder import AdmittanceMatrix, BusPartition, FeederGraph, build_admittance, validate_partition
from .generic_rank import assemble_jacobian, numeric_rank
from .identifiability import Mode
from .powerflow import PowerFlowError, ZipLoad, eval_outputs, injections, solve_power_flow, stack

log = logging.getLogger(__name__)

GN_TOL = 1e-10
GN_MAX_ITER = 100
GN_STALL_ITERS = 3      # give up after this many steps that barely reduce the cost
ZIP_DET_MIN = 1e-12
ZIP_COND_MAX = 1e12
ZIP_COND_WARN = 1e10


class ZipIllPosedError(ValueError):
    def __init__(self, message: str, diagnostics: "VandermondeDiagnostics"):
        super().__init__(message)
        self.diagnostics = diagnostics


# ---------------------------------------------------------------- data types

@dataclass(frozen=True)
class ProbingPlan:
    """Per-slot setpoints {bus: (p, q)} for every metered bus except the substation."""

    setpoints: tuple[dict, ...]

    def __post_init__(self):
        if len(self.setpoints) < 1:
            raise ValueError("a plan needs at least one slot")
        for slot in self.setpoints:
            for bus, (p, q) in slot.items():
                if not (np.isfinite(p) and np.isfinite(q)):
                    raise ValueError(f"non-finite setpoint at bus {bus}")
        if len(self.setpoints) >= 2:
            vectors = {tuple(sorted(s.items())) for s in self.setpoints}
            if len(vectors) < 2:
                raise ValueError("all slots share one setpoint vector; probing would degenerate to T=1")

    @property
    def T(self) -> int:
        return len(self.setpoints)

    def to_dict(self) -> dict:
        return {"T": self.T, "setpoints": [
            [{"bus": b, "p": p, "q": q} for b, (p, q) in sorted(s.items())] for s in self.setpoints]}

    @classmethod
    def from_dict(cls, data: dict) -> "ProbingPlan":
        slots = tuple({int(e["bus"]): (float(e["p"]), float(e["q"])) for e in slot}
                      for slot in data["setpoints"])
        if "T" in data and int(data["T"]) != len(slots):
            raise ValueError(f"plan declares T={data['T']} but lists {len(slots)} slots")
        return cls(slots)


def default_plan(partition: BusPartition, T: int, rng: np.random.Generator | int | None = None,
                 base: Mapping[int, tuple[float, float]] | None = None,
                 amplitude: float = 0.05) -> ProbingPlan:
    """Random setpoints within +-amplitude p.u. of a base injection, distinct per slot."""
    rng = np.random.default_rng(rng)
    base = dict(base or {})
    buses = [m for m in partition.M if m != 0]
    slots = []
    for _ in range(T):
        slot = {}
        for m in buses:
            p0, q0 = base.get(m, (0.0, 0.0))
            dp, dq = rng.uniform(-amplitude, amplitude, 2)
            slot[m] = (p0 + dp, q0 + dq)
        slots.append(slot)
    return ProbingPlan(tuple(slots))


@dataclass(frozen=True)
class LoadModel:
    """Non-metered loads: constant (p, q) injections and/or ZIP loads."""

    constant: Mapping[int, tuple[float, float]] = field(default_factory=dict)
    zip: Mapping[int, ZipLoad] = field(default_factory=dict)

    def __post_init__(self):
        overlap = set(self.constant) & set(self.zip)
        if overlap:
            raise ValueError(f"buses {sorted(overlap)} have both constant and ZIP loads")
        for bus, (p, q) in self.constant.items():
            if not (np.isfinite(p) and np.isfinite(q)):
                raise ValueError(f"non-finite load at bus {bus}")

    def injection_at(self, bus: int, u: float = 1.0) -> tuple[float, float]:
        if bus in self.zip:
            return self.zip[bus].injection(u)
        return self.constant.get(bus, (0.0, 0.0))

    def to_dict(self) -> dict:
        loads = [{"bus": b, "p": p, "q": q} for b, (p, q) in sorted(self.constant.items())]
        for b, z in sorted(self.zip.items()):
            loads.append({"bus": b, "zip_p": [z.alpha_p, z.beta_p, z.gamma_p],
                          "zip_q": [z.alpha_q, z.beta_q, z.gamma_q]})
        return {"loads": loads}

    @classmethod
    def from_dict(cls, data: dict) -> "LoadModel":
        constant, zips = {}, {}
        for e in data["loads"]:
            bus = int(e["bus"])
            if "zip_p" in e:
                zips[bus] = ZipLoad(*map(float, e["zip_p"]), *map(float, e["zip_q"]))
            else:
                constant[bus] = (float(e["p"]), float(e["q"]))
        return cls(constant, zips)


@dataclass(frozen=True)
class ProbingDataset:
    """Metered readings, one row per slot and one column per metered bus.

    ``u_sq`` holds squared voltage magnitudes; ``theta`` is None without
    phasor data.
    """

    mode: Mode
    metered: tuple[int, ...]
    u_sq: np.ndarray
    p: np.ndarray
    q: np.ndarray
    theta: np.ndarray | None = None
    true_states: tuple[np.ndarray, ...] | None = field(default=None, compare=False, repr=False)

    @property
    def T(self) -> int:
        return self.u_sq.shape[0]

    def slot(self, t: int) -> "ProbingDataset":
        """Single-slot dataset for slot t (1-based)."""
        i = t - 1
        pick = lambda a: None if a is None else a[i:i + 1].copy()  # noqa: E731
        states = None if self.true_states is None else (self.true_states[i],)
        return ProbingDataset(self.mode, self.metered, pick(self.u_sq), pick(self.p),
                              pick(self.q), pick(self.theta), states)

    def to_dict(self) -> dict:
        slots = []
        for t in range(self.T):
            rows = []
            for j, m in enumerate(self.metered):
                entry = {"bus": m, "u": float(self.u_sq[t, j]),
                         "p": float(self.p[t, j]), "q": float(self.q[t, j])}
                if self.theta is not None:
                    entry["theta"] = float(self.theta[t, j])
                rows.append(entry)
            slots.append(rows)
        return {"mode": self.mode.value, "T": self.T, "metered": list(self.metered), "slots": slots}

    @classmethod
    def from_dict(cls, data: dict) -> "ProbingDataset":
        mode = Mode.parse(data["mode"])
        metered = tuple(int(m) for m in data["metered"])
        T = len(data["slots"])
        arr = {k: np.zeros((T, len(metered))) for k in ("u", "p", "q", "theta")}
        for t, slot in enumerate(data["slots"]):
            by_bus = {int(e["bus"]): e for e in slot}
            for j, m in enumerate(metered):
                e = by_bus[m]
                for k in ("u", "p", "q"):
                    arr[k][t, j] = float(e[k])
                if mode is Mode.PHASOR:
                    arr["theta"][t, j] = float(e["theta"])
        return cls(mode, metered, arr["u"], arr["p"], arr["q"],
                   arr["theta"] if mode is Mode.PHASOR else None)


@dataclass(frozen=True)
class RecoveryResult:
    states: tuple[np.ndarray, ...]
    non_metered: tuple[int, ...]
    slot_loads: np.ndarray          # shape (T, O, 2): per-slot (p, q) estimates
    residual_norm: float
    converged: bool
    iterations: int
    residual_history: tuple[float, ...]
    jacobian_rank: int
    required_rank: int

    @property
    def rank_deficient(self) -> bool:
        return self.jacobian_rank < self.required_rank

    @property
    def loads(self) -> dict[int, tuple[float, float]]:
        mean = self.slot_loads.mean(axis=0)
        return {o: (float(mean[k, 0]), float(mean[k, 1])) for k, o in enumerate(self.non_metered)}

    def to_dict(self) -> dict:
        return {
            "converged": self.converged,
            "iterations": self.iterations,
            "residual_norm": self.residual_norm,
            "residual_history": list(self.residual_history),
            "jacobian_rank": self.jacobian_rank,
            "required_rank": self.required_rank,
            "rank_deficient": self.rank_deficient,
            "loads": [{"bus": o, "p": p, "q": q} for o, (p, q) in self.loads.items()],
            "slot_loads": self.slot_loads.tolist(),
        }


# ---------------------------------------------------------------- simulation

def simulate_probing(feeder: FeederGraph, partition: BusPartition, loads: LoadModel,
                     plan: ProbingPlan, mode: Mode | str,
                     Y: AdmittanceMatrix | None = None) -> ProbingDataset:
    mode = Mode.parse(mode)
    validate_partition(feeder, partition)
    Y = Y if Y is not None else build_admittance(feeder)
    n = feeder.n_buses
    probed = [m for m in partition.M if m != 0]
    stray = (set(loads.constant) | set(loads.zip)) - partition.non_metered
    if stray:
        raise ValueError(f"loads given for metered buses {sorted(stray)}")
    M = partition.M
    u_sq, theta, p, q, states = [], [], [], [], []
    for t, slot in enumerate(plan.setpoints, start=1):
        missing = set(probed) - set(slot)
        if missing:
            raise ValueError(f"slot {t} lacks setpoints for buses {sorted(missing)}")
        spec = np.zeros((n - 1, 2))
        for m in probed:
            spec[m - 1] = slot[m]
        for o, pq in loads.constant.items():
            spec[o - 1] = pq
        state = solve_power_flow(Y, spec, zip_loads=loads.zip)
        out = eval_outputs(state, Y)
        states.append(state)
        u_sq.append(out.u_sq[M])
        theta.append(out.theta[M])
        p.append(out.p[M])
        q.append(out.q[M])
    return ProbingDataset(mode, tuple(M), np.array(u_sq), np.array(p), np.array(q),
                          np.array(theta) if mode is Mode.PHASOR else None, tuple(states))


# ---------------------------------------------------------------- recovery

def _residual(states, Y, partition, dataset, mode, rows):
    outs = [eval_outputs(s, Y) for s in states]
    col = {m: j for j, m in enumerate(dataset.metered)}
    r = np.empty(len(rows))
    for i, row in enumerate(rows):
        kind, bus, t = row
        o = outs[t - 1]
        if kind == "u":
            r[i] = o.u_sq[bus] - dataset.u_sq[t - 1, col[bus]]
        elif kind == "theta":
            # wrap so a +-pi branch cut cannot masquerade as a large residual
            d = o.theta[bus] - dataset.theta[t - 1, col[bus]]
            r[i] = (d + np.pi) % (2 * np.pi) - np.pi
        elif kind == "p_M":
            r[i] = o.p[bus] - dataset.p[t - 1, col[bus]]
        elif kind == "q_M":
            r[i] = o.q[bus] - dataset.q[t - 1, col[bus]]
        elif kind == "p_couple":
            r[i] = o.p[bus] - outs[t].p[bus]
        elif kind == "q_couple":
            r[i] = o.q[bus] - outs[t].q[bus]
        else:
            raise ValueError(f"unexpected row kind {kind}")
    return r


def _warm_start(Y, partition, dataset, slack_voltage):
    n = Y.n
    out = []
    for t in range(dataset.T):
        spec = np.zeros((n - 1, 2))
        for j, m in enumerate(dataset.metered):
            if m != 0:
                spec[m - 1] = dataset.p[t, j], dataset.q[t, j]
        out.append(solve_power_flow(Y, spec, slack_voltage))
    return out


def _gauss_newton(x, fun, jac, tol, max_iter):
    """Damped Gauss-Newton with step halving; returns (x, r, history, converged, iters)."""
    r = fun(x)
    cost = float(r @ r)
    history = [float(np.max(np.abs(r))) if r.size else 0.0]
    converged = history[-1] < tol
    it = stalled = 0
    polished = False
    while it < max_iter and not polished and stalled < GN_STALL_ITERS:
        dx = np.linalg.lstsq(jac(x), -r, rcond=None)[0]
        step = 1.0
        accepted = False
        for _ in range(40):
            x_new = x + step * dx
            r_new = fun(x_new)
            c_new = float(r_new @ r_new)
            if np.isfinite(c_new) and c_new < cost:
                accepted = True
                break
            step *= 0.5
        it += 1
        if not accepted:
            break
        stalled = stalled + 1 if c_new > 0.99 * cost else 0
        x, r, cost = x_new, r_new, c_new
        history.append(float(np.max(np.abs(r))))
        if converged:
            polished = True  # one extra step past tolerance to reach round-off
        converged = history[-1] < tol
    return x, r, history, converged, it


def _levenberg_marquardt(x, fun, jac, tol, max_iter):
    sol = least_squares(fun, x, jac=jac, method="lm", xtol=1e-15, ftol=1e-15, gtol=1e-15,
                        max_nfev=50 * max_iter)
    r = sol.fun
    res = float(np.max(np.abs(r))) if r.size else 0.0
    return sol.x, r, [res], res < tol, int(sol.nfev)


def recover_loads(feeder: FeederGraph, partition: BusPartition, dataset: ProbingDataset,
                  mode: Mode | str | None = None, Y: AdmittanceMatrix | None = None,
                  tol: float = GN_TOL, max_iter: int = GN_MAX_ITER,
                  slack_voltage: complex = 1 + 0j, start: str = "auto",
                  initial: Sequence[np.ndarray] | None = None) -> RecoveryResult:
    """Solve the coupled metering + stationarity equations for every slot.

    Damped Gauss-Newton; the substation voltage is held at ``slack_voltage``
    in every slot. Loads are averaged over slots.

    Parameters
    ----------
    start : {"auto", "flat", "power_flow"}
        Initial iterate. ``"power_flow"`` solves one power flow per slot with
        the measured metered injections and zero non-metered load.
        ``"auto"`` starts flat and, if the iteration stalls, retries from the
        power-flow start and then with Levenberg-Marquardt from flat, keeping
        the first converged (else the smallest-residual) solution.
    initial : sequence of states, optional
        Explicit initial iterate per slot; overrides ``start``.
    """
    mode = Mode.parse(mode if mode is not None else dataset.mode)
    if mode is Mode.PHASOR and dataset.theta is None:
        raise ValueError("phasor recovery needs angle data")
    validate_partition(feeder, partition)
    if tuple(partition.M) != tuple(dataset.metered):
        raise ValueError("dataset metered buses do not match the partition")
    if start not in ("auto", "flat", "power_flow"):
        raise ValueError(f"unknown start {start!r}")
    Y = Y if Y is not None else build_admittance(feeder)
    n, T = feeder.n_buses, dataset.T
    flat = stack(np.full(n, slack_voltage, dtype=complex))
    # drop substation columns: its voltage is fixed
    keep = np.array([j for t in range(T) for j in range(t * 2 * n, (t + 1) * 2 * n)
                     if (j - t * 2 * n) % n != 0])
    _, pat = assemble_jacobian(Y, partition, [flat] * T, mode, angle_reference=False)
    rows = pat.rows

    def unpack(x):
        out = []
        for t in range(T):
            s = flat.copy()
            block = x[t * 2 * (n - 1):(t + 1) * 2 * (n - 1)]
            s[1:n] = block[:n - 1]
            s[n + 1:] = block[n - 1:]
            out.append(s)
        return out

    def pack(sts):
        return np.concatenate([np.concatenate([s[1:n], s[n + 1:]]) for s in sts])

    def fun(x):
        return _residual(unpack(x), Y, partition, dataset, mode, rows)

    def jac(x):
        return assemble_jacobian(Y, partition, unpack(x), mode, angle_reference=False)[0][:, keep]

    if initial is not None:
        if len(initial) != T:
            raise ValueError(f"need {T} initial states, got {len(initial)}")
        attempts = [(_gauss_newton, lambda: [np.array(s, dtype=float) for s in initial])]
    else:
        flat_start = lambda: [flat.copy() for _ in range(T)]  # noqa: E731
        warm_start = lambda: _warm_start(Y, partition, dataset, slack_voltage)  # noqa: E731
        attempts = {"flat": [(_gauss_newton, flat_start)],
                    "power_flow": [(_gauss_newton, warm_start)],
                    "auto": [(_gauss_newton, flat_start), (_gauss_newton, warm_start),
                             (_levenberg_marquardt, flat_start)]}[start]
    best = None
    for solver, make_start in attempts:
        try:
            states = make_start()
        except PowerFlowError:
            continue
        for s in states:
            s[0], s[n] = slack_voltage.real, slack_voltage.imag
        out = solver(pack(states), fun, jac, tol, max_iter)
        if best is None or out[2][-1] < best[2][-1]:
            best = out
        if out[3]:
            break
    x, r, history, converged, it = best
    states = unpack(x)
    rank, _ = numeric_rank(jac(x))
    O = partition.O
    slot_loads = np.zeros((T, len(O), 2))
    for t, s in enumerate(states):
        p, q = injections(s, Y)
        slot_loads[t, :, 0] = p[O]
        slot_loads[t, :, 1] = q[O]
    result = RecoveryResult(tuple(states), tuple(O), slot_loads, history[-1], converged, it,
                            tuple(history), rank, keep.size)
    if result.rank_deficient:
        log.warning("recovery Jacobian rank %d < %d: loads are not identifiable from these data",
                    rank, keep.size)
    return result


def recover_per_slot(feeder: FeederGraph, partition: BusPartition, dataset: ProbingDataset,
                     mode: Mode | str | None = None, **kwargs) -> list[RecoveryResult]:
    """Independent single-slot recoveries, for loads that are not constant-power."""
    return [recover_loads(feeder, partition, dataset.slot(t), mode, **kwargs)
            for t in range(1, dataset.T + 1)]


# ---------------------------------------------------------------- ZIP fitting

@dataclass(frozen=True)
class VandermondeDiagnostics:
    determinant: float | None
    condition: float

    @property
    def ill_conditioned(self) -> bool:
        return not self.condition < ZIP_COND_WARN


@dataclass(frozen=True)
class ZipFit:
    alpha: float
    beta: float
    gamma: float
    residual: float
    diagnostics: VandermondeDiagnostics

    @property
    def coefficients(self) -> tuple[float, float, float]:
        return self.alpha, self.beta, self.gamma


def zip_regressor(u: Sequence[float]) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    return np.column_stack([u ** 2, u, np.ones_like(u)])


def vandermonde_conditioning(u: Sequence[float]) -> VandermondeDiagnostics:
    """Determinant (three slots only) and 2-norm condition of the [u^2, u, 1] regressor."""
    u = np.asarray(u, dtype=float)
    if u.ndim != 1 or u.size < 3:
        raise ValueError("need at least three voltage values")
    det = None
    if u.size == 3:
        det = float((u[0] - u[1]) * (u[0] - u[2]) * (u[1] - u[2]))
    s = np.linalg.svd(zip_regressor(u), compute_uv=False)
    cond = float(s[0] / s[-1]) if s[-1] > 0 else float("inf")
    return VandermondeDiagnostics(det, cond)


def fit_zip(u_series: Sequence[float], s_series: Sequence[float]) -> ZipFit:
    """Least-squares ZIP coefficients from voltage magnitudes and injections.

    ``s_series`` are net injections, so the fit targets ``-s``.
    """
    u = np.asarray(u_series, dtype=float)
    s = np.asarray(s_series, dtype=float)
    if u.shape != s.shape or u.ndim != 1:
        raise ValueError("u_series and s_series must be 1-D and equally long")
    if u.size < 3:
        raise ValueError("ZIP fit needs at least three slots")
    if np.any(u <= 0):
        raise ValueError("voltage magnitudes must be positive")
    diag = vandermonde_conditioning(u)
    if diag.determinant is not None and abs(diag.determinant) < ZIP_DET_MIN:
        raise ZipIllPosedError(f"singular ZIP regressor (determinant {diag.determinant:.3e})", diag)
    if not diag.condition <= ZIP_COND_MAX:
        raise ZipIllPosedError(f"ill-posed ZIP regressor (condition {diag.condition:.3e})", diag)
    U = zip_regressor(u)
    coef = np.linalg.lstsq(U, -s, rcond=None)[0]
    residual = float(np.linalg.norm(U @ coef + s))
    return ZipFit(*map(float, coef), residual, diag)
