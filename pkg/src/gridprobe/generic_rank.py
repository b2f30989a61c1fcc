"""Probing Jacobian structure, block certificates and rank checks.

Rows of the multi-slot Jacobian are laid out slot by slot: the metering rows
of slot t (u, theta, p, q on M) followed by the coupling rows linking slot t
to slot t+1 (p and q on O). Columns are ``[v_r; v_i]`` of slot 1, then slot
2, and so on. The same layout is shared by the boolean pattern and the
numeric assembly so their entries can be compared position by position.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .feeder import AdmittanceMatrix, BusPartition, FeederGraph, build_admittance
from .identifiability import IdentifiabilityVerdict, Mode
from .matching import hopcroft_karp
from .powerflow import jacobians

RANK_RTOL = 1e-10
FILL_MIN = 1e-3

COUPLING_KINDS = ("p", "q")


class RowLabel(NamedTuple):
    kind: str  # u, theta, p_M, q_M, p_couple, q_couple, theta_ref
    bus: int
    t: int     # slot; for coupling rows the earlier of the two linked slots


class ColLabel(NamedTuple):
    component: str  # v_r or v_i
    bus: int
    t: int


@dataclass(frozen=True)
class SparsityPattern:
    rows: tuple[RowLabel, ...]
    cols: tuple[ColLabel, ...]
    mask: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.mask.shape

    def nonzeros(self) -> set[tuple[int, int]]:
        return set(zip(*map(np.ndarray.tolist, np.nonzero(self.mask))))

    def row_index(self) -> dict[RowLabel, int]:
        return {r: i for i, r in enumerate(self.rows)}

    def col_index(self) -> dict[ColLabel, int]:
        return {c: j for j, c in enumerate(self.cols)}


@dataclass(frozen=True)
class RankReport:
    structural_full_rank: bool
    numeric_rank: int
    required_rank: int
    smallest_singular_ratio: float
    matching_size: int = 0
    shape: tuple[int, int] = (0, 0)

    @property
    def numeric_full_rank(self) -> bool:
        return self.numeric_rank == self.required_rank

    def to_dict(self) -> dict:
        return {
            "structural_full_rank": self.structural_full_rank,
            "numeric_rank": self.numeric_rank,
            "required_rank": self.required_rank,
            "numeric_full_rank": self.numeric_full_rank,
            "smallest_singular_ratio": self.smallest_singular_ratio,
            "matching_size": self.matching_size,
            "shape": list(self.shape),
        }


# ---------------------------------------------------------------- layout

def _row_labels(partition: BusPartition, T: int, mode: Mode,
                angle_reference: bool) -> list[RowLabel]:
    rows = []
    for t in range(1, T + 1):
        rows += [RowLabel("u", m, t) for m in partition.M]
        if mode is Mode.PHASOR:
            rows += [RowLabel("theta", m, t) for m in partition.M]
        elif angle_reference:
            rows.append(RowLabel("theta_ref", 0, t))
        rows += [RowLabel("p_M", m, t) for m in partition.M]
        rows += [RowLabel("q_M", m, t) for m in partition.M]
        if t < T:
            rows += [RowLabel("p_couple", o, t) for o in partition.O]
            rows += [RowLabel("q_couple", o, t) for o in partition.O]
    return rows


def _col_labels(n: int, T: int) -> list[ColLabel]:
    return [ColLabel(comp, k, t) for t in range(1, T + 1)
            for comp in ("v_r", "v_i") for k in range(n)]


def _row_terms(row: RowLabel):
    """(slot, output family, sign) contributions of one Jacobian row."""
    kind, _, t = row
    if kind == "u":
        return [(t, "u", 1.0)]
    if kind in ("theta", "theta_ref"):
        return [(t, "theta", 1.0)]
    if kind in ("p_M", "q_M"):
        return [(t, kind[0], 1.0)]
    return [(t, kind[0], 1.0), (t + 1, kind[0], -1.0)]


def probing_jacobian_pattern(partition: BusPartition, G_pattern: np.ndarray, T: int,
                             mode: Mode | str, angle_reference: bool = False) -> SparsityPattern:
    """Boolean sparsity of the stacked metering + coupling Jacobian.

    ``G_pattern`` is the adjacency-plus-diagonal pattern of the feeder.
    ``angle_reference`` adds the substation angle row per slot in non-phasor
    mode (see :func:`assemble_jacobian`).
    """
    mode = Mode.parse(mode)
    if T < 1:
        raise ValueError("T must be >= 1")
    G_pattern = np.asarray(G_pattern, dtype=bool)
    n = G_pattern.shape[0]
    rows = _row_labels(partition, T, mode, angle_reference)
    cols = _col_labels(n, T)
    mask = np.zeros((len(rows), len(cols)), dtype=bool)
    eye = np.eye(n, dtype=bool)
    for i, row in enumerate(rows):
        for t, family, _ in _row_terms(row):
            base = (t - 1) * 2 * n
            local = eye[row.bus] if family in ("u", "theta") else G_pattern[row.bus]
            mask[i, base:base + n] |= local
            mask[i, base + n:base + 2 * n] |= local
    return SparsityPattern(tuple(rows), tuple(cols), mask)


def assemble_jacobian(Y: AdmittanceMatrix, partition: BusPartition, states: Sequence[np.ndarray],
                      mode: Mode | str, angle_reference: bool | None = None,
                      ) -> tuple[np.ndarray, SparsityPattern]:
    """Numeric Jacobian of the metering and coupling equations at ``states``.

    In non-phasor mode a rotation of every voltage in one slot leaves all
    magnitudes and injections unchanged, so the raw Jacobian always has a
    T-dimensional null space. By default the substation angle (fixed to 0 as
    the reference) is added as one row per slot to remove it.
    """
    mode = Mode.parse(mode)
    if angle_reference is None:
        angle_reference = mode is Mode.NON_PHASOR
    T = len(states)
    n = Y.n
    pat = probing_jacobian_pattern(partition, Y.pattern(), T, mode, angle_reference)
    dense = []
    for s in states:
        J = jacobians(s, Y)
        dense.append({"u": J.J_u.toarray(), "theta": J.J_theta.toarray(),
                      "p": J.J_p.toarray(), "q": J.J_q.toarray()})
    out = np.zeros(pat.shape)
    for i, row in enumerate(pat.rows):
        for t, family, sign in _row_terms(row):
            base = (t - 1) * 2 * n
            out[i, base:base + 2 * n] += sign * dense[t - 1][family][row.bus]
    return out, pat


# ---------------------------------------------------------------- ranks

def structural_matching(mask: np.ndarray) -> dict[int, int]:
    """Maximum matching of columns to rows through nonzero entries."""
    mask = np.asarray(mask, dtype=bool)
    adjacency = {j: np.flatnonzero(mask[:, j]).tolist() for j in range(mask.shape[1])}
    return hopcroft_karp(adjacency)


def numeric_rank(A: np.ndarray, rtol: float = RANK_RTOL) -> tuple[int, float]:
    """Rank by singular values above rtol * sigma_max, and sigma_min / sigma_max."""
    A = np.asarray(A, dtype=float)
    if A.size == 0:
        return 0, 0.0
    s = np.linalg.svd(A, compute_uv=False)
    if s[0] == 0:
        return 0, 0.0
    rank = int(np.sum(s > rtol * s[0]))
    k = min(A.shape)
    smallest = s[k - 1] / s[0] if A.shape[1] <= A.shape[0] else 0.0
    return rank, float(smallest)


def random_fill(mask: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    mag = rng.uniform(FILL_MIN, 1.0, size=mask.shape)
    sign = rng.choice([-1.0, 1.0], size=mask.shape)
    return np.where(mask, sign * mag, 0.0)


def generic_rank(pattern: SparsityPattern | np.ndarray, trials: int = 1,
                 rng: np.random.Generator | int | None = None) -> RankReport:
    """Structural (matching) and numeric (random fill) column-rank verdicts."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    mask = pattern.mask if isinstance(pattern, SparsityPattern) else np.asarray(pattern, bool)
    rng = np.random.default_rng(rng)
    n_cols = mask.shape[1]
    matched = len(structural_matching(mask))
    best_rank, best_ratio = -1, 0.0
    for _ in range(trials):
        rank, ratio = numeric_rank(random_fill(mask, rng))
        if (rank, ratio) > (best_rank, best_ratio):
            best_rank, best_ratio = rank, ratio
    return RankReport(matched == n_cols, best_rank, n_cols, best_ratio, matched, mask.shape)


def numeric_rank_at_state(feeder: FeederGraph, partition: BusPartition,
                          states: Sequence[np.ndarray], mode: Mode | str,
                          Y: AdmittanceMatrix | None = None,
                          angle_reference: bool | None = None) -> RankReport:
    if not states:
        raise ValueError("need at least one state")
    Y = Y if Y is not None else build_admittance(feeder)
    A, pat = assemble_jacobian(Y, partition, states, mode, angle_reference)
    rank, ratio = numeric_rank(A)
    matched = len(structural_matching(pat.mask))
    return RankReport(matched == A.shape[1], rank, A.shape[1], ratio, matched, A.shape)


# ---------------------------------------------------------------- certificates

class Equation(NamedTuple):
    bus: int
    kind: str  # "p" or "q"
    link: int  # couples slots link and link + 1


@dataclass(frozen=True)
class BlockAssignment:
    T: int
    non_metered: tuple[int, ...]
    groups: tuple[tuple[int, ...], ...]
    blocks: tuple[tuple[Equation, ...], ...]
    carried: tuple[frozenset, ...]  # R_k after each block pair

    def counts(self) -> list[int]:
        return [len(b) for b in self.blocks]

    def bus_multiset(self, t: int) -> dict[int, int]:
        out: dict[int, int] = {}
        for eq in self.blocks[t - 1]:
            out[eq.bus] = out.get(eq.bus, 0) + 1
        return out

    def group_of_block(self, t: int) -> tuple[int, ...]:
        return self.groups[(t - 1) // 2]

    def to_dict(self) -> dict:
        return {
            "T": self.T,
            "groups": [list(g) for g in self.groups],
            "blocks": [[{"bus": e.bus, "kind": e.kind, "link": e.link} for e in b]
                       for b in self.blocks],
            "carried": [sorted(r) for r in self.carried],
        }


class AssignmentError(ValueError):
    pass


def assign_coupling_equations(verdict: IdentifiabilityVerdict, T: int | None = None) -> BlockAssignment:
    """Distribute the 2 O (T-1) coupling equations over the T diagonal blocks.

    Blocks 2k-1 and 2k both end up with the bus pattern O + O_k, where
    O_k is O minus the k-th group. Equations not used by block 2k (the
    accumulated groups R_k, both kinds) are carried to block 2k+1.
    """
    T = verdict.T if T is None else T
    groups = [tuple(g) for g in verdict.partition]
    if T % 2 or T < 2:
        raise AssignmentError(f"block assignment needs an even T >= 2, got {T}")
    if len(groups) != T // 2:
        raise AssignmentError(f"expected {T // 2} groups, got {len(groups)}")
    flat = [o for g in groups for o in g]
    if len(flat) != len(set(flat)):
        raise AssignmentError("groups overlap")
    O = sorted(flat)
    blocks: list[list[Equation]] = [[] for _ in range(T)]
    carried = []
    R: set[int] = set()
    pending: list[Equation] = []
    for k, group in enumerate(groups, start=1):
        odd, even = 2 * k - 1, 2 * k
        Obar = set(group)
        if R & Obar:
            raise AssignmentError(f"group {k} overlaps earlier groups")
        Ok = set(O) - Obar
        fresh = sorted(Ok - R)
        blocks[odd - 1] += pending
        link = odd
        for o in O:
            for kind in COUPLING_KINDS:
                eq = Equation(o, kind, link)
                to_odd = o in fresh or (o in Obar and kind == "p")
                blocks[(odd if to_odd else even) - 1].append(eq)
        pending = []
        if even < T:
            link = even
            for o in O:
                for kind in COUPLING_KINDS:
                    eq = Equation(o, kind, link)
                    if o in fresh:
                        blocks[even - 1].append(eq)
                    else:
                        pending.append(eq)
        R |= Obar
        carried.append(frozenset(R))
    if pending:
        raise AssignmentError("unassigned coupling equations left over")
    return BlockAssignment(T, tuple(O), tuple(groups),
                           tuple(tuple(b) for b in blocks), tuple(carried))


def _block_certificate(t: int, assignment: BlockAssignment, verdict: IdentifiabilityVerdict,
                       partition: BusPartition, mode: Mode) -> dict[ColLabel, RowLabel] | None:
    """Explicit column -> row matching for diagonal block t, or None."""
    k = (t - 1) // 2
    group = set(assignment.groups[k])
    match = verdict.matchings[k] if k < len(verdict.matchings) else {}
    out: dict[ColLabel, RowLabel] = {}
    for m in partition.M:
        out[ColLabel("v_r", m, t)] = RowLabel("u", m, t)
        out[ColLabel("v_i", m, t)] = RowLabel("theta" if mode is Mode.PHASOR else "p_M", m, t)
    coupling: dict[int, list[RowLabel]] = {}
    for eq in assignment.blocks[t - 1]:
        coupling.setdefault(eq.bus, []).append(RowLabel(f"{eq.kind}_couple", eq.bus, eq.link))
    for o in assignment.non_metered:
        rows = coupling.get(o, [])
        if not rows:
            return None
        out[ColLabel("v_r", o, t)] = rows[0]
        if o in group:
            target = match.get(o)
            if target is None:
                return None
            m, copy = target
            if mode is Mode.NON_PHASOR and copy:
                return None
            kind = "q_M" if (copy or mode is Mode.NON_PHASOR) else "p_M"
            out[ColLabel("v_i", o, t)] = RowLabel(kind, m, t)
        else:
            if len(rows) < 2:
                return None
            out[ColLabel("v_i", o, t)] = rows[1]
    return out


def block_matching_check(assignment: BlockAssignment, verdict: IdentifiabilityVerdict,
                         G_pattern: np.ndarray, partition: BusPartition,
                         mode: Mode | str | None = None) -> list[bool]:
    """Per diagonal block: does the constructive matching certify full rank?

    The construction pairs v_r(M) with u rows, v_i(M) with angle rows (or
    active-power rows without phasor data), v_r(O) with a coupling row of
    the same bus, v_i(O_k) with its second coupling row and v_i of each
    group member with the metered injection row it was matched to.
    """
    mode = Mode.parse(mode if mode is not None else verdict.mode)
    pattern = probing_jacobian_pattern(partition, G_pattern, assignment.T, mode)
    ri, ci = pattern.row_index(), pattern.col_index()
    n = np.asarray(G_pattern).shape[0]
    results = []
    for t in range(1, assignment.T + 1):
        cert = _block_certificate(t, assignment, verdict, partition, mode)
        ok = cert is not None and len(cert) == 2 * n
        if ok:
            used = list(cert.values())
            ok = len(set(used)) == len(used) and all(
                row in ri and pattern.mask[ri[row], ci[col]] for col, row in cert.items())
        results.append(bool(ok))
    return results


def certificate_matching(assignment: BlockAssignment, verdict: IdentifiabilityVerdict,
                         partition: BusPartition, mode: Mode | str | None = None,
                         ) -> dict[ColLabel, RowLabel]:
    """Union of all block certificates: a column -> row matching of the whole Jacobian."""
    mode = Mode.parse(mode if mode is not None else verdict.mode)
    out: dict[ColLabel, RowLabel] = {}
    for t in range(1, assignment.T + 1):
        cert = _block_certificate(t, assignment, verdict, partition, mode)
        if cert is None:
            raise AssignmentError(f"block {t} has no certificate")
        out.update(cert)
    return out


# ---------------------------------------------------------------- export

def write_pattern(pattern: SparsityPattern, path: str | Path) -> None:
    """Matrix Market coordinate pattern with the labels in comment lines."""
    lines = ["%%MatrixMarket matrix coordinate pattern general"]
    lines += [f"% row {i + 1} {r.kind} {r.bus} {r.t}" for i, r in enumerate(pattern.rows)]
    lines += [f"% col {j + 1} {c.component} {c.bus} {c.t}" for j, c in enumerate(pattern.cols)]
    nz = sorted(pattern.nonzeros())
    lines.append(f"{pattern.shape[0]} {pattern.shape[1]} {len(nz)}")
    lines += [f"{i + 1} {j + 1}" for i, j in nz]
    Path(path).write_text("\n".join(lines) + "\n")


def read_pattern(path: str | Path) -> SparsityPattern:
    rows: dict[int, RowLabel] = {}
    cols: dict[int, ColLabel] = {}
    shape = None
    entries = []
    text = Path(path).read_text().splitlines()
    if not text or not text[0].lower().startswith("%%matrixmarket"):
        raise ValueError(f"{path}: not a Matrix Market file")
    for line in text[1:]:
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "%":
            if len(parts) == 6 and parts[1] == "row":
                rows[int(parts[2])] = RowLabel(parts[3], int(parts[4]), int(parts[5]))
            elif len(parts) == 6 and parts[1] == "col":
                cols[int(parts[2])] = ColLabel(parts[3], int(parts[4]), int(parts[5]))
            continue
        if parts[0].startswith("%"):
            continue
        if shape is None:
            shape = (int(parts[0]), int(parts[1]))
            continue
        entries.append((int(parts[0]) - 1, int(parts[1]) - 1))
    if shape is None:
        raise ValueError(f"{path}: missing size line")
    mask = np.zeros(shape, dtype=bool)
    for i, j in entries:
        mask[i, j] = True
    row_labels = tuple(rows.get(i + 1, RowLabel("row", i, 0)) for i in range(shape[0]))
    col_labels = tuple(cols.get(j + 1, ColLabel("col", j, 0)) for j in range(shape[1]))
    return SparsityPattern(row_labels, col_labels, mask)
