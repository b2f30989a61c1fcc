"""Command-line entry point: ``gridprobe {check,simulate,recover,fit-zip,rank}``.

Reports are JSON (``--pretty`` adds a short human-readable table on stderr).
Exit codes: 0 success / certified, 2 negative verdict or failed recovery,
1 error. Every randomized step draws from one generator seeded by ``--seed``,
which is recorded in the report, so a fixed seed gives byte-identical output.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
import tempfile
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from .feeder import BusPartition, FeederError, FeederGraph, build_admittance, load_feeder, load_partition
from .generic_rank import (assign_coupling_equations, block_matching_check, generic_rank,
                           numeric_rank_at_state, probing_jacobian_pattern, read_pattern,
                           write_pattern)
from .identifiability import (IdentifiabilityVerdict, Mode, search_min_T, test_for_T,
                              test_single_slot)
from .powerflow import PowerFlowError, stack
from .probing import (LoadModel, ProbingDataset, ProbingPlan, RecoveryResult, ZipIllPosedError,
                      default_plan, fit_zip, recover_loads, recover_per_slot, simulate_probing,
                      vandermonde_conditioning)

log = logging.getLogger("gridprobe")

EXIT_OK, EXIT_ERROR, EXIT_NEGATIVE = 0, 1, 2


class CliError(Exception):
    pass


# ---------------------------------------------------------------- helpers

def _read_json(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc.strerror or exc}") from None
    except json.JSONDecodeError as exc:
        raise CliError(f"{path}: malformed JSON ({exc})") from None


def _clean(obj):
    """Make a report JSON-safe: numpy scalars/arrays to Python, non-finite to None."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        return x if math.isfinite(x) else None
    return obj


def write_report(report: dict, out: str | None) -> None:
    text = json.dumps(_clean(report), indent=2, sort_keys=True) + "\n"
    if out is None or out == "-":
        sys.stdout.write(text)
        return
    target = Path(out)
    target.parent.mkdir(parents=True, exist_ok=True)
    # atomic: write a sibling temp file, then rename over the target
    fd, tmp = tempfile.mkstemp(dir=target.parent, prefix=f".{target.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, target)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _setup(args) -> tuple[FeederGraph, BusPartition, Mode]:
    if not args.feeder or not args.partition:
        raise CliError("--feeder and --partition are required")
    feeder = load_feeder(args.feeder)
    partition = load_partition(args.partition)
    return feeder, partition, Mode.parse(args.mode)


def _parse_T(value: str) -> int | str:
    if value == "auto":
        return value
    try:
        T = int(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"--T must be an integer or 'auto', got {value!r}") from None
    if T < 1:
        raise argparse.ArgumentTypeError("--T must be at least 1")
    return T


def _verdict(feeder, partition, mode, T) -> IdentifiabilityVerdict:
    if T == "auto":
        return search_min_T(feeder, partition, mode)
    if T == 1:
        return test_single_slot(feeder, partition, mode)
    return test_for_T(feeder, partition, mode, T)


def _random_states(n: int, T: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Random states in the 0.9-1.1 magnitude band, substation at 1+j0."""
    out = []
    for _ in range(T):
        v = rng.uniform(0.9, 1.1, n) * np.exp(1j * rng.uniform(-0.2, 0.2, n))
        v[0] = 1.0
        out.append(stack(v))
    return out


def _certify(feeder, partition, verdict, rng, trials) -> dict:
    T, mode = verdict.T, verdict.mode
    cert: dict = {}
    if not verdict.single_slot:
        assignment = assign_coupling_equations(verdict)
        checks = block_matching_check(assignment, verdict, feeder.pattern(), partition)
        cert["assignment"] = assignment.to_dict()
        cert["block_checks"] = checks
    pattern = probing_jacobian_pattern(partition, feeder.pattern(), T, mode,
                                       angle_reference=mode is Mode.NON_PHASOR)
    cert["generic_rank"] = generic_rank(pattern, trials, rng).to_dict()
    states = _random_states(feeder.n_buses, T, rng)
    cert["numeric_rank"] = numeric_rank_at_state(feeder, partition, states, mode).to_dict()
    return cert


def _pretty(lines: list[str], enabled: bool) -> None:
    if enabled:
        sys.stderr.write("\n".join(lines) + "\n")


def _load_table(result: RecoveryResult, truth: dict | None) -> tuple[list[dict], float | None]:
    rows, worst = [], None
    for bus, (p, q) in result.loads.items():
        row = {"bus": bus, "p_est": p, "q_est": q}
        if truth is not None and bus in truth:
            tp, tq = truth[bus]
            err = max(abs(p - tp), abs(q - tq))
            row.update(p_true=tp, q_true=tq, abs_error=err)
            worst = err if worst is None else max(worst, err)
        rows.append(row)
    return rows, worst


def _truth_from_dataset(dataset: ProbingDataset, partition: BusPartition, Y) -> list[dict]:
    """Per-slot true (p, q) of O buses, from the simulator's stored states."""
    from .powerflow import injections
    out = []
    for s in dataset.true_states or ():
        p, q = injections(np.asarray(s), Y)
        out.append({o: (float(p[o]), float(q[o])) for o in partition.O})
    return out


def _series(feeder, partition, results: list[RecoveryResult]) -> list[dict]:
    """Per-bus (u, p, q) time series from per-slot recoveries, for fit-zip."""
    n = feeder.n_buses
    series = []
    for j, o in enumerate(partition.O):
        u = [float(np.hypot(r.states[0][o], r.states[0][n + o])) for r in results]
        p = [float(r.slot_loads[0, j, 0]) for r in results]
        q = [float(r.slot_loads[0, j, 1]) for r in results]
        series.append({"bus": o, "u": u, "p": p, "q": q})
    return series


# ---------------------------------------------------------------- commands

def cmd_check(args) -> int:
    feeder, partition, mode = _setup(args)
    rng = np.random.default_rng(args.seed)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        verdict = _verdict(feeder, partition, mode, args.T)
    notes = [str(w.message) for w in caught]
    for note in notes:
        log.warning(note)
    report = {"command": "check", "seed": args.seed, "verdict": verdict.to_dict(),
              "message": verdict.describe(), "warnings": notes}
    if args.certify and verdict.success:
        report["certificate"] = _certify(feeder, partition, verdict, rng, args.trials)
    write_report(report, args.out)
    _pretty([verdict.describe(),
             f"flow {verdict.flow_value}/{verdict.required_flow}, T_max={verdict.T_max}",
             *(f"  group {k + 1}: {list(g)}" for k, g in enumerate(verdict.partition))],
            args.pretty)
    return EXIT_OK if verdict.success else EXIT_NEGATIVE


def _recovery_report(feeder, partition, dataset, mode, truth_slots, per_slot) -> tuple[dict, bool]:
    Y = build_admittance(feeder)
    if per_slot or dataset.T == 1:
        results = recover_per_slot(feeder, partition, dataset, mode, Y=Y)
    else:
        results = [recover_loads(feeder, partition, dataset, mode, Y=Y)]
    slots = []
    worst = None
    ok = True
    for k, res in enumerate(results):
        truth = None
        if truth_slots:
            if per_slot or dataset.T == 1:
                truth = truth_slots[k]
            else:
                truth = {o: tuple(np.mean([ts[o] for ts in truth_slots], axis=0)) for o in partition.O}
        table, err = _load_table(res, truth)
        if err is not None:
            worst = err if worst is None else max(worst, err)
        ok &= res.converged and not res.rank_deficient
        slots.append({"result": res.to_dict(), "loads": table, "max_abs_error": err,
                      "rank_deficient": res.rank_deficient})
    report = {"recoveries": slots, "max_abs_error": worst, "converged": all(r.converged for r in results),
              "rank_deficient": any(r.rank_deficient for r in results)}
    if per_slot or dataset.T == 1:
        report["series"] = _series(feeder, partition, results)
    return report, ok


def _pretty_recovery(report: dict, enabled: bool) -> None:
    lines = []
    for k, slot in enumerate(report["recoveries"]):
        lines.append(f"recovery {k + 1}: converged={slot['result']['converged']} "
                     f"residual={slot['result']['residual_norm']:.3e}"
                     + ("  RANK DEFICIENT" if slot["rank_deficient"] else ""))
        lines.append(f"  {'bus':>5} {'p_true':>12} {'p_est':>12} {'q_true':>12} {'q_est':>12} {'error':>10}")
        for row in slot["loads"]:
            lines.append(f"  {row['bus']:>5} {row.get('p_true', float('nan')):>12.6f} {row['p_est']:>12.6f} "
                         f"{row.get('q_true', float('nan')):>12.6f} {row['q_est']:>12.6f} "
                         f"{row.get('abs_error', float('nan')):>10.2e}")
    if report["max_abs_error"] is not None:
        lines.append(f"max abs error: {report['max_abs_error']:.3e}")
    _pretty(lines, enabled)


def cmd_simulate(args) -> int:
    feeder, partition, mode = _setup(args)
    if not args.loads:
        raise CliError("--loads is required")
    loads = LoadModel.from_dict(_read_json(args.loads))
    rng = np.random.default_rng(args.seed)
    plan = ProbingPlan.from_dict(_read_json(args.plan)) if args.plan else None
    if args.per_slot:
        # independent slots: each needs the single-slot certificate, and T may be odd
        verdict = test_single_slot(feeder, partition, mode)
        notes = []
        T = plan.T if plan else (1 if args.T == "auto" else args.T)
    else:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            verdict = _verdict(feeder, partition, mode, plan.T if plan else args.T)
        notes = [str(w.message) for w in caught]
        T = verdict.T
    if plan is None:
        plan = default_plan(partition, T, rng, amplitude=args.amplitude)
    T = plan.T
    if not verdict.success:
        notes.append(f"setup is not certified for T={T}; recovery may be ambiguous")
    for note in notes:
        log.warning(note)
    dataset = simulate_probing(feeder, partition, loads, plan, mode)
    report = {"command": "simulate", "seed": args.seed, "mode": mode.value, "T": T,
              "verdict": verdict.to_dict(), "plan": plan.to_dict(), "warnings": notes}
    if args.dataset_out:
        write_report(dataset.to_dict(), args.dataset_out)
    code = EXIT_OK
    if args.recover:
        truth = _truth_from_dataset(dataset, partition, build_admittance(feeder))
        rec, ok = _recovery_report(feeder, partition, dataset, mode, truth, args.per_slot)
        report.update(rec)
        code = EXIT_OK if ok else EXIT_NEGATIVE
        _pretty_recovery(rec, args.pretty)
    else:
        report["dataset"] = dataset.to_dict()
    write_report(report, args.out)
    return code


def cmd_recover(args) -> int:
    feeder, partition, mode = _setup(args)
    if not args.dataset:
        raise CliError("--dataset is required")
    dataset = ProbingDataset.from_dict(_read_json(args.dataset))
    if args.mode_given:
        dataset_mode = mode
    else:
        dataset_mode = dataset.mode
    truth = None
    if args.loads:
        constant = LoadModel.from_dict(_read_json(args.loads)).constant
        truth = [dict(constant)] * dataset.T
    elif dataset.true_states:
        truth = _truth_from_dataset(dataset, partition, build_admittance(feeder))
    rec, ok = _recovery_report(feeder, partition, dataset, dataset_mode, truth, args.per_slot)
    report = {"command": "recover", "seed": args.seed, "mode": dataset_mode.value, "T": dataset.T, **rec}
    write_report(report, args.out)
    _pretty_recovery(rec, args.pretty)
    return EXIT_OK if ok else EXIT_NEGATIVE


def cmd_fit_zip(args) -> int:
    if not args.series:
        raise CliError("--series is required")
    data = _read_json(args.series)
    series = data.get("series")
    if not isinstance(series, list):
        raise CliError(f"{args.series}: expected a top-level 'series' list")
    buses, lines = [], []
    for entry in series:
        bus = entry.get("bus")
        u = entry.get("u", [])
        record = {"bus": bus, "ill_posed": False}
        if len(u) >= 3:
            diag = vandermonde_conditioning(u)
            record["diagnostics"] = {"determinant": diag.determinant, "condition": diag.condition}
        for comp in ("p", "q"):
            if comp not in entry:
                continue
            try:
                fit = fit_zip(u, entry[comp])
            except ZipIllPosedError as exc:
                record["ill_posed"] = True
                record[comp] = {"error": str(exc)}
                continue
            except ValueError as exc:
                record["ill_posed"] = True
                record[comp] = {"error": str(exc)}
                continue
            record[comp] = {"alpha": fit.alpha, "beta": fit.beta, "gamma": fit.gamma,
                            "residual": fit.residual}
        buses.append(record)
        det = record.get("diagnostics", {}).get("determinant")
        lines.append(f"bus {bus}: " + ("ILL-POSED " if record["ill_posed"] else "")
                     + (f"det={det:.3e}" if det is not None else "")
                     + "".join(f"  {c}: a={record[c]['alpha']:.6g} b={record[c]['beta']:.6g} "
                               f"g={record[c]['gamma']:.6g}"
                               for c in ("p", "q") if c in record and "alpha" in record[c]))
    report = {"command": "fit-zip", "seed": args.seed, "buses": buses,
              "ill_posed": [b["bus"] for b in buses if b["ill_posed"]]}
    write_report(report, args.out)
    _pretty(lines, args.pretty)
    return EXIT_OK


def cmd_rank(args) -> int:
    rng = np.random.default_rng(args.seed)
    if args.pattern:
        pattern = read_pattern(args.pattern)
    else:
        feeder, partition, mode = _setup(args)
        T = args.T
        if T == "auto":
            T = search_min_T(feeder, partition, mode).T
        pattern = probing_jacobian_pattern(partition, feeder.pattern(), T, mode,
                                           angle_reference=args.angle_reference)
    if args.write_pattern:
        write_pattern(pattern, args.write_pattern)
    report = generic_rank(pattern, args.trials, rng)
    write_report({"command": "rank", "seed": args.seed, "trials": args.trials,
                  "rank": report.to_dict()}, args.out)
    _pretty([f"shape {report.shape}: structural full rank={report.structural_full_rank}, "
             f"numeric rank {report.numeric_rank}/{report.required_rank}"], args.pretty)
    return EXIT_OK if report.structural_full_rank and report.numeric_full_rank else EXIT_NEGATIVE


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gridprobe", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--feeder", help="feeder JSON file")
    common.add_argument("--partition", help="partition JSON file (metered / non_metered)")
    common.add_argument("--mode", default=None, help="phasor | non-phasor (default phasor)")
    common.add_argument("--T", type=_parse_T, default="auto", help="probing slots, integer or 'auto'")
    common.add_argument("--seed", type=int, default=0, help="seed for every randomized step")
    common.add_argument("--out", default=None, help="report path (default stdout)")
    common.add_argument("--pretty", action="store_true", help="print a readable summary to stderr")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("check", parents=[common], help="test probing identifiability")
    p.add_argument("--certify", action="store_true",
                   help="add the block assignment and rank reports to a positive verdict")
    p.add_argument("--trials", type=int, default=3, help="random fills for the generic rank")
    p.set_defaults(func=cmd_check)

    p = sub.add_parser("simulate", parents=[common], help="simulate noiseless probing")
    p.add_argument("--loads", help="load model JSON")
    p.add_argument("--plan", help="probing plan JSON (default: random setpoints from --seed)")
    p.add_argument("--amplitude", type=float, default=0.05, help="default-plan setpoint spread")
    p.add_argument("--dataset-out", help="also write the dataset JSON here")
    p.add_argument("--recover", action="store_true", help="recover loads and report errors")
    p.add_argument("--per-slot", action="store_true", help="recover each slot independently")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("recover", parents=[common], help="recover loads from a dataset")
    p.add_argument("--dataset", help="dataset JSON")
    p.add_argument("--loads", help="true constant loads, for the error table")
    p.add_argument("--per-slot", action="store_true", help="recover each slot independently")
    p.set_defaults(func=cmd_recover)

    p = sub.add_parser("fit-zip", parents=[common], help="least-squares ZIP fit per bus")
    p.add_argument("--series", help="JSON with a 'series' list of {bus, u, p, q}")
    p.set_defaults(func=cmd_fit_zip)

    p = sub.add_parser("rank", parents=[common], help="generic rank of a sparsity pattern")
    p.add_argument("--pattern", help="Matrix Market pattern file (else built from feeder/partition)")
    p.add_argument("--write-pattern", help="export the pattern to this file")
    p.add_argument("--trials", type=int, default=3)
    p.add_argument("--angle-reference", action="store_true",
                   help="add a substation angle row per slot (non-phasor)")
    p.set_defaults(func=cmd_rank)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    args.mode_given = args.mode is not None
    try:
        args.mode = Mode.parse(args.mode or "phasor")
        return args.func(args)
    except (CliError, FeederError, PowerFlowError, ValueError, KeyError, OSError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
