"""qgc command line: solve, converge, oracle and stability subcommands."""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .cases import (
    CASES,
    ConfigError,
    ExperimentCase,
    build_problem,
    case_from_config,
    get_case,
    oracle_value,
    relative_error,
    solver_config,
)
from .oracle import QuadratureNotConverged
from .solver import SolveReport, backward_sweep, dumps17, stability_check, threads_from_env

log = logging.getLogger("qgc")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGENCE = 3
EXIT_ORACLE = 4

CSV_HEADER = ("n", "y0", "oracle", "rel_error", "runtime_s",
              "max_u", "max_du", "max_d2u", "max_d3u", "flags")


@dataclass
class ConvergenceRow:
    n: int
    y0: float
    oracle: float
    rel_error: float
    runtime_s: float
    maxima: tuple
    flags: str = ""

    @property
    def divergent(self) -> bool:
        return "divergent" in self.flags.split(";")


def _flags(report: SolveReport) -> str:
    out = []
    if report.divergent:
        out.append("divergent")
    if report.out_of_box:
        out.append(f"out_of_box={report.out_of_box}")
    return ";".join(out)


def run_case(case: ExperimentCase, threads: int = 1, keep_grids: bool = False,
             dump_root: Optional[Path] = None, oracle: Optional[float] = None):
    """One sweep per n. Returns (rows, reports, verdict); verdict is None below three runs."""
    if not case.n_list:
        raise ConfigError("nothing to run")
    model, driver, terminal = build_problem(case)
    if oracle is None:
        ov = oracle_value(case)
        oracle = math.nan if ov is None else ov.value
    rows, reports = [], []
    for n in case.n_list:
        dump = None
        if keep_grids and dump_root is not None:
            dump = str(dump_root / f"n{n:05d}")
        cfg = solver_config(case, n, threads=threads, dump_dir=dump)
        rep = backward_sweep(model, driver, terminal, cfg)
        reports.append(rep)
        rows.append(ConvergenceRow(
            n=n, y0=rep.y0, oracle=oracle, rel_error=relative_error(rep.y0, oracle),
            runtime_s=rep.runtime_seconds, maxima=rep.maxima(), flags=_flags(rep),
        ))
        log.info("%s n=%d y0=%.10g", case.id, n, rep.y0)
    verdict = stability_check(reports) if len(reports) >= 3 else None
    return rows, reports, verdict


def fit_rate(rows: Sequence[ConvergenceRow]) -> tuple[float, int]:
    """Least-squares slope of log10|rel_error| on log10 n, and the number of divergent rows skipped."""
    skipped = sum(1 for r in rows if r.divergent)
    usable = [r for r in rows if not r.divergent and math.isfinite(r.rel_error) and r.rel_error != 0]
    if len(usable) < 3:
        raise ValueError(f"need at least three usable rows, got {len(usable)}")
    x = np.log10([r.n for r in usable])
    y = np.log10([abs(r.rel_error) for r in usable])
    return float(np.polyfit(x, y, 1)[0]), skipped


def _g17(v: float) -> str:
    return format(float(v), ".17g")


def format_csv(rows: Sequence[ConvergenceRow], trailer: Sequence[tuple] = ()) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in rows:
        w.writerow([r.n, _g17(r.y0), _g17(r.oracle), _g17(r.rel_error), _g17(r.runtime_s),
                    *(_g17(m) for m in r.maxima), r.flags])
    for key, value in trailer:
        buf.write(f"# {key},{value}\n")
    return buf.getvalue()


def emit_csv(rows: Sequence[ConvergenceRow], path, trailer: Sequence[tuple] = ()) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(format_csv(rows, trailer))


def read_csv(path) -> tuple[list, dict]:
    """Inverse of emit_csv: rows plus the '# key,value' trailer records."""
    rows, trailer = [], {}
    with open(path, encoding="utf-8", newline="") as fh:
        lines = fh.read().split("\n")
    body = [ln for ln in lines if ln and not ln.startswith("#")]
    for ln in lines:
        if ln.startswith("# "):
            key, _, value = ln[2:].partition(",")
            trailer[key] = value
    reader = csv.DictReader(body)
    for rec in reader:
        rows.append(ConvergenceRow(
            n=int(rec["n"]), y0=float(rec["y0"]), oracle=float(rec["oracle"]),
            rel_error=float(rec["rel_error"]), runtime_s=float(rec["runtime_s"]),
            maxima=tuple(float(rec[k]) for k in ("max_u", "max_du", "max_d2u", "max_d3u")),
            flags=rec["flags"],
        ))
    return rows, trailer


def load_config(path) -> dict:
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML: {exc}") from exc


def resolve_case(args) -> ExperimentCase:
    if args.config:
        cfg = load_config(args.config)
        if args.case:
            cfg.setdefault("run", {})["case"] = args.case
        return case_from_config(cfg)
    if args.case:
        return get_case(args.case)
    raise ConfigError("give --config or --case")


def _write(text: str, out: Optional[str]) -> None:
    if out is None or out == "-":
        sys.stdout.write(text)
    else:
        with open(out, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)


def cmd_solve(args) -> int:
    case = resolve_case(args)
    n = args.n if args.n is not None else (case.n_list[-1] if case.n_list else None)
    if n is None:
        raise ConfigError("no n given and the case has no n-list")
    model, driver, terminal = build_problem(case)
    dump = None
    if args.keep_grids:
        dump = str(Path(args.out).with_suffix("") if args.out and args.out != "-"
                   else Path(f"{case.id}_grids")) + f"_n{n:05d}"
    rep = backward_sweep(model, driver, terminal,
                         solver_config(case, n, threads=threads_from_env(args.threads),
                                       dump_dir=dump))
    doc = rep.to_dict()
    doc["case"] = case.id
    _write(dumps17(doc) + "\n", args.out)
    return EXIT_DIVERGENCE if rep.divergent else EXIT_OK


def cmd_converge(args) -> int:
    case = resolve_case(args)
    if args.n_list:
        case.n_list = tuple(int(v) for v in args.n_list.split(","))
        case.__post_init__()
    out = args.out if args.out and args.out != "-" else None
    dump_root = Path(out).parent / f"{Path(out).stem}_grids" if out else Path(f"{case.id}_grids")
    rows, reports, verdict = run_case(case, threads=threads_from_env(args.threads),
                                      keep_grids=args.keep_grids, dump_root=dump_root)
    if args.no_timing:
        for r in rows:
            r.runtime_s = 0.0
        for rep in reports:
            rep.runtime_seconds = 0.0
    trailer = [("case", case.id)]
    try:
        slope, skipped = fit_rate(rows)
        trailer += [("slope", _g17(slope)), ("divergent_rows", str(skipped))]
    except ValueError:
        trailer += [("slope", "nan")]
    trailer.append(("stability", "n/a" if verdict is None else str(verdict)))
    _write(format_csv(rows, trailer), out)
    if args.reports:
        with open(args.reports, "w", encoding="utf-8", newline="") as fh:
            fh.write(dumps17([r.to_dict() for r in reports]) + "\n")
    return EXIT_DIVERGENCE if any(r.divergent for r in rows) else EXIT_OK


def cmd_oracle(args) -> int:
    if args.config or args.case:
        cases = [resolve_case(args)]
    else:
        cases = [get_case(cid) for cid in CASES]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("case", "value", "method", "discrepancy"))
    status = EXIT_OK
    seen = set()
    for case in cases:
        key = json.dumps([case.model, case.driver, case.terminal, case.solver, case.oracle],
                         sort_keys=True)
        try:
            ov = oracle_value(case)
        except QuadratureNotConverged as exc:
            log.error("%s: %s", case.id, exc)
            w.writerow((case.id, _g17(exc.value), "quadrature(not converged)",
                        _g17(abs(exc.value - exc.refined))))
            status = EXIT_ORACLE
            continue
        if ov is None or key in seen:
            continue
        seen.add(key)
        w.writerow((case.id, _g17(ov.value), ov.method, _g17(ov.discrepancy)))
    _write(buf.getvalue(), args.out)
    return status


def _load_reports(paths) -> list:
    reports = []
    for p in paths:
        try:
            with open(p, encoding="utf-8") as fh:
                data = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read report {p}: {exc}") from exc
        for item in data if isinstance(data, list) else [data]:
            reports.append(SolveReport.from_dict(item))
    return sorted(reports, key=lambda r: r.n)


def cmd_stability(args) -> int:
    reports = _load_reports(args.reports)
    try:
        verdict = stability_check(reports, threshold=args.threshold)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    lines = [f"verdict,{verdict}"]
    lines += [f"slope_order{m},{_g17(s)}" for m, s in enumerate(verdict.slopes)]
    _write("\n".join(lines) + "\n", args.out)
    return EXIT_OK if verdict.stable else EXIT_DIVERGENCE


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qgc", description=__doc__)
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, with_case=True):
        if with_case:
            sp.add_argument("--config", help="TOML experiment description")
            sp.add_argument("--case", help=f"registered case id ({', '.join(CASES)})")
        sp.add_argument("--out", help="output path (default stdout)")
        sp.add_argument("--threads", type=int, default=None,
                        help="worker threads (default $QGC_THREADS or 1)")
        sp.add_argument("--keep-grids", action="store_true", help="dump per-step grid CSV files")

    sp = sub.add_parser("solve", help="one sweep, JSON report")
    common(sp)
    sp.add_argument("--n", type=int, help="number of time steps (default: last of the n-list)")
    sp.set_defaults(func=cmd_solve)

    sp = sub.add_parser("converge", help="sweeps over an n-list, CSV with slope and verdict")
    common(sp)
    sp.add_argument("--n-list", help="comma separated, overrides [run] n_list")
    sp.add_argument("--reports", help="also store the JSON reports here")
    sp.add_argument("--no-timing", action="store_true", help="write runtime_s as 0")
    sp.set_defaults(func=cmd_converge)

    sp = sub.add_parser("oracle", help="reference values as CSV")
    common(sp)
    sp.set_defaults(func=cmd_oracle)

    sp = sub.add_parser("stability", help="stability verdict from stored JSON reports")
    common(sp, with_case=False)
    sp.add_argument("reports", nargs="+", help="report files from solve or converge --reports")
    sp.add_argument("--threshold", type=float, default=0.1)
    sp.set_defaults(func=cmd_stability)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"qgc: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except QuadratureNotConverged as exc:
        print(f"qgc: {exc}", file=sys.stderr)
        return EXIT_ORACLE


if __name__ == "__main__":
    sys.exit(main())
