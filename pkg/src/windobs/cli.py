"""``windobs`` command line.

Exit codes: 0 success, 1 scenario parse error, 2 singular base point,
3 verdict mismatch (or any failing reproduce item), 4 non-finite simulation
state, 5 filter divergence.
"""

from __future__ import annotations

import argparse
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import runner
from .scenario import ScenarioError, bundled, describe_schema, load_scenario, resolve

EXIT_PARSE, EXIT_SINGULAR, EXIT_MISMATCH, EXIT_NONFINITE, EXIT_DIVERGED = 1, 2, 3, 4, 5

GROUPS = {"table": {1: "table1", 2: "table2", 3: "table3"},
          "figure": {2: "figure2", 3: "figure3"}}


def _load(arg):
    return load_scenario(resolve(arg))


def _write(path, text):
    if path:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text)


def cmd_analyze(args) -> int:
    sc = _load(args.scenario)
    out = runner.run_analysis(sc, args.workers)
    sys.stdout.write(out.report)
    _write(args.out, runner.outcome_json(out))
    return out.exit_code


def cmd_simulate(args) -> int:
    sc = _load(args.scenario)
    out = runner.run_simulation(sc, args.seed)
    sys.stdout.write(out.report)
    traj = out.artifacts.get("trajectory")
    if args.out and traj is not None:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        traj.to_csv(args.out)
        _write(str(Path(args.out).with_suffix(".gp")),
               runner.gnuplot_script(Path(args.out).name, sc.name))
    _write(args.metrics, runner.outcome_json(out))
    return out.exit_code


def cmd_filter(args) -> int:
    sc = _load(args.scenario)
    out = runner.run_filter_scenario(sc, args.seed)
    sys.stdout.write(out.report)
    est = out.artifacts.get("estimate")
    if args.out and est is not None:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        est.to_csv(args.out)
    if args.metrics and est is not None:
        _write(args.metrics, est.metrics_json() + "\n")
    return out.exit_code


def _run_path(path: str):
    sc = load_scenario(path)
    t0 = time.perf_counter()
    out = runner.run(sc)
    out.artifacts.clear()  # keep results picklable and small
    return str(path), sc["scenario"]["group"], out, time.perf_counter() - t0


def figure3_cross_checks(outcomes: dict[str, runner.Outcome]) -> list[runner.Check]:
    """Comparisons that span several filter runs."""
    checks = []

    def final(name):
        o = outcomes.get(name)
        return None if o is None else o.results.get("metrics", {}).get("final_zeta_error")

    many, few = final("fig3-100turns"), final("fig3-34turns")
    if many is not None and few is not None:
        checks.append(runner.Check("fig3: 100-turn error <= 1.1 x 34-turn error",
                                   f"<= {1.1 * few:.4g}", many,
                                   "PASS" if many <= 1.1 * few else "FAIL"))
    straight = final("fig3-straight")
    if many is not None and straight is not None:
        checks.append(runner.Check("fig3: 100 turns beat straight flight", f"< {straight:.4g}",
                                   many, "PASS" if many < straight else "FAIL"))
    return checks


def cmd_reproduce(args) -> int:
    groups = None
    if args.table:
        groups = {GROUPS["table"].get(args.table, f"table{args.table}")}
    if args.figure:
        groups = (groups or set()) | {GROUPS["figure"].get(args.figure, f"figure{args.figure}")}
    paths = [str(p) for p in bundled()]
    todo = []
    for p in paths:
        try:
            g = load_scenario(p)["scenario"]["group"]
        except ScenarioError as exc:
            print(exc, file=sys.stderr)
            return EXIT_PARSE
        if groups is None or g in groups:
            todo.append(p)
    if not todo:
        print("no scenarios selected", file=sys.stderr)
        return EXIT_MISMATCH
    t0 = time.perf_counter()
    if args.workers > 1:
        with ProcessPoolExecutor(args.workers) as pool:
            done = list(pool.map(_run_path, todo))
    else:
        done = [_run_path(p) for p in todo]
    outcomes = {out.scenario: out for _, _, out, _ in done}
    extra = figure3_cross_checks(outcomes)
    lines = ["# windobs reproduction summary", ""]
    failed = 0
    for group in sorted({g for _, g, _, _ in done}):
        lines += [f"## {group}", "", "| scenario | item | expected | actual | status |",
                  "|---|---|---|---|---|"]
        for _, g, out, secs in done:
            if g != group:
                continue
            items = out.checks or [runner.Check("run", "exit 0", f"exit {out.exit_code}",
                                                "PASS" if out.exit_code == 0 else "FAIL")]
            if out.error and out.exit_code:
                items = items + [runner.Check("error", "-", out.error, "FAIL")]
            for c in items:
                failed += c.status != "PASS"
                lines.append(f"| {out.scenario} | {c.item} | {c.expected} | {c.actual} | "
                             f"{c.status} |")
        if group == "figure3":
            for c in extra:
                failed += c.status != "PASS"
                lines.append(f"| (cross) | {c.item} | {c.expected} | {c.actual} | {c.status} |")
        lines.append("")
    total = time.perf_counter() - t0
    lines.append(f"{len(done)} scenarios, {failed} failing items, {total:.1f} s")
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    if args.out:
        outdir = Path(args.out)
        outdir.mkdir(parents=True, exist_ok=True)
        (outdir / "summary.md").write_text(text)
        for _, _, out, _ in done:
            (outdir / f"{out.scenario}.json").write_text(runner.outcome_json(out))
    return EXIT_MISMATCH if failed else 0


def cmd_schema(args) -> int:
    sys.stdout.write(describe_schema())
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="windobs", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, metrics=False):
        sp.add_argument("scenario", help="scenario file or bundled scenario name")
        sp.add_argument("--out", help="output path")
        if metrics:
            sp.add_argument("--metrics", help="metrics JSON path")
        sp.add_argument("--seed", type=int, default=None, help="override the noise seed")
        sp.add_argument("--workers", type=int, default=1)

    common(sub.add_parser("analyze", help="observability rank analysis"))
    common(sub.add_parser("simulate", help="simulate, measure and classify"), metrics=True)
    common(sub.add_parser("filter", help="simulate and run the square-root UKF"), metrics=True)
    rp = sub.add_parser("reproduce", help="run the bundled golden scenarios")
    sel = rp.add_mutually_exclusive_group()
    sel.add_argument("--all", action="store_true")
    sel.add_argument("--table", type=int)
    sel.add_argument("--figure", type=int)
    rp.add_argument("--out", help="directory for summary.md and per-scenario JSON")
    rp.add_argument("--workers", type=int, default=1)
    sub.add_parser("schema", help="print the annotated scenario format")
    return p


COMMANDS = {"analyze": cmd_analyze, "simulate": cmd_simulate, "filter": cmd_filter,
            "reproduce": cmd_reproduce, "schema": cmd_schema}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ScenarioError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except (ValueError, TypeError) as exc:
        # bad preset names or arguments inside an otherwise well-formed file
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARSE


if __name__ == "__main__":
    sys.exit(main())
