"""Command-line entry point: ``optimize``, ``compare`` and ``sweep``.

Run logs are JSON lines. The first line is a header carrying
``schema_version``; each following line is one evaluated iteration.
Summaries and comparisons are CSV.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import statistics
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import yaml

from . import __version__
from .domain import Configuration, DomainError
from .fixtures import (load_cluster_file, load_workload_file, make_cluster, make_workload,
                       settings, workload_batches, load_workloads)
from .optimizer import METHODS, OptRun, TrajectoryEntry, run_method
from .simulator import Measurement, SimulationError

log = logging.getLogger("sgdtune")

SCHEMA_VERSION = 1
RUN_LOG = "run.jsonl"
SUMMARY = "summary.csv"
DONE = "DONE"
FAILED = "FAILED"
DEFAULT_BUDGET = {"bespoke": 10, "generic_gp": 30, "random": 2000,
                  "uniform_devices": 1, "uniform_gpus": 1}

EXIT_OK, EXIT_PARTIAL, EXIT_INVALID = 0, 1, 2

SUMMARY_FIELDS = ["method", "setting", "workload", "batch", "seed", "iterations",
                  "best_objective_s", "time_per_input_s", "best_config"]
COMPARISON_FIELDS = ["setting", "workload", "batch", "method", "seed", "best_objective_s",
                     "time_per_input_s", "normalized", "group_best_time_per_input_s"]
CONVERGENCE_FIELDS = ["setting", "workload", "batch", "method", "seed", "iteration",
                      "objective_s", "best_so_far_s"]


class InvalidInput(Exception):
    """Bad flags or fixture; maps to exit code 2."""


@dataclass(frozen=True)
class RunHeader:
    method: str
    setting: str
    workload: str
    batch: int
    seed: int
    tool_version: str = __version__
    schema_version: int = SCHEMA_VERSION

    def to_dict(self) -> dict:
        return {"record": "header", **self.__dict__}


def default_seed() -> int:
    raw = os.environ.get("SGDTUNE_SEED")
    if raw is None or raw == "":
        return 0
    try:
        return int(raw)
    except ValueError:
        raise InvalidInput(f"SGDTUNE_SEED must be an integer, got {raw!r}") from None


# -- run logs --------------------------------------------------------------------

def write_run(out: Path, header: RunHeader, run: OptRun, batch: int) -> None:
    out.mkdir(parents=True, exist_ok=True)
    with open(out / RUN_LOG, "w") as fh:
        fh.write(json.dumps(header.to_dict(), sort_keys=True) + "\n")
        for e in run.trajectory:
            rec = {
                "record": "iteration",
                "iteration": e.iteration,
                "objective_s": e.measurement.objective,
                "best_so_far_s": e.best_so_far,
                "config_digest": e.config.digest(),
                "wall_time_s": e.wall_time,
                "config": e.config.to_dict(),
                "measurement": e.measurement.to_dict(),
                "model_digest": e.model_digest,
            }
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    with open(out / SUMMARY, "w", newline="") as fh:
        w = csv.DictWriter(fh, SUMMARY_FIELDS)
        w.writeheader()
        w.writerow({
            "method": header.method, "setting": header.setting, "workload": header.workload,
            "batch": batch, "seed": header.seed, "iterations": len(run.trajectory),
            "best_objective_s": run.best, "time_per_input_s": run.best / batch,
            "best_config": run.best_config.digest(),
        })


def read_run(path: Path) -> tuple[RunHeader, OptRun]:
    """Parse a run log back into its header and an ``OptRun``."""
    lines = [json.loads(s) for s in Path(path).read_text().splitlines() if s.strip()]
    if not lines or lines[0].get("record") != "header":
        raise InvalidInput(f"{path}: missing header record")
    head = dict(lines[0])
    head.pop("record")
    if head.get("schema_version") != SCHEMA_VERSION:
        raise InvalidInput(f"{path}: unsupported schema_version {head.get('schema_version')!r}")
    header = RunHeader(**head)
    run = OptRun(header.method, header.seed)
    for rec in lines[1:]:
        run.trajectory.append(TrajectoryEntry(
            iteration=rec["iteration"],
            config=Configuration.from_dict(rec["config"]),
            measurement=Measurement.from_dict(rec["measurement"]),
            best_so_far=rec["best_so_far_s"],
            wall_time=rec["wall_time_s"],
            model_digest=rec["model_digest"],
        ))
    return header, run


def find_runs(root: Path) -> list[Path]:
    return sorted(Path(root).rglob(RUN_LOG))


# -- optimize ------------------------------------------------------------------

def resolve_problem(setting: str | None, cluster_file: str | None, workload: str, batch: int):
    if (setting is None) == (cluster_file is None):
        raise InvalidInput("give exactly one of --setting or --cluster")
    if setting is not None:
        cluster, setting_name = make_cluster(setting), setting.upper()
    else:
        cluster, setting_name = load_cluster_file(cluster_file), Path(cluster_file).stem
    if Path(workload).is_file():
        wl = load_workload_file(workload, batch)
    else:
        wl = make_workload(workload, batch)
    return cluster, wl, setting_name


def optimize_cell(method: str, setting: str | None, cluster_file: str | None, workload: str,
                  batch: int, budget: int | None, seed: int, out: Path) -> OptRun:
    if method not in METHODS:
        raise InvalidInput(f"unknown method {method!r}; choose from {', '.join(METHODS)}")
    cluster, wl, setting_name = resolve_problem(setting, cluster_file, workload, batch)
    budget = DEFAULT_BUDGET[method] if budget is None else budget
    run = run_method(method, cluster, wl, budget, seed)
    write_run(out, RunHeader(method, setting_name, wl.name, batch, seed), run, batch)
    return run


def cmd_optimize(args) -> int:
    seed = default_seed() if args.seed is None else args.seed
    run = optimize_cell(args.method, args.setting, args.cluster, args.workload, args.batch,
                        args.budget, seed, Path(args.out))
    print(f"{args.method}: best {run.best:.4f} s after {len(run.trajectory)} evaluations "
          f"-> {Path(args.out) / RUN_LOG}")
    return EXIT_OK


# -- compare -------------------------------------------------------------------

def comparison_rows(runs: Iterable[tuple[RunHeader, OptRun]]) -> list[dict]:
    """One row per run, time per input normalized by the best in its (setting, workload) group."""
    rows = []
    for h, run in runs:
        rows.append({"setting": h.setting, "workload": h.workload, "batch": h.batch,
                     "method": h.method, "seed": h.seed, "best_objective_s": run.best,
                     "time_per_input_s": run.best / h.batch})
    groups: dict[tuple, float] = {}
    for r in rows:
        key = (r["setting"], r["workload"])
        groups[key] = min(groups.get(key, float("inf")), r["time_per_input_s"])
    for r in rows:
        best = groups[(r["setting"], r["workload"])]
        r["group_best_time_per_input_s"] = best
        r["normalized"] = r["time_per_input_s"] / best
    rows.sort(key=lambda r: (r["setting"], r["workload"], r["batch"], r["method"], r["seed"]))
    return rows


def convergence_rows(runs: Iterable[tuple[RunHeader, OptRun]]) -> list[dict]:
    rows = []
    for h, run in runs:
        for e in run.trajectory:
            rows.append({"setting": h.setting, "workload": h.workload, "batch": h.batch,
                         "method": h.method, "seed": h.seed, "iteration": e.iteration,
                         "objective_s": e.measurement.objective, "best_so_far_s": e.best_so_far})
    rows.sort(key=lambda r: (r["setting"], r["workload"], r["batch"], r["method"], r["seed"],
                             r["iteration"]))
    return rows


def _write_csv(path: Path, fields: Sequence[str], rows: Iterable[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fields)
        w.writeheader()
        w.writerows(rows)


def compare(runs_dir: Path, out: Path) -> list[dict]:
    paths = find_runs(runs_dir)
    if not paths:
        raise InvalidInput(f"no {RUN_LOG} files under {runs_dir}")
    runs = [read_run(p) for p in paths]
    runs = [(h, r) for h, r in runs if r.trajectory]
    if not runs:
        raise InvalidInput(f"all run logs under {runs_dir} are empty")
    out.mkdir(parents=True, exist_ok=True)
    table = comparison_rows(runs)
    _write_csv(out / "comparison.csv", COMPARISON_FIELDS, table)
    _write_csv(out / "convergence.csv", CONVERGENCE_FIELDS, convergence_rows(runs))
    return table


def _print_table(table: list[dict]) -> None:
    print(f"{'setting':8} {'workload':10} {'batch':>6} {'method':16} {'seed':>4} "
          f"{'best_s':>9} {'norm':>6}")
    for r in table:
        print(f"{r['setting']:8} {r['workload']:10} {r['batch']:>6} {r['method']:16} "
              f"{r['seed']:>4} {r['best_objective_s']:>9.4f} {r['normalized']:>6.3f}")
    groups = {}
    for r in table:
        groups[(r["setting"], r["workload"])] = r["group_best_time_per_input_s"]
    for (s, w), v in sorted(groups.items()):
        print(f"group {s}/{w}: best time per input {v * 1e3:.4f} ms")


def cmd_compare(args) -> int:
    out = Path(args.out) if args.out else Path(args.runs)
    _print_table(compare(Path(args.runs), out))
    return EXIT_OK


# -- sweep ---------------------------------------------------------------------

@dataclass(frozen=True)
class Cell:
    setting: str
    workload: str
    batch: int
    method: str
    seed: int

    def path(self, root: Path) -> Path:
        return root / self.setting / self.workload / str(self.batch) / self.method / f"seed{self.seed}"


def sweep_cells(settings_: Sequence[str], workloads: Sequence[str], methods: Sequence[str],
                seeds: Sequence[int]) -> list[Cell]:
    cells = []
    for s in settings_:
        for w in workloads:
            for b in workload_batches(w):
                for m in methods:
                    for seed in seeds:
                        cells.append(Cell(s.upper(), w.lower(), b, m, seed))
    return cells


def run_cell(cell: Cell, root: Path, budget: int | None) -> tuple[Cell, str | None]:
    """Run one sweep cell unless its done-marker exists; returns an error message on failure."""
    out = cell.path(root)
    if (out / DONE).exists():
        return cell, None
    out.mkdir(parents=True, exist_ok=True)
    (out / FAILED).unlink(missing_ok=True)
    try:
        optimize_cell(cell.method, cell.setting, None, cell.workload, cell.batch, budget,
                      cell.seed, out)
    except (DomainError, SimulationError, InvalidInput, ValueError) as exc:
        (out / RUN_LOG).unlink(missing_ok=True)
        (out / FAILED).write_text(f"{exc}\n")
        return cell, str(exc)
    (out / DONE).write_text("")
    return cell, None


def cmd_sweep(args) -> int:
    root = Path(args.out)
    seeds = args.seeds if args.seeds else [default_seed()]
    for m in args.methods:
        if m not in METHODS:
            raise InvalidInput(f"unknown method {m!r}")
    known = set(load_workloads())
    for w in args.workloads:
        if w.lower() not in known:
            raise InvalidInput(f"unknown workload {w!r}")
    for s in args.settings:
        if s.upper() not in settings():
            raise InvalidInput(f"unknown setting {s!r}")
    cells = sweep_cells(args.settings, args.workloads, args.methods, seeds)
    todo = [c for c in cells if not (c.path(root) / DONE).exists()]
    print(f"sweep: {len(cells)} cells, {len(cells) - len(todo)} already done")
    if args.jobs > 1:
        with ProcessPoolExecutor(args.jobs) as ex:
            results = list(ex.map(run_cell, todo, [root] * len(todo), [args.budget] * len(todo)))
    else:
        results = [run_cell(c, root, args.budget) for c in todo]
    failures = [(c, msg) for c, msg in results if msg is not None]
    for c, msg in failures:
        print(f"FAILED {c.setting}/{c.workload}/{c.batch}/{c.method}/seed{c.seed}: {msg}",
              file=sys.stderr)
    if find_runs(root):
        table = compare(root, root)
        if args.verbose:
            _print_table(table)
        print(f"comparison written to {root / 'comparison.csv'}")
    return EXIT_PARTIAL if failures else EXIT_OK


# -- entry point ---------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sgdtune", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"sgdtune {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    o = sub.add_parser("optimize", help="tune one (cluster, workload, batch) instance")
    src = o.add_mutually_exclusive_group(required=True)
    src.add_argument("--setting", help="shipped setting: A, B or C")
    src.add_argument("--cluster", help="cluster fixture file")
    o.add_argument("--workload", required=True, help="shipped workload name or workload file")
    o.add_argument("--batch", type=int, required=True)
    o.add_argument("--method", default="bespoke", choices=METHODS)
    o.add_argument("--budget", type=int, help="evaluations (default depends on method)")
    o.add_argument("--seed", type=int, help="default: $SGDTUNE_SEED or 0")
    o.add_argument("--out", required=True)
    o.set_defaults(func=cmd_optimize)

    c = sub.add_parser("compare", help="tabulate run logs")
    c.add_argument("--runs", required=True)
    c.add_argument("--out", help="output directory (default: --runs)")
    c.set_defaults(func=cmd_compare)

    s = sub.add_parser("sweep", help="settings x workloads x batch sizes x methods x seeds")
    s.add_argument("--methods", nargs="+", default=["bespoke"])
    s.add_argument("--settings", nargs="+", default=["A", "B", "C"])
    s.add_argument("--workloads", nargs="+", default=["googlenet", "alexnet", "speechnet"])
    s.add_argument("--seeds", nargs="+", type=int)
    s.add_argument("--budget", type=int, help="override every method's default budget")
    s.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse reports usage errors with status 2 already
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (InvalidInput, DomainError, SimulationError, FileNotFoundError,
            yaml.YAMLError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
