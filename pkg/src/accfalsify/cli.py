"""Command-line front end: a thin client over the service layer.

Subcommands: simulate | falsify | sweep | analyze | replay (plus plan and
serve helpers).  Compute goes through the service API; by default handlers
are invoked in-process, while ``--server`` (or D4_SERVER) switches to a
remote instance over HTTP.  All file I/O stays on the client side so sweeps
remain resumable and results byte-reproducible.

Exit codes: 0 success, 2 validation error, 3 simulation abort,
4 replay reproducibility violation, 1 partial sweep failure.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import csv
import itertools
import json
import os
import sys
import time
from pathlib import Path

import httpx
import numpy as np
from pydantic import ValidationError

from . import __version__, analysis
from .platoon import SimulationAbort
from .service import schemas
from .service.app import (
    app as service_asgi,
    handle_analyze,
    handle_falsify,
    handle_replay,
    handle_simulate,
)

EXIT_OK = 0
EXIT_PARTIAL = 1
EXIT_INVALID = 2
EXIT_SIM_ABORT = 3
EXIT_REPLAY_MISMATCH = 4

OUT_DIR_ENV = "D4_OUT_DIR"
SERVER_ENV = "D4_SERVER"


class CliError(Exception):
    def __init__(self, message: str, exit_code: int = EXIT_INVALID):
        super().__init__(message)
        self.exit_code = exit_code


def canonical_json(doc) -> str:
    return json.dumps(doc, sort_keys=True, indent=2) + "\n"


# ---------------------------------------------------------------------------
# Service clients.
# ---------------------------------------------------------------------------


class LocalClient:
    """Calls the service handlers in-process through the same models."""

    def simulate(self, req: dict) -> dict:
        return self._call(handle_simulate, schemas.SimulateRequest, req)

    def falsify(self, req: dict) -> dict:
        return self._call(handle_falsify, schemas.FalsifyRequest, req)

    def replay(self, req: dict) -> dict:
        return self._call(handle_replay, schemas.ReplayRequest, req)

    def analyze(self, req: dict) -> dict:
        return self._call(handle_analyze, schemas.AnalyzeRequest, req)

    @staticmethod
    def _call(handler, model, req: dict) -> dict:
        from fastapi import HTTPException

        try:
            parsed = model.model_validate(req)
        except ValidationError as exc:
            raise CliError(_validation_message(exc), EXIT_INVALID)
        try:
            return handler(parsed).model_dump()
        except HTTPException as exc:
            detail = exc.detail if isinstance(exc.detail, dict) else {"message": str(exc.detail)}
            code = EXIT_SIM_ABORT if detail.get("code") == "sim_abort" else EXIT_INVALID
            raise CliError(detail.get("message", "request failed"), code)
        except SimulationAbort as exc:
            raise CliError(str(exc), EXIT_SIM_ABORT)


class HttpClient:
    """Talks to a running service instance."""

    def __init__(self, base_url: str):
        self._client = httpx.Client(base_url=base_url, timeout=3600.0)

    def simulate(self, req: dict) -> dict:
        return self._post("/simulate", req)

    def falsify(self, req: dict) -> dict:
        return self._post("/falsify", req)

    def replay(self, req: dict) -> dict:
        return self._post("/replay", req)

    def analyze(self, req: dict) -> dict:
        return self._post("/analyze", req)

    def _post(self, path: str, req: dict) -> dict:
        try:
            resp = self._client.post(path, json=req)
        except httpx.HTTPError as exc:
            raise CliError(f"service request failed: {exc}", EXIT_INVALID)
        if resp.status_code >= 400:
            try:
                detail = resp.json().get("detail", {})
            except ValueError:
                detail = {}
            if isinstance(detail, dict) and detail.get("code") == "sim_abort":
                raise CliError(detail.get("message", "simulation aborted"), EXIT_SIM_ABORT)
            message = detail.get("message") if isinstance(detail, dict) else str(detail)
            raise CliError(message or f"service returned {resp.status_code}", EXIT_INVALID)
        return resp.json()


def get_client(args) -> LocalClient | HttpClient:
    server = getattr(args, "server", None) or os.environ.get(SERVER_ENV)
    return HttpClient(server) if server else LocalClient()


def _validation_message(exc: ValidationError) -> str:
    parts = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"])
        parts.append(f"{loc}: {err['msg']}")
    return "invalid input: " + "; ".join(parts)


# ---------------------------------------------------------------------------
# File helpers.
# ---------------------------------------------------------------------------


def load_json(path: str, what: str) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise CliError(f"{what} file not found: {path}")
    except json.JSONDecodeError as exc:
        raise CliError(f"{what} file {path} is not valid JSON: {exc}")


def out_dir(args) -> Path:
    out = getattr(args, "out", None) or os.environ.get(OUT_DIR_ENV) or "."
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def write_manifest(path: Path, run_id: str, outputs: list[str], status: str, wall_s: float, cell_id: str | None = None, error: str | None = None):
    doc = {
        "run_id": run_id,
        "cell_id": cell_id,
        "toolkit_version": __version__,
        "status": status,
        "wall_time_s": round(wall_s, 3),
        "outputs": outputs,
        "error": error,
    }
    path.write_text(canonical_json(doc), encoding="utf-8")


def _records_to_jsonl(samples: list[dict], collisions: list[dict]) -> str:
    lines = [json.dumps(rec, sort_keys=True) for rec in samples]
    lines += [json.dumps({"collision": c}, sort_keys=True) for c in collisions]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Subcommands.
# ---------------------------------------------------------------------------


def cmd_simulate(args) -> int:
    client = get_client(args)
    scenario = load_json(args.config, "config")
    attack = load_json(args.attack, "attack") if args.attack else None
    if args.phase:
        scenario["attack_phase"] = args.phase
        if attack:
            attack["phase"] = args.phase
    resp = client.simulate({"scenario": scenario, "attack": attack})
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(
        _records_to_jsonl(resp["samples"], resp["collisions"]), encoding="utf-8"
    )
    n_coll = len(resp["collisions"])
    print(
        f"simulate: {len(resp['samples'])} samples, {n_coll} collision(s), "
        f"robustness={resp['robustness']:.6g} -> {args.out}"
    )
    return EXIT_OK


def cmd_falsify(args) -> int:
    client = get_client(args)
    scenario = load_json(args.config, "config")
    if args.phase:
        scenario["attack_phase"] = args.phase
    req = {
        "scenario": scenario,
        "family": args.family,
        "optimizer": args.optimizer,
        "budget": args.budget,
        "seed": args.seed,
    }
    directory = out_dir(args)
    started = time.monotonic()
    doc = client.falsify(req)
    wall = time.monotonic() - started
    rid = doc["run_id"]
    result_path = directory / f"{rid}.json"
    result_path.write_text(canonical_json(doc), encoding="utf-8")
    write_manifest(directory / f"{rid}.manifest.json", rid, [result_path.name], "ok", wall)
    print(
        f"falsify: best robustness={doc['best']['robustness']:.6g}, "
        f"counterexamples={len(doc['counterexamples'])}/{doc['budget_used']} -> {result_path}"
    )
    return EXIT_OK


def default_plan() -> dict:
    """Stock experiment grid.

    Parametric families sweep tight setpoints at 20 m/s; the free-form
    family sweeps 3..15 m at three stream speeds in both phases.
    """
    return {
        "scenario": schemas.ScenarioModel().model_dump(),
        "sweeps": [
            {
                "families": ["persistent", "intermittent"],
                "optimizers": ["bo", "ce"],
                "setpoints": [2, 3, 4, 5, 6, 7, 8, 9],
                "speeds": [20.0],
                "phases": ["steady"],
            },
            {
                "families": ["nonparam"],
                "optimizers": ["bo", "ce"],
                "setpoints": list(range(3, 16)),
                "speeds": [20.0, 25.0, 30.0],
                "phases": ["transient", "steady"],
            },
        ],
        "budget": 100,
        "seeds": [0],
    }


def plan_cells(plan: dict) -> list[dict]:
    """Expand a plan document into per-run cell descriptors."""
    base = plan.get("scenario", {})
    budget = plan.get("budget", 100)
    seeds = plan.get("seeds", [0])
    if len(set(seeds)) != len(seeds):
        raise CliError("plan seeds must be distinct")
    sweeps = plan.get("sweeps")
    if sweeps is None:
        sweeps = [
            {k: plan[k] for k in ("families", "optimizers", "setpoints", "speeds", "phases") if k in plan}
        ]
    cells = []
    for sweep in sweeps:
        for family, optimizer, setpoint, speed, phase, seed in itertools.product(
            sweep.get("families", ["nonparam"]),
            sweep.get("optimizers", ["bo"]),
            sweep.get("setpoints", [7]),
            sweep.get("speeds", [25.0]),
            sweep.get("phases", ["transient"]),
            seeds,
        ):
            scenario = json.loads(json.dumps(base))
            scenario["setpoint_gap"] = float(setpoint)
            scenario["target_speed"] = float(speed)
            scenario["attack_phase"] = phase
            scenario["seed"] = seed
            cell_id = f"sp{setpoint:g}_v{speed:g}_{phase}_{family}_{optimizer}_s{seed}"
            cells.append(
                {
                    "cell_id": cell_id,
                    "request": {
                        "scenario": scenario,
                        "family": family,
                        "optimizer": optimizer,
                        "budget": budget,
                        "seed": seed,
                    },
                }
            )
    return cells


def _run_cell(client, cell: dict, directory: Path) -> dict:
    cell_id = cell["cell_id"]
    manifest_path = directory / f"{cell_id}.manifest.json"
    result_path = directory / f"{cell_id}.json"
    if manifest_path.exists():
        try:
            manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
        except json.JSONDecodeError:
            manifest = {}
        if manifest.get("status") == "ok" and result_path.exists():
            return {"cell_id": cell_id, "status": "skipped", "result": result_path.name}
    started = time.monotonic()
    try:
        doc = client.falsify(cell["request"])
    except CliError as exc:
        write_manifest(
            manifest_path, "", [], "failed", time.monotonic() - started, cell_id, str(exc)
        )
        return {"cell_id": cell_id, "status": "failed", "error": str(exc)}
    result_path.write_text(canonical_json(doc), encoding="utf-8")
    write_manifest(
        manifest_path,
        doc["run_id"],
        [result_path.name],
        "ok",
        time.monotonic() - started,
        cell_id,
    )
    return {
        "cell_id": cell_id,
        "status": "ok",
        "result": result_path.name,
        "counterexamples": len(doc["counterexamples"]),
        "best_robustness": doc["best"]["robustness"],
    }


def cmd_sweep(args) -> int:
    client = get_client(args)
    plan = load_json(args.plan, "plan")
    directory = out_dir(args)
    cells = plan_cells(plan)
    results = []
    if args.jobs > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=args.jobs) as pool:
            futures = {pool.submit(_run_cell, client, cell, directory): cell for cell in cells}
            for fut in concurrent.futures.as_completed(futures):
                results.append(fut.result())
    else:
        for cell in cells:
            results.append(_run_cell(client, cell, directory))
    results.sort(key=lambda r: r["cell_id"])
    index = {
        "cells": results,
        "totals": {
            "cells": len(results),
            "ok": sum(1 for r in results if r["status"] == "ok"),
            "skipped": sum(1 for r in results if r["status"] == "skipped"),
            "failed": sum(1 for r in results if r["status"] == "failed"),
        },
    }
    (directory / "index.json").write_text(canonical_json(index), encoding="utf-8")
    t = index["totals"]
    print(
        f"sweep: {t['cells']} cells ({t['ok']} run, {t['skipped']} skipped, "
        f"{t['failed']} failed) -> {directory}"
    )
    return EXIT_PARTIAL if t["failed"] else EXIT_OK


def _load_results_dir(directory: Path) -> list[dict]:
    docs = []
    for path in sorted(directory.glob("*.json")):
        if path.name == "index.json" or path.name.endswith(".manifest.json"):
            continue
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError:
            continue
        if isinstance(doc, dict) and "history" in doc:
            docs.append(doc)
    return docs


def cmd_analyze(args) -> int:
    client = get_client(args)
    results_dir = Path(args.results)
    if not results_dir.is_dir():
        raise CliError(f"results directory not found: {results_dir}")
    docs = _load_results_dir(results_dir)
    if not docs:
        raise CliError(f"no result files in {results_dir}")
    directory = out_dir(args)
    resp = client.analyze({"results": docs})

    group_by = tuple(resp["group_by"])
    analysis.write_statistics_csv(resp["statistics"], group_by, directory / "statistics.csv")
    written = ["statistics.csv"]
    for hm in resp["heatmaps"]:
        grid = analysis.SweepGrid(
            hm["setpoints"], hm["speeds"], np.asarray(hm["counts"]), hm["warnings"]
        )
        name = f"heatmap_{hm['family']}_{hm['optimizer']}_{hm['phase']}.csv"
        analysis.write_heatmap_csv(grid, directory / name)
        written.append(name)
    for cl in resp["clusters"]:
        name = (
            f"clusters_{cl['family']}_{cl['optimizer']}_{cl['phase']}"
            f"_sp{cl['setpoint']:g}_v{cl['speed']:g}.csv"
        )
        _write_cluster_csv(cl, directory / name)
        written.append(name)
    for rank, ts in enumerate(resp["timespace"]):
        name = f"timespace_{rank}_{ts['run_id']}_{ts['sim_index']}.csv"
        analysis.write_time_space_csv([tuple(r) for r in ts["rows"]], directory / name)
        written.append(name)
    print(f"analyze: {len(docs)} results -> {', '.join(written)} in {directory}")
    return EXIT_OK


def _write_cluster_csv(cl: dict, path: Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["cluster", "size", "knot", "mean", "std", "median_overall"])
        for c in range(cl["k"]):
            for j, (m, s) in enumerate(zip(cl["means"][c], cl["stds"][c])):
                writer.writerow([c, cl["sizes"][c], j, m, s, cl["median"][j]])


def cmd_replay(args) -> int:
    client = get_client(args)
    doc = load_json(args.file, "counterexample")
    if "scenario" not in doc:
        raise CliError(f"{args.file} has no embedded scenario snapshot")
    samples = doc.get("counterexamples") or []
    if args.index is not None:
        if not 0 <= args.index < len(samples):
            raise CliError(f"counterexample index {args.index} out of range ({len(samples)})")
        samples = [samples[args.index]]
    elif not samples:
        best = doc.get("best")
        if not best or not best.get("attack"):
            raise CliError(f"{args.file} embeds no replayable attack")
        samples = [best]
    mismatches = 0
    for sample in samples:
        attack = sample.get("attack")
        if attack is None:
            raise CliError("stored sample embeds no attack signal")
        resp = client.replay(
            {
                "scenario": doc["scenario"],
                "attack": attack,
                "expected_robustness": sample["robustness"],
                "tolerance": args.tolerance,
            }
        )
        status = "ok" if resp["matches"] else "MISMATCH"
        print(
            f"replay[{sample['sim_index']}]: stored={sample['robustness']:.9g} "
            f"replayed={resp['robustness']:.9g} {status}"
        )
        if not resp["matches"]:
            mismatches += 1
    if mismatches:
        print(f"replay: {mismatches}/{len(samples)} mismatches", file=sys.stderr)
        return EXIT_REPLAY_MISMATCH
    return EXIT_OK


def cmd_plan(args) -> int:
    text = canonical_json(default_plan())
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
        print(f"plan -> {args.out}")
    else:
        print(text, end="")
    return EXIT_OK


def cmd_serve(args) -> int:
    import uvicorn

    uvicorn.run(service_asgi, host=args.host, port=args.port)
    return EXIT_OK


# ---------------------------------------------------------------------------
# Argument parsing.
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="accfalsify",
        description="Discover adversarial driving maneuvers against ACC platoons.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--server", help=f"service URL (default: in-process; env {SERVER_ENV})")

    p = sub.add_parser("simulate", help="run one scenario under a stored attack signal")
    p.add_argument("--config", required=True, help="scenario JSON file")
    p.add_argument("--attack", help="attack JSON file (omit for a benign lead)")
    p.add_argument("--out", required=True, help="output trajectory JSONL path")
    p.add_argument("--phase", choices=["transient", "steady"])
    add_common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("falsify", help="search one attack family for counterexamples")
    p.add_argument("--config", required=True, help="scenario JSON file")
    p.add_argument("--family", required=True, choices=["persistent", "intermittent", "nonparam"])
    p.add_argument("--optimizer", required=True, choices=["bo", "ce"])
    p.add_argument("--budget", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--phase", choices=["transient", "steady"])
    p.add_argument("--out", help=f"output directory (default: env {OUT_DIR_ENV} or .)")
    add_common(p)
    p.set_defaults(func=cmd_falsify)

    p = sub.add_parser("sweep", help="run an experiment plan over a grid of cells")
    p.add_argument("--plan", required=True, help="plan JSON file")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", help=f"output directory (default: env {OUT_DIR_ENV} or .)")
    add_common(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("analyze", help="summarize a directory of falsification results")
    p.add_argument("--results", required=True, help="directory of result JSON files")
    p.add_argument("--out", help=f"output directory (default: env {OUT_DIR_ENV} or .)")
    add_common(p)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("replay", help="re-simulate stored counterexamples and verify")
    p.add_argument("--file", required=True, help="stored result JSON file")
    p.add_argument("--index", type=int, help="replay one counterexample by position")
    p.add_argument("--tolerance", type=float, default=1e-9)
    add_common(p)
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("plan", help="print or write the default experiment plan")
    p.add_argument("--out")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("serve", help="run the HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
