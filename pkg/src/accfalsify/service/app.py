"""HTTP service exposing the falsification toolkit.

Each endpoint is a thin wrapper over the core package; handlers are plain
functions so in-process clients can call them without a running server.
Semantic errors (invariant violations) map to 400, simulator aborts to 500
with a structured code.
"""

from __future__ import annotations

from fastapi import FastAPI, HTTPException

from .. import __version__, analysis, mtl, optimize
from ..attacks import FAMILY_NONPARAM
from ..platoon import ScenarioConfig, SimulationAbort, simulate, trajectory_records
from . import schemas


def _bad_request(exc: Exception) -> HTTPException:
    return HTTPException(status_code=400, detail={"code": "invalid", "message": str(exc)})


def _sim_abort(exc: Exception) -> HTTPException:
    return HTTPException(status_code=500, detail={"code": "sim_abort", "message": str(exc)})


def _score(config: ScenarioConfig, traj) -> float:
    formula = mtl.attacker_objective(config.n_vehicles - 1, config.d_safe)
    return mtl.robustness(formula, mtl.platoon_trace(traj))


def handle_simulate(req: schemas.SimulateRequest) -> schemas.SimulateResponse:
    try:
        config = req.scenario.to_config()
        signal = req.attack.to_signal() if req.attack is not None else None
        traj = simulate(config, signal)
    except SimulationAbort as exc:
        raise _sim_abort(exc)
    except ValueError as exc:
        raise _bad_request(exc)
    records = trajectory_records(traj)
    samples = [r for r in records if "collision" not in r]
    return schemas.SimulateResponse(
        samples=samples,
        collisions=[e.to_json_dict() for e in traj.collisions],
        attack_start=traj.attack_start,
        robustness=_score(config, traj),
    )


def handle_falsify(req: schemas.FalsifyRequest) -> schemas.FalsifyResponse:
    try:
        doc = optimize.falsify_document(
            req.scenario.to_config(),
            req.family,
            req.optimizer,
            budget=req.budget,
            seed=req.seed,
            optimizer_options=req.optimizer_options or None,
        )
    except SimulationAbort as exc:
        raise _sim_abort(exc)
    except ValueError as exc:
        raise _bad_request(exc)
    return schemas.FalsifyResponse.model_validate(doc)


def handle_replay(req: schemas.ReplayRequest) -> schemas.ReplayResponse:
    try:
        config = req.scenario.to_config()
        traj = simulate(config, req.attack.to_signal())
    except SimulationAbort as exc:
        raise _sim_abort(exc)
    except ValueError as exc:
        raise _bad_request(exc)
    rho = _score(config, traj)
    matches = None
    if req.expected_robustness is not None:
        matches = abs(rho - req.expected_robustness) <= req.tolerance
    return schemas.ReplayResponse(
        robustness=rho,
        expected_robustness=req.expected_robustness,
        matches=matches,
        collisions=[e.to_json_dict() for e in traj.collisions],
        attack_start=traj.attack_start,
    )


def handle_analyze(req: schemas.AnalyzeRequest) -> schemas.AnalyzeResponse:
    if not req.results:
        raise _bad_request(ValueError("no result documents supplied"))
    group_by = tuple(req.group_by)
    records = []
    for doc in req.results:
        try:
            records.extend(
                analysis.records_from_result(doc, counterexamples_only=req.counterexamples_only)
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise _bad_request(ValueError(f"malformed result document: {exc}"))
    try:
        stats = analysis.crash_statistics(records, group_by=group_by)
    except AttributeError as exc:
        raise _bad_request(ValueError(f"unknown group key: {exc}"))

    heatmaps = _heatmaps(req.results, records)
    clusters = _clusters(req, records)
    timespace = _timespace(req.results, req.timespace_top)
    return schemas.AnalyzeResponse(
        statistics=stats,
        group_by=list(group_by),
        heatmaps=heatmaps,
        clusters=clusters,
        timespace=timespace,
    )


def _heatmaps(results: list[dict], records) -> list[schemas.HeatmapModel]:
    # Axes come from the swept result documents, not from the crash records,
    # so cells whose searches found nothing still appear as zeros.
    axes: dict[tuple, tuple[set, set]] = {}
    for doc in results:
        scenario = doc.get("scenario", {})
        combo = (doc.get("family", ""), doc.get("optimizer", ""), scenario.get("attack_phase", ""))
        sp, sv = axes.setdefault(combo, (set(), set()))
        sp.add(float(scenario.get("setpoint_gap", 0.0)))
        sv.add(float(scenario.get("target_speed", 0.0)))
    out = []
    for family, optimizer, phase in sorted(axes):
        subset = [r for r in records if (r.family, r.optimizer, r.phase) == (family, optimizer, phase)]
        setpoints = sorted(axes[(family, optimizer, phase)][0])
        speeds = sorted(axes[(family, optimizer, phase)][1])
        grid = analysis.heatmap(subset, setpoints, speeds)
        out.append(
            schemas.HeatmapModel(
                family=family,
                optimizer=optimizer,
                phase=phase,
                setpoints=grid.setpoints,
                speeds=grid.speeds,
                counts=grid.counts.tolist(),
                warnings=grid.warnings,
            )
        )
    return out


def _clusters(req: schemas.AnalyzeRequest, records) -> list[schemas.ClusterModel]:
    """Cluster nonparametric counterexamples at each combo's densest cell."""
    by_doc: dict[tuple, list[list[float]]] = {}
    for doc in req.results:
        if doc.get("family") != FAMILY_NONPARAM:
            continue
        scenario = doc.get("scenario", {})
        key = (
            doc.get("optimizer", ""),
            scenario.get("attack_phase", ""),
            float(scenario.get("setpoint_gap", 0.0)),
            float(scenario.get("target_speed", 0.0)),
        )
        vectors = [s["point"] for s in doc.get("counterexamples", [])]
        if vectors:
            by_doc.setdefault(key, []).extend(vectors)
    # Densest (setpoint, speed) cell per (optimizer, phase).
    best_cell: dict[tuple, tuple] = {}
    for (optimizer, phase, sp, speed), vectors in by_doc.items():
        current = best_cell.get((optimizer, phase))
        if current is None or len(vectors) > len(by_doc[current]):
            best_cell[(optimizer, phase)] = (optimizer, phase, sp, speed)
    out = []
    for (optimizer, phase), key in sorted(best_cell.items()):
        vectors = by_doc[key]
        report = analysis.cluster_maneuvers(
            vectors,
            analysis.ClusterConfig(
                k_max=min(req.cluster_k_max, len(vectors)),
                eps=req.cluster_eps,
                min_pts=req.cluster_min_pts,
            ),
        )
        out.append(
            schemas.ClusterModel(
                family=FAMILY_NONPARAM,
                optimizer=optimizer,
                phase=phase,
                setpoint=key[2],
                speed=key[3],
                n_points=len(vectors),
                k=report.k,
                sizes=report.sizes,
                means=report.means.tolist(),
                stds=report.stds.tolist(),
                median=report.median.tolist(),
                inertia_curve=report.inertia_curve,
                dbscan_clusters=report.dbscan_clusters,
                dbscan_noise=report.dbscan_noise,
                dense_structure=report.dense_structure,
            )
        )
    return out


def _timespace(results: list[dict], top: int) -> list[schemas.TimespaceModel]:
    """Re-simulate the highest-severity counterexamples for plotting."""
    ranked = []
    for doc in results:
        for sample in doc.get("counterexamples", []):
            crash = sample.get("crash") or {}
            attack = sample.get("attack")
            if attack is None:
                continue
            ranked.append(
                (
                    float(crash.get("speed_difference", 0.0)),
                    doc.get("run_id", ""),
                    int(sample["sim_index"]),
                    doc.get("scenario", {}),
                    attack,
                )
            )
    ranked.sort(key=lambda item: (-item[0], item[1], item[2]))
    out = []
    for dv, rid, sim_index, scenario_doc, attack_doc in ranked[:top]:
        config = schemas.ScenarioModel.model_validate(scenario_doc).to_config()
        traj = simulate(config, schemas.AttackModel.model_validate(attack_doc).to_signal())
        out.append(
            schemas.TimespaceModel(
                run_id=rid,
                sim_index=sim_index,
                speed_difference=dv,
                rows=analysis.time_space_export(traj),
            )
        )
    return out


def create_app() -> FastAPI:
    app = FastAPI(title="accfalsify", version=__version__)

    @app.get("/health", response_model=schemas.HealthResponse)
    def health():
        return schemas.HealthResponse(status="ok", version=__version__)

    @app.post("/simulate", response_model=schemas.SimulateResponse)
    def simulate_endpoint(req: schemas.SimulateRequest):
        return handle_simulate(req)

    @app.post("/falsify", response_model=schemas.FalsifyResponse)
    def falsify_endpoint(req: schemas.FalsifyRequest):
        return handle_falsify(req)

    @app.post("/replay", response_model=schemas.ReplayResponse)
    def replay_endpoint(req: schemas.ReplayRequest):
        return handle_replay(req)

    @app.post("/analyze", response_model=schemas.AnalyzeResponse)
    def analyze_endpoint(req: schemas.AnalyzeRequest):
        return handle_analyze(req)

    return app


app = create_app()
