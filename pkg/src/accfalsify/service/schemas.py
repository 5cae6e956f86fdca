"""Pydantic request/response models for the HTTP service.

These mirror the on-disk JSON formats one-to-one so the CLI can write
responses straight to files.
"""

from __future__ import annotations

from typing import Literal

from pydantic import BaseModel, ConfigDict, Field

from .. import platoon
from ..attacks import AttackSignal


class VehicleModel(BaseModel):
    model_config = ConfigDict(extra="forbid")

    length: float = Field(4.5, gt=0)
    a_max: float = Field(3.0, gt=0)
    b_max: float = Field(8.0, gt=0)
    drag_coeff: float = Field(0.05, ge=0)


class GainsModel(BaseModel):
    model_config = ConfigDict(extra="forbid")

    pid_kp: float = 1.0
    pid_ki: float = 0.05
    pid_kd: float = 0.1
    acc_kp: float = 0.8
    acc_kv: float = 1.8
    eps_x: float = Field(0.5, gt=0)
    eps_v: float = Field(0.5, gt=0)
    integral_limit: float = Field(10.0, gt=0)
    actuation_tau: float = Field(0.0, ge=0)


class ScenarioModel(BaseModel):
    model_config = ConfigDict(extra="forbid")

    n_vehicles: int = Field(4, ge=3)
    setpoint_gap: float = Field(7.0, gt=0)
    target_speed: float = Field(25.0, gt=0)
    dt: float = Field(0.05, gt=0)
    duration: float = Field(48.0, gt=0)
    attack_phase: Literal["transient", "steady"] = "transient"
    steady_state_threshold: float = Field(0.2, gt=0)
    steady_timeout: float = Field(30.0, gt=0)
    seed: int = 0
    vehicle: VehicleModel = VehicleModel()
    gains: GainsModel = GainsModel()

    def to_config(self) -> platoon.ScenarioConfig:
        return platoon.ScenarioConfig.from_json_dict(self.model_dump())

    @classmethod
    def from_config(cls, config: platoon.ScenarioConfig) -> "ScenarioModel":
        return cls.model_validate(config.to_json_dict())


class AttackModel(BaseModel):
    model_config = ConfigDict(extra="forbid")

    family: Literal["persistent", "intermittent", "nonparam"]
    params: list[float]
    delta: float | None = None
    phase: Literal["transient", "steady"] = "transient"

    def to_signal(self) -> AttackSignal:
        return AttackSignal.from_json_dict(self.model_dump())

    @classmethod
    def from_signal(cls, signal: AttackSignal) -> "AttackModel":
        return cls.model_validate(signal.to_json_dict())


class VehicleSample(BaseModel):
    x: float
    v: float
    mode: Literal["cc", "acc"]
    act: float


class TrajectorySample(BaseModel):
    t: float
    vehicles: list[VehicleSample]


class CollisionModel(BaseModel):
    leader_index: int
    follower_index: int
    time: float
    location: float
    speed_difference: float


class SimulateRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    scenario: ScenarioModel
    attack: AttackModel | None = None


class SimulateResponse(BaseModel):
    samples: list[TrajectorySample]
    collisions: list[CollisionModel]
    attack_start: float
    robustness: float


class FalsifyRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    scenario: ScenarioModel
    family: Literal["persistent", "intermittent", "nonparam"]
    optimizer: Literal["bo", "ce"]
    budget: int = Field(100, ge=1)
    seed: int = 0
    optimizer_options: dict = Field(default_factory=dict)


class SampleModel(BaseModel):
    point: list[float]
    robustness: float
    sim_index: int
    crash: dict | None = None
    attack: AttackModel | None = None


class FalsifyResponse(BaseModel):
    """Stored result document; also the analyze endpoint's input unit."""

    run_id: str
    scenario: ScenarioModel
    family: str
    optimizer: str
    optimizer_settings: dict
    budget: int
    budget_used: int
    seed: int
    warnings: list[str]
    best: SampleModel
    counterexamples: list[SampleModel]
    history: list[SampleModel]


class ReplayRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    scenario: ScenarioModel
    attack: AttackModel
    expected_robustness: float | None = None
    tolerance: float = 1e-9


class ReplayResponse(BaseModel):
    robustness: float
    expected_robustness: float | None
    matches: bool | None
    collisions: list[CollisionModel]
    attack_start: float


class AnalyzeRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    results: list[dict]
    group_by: list[str] = Field(
        default_factory=lambda: ["family", "optimizer", "phase"]
    )
    counterexamples_only: bool = True
    cluster_k_max: int = 6
    cluster_eps: float = 0.5
    cluster_min_pts: int = 5
    timespace_top: int = 3


class HeatmapModel(BaseModel):
    family: str
    optimizer: str
    phase: str
    setpoints: list[float]
    speeds: list[float]
    counts: list[list[int]]
    warnings: list[str]


class ClusterModel(BaseModel):
    family: str
    optimizer: str
    phase: str
    setpoint: float
    speed: float
    n_points: int
    k: int
    sizes: list[int]
    means: list[list[float]]
    stds: list[list[float]]
    median: list[float]
    inertia_curve: list[float]
    dbscan_clusters: int
    dbscan_noise: int
    dense_structure: bool


class TimespaceModel(BaseModel):
    run_id: str
    sim_index: int
    speed_difference: float
    rows: list[tuple[float, int, float, float, float]]


class AnalyzeResponse(BaseModel):
    statistics: list[dict]
    group_by: list[str]
    heatmaps: list[HeatmapModel]
    clusters: list[ClusterModel]
    timespace: list[TimespaceModel]


class HealthResponse(BaseModel):
    status: str
    version: str
