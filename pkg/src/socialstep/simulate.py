"""Closed-loop crowd-replay simulation.

One recorded pedestrian is replaced by the walking model: each 0.4 s step
the planner predicts a path from the live neighbor histories and the
substituted pedestrian's recorded final position (the goal), the step
planner tracks it under the barrier constraint against the closest
pedestrian, and the first control is applied. Recorded pedestrians follow
their tracks open loop.

Rollout logs are line-oriented JSON (schema v1): a header record, one
record per step, and a footer with the terminal status.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import lip_mpc
from .crowdsets import Scene, Track, _history_window
from .lip_mpc import (ControlInput, LipParams, LipState, MpcConfig,
                      SolverFailureError, InfeasibleStartError, cbf_value,
                      reference_from_plan, step_dynamics)
from .planner import PlannerModel, predict
from .stl import SafetyParams, EPS_DISP

LOG_SCHEMA = "socialstep-rollout v1"

STATUS_REACHED = "reached_goal"
STATUS_EXHAUSTED = "horizon_exhausted"
STATUS_SOLVER_FAILURE = "solver_failure"


@dataclass
class RunConfig:
    """Everything one replay rollout needs."""

    scene_path: str
    ego_id: int
    checkpoint_path: str | None = None
    safety: SafetyParams = field(default_factory=SafetyParams)
    mpc: MpcConfig = field(default_factory=MpcConfig)
    lip: LipParams = field(default_factory=LipParams)
    neighbor_radius: float = 4.0
    n_obs: int = 8
    goal_radius: float = 0.5
    max_steps: int = 100
    seed: int = 0
    output_dir: str | None = None

    def __post_init__(self):
        if self.goal_radius <= 0.0 or self.max_steps < 1:
            raise ValueError("goal_radius must be positive and max_steps >= 1")
        if not Path(self.scene_path).exists():
            raise FileNotFoundError(f"scene file {self.scene_path} not found")
        if self.checkpoint_path is not None and not Path(self.checkpoint_path).exists():
            raise FileNotFoundError(f"checkpoint {self.checkpoint_path} not found")


@dataclass
class StepRecord:
    time: float
    state: LipState
    control: ControlInput
    plan_world: np.ndarray          # (n_pred, 2)
    nearest_ped: np.ndarray | None  # world (2,) or None
    h_value: float                  # +inf when no pedestrian in range
    v_sag: float                    # realized sagittal velocity, m/s
    dtheta: float                   # applied heading change, rad


@dataclass
class RolloutLog:
    scene: str
    ego_id: int
    initial_state: LipState
    goal: np.ndarray
    records: list[StepRecord]
    status: str


def replay_states(log: RolloutLog, params: LipParams) -> list[LipState]:
    """Re-apply the logged controls; returns max_steps + 1 states."""
    states = [log.initial_state]
    for rec in log.records:
        states.append(step_dynamics(params, states[-1], rec.control))
    return states


def _ego_track(scene: Scene, ego_id: int) -> Track:
    tracks = scene.tracks_of(ego_id)
    if not tracks:
        raise KeyError(f"pedestrian id {ego_id} not found in scene {scene.name!r}")
    return max(tracks, key=len)


def _initial_state(track: Track) -> LipState:
    pts = track.points
    theta, xdot = 0.0, 0.0
    if len(pts) >= 2:
        d = pts[1] - pts[0]
        if math.hypot(d[0], d[1]) >= EPS_DISP:
            theta = math.atan2(d[1], d[0])
            xdot = float(min(np.hypot(d[0], d[1]) / 0.4, 1.0))
    return LipState(float(pts[0, 0]), float(pts[0, 1]), theta, xdot)


def replay_simulate(cfg: RunConfig, scene: Scene, model: PlannerModel,
                    controls_override=None) -> RolloutLog:
    """Run one substituted-pedestrian rollout.

    `controls_override(state, step) -> ControlInput` bypasses the planner
    and MPC (testing hook). Solver failures terminate the rollout with a
    logged status, they do not raise.
    """
    ego = _ego_track(scene, cfg.ego_id)
    if len(ego) < 2:
        raise KeyError(f"ego track {cfg.ego_id} too short to define a goal")
    goal = ego.points[-1].copy()
    state = _initial_state(ego)
    dt = cfg.lip.step_time
    records: list[StepRecord] = []
    status = STATUS_EXHAUSTED
    warm: np.ndarray | None = None
    others = [tr for tr in scene.tracks.values() if tr.ped_id != cfg.ego_id]

    for k in range(cfg.max_steps):
        if np.linalg.norm(state.position() - goal) <= cfg.goal_radius:
            status = STATUS_REACHED
            break
        t = ego.t0 + k
        com = state.position()
        present = [tr for tr in others if tr.covers(t)]
        in_range = [tr for tr in present
                    if np.linalg.norm(tr.at(t) - com) <= cfg.neighbor_radius]

        if controls_override is not None:
            control = controls_override(state, k)
            plan_world = np.repeat(com[None, :], model.config.n_pred, axis=0)
            nearest = None
        else:
            neighbors = [_history_window(tr, t, cfg.n_obs) - com
                         for tr in in_range]
            rel_plan = predict(model, neighbors, goal - com, mode="mean")
            plan_world = rel_plan + com
            ref = reference_from_plan(np.vstack([com, plan_world]),
                                      state.theta, dt, cfg.mpc.horizon)
            nearest = None
            if in_range:
                nearest = min((tr.at(t) for tr in in_range),
                              key=lambda p: np.linalg.norm(p - com))
            try:
                sol = lip_mpc.solve(cfg.lip, cfg.mpc, state, ref, goal,
                                    pedestrian=nearest, u_init=warm)
            except (SolverFailureError, InfeasibleStartError):
                status = STATUS_SOLVER_FAILURE
                break
            control = sol.controls[0]
            warm = np.array([[u.foot, u.dtheta] for u in sol.controls[1:]]
                            + [[0.0, 0.0]])

        nxt = step_dynamics(cfg.lip, state, control)
        h = cbf_value(nxt, nearest) if nearest is not None else math.inf
        disp = math.hypot(nxt.x - state.x, nxt.y - state.y)
        sign = 1.0 if abs(lip_mpc.wrap_angle(
            math.atan2(nxt.y - state.y, nxt.x - state.x) - state.theta)) < math.pi / 2 \
            else -1.0
        records.append(StepRecord(
            time=k * dt, state=state, control=control, plan_world=plan_world,
            nearest_ped=None if nearest is None else np.asarray(nearest),
            h_value=h, v_sag=sign * disp / dt, dtheta=control.dtheta))
        state = nxt
    else:
        if np.linalg.norm(state.position() - goal) <= cfg.goal_radius:
            status = STATUS_REACHED

    return RolloutLog(scene=scene.name, ego_id=cfg.ego_id,
                      initial_state=_initial_state(ego), goal=goal,
                      records=records, status=status)


def rollout_ade(log: RolloutLog, scene: Scene,
                params: LipParams | None = None) -> float:
    """Mean distance between the rollout CoM and the substituted
    pedestrian's recorded track over the overlapping steps."""
    params = params if params is not None else LipParams()
    ego = _ego_track(scene, log.ego_id)
    states = replay_states(log, params)
    errs = [float(np.linalg.norm(states[k].position() - ego.points[k]))
            for k in range(min(len(states), len(ego)))]
    return float(np.mean(errs)) if errs else float("nan")


# ---- serialization ----

def save_rollout(log: RolloutLog, path) -> None:
    with open(path, "w") as fh:
        fh.write(json.dumps({
            "schema": LOG_SCHEMA, "scene": log.scene, "ego_id": log.ego_id,
            "goal": log.goal.tolist(),
            "initial_state": list(log.initial_state.as_array()),
        }) + "\n")
        for rec in log.records:
            fh.write(json.dumps({
                "time": rec.time,
                "state": list(rec.state.as_array()),
                "control": [rec.control.foot, rec.control.dtheta],
                "plan": rec.plan_world.tolist(),
                "nearest_ped": None if rec.nearest_ped is None
                else rec.nearest_ped.tolist(),
                "h": None if math.isinf(rec.h_value) else rec.h_value,
                "v_sag": rec.v_sag, "dtheta": rec.dtheta,
            }) + "\n")
        fh.write(json.dumps({"status": log.status}) + "\n")


def load_rollout(path) -> RolloutLog:
    with open(path) as fh:
        lines = [json.loads(line) for line in fh if line.strip()]
    head = lines[0]
    if head.get("schema") != LOG_SCHEMA:
        raise ValueError(f"{path}: unknown rollout schema {head.get('schema')!r}")
    records = []
    for row in lines[1:-1]:
        s = row["state"]
        records.append(StepRecord(
            time=row["time"], state=LipState(*s),
            control=ControlInput(*row["control"]),
            plan_world=np.asarray(row["plan"]),
            nearest_ped=None if row["nearest_ped"] is None
            else np.asarray(row["nearest_ped"]),
            h_value=math.inf if row["h"] is None else row["h"],
            v_sag=row["v_sag"], dtheta=row["dtheta"]))
    init = lines[0]["initial_state"]
    return RolloutLog(scene=head["scene"], ego_id=head["ego_id"],
                      initial_state=LipState(*init),
                      goal=np.asarray(head["goal"]), records=records,
                      status=lines[-1]["status"])
