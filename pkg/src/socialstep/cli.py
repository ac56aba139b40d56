"""Command-line interface.

Subcommands: ingest (scenes -> sample archives), train (samples ->
checkpoint), eval (checkpoint + holdout -> metrics), plan (one sample ->
planned path + step plan), simulate (crowd replay rollouts), report
(metrics/rollout files -> plots and tables).

Every subcommand reads a JSON config file (see `default_config`) and
accepts repeated `--set section.key=value` overrides. Exit codes: 0
success, 1 usage error, 2 data error, 3 numerical/solver failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import crowdsets, lip_mpc, metrics, planner, simulate
from .crowdsets import ParseError, SplitSpec
from .lip_mpc import (InfeasibleStartError, LipParams, LipState, MpcConfig,
                      SolverFailureError)
from .planner import (EvalResult, ModelLoadError, PlannerConfig, PlannerModel,
                      TrainingDivergenceError)
from .stl import SafetyParams

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit code 2
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def default_config() -> dict:
    return {
        "dataset": {
            "dir": ".",
            "scenes": ["eth", "hotel", "univ", "zara1", "zara2"],
            "holdout": "zara1",
            "n_obs": 8,
            "n_pred": 8,
            "radius": 4.0,
        },
        "model": {f.name: getattr(PlannerConfig(), f.name)
                  for f in dataclasses.fields(PlannerConfig)
                  if f.name not in ("safety",)},
        "safety": dataclasses.asdict(SafetyParams()),
        "mpc": dataclasses.asdict(MpcConfig()),
        "lip": dataclasses.asdict(LipParams()),
        "run": {"ego_id": 1, "goal_radius": 0.5, "max_steps": 100, "seed": 0},
    }


def load_config(path: str | None, overrides: list[str]) -> dict:
    cfg = default_config()
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ParseError(f"config file {path} not found") from None
        except json.JSONDecodeError as e:
            raise ParseError(f"config file {path}: {e}") from None
        for section, values in user.items():
            if section not in cfg:
                raise UsageError(f"unknown config section {section!r}")
            cfg[section].update(values)
    for item in overrides or []:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise UsageError(f"override must look like section.key=value: {item!r}")
        key, value = item.split("=", 1)
        section, name = key.split(".", 1)
        if section not in cfg:
            raise UsageError(f"unknown config section {section!r}")
        try:
            cfg[section][name] = json.loads(value)
        except json.JSONDecodeError:
            cfg[section][name] = value
    return cfg


def _planner_config(cfg: dict) -> PlannerConfig:
    model = dict(cfg["model"])
    for key in ("ped_encoder", "goal_encoder", "traj_encoder",
                "latent_encoder", "decoder"):
        model[key] = tuple(model[key])
    return PlannerConfig(safety=SafetyParams(**cfg["safety"]), **model)


def _mpc_config(cfg: dict) -> MpcConfig:
    mpc = dict(cfg["mpc"])
    for key in ("x_lb", "x_ub", "u_lb", "u_ub", "w_run", "w_term"):
        vals = [float("inf") if v in ("inf", "Infinity") else
                float("-inf") if v in ("-inf", "-Infinity") else v
                for v in mpc[key]]
        mpc[key] = tuple(vals)
    return MpcConfig(**mpc)


def _scene_paths(cfg: dict) -> dict[str, Path]:
    base = Path(cfg["dataset"]["dir"])
    return {name: base / f"{name}.txt" for name in cfg["dataset"]["scenes"]}


def _load_split(cfg: dict):
    ds = cfg["dataset"]
    SplitSpec(ds["holdout"], tuple(n for n in ds["scenes"] if n != ds["holdout"]))
    scenes = []
    for name, path in _scene_paths(cfg).items():
        if not path.exists():
            raise ParseError(f"scene file {path} not found")
        scenes.append(crowdsets.load_scene(path))
    return crowdsets.leave_one_out(
        scenes, ds["holdout"], n_obs=ds["n_obs"], n_pred=ds["n_pred"],
        radius=ds["radius"])


def cmd_ingest(args) -> int:
    cfg = load_config(args.config, args.set)
    train, test = _load_split(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    crowdsets.save_samples(out / "train.samples.txt", train)
    crowdsets.save_samples(out / "test.samples.txt", test)
    print(f"wrote {len(train)} train / {len(test)} test samples to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.set)
    pcfg = _planner_config(cfg)
    if args.samples:
        samples = crowdsets.load_samples(args.samples)
    else:
        samples, _ = _load_split(cfg)
    model = PlannerModel(pcfg)
    history = planner.train(model, samples, epochs=args.epochs)
    planner.save_model(model, args.out)
    if args.loss_trace:
        with open(args.loss_trace, "w") as fh:
            for bd in history:
                fh.write(json.dumps(bd.as_dict()) + "\n")
    label = model.meta["variant"]
    final = history[-1].total if history else float("nan")
    print(f"trained {label} model for {len(history)} epochs "
          f"on {len(samples)} samples (final loss {final:.4f}) -> {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = load_config(args.config, args.set)
    model = planner.load_model(args.checkpoint)
    if args.samples:
        samples = crowdsets.load_samples(args.samples)
    else:
        _, samples = _load_split(cfg)
    result = planner.evaluate(model, samples, SafetyParams(**cfg["safety"]))
    outdir = Path(args.out)
    summary = metrics.metrics_report({result.variant: result}, outdir,
                                     make_plots=not args.no_plots)
    print(json.dumps(summary["variants"][result.variant], indent=2))
    return EXIT_OK


def cmd_plan(args) -> int:
    cfg = load_config(args.config, args.set)
    model = planner.load_model(args.checkpoint)
    samples = crowdsets.load_samples(args.samples)
    if not 0 <= args.index < len(samples):
        raise UsageError(f"sample index {args.index} out of range "
                         f"(archive has {len(samples)})")
    s = samples[args.index]
    pred = planner.predict(model, s.neighbors, s.goal, mode=args.mode,
                           k=args.k, seed=cfg["run"]["seed"], theta0=s.theta0)
    lip = LipParams(**cfg["lip"])
    mpc_cfg = _mpc_config(cfg)
    state = LipState(0.0, 0.0, s.theta0, 0.0)
    plan_pts = np.vstack([[0.0, 0.0], pred])
    ref = lip_mpc.reference_from_plan(plan_pts, s.theta0, lip.step_time,
                                      mpc_cfg.horizon)
    sol = lip_mpc.solve(lip, mpc_cfg, state, ref, s.goal)
    out = {
        "sample": {"ego_id": s.ego_id, "t_anchor": s.t_anchor,
                   "theta0": s.theta0, "goal": list(map(float, s.goal))},
        "planned_trajectory": pred.tolist(),
        "mpc": {
            "objective": sol.objective,
            "controls": [[u.foot, u.dtheta] for u in sol.controls],
            "states": [list(st.as_array()) for st in sol.states],
        },
    }
    text = json.dumps(out, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n")
    else:
        print(text)
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg = load_config(args.config, args.set)
    model = planner.load_model(args.checkpoint)
    scene_path = _scene_paths(cfg)[cfg["dataset"]["holdout"]] \
        if args.scene is None else Path(args.scene)
    run = cfg["run"]
    ego_ids = args.ego if args.ego else [run["ego_id"]]
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    scene = crowdsets.load_scene(scene_path)
    statuses = []
    for ego_id in ego_ids:
        rc = simulate.RunConfig(
            scene_path=str(scene_path), ego_id=ego_id,
            checkpoint_path=args.checkpoint,
            safety=SafetyParams(**cfg["safety"]), mpc=_mpc_config(cfg),
            lip=LipParams(**cfg["lip"]),
            neighbor_radius=cfg["dataset"]["radius"],
            n_obs=cfg["dataset"]["n_obs"], goal_radius=run["goal_radius"],
            max_steps=run["max_steps"], seed=run["seed"])
        log = simulate.replay_simulate(rc, scene, model)
        path = outdir / f"rollout_{scene.name}_{ego_id}.jsonl"
        simulate.save_rollout(log, path)
        statuses.append((ego_id, log.status, len(log.records)))
        print(f"ego {ego_id}: {log.status} after {len(log.records)} steps -> {path}")
    reached = sum(1 for _, st, _ in statuses if st == simulate.STATUS_REACHED)
    print(f"{reached}/{len(statuses)} rollouts reached the goal")
    return EXIT_OK


def _eval_result_from_jsonl(path: Path, label: str) -> EvalResult:
    ids, ade, fde, hv, vv = [], [], [], [], []
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            row = json.loads(line)
            ids.append(row["id"])
            ade.append(row["ade"])
            fde.append(row["fde"])
            hv.append(row["heading_violation"])
            vv.append(row["velocity_violation"])
    if not ids:
        raise ParseError(f"{path}: empty metrics table")
    return EvalResult(ids, np.array(ade), np.array(fde), np.array(hv),
                      np.array(vv), variant=label)


def cmd_report(args) -> int:
    wrote_any = False
    if args.metrics:
        results = {}
        for item in args.metrics:
            if "=" not in item:
                raise UsageError("use --metrics label=path.jsonl")
            label, path = item.split("=", 1)
            results[label] = _eval_result_from_jsonl(Path(path), label)
        summary = metrics.metrics_report(results, args.out)
        print(json.dumps(summary, indent=2))
        wrote_any = True
    if args.rollouts:
        logs = [simulate.load_rollout(p) for p in args.rollouts]
        summary = metrics.rollout_report(logs, args.out)
        print(json.dumps(summary, indent=2))
        wrote_any = True
    if not wrote_any:
        raise UsageError("report needs --metrics and/or --rollouts inputs")
    return EXIT_OK


def build_parser() -> _Parser:
    p = _Parser(prog="socialstep",
                description="social path planning for bipedal robots")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--set", action="append", default=[],
                        metavar="SECTION.KEY=VALUE", help="config override")

    sp = sub.add_parser("ingest", help="parse scenes into sample archives")
    common(sp)
    sp.add_argument("--out", required=True, help="output directory")
    sp.set_defaults(fn=cmd_ingest)

    sp = sub.add_parser("train", help="train a planner checkpoint")
    common(sp)
    sp.add_argument("--samples", help="sample archive (default: config split)")
    sp.add_argument("--epochs", type=int, default=None,
                    help="override config epochs (0 writes an untrained model)")
    sp.add_argument("--out", required=True, help="checkpoint path (.npz)")
    sp.add_argument("--loss-trace", help="write per-epoch losses (JSONL)")
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint on the holdout")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--samples", help="sample archive (default: config holdout)")
    sp.add_argument("--out", required=True, help="metrics output directory")
    sp.add_argument("--no-plots", action="store_true")
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("plan", help="plan one sample and solve one step plan")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--samples", required=True, help="sample archive")
    sp.add_argument("--index", type=int, default=0)
    sp.add_argument("--mode", default="mean",
                    choices=["mean", "best_of"])
    sp.add_argument("-k", type=int, default=16, help="draws for best_of")
    sp.add_argument("--out", help="write JSON here instead of stdout")
    sp.set_defaults(fn=cmd_plan)

    sp = sub.add_parser("simulate", help="crowd-replay rollouts")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--scene", help="scene file (default: config holdout)")
    sp.add_argument("--ego", type=int, action="append",
                    help="ego pedestrian id (repeatable)")
    sp.add_argument("--out", required=True, help="rollout output directory")
    sp.set_defaults(fn=cmd_simulate)

    sp = sub.add_parser("report", help="plots and tables from outputs")
    sp.add_argument("--metrics", action="append", default=[],
                    metavar="LABEL=PATH", help="metrics JSONL (repeatable)")
    sp.add_argument("--rollouts", nargs="*", default=[],
                    help="rollout log files")
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except UsageError as e:
        print(f"socialstep: usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (ParseError, ModelLoadError, FileNotFoundError, KeyError) as e:
        print(f"socialstep: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingDivergenceError, SolverFailureError,
            InfeasibleStartError, FloatingPointError) as e:
        print(f"socialstep: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    raise SystemExit(main())
