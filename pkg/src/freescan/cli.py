"""``freescan`` command line: simulate, train, reconstruct, evaluate, gradcheck, sweep.

Results go to files under ``--out`` (default ``$FREESCAN_OUTPUT_ROOT/<command>``);
progress is logged to stderr as JSON lines. Failures print one JSON object to
stderr and exit with 2 (config), 3 (data) or 4 (numerical).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import torch

from . import dataio
from .dataio import DataError
from .model import ModelConfig, NumericalError, build_model
from .pipeline import (ConfigError, RunConfig, oracle_reconstruction, resolve_config, save_reconstructions, simulate,
                       split, sweep_runs, train_and_evaluate)
from .reconstruct import evaluate_scans, load_trajectory, reconstruct
from .sampling import TaskSet
from .training import PRECISIONS, gradcheck, train

OUTPUT_ROOT_ENV = "FREESCAN_OUTPUT_ROOT"
GRADCHECK_TOL = 1e-4

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("freescan")


class JsonLineFormatter(logging.Formatter):
    def format(self, record: logging.LogRecord) -> str:
        rec = {"time": round(record.created, 3), "level": record.levelname.lower(), "event": record.getMessage()}
        rec.update(getattr(record, "fields", {}))
        return json.dumps(rec)


def setup_logging(level: str = "INFO"):
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(JsonLineFormatter())
    log.handlers[:] = [handler]
    log.setLevel(level)
    log.propagate = False


def emit(event: str, **fields):
    log.info(event, extra={"fields": fields})


def out_dir(args, command: str) -> Path:
    if args.out:
        path = Path(args.out)
    else:
        path = Path(os.environ.get(OUTPUT_ROOT_ENV, "freescan_runs")) / command
    path.mkdir(parents=True, exist_ok=True)
    return path


def load_config(args) -> RunConfig:
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v
    if args.seed is not None:
        overrides["seed"] = args.seed
    return resolve_config(args.config, overrides)


def persist(cfg: RunConfig, out: Path, command: str):
    dataio.write_json({"command": command, **cfg.to_dict()}, out / "resolved_config.json")


def scans_for(args, cfg: RunConfig):
    data = args.data or cfg.data_dir
    if data:
        return dataio.read_dataset(data)
    return simulate(cfg)


def save_model(path, result, height: int, width: int):
    model = result.model
    dataio.save_checkpoint(
        path, model.state_dict(), None, result.config.to_dict(),
        {"model_config": model.config.to_dict(), "tasks": result.tasks.to_dict(), "best_step": result.best_step,
         "val_frame_err_mm": result.best_val_frame_err, "frame_size": [height, width]},
    )


def load_model(path):
    payload = dataio.load_checkpoint(path)
    extra = payload["extra"]
    mcfg = ModelConfig.from_dict(extra["model_config"])
    dtype = PRECISIONS[payload["config"].get("precision", "float32")]
    model = build_model(mcfg, 0, dtype)
    dataio.check_shapes(payload["params"], {k: v.shape for k, v in model.state_dict().items()})
    model.load_state_dict(payload["params"])
    model.eval()
    return model, TaskSet.from_dict(extra["tasks"])


# -- subcommands ---------------------------------------------------------------


def cmd_simulate(args, cfg: RunConfig) -> dict:
    out = out_dir(args, "simulate")
    persist(cfg, out, "simulate")
    scans = simulate(cfg)
    dataio.write_dataset(scans, out / "data")
    sp = dataio.split_dataset(scans, cfg.split_ratios, cfg.seed)
    dataio.write_json(sp.to_dict(), out / "split.json")
    emit("simulated", n_scans=len(scans), out=str(out))
    return {"n_scans": len(scans), "data": str(out / "data")}


def cmd_train(args, cfg: RunConfig) -> dict:
    out = out_dir(args, "train")
    persist(cfg, out, "train")
    torch.set_num_threads(1)
    parts = split(cfg, scans_for(args, cfg))
    result = train(cfg.train, parts["train"], parts["validation"], lambda r: emit("eval", **r),
                   out / "checkpoint.fsck")
    ref = parts["train"][0]
    save_model(out / "model.fsck", result, ref.height, ref.width)
    dataio.write_json(result.history, out / "history.json")
    emit("trained", best_step=result.best_step, val_frame_err_mm=result.best_val_frame_err)
    return {"model": str(out / "model.fsck"), "best_step": result.best_step,
            "val_frame_err_mm": result.best_val_frame_err}


def _select(scans, cfg, part: str | None):
    if part is None or part == "all":
        return scans
    return split(cfg, scans)[part]


def cmd_reconstruct(args, cfg: RunConfig) -> dict:
    out = out_dir(args, "reconstruct")
    persist(cfg, out, "reconstruct")
    if args.scan:
        scans = [dataio.read_scan(p) for p in args.scan]
    else:
        scans = _select(scans_for(args, cfg), cfg, args.part)
    if args.oracle:
        tasks = cfg.train.task_set()
        recs = [oracle_reconstruction(s, tasks) for s in scans]
    else:
        if not args.model:
            raise ConfigError("reconstruct needs --model or --oracle")
        model, tasks = load_model(args.model)
        recs = [reconstruct(model, s, tasks, model_ref=str(args.model)) for s in scans]
    paths = save_reconstructions(recs, scans, out / "trajectories")
    emit("reconstructed", n_scans=len(paths), out=str(out))
    return {"trajectories": [str(p) for p in paths]}


def cmd_evaluate(args, cfg: RunConfig) -> dict:
    out = out_dir(args, "evaluate")
    persist(cfg, out, "evaluate")
    scans = {s.scan_id: s for s in scans_for(args, cfg)}
    traj_dir = Path(args.trajectories)
    files = sorted(traj_dir.glob("*.json"))
    if not files:
        raise DataError(f"no trajectories in {traj_dir}")
    recs = [load_trajectory(p) for p in files]
    missing = [r.scan_ref for r in recs if r.scan_ref not in scans]
    if missing:
        raise DataError(f"trajectories reference unknown scans: {missing[:5]}")
    m = cfg.metrics
    report, _ = evaluate_scans([scans[r.scan_ref] for r in recs], recs, m.pixel_stride, m.voxel_mm, m.dice_filter,
                               config_ref=str(traj_dir))
    dataio.write_json(report.to_dict(), out / "report.json")
    dataio.write_report_csv(report.csv_rows(), out / "report.csv")
    emit("evaluated", **{k: v["mean"] for k, v in report.aggregate.items()})
    return {"aggregate": report.aggregate}


def cmd_gradcheck(args, cfg: RunConfig) -> dict:
    out = out_dir(args, "gradcheck")
    persist(cfg, out, "gradcheck")
    results = {}
    worst = 0.0
    for variant in ("feedforward", "recurrent"):
        errs = gradcheck(variant, seed=cfg.seed)
        results[variant] = errs
        worst = max(worst, max(errs.values()))
        emit("gradcheck", variant=variant, max_rel_err=max(errs.values()))
    dataio.write_json({"tolerance": GRADCHECK_TOL, "max_rel_err": worst, "per_tensor": results},
                      out / "gradcheck.json")
    if not worst <= GRADCHECK_TOL:
        raise NumericalError(f"gradient check failed: max relative error {worst:.3g} > {GRADCHECK_TOL}")
    return {"max_rel_err": worst}


def _sweep_point(cfg_dict: dict, data: str | None, run_dir: str) -> dict:
    torch.set_num_threads(1)
    cfg = RunConfig.from_dict(cfg_dict)
    scans = dataio.read_dataset(data) if data else simulate(cfg)
    res = train_and_evaluate(cfg, split(cfg, scans))
    dataio.write_json({"config": cfg_dict, "report": res.report.to_dict(), "history": res.result.history},
                      Path(run_dir) / "result.json")
    point = cfg.sweep["point"]
    row = {"axis": point["axis"], "value": point["value"], "variant": cfg.train.variant, "M": cfg.train.M,
           "i_star": cfg.train.i_star, "j_star": cfg.train.j_star, "tau": cfg.train.tau}
    for name, agg in res.report.aggregate.items():
        row[f"{name}_mean"] = agg["mean"]
        row[f"{name}_std"] = agg["std"]
    return row


def cmd_sweep(args, cfg: RunConfig) -> dict:
    out = out_dir(args, "sweep")
    persist(cfg, out, "sweep")
    runs = sweep_runs(cfg)
    data = args.data or cfg.data_dir
    jobs = []
    for n, run in enumerate(runs):
        run_dir = out / f"run{n:03d}"
        run_dir.mkdir(exist_ok=True)
        dataio.write_json(run.to_dict(), run_dir / "resolved_config.json")
        jobs.append((run.to_dict(), data, str(run_dir)))
    if args.workers > 1:
        with ProcessPoolExecutor(args.workers) as pool:
            rows = list(pool.map(_sweep_point, *zip(*jobs)))
    else:
        rows = []
        for job in jobs:
            rows.append(_sweep_point(*job))
            emit("sweep_point", **rows[-1])
    dataio.write_report_csv(rows, out / "sweep.csv")
    return {"runs": len(rows), "csv": str(out / "sweep.csv")}


COMMANDS = {
    "simulate": cmd_simulate,
    "train": cmd_train,
    "reconstruct": cmd_reconstruct,
    "evaluate": cmd_evaluate,
    "gradcheck": cmd_gradcheck,
    "sweep": cmd_sweep,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="freescan", description="Trackerless freehand ultrasound pose estimation.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run config JSON")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config value, e.g. train.steps=100 (repeatable)")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help=f"output directory (default ${OUTPUT_ROOT_ENV}/<command>)")
    common.add_argument("--log-level", default="INFO")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("simulate", parents=[common], help="render a synthetic dataset")
    p = sub.add_parser("train", parents=[common], help="train a model")
    p.add_argument("--data", help="dataset directory (default: simulate from the config)")
    p = sub.add_parser("reconstruct", parents=[common], help="chain predictions over scans")
    p.add_argument("--model", help="model checkpoint written by train")
    p.add_argument("--oracle", action="store_true", help="inject ground-truth transforms instead of a model")
    p.add_argument("--scan", action="append", help="scan directory (repeatable)")
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--part", default="test", choices=["train", "validation", "test", "all"])
    p = sub.add_parser("evaluate", parents=[common], help="metrics for exported trajectories")
    p.add_argument("--trajectories", required=True)
    p.add_argument("--data", help="dataset directory holding the referenced scans")
    sub.add_parser("gradcheck", parents=[common], help="finite-difference check of both model variants")
    p = sub.add_parser("sweep", parents=[common], help="ablation grid over interval/past/future/variant")
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--workers", type=int, default=1)
    return parser


def error_payload(kind: str, exc: BaseException, code: int) -> str:
    return json.dumps({"error": kind, "type": type(exc).__name__, "message": str(exc), "exit_code": code})


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code else EXIT_OK
    setup_logging(args.log_level.upper())
    t0 = time.time()
    try:
        cfg = load_config(args)
        result = COMMANDS[args.command](args, cfg)
    except NumericalError as e:
        sys.stderr.write(error_payload("numerical", e, EXIT_NUMERIC) + "\n")
        return EXIT_NUMERIC
    except (DataError, FileNotFoundError, NotADirectoryError) as e:
        sys.stderr.write(error_payload("data", e, EXIT_DATA) + "\n")
        return EXIT_DATA
    except (ConfigError, ValueError, KeyError) as e:
        sys.stderr.write(error_payload("config", e, EXIT_CONFIG) + "\n")
        return EXIT_CONFIG
    emit("done", command=args.command, seconds=round(time.time() - t0, 2), **result)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
