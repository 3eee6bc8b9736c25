"""
Command-line entry point.

    python main.py synth   --out data/ --seed 0
    python main.py check   --data data/
    python main.py train   --config run.json --data data/ --out model.bin
    python main.py search  --data data/ --budget 20 --out search/ --jobs 2
    python main.py eval    --model model.bin --data data/ --out report/
    python main.py predict --model model.bin --data data/frames/v9.csv --out predictions.csv
    python main.py report  --log search/run_log.jsonl --out report/

Exit codes: 0 success, 1 runtime failure, 2 usage or validation error.
"""

import argparse
import csv
import json
import logging
import os
import sys
from typing import List, Optional

import numpy as np
import pandas as pd
from dotenv import load_dotenv
from pydantic import ValidationError

from pipeline.errors import ConfigError, MalformedRow, PipelineError, SkeletonError
from pipeline.eval_kpi import DEFAULT_TRANSITION_MARGIN
from pipeline.hypersearch import (
    ParamSpace,
    RunLog,
    SearchConfig,
    default_space,
    load_run_log,
    search,
    trials_frame,
)
from pipeline.ingest_builder import check_frame_header, parse_label_file, parse_skeleton_file
from pipeline.nn_core import load_model, save_model
from pipeline.reports import build_report, plot_training_curves, write_report, write_search_report
from pipeline.skeleton_model import validate_frame
from pipeline.synthgen import SynthSpec, generate, write_dataset
from service.service import (
    PipelineService,
    RunConfig,
    StreamingPredictor,
    evaluation_frames,
    load_streams,
    make_objective,
    run_config_from_trial,
)

logger = logging.getLogger("main")


class UsageError(ConfigError):
    """Bad or missing command-line arguments."""


def _read_json(path: str) -> str:
    with open(path) as handle:
        return handle.read()


def load_run_config(args) -> RunConfig:
    """RunConfig from --config, with --seed/--fps/--window/--data overrides."""
    config = RunConfig.model_validate_json(_read_json(args.config)) if getattr(args, "config", None) else RunConfig()
    data_updates = {}
    if getattr(args, "fps", None) is not None:
        data_updates["fps"] = args.fps
    if getattr(args, "window", None) is not None:
        data_updates["window_len"] = args.window
    payload = config.model_dump()
    payload["data"].update(data_updates)
    if getattr(args, "data", None):
        payload["data_dir"] = args.data
    config = RunConfig.model_validate(payload)
    if getattr(args, "seed", None) is not None:
        config = config.with_seed(args.seed)
    return config


def _data_dir(args, config: Optional[RunConfig] = None) -> str:
    data = getattr(args, "data", None) or (config.data_dir if config else None)
    if not data:
        raise UsageError("--data is required (or data_dir in the run config)")
    return data


# Subcommands

def cmd_synth(args) -> int:
    spec = SynthSpec.model_validate_json(_read_json(args.config)) if args.config else SynthSpec()
    output = generate(spec, args.seed or 0)
    written = write_dataset(output, spec, args.seed or 0, args.out)
    print(f"Wrote {len(output.streams)} videos ({sum(len(s) for s in output.streams)} frames) "
          f"and {len(written)} files to {args.out}")
    return 0


def cmd_check(args) -> int:
    path = _data_dir(args)
    if os.path.isdir(path):
        streams = load_streams(path)
    else:
        streams = parse_skeleton_file(path)
    if args.labels:
        parse_label_file(args.labels)
    rows = []
    for stream in streams:
        rows.append({
            "video_id": stream.video_id,
            "worker_id": stream.worker_id,
            "frames": len(stream),
            "absent_slot_rate": float(1 - stream.present.mean()) if len(stream) else 0.0,
            "labeled": stream.is_labeled,
        })
    print(pd.DataFrame(rows).to_string(index=False))
    print(f"OK: {len(streams)} videos")
    return 0


def cmd_train(args) -> int:
    config = load_run_config(args)
    streams = load_streams(_data_dir(args, config))
    model, history, split = PipelineService(config).run(streams)
    save_model(model, args.out)
    stem = os.path.splitext(args.out)[0]
    history_frame = pd.DataFrame([e.model_dump() for e in history.epochs])
    history_frame.to_csv(f"{stem}.history.csv", index=False, float_format="%.6f", lineterminator="\n")
    plot_training_curves(history_frame, f"{stem}.history.svg")
    with open(f"{stem}.config.json", "w") as handle:
        handle.write(config.model_dump_json(indent=2) + "\n")
    last = history.epochs[-1]
    print(f"Model: {model.param_count} parameters -> {args.out}")
    print(f"Final epoch: loss {last.train_loss:.4f} acc {last.train_accuracy:.4f} "
          f"val_acc {last.val_accuracy if last.val_accuracy is not None else 'n/a'}")
    return 0


def cmd_search(args) -> int:
    base = load_run_config(args)
    space = ParamSpace.model_validate_json(_read_json(args.space)) if args.space else default_space()
    payload = json.loads(_read_json(args.search)) if args.search else {}
    if args.budget is not None:
        payload["budget"] = args.budget
    payload.setdefault("budget", 10)
    if args.seed is not None:
        payload["seed"] = args.seed
    search_config = SearchConfig.model_validate(payload)

    streams = load_streams(_data_dir(args, base))
    os.makedirs(args.out, exist_ok=True)
    log_path = os.path.join(args.out, "run_log.jsonl")
    if os.path.exists(log_path):
        os.remove(log_path)
    result = search(space, make_objective(streams, base), search_config, RunLog(log_path), jobs=args.jobs)

    trials_frame(result.records).to_csv(os.path.join(args.out, "trials.csv"), index=False, lineterminator="\n")
    with open(os.path.join(args.out, "final_space.json"), "w") as handle:
        handle.write(result.final_space.model_dump_json(indent=2) + "\n")
    if result.best is None:
        raise RuntimeError(f"all {len(result.records)} trials failed; see {log_path}")
    best = run_config_from_trial(result.best.config, base, result.best.seed)
    with open(os.path.join(args.out, "best_config.json"), "w") as handle:
        handle.write(best.model_dump_json(indent=2) + "\n")
    print(f"{len(result.records)} trials, best #{result.best.trial_id}: "
          f"val_acc {result.best.val_accuracy:.4f} ({result.best.param_count} parameters)")
    return 0


def cmd_eval(args) -> int:
    config = load_run_config(args)
    model = load_model(args.model)
    streams = load_streams(_data_dir(args, config))
    frames = evaluation_frames(model, streams, config.data, args.split)
    bundle = build_report(frames, model.manifest.fps if model.manifest else config.data.fps,
                          args.anchor_class, args.margin, args.smooth, name=args.split)
    write_report(bundle, args.out)
    print(f"{args.split}: accuracy {bundle.summary['accuracy']:.4f} over {bundle.summary['frames']} frames "
          f"-> {args.out}")
    return 0

def cmd_predict(args) -> int:
    model = load_model(args.model)
    predictor = StreamingPredictor(model)
    path = _data_dir(args)
    check_frame_header(path)
    rows = 0
    with open(args.out, "w", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["video_id", "frame_index", "status", "predicted"] + [f"p{c}" for c in range(10)])
        for chunk in pd.read_csv(path, dtype=str, keep_default_na=False, chunksize=512):
            for raw in chunk.to_dict("records"):
                line = rows + 2
                try:
                    record = validate_frame(raw)
                except SkeletonError as e:
                    raise MalformedRow(str(e), line=line) from e
                prediction = predictor.push(record, line=line)
                probabilities = ([f"{p:.6f}" for p in prediction.probabilities]
                                 if prediction.probabilities is not None else [""] * 10)
                writer.writerow([prediction.video_id, prediction.frame_index, prediction.status,
                                 "" if prediction.predicted is None else prediction.predicted] + probabilities)
                rows += 1
    print(f"Wrote {rows} predictions to {args.out}")
    return 0


def cmd_report(args) -> int:
    if not args.log and not args.history:
        raise UsageError("report needs --log and/or --history")
    os.makedirs(args.out, exist_ok=True)
    if args.log:
        trials = trials_frame(load_run_log(args.log))
        write_search_report(trials, args.out)
        ok = int((trials["status"] == "ok").sum())
        print(f"{len(trials)} trials ({ok} ok) -> {args.out}")
    if args.history:
        history = pd.read_csv(args.history)
        plot_training_curves(history, os.path.join(args.out, "training_curves.svg"))
        print(f"{len(history)} epochs -> {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mpar", description="Skeleton-based motion classification for manual processes")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_help: Optional[str] = "run configuration JSON"):
        # every subcommand takes --seed; those without randomness accept and ignore it
        if config_help is not None:
            p.add_argument("--config", help=config_help)
        p.add_argument("--seed", type=int, help="seed for every random choice")
        return p

    p = common(sub.add_parser("synth", help="generate a synthetic dataset"), "synthetic spec JSON")
    p.add_argument("--out", required=True, help="output data directory")
    p.set_defaults(handler=cmd_synth)

    p = common(sub.add_parser("check", help="validate frame and label files"), None)
    p.add_argument("--data", required=True, help="data directory or frame file")
    p.add_argument("--labels", help="label table file to validate")
    p.set_defaults(handler=cmd_check)

    p = common(sub.add_parser("train", help="train a model from a run configuration"))
    p.add_argument("--data", help="data directory (frames/, labels/)")
    p.add_argument("--out", required=True, help="model container path")
    p.add_argument("--fps", type=int, help="override the emulated frame rate")
    p.add_argument("--window", type=int, help="override the window length")
    p.set_defaults(handler=cmd_train)

    p = common(sub.add_parser("search", help="hyperparameter search"), "base run configuration JSON")
    p.add_argument("--data", help="data directory")
    p.add_argument("--space", help="parameter space JSON (default: full space)")
    p.add_argument("--search", help="search configuration JSON")
    p.add_argument("--budget", type=int, help="number of trials")
    p.add_argument("--jobs", type=int, default=1, help="concurrent trials")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--fps", type=int, help="override the base frame rate")
    p.add_argument("--window", type=int, help="override the base window length")
    p.set_defaults(handler=cmd_search)

    p = common(sub.add_parser("eval", help="evaluate a model and write the report bundle"),
               "run configuration JSON (split protocol)")
    p.add_argument("--model", required=True, help="model container")
    p.add_argument("--data", help="data directory")
    p.add_argument("--out", required=True, help="report directory")
    p.add_argument("--split", choices=["holdout", "val", "all"], default="holdout")
    p.add_argument("--anchor-class", type=int, help="cycle anchor class (default: most accurate)")
    p.add_argument("--margin", type=int, default=DEFAULT_TRANSITION_MARGIN, help="transition margin in frames")
    p.add_argument("--smooth", type=int, default=1, help="odd majority-smoothing window for cycle times")
    p.set_defaults(handler=cmd_eval)

    p = common(sub.add_parser("predict", help="per-frame predictions for a frame file"), None)
    p.add_argument("--model", required=True, help="model container")
    p.add_argument("--data", required=True, help="frame file")
    p.add_argument("--out", required=True, help="prediction CSV")
    p.set_defaults(handler=cmd_predict)

    p = common(sub.add_parser("report", help="tables and charts from a run log or training history"), None)
    p.add_argument("--log", help="search run log (JSON lines)")
    p.add_argument("--history", help="training history CSV")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(handler=cmd_report)
    return parser


def run(argv: Optional[List[str]] = None) -> int:
    """Parse argv, run the subcommand and map errors to exit codes."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code == 0 else 2
    try:
        return args.handler(args)
    except (PipelineError, ValidationError) as e:
        print(f"error[{type(e).__name__}]: {_one_line(e)}", file=sys.stderr)
        return 2
    except Exception as e:
        logger.debug("Unhandled error", exc_info=True)
        print(f"error[{type(e).__name__}]: {_one_line(e)}", file=sys.stderr)
        return 1


def _one_line(error: Exception) -> str:
    if isinstance(error, ValidationError):
        return "; ".join(
            f"{'.'.join(str(p) for p in e['loc'])}: {e['msg']}" for e in error.errors()
        )
    return " ".join(str(error).split())


def main() -> int:
    load_dotenv()
    logging.basicConfig(
        level=os.getenv("MPAR_LOG_LEVEL", "INFO").upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    np.seterr(over="ignore")
    return run(sys.argv[1:])


if __name__ == "__main__":
    sys.exit(main())
