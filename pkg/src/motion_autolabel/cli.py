"""Command line entry point.

    motion-autolabel gen   --config scenes/basic.toml --out runs/seq0
    motion-autolabel flow  --config cfg.toml --seq runs/seq0 --out runs/flow0
    motion-autolabel label --config cfg.toml --seq runs/seq0 --out runs/label0 [--threads 4]
    motion-autolabel eval  --labels runs/label0/labels.jsonl --gt runs/seq0/gt.jsonl
                           [--seq runs/seq0 --flows runs/label0] [--out report.json]

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 internal error. ``MOTION_AUTOLABEL_LOG`` sets the log level (default WARNING).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .autolabel import LabelFormatError, import_labels
from .config import ConfigError, PipelineConfig
from .data import SceneError, SequenceFormatError, generate_scene, load_ground_truth, load_sequence, \
    save_ground_truth, save_sequence
from .metrics import write_csvs, write_report
from .pipeline import evaluate, flows_for, run_flow, run_label, write_outputs

log = logging.getLogger("motion_autolabel")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3
LOG_ENV = "MOTION_AUTOLABEL_LOG"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _config(args) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    return cfg.with_seed(args.seed)


def _out_dir(args, cfg: PipelineConfig) -> Path:
    return Path(args.out) if args.out else cfg.output_dir


def cmd_gen(args) -> int:
    cfg = _config(args)
    out = _out_dir(args, cfg)
    seq, gt = generate_scene(cfg.recipe())
    save_sequence(seq, out)
    save_ground_truth(gt, out / "gt.jsonl")
    print(f"wrote {len(seq)} frames to {out}")
    return EXIT_OK


def _need_seq(args) -> Path:
    if not args.seq:
        raise UsageError(f"{args.command}: --seq is required")
    return Path(args.seq)


def cmd_flow(args) -> int:
    cfg = _config(args)
    seq_path = _need_seq(args)
    seq = load_sequence(seq_path)
    res = run_flow(seq, cfg, args.threads)
    out = _out_dir(args, cfg)
    write_outputs(res, seq, cfg, out, "flow", seq_path, args.threads)
    print(f"wrote {len(res.flows)} flow files to {out}")
    return EXIT_OK


def cmd_label(args) -> int:
    cfg = _config(args)
    seq_path = _need_seq(args)
    seq = load_sequence(seq_path)
    res = run_label(seq, cfg, args.threads)
    out = _out_dir(args, cfg)
    write_outputs(res, seq, cfg, out, "label", seq_path, args.threads)
    print(f"wrote {len(res.labels)} labels in {len(res.tracks)} tracks to {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config(args)
    if not args.labels:
        raise UsageError("eval: --labels is required")
    gt_path = Path(args.gt) if args.gt else (Path(args.seq) / "gt.jsonl" if args.seq else None)
    if gt_path is None:
        raise UsageError("eval: --gt or --seq is required")
    labels = import_labels(args.labels)
    seq = load_sequence(args.seq) if args.seq else None
    counts = [len(f.points) for f in seq.frames] if seq else None
    gt = load_ground_truth(gt_path, counts)
    flows = None
    if args.flows:
        if seq is None:
            raise UsageError("eval: --flows needs --seq for frame intervals")
        flows = flows_for(seq, args.flows)
    report, det = evaluate(labels, gt, cfg.metrics, seq, flows)
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.out:
        path = write_report(report, args.out)
        write_csvs(det, path.parent)
    print(text)
    return EXIT_OK


COMMANDS = {"gen": cmd_gen, "flow": cmd_flow, "label": cmd_label, "eval": cmd_eval}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="motion-autolabel", description="Unsupervised scene flow and auto labeling for LiDAR.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    for name, help_ in (("gen", "generate a synthetic sequence with ground truth"),
                        ("flow", "motion masks and scene flow only"),
                        ("label", "masks, flow and auto labels"),
                        ("eval", "score labels (and optionally flows) against ground truth")):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", help="pipeline TOML file")
        s.add_argument("--seed", type=int, help="override the config seed")
        s.add_argument("--out", help="output directory (eval: report JSON path)")
        s.add_argument("--seq", help="sequence directory")
        s.add_argument("--threads", type=int, default=1, help="worker threads for per-cluster flow")
        if name == "eval":
            s.add_argument("--labels", help="label JSONL file")
            s.add_argument("--gt", help="ground-truth JSONL (default: <seq>/gt.jsonl)")
            s.add_argument("--flows", help="directory holding flow_*.bin files")
    return p


def main(argv=None) -> int:
    level = os.environ.get(LOG_ENV, "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required: gen, flow, label or eval")
        if args.threads < 1:
            raise UsageError("--threads must be at least 1")
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (SequenceFormatError, SceneError, LabelFormatError, FileNotFoundError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001 - last-resort exit code contract
        log.exception("internal error")
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
