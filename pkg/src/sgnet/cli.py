"""Command line: fixtures, kd-train, train, eval, predict, edit.

Exit codes: 0 ok, 1 usage, 2 data, 3 model, 4 no matching edit candidates.
"""

import argparse
import json
import logging
import pickle
import sys
from pathlib import Path

import torch
import yaml

from .data import ManifestError, Split, parse_manifest, split_view
from .media import DimensionMismatch, FrameIndexError, MediaError, SourceCache
from .model import ModelConfig
from .subject import TeacherMapError

log = logging.getLogger("sgnet")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_MODEL, EXIT_NO_CANDIDATES = 0, 1, 2, 3, 4


class UsageError(Exception):
    pass


class ModelError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad arguments; 2 means a data error here
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _load_config(path):
    if not path:
        return {}
    try:
        cfg = yaml.safe_load(Path(path).read_text()) or {}
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    except yaml.YAMLError as e:
        raise UsageError(f"cannot parse config {path}: {e}") from None
    unknown = set(cfg) - {"model", "train"}
    if unknown:
        raise UsageError(f"unknown config sections: {sorted(unknown)}")
    return cfg


def _configs(args):
    from .train import TrainConfig

    cfg = _load_config(args.config)
    model = dict(cfg.get("model") or {})
    train = dict(cfg.get("train") or {})
    flags = {"seed": args.seed, "epochs": getattr(args, "epochs", None),
             "kd_alpha": getattr(args, "kd_alpha", None), "kd_beta": getattr(args, "kd_beta", None),
             "teacher": getattr(args, "teacher", None), "teacher_dir": getattr(args, "teacher_dir", None),
             "task_mode": getattr(args, "task_mode", None), "base_lr": getattr(args, "lr", None),
             "batch_size": getattr(args, "batch_size", None)}
    train.update({k: v for k, v in flags.items() if v is not None})
    if train.get("epochs") is not None and "lr_decay_epochs" not in train:
        # keep the default schedule's shape (decay at 1/3 and 2/3) when only epochs is given
        e = int(train["epochs"])
        train["lr_decay_epochs"] = sorted({d for d in (e // 3, 2 * e // 3) if 0 < d < e})
    try:
        return ModelConfig.from_dict(model), TrainConfig.from_dict(train)
    except (TypeError, ValueError) as e:
        raise UsageError(f"invalid configuration: {e}") from None


def _manifest(args):
    if not args.manifest:
        raise UsageError("--manifest is required")
    return parse_manifest(args.manifest)


def _checkpoint(args):
    if not args.checkpoint:
        raise UsageError("--checkpoint is required")
    if not Path(args.checkpoint).exists():
        raise ModelError(f"checkpoint not found: {args.checkpoint}")
    return args.checkpoint


# ---------------------------------------------------------------- commands

def cmd_fixtures(args):
    from .fixtures import make_media_fixture, make_shot_dataset

    if args.kind == "shots":
        try:
            splits = tuple(float(v) for v in args.splits.split(","))
        except ValueError:
            raise UsageError(f"bad --splits {args.splits!r}") from None
        if len(splits) != 3 or abs(sum(splits) - 1) > 1e-6:
            raise UsageError("--splits needs three fractions summing to 1")
        path = make_shot_dataset(args.out, args.n_shots, seed=args.seed, splits=splits,
                                 n_frames=args.frames, size=args.size, flow_files=args.flow_files)
    else:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        path = make_media_fixture(args.kind, Path(args.out) / f"{args.kind}.avi", args.frames, args.size,
                                  seed=args.seed)
    print(path)
    return EXIT_OK


def _progress(rec):
    log.info(json.dumps(rec, sort_keys=True))


def cmd_kd_train(args):
    from .train import kd_pretrain

    model_cfg, train_cfg = _configs(args)
    manifest = _manifest(args)
    kd_pretrain(manifest, model_cfg, train_cfg, args.out, progress=_progress)
    print(Path(args.out) / "kd.pt")
    return EXIT_OK


def cmd_train(args):
    from .train import train

    model_cfg, train_cfg = _configs(args)
    manifest = _manifest(args)
    train(manifest, model_cfg, train_cfg, args.out, init_generator=args.init_generator, progress=_progress)
    print(Path(args.out) / "final.pt")
    return EXIT_OK


def cmd_eval(args):
    from .train import evaluate

    torch.manual_seed(args.seed or 0)
    manifest = _manifest(args)
    report = evaluate(manifest, _checkpoint(args), Split(args.split))
    print(report.table())
    if args.report:
        Path(args.report).write_text(report.to_json())
    return EXIT_OK


def cmd_predict(args):
    from .train import load_checkpoint, model_predictor

    torch.manual_seed(args.seed or 0)
    manifest = _manifest(args)
    model = load_checkpoint(_checkpoint(args))
    records = split_view(manifest, Split(args.split)) if args.split else list(manifest.records)
    if not records:
        raise ManifestError(f"no records in split {args.split!r}")
    cache = SourceCache(manifest.root, model.cfg.input_size)
    scores = model_predictor(model, cache, model.train_config.eval_batch)(records)
    out = open(args.out, "w") if args.out else sys.stdout
    try:
        for i, rec in enumerate(records):
            row = {"shot_id": rec.shot_id}
            for task in model.tasks:
                sv = scores[task][i]
                row[task.value] = sv.label.value
                row[f"{task.value}_probs"] = [round(float(p), 6) for p in sv.probs]
            out.write(json.dumps(row) + "\n")
    finally:
        if out is not sys.stdout:
            out.close()
    return EXIT_OK


def _parse_rect(text):
    try:
        x, y, w, h = (int(v) for v in text.split(","))
    except ValueError:
        raise UsageError(f"bad rect {text!r}; expected x,y,w,h") from None
    return x, y, w, h


def cmd_edit(args):
    from .edit import EditPlan, PlanError, parse_segments, plan_edit, render_edit
    from .train import load_checkpoint

    if not args.out:
        raise UsageError("--out is required")
    if args.plan:
        plan = EditPlan.from_dict(json.loads(Path(args.plan).read_text()))
        render_edit(plan, args.out)
        print(args.out)
        return EXIT_OK
    if not (args.shot_id and args.target):
        raise UsageError("edit needs --shot-id and --target (or --plan)")
    manifest = _manifest(args)
    try:
        record = manifest.by_id(args.shot_id)
    except KeyError:
        raise ManifestError(f"unknown shot id {args.shot_id!r}") from None
    model = load_checkpoint(_checkpoint(args))
    try:
        segments = parse_segments(args.segments, record.frame_start, record.frame_end)
    except PlanError as e:
        raise UsageError(str(e)) from None
    anchor = _parse_rect(args.anchor) if args.anchor else None
    plan, ranked, raw = plan_edit(record, manifest.resolve(record), model, args.target, segments,
                                  k=args.k, seed=args.seed or 0, anchor=anchor, n_clips=args.n_clips)
    for (a, b), cands in ranked.items():
        log.info("segment %d:%d: %d candidates", a, b, len(cands))
    if not plan.segments:
        print(f"no crop predicted as {plan.target_scale.value}; nothing written", file=sys.stderr)
        return EXIT_NO_CANDIDATES
    render_edit(plan, args.out, raw)
    print(args.out)
    return EXIT_OK


# ------------------------------------------------------------------ parser

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML/JSON file with 'model' and 'train' sections")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--manifest")
    common.add_argument("--checkpoint")
    common.add_argument("-v", "--verbose", action="store_true")

    kd = argparse.ArgumentParser(add_help=False)
    kd.add_argument("--kd-alpha", type=float)
    kd.add_argument("--kd-beta", type=float)
    kd.add_argument("--teacher", choices=("files", "oracle"))
    kd.add_argument("--teacher-dir", help="teacher maps <shot_id>_<idx>.png (default: <root>/teacher)")
    kd.add_argument("--epochs", type=int)
    kd.add_argument("--lr", type=float)
    kd.add_argument("--batch-size", type=int)

    p = _Parser(prog="sgnet", description="Shot scale / movement classification with subject-map guidance.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    f = sub.add_parser("fixtures", parents=[common], help="write deterministic synthetic videos")
    f.add_argument("--out", required=True)
    f.add_argument("--kind", default="shots", choices=("shots", "solid", "numbered", "translate", "zoom"))
    f.add_argument("--n-shots", type=int, default=40)
    f.add_argument("--splits", default="1,0,0", help="train,val,test fractions")
    f.add_argument("--frames", type=int, default=24)
    f.add_argument("--size", type=int, default=64)
    f.add_argument("--flow-files", action="store_true", help="also write .flo2 flow files")
    f.set_defaults(func=cmd_fixtures)

    k = sub.add_parser("kd-train", parents=[common, kd], help="distil the subject-map generator")
    k.add_argument("--out", required=True)
    k.set_defaults(func=cmd_kd_train)

    t = sub.add_parser("train", parents=[common, kd], help="train the classifier")
    t.add_argument("--out", required=True)
    t.add_argument("--task-mode", choices=("scale_only", "movement_only", "separate", "joint_share_smg",
                                           "joint_share_res1", "joint_share_res4"))
    t.add_argument("--init-generator", help="kd.pt from kd-train")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="accuracy and confusion on a split")
    e.add_argument("--split", default="test", choices=[s.value for s in Split])
    e.add_argument("--report", help="write the EvalReport as JSON")
    e.set_defaults(func=cmd_eval)

    pr = sub.add_parser("predict", parents=[common], help="JSONL predictions, one line per shot")
    pr.add_argument("--split", default=None, choices=[s.value for s in Split],
                    help="restrict to one split (default: every record)")
    pr.add_argument("--out", help="output file (default stdout)")
    pr.set_defaults(func=cmd_predict)

    ed = sub.add_parser("edit", parents=[common], help="reframe a shot to a target scale")
    ed.add_argument("--shot-id")
    ed.add_argument("--target", help="target scale: LS, FS, MS, CS or ECS")
    ed.add_argument("--segments", default="", help="frame ranges a:b,c:d (default: whole shot)")
    ed.add_argument("--anchor", help="x,y,w,h; default: subject-map centroid")
    ed.add_argument("--k", type=int, default=100, help="crop proposals per segment")
    ed.add_argument("--n-clips", type=int, default=8)
    ed.add_argument("--plan", help="render an existing plan sidecar instead of planning")
    ed.add_argument("--out")
    ed.set_defaults(func=cmd_edit)
    return p


def main(argv=None):
    from .edit import PlanError
    from .train import IncompatibleCheckpoint, TrainingError

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, PlanError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (ModelError, IncompatibleCheckpoint, TrainingError) as e:
        print(f"model error: {e}", file=sys.stderr)
        return EXIT_MODEL
    except (ManifestError, MediaError, TeacherMapError, FrameIndexError, DimensionMismatch,
            FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (RuntimeError, pickle.UnpicklingError) as e:
        print(f"model error: {e}", file=sys.stderr)
        return EXIT_MODEL


if __name__ == "__main__":
    sys.exit(main())
