"""Command line entry point: east <gen|train|infer|eval|flops|augment-demo|plot-emit|replay>."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import platform
import sys
import warnings
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .adapters import BackboneDims, count_flops
from .augmentation import AugmentSpec, augment
from .backbone import FeatureFileError
from .config import CheckpointError, ConfigError, PipelineConfig, load_checkpoint
from .data import DatasetError, SyntheticSpec, generate_synthetic, load_dataset
from .metrics import LabelFileError, SegmentSequence, read_mapping, write_labels, write_report
from .tensor import NumericalError, Rng
from .tensor.io import ArchiveError
from .types import ActionProposal

log = logging.getLogger("east")

MANIFEST_SCHEMA = 1
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def write_manifest(out: Path, command: str, argv: list[str], config: dict | None = None, seed: int | None = None):
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "schema": MANIFEST_SCHEMA,
        "command": command,
        "argv": argv,
        "config": config,
        "seed": seed,
        "versions": {"east": __version__, "numpy": np.__version__, "python": platform.python_version()},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def _config(args) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config, args.set or [])
    if getattr(args, "data", None):
        cfg.data.root = args.data
    if getattr(args, "seed", None) is not None:
        cfg.train.seed = args.seed
    return cfg


# -- subcommands -------------------------------------------------------------

def cmd_gen(args, argv):
    fps_high = args.fps_high
    if fps_high is None:
        fps_high = args.fps_low * args.patch_t if args.clips else 15.0
    try:
        spec = _spec(args, fps_high)
    except ValueError as err:
        raise UsageError(f"east gen: {err}") from None
    splits = generate_synthetic(spec, args.out)
    write_manifest(Path(args.out), "gen", argv, asdict(spec), args.seed)
    print(f"wrote {sum(len(v) for v in splits.values())} videos to {args.out}")


def _spec(args, fps_high) -> SyntheticSpec:
    return SyntheticSpec(num_classes=args.classes, instances=args.instances, feature_dim=args.dim,
                         noise=args.noise, fps_high=fps_high, fps_low=args.fps_low,
                         clips=args.clips, clip_size=args.clip_size, patch_t=args.patch_t,
                         train_videos=args.train_videos, val_videos=args.val_videos, seed=args.seed,
                         gap_prob=args.gap_prob, mean_duration=args.mean_duration)


def cmd_train(args, argv):
    from .train import evaluate, train

    cfg = _config(args)
    out = Path(args.out)
    write_manifest(out, "train", argv, cfg.to_dict(), cfg.train.seed)
    (out / "config.yaml").write_text(cfg.to_yaml())
    stages = tuple(int(s) for s in args.stages.split(","))
    result = train(cfg, out, stages=stages, init=args.init, resume=args.resume)
    report = evaluate(result.model, cfg)
    _write_eval(report, out / "val_report")
    seg = report["refined"]
    print(f"val Acc {seg['Acc']:.2f} Edit {seg['Edit']:.2f} F1@50 {seg['F1@50']:.2f} mAP {report['mAP']:.3f}")


def _load_model(checkpoint: str, cfg: PipelineConfig | None = None):
    from .train import build_model, dataset_dims

    tensors, stored, _ = load_checkpoint(checkpoint, cfg)
    cfg = cfg or stored
    model = build_model(cfg, *dataset_dims(cfg.data.root))
    model.load_state_dict({k: v for k, v in tensors.items() if not k.startswith("__")})
    return model, cfg


def cmd_infer(args, argv):
    from .pipeline import infer_video

    _, cfg, _ = load_checkpoint(args.checkpoint)
    _override_root(cfg, args.data)
    model, cfg = _load_model(args.checkpoint, cfg)
    out = Path(args.out)
    write_manifest(out, "infer", argv, cfg.to_dict(), cfg.train.seed)
    names = _names(cfg.data.root)
    infer_split(model, cfg, args.split, out, names, infer_video)
    print(f"predictions written to {out}")


def _override_root(cfg: PipelineConfig, root: str | None) -> None:
    if root and Path(root).resolve() != Path(cfg.data.root).resolve():
        warnings.warn(f"checkpoint was trained on {cfg.data.root}, evaluating on {root}", stacklevel=2)
        cfg.data.root = root


def infer_split(model, cfg, split, out: Path, names, infer_video):
    for sub in ("pred", "pred_detector", "pred_baseline"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    summary = {}
    with open(out / "proposals.jsonl", "w") as fh:
        for item in load_dataset(cfg.data.root, split):
            res = infer_video(model, item)
            write_labels(out / "pred" / f"{item.video_id}.txt", res.y2, names)
            write_labels(out / "pred_detector" / f"{item.video_id}.txt", res.y1, names)
            write_labels(out / "pred_baseline" / f"{item.video_id}.txt", res.baseline, names)
            for p in res.proposals:
                fh.write(json.dumps(p.to_json()) + "\n")
            summary[item.video_id] = [{"start_frame": s, "end_frame": e, "class": names[c],
                                       "start": s / item.fps_high, "end": e / item.fps_high}
                                      for s, e, c in SegmentSequence.from_labels(res.y2).segments]
    (out / "segments.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")


def _names(root) -> list[str]:
    mapping = read_mapping(Path(root) / "mapping.txt")
    return [n for n, _ in sorted(mapping.items(), key=lambda kv: kv[1])]


def read_proposals(path) -> list[ActionProposal]:
    out = []
    offset = 0
    with open(path, "rb") as fh:
        for line in fh:
            if line.strip():
                try:
                    out.append(ActionProposal.from_json(json.loads(line)))
                except (json.JSONDecodeError, KeyError) as err:
                    raise DatasetError(f"{path}: byte {offset}: bad proposal record ({err})") from None
            offset += len(line)
    return out


def _write_eval(report: dict, prefix: Path):
    flat = dict(report["refined"])
    flat["mAP"] = report["mAP"]
    flat["AP"] = {f"{t:.1f}": v for t, v in report["AP"].items()}
    write_report(flat, prefix)
    (Path(f"{prefix}_full.json")).write_text(json.dumps(_jsonable(report), indent=1, sort_keys=True) + "\n")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return obj


def cmd_eval(args, argv):
    from .data import read_annotations, read_split
    from .detector import detection_ap, nms
    from .metrics import evaluate_dataset

    out = Path(args.out)
    if args.checkpoint:
        from .pipeline import infer_video

        _, stored, _ = load_checkpoint(args.checkpoint)
        _override_root(stored, args.data)
        model, cfg = _load_model(args.checkpoint, stored)
        write_manifest(out, "eval", argv, cfg.to_dict(), cfg.train.seed)
        infer_split(model, cfg, args.split, out, _names(cfg.data.root), infer_video)
        root = Path(cfg.data.root)
        pred_dir, gt_dir, mapping_path = out / "pred", root / "labels", root / "mapping.txt"
        proposals, thresholds, nms_thr = out / "proposals.jsonl", cfg.eval.thresholds, cfg.eval.nms
    else:
        if not (args.pred and args.gt and args.mapping):
            raise UsageError("eval needs --checkpoint, or --pred, --gt and --mapping")
        write_manifest(out, "eval", argv)
        root = Path(args.data) if args.data else None
        pred_dir, gt_dir, mapping_path = Path(args.pred), Path(args.gt), Path(args.mapping)
        proposals, thresholds, nms_thr = args.proposals, PipelineConfig().eval.thresholds, args.nms
    detection = None
    if root is not None:
        # restrict ground truth to the split
        ids = read_split(root, args.split)
        gt_dir = _subset_dir(gt_dir, set(ids), out / "_gt_subset")
        if proposals:
            ann = {v: read_annotations(root / "annotations" / f"{v}.json") for v in ids}
            props = [p for p in read_proposals(proposals) if p.video_id in ann]
            if nms_thr is not None:
                props = nms(props, nms_thr)
            detection = detection_ap(props, ann, tuple(thresholds))
    report = evaluate_dataset(pred_dir, gt_dir, read_mapping(mapping_path), detection, out / "report")
    cols = ["Acc", "Edit", "F1@10", "F1@25", "F1@50"]
    print(" ".join(f"{c} {report[c]:.2f}" for c in cols) + (f" mAP {report['mAP']:.3f}" if detection else ""))


def _subset_dir(src: Path, ids: set[str], dst: Path) -> Path:
    dst.mkdir(parents=True, exist_ok=True)
    for old in dst.glob("*.txt"):
        old.unlink()
    for v in sorted(ids):
        (dst / f"{v}.txt").write_bytes((src / f"{v}.txt").read_bytes())
    return dst


def cmd_flops(args, argv):
    dims = BackboneDims(depth=args.depth, mlp_ratio=args.mlp_ratio)
    rows = []
    for kind in ("standard", "cea", "tia"):
        rep = count_flops(kind, args.C, args.r, args.k, args.T, args.H, args.W, dims, B=1,
                          pooled=(args.pool_h, args.pool_w))
        rows.append({"adapter": kind, "adapter_gflops": rep.adapter_gflops, "total_gflops": rep.gflops,
                     "adapter_macs": rep.adapter_macs, "total_macs": rep.total_macs})
    std = rows[0]["total_gflops"]
    for r in rows:
        r["delta_gflops_vs_standard"] = r["total_gflops"] - std
    if args.out:
        out = Path(args.out)
        write_manifest(out, "flops", argv)
        with open(out / "flops.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, list(rows[0]))
            w.writeheader()
            w.writerows(rows)
    print(f"{'adapter':<10}{'total GFLOPs':>16}{'delta vs std':>16}")
    for r in rows:
        print(f"{r['adapter']:<10}{r['total_gflops']:>16.4f}{r['delta_gflops_vs_standard']:>16.4f}")


def cmd_augment_demo(args, argv):
    spec = AugmentSpec(A=args.A, K=args.K, draws=args.draws, include_original=args.include_original,
                       resample_k=args.resample_k)
    props = read_proposals(args.proposals)
    out = Path(args.out)
    write_manifest(out, "augment-demo", argv, asdict(spec), args.seed)
    rng = Rng(args.seed)
    by_video: dict[str, list[ActionProposal]] = {}
    for p in props:
        by_video.setdefault(p.video_id, []).append(p)
    report = {}
    with open(out / "variants.jsonl", "w") as fh:
        for v, (vid, group) in enumerate(sorted(by_video.items())):
            report[vid] = []
            for d in range(spec.draws):
                info = {}
                kept = augment(group, spec, rng.child(v, d), info)
                conf_before = float(np.mean([p.confidence for p in group]))
                conf_after = float(np.mean([p.confidence for p in kept]))
                report[vid].append({"draw": d, "removed": info["removed"], "kept": len(kept),
                                    "mean_confidence_before": conf_before, "mean_confidence_after": conf_after})
                for p in kept:
                    fh.write(json.dumps({"draw": d, **p.to_json()}) + "\n")
    (out / "removal_report.json").write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
    print(f"{len(by_video)} videos x {spec.draws} draws written to {out}")


def cmd_plot_emit(args, argv):
    from .plots import plot_emit

    mapping = read_mapping(args.mapping)
    names = [n for n, _ in sorted(mapping.items(), key=lambda kv: kv[1])]
    pred, gt = Path(args.pred), Path(args.gt)
    pairs = ([(p.stem, p, gt / p.name) for p in sorted(pred.glob("*.txt"))] if pred.is_dir() else [(pred.stem, pred, gt)])
    out = Path(args.out)
    write_manifest(out, "plot-emit", argv)
    for vid, p, g in pairs:
        pl, gl = _labels_strict(p, mapping), _labels_strict(g, mapping)
        plot_emit(pl, gl, names, out / vid)
    print(f"{len(pairs)} timelines written to {out}")


def _labels_strict(path: Path, mapping: dict[str, int]) -> np.ndarray:
    names = [line.strip() for line in Path(path).read_text().splitlines() if line.strip()]
    unknown = sorted(set(names) - set(mapping))
    if unknown:
        raise LabelFileError(f"{path}: unknown class names: {', '.join(unknown)}")
    return np.array([mapping[n] for n in names], dtype=np.int64)


def cmd_replay(args, argv):
    manifest = json.loads(Path(args.manifest).read_text())
    if manifest.get("schema") != MANIFEST_SCHEMA:
        raise DatasetError(f"{args.manifest}: manifest schema {manifest.get('schema')}, expected {MANIFEST_SCHEMA}")
    old = list(manifest["argv"])
    if args.out:
        old = _replace_flag(old, "--out", args.out)
    if manifest["command"] == "train":
        # the recorded config is authoritative; the original YAML may be gone
        out = Path(_flag(old, "--out"))
        out.mkdir(parents=True, exist_ok=True)
        path = out / "replay_config.yaml"
        path.write_text(PipelineConfig.from_dict(manifest["config"]).to_yaml())
        for flag in ("--config", "--set", "--data", "--seed"):
            old = _replace_flag(old, flag, None)
        old += ["--config", str(path)]
    log.info("replaying %s", " ".join(old))
    code = main(old)
    if code:
        raise ReplayFailed(code)


class ReplayFailed(Exception):
    def __init__(self, code: int):
        super().__init__(f"replayed command exited with {code}")
        self.code = code


def _flag(argv: list[str], flag: str) -> str | None:
    for i, a in enumerate(argv):
        if a == flag and i + 1 < len(argv):
            return argv[i + 1]
        if a.startswith(flag + "="):
            return a[len(flag) + 1:]
    return None


def _replace_flag(argv: list[str], flag: str, value: str | None) -> list[str]:
    """Every occurrence of ``flag`` replaced by ``value``, or removed when value is None."""
    res, skip = [], False
    for a in argv:
        if skip:
            skip = False
        elif a == flag or a.startswith(flag + "="):
            skip = a == flag
            if value is not None:
                res += [flag, value]
        else:
            res.append(a)
    return res


# -- parser ------------------------------------------------------------------

def build_parser() -> Parser:
    parser = Parser(prog="east", description="Segmentation-by-detection pipeline on desk-scale data.")
    parser.add_argument("--version", action="version", version=f"east {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=Parser)

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--classes", type=int, default=8)
    p.add_argument("--instances", type=int, default=20)
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--noise", type=float, default=0.6)
    p.add_argument("--fps-high", type=float, help="full frame rate (default 15, or fps-low x patch-t with --clips)")
    p.add_argument("--fps-low", type=float, default=3.0)
    p.add_argument("--train-videos", type=int, default=40)
    p.add_argument("--val-videos", type=int, default=10)
    p.add_argument("--gap-prob", type=float, default=0.3)
    p.add_argument("--mean-duration", type=float, default=4.0)
    p.add_argument("--clips", action="store_true", help="write RGB clips for the backbone instead of features")
    p.add_argument("--clip-size", type=int, default=20, help="clip height and width in pixels")
    p.add_argument("--patch-t", type=int, default=16, help="full-rate frames per sampled frame (clips)")
    p.set_defaults(fn=cmd_gen)

    def config_args(p):
        p.add_argument("--config", help="YAML config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override, e.g. train.seed=3")
        p.add_argument("--data", help="dataset root (overrides data.root)")

    p = sub.add_parser("train", help="two-stage training")
    config_args(p)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--stages", default="1,2", help="comma-separated stages to run")
    p.add_argument("--init", help="checkpoint to initialise from")
    p.add_argument("--resume", help="last.ckpt to resume")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("infer", help="predict labels and proposals for a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="dataset root (defaults to the checkpoint's)")
    p.add_argument("--split", default="val")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_infer)

    p = sub.add_parser("eval", help="score predictions against ground truth")
    p.add_argument("--checkpoint", help="run inference with this checkpoint first")
    p.add_argument("--data", help="dataset root (for annotations and split)")
    p.add_argument("--split", default="val")
    p.add_argument("--pred", help="directory of predicted label files")
    p.add_argument("--gt", help="directory of ground-truth label files")
    p.add_argument("--mapping", help="class mapping file")
    p.add_argument("--proposals", help="proposal JSONL for detection AP (needs --data)")
    p.add_argument("--nms", type=float, default=0.5, help="suppression threshold before AP")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("flops", help="adapter cost table")
    p.add_argument("--C", type=int, default=1408)
    p.add_argument("--r", type=int, default=4)
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--T", type=int, default=48)
    p.add_argument("--H", type=int, default=10)
    p.add_argument("--W", type=int, default=10)
    p.add_argument("--depth", type=int, default=40)
    p.add_argument("--mlp-ratio", type=float, default=4.0)
    p.add_argument("--pool-h", type=int, default=1)
    p.add_argument("--pool-w", type=int, default=1)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_flops)

    p = sub.add_parser("augment-demo", help="proposal-drop variants of a proposal dump")
    p.add_argument("--proposals", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--A", type=int, default=30)
    p.add_argument("--K", type=int, default=10)
    p.add_argument("--draws", type=int, default=3)
    p.add_argument("--include-original", action="store_true")
    p.add_argument("--resample-k", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_augment_demo)

    p = sub.add_parser("plot-emit", help="SVG timelines of prediction vs ground truth")
    p.add_argument("--pred", required=True, help="label file or directory")
    p.add_argument("--gt", required=True, help="label file or directory")
    p.add_argument("--mapping", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_plot_emit)

    p = sub.add_parser("replay", help="rerun the command recorded in a manifest.json")
    p.add_argument("manifest")
    p.add_argument("--out", help="write into this directory instead of the recorded one")
    p.set_defaults(fn=cmd_replay)
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        args.fn(args, argv)
    except ReplayFailed as err:
        print(err, file=sys.stderr)
        return err.code
    except (UsageError, ConfigError) as err:
        print(err, file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (FileNotFoundError, DatasetError, FeatureFileError, LabelFileError, CheckpointError, ArchiveError,
            KeyError) as err:
        print(f"data error: {err}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
