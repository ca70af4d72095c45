"""Two-stage training loop with validation-based model selection."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import PipelineConfig, load_checkpoint, save_checkpoint
from .data import load_dataset, read_split
from .detector import detection_ap, nms
from .metrics import read_mapping, summarize
from .pipeline import EastModel, infer_video, training_step
from .tensor import Adam, NumericalError, Rng
from .tensor.optim import AdamState

log = logging.getLogger(__name__)

LOG_FIELDS = ["stage", "epoch", "loss", "detector_loss", "refine_loss", "val_Acc", "val_Edit", "val_F1@10",
              "val_F1@25", "val_F1@50", "val_mAP", "val_score"]


def dataset_dims(root: str | Path) -> tuple[int, int, tuple[int, int] | None]:
    """(feature channels, classes including background, clip frame size or None)."""
    mapping = read_mapping(Path(root) / "mapping.txt")
    first = read_split(root, "train")[0] if (Path(root) / "splits" / "train.txt").exists() else None
    item = next(iter(load_dataset(root, "train" if first else "val")))
    return item.features.shape[1], len(mapping), frame_size(item)


def frame_size(item) -> tuple[int, int] | None:
    return None if item.clip is None else (item.clip.shape[1], item.clip.shape[2])


def build_model(cfg: PipelineConfig, in_dim: int, num_classes: int,
                frame_size: tuple[int, int] | None = None) -> EastModel:
    grid = None
    if frame_size is not None:
        s = cfg.model.patch_s
        if frame_size[0] % s or frame_size[1] % s:
            raise ValueError(f"clip frames {frame_size} not divisible by patch size {s}")
        grid = (frame_size[0] // s, frame_size[1] // s)
    return EastModel(cfg, in_dim, num_classes, Rng(cfg.train.seed).child(100), grid)


def evaluate(model: EastModel, cfg: PipelineConfig, split: str | None = None, root: str | None = None) -> dict:
    root = root or cfg.data.root
    split = split or cfg.data.val_split
    preds, y1s, bases, gts, proposals, ann = {}, {}, {}, {}, [], {}
    for item in load_dataset(root, split):
        out = infer_video(model, item)
        preds[item.video_id], y1s[item.video_id], bases[item.video_id] = out.y2, out.y1, out.baseline
        gts[item.video_id] = item.labels
        proposals += out.proposals
        ann[item.video_id] = item.annotations
    return assemble_report(preds, y1s, bases, gts, proposals, ann, cfg)


def detection_report(proposals, annotations, cfg: PipelineConfig) -> dict:
    thresholds = tuple(cfg.eval.thresholds)
    kept = nms(proposals, cfg.eval.nms) if cfg.eval.nms is not None else proposals
    det = detection_ap(kept, annotations, thresholds)
    raw = detection_ap(proposals, annotations, thresholds) if cfg.eval.nms is not None else det
    return {"mAP": det["mAP"], "AP": det["ap"], "mAP_without_nms": raw["mAP"]}


def assemble_report(preds, y1s, bases, gts, proposals, annotations, cfg: PipelineConfig) -> dict:
    return {"refined": summarize(preds, gts), "detector": summarize(y1s, gts), "baseline": summarize(bases, gts),
            **detection_report(proposals, annotations, cfg)}


def selection_score(report: dict, stage: int) -> float:
    """Mean of the segmentation metrics (percent) and 100 * mAP."""
    seg = report["refined" if stage == 2 else "baseline"]
    keys = ["Acc", "Edit", "F1@10", "F1@25", "F1@50"]
    return float(np.mean([seg[k] for k in keys] + [100.0 * report["mAP"]]))


@dataclass
class TrainResult:
    model: EastModel
    history: list[dict] = field(default_factory=list)
    best: dict = field(default_factory=dict)


def _optimizer(model: EastModel, cfg: PipelineConfig, stage: int) -> Adam:
    """Stage 1: backbone side and detector; stage 2: everything. Frozen weights are left out."""
    params = {k: v for k, v in model.param_dict().items() if v.requires_grad}
    if stage == 1:
        params = {k: v for k, v in params.items() if not k.startswith("tcn.")}
    # adapters (and an unfrozen backbone) use the slower rate
    slow = {k: cfg.train.lr for k in params if k.startswith("backbone.")}
    return Adam(params, lr=cfg.train.lr_heads, lr_overrides=slow)


def _opt_tensors(opt: Adam) -> dict[str, np.ndarray]:
    out = {}
    for name in opt.state.m:
        out[f"__opt_m__.{name}"] = opt.state.m[name]
        out[f"__opt_v__.{name}"] = opt.state.v[name]
    return out


def _restore_opt(opt: Adam, tensors: dict[str, np.ndarray], step: int) -> None:
    opt.state = AdamState(step=step)
    for key, arr in tensors.items():
        if key.startswith("__opt_m__."):
            opt.state.m[key[len("__opt_m__."):]] = arr.copy()
        elif key.startswith("__opt_v__."):
            opt.state.v[key[len("__opt_v__."):]] = arr.copy()


def train(cfg: PipelineConfig, out_dir: str | Path, stages=(1, 2), init: str | Path | None = None,
          resume: str | Path | None = None, stop_after: tuple[int, int] | None = None) -> TrainResult:
    """Run the requested stages; writes log.csv, stage<k>_best.ckpt and last.ckpt into out_dir.

    ``init`` loads model weights (e.g. a stage-1 checkpoint) before training;
    ``resume`` continues from a last.ckpt; ``stop_after=(stage, epoch)`` ends
    early after that epoch (used to test resumption).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model = build_model(cfg, *dataset_dims(cfg.data.root))
    result = TrainResult(model)
    state_names = set(model.param_dict())
    start_stage, start_epoch, opt_tensors, opt_step = stages[0], 0, None, 0
    best_state, best_score = None, -np.inf
    if init is not None:
        tensors, _, _ = load_checkpoint(init, cfg)
        model.load_state_dict({k: v for k, v in tensors.items() if k in state_names})
    if resume is not None:
        tensors, _, extra = load_checkpoint(resume, cfg)
        model.load_state_dict({k: v for k, v in tensors.items() if k in state_names})
        start_stage, start_epoch, opt_step = extra["stage"], extra["epoch"] + 1, extra["step"]
        opt_tensors = {k: v for k, v in tensors.items() if k.startswith("__opt_")}
        best_score = extra["best_score"]
        best_state = {k[len("__best__."):]: v for k, v in tensors.items() if k.startswith("__best__.")} or None
        result.history = extra.get("history", [])
    log_path = out_dir / "log.csv"
    if resume is None:
        log_path.write_text(",".join(LOG_FIELDS) + "\n")

    for stage in stages:
        if stage < start_stage:
            continue
        epochs = cfg.train.stage1_epochs if stage == 1 else cfg.train.stage2_epochs
        opt = _optimizer(model, cfg, stage)
        first = 0
        if stage == start_stage and opt_tensors is not None:
            _restore_opt(opt, opt_tensors, opt_step)
            first = start_epoch
        else:
            best_state, best_score = None, -np.inf
        for epoch in range(first, epochs):
            t0 = time.time()
            rng = Rng(cfg.train.seed).child(stage, epoch)
            items = list(load_dataset(cfg.data.root, cfg.data.train_split, train=True,
                                      crop_frames=cfg.data.crop_frames, rng=rng.child(0)))
            order = rng.child(1).permutation(len(items))
            losses = []
            for n, i in enumerate(order):
                opt.zero_grad()
                step = training_step(model, items[i], stage, rng.child(2, n))
                value = step.loss.item()
                if not np.isfinite(value):
                    dump = out_dir / "nan_dump.json"
                    dump.write_text(json.dumps({"stage": stage, "epoch": epoch, "video": items[i].video_id,
                                                "detector_loss": step.detector, "refine_loss": step.refine}))
                    raise NumericalError(f"non-finite loss at stage {stage} epoch {epoch} "
                                         f"video {items[i].video_id}; see {dump}")
                step.loss.backward()
                opt.step()
                losses.append((value, step.detector, step.refine))
            row = {"stage": stage, "epoch": epoch, "loss": np.mean([l[0] for l in losses]),
                   "detector_loss": np.mean([l[1] for l in losses]), "refine_loss": np.mean([l[2] for l in losses])}
            last = epoch == epochs - 1
            if last or (epoch + 1) % max(cfg.train.eval_every, 1) == 0:
                rep = evaluate(model, cfg)
                seg = rep["refined" if stage == 2 else "baseline"]
                row.update({f"val_{k}": seg[k] for k in ("Acc", "Edit", "F1@10", "F1@25", "F1@50")})
                row["val_mAP"] = rep["mAP"]
                row["val_score"] = selection_score(rep, stage)
                if row["val_score"] > best_score:
                    best_score = row["val_score"]
                    best_state = {k: v.copy() for k, v in model.state_dict().items()}
            result.history.append(row)
            with open(log_path, "a", newline="") as fh:
                csv.DictWriter(fh, LOG_FIELDS).writerow({k: _fmt(row.get(k)) for k in LOG_FIELDS})
            log.info("stage %d epoch %d loss %.4f score %s (%.1fs)", stage, epoch, row["loss"],
                     row.get("val_score"), time.time() - t0)
            extra = {"stage": stage, "epoch": epoch, "step": opt.state.step, "best_score": best_score,
                     "history": [{k: _fmt(v) for k, v in r.items()} for r in result.history]}
            tensors = {**model.state_dict(), **_opt_tensors(opt)}
            if best_state is not None:
                tensors.update({f"__best__.{k}": v for k, v in best_state.items()})
            save_checkpoint(out_dir / "last.ckpt", tensors, cfg, extra)
            if stop_after == (stage, epoch):
                return result
        if best_state is not None:
            model.load_state_dict(best_state)
        save_checkpoint(out_dir / f"stage{stage}_best.ckpt", model.state_dict(), cfg,
                        {"stage": stage, "best_score": best_score})
        result.best[stage] = best_score
    return result


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v
