"""Detector + aggregation + refinement wired into one model, and windowed inference."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .augmentation import AugmentSpec, keep_mask
from .backbone import BackboneConfig, ClipBatch, ToyBackbone
from .config import PipelineConfig
from .data import DatasetError, VideoItem, crop
from .detector import Detector, DetectorConfig, assign_targets, decode_proposals, detector_loss
from .detector.targets import sampling_period
from .refiner import Tcn, TcnConfig, aggregate, aggregate_tensor, refinement_loss
from .tensor import Rng, Tensor, no_grad
from .types import ActionProposal, proposal_confidence


class EastModel(nn.Module):
    """Detector and refiner; with a clip ``grid`` a frozen toy backbone plus adapters supplies the features."""

    def __init__(self, cfg: PipelineConfig, in_dim: int, num_classes: int, rng: Rng,
                 grid: tuple[int, int] | None = None):
        m = cfg.model
        self.cfg = cfg
        self.num_classes = num_classes
        self.backbone = None
        if grid is not None:
            bcfg = BackboneConfig(depth=m.backbone_depth, dim=m.backbone_dim, heads=m.backbone_heads,
                                  patch_t=m.patch_t, patch_s=m.patch_s, adapter_kind=m.adapter_kind,
                                  adapter_r=m.adapter_r, adapter_k=m.adapter_k, adapter_position=m.adapter_position)
            self.backbone = ToyBackbone(bcfg, grid, rng.child(2))
            self.backbone.set_frozen(m.freeze_backbone)
            in_dim = m.backbone_dim
        self.detector = Detector(DetectorConfig(in_dim=in_dim, num_classes=num_classes, dim=m.dim, heads=m.heads,
                                                levels=m.levels, mlp_ratio=m.mlp_ratio, range_base=m.range_base),
                                 rng.child(0))
        self.tcn = Tcn(TcnConfig(num_classes=num_classes, stages=m.tcn_stages, layers=m.tcn_layers,
                                 channels=m.tcn_channels), rng.child(1))

    def features(self, item: VideoItem) -> Tensor:
        """[1, T', C] detector input."""
        if self.backbone is None:
            if item.clip is not None:
                raise DatasetError(f"{item.video_id}: clip video but the model has no backbone")
            return Tensor(item.features[None].astype(self.detector.proj1_w.dtype))
        if item.clip is None:
            raise DatasetError(f"{item.video_id}: the model expects clips, the dataset has features")
        if item.patch_t != self.backbone.cfg.patch_t:
            raise DatasetError(f"{item.video_id}: clip tubelets of {item.patch_t} frames, "
                               f"backbone expects {self.backbone.cfg.patch_t}")
        values = item.clip.transpose(3, 0, 1, 2)[None].astype(np.float64) / 255.0
        return self.backbone.features(ClipBatch(values), freeze_backbone=self.cfg.model.freeze_backbone)

    def detect(self, item: VideoItem):
        return self.detector(self.features(item), item.timestamps, 1.0 / item.fps_low)


def proposal_intervals(offsets: np.ndarray, timestamps: np.ndarray, period: float) -> tuple[np.ndarray, np.ndarray]:
    """Same boundaries as decode_proposals, as arrays."""
    starts = timestamps - offsets[:, 0]
    ends = timestamps + offsets[:, 1]
    bad = ends <= starts
    return np.where(bad, timestamps - period / 4, starts), np.where(bad, timestamps + period / 4, ends)


@dataclass
class StepResult:
    loss: Tensor
    detector: float
    refine: float


def training_step(model: EastModel, item: VideoItem, stage: int, rng: Rng | None = None) -> StepResult:
    cfg = model.cfg
    lc = cfg.loss
    preds = model.detect(item)
    period = 1.0 / item.fps_low
    targets = assign_targets(item.annotations, item.timestamps, cfg.model.levels, period, cfg.model.range_base)
    det = detector_loss(preds, [targets], [item.timestamps], lambda_r=lc.lambda_r, gamma=lc.gamma,
                        indicator=lc.indicator, level_weight=lc.level_weight)
    if stage == 1:
        return StepResult(det, det.item(), 0.0)
    probs = preds.probs[0]
    starts, ends = proposal_intervals(preds.offsets.data[0].astype(np.float64), item.timestamps, period)
    conf = proposal_confidence(probs.data, cfg.model.include_background_confidence)
    variants = []
    ac = cfg.augment
    if ac.enabled and rng is not None:
        spec = AugmentSpec(A=ac.A, K=ac.K, draws=ac.draws, include_original=ac.include_original,
                           resample_k=ac.resample_k)
        if spec.include_original:
            variants.append(np.ones(len(conf), dtype=bool))
        variants += [keep_mask(conf, spec, rng.child(d)) for d in range(spec.draws)]
    else:
        variants.append(np.ones(len(conf), dtype=bool))
    ref = None
    for keep in variants:
        idx = np.flatnonzero(keep)
        agg = aggregate_tensor(probs[idx], starts[idx], ends[idx], item.frame_timestamps, cfg.model.uncovered)
        outs = model.tcn(agg.reshape(1, *agg.shape))
        term = refinement_loss(outs, item.labels, lc.lambda_s, lc.tau, lc.detach_smoothing)
        ref = term if ref is None else ref + term
    ref = ref / float(len(variants))
    return StepResult(det + ref, det.item(), ref.item())


# -- inference -----------------------------------------------------------------

@dataclass
class VideoPrediction:
    video_id: str
    y2: np.ndarray                  # refined labels, full rate
    y1: np.ndarray                  # detector argmax, full rate
    baseline: np.ndarray            # argmax of the aggregated distributions
    dists: np.ndarray               # aggregated [T, A]
    proposals: list[ActionProposal]


def window_starts(total: int, window: int, overlap: float) -> list[int]:
    """Window start frames covering [0, total); the last window ends at the video end."""
    if total <= window:
        return [0]
    stride = max(1, int(round(window * (1 - overlap))))
    starts = list(range(0, total - window, stride))
    starts.append(total - window)
    return sorted(set(starts))


def infer_video(model: EastModel, item: VideoItem) -> VideoPrediction:
    cfg = model.cfg
    include_bg = cfg.model.include_background_confidence
    proposals: list[ActionProposal] = []
    n_low = len(item.timestamps)
    y1_low = np.zeros(n_low, dtype=np.int64)
    best_dist = np.full(n_low, np.inf)
    with no_grad():
        for start in window_starts(len(item.labels), cfg.data.window_frames, cfg.data.overlap):
            win = crop(item, start, cfg.data.window_frames)
            if not len(win.timestamps):
                continue
            preds = model.detect(win)
            props, y1 = decode_proposals(preds.probs.data[0], preds.offsets.data[0], win.timestamps,
                                         item.video_id, 1.0 / item.fps_low, include_bg)
            proposals += props
            # each sampled frame keeps the label from the window it is most central in
            centre = (win.frame_timestamps[0] + win.frame_timestamps[-1]) / 2
            idx = np.flatnonzero((item.timestamps >= win.timestamps[0]) & (item.timestamps <= win.timestamps[-1]))
            d = np.abs(item.timestamps[idx] - centre)
            better = d < best_dist[idx]
            y1_low[idx[better]] = y1[better]
            best_dist[idx[better]] = d[better]
        agg = aggregate(proposals, len(item.labels), item.fps_high, cfg.model.uncovered, model.num_classes)
        outs = model.tcn(Tensor(agg.dists[None].astype(model.tcn.stages[0].w_in.dtype)))
    y2 = outs[-1].data[0].argmax(axis=1)
    sampled = np.minimum(np.floor(item.frame_timestamps * item.fps_low + 1e-9).astype(np.int64), n_low - 1)
    return VideoPrediction(item.video_id, y2, y1_low[sampled], agg.dists.argmax(axis=1), agg.dists, proposals)


__all__ = ["EastModel", "training_step", "infer_video", "window_starts", "VideoPrediction", "sampling_period"]
