"""Synthetic datasets, dataset loading and crops.

On-disk layout under a dataset root::

    mapping.txt                 "<index> <name>" per class, background first
    spec.json                   generator settings
    splits/{train,val}.txt      one video id per line
    features/<id>.easf (+.json) sampled-rate features
    clips/<id>.npy (+.json)     full-rate RGB frames [T, H, W, 3] uint8 (clip datasets)
    labels/<id>.txt             one class name per full-rate frame
    annotations/<id>.json       action instances in seconds
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .backbone import frame_timestamps, load_features, save_features
from .metrics import read_labels, read_mapping, write_labels, write_mapping
from .tensor import Rng
from .types import BACKGROUND, SegmentAnnotation


@dataclass
class SyntheticSpec:
    num_classes: int = 8            # action classes; background comes on top
    mean_duration: float = 4.0      # seconds
    std_duration: float = 1.5
    min_duration: float = 1.0
    instances: int = 20
    gap_prob: float = 0.3           # chance of a background gap before an instance
    mean_gap: float = 1.5
    feature_dim: int = 32
    noise: float = 0.6
    noise_corr: float = 0.8         # AR(1) coefficient per full-rate frame
    drift: float = 1.0              # within-instance progress component
    fps_high: float = 15.0
    fps_low: float = 3.0
    train_videos: int = 40
    val_videos: int = 10
    seed: int = 0
    # clip datasets: render frames instead of writing features; one sampled
    # frame per patch_t full-rate frames, so fps_low must be fps_high / patch_t
    clips: bool = False
    clip_size: int = 20
    patch_t: int = 16

    def __post_init__(self):
        if self.fps_low > self.fps_high:
            raise ValueError(f"fps_low {self.fps_low} exceeds fps_high {self.fps_high}")
        if min(self.mean_duration, self.min_duration, self.mean_gap) <= 0 or self.std_duration < 0:
            raise ValueError("durations must be positive")
        if self.feature_dim < 2:
            raise ValueError("feature_dim must be >= 2")
        if self.clips and abs(self.fps_high / self.patch_t - self.fps_low) > 1e-9:
            raise ValueError(f"clip datasets need fps_low == fps_high / patch_t "
                             f"({self.fps_high} / {self.patch_t} != {self.fps_low})")

    @property
    def class_names(self) -> list[str]:
        return ["background"] + [f"action{c}" for c in range(1, self.num_classes + 1)]


@dataclass
class SyntheticVideo:
    video_id: str
    labels: np.ndarray                  # [T] at fps_high
    annotations: list[SegmentAnnotation]
    dense: np.ndarray                   # [T, D] full-rate features (not stored)


def class_signatures(spec: SyntheticSpec) -> tuple[np.ndarray, np.ndarray]:
    """Appearance vectors in the first half of the channels, progress directions in the second."""
    rng = Rng(spec.seed).child(1)
    half = spec.feature_dim // 2
    a = spec.num_classes + 1
    sig = np.zeros((a, spec.feature_dim))
    sig[:, :half] = rng.normal((a, half)) * (2.0 / np.sqrt(half))
    prog = np.zeros((a, spec.feature_dim))
    prog[:, half:] = rng.normal((a, spec.feature_dim - half)) / np.sqrt(spec.feature_dim - half)
    return sig, prog


def _timeline(spec: SyntheticSpec, rng: Rng) -> list[tuple[int, int, int]]:
    """(start frame, end frame, class) at fps_high, adjacent actions of different class."""
    frames = lambda sec: max(1, int(round(sec * spec.fps_high)))
    out, pos, prev = [], 0, 0
    for k in range(spec.instances):
        if rng.uniform() < spec.gap_prob:
            n = frames(rng.generator.exponential(spec.mean_gap) + 0.2)
            out.append((pos, pos + n, BACKGROUND))
            pos += n
        choices = [c for c in range(1, spec.num_classes + 1) if c != prev]
        c = int(choices[int(rng.integers(0, len(choices)))])
        dur = max(spec.min_duration, spec.mean_duration + spec.std_duration * float(rng.generator.standard_normal()))
        n = frames(dur)
        out.append((pos, pos + n, c))
        pos += n
        prev = c
    if spec.gap_prob > 0:
        n = frames(spec.mean_gap)
        out.append((pos, pos + n, BACKGROUND))
    return out


def synthesize_video(spec: SyntheticSpec, index: int, video_id: str) -> SyntheticVideo:
    rng = Rng(spec.seed).child(2, index)
    segs = _timeline(spec, rng.child(0))
    total = segs[-1][1]
    labels = np.empty(total, dtype=np.int64)
    progress = np.empty(total)
    for s, e, c in segs:
        labels[s:e] = c
        progress[s:e] = (np.arange(e - s) + 0.5) / (e - s) * 2 - 1
    sig, prog = class_signatures(spec)
    dense = sig[labels] + spec.drift * progress[:, None] * prog[labels]
    if spec.noise > 0:
        eps = rng.child(1).normal((total, spec.feature_dim))
        rho = spec.noise_corr
        noise = np.empty_like(eps)
        noise[0] = eps[0]
        for t in range(1, total):
            noise[t] = rho * noise[t - 1] + np.sqrt(1 - rho * rho) * eps[t]
        dense = dense + spec.noise * noise
    ann = [SegmentAnnotation(s / spec.fps_high, e / spec.fps_high, c) for s, e, c in segs if c != BACKGROUND]
    return SyntheticVideo(video_id, labels, ann, dense)


def sample_features(dense: np.ndarray, fps_high: float, fps_low: float) -> np.ndarray:
    """Average full-rate features over each sampled frame's window [i, i+1) / fps_low."""
    t = len(dense)
    n = int(np.ceil(t * fps_low / fps_high - 1e-9))
    window = np.minimum(np.floor(frame_timestamps(t, fps_high) * fps_low).astype(np.int64), n - 1)
    sums = np.zeros((n, dense.shape[1]))
    np.add.at(sums, window, dense)
    return sums / np.bincount(window, minlength=n)[:, None]


def render_clip(dense: np.ndarray, spec: SyntheticSpec) -> np.ndarray:
    """Full-rate features -> uint8 frames [T, H, W, 3] through a fixed random pixel map."""
    n = spec.clip_size
    proj = Rng(spec.seed).child(3).normal((n * n * 3, spec.feature_dim)) * (2.0 / np.sqrt(spec.feature_dim))
    pixels = 1.0 / (1.0 + np.exp(-(dense @ proj.T)))
    return np.round(pixels * 255).astype(np.uint8).reshape(len(dense), n, n, 3)


def generate_synthetic(spec: SyntheticSpec, root: str | Path) -> dict[str, list[str]]:
    root = Path(root)
    for sub in ("clips" if spec.clips else "features", "labels", "annotations", "splits"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    names = spec.class_names
    write_mapping(root / "mapping.txt", names)
    (root / "spec.json").write_text(json.dumps(asdict(spec), indent=1, sort_keys=True) + "\n")
    splits = {"train": [f"train{i:03d}" for i in range(spec.train_videos)],
              "val": [f"val{i:03d}" for i in range(spec.val_videos)]}
    index = 0
    for split, ids in splits.items():
        (root / "splits" / f"{split}.txt").write_text("".join(v + "\n" for v in ids))
        for vid in ids:
            video = synthesize_video(spec, index, vid)
            index += 1
            if spec.clips:
                np.save(root / "clips" / f"{vid}.npy", render_clip(video.dense, spec))
                side = {"video_id": vid, "fps": spec.fps_high, "patch_t": spec.patch_t}
                (root / "clips" / f"{vid}.json").write_text(json.dumps(side, indent=1) + "\n")
            else:
                feats = sample_features(video.dense, spec.fps_high, spec.fps_low)
                save_features(root / "features" / f"{vid}.easf", feats, spec.fps_low, vid, len(video.labels))
            write_labels(root / "labels" / f"{vid}.txt", video.labels, names)
            write_annotations(root / "annotations" / f"{vid}.json", video.annotations, spec.fps_high)
    return splits


def write_annotations(path: Path, annotations: list[SegmentAnnotation], fps_high: float) -> None:
    rows = [{"start": a.start, "end": a.end, "label": a.label} for a in annotations]
    Path(path).write_text(json.dumps({"fps": fps_high, "segments": rows}, indent=1) + "\n")


def read_annotations(path: Path) -> list[SegmentAnnotation]:
    try:
        obj = json.loads(Path(path).read_text())
    except json.JSONDecodeError as err:
        raise DatasetError(f"{path}: byte {err.pos}: {err.msg}") from None
    return [SegmentAnnotation(float(r["start"]), float(r["end"]), int(r["label"])) for r in obj["segments"]]


# -- loading -----------------------------------------------------------------

class DatasetError(ValueError):
    pass


@dataclass
class VideoItem:
    video_id: str
    features: np.ndarray            # [T', D]
    timestamps: np.ndarray          # [T'] seconds
    labels: np.ndarray              # [T] full-rate labels
    frame_timestamps: np.ndarray    # [T] seconds
    annotations: list[SegmentAnnotation]
    fps_high: float
    fps_low: float
    offset: int = 0                 # first full-rate frame of the crop
    meta: dict = field(default_factory=dict)
    # clip datasets: frames [T' * patch_t, H, W, 3] uint8, one tubelet per sampled frame
    clip: np.ndarray | None = None
    patch_t: int = 0


def read_split(root: str | Path, split: str) -> list[str]:
    path = Path(root) / "splits" / f"{split}.txt"
    if not path.exists():
        path = Path(split)
    return [line.strip() for line in path.read_text().splitlines() if line.strip()]


def load_video(root: str | Path, video_id: str, mapping: dict[str, int] | None = None) -> VideoItem:
    root = Path(root)
    mapping = mapping or read_mapping(root / "mapping.txt")
    labels = read_labels(root / "labels" / f"{video_id}.txt", mapping)
    ann_path = root / "annotations" / f"{video_id}.json"
    fps_high = float(json.loads(ann_path.read_text())["fps"])
    ann = read_annotations(ann_path)
    clip_path = root / "clips" / f"{video_id}.npy"
    if clip_path.exists():
        return _load_clip_video(clip_path, video_id, labels, ann, fps_high)
    feats, ts, header = load_features(root / "features" / f"{video_id}.easf")
    side = root / "features" / f"{video_id}.json"
    meta = json.loads(side.read_text()) if side.exists() else {}
    expected = meta.get("num_frames_original")
    if expected is not None and expected != len(labels):
        raise DatasetError(f"{video_id}: {len(labels)} label frames but features report {expected}")
    return VideoItem(video_id, feats, ts, labels, frame_timestamps(len(labels), fps_high), ann,
                     fps_high, float(header["fps"]), meta=meta)


def _load_clip_video(path: Path, video_id, labels, ann, fps_high) -> VideoItem:
    try:
        clip = np.load(path, allow_pickle=False)
    except ValueError as err:
        raise DatasetError(f"{path}: {err}") from None
    meta = json.loads(path.with_suffix(".json").read_text())
    if clip.ndim != 4 or clip.shape[3] != 3 or clip.dtype != np.uint8:
        raise DatasetError(f"{path}: expected uint8 frames [T, H, W, 3], got {clip.dtype} {clip.shape}")
    if len(clip) != len(labels):
        raise DatasetError(f"{video_id}: {len(labels)} label frames but {len(clip)} clip frames")
    pt = int(meta["patch_t"])
    n = -(-len(clip) // pt)
    # the last tubelet repeats the final frame up to a whole window
    clip = np.concatenate([clip, np.repeat(clip[-1:], n * pt - len(clip), axis=0)])
    fps_low = fps_high / pt
    return VideoItem(video_id, np.zeros((n, 0), np.float32), frame_timestamps(n, fps_low), labels,
                     frame_timestamps(len(labels), fps_high), ann, fps_high, fps_low, meta=meta,
                     clip=clip, patch_t=pt)


def crop(item: VideoItem, start: int, length: int) -> VideoItem:
    """Full-rate window [start, start+length); annotations clipped to it."""
    length = min(length, len(item.labels) - start)
    t0, t1 = start / item.fps_high, (start + length) / item.fps_high
    keep = (item.timestamps >= t0) & (item.timestamps < t1)
    ann = [SegmentAnnotation(max(a.start, t0), min(a.end, t1), a.label)
           for a in item.annotations if a.end > t0 and a.start < t1]
    clip = None
    if item.clip is not None:
        idx = np.flatnonzero(keep)
        clip = item.clip[idx[0] * item.patch_t:(idx[-1] + 1) * item.patch_t] if len(idx) else item.clip[:0]
    return VideoItem(item.video_id, item.features[keep], item.timestamps[keep], item.labels[start:start + length],
                     item.frame_timestamps[start:start + length], ann, item.fps_high, item.fps_low,
                     offset=start, meta=item.meta, clip=clip, patch_t=item.patch_t)


def load_dataset(root: str | Path, split: str, train: bool = False, crop_frames: int = 768,
                 rng: Rng | None = None) -> Iterator[VideoItem]:
    """Lazily yield videos; in training mode each is a random crop of crop_frames full-rate frames."""
    root = Path(root)
    mapping = read_mapping(root / "mapping.txt")
    ids = read_split(root, split)
    if train and rng is None:
        raise ValueError("training crops need an rng")
    for i, vid in enumerate(ids):
        item = load_video(root, vid, mapping)
        if train:
            span = max(len(item.labels) - crop_frames, 0)
            start = int(rng.child(i).integers(0, span + 1))
            item = crop(item, start, crop_frames)
        yield item
