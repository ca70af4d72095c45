import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from east.detector import (Detector, DetectorConfig, assign_targets, decode_proposals, detection_ap,
                           detector_loss, diou_loss_1d, focal_loss, frame_to_cell, interpolated_ap, nms,
                           regression_upper_bounds)
from east.detector.model import Predictions
from east.tensor import Rng, Tensor, softmax
from east.tensor.gradcheck import check_gradients
from east.types import ActionProposal, SegmentAnnotation


def small_detector(levels=3, in_dim=5, classes=4, seed=0, dtype=np.float64):
    cfg = DetectorConfig(in_dim=in_dim, num_classes=classes, dim=8, heads=2, levels=levels)
    return Detector(cfg, Rng(seed)).astype(dtype)


def inputs(t, in_dim=5, seed=0):
    x = Tensor(np.random.default_rng(seed).standard_normal((1, t, in_dim)), dtype=np.float64)
    return x, (np.arange(t) + 0.5) / 3.0


# -- pyramid ------------------------------------------------------------------

def test_single_level_is_encoded_input():
    det = small_detector(levels=1)
    x, ts = inputs(6)
    pyr = det.build_pyramid(x, ts)
    assert len(pyr.levels) == 1
    expected = det.blocks[0](det.encode(x).transpose(0, 2, 1), 2).transpose(0, 2, 1)
    np.testing.assert_array_equal(pyr.levels[0].data, expected.data)


def test_level_extents():
    det = small_detector(levels=3)
    x, ts = inputs(16)
    assert [z.shape[2] for z in det.build_pyramid(x, ts).levels] == [16, 8, 4]
    x, ts = inputs(13)
    assert [z.shape[2] for z in det.build_pyramid(x, ts).levels] == [13, 7, 4]


def test_too_few_frames_for_levels():
    det = small_detector(levels=4)
    x, ts = inputs(7)
    with pytest.raises(ValueError, match="at most 3 levels"):
        det.build_pyramid(x, ts)


@pytest.mark.parametrize("t", range(1, 33))
def test_cell_timestamp_round_trip(t):
    levels = int(np.floor(np.log2(t))) + 1
    det = small_detector(levels=levels)
    x, ts = inputs(t)
    pyr = det.build_pyramid(x, ts)
    for lv in range(levels):
        cells = np.arange(pyr.levels[lv].shape[2])
        np.testing.assert_array_equal(pyr.nearest_cell(lv, pyr.cell_timestamps(lv)), cells)
        # each cell's own centre frame reads it back
        np.testing.assert_array_equal(frame_to_cell(t, lv)[cells * 2 ** lv], cells)


# -- heads --------------------------------------------------------------------

def test_zero_classifier_gives_uniform_distribution():
    det = small_detector(classes=5)
    x, ts = inputs(12)
    np.testing.assert_allclose(det(x, ts).probs.data, 0.2, atol=1e-15)


@pytest.mark.parametrize("levels,t", [(l, t) for l in (1, 2, 3) for t in (4, 5, 9, 16)])
def test_one_prediction_per_frame_and_nonnegative_offsets(levels, t):
    det = small_detector(levels=levels, seed=levels * 100 + t)
    rng = np.random.default_rng(t)
    for _, p in det.named_parameters():
        p.data = rng.standard_normal(p.shape)
    x, ts = inputs(t, seed=t)
    out = det(x, ts)
    assert out.logits.shape == (1, t, 4) and out.offsets.shape == (1, t, 2)
    assert out.gate_logits.shape == (1, t, levels)
    assert np.all(out.offsets.data >= 0)
    np.testing.assert_allclose(out.probs.data.sum(-1), 1, atol=1e-12)


def test_heads_shared_across_levels():
    det = small_detector(levels=3)
    names = [n for n, _ in det.named_parameters() if "head" in n]
    assert all(n.startswith(("cls_head.", "reg_head.")) for n in names)
    assert len(names) == 8


# -- decoding -----------------------------------------------------------------

def test_decode_direct_formula():
    probs = np.array([[0.1, 0.7, 0.2], [0.5, 0.2, 0.3]])
    props, y1 = decode_proposals(probs, np.array([[2.0, 3.0], [0.5, 0.5]]), np.array([5.0, 6.0]))
    assert (props[0].t_start, props[0].t_end) == (3.0, 8.0)
    assert props[0].confidence == 0.7 and props[1].confidence == 0.3
    assert props[1].label == 2
    np.testing.assert_array_equal(y1, [1, 0])


def test_decode_degenerate_interval_is_clamped_and_flagged():
    ts = np.array([1.0, 2.0, 3.0])
    props, _ = decode_proposals(np.full((3, 2), 0.5), np.zeros((3, 2)), ts)
    assert all(p.degenerate for p in props)
    assert all(p.t_end - p.t_start == pytest.approx(0.5) for p in props)
    assert all(p.t_start < p.t_end for p in props)


def test_decode_rejects_non_monotone_timestamps():
    with pytest.raises(ValueError, match="increasing"):
        decode_proposals(np.full((3, 2), 0.5), np.ones((3, 2)), np.array([0.0, 2.0, 1.0]))
    with pytest.raises(ValueError, match="mismatch"):
        decode_proposals(np.full((3, 2), 0.5), np.ones((2, 2)), np.array([0.0, 1.0, 2.0]))


@given(st.integers(1, 40), st.floats(0.5, 30.0), st.integers(0, 2 ** 31))
@settings(max_examples=50, deadline=None)
def test_decode_is_fps_invariant(n, fps, seed):
    rng = np.random.default_rng(seed)
    ts = np.sort(rng.uniform(0, 100, n)) + np.arange(n) * 1e-3
    probs = rng.dirichlet(np.ones(4), n)
    off = rng.uniform(0.01, 5, (n, 2))
    a, _ = decode_proposals(probs, off, ts)
    # the same seconds reached through a different frame rate
    frames = ts * fps
    b, _ = decode_proposals(probs, off, (frames / fps))
    np.testing.assert_allclose([(p.t_start, p.t_end) for p in a], [(p.t_start, p.t_end) for p in b],
                               rtol=0, atol=1e-12)
    assert len(a) == n


def test_proposal_dist_and_confidence():
    rng = np.random.default_rng(0)
    probs = rng.dirichlet(np.ones(5), 20)
    props, _ = decode_proposals(probs, rng.uniform(0.1, 1, (20, 2)), np.arange(20.0))
    for p in props:
        assert abs(p.dist.sum() - 1) < 1e-6
        assert p.confidence == p.dist[1:].max()
    props_bg, _ = decode_proposals(probs, np.ones((20, 2)), np.arange(20.0), include_background=True)
    assert all(p.confidence == p.dist.max() for p in props_bg)


# -- targets -----------------------------------------------------------------

def test_assign_direct_arithmetic():
    ts = np.array([1.0, 4.0, 8.0])
    tg = assign_targets([SegmentAnnotation(2.0, 7.0, 3)], ts, levels=2, period=1.0)
    np.testing.assert_array_equal(tg.labels, [0, 3, 0])
    np.testing.assert_array_equal(tg.offsets[1], [2.0, 3.0])
    np.testing.assert_array_equal(tg.offsets[[0, 2]], 0)
    assert list(tg.inside) == [False, True, False]
    assert tg.level[0] == -1 and tg.level[1] == 0


def test_assign_rejects_overlap():
    with pytest.raises(ValueError, match="overlapping"):
        assign_targets([SegmentAnnotation(0, 3, 1), SegmentAnnotation(2, 5, 2)], np.arange(6.0))


def random_annotations(rng, horizon=60.0, classes=5):
    cuts = np.sort(rng.choice(np.arange(1, int(horizon * 4)) / 4, size=int(rng.integers(2, 12)), replace=False))
    segs = []
    for s, e in zip(cuts[::2], cuts[1::2]):
        segs.append(SegmentAnnotation(float(s), float(e), int(rng.integers(1, classes))))
    return segs


@pytest.mark.parametrize("seed", range(25))
def test_assign_then_decode_recovers_instances(seed):
    rng = np.random.default_rng(seed)
    ann = random_annotations(rng)
    fps = float(rng.choice([1.0, 2.0, 3.0, 7.5]))
    ts = (np.arange(int(60 * fps)) + 0.5) / fps
    tg = assign_targets(ann, ts, levels=4)
    probs = np.eye(5)[tg.labels]
    props, y1 = decode_proposals(probs, tg.offsets, ts)
    np.testing.assert_array_equal(y1, tg.labels)
    for i in np.flatnonzero(tg.inside):
        inst = [a for a in ann if a.start <= ts[i] < a.end]
        assert len(inst) == 1
        assert props[i].t_start == pytest.approx(inst[0].start, abs=1e-9)
        assert props[i].t_end == pytest.approx(inst[0].end, abs=1e-9)
    # instances that contain a sampled frame are all covered
    for a in ann:
        hit = (ts >= a.start) & (ts < a.end)
        assert np.all(tg.labels[hit] == a.label)
    assert np.all(tg.offsets[tg.inside] >= 0)


def test_level_ranges_are_geometric():
    hi = regression_upper_bounds(4, 0.5)
    np.testing.assert_array_equal(hi[:3], [2.0, 4.0, 8.0])
    assert hi[3] == np.inf
    ts = np.arange(0.25, 40, 0.5)
    tg = assign_targets([SegmentAnnotation(0.0, 40.0, 1)], ts, levels=4, period=0.5)
    reach = tg.offsets.max(1)
    for lv in range(4):
        sel = tg.level == lv
        lo = 0 if lv == 0 else hi[lv - 1]
        assert np.all((reach[sel] >= lo) & (reach[sel] < hi[lv]))


# -- losses ------------------------------------------------------------------

def test_diou_hand_case():
    loss = diou_loss_1d(Tensor(np.array([[0.0, 1.0]])), Tensor(np.array([[2.0, 3.0]])))
    assert abs(loss.item() - (1 + 4 / 9)) < 1e-12


def test_diou_identical_and_nested():
    same = diou_loss_1d(Tensor(np.array([[1.0, 4.0]])), Tensor(np.array([[1.0, 4.0]])))
    assert same.item() == 0.0
    # pred [1,3] inside gt [0,4]: IoU 1/2, same centre
    nested = diou_loss_1d(Tensor(np.array([[1.0, 3.0]])), Tensor(np.array([[0.0, 4.0]])))
    assert nested.item() == pytest.approx(0.5, abs=1e-15)


def test_focal_loss_values():
    logits = Tensor(np.log(np.array([[0.25, 0.75], [0.5, 0.5]])))
    out = focal_loss(logits, np.array([1, 0])).data
    np.testing.assert_allclose(out, [-(0.25 ** 2) * np.log(0.75), -(0.5 ** 2) * np.log(0.5)], rtol=1e-12)
    np.testing.assert_allclose(focal_loss(logits, np.array([1, 0]), gamma=0).data,
                               [-np.log(0.75), -np.log(0.5)], rtol=1e-12)


def perfect_predictions(tg, ts, classes):
    logits = np.where(np.eye(classes)[tg.labels] > 0, 60.0, -60.0)[None]
    logits_t = Tensor(logits)
    return Predictions(logits=logits_t, probs=softmax(logits_t), offsets=Tensor(tg.offsets[None] * 1.0),
                       gate_logits=Tensor(np.zeros((1, len(ts), 4))))


def test_perfect_predictions_have_zero_loss():
    ts = (np.arange(30) + 0.5) / 2
    tg = assign_targets([SegmentAnnotation(1.0, 4.0, 2), SegmentAnnotation(6.0, 12.0, 1)], ts)
    loss = detector_loss(perfect_predictions(tg, ts, 3), [tg], [ts])
    assert loss.item() == 0.0
    # a boundary error or wrong class makes it positive
    bad = perfect_predictions(tg, ts, 3)
    bad.offsets.data[0, 5, 0] += 0.3
    assert detector_loss(bad, [tg], [ts]).item() > 0
    flipped = assign_targets([SegmentAnnotation(1.0, 4.0, 1), SegmentAnnotation(6.0, 12.0, 1)], ts)
    assert detector_loss(perfect_predictions(tg, ts, 3), [flipped], [ts]).item() > 0


def test_all_background_uses_floored_denominator():
    ts = np.arange(10.0)
    tg = assign_targets([], ts)
    logits = Tensor(np.zeros((1, 10, 3)))
    preds = Predictions(logits, softmax(logits), Tensor(np.ones((1, 10, 2))), Tensor(np.zeros((1, 10, 2))))
    parts = {}
    loss = detector_loss(preds, [tg], [ts], parts=parts)
    assert parts["positives"] == 0
    expected = 10 * (2 / 3) ** 2 * np.log(3)
    assert loss.item() == pytest.approx(expected, rel=1e-12)


def test_loss_rejects_negative_lambda():
    ts = np.arange(10.0)
    tg = assign_targets([], ts)
    logits = Tensor(np.zeros((1, 10, 3)))
    preds = Predictions(logits, softmax(logits), Tensor(np.ones((1, 10, 2))), Tensor(np.zeros((1, 10, 2))))
    with pytest.raises(ValueError, match="lambda_r"):
        detector_loss(preds, [tg], [ts], lambda_r=-0.1)


@given(st.integers(0, 2 ** 31), st.sampled_from(["target", "predicted"]))
@settings(max_examples=40, deadline=None)
def test_loss_nonnegative(seed, indicator):
    rng = np.random.default_rng(seed)
    ts = (np.arange(24) + 0.5) / 2
    ann = random_annotations(rng, horizon=12.0, classes=4)
    tg = assign_targets(ann, ts)
    logits = Tensor(rng.standard_normal((1, 24, 4)) * 3)
    preds = Predictions(logits, softmax(logits), Tensor(rng.uniform(0, 4, (1, 24, 2))),
                        Tensor(np.zeros((1, 24, 4))))
    assert detector_loss(preds, [tg], [ts], indicator=indicator, level_weight=0.5).item() >= 0


@pytest.mark.parametrize("seed", range(24))
def test_detector_loss_gradcheck(seed):
    rng = np.random.default_rng(seed)
    t = 8
    det = small_detector(levels=2 + seed % 2, seed=seed)
    for _, p in det.named_parameters():
        p.data = rng.standard_normal(p.shape) * 0.5
    x, ts = inputs(t, seed=seed)
    x.requires_grad = True
    ann = [SegmentAnnotation(0.3, 1.4, 1 + seed % 3), SegmentAnnotation(1.6, 2.5, 1 + (seed + 1) % 3)]
    tg = assign_targets(ann, ts, levels=det.cfg.levels)
    indicator = "target" if seed % 3 else "predicted"
    fn = lambda: detector_loss(det(x, ts), [tg], [ts], indicator=indicator, level_weight=0.3 * (seed % 2))
    params = [x] + [p for n, p in det.named_parameters() if "head" in n or n.startswith(("gate", "proj1"))]
    assert check_gradients(fn, params) < 1e-4


def test_heads_gradcheck_through_pyramid():
    det = small_detector(levels=3, seed=9)
    rng = np.random.default_rng(9)
    for _, p in det.named_parameters():
        p.data = rng.standard_normal(p.shape) * 0.5
    x, ts = inputs(9, seed=9)
    w = Tensor(rng.standard_normal((1, 9, 2)))
    fn = lambda: (det(x, ts).offsets * w).sum()
    assert check_gradients(fn, det.parameters()) < 1e-4


# -- average precision -------------------------------------------------------

def prop(s, e, label, conf, vid="v", classes=4):
    dist = np.full(classes, (1 - conf) / (classes - 1))
    dist[label] = conf
    return ActionProposal(s, e, dist, conf, video_id=vid)


def test_ap_single_match():
    gt = {"v": [SegmentAnnotation(0.0, 10.0, 1)]}
    res = detection_ap([prop(0.0, 8.0, 1, 0.9)], gt)
    assert all(v == 1.0 for v in res["ap"].values()) and res["mAP"] == 1.0
    assert detection_ap([prop(0.0, 8.0, 1, 0.9)], gt, thresholds=(0.9,))["mAP"] == 0.0


def test_ap_excludes_classes_without_ground_truth():
    gt = {"v": [SegmentAnnotation(0.0, 10.0, 1)]}
    res = detection_ap([prop(0.0, 10.0, 1, 0.9), prop(20.0, 30.0, 2, 0.95)], gt)
    assert res["classes"] == [1] and res["mAP"] == 1.0


def reference_ap(proposals, annotations, thr):
    """O(n^2) reference: precision envelope averaged over recalled instances."""
    aps = []
    labels = sorted({a.label for segs in annotations.values() for a in segs})
    for c in labels:
        gts = [(v, a) for v, segs in annotations.items() for a in segs if a.label == c]
        dets = [p for p in proposals if p.label == c]
        dets = [dets[i] for i in sorted(range(len(dets)), key=lambda i: (-dets[i].confidence, i))]
        taken = set()
        hits = []
        for d in dets:
            best, best_iou = None, -1.0
            for j, (v, a) in enumerate(gts):
                if v != d.video_id or j in taken:
                    continue
                inter = max(0.0, min(d.t_end, a.end) - max(d.t_start, a.start))
                iou = inter / ((d.t_end - d.t_start) + (a.end - a.start) - inter)
                if iou > best_iou:
                    best, best_iou = j, iou
            ok = best is not None and best_iou >= thr
            if ok:
                taken.add(best)
            hits.append(ok)
        prec = [sum(hits[:k + 1]) / (k + 1) for k in range(len(hits))]
        total = 0.0
        for k, h in enumerate(hits):
            if h:
                total += max(prec[k:])
        aps.append(total / len(gts))
    return float(np.mean(aps))


@pytest.mark.parametrize("seed", range(30))
def test_ap_matches_reference(seed):
    rng = np.random.default_rng(seed)
    annotations = {}
    proposals = []
    for v in range(int(rng.integers(1, 4))):
        segs = random_annotations(rng, horizon=30.0)
        annotations[f"v{v}"] = segs
        for a in segs:
            for _ in range(int(rng.integers(0, 3))):
                jitter = rng.normal(0, 1.0, 2)
                s, e = a.start + jitter[0], a.end + jitter[1]
                if e > s:
                    lab = a.label if rng.random() < 0.8 else int(rng.integers(1, 5))
                    proposals.append(prop(s, e, lab, float(rng.uniform(0.3, 1.0)), f"v{v}", classes=5))
        for _ in range(int(rng.integers(0, 4))):
            s = rng.uniform(0, 28)
            proposals.append(prop(s, s + rng.uniform(0.5, 3), int(rng.integers(1, 5)),
                                  float(rng.uniform(0.3, 1.0)), f"v{v}", classes=5))
    res = detection_ap(proposals, annotations)
    for thr, value in res["ap"].items():
        assert value == pytest.approx(reference_ap(proposals, annotations, thr), abs=1e-12)


def test_interpolated_ap_hand_case():
    # ranks: TP, FP, TP with 3 GT -> precision envelope 1, 2/3 at recalls 1/3, 2/3
    assert interpolated_ap(np.array([1, 0, 1]), 3) == pytest.approx((1 + 2 / 3) / 3)
    assert interpolated_ap(np.array([]), 2) == 0.0


def test_nms_suppresses_same_class_overlaps_only():
    props = [prop(0, 10, 1, 0.9), prop(1, 10, 1, 0.8), prop(1, 10, 2, 0.7), prop(20, 30, 1, 0.6),
             prop(0, 10, 1, 0.5, vid="w")]
    kept = nms(props, 0.5)
    assert [p.confidence for p in kept] == [0.9, 0.7, 0.6, 0.5]
    assert len(nms(props, 1.0)) == len(props)
