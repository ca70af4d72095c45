import csv
import json
import re
import time

import numpy as np
import pytest

from east.cli import main
from east.metrics import SegmentSequence, read_labels, read_mapping

SMOKE = ["--set", "data.crop_frames=120", "--set", "data.window_frames=120", "--set", "model.dim=8",
         "--set", "model.heads=2", "--set", "model.levels=2", "--set", "model.tcn_layers=3",
         "--set", "model.tcn_channels=8", "--set", "train.stage1_epochs=2", "--set", "train.stage2_epochs=2",
         "--set", "augment.A=6", "--set", "augment.K=2"]
GEN = ["--classes", "3", "--instances", "4", "--dim", "8", "--train-videos", "3", "--val-videos", "2",
       "--mean-duration", "3"]

TIMINGS = {}


def run(*argv):
    return main([str(a) for a in argv])


def tree_bytes(root, skip=("manifest.json",)):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*"))
            if p.is_file() and p.name not in skip and "replay_config" not in p.name}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    ws = tmp_path_factory.mktemp("cli")
    assert run("gen", "--out", ws / "data", "--seed", 3, *GEN) == 0
    t0 = time.time()
    assert run("train", "--data", ws / "data", "--out", ws / "run", *SMOKE) == 0
    TIMINGS["train"] = time.time() - t0
    assert run("infer", "--checkpoint", ws / "run/stage2_best.ckpt", "--out", ws / "infer") == 0
    return ws


def test_help_and_usage_errors(capsys):
    with pytest.raises(SystemExit) as err:
        main(["--help"])
    assert err.value.code == 0
    out = capsys.readouterr().out
    for cmd in ("gen", "train", "infer", "eval", "flops", "augment-demo", "plot-emit", "replay"):
        assert cmd in out
    assert main(["frobnicate"]) == 1
    assert main(["flops", "--bogus-flag"]) == 1
    assert main([]) == 1


def test_train_outputs(workspace):
    run_dir = workspace / "run"
    for name in ("manifest.json", "config.yaml", "log.csv", "last.ckpt", "stage1_best.ckpt", "stage2_best.ckpt",
                 "val_report.json", "val_report.csv"):
        assert (run_dir / name).exists(), name
    rows = list(csv.DictReader(open(run_dir / "log.csv")))
    assert [(r["stage"], r["epoch"]) for r in rows] == [("1", "0"), ("1", "1"), ("2", "0"), ("2", "1")]
    assert all(r["val_mAP"] != "" for r in rows[1::2])
    manifest = json.loads((run_dir / "manifest.json").read_text())
    assert manifest["schema"] == 1 and manifest["command"] == "train"
    assert set(manifest["versions"]) == {"east", "numpy", "python"}
    assert manifest["config"]["model"]["dim"] == 8 and manifest["seed"] == 0


def test_smoke_training_is_quick(workspace):
    assert TIMINGS["train"] < 60


def test_infer_outputs(workspace):
    out = workspace / "infer"
    mapping = read_mapping(workspace / "data/mapping.txt")
    for vid in ("val000", "val001"):
        for sub in ("pred", "pred_detector", "pred_baseline"):
            pred = read_labels(out / sub / f"{vid}.txt", mapping)
            gt = read_labels(workspace / "data/labels" / f"{vid}.txt", mapping)
            assert len(pred) == len(gt)
    seg = json.loads((out / "segments.json").read_text())
    labels = read_labels(out / "pred/val000.txt", mapping)
    assert len(seg["val000"]) == len(SegmentSequence.from_labels(labels).segments)
    assert (out / "proposals.jsonl").read_text().count("\n") > 0


def test_eval_ground_truth_as_prediction_is_perfect(workspace, tmp_path):
    data = workspace / "data"
    assert run("eval", "--pred", data / "labels", "--gt", data / "labels", "--mapping", data / "mapping.txt",
               "--out", tmp_path) == 0
    rep = json.loads((tmp_path / "report.json").read_text())
    for k in ("Acc", "Edit", "F1@10", "F1@25", "F1@50"):
        assert rep[k] == 100.0


def test_eval_from_checkpoint_matches_manual_metrics(workspace, tmp_path):
    data = workspace / "data"
    assert run("eval", "--checkpoint", workspace / "run/stage2_best.ckpt", "--out", tmp_path / "a") == 0
    rep = json.loads((tmp_path / "a/report.json").read_text())
    assert sorted(rep["AP"]) == ["0.3", "0.4", "0.5", "0.6", "0.7"]
    header = open(tmp_path / "a/report.csv").readline().strip().split(",")
    assert [h for h in header if h.startswith("AP@")] == ["AP@0.3", "AP@0.4", "AP@0.5", "AP@0.6", "AP@0.7"]
    # re-scoring the dumped predictions by hand gives the same numbers
    assert run("eval", "--pred", tmp_path / "a/pred", "--gt", data / "labels", "--mapping", data / "mapping.txt",
               "--data", data, "--proposals", tmp_path / "a/proposals.jsonl", "--out", tmp_path / "b") == 0
    manual = json.loads((tmp_path / "b/report.json").read_text())
    for k in ("Acc", "Edit", "F1@10", "F1@25", "F1@50", "mAP"):
        assert manual[k] == rep[k], k


def test_eval_warns_on_dataset_mismatch(workspace, tmp_path):
    assert run("gen", "--out", tmp_path / "other", "--seed", 4, *GEN) == 0
    with pytest.warns(UserWarning, match="trained on"):
        assert run("eval", "--checkpoint", workspace / "run/stage2_best.ckpt", "--data", tmp_path / "other",
                   "--out", tmp_path / "e") == 0


def test_data_errors_exit_2(workspace, tmp_path):
    assert run("infer", "--checkpoint", tmp_path / "missing.ckpt", "--out", tmp_path / "x") == 2
    (tmp_path / "bad.jsonl").write_text('{"t_start": 0}\n')
    assert run("augment-demo", "--proposals", tmp_path / "bad.jsonl", "--out", tmp_path / "y") == 2
    (tmp_path / "broken.ckpt").write_bytes(b"EAST garbage")
    assert run("infer", "--checkpoint", tmp_path / "broken.ckpt", "--out", tmp_path / "z") == 2
    # a mistyped ground-truth directory must not score as an empty, perfect set
    assert run("eval", "--pred", workspace / "infer/pred", "--gt", workspace / "data/nope",
               "--mapping", workspace / "data/mapping.txt", "--out", tmp_path / "e") == 2


def test_bad_config_exits_1(workspace, tmp_path):
    assert run("train", "--data", workspace / "data", "--out", tmp_path, "--set", "train.nonsense=1") == 1


def test_nan_loss_exits_3_with_dump(workspace, tmp_path):
    assert run("train", "--data", workspace / "data", "--out", tmp_path, *SMOKE, "--set", "train.lr_heads=1e30",
               "--set", "loss.lambda_r=1e30") == 3
    assert json.loads((tmp_path / "nan_dump.json").read_text())["stage"] == 1


def test_flops_table_ordering(tmp_path, capsys):
    assert run("flops", "--out", tmp_path) == 0
    rows = {r["adapter"]: r for r in csv.DictReader(open(tmp_path / "flops.csv"))}
    std, cea, tia = (float(rows[k]["total_gflops"]) for k in ("standard", "cea", "tia"))
    assert std <= cea < tia
    assert "tia" in capsys.readouterr().out


def test_augment_demo(workspace, tmp_path):
    assert run("augment-demo", "--proposals", workspace / "infer/proposals.jsonl", "--A", 8, "--K", 3,
               "--out", tmp_path) == 0
    report = json.loads((tmp_path / "removal_report.json").read_text())
    assert set(report) == {"val000", "val001"}
    for draws in report.values():
        assert len(draws) == 3
        assert all(len(d["removed"]) == 3 for d in draws)
    n_in = {}
    for line in open(workspace / "infer/proposals.jsonl"):
        v = json.loads(line)["video_id"]
        n_in[v] = n_in.get(v, 0) + 1
    kept = {}
    for line in open(tmp_path / "variants.jsonl"):
        r = json.loads(line)
        kept[(r["video_id"], r["draw"])] = kept.get((r["video_id"], r["draw"]), 0) + 1
    assert all(kept[(v, d)] == n_in[v] - 3 for v in n_in for d in range(3))


def _write(path, names):
    path.write_text("".join(n + "\n" for n in names))


def test_plot_emit(tmp_path):
    (tmp_path / "mapping.txt").write_text("0 background\n1 pour\n2 stir\n")
    pred, gt = tmp_path / "pred", tmp_path / "gt"
    pred.mkdir(), gt.mkdir()
    seq = ["background"] * 3 + ["pour"] * 4 + ["stir"] * 2 + ["pour"]
    _write(pred / "same.txt", seq)
    _write(gt / "same.txt", seq)
    _write(pred / "empty.txt", [])
    _write(gt / "empty.txt", [])
    assert run("plot-emit", "--pred", pred, "--gt", gt, "--mapping", tmp_path / "mapping.txt",
               "--out", tmp_path / "out") == 0
    svg = (tmp_path / "out/same.svg").read_text()
    rows = re.findall(r'<g class="row"[^>]*>(.*?)</g>', svg, re.S)
    assert len(rows) == 2
    assert rows[0] == rows[1]
    lines = list(csv.DictReader(open(tmp_path / "out/same_segments.csv")))
    assert len([r for r in lines if r["row"] == "predicted"]) == 4
    import xml.etree.ElementTree as ET
    ET.parse(tmp_path / "out/empty.svg")
    # rerun is byte-identical
    assert run("plot-emit", "--pred", pred, "--gt", gt, "--mapping", tmp_path / "mapping.txt",
               "--out", tmp_path / "again") == 0
    assert tree_bytes(tmp_path / "out") == tree_bytes(tmp_path / "again")


def test_plot_emit_lists_unknown_names(tmp_path, capsys):
    (tmp_path / "mapping.txt").write_text("0 background\n1 pour\n")
    _write(tmp_path / "p.txt", ["pour", "fry", "boil", "fry"])
    _write(tmp_path / "g.txt", ["pour"] * 4)
    assert run("plot-emit", "--pred", tmp_path / "p.txt", "--gt", tmp_path / "g.txt",
               "--mapping", tmp_path / "mapping.txt", "--out", tmp_path / "o") == 2
    assert "boil, fry" in capsys.readouterr().err


def test_replay_reproduces_every_subcommand(workspace, tmp_path):
    for name in ("data", "run", "infer"):
        manifest = workspace / name / "manifest.json"
        assert run("replay", manifest, "--out", tmp_path / name) == 0
        assert tree_bytes(workspace / name) == tree_bytes(tmp_path / name), name


def test_clip_dataset_trains_through_backbone(tmp_path):
    assert run("gen", "--out", tmp_path / "clips", "--clips", "--patch-t", 16, "--fps-low", 3, *GEN,
               "--instances", 3, "--train-videos", 2, "--val-videos", 1) == 0
    assert sorted(p.name for p in (tmp_path / "clips/clips").iterdir())[:2] == ["train000.json", "train000.npy"]
    assert run("gen", "--out", tmp_path / "bad", "--clips", "--fps-high", 15, "--fps-low", 3) == 1
    small = ["--set", "model.backbone_dim=8", "--set", "model.backbone_heads=2", "--set", "model.backbone_depth=1",
             "--set", "data.crop_frames=320", "--set", "data.window_frames=320"]
    assert run("train", "--data", tmp_path / "clips", "--out", tmp_path / "run", *SMOKE, *small) == 0
    assert run("infer", "--checkpoint", tmp_path / "run/stage2_best.ckpt", "--out", tmp_path / "infer") == 0
    assert (tmp_path / "infer/pred/val000.txt").exists()
