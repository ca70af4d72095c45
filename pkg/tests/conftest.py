import numpy as np
import pytest

from east.config import PipelineConfig
from east.data import SyntheticSpec, generate_synthetic


def tiny_spec(**kw):
    base = dict(num_classes=3, instances=4, feature_dim=8, train_videos=3, val_videos=2, mean_duration=3.0,
                std_duration=0.5, seed=5)
    base.update(kw)
    return SyntheticSpec(**base)


def tiny_config(root, **sections):
    cfg = PipelineConfig.from_dict({
        "data": {"root": str(root), "crop_frames": 120, "window_frames": 120},
        "model": {"dim": 8, "heads": 2, "levels": 2, "tcn_layers": 3, "tcn_channels": 8},
        "train": {"stage1_epochs": 2, "stage2_epochs": 2, "eval_every": 1},
        "augment": {"A": 6, "K": 2},
    })
    for section, values in sections.items():
        for k, v in values.items():
            setattr(getattr(cfg, section), k, v)
    return cfg


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    generate_synthetic(tiny_spec(), root)
    return root


# criterion id -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record(criterion: int, passed: bool, detail: str) -> None:
    ACCEPTANCE[criterion] = (bool(passed), detail)
    print(f"criterion {criterion}: {'PASS' if passed else 'FAIL'}  {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for c in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[c]
        terminalreporter.write_line(f"criterion {c:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
