import time

import pytest
from hypothesis import HealthCheck, settings

from deepbp import GenConfig, desk_config, generate_dataset
from deepbp.training import TrainConfig, train

settings.register_profile(
    "suite",
    deadline=None,
    max_examples=25,
    suppress_health_check=[HealthCheck.too_slow],
    derandomize=True,
)
settings.load_profile("suite")


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """12 problems at 16x16, 2 coils; fast enough for unit tests."""
    root = tmp_path_factory.mktemp("tiny_ds")
    cfg = GenConfig(count=12, height=16, width=16, coils=2, sigma=0.02,
                    accel=3.0, calib=4, seed=7, split=(8, 2, 2))
    return generate_dataset(root, cfg)


@pytest.fixture(scope="session")
def desk_dataset(tmp_path_factory):
    """Full desk-scale benchmark dataset: 200 train / 25 val / 25 test."""
    root = tmp_path_factory.mktemp("desk_ds")
    return generate_dataset(root, desk_config(seed=0))


# Training recipes chosen from calibration runs; supervised passes its bar
# within a few epochs (12 adds margin). The unsupervised run needs all 30
# epochs of single-problem steps: averaging gradients over a batch cancels
# the per-image descent directions that drive the slow late improvement and
# stalls the loss at its starting value. Both runs together fit the
# half-hour budget with slack.
TRAIN_RECIPES = {
    "supervised": TrainConfig(mode="supervised", epochs=12, seed=0, lr=1e-3),
    "unsupervised": TrainConfig(mode="unsupervised", epochs=30, seed=0, lr=1e-3),
    "modl": TrainConfig(mode="modl", epochs=12, seed=0, lr=1e-3),
}


@pytest.fixture(scope="session")
def trained_models(desk_dataset, tmp_path_factory):
    """Desk-scale models for all three training modes plus wall times.

    Trained once per session; the training-effectiveness, method-ordering,
    and unroll-sweep checks all reuse these.
    """
    out = tmp_path_factory.mktemp("trained")
    wall = {}
    results = {}
    for mode, cfg in TRAIN_RECIPES.items():
        t0 = time.perf_counter()
        results[mode] = train(desk_dataset, cfg, out / mode)
        wall[mode] = time.perf_counter() - t0
    return {"results": results, "wall": wall}


def pytest_terminal_summary(terminalreporter):
    from _report import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in LINES:
            terminalreporter.write_line(line)
