import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from semtok_reid.config import TrainConfig  # noqa: E402
from semtok_reid.data import DatasetSpec, generate_dataset  # noqa: E402

ACCEPTANCE_LINES: list[str] = []


def tiny_config(**changes) -> TrainConfig:
    base = TrainConfig(dim=16, heads=2, vision_layers=1, decoder_layers=1, p_ids=4, k_imgs=2,
                       epochs=2, warmup_epochs=1, decay_epoch=2, steps_per_epoch=2, eval_every=0)
    return base.replace(**changes)


@pytest.fixture(scope="session")
def tiny_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    generate_dataset(root, DatasetSpec(seed=3, num_train_ids=8, num_test_ids=4, num_cameras=2,
                                       images_per_id_per_cam=2))
    return root


@pytest.fixture(scope="session")
def default_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("default")
    generate_dataset(root, DatasetSpec())
    return root


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
