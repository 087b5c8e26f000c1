import numpy as np
import pytest
import torch

from sgnet.fixtures import make_shot_dataset

torch.set_num_threads(max(1, min(4, torch.get_num_threads())))


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """Ten 24-frame 64x64 shots split 6/2/2, with teacher maps."""
    root = tmp_path_factory.mktemp("small")
    return make_shot_dataset(root, 10, seed=5, splits=(0.6, 0.2, 0.2))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_checkpoint(small_dataset, tmp_path_factory):
    """Both tasks, one epoch: weights are arbitrary but the plumbing is real."""
    from sgnet.data import parse_manifest
    from sgnet.model import ModelConfig
    from sgnet.train import TrainConfig, train

    out = tmp_path_factory.mktemp("tiny_run")
    cfg = TrainConfig(epochs=1, batch_size=4, base_lr=0.01, lr_decay_epochs=(), teacher="files",
                      disc_lr=0.001, eval_batch=8)
    train(parse_manifest(small_dataset), ModelConfig(input_size=32, width=4, n_clips_test=5, n_clips_var=4),
          cfg, out)
    return out / "final.pt"


@pytest.fixture(scope="session")
def scale_checkpoint(tmp_path_factory):
    """Scale-only RGB model that has actually learned the fixture scales."""
    from sgnet.data import parse_manifest
    from sgnet.model import ModelConfig
    from sgnet.train import TrainConfig, train

    root = tmp_path_factory.mktemp("scale40")
    manifest = parse_manifest(make_shot_dataset(root / "ds", 40, seed=11))
    cfg = TrainConfig(epochs=20, batch_size=4, base_lr=0.02, lr_decay_epochs=(14,), teacher="files",
                      disc_lr=0.002, task_mode="scale_only", seed=0)
    mc = ModelConfig(input_size=32, width=8, use_flow=False, use_variance_map=False)
    train(manifest, mc, cfg, root / "run")
    return manifest, root / "run" / "final.pt"


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(mod.RESULTS):
            terminalreporter.write_line(line)
