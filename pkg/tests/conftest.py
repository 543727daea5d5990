import pytest

from multinav.cli import build_corpus_dir, build_world_dir
from multinav.trainer import TrainConfig, load_corpus_set, load_world_set

TINY_DIMS = {"word_dim": 10, "lang_hidden": 6, "traj_hidden": 12,
             "attn_dim": 6, "classifier_hidden": 8}


@pytest.fixture(scope="session")
def tiny_assets(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny_assets")
    build_world_dir(root / "worlds", train_houses=2, unseen_houses=1,
                    nodes=14, rooms=3, seed=5)
    build_corpus_dir(root / "corpus", root / "worlds", train_per_house=4,
                     val_per_house=2, seed=5)
    return root


@pytest.fixture(scope="session")
def tiny_world_set(tiny_assets):
    return load_world_set(tiny_assets / "worlds")


@pytest.fixture(scope="session")
def tiny_corpus_set(tiny_assets):
    return load_corpus_set(tiny_assets / "corpus")


@pytest.fixture
def tiny_cfg_factory(tiny_assets, tmp_path):
    def make(**overrides):
        base = dict(worlds_dir=str(tiny_assets / "worlds"),
                    corpus_dir=str(tiny_assets / "corpus"),
                    out_dir=str(tmp_path / "run"),
                    steps=4, batch_size=2, seeds=[0], task_mode="multi",
                    env_mode="plain", eval_interval=0, learning_rate=0.2,
                    max_episode_len=6, model=dict(TINY_DIMS))
        base.update(overrides)
        return TrainConfig(**base)

    return make
