"""Shared fixtures: one small rendered dataset and one briefly trained
model, built once per session and reused by the module tests."""

import numpy as np
import pytest

from aarlogo import datagen, runconfig, trainer

TINY_OVERRIDES = {
    "num_classes": 5,
    "scenes_per_class": 6,
    "image_size": 192,
    "distractor_classes": 4,
    "data_seed": 7,
    "batch_size": 4,
    "epochs": 1,
    "c_out": 16,
    "d_embed": 16,
    "input_size": 64,
}


@pytest.fixture(scope="session")
def tiny_cfg():
    return runconfig.make_config(dict(TINY_OVERRIDES))


@pytest.fixture(scope="session")
def dataset_dir(tmp_path_factory, tiny_cfg):
    """Rendered 5-class dataset with a distractor set, shared read-only."""
    out = tmp_path_factory.mktemp("data")
    dconf = datagen.DataConfig(
        num_classes=tiny_cfg["num_classes"],
        scenes_per_class=tiny_cfg["scenes_per_class"],
        image_size=tiny_cfg["image_size"],
        distractor_classes=tiny_cfg["distractor_classes"])
    manifest = datagen.generate_dataset(dconf, tiny_cfg["data_seed"], str(out))
    target = sum(len(r.objects) for r in manifest.splits["train"])
    datagen.make_distractor_set(dconf, tiny_cfg["data_seed"], str(out), target)
    return str(out)


@pytest.fixture(scope="session")
def dataset_manifest(dataset_dir):
    return datagen.load_manifest(dataset_dir)


@pytest.fixture(scope="session")
def trained(tmp_path_factory, tiny_cfg, dataset_dir):
    """(bundle, ckpt_path, log_path) after a short deterministic run."""
    work = tmp_path_factory.mktemp("train")
    ckpt = str(work / "model.ckpt")
    log = str(work / "loss.csv")
    bundle = trainer.train(tiny_cfg, dataset_dir, ckpt, log_path=log)
    return bundle, ckpt, log


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
