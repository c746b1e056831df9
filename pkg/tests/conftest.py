"""Fixtures partagées : une configuration minuscule, un petit jeu d'images et l'exécution par défaut."""

import time
from dataclasses import dataclass

import numpy as np
import pytest

from dproto.config import (
    BackboneConfig,
    DatasetConfig,
    EvalConfig,
    MDMConfig,
    ProtoLayerConfig,
    RunConfig,
    TrainConfig,
)
from dproto.dataset import SyntheticSpec, generate
from dproto.manifest import Manifest
from dproto.model import ProtoModel
from dproto.trainer import LabeledImages, TrainResult, train


def tiny_config(**overrides) -> RunConfig:
    """Images 16×16, grille 4×4, 2 classes × 2 prototypes, 6 masques."""
    cfg = RunConfig(
        backbone=BackboneConfig(input_size=(16, 16, 3), conv_blocks=[(6, 3, 1, 2), (6, 3, 1, 2)],
                                shaping_channels=5, target_grid=(4, 4)),
        protolayer=ProtoLayerConfig(num_classes=2, prototypes_per_class=2, num_masks=6),
        trainer=TrainConfig(batch_size=4, epochs=2, warmup_epochs=1, push_period=1,
                            refit_iterations=2, augmentations_per_push=2),
        mdm=MDMConfig(num_scales=2, grid_base=2, steps=5),
        eval=EvalConfig(occlusion_patch=4, occlusion_stride=4),
        dataset=DatasetConfig(classes=2, per_class=4, image_size=16),
        seed=0,
    )
    return cfg.with_overrides(**overrides) if overrides else cfg


def tiny_images(n_per_class: int = 3, seed: int = 0) -> LabeledImages:
    """Classe 0 : moitié gauche claire ; classe 1 : moitié droite claire."""
    rng = np.random.default_rng(seed)
    images, labels = [], []
    for label in (0, 1):
        for _ in range(n_per_class):
            img = np.full((16, 16, 3), 0.2) + rng.uniform(0.0, 0.1, size=(16, 16, 3))
            if label == 0:
                img[:, :8] += 0.6
            else:
                img[:, 8:] += 0.6
            images.append(np.clip(img, 0.0, 1.0))
            labels.append(label)
    return LabeledImages(np.stack(images), np.array(labels))


@pytest.fixture
def config():
    return tiny_config()


@pytest.fixture
def model(config):
    return ProtoModel.build(config, ["gauche", "droite"])


@pytest.fixture
def data():
    return tiny_images()


@dataclass
class DefaultRun:
    """Jeu synthétique par défaut (4 × 200, 56×56) et modèle entraîné 30 époques."""
    cfg: RunConfig
    manifest: Manifest
    train: LabeledImages
    test: LabeledImages
    result: TrainResult
    seconds: float


@pytest.fixture(scope="session")
def default_run(tmp_path_factory) -> DefaultRun:
    """Coûteux (quelques minutes) : réservé aux tests marqués ``slow``."""
    cfg = RunConfig()
    manifest = generate(SyntheticSpec.from_config(cfg.dataset, cfg.seed), tmp_path_factory.mktemp("shapes"))
    train_data = LabeledImages.from_manifest(manifest, "train")
    test_data = LabeledImages.from_manifest(manifest, "test")
    start = time.perf_counter()
    result = train(ProtoModel.build(cfg, manifest.class_names), train_data, cfg, test_data)
    return DefaultRun(cfg, manifest, train_data, test_data, result, time.perf_counter() - start)
