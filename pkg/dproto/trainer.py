# -*- coding: utf-8 -*-
"""
trainer.py

Perte complète, calendrier d'entraînement par étapes et projection
multi-images des prototypes.

La perte vaut ``CE + λ1·Clst + λ2·Sep + λ3·L1`` où :

- ``Clst`` : moyenne sur les images de la plus petite distance entre un
  vecteur masqué de l'image et un prototype de sa classe ;
- ``Sep`` : opposé de la moyenne de la même quantité pour les prototypes
  des autres classes (donc ``Sep <= 0``) ;
- ``L1`` : somme des valeurs absolues des poids hors classe de la tête.

Calendrier : pendant les ``warmup_epochs`` premières époques seuls θ_a, θ_g
et θ_h bougent ; ensuite θ_b est ajouté. Toutes les ``push_period`` époques
(après l'échauffement) les prototypes sont projetés sur la moyenne de leurs
plus proches vecteurs dans ``R`` versions d'une image source, puis la tête
est réajustée seule pendant ``refit_iterations`` passes.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable, List, Optional

import numpy as np

from dproto import autodiff as ad
from dproto.augmentation import random_augment
from dproto.autodiff import Tensor
from dproto.config import DatasetConfig, RunConfig, TrainConfig, derive_seed, make_rng
from dproto.errors import DataError, DivergenceError
from dproto.model import ProtoModel
from dproto.optim import make_optimizer
from dproto.protolayer import PrototypeSource, masked_features

logger = logging.getLogger(__name__)

__all__ = ["TrainConfig", "LabeledImages", "LossBreakdown", "EpochLog", "PushRecord", "PushEvent",
           "TrainResult", "compute_loss", "train", "push_prototypes", "refit_head", "write_epoch_log"]

# remplace les distances exclues d'un minimum (valeur finie)
_EXCLUDED = 1e30


@dataclass
class LabeledImages:
    """Images ``(N, H, W, C)`` dans [0, 1] avec étiquettes et identifiants."""
    images: np.ndarray
    labels: np.ndarray
    ids: np.ndarray = None
    paths: Optional[List[str]] = None

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.ids is None:
            self.ids = np.arange(len(self.labels))
        self.ids = np.asarray(self.ids, dtype=np.int64)
        if not len(self.images) == len(self.labels) == len(self.ids):
            raise DataError("LabeledImages : images, étiquettes et identifiants de longueurs différentes")

    @classmethod
    def from_manifest(cls, manifest, split: str) -> "LabeledImages":
        images, labels, entries = manifest.arrays(split)
        return cls(images, labels, [e.id for e in entries],
                   [str(manifest.image_path(e)) for e in entries])

    def __len__(self) -> int:
        return len(self.labels)

    def path_of(self, index: int) -> Optional[str]:
        return self.paths[index] if self.paths else None


@dataclass
class LossBreakdown:
    total: float
    cross_entropy: float
    clst: float
    sep: float
    l1_head: float
    tensor: Optional[Tensor] = field(default=None, repr=False, compare=False)
    accuracy: float = float("nan")


@dataclass
class EpochLog:
    epoch: int
    total: float
    ce: float
    clst: float
    sep: float
    l1: float
    train_acc: float
    test_acc: float
    pushed: int


@dataclass
class PushRecord:
    """Résultat de la projection d'un prototype."""
    prototype_id: int
    class_id: int
    image_id: int
    image_index: int
    mask_ids: List[int]
    vectors: np.ndarray  # (R, D1), un vecteur le plus proche par variante
    vector: np.ndarray   # moyenne des lignes de ``vectors``


@dataclass
class PushEvent:
    epoch: int
    records: List[PushRecord]
    accuracy_before: float
    accuracy_after_push: float
    accuracy_after_refit: float
    refit_losses: List[float]


@dataclass
class TrainResult:
    model: ProtoModel
    log: List[EpochLog]
    pushes: List[PushEvent]


# ----------------------------------------------------------------------
#  PERTE
# ----------------------------------------------------------------------
def _masked_min(distances: Tensor, keep: np.ndarray) -> Tensor:
    """Minimum par ligne des colonnes où ``keep`` est vrai."""
    shifted = ad.add(distances, Tensor(np.where(keep, 0.0, _EXCLUDED)))
    return -ad.reduce_max(-shifted, axis=1)


def compute_loss(model: ProtoModel, images, labels, cfg: TrainConfig) -> LossBreakdown:
    """
    Perte totale et ses composantes sur un lot.

    Args:
        model (ProtoModel): Modèle (ses paramètres reçoivent les gradients).
        images: Lot ``(B, H, W, C)``.
        labels: ``B`` étiquettes entières.
        cfg (TrainConfig): Poids λ1, λ2, λ3.

    Returns:
        LossBreakdown: Valeurs scalaires et tenseur ``tensor`` de la perte totale.

    Raises:
        DataError: Lot vide ou étiquette hors de ``[0, m)``.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise DataError("compute_loss : lot vide")
    if labels.min() < 0 or labels.max() >= model.num_classes:
        raise DataError(f"compute_loss : étiquette hors de [0, {model.num_classes})")

    out = model.forward(images)
    ce = ad.softmax_cross_entropy(out.logits, labels)
    own = model.prototype_classes[None, :] == labels[:, None]
    min_d = out.layer.min_distances
    clst = ad.reduce_mean(_masked_min(min_d, own))
    if (~own).any(axis=1).all():
        sep = -ad.reduce_mean(_masked_min(min_d, ~own))
    else:
        sep = Tensor(0.0)
    off = Tensor(model.head.off_class.astype(np.float64))
    l1 = ad.reduce_sum(ad.absolute(ad.mul(model.head.weights, off)))
    total = ce + cfg.lambda1 * clst + cfg.lambda2 * sep + cfg.lambda3 * l1
    accuracy = float(np.mean(np.argmax(out.logits.data, axis=1) == labels))
    return LossBreakdown(total.item(), ce.item(), clst.item(), sep.item(), l1.item(), total, accuracy)


def _check_divergence(loss: LossBreakdown, cfg: TrainConfig, where: str) -> None:
    if not np.isfinite(loss.total) or abs(loss.total) > cfg.divergence_threshold:
        raise DivergenceError(f"Perte divergente ({where}) : {loss.total!r}")


# ----------------------------------------------------------------------
#  PROJECTION
# ----------------------------------------------------------------------
def _mask_vectors(model: ProtoModel, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Vecteurs masqués ``(N, n, D1)`` calculés sans graphe."""
    frozen = model.detached()
    chunks = []
    for start in range(0, len(images), batch_size):
        features = frozen.backbone(Tensor(images[start:start + batch_size]))
        chunks.append(masked_features(features, model.mask_array).data)
    return np.concatenate(chunks, axis=0)


def push_prototypes(model: ProtoModel, data: LabeledImages, augmentations: int, seed: int,
                    epoch: int = 0, dataset_cfg: Optional[DatasetConfig] = None) -> List[PushRecord]:
    """
    Projette chaque prototype sur la moyenne de ses plus proches vecteurs réels.

    Pour ``p_j`` de la classe ``k`` : l'image source est l'image de classe
    ``k`` qui contient le vecteur masqué le plus proche de ``p_j`` ; on en
    construit ``R`` variantes (la variante 0 est l'image elle-même, les
    suivantes sont des augmentations tirées avec la graine
    ``(seed, "push", epoch, j, r)``), on retient dans chacune le vecteur le
    plus proche de ``p_j`` et ``p_j`` devient leur moyenne arithmétique.
    Avec ``R = 1`` on retrouve la projection sur un seul patch.

    Raises:
        DataError: Classe sans image d'entraînement.
        ValueError: ``R < 1``.
    """
    if augmentations < 1:
        raise ValueError(f"push_prototypes : R doit être >= 1 (reçu {augmentations})")
    dataset_cfg = dataset_cfg or model.cfg.dataset
    old = model.prototypes.data.copy()
    records: List[PushRecord] = []
    for class_id in range(model.num_classes):
        members = np.flatnonzero(data.labels == class_id)
        protos = model.class_prototypes(class_id)
        if len(protos) == 0:
            continue
        if len(members) == 0:
            raise DataError(f"push_prototypes : aucune image d'entraînement pour la classe {class_id}")
        z = _mask_vectors(model, data.images[members])  # (Nk, n, D)
        for j in protos:
            dist = np.sum((z - old[j]) ** 2, axis=-1)  # (Nk, n)
            local = int(np.argmin(dist.min(axis=1)))
            index = int(members[local])
            source = data.images[index]
            variants = [source]
            for r in range(1, augmentations):
                image, _, _ = random_augment(source, derive_seed(seed, "push", epoch, int(j), r), dataset_cfg)
                variants.append(image)
            vz = _mask_vectors(model, np.stack(variants))  # (R, n, D)
            nearest = np.argmin(np.sum((vz - old[j]) ** 2, axis=-1), axis=1)
            vectors = vz[np.arange(augmentations), nearest]
            records.append(PushRecord(int(j), class_id, int(data.ids[index]), index,
                                      [int(e) for e in nearest], vectors, vectors.mean(axis=0)))

    for record in records:
        model.prototypes.data[record.prototype_id] = record.vector
        model.sources[record.prototype_id] = PrototypeSource(
            record.image_id, record.mask_ids, augmentations, data.path_of(record.image_index)
        )
    logger.info("Projection de %d prototype(s) (R=%d, époque %d)", len(records), augmentations, epoch)
    return records


# ----------------------------------------------------------------------
#  RÉAJUSTEMENT DE LA TÊTE
# ----------------------------------------------------------------------
def _cached_activations(model: ProtoModel, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    frozen = model.detached()
    return np.concatenate([frozen.forward(images[i:i + batch_size]).layer.activations.data
                           for i in range(0, len(images), batch_size)], axis=0)


def refit_head(model: ProtoModel, data: LabeledImages, iterations: int, cfg: TrainConfig,
               seed: int = 0) -> List[float]:
    """
    Réajuste uniquement la tête pendant ``iterations`` passes.

    Les activations des prototypes ne dépendent pas de la tête : elles sont
    calculées une fois sur les images non augmentées, puis la perte
    ``CE + λ3·L1`` est optimisée par rapport à ``w_h`` seul.

    Returns:
        list[float]: Perte moyenne de chaque passe.
    """
    if iterations <= 0 or len(data) == 0:
        return []
    activations = _cached_activations(model, data.images)
    weights = model.head.weights
    optimizer = make_optimizer(cfg.optimizer, {"head": {"head": weights}}, {"head": cfg.lr_head})
    off = Tensor(model.head.off_class.astype(np.float64))
    losses: List[float] = []
    for it in range(iterations):
        order = make_rng(seed, "refit", it).permutation(len(data))
        total, count = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            logits = ad.matmul(Tensor(activations[idx]), ad.transpose(weights))
            loss = ad.softmax_cross_entropy(logits, data.labels[idx]) + \
                cfg.lambda3 * ad.reduce_sum(ad.absolute(ad.mul(weights, off)))
            if not np.isfinite(loss.item()):
                raise DivergenceError(f"Perte non finie pendant le réajustement : {loss.item()!r}")
            optimizer.zero_grad()
            ad.backward(loss)
            optimizer.step()
            total += loss.item() * len(idx)
            count += len(idx)
        losses.append(total / count)
    if len(losses) > 1 and losses[-1] > losses[0]:
        logger.warning("Réajustement de la tête : perte finale %.4f > initiale %.4f", losses[-1], losses[0])
    return losses


# ----------------------------------------------------------------------
#  ENTRAÎNEMENT
# ----------------------------------------------------------------------
def _is_push_epoch(epoch: int, cfg: TrainConfig) -> bool:
    number = epoch + 1
    return number > cfg.warmup_epochs and number % cfg.push_period == 0


def train(model: ProtoModel, data: LabeledImages, cfg: RunConfig,
          test: Optional[LabeledImages] = None,
          on_epoch: Optional[Callable[[EpochLog], None]] = None) -> TrainResult:
    """
    Entraîne le modèle selon le calendrier par étapes.

    Args:
        model (ProtoModel): Modèle à entraîner (modifié en place).
        data (LabeledImages): Partition d'entraînement.
        cfg (RunConfig): Configuration ; ``cfg.seed`` fixe tout l'aléa.
        test (LabeledImages | None): Partition de test pour le journal.
        on_epoch: Rappel appelé après chaque époque.

    Returns:
        TrainResult: Modèle, journal par époque et projections.

    Raises:
        DataError: Une classe n'a aucun exemple.
        DivergenceError: Perte non finie ou supérieure au seuil.
    """
    tr = cfg.trainer
    counts = np.bincount(data.labels, minlength=model.num_classes)
    empty = [c for c in range(model.num_classes) if counts[c] == 0]
    if empty:
        raise DataError(f"Classe(s) sans exemple d'entraînement : {empty}")

    optimizer = make_optimizer(
        tr.optimizer, model.parameter_groups(),
        {"backbone": tr.lr_backbone, "shaping": tr.lr_shaping,
         "prototype": tr.lr_prototype, "head": tr.lr_head},
    )
    log: List[EpochLog] = []
    pushes: List[PushEvent] = []
    for epoch in range(tr.epochs):
        warmup = epoch < tr.warmup_epochs
        model.backbone.set_trainable(backbone=not warmup)
        order = make_rng(cfg.seed, "epoch", epoch).permutation(len(data))
        sums = np.zeros(6)
        for start in range(0, len(order), tr.batch_size):
            idx = order[start:start + tr.batch_size]
            images = data.images[idx]
            if tr.augment_training:
                images = np.stack([
                    random_augment(img, derive_seed(cfg.seed, "train-aug", epoch, int(i)), cfg.dataset)[0]
                    for img, i in zip(images, idx)
                ])
            loss = compute_loss(model, images, data.labels[idx], tr)
            _check_divergence(loss, tr, f"époque {epoch + 1}")
            optimizer.zero_grad()
            ad.backward(loss.tensor)
            optimizer.step()
            sums += len(idx) * np.array([loss.total, loss.cross_entropy, loss.clst, loss.sep,
                                         loss.l1_head, loss.accuracy])

        pushed = 0
        if _is_push_epoch(epoch, tr):
            pushes.append(_push_and_refit(model, data, cfg, epoch))
            pushed = 1
        model.epochs_trained = epoch + 1
        means = sums / len(data)
        entry = EpochLog(epoch + 1, *(float(v) for v in means[:5]), train_acc=float(means[5]),
                         test_acc=model.accuracy(test.images, test.labels) if test is not None and len(test) else float("nan"),
                         pushed=pushed)
        log.append(entry)
        logger.info("Époque %d/%d%s : perte %.4f, précision %.3f, test %.3f", entry.epoch, tr.epochs,
                    " (échauffement)" if warmup else "", entry.total, entry.train_acc, entry.test_acc)
        if on_epoch is not None:
            on_epoch(entry)
    model.backbone.set_trainable(backbone=True)
    return TrainResult(model, log, pushes)


def _push_and_refit(model: ProtoModel, data: LabeledImages, cfg: RunConfig, epoch: int) -> PushEvent:
    tr = cfg.trainer
    before = model.accuracy(data.images, data.labels)
    records = push_prototypes(model, data, tr.augmentations_per_push, cfg.seed, epoch, cfg.dataset)
    after_push = model.accuracy(data.images, data.labels)
    losses = refit_head(model, data, tr.refit_iterations, tr, derive_seed(cfg.seed, "refit", epoch))
    after_refit = model.accuracy(data.images, data.labels)
    logger.info("Projection (époque %d) : précision %.3f -> %.3f -> %.3f après réajustement",
                epoch + 1, before, after_push, after_refit)
    return PushEvent(epoch + 1, records, before, after_push, after_refit, losses)


def write_epoch_log(log: List[EpochLog], path: str | Path) -> None:
    """Écrit le journal par époque en CSV."""
    names = [f.name for f in fields(EpochLog)]
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(names)
        for entry in log:
            writer.writerow([repr(float(getattr(entry, n))) if isinstance(getattr(entry, n), float)
                             else getattr(entry, n) for n in names])
