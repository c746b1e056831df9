# -*- coding: utf-8 -*-
"""
saliency_eval.py

Évaluation des cartes de saillance.

- reconnaissance : baisse et hausse moyennes de confiance (AD / AI) quand on
  ne garde que les pixels désignés par la carte, courbes de suppression et
  d'insertion ;
- localisation : DICE, IOU, PPV et sensibilité d'une carte binarisée face à
  la vérité terrain, et balayage des seuils de 1 % à 99 % ;
- références : carte par occultation glissante et carte aléatoire.

Les fonctions qui interrogent le modèle reçoivent un appelable
``predict_proba(images (B, H, W, C)) -> (B, m)`` : elles ne dépendent pas du
type de modèle.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.integrate import trapezoid

from dproto.config import RunConfig, derive_seed
from dproto.errors import ShapeMismatchError
from dproto.mdm import Cam, image_cam
from dproto.parallel import parallel_map

logger = logging.getLogger(__name__)

PredictFn = Callable[[np.ndarray], np.ndarray]
CamLike = Union[Cam, np.ndarray]

METRIC_KEYS = ("accuracy", "AD", "AI", "deletion_auc", "insertion_auc", "dice", "iou", "ppv", "sensitivity")
METHODS = ("mdm", "occlusion", "random")


@dataclass
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @classmethod
    def from_masks(cls, predicted: np.ndarray, truth: np.ndarray) -> "ConfusionCounts":
        predicted, truth = np.asarray(predicted, dtype=bool), np.asarray(truth, dtype=bool)
        if predicted.shape != truth.shape:
            raise ShapeMismatchError(f"Masques de formes différentes : {predicted.shape} et {truth.shape}")
        return cls(
            tp=int(np.sum(predicted & truth)),
            fp=int(np.sum(predicted & ~truth)),
            tn=int(np.sum(~predicted & ~truth)),
            fn=int(np.sum(~predicted & truth)),
        )


@dataclass
class LocalizationMetrics:
    dice: float
    iou: float
    ppv: float
    sensitivity: float
    counts: ConfusionCounts
    degenerate: bool = False  # au moins un rapport 0/0 ramené à 0

    def as_dict(self) -> Dict[str, float]:
        return {"dice": self.dice, "iou": self.iou, "ppv": self.ppv, "sensitivity": self.sensitivity}


@dataclass
class CurveResult:
    fractions: np.ndarray
    probabilities: np.ndarray
    auc: float


@dataclass
class DropIncrease:
    AD: float
    AI: float
    degenerate: int = 0  # images avec Y = 0


def _ratio(num: float, den: float) -> Tuple[float, bool]:
    if den == 0:
        return 0.0, True
    return num / den, False


def _values(cam: CamLike) -> np.ndarray:
    return np.asarray(cam.values if isinstance(cam, Cam) else cam, dtype=np.float64)


# ----------------------------------------------------------------------
#  LOCALISATION
# ----------------------------------------------------------------------
def localization_metrics(cam_binary: np.ndarray, truth: np.ndarray) -> LocalizationMetrics:
    """
    DICE, IOU, PPV et sensibilité d'un masque binaire.

    Raises:
        ShapeMismatchError: Formes différentes.
    """
    c = ConfusionCounts.from_masks(cam_binary, truth)
    dice, d1 = _ratio(2 * c.tp, c.fp + 2 * c.tp + c.fn)
    iou, d2 = _ratio(c.tp, c.tp + c.fp + c.fn)
    ppv, d3 = _ratio(c.tp, c.tp + c.fp)
    sensitivity, d4 = _ratio(c.tp, c.tp + c.fn)
    return LocalizationMetrics(dice, iou, ppv, sensitivity, c, d1 or d2 or d3 or d4)


def binarize_cam(cam: CamLike, top_percent: float) -> np.ndarray:
    """
    Garde exactement ``⌈top_percent · H·W / 100⌉`` pixels, par valeur décroissante.

    Les égalités au seuil sont départagées dans l'ordre ligne par ligne.

    Raises:
        ValueError: ``top_percent`` hors de ]0, 100].
    """
    if not 0 < top_percent <= 100:
        raise ValueError(f"binarize_cam : top_percent doit être dans ]0, 100] (reçu {top_percent})")
    values = _values(cam)
    size = values.size
    count = min(size, max(1, math.ceil(top_percent * size / 100.0 - 1e-9)))
    order = np.argsort(-values.ravel(), kind="stable")
    flat = np.zeros(size, dtype=bool)
    flat[order[:count]] = True
    return flat.reshape(values.shape)


def threshold_sweep(cams: Sequence[CamLike], truths: Sequence[np.ndarray],
                    thresholds: Sequence[float] = tuple(range(1, 100))) -> List[Dict[str, float]]:
    """Moyennes des quatre métriques de localisation pour chaque seuil."""
    if len(cams) != len(truths):
        raise ShapeMismatchError(f"threshold_sweep : {len(cams)} cartes pour {len(truths)} vérités")
    rows = []
    for t in thresholds:
        metrics = [localization_metrics(binarize_cam(c, t), m) for c, m in zip(cams, truths)]
        row = {"threshold": float(t)}
        for key in ("dice", "iou", "ppv", "sensitivity"):
            row[key] = float(np.mean([getattr(m, key) for m in metrics])) if metrics else 0.0
        rows.append(row)
    return rows


# ----------------------------------------------------------------------
#  RECONNAISSANCE
# ----------------------------------------------------------------------
def explained_map(image: np.ndarray, cam: CamLike, top_percent: float) -> np.ndarray:
    keep = binarize_cam(cam, top_percent)
    return np.asarray(image) * keep[:, :, None]


def average_drop_increase(predict_proba: PredictFn, images: Sequence[np.ndarray], cams: Sequence[CamLike],
                          classes: Sequence[int], top_percent: float) -> DropIncrease:
    """
    ``AD = 100/N · Σ max(0, Y - O) / Y`` et ``AI = 100/N · Σ [Y < O]``.

    ``Y`` est la confiance de la classe sur l'image d'origine, ``O`` sur
    l'image réduite aux pixels retenus par la carte.
    """
    if not len(images) == len(cams) == len(classes):
        raise ShapeMismatchError("average_drop_increase : listes de longueurs différentes")
    if len(images) == 0:
        return DropIncrease(0.0, 0.0)
    classes = np.asarray(classes, dtype=np.int64)
    images = np.asarray(images, dtype=np.float64)
    explained = np.stack([explained_map(x, c, top_percent) for x, c in zip(images, cams)])
    rows = np.arange(len(images))
    y = predict_proba(images)[rows, classes]
    o = predict_proba(explained)[rows, classes]
    drops = np.where(y > 0, np.maximum(0.0, y - o) / np.where(y > 0, y, 1.0), 0.0)
    degenerate = int(np.sum(y <= 0))
    if degenerate:
        logger.warning("AD : %d image(s) de confiance nulle ignorée(s)", degenerate)
    n = len(images)
    return DropIncrease(100.0 * drops.sum() / n, 100.0 * np.sum(y < o) / n, degenerate)


def _curve_points(step_percent: float) -> np.ndarray:
    steps = round(100.0 / step_percent)
    if steps < 1 or abs(steps * step_percent - 100.0) > 1e-9:
        raise ValueError(f"step_percent doit diviser 100 (reçu {step_percent})")
    return np.arange(steps + 1) / steps


def deletion_insertion(predict_proba: PredictFn, image: np.ndarray, cam: CamLike, class_id: int,
                       step_percent: float = 2.0) -> Tuple[CurveResult, CurveResult]:
    """
    Courbes de suppression et d'insertion.

    Les pixels sont parcourus par valeur de carte décroissante. La
    suppression part de l'image et met les pixels à 0 ; l'insertion part de
    l'image nulle et restaure les pixels. Les aires sont calculées par la
    méthode des trapèzes.
    """
    image = np.asarray(image, dtype=np.float64)
    values = _values(cam)
    if values.shape != image.shape[:2]:
        raise ShapeMismatchError(f"Carte {values.shape} pour une image {image.shape}")
    fractions = _curve_points(step_percent)
    height, width = values.shape
    order = np.argsort(-values.ravel(), kind="stable")
    counts = np.round(fractions * height * width).astype(np.int64)

    deleted, inserted = [], []
    for count in counts:
        chosen = np.zeros(height * width, dtype=bool)
        chosen[order[:count]] = True
        chosen = chosen.reshape(height, width)[:, :, None]
        deleted.append(np.where(chosen, 0.0, image))
        inserted.append(np.where(chosen, image, 0.0))
    probs = predict_proba(np.stack(deleted + inserted))[:, class_id]
    n = len(fractions)
    deletion = CurveResult(fractions, probs[:n], float(trapezoid(probs[:n], fractions)))
    insertion = CurveResult(fractions, probs[n:], float(trapezoid(probs[n:], fractions)))
    return deletion, insertion


# ----------------------------------------------------------------------
#  RÉFÉRENCES
# ----------------------------------------------------------------------
def _window_starts(size: int, patch: int, stride: int) -> List[int]:
    starts = list(range(0, size - patch + 1, stride))
    if starts[-1] != size - patch:
        starts.append(size - patch)
    return starts


def occlusion_baseline(predict_proba: PredictFn, image: np.ndarray, class_id: int,
                       patch: int = 8, stride: int = 4) -> Cam:
    """
    Carte par occultation : baisse de confiance quand une fenêtre couvrant le
    pixel est mise à 0, moyennée sur les fenêtres couvrantes puis normalisée.

    Raises:
        ValueError: Fenêtre plus grande que l'image ou pas nul.
    """
    image = np.asarray(image, dtype=np.float64)
    height, width = image.shape[:2]
    if patch < 1 or stride < 1 or patch > min(height, width):
        raise ValueError(f"occlusion_baseline : fenêtre {patch} / pas {stride} invalides pour {height}x{width}")
    windows = [(u, v) for u in _window_starts(height, patch, stride) for v in _window_starts(width, patch, stride)]
    occluded = np.repeat(image[None], len(windows), axis=0)
    for k, (u, v) in enumerate(windows):
        occluded[k, u:u + patch, v:v + patch] = 0.0
    base = predict_proba(image[None])[0, class_id]
    probs = predict_proba(occluded)[:, class_id]
    total = np.zeros((height, width))
    cover = np.zeros((height, width))
    for (u, v), p in zip(windows, probs):
        total[u:u + patch, v:v + patch] += base - p
        cover[u:u + patch, v:v + patch] += 1
    drop = total / np.maximum(cover, 1)
    low, high = drop.min(), drop.max()
    values = np.zeros_like(drop) if high <= low else (drop - low) / (high - low)
    return Cam(values, 0.0, [], values > 0)


def random_cam(shape: Tuple[int, int], seed: int) -> Cam:
    values = np.random.default_rng(seed).uniform(0.0, 1.0, size=shape)
    return Cam(values, 0.0, [], np.ones(shape, dtype=bool))


# ----------------------------------------------------------------------
#  ÉVALUATION COMPLÈTE
# ----------------------------------------------------------------------
@dataclass
class EvaluationReport:
    metrics: Dict[str, Dict[str, float]]
    curves: Dict[str, Tuple[np.ndarray, np.ndarray, np.ndarray]]
    sweeps: Dict[str, List[Dict[str, float]]]
    images: int = 0
    flags: Dict[str, int] = field(default_factory=dict)
    #: aires (suppression, insertion) image par image
    image_aucs: Dict[str, List[Tuple[float, float]]] = field(default_factory=dict)

    def insertion_win_rate(self, method: str) -> float:
        """Part des images dont l'aire d'insertion dépasse celle de suppression."""
        pairs = self.image_aucs.get(method, [])
        if not pairs:
            return 0.0
        return sum(inserted > removed for removed, inserted in pairs) / len(pairs)

    def save(self, out_dir: str | Path) -> Path:
        """Écrit ``metrics.json``, ``curves.csv`` et ``sweep.csv``."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.json").write_text(json.dumps(self.metrics, indent=2, sort_keys=True) + "\n",
                                          encoding="utf-8")
        with open(out / "curves.csv", "w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle)
            writer.writerow(["method", "fraction", "deletion_prob", "insertion_prob"])
            for method, (fractions, deletion, insertion) in self.curves.items():
                for row in zip(fractions, deletion, insertion):
                    writer.writerow([method, *(repr(float(v)) for v in row)])
        with open(out / "sweep.csv", "w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle)
            writer.writerow(["method", "threshold", "dice", "iou", "ppv", "sensitivity"])
            for method, rows in self.sweeps.items():
                for row in rows:
                    writer.writerow([method] + [repr(float(row[k])) for k in
                                                ("threshold", "dice", "iou", "ppv", "sensitivity")])
        logger.info("Métriques écrites dans %s", out)
        return out


def _mdm_cam(job) -> Cam:
    model, image, mdm_cfg, class_id = job
    return image_cam(model, image, mdm_cfg, class_id=class_id)


def evaluate_methods(model, images: np.ndarray, labels: np.ndarray, truths: Sequence[np.ndarray],
                     cfg: RunConfig, threads: int = 1, accuracy: Optional[float] = None,
                     processes: bool = True) -> EvaluationReport:
    """
    Calcule les neuf métriques pour les cartes MDM, par occultation et aléatoires.

    Les trois méthodes expliquent la même classe, la classe vraie : sur une
    image mal classée, la carte MDM part du prototype de la classe vraie et
    non de la classe prédite.

    Args:
        model: Modèle entraîné (``predict_proba`` et explications MDM).
        images: Images ``(N, H, W, C)`` munies d'une vérité terrain.
        labels: Classes vraies, utilisées comme classe expliquée.
        truths: Masques de vérité terrain ``H × W``.
        cfg (RunConfig): Sections ``mdm`` et ``eval`` ; ``seed`` pour la carte aléatoire.
        threads (int): Travailleurs pour les cartes MDM et par occultation.
        accuracy: Précision à reporter (par défaut, celle sur ``images``).
        processes (bool): Répartir les cartes MDM sur des processus plutôt
            que sur des fils (sans effet avec ``threads = 1``).
    """
    ev = cfg.eval
    predict = model.predict_proba
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if len(images) == 0:
        raise ValueError("evaluate_methods : aucune image à évaluer")
    if accuracy is None:
        accuracy = model.accuracy(images, labels)
    indices = list(range(len(images)))
    shape = images.shape[1:3]
    jobs = [(model, images[i], cfg.mdm, int(labels[i])) for i in indices]
    cams: Dict[str, List[Cam]] = {
        "mdm": parallel_map(_mdm_cam, jobs, threads, processes=processes),
        "occlusion": parallel_map(
            lambda i: occlusion_baseline(predict, images[i], int(labels[i]), ev.occlusion_patch,
                                         ev.occlusion_stride), indices, threads),
        "random": [random_cam(shape, derive_seed(cfg.seed, "random-cam", i)) for i in indices],
    }

    metrics, curves, sweeps, flags, aucs = {}, {}, {}, {}, {}
    for method in METHODS:
        method_cams = cams[method]
        drop = average_drop_increase(predict, images, method_cams, labels, ev.top_percent)
        pairs = [deletion_insertion(predict, images[i], method_cams[i], int(labels[i]), ev.step_percent)
                 for i in indices]
        local = [localization_metrics(binarize_cam(c, ev.top_percent), t) for c, t in zip(method_cams, truths)]
        metrics[method] = {
            "accuracy": float(accuracy),
            "AD": float(drop.AD),
            "AI": float(drop.AI),
            "deletion_auc": float(np.mean([d.auc for d, _ in pairs])),
            "insertion_auc": float(np.mean([i.auc for _, i in pairs])),
            **{k: float(np.mean([getattr(m, k) for m in local])) for k in ("dice", "iou", "ppv", "sensitivity")},
        }
        curves[method] = (
            pairs[0][0].fractions,
            np.mean([d.probabilities for d, _ in pairs], axis=0),
            np.mean([i.probabilities for _, i in pairs], axis=0),
        )
        sweeps[method] = threshold_sweep(method_cams, truths)
        aucs[method] = [(d.auc, i.auc) for d, i in pairs]
        flags[method] = drop.degenerate + sum(m.degenerate for m in local)
        logger.info("%s : IOU %.3f, AD %.2f, AI %.2f", method, metrics[method]["iou"],
                    metrics[method]["AD"], metrics[method]["AI"])
    return EvaluationReport(metrics, curves, sweeps, len(images), flags, aucs)
