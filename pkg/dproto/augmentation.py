# -*- coding: utf-8 -*-
"""
augmentation.py

Augmentations géométriques : rotation, perspective, cisaillement et
distorsion élastique.

Chaque transformation calcule, pour chaque pixel de sortie, la position
source correspondante (transformation inverse), puis rééchantillonne
l'image par interpolation bilinéaire (``scipy.ndimage.map_coordinates``,
ordre 1). Les échantillons hors cadre reçoivent la couleur de fond 0.5.
"""

from __future__ import annotations

import logging
from typing import Optional, Tuple

import numpy as np
from scipy.ndimage import gaussian_filter, map_coordinates

from dproto.config import DatasetConfig

logger = logging.getLogger(__name__)

KINDS = ("rotation", "perspective", "shear", "distortion")

#: Couleur de fond des zones découvertes.
BACKGROUND = 0.5


def equivalent_angle(degrees: float) -> float:
    """Angle ramené dans ``[-180, 180[``."""
    return (float(degrees) + 180.0) % 360.0 - 180.0


def _check_magnitude(kind: str, magnitude: float, cfg: DatasetConfig) -> None:
    limits = {
        "rotation": (abs(equivalent_angle(magnitude)), cfg.max_rotation),
        "shear": (abs(magnitude), cfg.max_shear),
        "perspective": (magnitude, cfg.max_perspective),
        "distortion": (magnitude, cfg.max_distortion),
    }
    value, limit = limits[kind]
    if value < 0 or value > limit + 1e-9:
        raise ValueError(f"augment : amplitude {magnitude} hors plage pour '{kind}' (max {limit})")


def _grid(height: int, width: int) -> Tuple[np.ndarray, np.ndarray]:
    rows, cols = np.meshgrid(np.arange(height, dtype=np.float64),
                             np.arange(width, dtype=np.float64), indexing="ij")
    return rows, cols


def _homography(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Matrice 3×3 qui envoie les 4 points ``src`` sur ``dst`` (coordonnées (x, y))."""
    rows = []
    rhs = []
    for (x, y), (u, v) in zip(src, dst):
        rows.append([x, y, 1, 0, 0, 0, -u * x, -u * y])
        rows.append([0, 0, 0, x, y, 1, -v * x, -v * y])
        rhs.extend([u, v])
    params = np.linalg.solve(np.asarray(rows, dtype=np.float64), np.asarray(rhs, dtype=np.float64))
    return np.append(params, 1.0).reshape(3, 3)


def _source_coordinates(kind: str, magnitude: float, shape, rng: np.random.Generator,
                        cfg: DatasetConfig) -> Tuple[np.ndarray, np.ndarray]:
    height, width = shape
    rows, cols = _grid(height, width)
    cy, cx = (height - 1) / 2.0, (width - 1) / 2.0

    if kind == "rotation":
        theta = np.deg2rad(magnitude)
        cos, sin = np.cos(theta), np.sin(theta)
        dy, dx = rows - cy, cols - cx
        src_rows = cy + cos * dy - sin * dx
        src_cols = cx + sin * dy + cos * dx
    elif kind == "shear":
        src_rows = rows
        src_cols = cols - magnitude * (rows - cy)
    elif kind == "perspective":
        corners = np.array([[0, 0], [width - 1, 0], [width - 1, height - 1], [0, height - 1]],
                           dtype=np.float64)
        jitter = rng.uniform(-magnitude, magnitude, size=(4, 2)) * np.array([width, height])
        matrix = _homography(corners, corners + jitter)
        ones = np.ones_like(rows)
        mapped = np.tensordot(matrix, np.stack([cols, rows, ones]), axes=1)
        src_cols = mapped[0] / mapped[2]
        src_rows = mapped[1] / mapped[2]
    else:  # distortion
        fields = []
        for _ in range(2):
            noise = gaussian_filter(rng.uniform(-1.0, 1.0, size=(height, width)),
                                    cfg.distortion_smoothing, mode="constant")
            peak = np.abs(noise).max()
            fields.append(noise / peak * magnitude if peak > 0 else noise)
        src_rows = rows + fields[0]
        src_cols = cols + fields[1]
    # arrondi : les transformations identité restent exactement sur la grille
    return np.round(src_rows, 9), np.round(src_cols, 9)


def augment(image: np.ndarray, kind: str, magnitude: float, seed: int,
            cfg: Optional[DatasetConfig] = None) -> np.ndarray:
    """
    Applique une augmentation géométrique à une image ``H×W×C`` dans [0, 1].

    Args:
        image (np.ndarray): Image source.
        kind (str): ``rotation`` (degrés), ``perspective`` (fraction du côté),
            ``shear`` (coefficient) ou ``distortion`` (pixels).
        magnitude (float): Amplitude, dans la plage de ``cfg`` (rotation
            jusqu'à 25° à 360° près, cisaillement 0.2, perspective 0.1,
            distorsion 3 px par défaut).
        seed (int): Graine des tirages internes (perspective, distorsion).

    Returns:
        np.ndarray: Image de même forme.

    Raises:
        ValueError: Type inconnu ou amplitude hors plage.
    """
    if kind not in KINDS:
        raise ValueError(f"augment : type inconnu {kind!r} (attendus : {', '.join(KINDS)})")
    cfg = cfg or DatasetConfig()
    _check_magnitude(kind, magnitude, cfg)
    image = np.asarray(image, dtype=np.float64)
    squeeze = image.ndim == 2
    if squeeze:
        image = image[:, :, None]
    rng = np.random.default_rng(seed)
    src_rows, src_cols = _source_coordinates(kind, float(magnitude), image.shape[:2], rng, cfg)
    channels = [
        map_coordinates(image[:, :, c], [src_rows, src_cols], order=1, mode="constant", cval=BACKGROUND)
        for c in range(image.shape[2])
    ]
    out = np.clip(np.stack(channels, axis=-1), 0.0, 1.0)
    return out[:, :, 0] if squeeze else out


def random_augment(image: np.ndarray, seed: int,
                   cfg: Optional[DatasetConfig] = None) -> Tuple[np.ndarray, str, float]:
    """
    Tire un type uniformément puis une amplitude uniforme dans sa plage.

    Returns:
        tuple: ``(image augmentée, type, amplitude)``.
    """
    cfg = cfg or DatasetConfig()
    rng = np.random.default_rng(seed)
    kind = KINDS[int(rng.integers(len(KINDS)))]
    if kind == "rotation":
        magnitude = rng.uniform(-cfg.max_rotation, cfg.max_rotation)
    elif kind == "shear":
        magnitude = rng.uniform(-cfg.max_shear, cfg.max_shear)
    elif kind == "perspective":
        magnitude = rng.uniform(0.0, cfg.max_perspective)
    else:
        magnitude = rng.uniform(0.0, cfg.max_distortion)
    sub_seed = int(rng.integers(2 ** 32))
    return augment(image, kind, float(magnitude), sub_seed, cfg), kind, float(magnitude)
