# -*- coding: utf-8 -*-
"""
dataset.py

Jeux de données étiquetés avec régions de vérité terrain.

Ce module permet de :

- générer un jeu synthétique de formes colorées (:func:`generate`) : chaque
  image contient exactement une forme déterminant la classe, dont le masque
  de pixels est enregistré comme vérité terrain, plus des formes parasites
  de couleurs neutres communes à toutes les classes ;
- ingérer un dossier d'images externe organisé en sous-dossiers de classes
  (:func:`ingest_folder`) ;
- recharger un manifeste (:func:`load_manifest`) et augmenter une image
  (:func:`augment`, :func:`random_augment`).

Format de sortie : ``images/NNNNN.ppm`` (P6), ``masks/NNNNN.pgm`` (P5) et
``manifest.json``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
from PIL import Image, ImageDraw

from dproto.augmentation import augment, random_augment  # noqa: F401  (API du module)
from dproto.config import DatasetConfig, derive_seed, make_rng
from dproto.directory_scanner import DirectoryScanner
from dproto.errors import DataError
from dproto.imageio import read_image, to_uint8, write_pgm, write_ppm
from dproto.manifest import Manifest, ManifestEntry, load_manifest, write_manifest  # noqa: F401
from dproto.parallel import parallel_map

logger = logging.getLogger(__name__)

#: Vocabulaire des classes : (forme, couleur RVB 8 bits).
CLASS_SHAPES: List[Tuple[str, Tuple[int, int, int]]] = [
    ("square", (220, 40, 40)),
    ("circle", (40, 180, 60)),
    ("triangle", (40, 80, 220)),
    ("cross", (230, 200, 30)),
]

#: Couleurs neutres des formes parasites.
DISTRACTOR_COLORS: List[Tuple[int, int, int]] = [(40, 40, 40), (215, 215, 215)]

BACKGROUND_LEVEL = 128  # 0.5 après quantification


@dataclass
class SyntheticSpec:
    """
    Paramètres du jeu synthétique.

    Attributes:
        classes: Nombre de classes (1 à 4).
        per_class: Images par classe.
        image_size: Côté des images carrées.
        clutter: Formes parasites par image.
        noise: Écart-type du bruit gaussien ajouté.
        seed: Graine du générateur.
        test_fraction: Part de chaque classe envoyée en test.
    """
    classes: int = 4
    per_class: int = 200
    image_size: int = 56
    clutter: int = 2
    noise: float = 0.02
    seed: int = 42
    test_fraction: float = 0.2

    @classmethod
    def from_config(cls, cfg: DatasetConfig, seed: int) -> "SyntheticSpec":
        return cls(cfg.classes, cfg.per_class, cfg.image_size, cfg.clutter, cfg.noise, seed,
                   cfg.test_fraction)

    def validate(self) -> None:
        if not 1 <= self.classes <= len(CLASS_SHAPES):
            raise ValueError(f"classes doit être entre 1 et {len(CLASS_SHAPES)} (reçu {self.classes})")
        if self.per_class < 1 or self.image_size < 16:
            raise ValueError("per_class >= 1 et image_size >= 16 requis")
        if self.clutter < 0 or self.noise < 0 or not 0 <= self.test_fraction < 1:
            raise ValueError("clutter >= 0, noise >= 0 et test_fraction dans [0, 1[ requis")


# ----------------------------------------------------------------------
#  RENDU DES FORMES
# ----------------------------------------------------------------------
def _outline(kind: str, cx: float, cy: float, size: float):
    half = size / 2.0
    if kind == "square":
        return "rectangle", [cx - half, cy - half, cx + half, cy + half]
    if kind == "circle":
        return "ellipse", [cx - half, cy - half, cx + half, cy + half]
    if kind == "triangle":
        return "polygon", [(cx, cy - half), (cx + half, cy + half), (cx - half, cy + half)]
    if kind == "cross":
        bar = size / 6.0
        return "cross", [[cx - half, cy - bar, cx + half, cy + bar],
                         [cx - bar, cy - half, cx + bar, cy + half]]
    raise ValueError(f"Forme inconnue : {kind!r}")


def draw_shape(draw: ImageDraw.ImageDraw, kind: str, cx: float, cy: float, size: float, fill) -> None:
    """Dessine une forme pleine centrée en ``(cx, cy)`` de côté ``size``."""
    primitive, coords = _outline(kind, cx, cy, size)
    if primitive == "rectangle":
        draw.rectangle(coords, fill=fill)
    elif primitive == "ellipse":
        draw.ellipse(coords, fill=fill)
    elif primitive == "polygon":
        draw.polygon(coords, fill=fill)
    else:
        for bar in coords:
            draw.rectangle(bar, fill=fill)


def shape_mask(shape: Dict, image_size: int) -> np.ndarray:
    """Re-rendu booléen ``H×W`` d'une forme à partir de ses paramètres enregistrés."""
    canvas = Image.new("L", (image_size, image_size), 0)
    draw_shape(ImageDraw.Draw(canvas), shape["kind"], shape["cx"], shape["cy"], shape["size"], 255)
    return np.asarray(canvas) > 127


def _place(rng: np.random.Generator, image_size: int, low: float, high: float) -> Tuple[float, float, float]:
    size = float(round(rng.uniform(low, high) * image_size))
    half = size / 2.0
    # contenu entièrement dans le cadre
    cx = float(round(rng.uniform(half, image_size - 1 - half)))
    cy = float(round(rng.uniform(half, image_size - 1 - half)))
    return cx, cy, size


def render_sample(spec: SyntheticSpec, label: int, index: int) -> Tuple[np.ndarray, np.ndarray, Dict]:
    """
    Produit une image, son masque de vérité terrain et les paramètres de forme.

    Le tirage ne dépend que de ``(spec.seed, index)`` : les images peuvent être
    rendues dans n'importe quel ordre.
    """
    rng = make_rng(spec.seed, "image", index)
    size = spec.image_size
    canvas = Image.new("RGB", (size, size), (BACKGROUND_LEVEL,) * 3)
    draw = ImageDraw.Draw(canvas)
    for _ in range(spec.clutter):
        kind = CLASS_SHAPES[int(rng.integers(len(CLASS_SHAPES)))][0]
        color = DISTRACTOR_COLORS[int(rng.integers(len(DISTRACTOR_COLORS)))]
        cx, cy, s = _place(rng, size, 0.12, 0.2)
        draw_shape(draw, kind, cx, cy, s, color)

    kind, color = CLASS_SHAPES[label]
    cx, cy, s = _place(rng, size, 0.25, 0.4)
    draw_shape(draw, kind, cx, cy, s, color)
    shape = {"kind": kind, "cx": cx, "cy": cy, "size": s, "color": list(color)}
    mask = shape_mask(shape, size)

    image = np.asarray(canvas, dtype=np.float64) / 255.0
    if spec.noise > 0:
        image = np.clip(image + rng.normal(0.0, spec.noise, size=image.shape), 0.0, 1.0)
    return image, mask, shape


def _split_assignments(labels: List[int], test_fraction: float, seed: int) -> List[str]:
    splits = ["train"] * len(labels)
    by_class: Dict[int, List[int]] = {}
    for i, label in enumerate(labels):
        by_class.setdefault(label, []).append(i)
    for label, indices in sorted(by_class.items()):
        order = make_rng(seed, "split", label).permutation(len(indices))
        n_test = int(round(len(indices) * test_fraction))
        for k in order[:n_test]:
            splits[indices[k]] = "test"
    return splits


def _prepare_out_dir(out_dir: Path, force: bool) -> None:
    if out_dir.exists() and any(out_dir.iterdir()) and not force:
        raise DataError(f"Le dossier '{out_dir}' n'est pas vide (utilisez --force)")
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)


# ----------------------------------------------------------------------
#  GÉNÉRATION
# ----------------------------------------------------------------------
def generate(spec: SyntheticSpec, out_dir: str | Path, force: bool = False, threads: int = 1) -> Manifest:
    """
    Génère le jeu synthétique dans ``out_dir``.

    Args:
        spec (SyntheticSpec): Paramètres.
        out_dir (str | Path): Dossier de sortie.
        force (bool): Autorise l'écriture dans un dossier non vide.
        threads (int): Fils de rendu ; la sortie ne dépend pas de ce nombre.

    Returns:
        Manifest: Le manifeste écrit dans ``out_dir/manifest.json``.

    Raises:
        ValueError: Spécification invalide.
        DataError: Dossier non vide sans ``force``.
    """
    spec.validate()
    out_dir = Path(out_dir)
    _prepare_out_dir(out_dir, force)

    labels = [c for c in range(spec.classes) for _ in range(spec.per_class)]
    splits = _split_assignments(labels, spec.test_fraction, spec.seed)

    def write_one(index: int) -> ManifestEntry:
        image, mask, shape = render_sample(spec, labels[index], index)
        image_rel = f"images/{index:05d}.ppm"
        mask_rel = f"masks/{index:05d}.pgm"
        write_ppm(out_dir / image_rel, image)
        write_pgm(out_dir / mask_rel, mask.astype(np.float64))
        return ManifestEntry(index, image_rel, labels[index], splits[index], mask_rel, shape)

    names = [CLASS_SHAPES[c][0] for c in range(spec.classes)]
    manifest = Manifest(out_dir, names, (spec.image_size, spec.image_size, 3), spec.seed, "synthetic")
    for entry in parallel_map(write_one, range(len(labels)), threads):
        manifest.add_entry(entry)
    write_manifest(manifest, out_dir / "manifest.json")
    logger.info("%d images générées dans %s", len(manifest), out_dir)
    return manifest


# ----------------------------------------------------------------------
#  INGESTION
# ----------------------------------------------------------------------
def _mask_sibling(image_path: Path) -> Optional[Path]:
    for candidate in sorted(image_path.parent.glob(f"{image_path.stem}_mask.*")):
        return candidate
    return None


def ingest_folder(root: str | Path, out_dir: str | Path, image_size: int = 56,
                  test_fraction: float = 0.2, seed: int = 42, force: bool = False) -> Manifest:
    """
    Convertit un dossier ``root/<classe>/*.png|jpg|ppm`` en jeu de données.

    Les noms de classes sont les noms des sous-dossiers (ordre alphabétique).
    Un fichier ``<nom>_mask.<ext>`` voisin d'une image est pris comme masque
    de vérité terrain (seuil à mi-niveau après redimensionnement).

    Raises:
        DataError: Aucun sous-dossier de classe ou classe sans image.
    """
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"Le dossier '{root}' n'existe pas.")
    class_dirs = sorted(d for d in root.iterdir() if d.is_dir() and not d.name.startswith("."))
    if not class_dirs:
        raise DataError(f"Aucun sous-dossier de classe dans '{root}'")

    scanner = DirectoryScanner()
    samples: List[Tuple[int, Path]] = []
    for label, class_dir in enumerate(class_dirs):
        files = [p for p in scanner.iter_files(class_dir) if not p.stem.endswith("_mask")]
        if not files:
            raise DataError(f"La classe '{class_dir.name}' ne contient aucune image")
        samples.extend((label, p) for p in files)

    out_dir = Path(out_dir)
    _prepare_out_dir(out_dir, force)
    splits = _split_assignments([label for label, _ in samples], test_fraction, seed)
    manifest = Manifest(out_dir, [d.name for d in class_dirs], (image_size, image_size, 3), seed, "ingest")
    for index, ((label, path), split) in enumerate(zip(samples, splits)):
        with Image.open(path) as img:
            resized = img.convert("RGB").resize((image_size, image_size), Image.BILINEAR)
        image_rel = f"images/{index:05d}.ppm"
        resized.save(out_dir / image_rel, format="PPM")
        mask_rel = None
        mask_path = _mask_sibling(path)
        if mask_path is not None:
            mask = read_image(mask_path, mode="L")
            mask_img = Image.fromarray(to_uint8(mask)).resize((image_size, image_size), Image.NEAREST)
            mask_rel = f"masks/{index:05d}.pgm"
            write_pgm(out_dir / mask_rel, (np.asarray(mask_img) > 127).astype(np.float64))
        manifest.add_entry(ManifestEntry(index, image_rel, label, split, mask_rel,
                                         {"source": str(path.relative_to(root))}))
    write_manifest(manifest, out_dir / "manifest.json")
    logger.info("%d images ingérées depuis %s", len(manifest), root)
    return manifest
