# -*- coding: utf-8 -*-
"""
manifest.py

Gestion des manifestes de jeux de données.

Ce module fournit :

- une classe :class:`ManifestEntry` représentant une image étiquetée
  (chemin, étiquette, masque de vérité terrain, partition, paramètres de forme) ;
- une classe :class:`Manifest` représentant la liste ordonnée des entrées,
  avec chargement paresseux des images ;
- :func:`write_manifest` et :func:`load_manifest` pour la sérialisation
  ``manifest.json`` (format versionné, chemins relatifs au dossier du manifeste).

Schéma (version 1) ::

    {
      "format_version": 1,
      "generator": "synthetic" | "ingest",
      "seed": 42,
      "image_size": [56, 56, 3],
      "class_names": ["square", ...],
      "entries": [
        {"id": 0, "image": "images/00000.ppm", "label": 0,
         "mask": "masks/00000.pgm", "split": "train", "shape": {...}}
      ]
    }
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from dproto.errors import DataError, ManifestError
from dproto.imageio import read_image
from dproto.validation import validate_image_file

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
SPLITS = ("train", "test")


@dataclass
class ManifestEntry:
    """
    Une image du jeu de données.

    ``image`` et ``mask`` sont relatifs au dossier du manifeste ; ``mask``
    vaut None quand aucune vérité terrain n'existe.
    """
    id: int
    image: str
    label: int
    split: str
    mask: Optional[str] = None
    shape: Dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "id": self.id,
            "image": self.image,
            "label": self.label,
            "mask": self.mask,
            "split": self.split,
            "shape": self.shape,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ManifestEntry":
        try:
            return cls(
                id=int(data["id"]),
                image=str(data["image"]),
                label=int(data["label"]),
                split=str(data["split"]),
                mask=data.get("mask"),
                shape=dict(data.get("shape") or {}),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise ManifestError(f"Entrée de manifeste invalide {data!r} : {e}") from None


class Manifest:
    """
    Liste ordonnée d'entrées, avec les métadonnées du jeu de données.

    Les images ne sont décodées qu'à la demande (:meth:`load_image`).
    """

    def __init__(self, root: str | Path, class_names: Sequence[str], image_size: Tuple[int, int, int],
                 seed: Optional[int] = None, generator: str = "synthetic"):
        self.root = Path(root)
        self.class_names = list(class_names)
        self.image_size = tuple(int(v) for v in image_size)
        self.seed = seed
        self.generator = generator
        self.entries: List[ManifestEntry] = []

    def add_entry(self, entry: ManifestEntry) -> None:
        if not isinstance(entry, ManifestEntry):
            raise TypeError("entry doit être une instance de ManifestEntry")
        self.entries.append(entry)

    def split(self, name: str) -> List[ManifestEntry]:
        return [e for e in self.entries if e.split == name]

    def labels(self, split: Optional[str] = None) -> List[int]:
        entries = self.entries if split is None else self.split(split)
        return [e.label for e in entries]

    def image_path(self, entry: ManifestEntry) -> Path:
        return self.root / entry.image

    def load_image(self, entry: ManifestEntry) -> np.ndarray:
        return read_image(self.image_path(entry), mode="RGB")

    def load_mask(self, entry: ManifestEntry) -> Optional[np.ndarray]:
        if entry.mask is None:
            return None
        return read_image(self.root / entry.mask, mode="L") > 0.5

    def arrays(self, split: Optional[str] = None) -> Tuple[np.ndarray, np.ndarray, List[ManifestEntry]]:
        """
        Charge une partition en mémoire.

        Returns:
            tuple: ``(images (N, H, W, C), étiquettes (N,), entrées)``.
        """
        entries = self.entries if split is None else self.split(split)
        if not entries:
            return np.zeros((0, *self.image_size)), np.zeros(0, dtype=np.int64), []
        images = np.stack([self.load_image(e) for e in entries])
        labels = np.array([e.label for e in entries], dtype=np.int64)
        return images, labels, entries

    def to_dict(self) -> Dict[str, Any]:
        return {
            "format_version": FORMAT_VERSION,
            "generator": self.generator,
            "seed": self.seed,
            "image_size": list(self.image_size),
            "class_names": self.class_names,
            "entries": [e.to_dict() for e in self.entries],
        }

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[ManifestEntry]:
        return iter(self.entries)

    def __getitem__(self, index: int) -> ManifestEntry:
        return self.entries[index]

    def __repr__(self) -> str:
        counts = {s: len(self.split(s)) for s in SPLITS}
        return f"Manifest(root='{self.root}', entries={len(self)}, train={counts['train']}, test={counts['test']})"


def write_manifest(manifest: Manifest, output_file: str | Path) -> None:
    """
    Écrit ``manifest.json`` (clés triées, indentation fixe : sortie stable).
    """
    text = json.dumps(manifest.to_dict(), indent=2, sort_keys=True, ensure_ascii=False)
    Path(output_file).write_text(text + "\n", encoding="utf-8")
    logger.info("Manifeste écrit : %s (%d entrée(s))", output_file, len(manifest))


def load_manifest(path: str | Path, validate_files: bool = True) -> Manifest:
    """
    Charge et valide un manifeste.

    Vérifie la version, l'unicité des identifiants et des chemins, les
    partitions, les étiquettes et, si ``validate_files`` est vrai, que chaque
    image et chaque masque existent et ont la taille déclarée.

    Args:
        path (str | Path): Fichier ``manifest.json`` ou son dossier.

    Raises:
        ManifestError: Manifeste mal formé ou incohérent.
        DataError: Fichier référencé absent (le chemin est cité).
        MalformedImageError: Image tronquée ou de mauvaise taille.
    """
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ManifestError(f"Manifeste introuvable : {path}") from None
    except json.JSONDecodeError as e:
        raise ManifestError(f"Manifeste JSON invalide ({path}) : {e}") from None

    version = data.get("format_version")
    if version != FORMAT_VERSION:
        raise ManifestError(f"{path} : version {version!r} non prise en charge (attendu {FORMAT_VERSION})")
    try:
        manifest = Manifest(path.parent, data["class_names"], data["image_size"],
                            data.get("seed"), data.get("generator", "synthetic"))
    except (KeyError, TypeError, ValueError) as e:
        raise ManifestError(f"{path} : champ obligatoire manquant ou invalide ({e})") from None

    seen_ids, seen_paths = set(), set()
    for raw in data.get("entries", []):
        entry = ManifestEntry.from_dict(raw)
        if entry.id in seen_ids or entry.image in seen_paths:
            raise ManifestError(f"{path} : entrée dupliquée (id {entry.id}, {entry.image})")
        if entry.split not in SPLITS:
            raise ManifestError(f"{path} : partition inconnue {entry.split!r} pour l'entrée {entry.id}")
        if not 0 <= entry.label < len(manifest.class_names):
            raise ManifestError(f"{path} : étiquette {entry.label} hors de [0, {len(manifest.class_names)})")
        seen_ids.add(entry.id)
        seen_paths.add(entry.image)
        manifest.add_entry(entry)

    if validate_files:
        expected = manifest.image_size[:2]
        for entry in manifest:
            for rel in (entry.image, entry.mask):
                if rel is None:
                    continue
                target = manifest.root / rel
                if not target.exists():
                    raise DataError(f"Fichier référencé par le manifeste introuvable : {target}")
                validate_image_file(str(target), expected)
    logger.info("Manifeste chargé : %r", manifest)
    return manifest
