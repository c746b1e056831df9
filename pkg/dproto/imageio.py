# -*- coding: utf-8 -*-
"""
imageio.py

Lecture et écriture des fichiers image du projet.

Ce module définit :

- une structure :class:`PNMHeader` décrivant l'en-tête d'un fichier PPM/PGM ;
- une classe abstraite :class:`ImageFile` pour factoriser l'interface commune ;
- les implémentations concrètes : :class:`PPMImageFile` (P6, couleur),
  :class:`PGMImageFile` (P5, niveaux de gris) et :class:`RasterImageFile`
  (PNG/JPEG, lecture seule, utilisée par l'ingestion de dossiers).

Les pixels sont décodés et encodés par Pillow. Pour les formats PNM, l'en-tête
est d'abord validé à la main afin de signaler précisément l'octet où un
fichier tronqué s'arrête.
"""

from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass
from pathlib import Path
import logging
from typing import Dict, Optional, Type

import numpy as np
from PIL import Image

from dproto.errors import MalformedImageError

logger = logging.getLogger(__name__)

_WHITESPACE = b" \t\r\n"


@dataclass
class PNMHeader:
    """En-tête d'un fichier PNM binaire."""
    magic: str
    width: int
    height: int
    maxval: int
    data_offset: int

    @property
    def channels(self) -> int:
        return 3 if self.magic == "P6" else 1

    @property
    def payload_size(self) -> int:
        depth = 1 if self.maxval < 256 else 2
        return self.width * self.height * self.channels * depth


def parse_pnm_header(data: bytes, path: str = "<mémoire>") -> PNMHeader:
    """
    Analyse l'en-tête P5/P6 et vérifie la taille de la charge utile.

    Args:
        data (bytes): Contenu complet du fichier.
        path (str): Chemin, pour les messages d'erreur.

    Returns:
        PNMHeader: En-tête décodé.

    Raises:
        MalformedImageError: Nombre magique inconnu, champ invalide ou
            fichier tronqué (le message donne l'octet fautif).
    """
    if len(data) < 2:
        raise MalformedImageError(f"{path} : en-tête tronqué à l'octet {len(data)}")
    magic = data[:2].decode("ascii", errors="replace")
    if magic not in ("P5", "P6"):
        raise MalformedImageError(f"{path} : nombre magique {magic!r} à l'octet 0 (attendu P5 ou P6)")

    pos = 2
    values = []
    while len(values) < 3:
        # blancs et commentaires
        while pos < len(data) and (data[pos] in _WHITESPACE or data[pos:pos + 1] == b"#"):
            if data[pos:pos + 1] == b"#":
                end = data.find(b"\n", pos)
                pos = len(data) if end < 0 else end + 1
            else:
                pos += 1
        start = pos
        while pos < len(data) and data[pos] not in _WHITESPACE:
            pos += 1
        if start == pos:
            raise MalformedImageError(f"{path} : en-tête tronqué à l'octet {pos}")
        token = data[start:pos]
        if not token.isdigit():
            raise MalformedImageError(f"{path} : champ d'en-tête invalide {token!r} à l'octet {start}")
        values.append(int(token))

    if pos >= len(data):
        raise MalformedImageError(f"{path} : en-tête tronqué à l'octet {pos}")
    pos += 1  # un seul blanc avant les données
    width, height, maxval = values
    if width < 1 or height < 1 or not 0 < maxval < 65536:
        raise MalformedImageError(f"{path} : dimensions {width}x{height} ou maxval {maxval} invalides")
    header = PNMHeader(magic, width, height, maxval, pos)
    expected = pos + header.payload_size
    if len(data) < expected:
        raise MalformedImageError(
            f"{path} : fichier tronqué à l'octet {len(data)} (attendu {expected} octets)"
        )
    return header


def to_uint8(array: np.ndarray) -> np.ndarray:
    return np.round(np.clip(np.asarray(array, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


class ImageFile(ABC):
    """
    Classe abstraite de base pour représenter un fichier image.

    Les implémentations concrètes savent lire l'image en tableau ``float64``
    dans [0, 1] et, pour les formats PNM, l'écrire.
    """

    #: Extensions prises en charge par la classe.
    EXTENSIONS: tuple = ()

    def __init__(self, path: str | Path):
        self.path = Path(path)

    @abstractmethod
    def read(self) -> np.ndarray:
        """
        Décode l'image.

        Returns:
            np.ndarray: ``H×W×3`` (couleur) ou ``H×W`` (niveaux de gris), dans [0, 1].

        Raises:
            MalformedImageError: Fichier illisible.
        """
        raise NotImplementedError

    def write(self, array: np.ndarray) -> None:
        raise MalformedImageError(f"{self.path} : écriture non prise en charge pour ce format")

    def size(self) -> tuple:
        """``(H, W)`` sans décoder les pixels."""
        with Image.open(self.path) as img:
            return img.height, img.width

    @staticmethod
    def from_path(path: str | Path) -> "ImageFile":
        """
        Fabrique l'implémentation concrète appropriée à partir de l'extension.

        Raises:
            MalformedImageError: Extension non prise en charge.
        """
        p = Path(path)
        ext = p.suffix.lower()
        for cls in _REGISTRY.values():
            if ext in cls.EXTENSIONS:
                return cls(p)
        raise MalformedImageError(f"Format non supporté pour {p} (attendu .ppm, .pgm, .png ou .jpg)")


class PNMImageFile(ImageFile):
    """Base des formats PNM binaires (P5/P6) ; la lecture accepte les deux."""

    MODE = "RGB"

    def header(self) -> PNMHeader:
        try:
            data = self.path.read_bytes()
        except FileNotFoundError:
            raise MalformedImageError(f"Fichier image introuvable : {self.path}") from None
        return parse_pnm_header(data, str(self.path))

    def size(self) -> tuple:
        header = self.header()
        return header.height, header.width

    def read(self) -> np.ndarray:
        header = self.header()
        try:
            with Image.open(self.path) as img:
                pixels = np.asarray(img, dtype=np.float64)
        except OSError as e:
            raise MalformedImageError(f"{self.path} : décodage impossible ({e})") from None
        # Pillow ramène les PNM 8 bits sur 0..255
        return pixels / (255.0 if header.maxval < 256 else float(header.maxval))

    def write(self, array: np.ndarray) -> None:
        array = np.asarray(array)
        if self.MODE == "L" and array.ndim == 3:
            array = array[:, :, 0]
        if self.MODE == "RGB" and array.ndim == 2:
            array = np.repeat(array[:, :, None], 3, axis=2)
        Image.fromarray(to_uint8(array), mode=self.MODE).save(self.path, format="PPM")


class PPMImageFile(PNMImageFile):
    EXTENSIONS = (".ppm",)
    MODE = "RGB"


class PGMImageFile(PNMImageFile):
    EXTENSIONS = (".pgm",)
    MODE = "L"


class RasterImageFile(ImageFile):
    """PNG/JPEG : lecture seule, convertie en RVB."""

    EXTENSIONS = (".png", ".jpg", ".jpeg")

    def read(self) -> np.ndarray:
        try:
            with Image.open(self.path) as img:
                return np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
        except FileNotFoundError:
            raise MalformedImageError(f"Fichier image introuvable : {self.path}") from None
        except OSError as e:
            raise MalformedImageError(f"{self.path} : décodage impossible ({e})") from None


_REGISTRY: Dict[str, Type[ImageFile]] = {
    "ppm": PPMImageFile,
    "pgm": PGMImageFile,
    "raster": RasterImageFile,
}


def read_image(path: str | Path, mode: Optional[str] = None) -> np.ndarray:
    """
    Lit une image ; ``mode="RGB"`` force 3 canaux, ``mode="L"`` un seul.
    """
    array = ImageFile.from_path(path).read()
    if mode == "RGB" and array.ndim == 2:
        array = np.repeat(array[:, :, None], 3, axis=2)
    elif mode == "L" and array.ndim == 3:
        array = array.mean(axis=2)
    return array


def write_ppm(path: str | Path, array: np.ndarray) -> None:
    """Écrit une image couleur P6 (valeurs dans [0, 1])."""
    PPMImageFile(path).write(array)


def write_pgm(path: str | Path, array: np.ndarray) -> None:
    """Écrit une image en niveaux de gris P5, quelle que soit l'extension."""
    PGMImageFile(path).write(array)
