# -*- coding: utf-8 -*-
"""
directory_scanner.py

Recherche des fichiers image d'une arborescence, pour l'ingestion de
dossiers externes.

Un fichier est retenu s'il passe trois filtres successifs :

1. son extension fait partie de :attr:`DirectoryScanner.SUPPORTED_EXTS` ;
2. ``mimetypes`` lui associe un type de :attr:`DirectoryScanner.SUPPORTED_MIMES` ;
3. Pillow parvient à l'identifier (filtre désactivable).

Les entrées cachées (nom commençant par un point) sont écartées par défaut.
Le parcours est trié : deux analyses du même dossier rendent la même liste.
"""

from __future__ import annotations

import logging
import mimetypes
import os
from collections import Counter
from pathlib import Path
from typing import Iterator, List, Optional, Set

from PIL import Image, UnidentifiedImageError

logger = logging.getLogger(__name__)

# certaines plateformes ne connaissent pas les types PNM
mimetypes.add_type("image/x-portable-pixmap", ".ppm")
mimetypes.add_type("image/x-portable-graymap", ".pgm")


class DirectoryScanner:
    """
    Scanner récursif de fichiers image.

    Attributes:
        include_hidden (bool): Parcourir aussi les entrées cachées.
        sanity_check (bool): Faire identifier chaque fichier par Pillow.
        skipped (Counter): Nombre de fichiers écartés par motif lors de la
            dernière analyse (``"extension"``, ``"mime"``, ``"illisible"``).
    """

    SUPPORTED_EXTS: Set[str] = {".ppm", ".pgm", ".png", ".jpg", ".jpeg"}

    SUPPORTED_MIMES: Set[str] = {
        "image/png",
        "image/jpeg",
        "image/x-portable-pixmap",
        "image/x-portable-graymap",
    }

    def __init__(self, include_hidden: bool = False, sanity_check_with_pillow: bool = True):
        self.include_hidden = include_hidden
        self.sanity_check = sanity_check_with_pillow
        self.skipped: Counter = Counter()

    def rejection(self, path: Path) -> Optional[str]:
        """
        Motif pour lequel ``path`` serait écarté, ou ``None`` s'il est retenu.
        """
        if path.suffix.lower() not in self.SUPPORTED_EXTS:
            return "extension"
        if mimetypes.guess_type(path.name)[0] not in self.SUPPORTED_MIMES:
            return "mime"
        if self.sanity_check:
            try:
                with Image.open(path) as img:
                    img.verify()
            except (UnidentifiedImageError, OSError, SyntaxError):
                logger.warning("Image illisible ignorée : %s", path)
                return "illisible"
        return None

    def accepts(self, path: str | Path) -> bool:
        return self.rejection(Path(path)) is None

    def iter_files(self, root: str | Path) -> Iterator[Path]:
        """
        Parcourt ``root`` et rend les chemins absolus des images retenues.

        Un dossier inexistant ne rend rien. Les sous-dossiers et les fichiers
        sont visités dans l'ordre alphabétique.
        """
        self.skipped.clear()
        top = Path(root)
        if not top.is_dir():
            return
        for current, subdirs, names in os.walk(top):
            if not self.include_hidden:
                subdirs[:] = [d for d in subdirs if not d.startswith(".")]
                names = [n for n in names if not n.startswith(".")]
            subdirs.sort()
            for name in sorted(names):
                candidate = Path(current) / name
                reason = self.rejection(candidate)
                if reason:
                    self.skipped[reason] += 1
                else:
                    yield candidate.resolve()
        if self.skipped:
            logger.debug("Fichiers écartés dans %s : %s", top, dict(self.skipped))

    def scan(self, root: str | Path) -> List[str]:
        """Liste (triée) des chemins retenus, sous forme de chaînes."""
        return [str(p) for p in self.iter_files(root)]
