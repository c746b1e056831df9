# -*- coding: utf-8 -*-
"""
validation.py

Fonctions de validation simples pour les fichiers image.
Ce module vérifie l'existence du fichier, son extension et, si demandé,
ses dimensions :

- Seuls les formats PPM, PGM, PNG et JPEG sont considérés comme valides.
- Toute erreur de validation déclenche une exception explicite.

Module utilisé par la CLI et par le chargement des manifestes.
"""

import os
from typing import Optional, Tuple

from dproto.errors import DataError, MalformedImageError
from dproto.imageio import ImageFile

SUPPORTED_EXTENSIONS = (".ppm", ".pgm", ".png", ".jpg", ".jpeg")


def validate_image_file(file_path: str, expected_size: Optional[Tuple[int, int]] = None) -> bool:
    """
    Vérifie qu'un fichier image est valide pour le traitement.

    Cette fonction effectue trois vérifications successives :

    1. **Présence sur le disque** : le chemin doit pointer vers un fichier existant.
    2. **Extension** : elle doit figurer dans :data:`SUPPORTED_EXTENSIONS`.
    3. **Dimensions** (facultatif) : l'image doit mesurer ``expected_size``
       (``(H, W)``) ; l'en-tête est lu sans décoder les pixels.

    Args:
        file_path (str): Chemin du fichier.
        expected_size (tuple | None): Taille ``(H, W)`` attendue.

    Returns:
        bool: True si toutes les vérifications passent.

    Raises:
        DataError: Fichier absent ou extension non supportée.
        MalformedImageError: En-tête invalide ou taille inattendue.
    """
    if not os.path.exists(file_path):
        raise DataError(f"Le fichier '{file_path}' n'existe pas.")
    if not os.path.isfile(file_path):
        raise DataError(f"Le chemin '{file_path}' n'est pas un fichier.")
    ext = os.path.splitext(file_path)[1].lower()
    if ext not in SUPPORTED_EXTENSIONS:
        raise DataError(f"Format non supporté pour '{file_path}'. Formats acceptés : PPM, PGM, PNG, JPEG.")
    if expected_size is not None:
        size = ImageFile.from_path(file_path).size()
        if tuple(size) != tuple(expected_size):
            raise MalformedImageError(
                f"'{file_path}' mesure {size[0]}x{size[1]}, attendu {expected_size[0]}x{expected_size[1]}"
            )
    return True
