# -*- coding: utf-8 -*-
"""
errors.py

Exceptions du paquet ``dproto``.

Toutes les erreurs levées volontairement par la bibliothèque héritent de
:class:`DProtoError`, ce qui permet à la CLI de les distinguer des bugs et
de choisir le bon code de sortie :

- 2 : erreur d'usage ou de configuration (:class:`ConfigError`) ;
- 3 : erreur de données (:class:`DataError` et ses sous-classes) ;
- 4 : divergence numérique (:class:`DivergenceError`, :class:`NonFiniteError`,
  :class:`ExpressivenessMismatchError`).
"""

from __future__ import annotations


class DProtoError(Exception):
    """Classe de base de toutes les erreurs du projet."""


class ShapeMismatchError(DProtoError, ValueError):
    """Formes de tenseurs incompatibles pour une opération."""


class ConfigError(DProtoError, ValueError):
    """Configuration invalide (clé inconnue, valeur hors bornes, invariant violé)."""


class UntrainedModelError(DProtoError, ValueError):
    """Opération qui exige un modèle entraîné appelée sur un modèle vierge."""


class InvalidPlacementError(DProtoError, ValueError):
    """Placement d'un masque témoin en dehors de la grille."""


class DataError(DProtoError):
    """Erreur liée aux données sur disque."""


class ManifestError(DataError):
    """Manifeste absent, mal formé, de version inconnue ou incohérent."""


class MalformedImageError(DataError):
    """Fichier image tronqué ou en-tête PPM/PGM invalide."""


class DivergenceError(DProtoError, ArithmeticError):
    """La perte d'entraînement est devenue non finie ou a explosé."""


class NonFiniteError(DProtoError, ArithmeticError):
    """Évaluation non finie (NaN/Inf) là où une valeur finie est requise."""


class ExpressivenessMismatchError(DProtoError, ArithmeticError):
    """La formule fermée et l'énumération exhaustive ne donnent pas le même compte."""

    def __init__(self, grid, closed_form: int, enumerated: int):
        self.grid = tuple(grid)
        self.closed_form = closed_form
        self.enumerated = enumerated
        super().__init__(
            f"Grille {self.grid} : formule fermée = {closed_form}, "
            f"énumération = {enumerated}"
        )
