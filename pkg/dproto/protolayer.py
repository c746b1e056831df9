# -*- coding: utf-8 -*-
"""
protolayer.py

Masques de caractéristiques, prototypes et tête de classification.

Ce module définit :

- :class:`FeatureMask` : masque aléatoire figé ``H1×W1×D1`` à valeurs dans [0, 1] ;
- :class:`Prototype` et :class:`ClassifierHead` ;
- les calculs différentiables : vecteur masqué ``z_i = GAP(M_i ∘ F)``,
  similarité ``||z - p||²``, activation ``max_i ln((s_i + 1) / (s_i + ε))``
  et logits ``Σ_j w_j^c g_j`` ;
- les vérificateurs d'expressivité : dénombrement des prototypes « patch
  unitaire » et « patch rectangulaire » (formule fermée contre énumération)
  et construction des masques témoins qui les réalisent.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from itertools import product
from typing import List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from dproto import autodiff as ad
from dproto.autodiff import Tensor
from dproto.config import make_rng
from dproto.errors import ExpressivenessMismatchError, InvalidPlacementError, ShapeMismatchError

logger = logging.getLogger(__name__)


# ----------------------------------------------------------------------
#  TYPES
# ----------------------------------------------------------------------
@dataclass(frozen=True)
class FeatureMask:
    """
    Masque figé appliqué élément par élément à la carte ``F(x)``.

    ``id`` est l'indice (à partir de 0) dans le réservoir ; les témoins
    d'expressivité ont ``id = -1``. Le tableau ``values`` est en lecture seule.
    """
    id: int
    values: np.ndarray
    frozen: bool = True

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64, copy=True)
        if values.size and (values.min() < 0.0 or values.max() > 1.0):
            raise ValueError(f"Masque {self.id} : valeurs hors de [0, 1]")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.values.shape


@dataclass
class PrototypeSource:
    """Provenance enregistrée lors d'une projection."""
    image_id: int
    mask_ids: List[int]
    augmentations: int
    image_path: Optional[str] = None


@dataclass
class Prototype:
    """Vecteur ``p_j`` de dimension ``D1`` rattaché à une seule classe."""
    id: int
    vector: np.ndarray
    class_id: int
    source: Optional[PrototypeSource] = None


@dataclass
class ClassifierHead:
    """Poids ``w_h`` de forme ``(m, K)``."""
    weights: Tensor
    prototype_classes: np.ndarray = field(repr=False)

    @classmethod
    def initial(cls, prototype_classes: Sequence[int], num_classes: int) -> "ClassifierHead":
        """``w[u, v] = 1`` si le prototype ``v`` appartient à la classe ``u``, ``-0.5`` sinon."""
        classes = np.asarray(prototype_classes, dtype=np.int64)
        own = np.arange(num_classes)[:, None] == classes[None, :]
        weights = np.where(own, 1.0, -0.5)
        return cls(Tensor(weights, requires_grad=True), classes)

    @property
    def off_class(self) -> np.ndarray:
        """Masque booléen ``(m, K)`` des poids hors classe."""
        return np.arange(self.weights.shape[0])[:, None] != self.prototype_classes[None, :]


class ExpressivenessCount(NamedTuple):
    closed_form: int
    enumerated: int


# ----------------------------------------------------------------------
#  MASQUES
# ----------------------------------------------------------------------
def generate_feature_masks(n: int, shape: Tuple[int, int, int], seed: int) -> List[FeatureMask]:
    """
    Tire ``n`` masques i.i.d. uniformes sur [0, 1].

    Args:
        n (int): Nombre de masques (>= 1).
        shape (tuple): ``(H1, W1, D1)``.
        seed (int): Graine racine ; le même couple (n, seed) redonne les mêmes masques.

    Raises:
        ValueError: Si ``n < 1``.
    """
    if n < 1:
        raise ValueError(f"generate_feature_masks : n doit être >= 1 (reçu {n})")
    rng = make_rng(seed, "feature-masks")
    values = rng.uniform(0.0, 1.0, size=(n, *shape))
    return [FeatureMask(i, values[i]) for i in range(n)]


def stack_masks(masks: Sequence[FeatureMask]) -> np.ndarray:
    """Empile les masques en un tableau ``(n, H1, W1, D1)``."""
    if not masks:
        raise ValueError("Liste de masques vide")
    return np.stack([m.values for m in masks])


def _mask_values(mask: Union[FeatureMask, np.ndarray, Tensor]) -> np.ndarray:
    if isinstance(mask, FeatureMask):
        return mask.values
    return ad.as_tensor(mask).data


# ----------------------------------------------------------------------
#  VECTEURS, SIMILARITÉ, ACTIVATIONS
# ----------------------------------------------------------------------
def masked_feature(features, mask) -> Tensor:
    """
    ``z[d] = moyenne_{i,j} M[i,j,d] · F[i,j,d]``.

    Args:
        features: Carte ``H1×W1×D1``.
        mask: :class:`FeatureMask` ou tableau de même forme.

    Returns:
        Tensor: Vecteur ``(D1,)``.
    """
    features = ad.as_tensor(features)
    values = _mask_values(mask)
    if features.shape != values.shape or features.ndim != 3:
        raise ShapeMismatchError(f"masked_feature : carte {features.shape}, masque {values.shape}")
    z = ad.masked_gap(ad.reshape(features, (1, *features.shape)), values[None])
    return ad.reshape(z, (features.shape[2],))


def masked_features(features, masks: np.ndarray) -> Tensor:
    """Version par lot : ``(B, H1, W1, D1)`` et ``(n, H1, W1, D1)`` → ``(B, n, D1)``."""
    return ad.masked_gap(features, masks)


def similarity(z, prototype) -> Tensor:
    """``s = ||z - p||²`` (0 si et seulement si ``z == p``)."""
    vector = prototype.vector if isinstance(prototype, Prototype) else prototype
    z, p = ad.as_tensor(z), ad.as_tensor(vector)
    if z.shape[-1:] != p.shape[-1:]:
        raise ShapeMismatchError(f"similarity : dimensions {z.shape} et {p.shape}")
    return ad.sq_distance(z, p)


def log_activation(distances, epsilon: float) -> Tensor:
    """``ln((s + 1) / (s + ε))`` élément par élément."""
    return ad.log(ad.div(ad.add_scalar(distances, 1.0), ad.add_scalar(distances, epsilon)))


def prototype_activation(features, prototype, masks: Sequence[FeatureMask],
                         epsilon: float = 1e-12) -> Tuple[Tensor, int]:
    """
    Activation ``g = max_i ln((s_i + 1) / (s_i + ε))`` d'un prototype.

    Returns:
        tuple: ``(g, i*)`` où ``i*`` est l'indice du masque maximisant
        (le plus petit en cas d'égalité).

    Raises:
        ValueError: Si la liste de masques est vide.
    """
    if len(masks) == 0:
        raise ValueError("prototype_activation : liste de masques vide")
    features = ad.as_tensor(features)
    stacked = stack_masks(masks) if isinstance(masks[0], FeatureMask) else np.asarray(masks)
    z = masked_features(ad.reshape(features, (1, *features.shape)), stacked)
    z = ad.reshape(z, (stacked.shape[0], features.shape[-1]))
    scores = log_activation(similarity(z, prototype), epsilon)
    g = ad.reduce_max(scores, axis=0)
    return g, int(g.argmax)


class ActivationResult(NamedTuple):
    """Sorties de la couche de prototypes pour un lot."""
    z: Tensor             # (B, n, D1)
    distances: Tensor     # (B, n, K)
    min_distances: Tensor  # (B, K)
    nearest_mask: np.ndarray  # (B, K)
    activations: Tensor   # (B, K)


def prototype_layer(features: Tensor, masks: np.ndarray, prototypes: Tensor,
                    epsilon: float) -> ActivationResult:
    """
    Passe complète de la couche pour un lot.

    ``ln`` étant décroissante en ``s``, le maximum des activations est
    atteint au minimum des distances : on applique donc le log une seule
    fois, sur ``min_i s_i``.
    """
    z = masked_features(features, masks)
    batch, n, depth = z.shape
    k = prototypes.shape[0]
    distances = ad.sq_distance(
        ad.reshape(z, (batch, n, 1, depth)), ad.reshape(prototypes, (1, 1, k, depth))
    )
    nearest = ad.reduce_max(-distances, axis=1)
    min_distances = -nearest
    return ActivationResult(
        z=z,
        distances=distances,
        min_distances=min_distances,
        nearest_mask=nearest.argmax,
        activations=log_activation(min_distances, epsilon),
    )


def class_logits(features, prototypes, head: ClassifierHead, masks: Sequence[FeatureMask] = (),
                 epsilon: float = 1e-12, *, activations=None) -> Tensor:
    """
    Logits ``y_c = Σ_j w_h[c, j] · g_j(x)``.

    Les activations peuvent être fournies directement (``activations``,
    vecteur ``(K,)`` ou lot ``(B, K)``) ; sinon elles sont calculées à partir
    de la carte ``features`` et des masques.

    Raises:
        ShapeMismatchError: Si la tête ne correspond pas au nombre de prototypes.
    """
    if activations is None:
        proto_tensor = _prototype_matrix(prototypes)
        stacked = stack_masks(masks)
        features = ad.as_tensor(features)
        single = features.ndim == 3
        batch = ad.reshape(features, (1, *features.shape)) if single else features
        activations = prototype_layer(batch, stacked, proto_tensor, epsilon).activations
        if single:
            activations = ad.reshape(activations, (proto_tensor.shape[0],))
    activations = ad.as_tensor(activations)
    weights = head.weights
    if activations.shape[-1] != weights.shape[1]:
        raise ShapeMismatchError(
            f"class_logits : {activations.shape[-1]} activations pour une tête {weights.shape}"
        )
    if activations.ndim == 1:
        return ad.reshape(ad.matmul(weights, ad.reshape(activations, (-1, 1))), (weights.shape[0],))
    return ad.matmul(activations, ad.transpose(weights))


def _prototype_matrix(prototypes) -> Tensor:
    if isinstance(prototypes, Tensor):
        return prototypes
    if isinstance(prototypes, (list, tuple)) and prototypes and isinstance(prototypes[0], Prototype):
        return Tensor(np.stack([p.vector for p in prototypes]))
    return ad.as_tensor(prototypes)


# ----------------------------------------------------------------------
#  EXPRESSIVITÉ
# ----------------------------------------------------------------------
def count_unit_patch_prototypes(h1: int, w1: int) -> int:
    """
    Nombre de prototypes réalisables par un patch unitaire : ``H1 · W1``.

    Le résultat est recoupé par l'énumération des masques one-hot spatiaux.

    Raises:
        ValueError: Grille vide.
        ExpressivenessMismatchError: Désaccord formule / énumération.
    """
    if h1 < 1 or w1 < 1:
        raise ValueError(f"Grille invalide : {h1}x{w1}")
    closed = h1 * w1
    enumerated = len({frozenset([(u, v)]) for u, v in product(range(h1), range(w1))})
    if closed != enumerated:
        raise ExpressivenessMismatchError((h1, w1), closed, enumerated)
    return closed


def _rect_cells(u: int, v: int, h: int, w: int) -> frozenset:
    return frozenset(product(range(u, u + h), range(v, v + w)))


def count_rect_patch_prototypes(h1: int, w1: int) -> ExpressivenessCount:
    """
    Nombre de patchs rectangulaires ``h×w`` avec ``1 < hw < H1·W1``.

    Formule fermée : ``H1 W1 (H1 W1 + H1 + W1 - 3) / 4 - 1`` ; l'énumération
    construit chaque placement ``(h, w, u, v)`` et compte les ensembles de
    cellules distincts.

    Raises:
        ValueError: Si ``H1 · W1 < 2``.
        ExpressivenessMismatchError: Désaccord formule / énumération.
    """
    if h1 < 1 or w1 < 1 or h1 * w1 < 2:
        raise ValueError(f"count_rect_patch_prototypes : il faut H1·W1 >= 2 (reçu {h1}x{w1})")
    area = h1 * w1
    closed = area * (area + h1 + w1 - 3) // 4 - 1
    shapes = set()
    for h, w in product(range(1, h1 + 1), range(1, w1 + 1)):
        if not 1 < h * w < area:
            continue
        for u, v in product(range(h1 - h + 1), range(w1 - w + 1)):
            shapes.add(_rect_cells(u, v, h, w))
    result = ExpressivenessCount(closed, len(shapes))
    if result.closed_form != result.enumerated:
        raise ExpressivenessMismatchError((h1, w1), result.closed_form, result.enumerated)
    return result


WITNESS_STYLES = ("unit-patch", "rect-patch", "spatial-scalar")


def containment_witness(h1: int, w1: int, d1: int, style: str, *,
                        position: Tuple[int, int] = (0, 0),
                        size: Tuple[int, int] = (1, 1),
                        scalars=None) -> FeatureMask:
    """
    Masque non restreint qui reproduit un prototype restreint.

    - ``unit-patch`` : des 1 sur tous les canaux de la cellule ``position`` ;
    - ``rect-patch`` : des 1 sur le bloc ``size`` placé en ``position`` ;
    - ``spatial-scalar`` : un scalaire par cellule (``scalars``, tableau
      ``H1×W1`` ou nombre), constant sur les canaux.

    Appliqué par :func:`masked_feature`, le témoin redonne le prototype
    restreint divisé par ``H1 · W1`` (normalisation de la moyenne globale).

    Raises:
        InvalidPlacementError: Style inconnu ou placement hors de la grille.
    """
    if style not in WITNESS_STYLES:
        raise InvalidPlacementError(f"Style de témoin inconnu : {style!r}")
    values = np.zeros((h1, w1, d1))
    if style == "spatial-scalar":
        grid = np.broadcast_to(np.asarray(0.0 if scalars is None else scalars, dtype=np.float64), (h1, w1))
        if grid.min() < 0.0 or grid.max() > 1.0:
            raise InvalidPlacementError("spatial-scalar : coefficients hors de [0, 1]")
        values[:] = grid[:, :, None]
        return FeatureMask(-1, values)

    u, v = position
    h, w = (1, 1) if style == "unit-patch" else size
    if h < 1 or w < 1 or u < 0 or v < 0 or u + h > h1 or v + w > w1:
        raise InvalidPlacementError(
            f"{style} : bloc {h}x{w} en ({u}, {v}) hors de la grille {h1}x{w1}"
        )
    values[u:u + h, v:v + w, :] = 1.0
    return FeatureMask(-1, values)
