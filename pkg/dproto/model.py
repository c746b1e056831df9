# -*- coding: utf-8 -*-
"""
model.py

Assemblage du classifieur à prototypes : backbone, réservoir de masques,
prototypes et tête linéaire.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from dproto import autodiff as ad
from dproto.autodiff import Tensor
from dproto.backbone import Backbone, build_backbone
from dproto.config import RunConfig, make_rng
from dproto.errors import ShapeMismatchError
from dproto.protolayer import (
    ActivationResult,
    ClassifierHead,
    FeatureMask,
    Prototype,
    PrototypeSource,
    class_logits,
    generate_feature_masks,
    prototype_layer,
    stack_masks,
)

logger = logging.getLogger(__name__)


@dataclass
class ForwardResult:
    features: Tensor
    layer: ActivationResult
    logits: Tensor


class ProtoModel:
    """
    Classifieur complet ``x → F(x) → g(x) → logits``.

    Attributes:
        backbone (Backbone): θ_b et θ_a.
        masks (list[FeatureMask]): Réservoir figé de ``n`` masques.
        prototypes (Tensor): Matrice ``(K, D1)`` entraînable.
        prototype_classes (np.ndarray): Classe de chaque prototype.
        head (ClassifierHead): Poids ``(m, K)``.
        sources (list[PrototypeSource | None]): Provenance après projection.
        epochs_trained (int): Époques d'entraînement effectuées.
    """

    def __init__(self, cfg: RunConfig, backbone: Backbone, masks: List[FeatureMask],
                 prototypes: Tensor, prototype_classes: np.ndarray, head: ClassifierHead,
                 class_names: Optional[Sequence[str]] = None):
        self.cfg = cfg
        self.backbone = backbone
        self.masks = masks
        self.mask_array = stack_masks(masks)
        self.prototypes = prototypes
        self.prototype_classes = np.asarray(prototype_classes, dtype=np.int64)
        self.head = head
        num_classes = head.weights.shape[0]
        self.class_names = list(class_names) if class_names else [f"classe_{c}" for c in range(num_classes)]
        self.sources: List[Optional[PrototypeSource]] = [None] * prototypes.shape[0]
        self.epochs_trained = 0

    @classmethod
    def build(cls, cfg: RunConfig, class_names: Optional[Sequence[str]] = None) -> "ProtoModel":
        """Initialisation déterministe à partir de ``cfg.seed``."""
        pl = cfg.protolayer
        backbone = build_backbone(cfg.backbone, cfg.seed)
        masks = generate_feature_masks(pl.num_masks, backbone.output_shape, cfg.seed)
        k = pl.num_classes * pl.prototypes_per_class
        rng = make_rng(cfg.seed, "prototypes")
        prototypes = Tensor(rng.uniform(0.0, 1.0, size=(k, cfg.backbone.shaping_channels)),
                            requires_grad=True)
        classes = np.repeat(np.arange(pl.num_classes), pl.prototypes_per_class)
        head = ClassifierHead.initial(classes, pl.num_classes)
        if class_names is not None and len(class_names) != pl.num_classes:
            raise ShapeMismatchError(
                f"{len(class_names)} noms de classes pour {pl.num_classes} classes configurées"
            )
        return cls(cfg, backbone, masks, prototypes, classes, head, class_names)

    # ------------------------------------------------------------------
    @property
    def num_classes(self) -> int:
        return self.head.weights.shape[0]

    @property
    def num_prototypes(self) -> int:
        return self.prototypes.shape[0]

    @property
    def epsilon(self) -> float:
        return self.cfg.protolayer.epsilon

    @property
    def input_size(self):
        return tuple(self.cfg.backbone.input_size)

    @property
    def is_pushed(self) -> bool:
        return any(s is not None for s in self.sources)

    def class_prototypes(self, class_id: int) -> np.ndarray:
        return np.flatnonzero(self.prototype_classes == class_id)

    def prototype(self, j: int) -> Prototype:
        return Prototype(j, self.prototypes.data[j].copy(), int(self.prototype_classes[j]), self.sources[j])

    def prototype_list(self) -> List[Prototype]:
        return [self.prototype(j) for j in range(self.num_prototypes)]

    def parameter_groups(self) -> Dict[str, Dict[str, Tensor]]:
        """Groupes θ_b, θ_a, θ_g (prototypes) et θ_h."""
        return {
            "backbone": self.backbone.backbone_parameters(),
            "shaping": self.backbone.shaping_parameters(),
            "prototype": {"prototypes": self.prototypes},
            "head": {"head": self.head.weights},
        }

    def parameters(self) -> Dict[str, Tensor]:
        params: Dict[str, Tensor] = {}
        for group in self.parameter_groups().values():
            params.update(group)
        return params

    def zero_grad(self) -> None:
        for tensor in self.parameters().values():
            tensor.zero_grad()

    # ------------------------------------------------------------------
    def forward(self, images) -> ForwardResult:
        """Passe avant différentiable sur un lot ``(B, H, W, C)``."""
        images = ad.as_tensor(images)
        if images.ndim != 4 or images.shape[1:] != self.input_size:
            raise ShapeMismatchError(
                f"Lot d'images {images.shape}, attendu (B, {', '.join(map(str, self.input_size))})"
            )
        features = self.backbone(images)
        layer = prototype_layer(features, self.mask_array, self.prototypes, self.epsilon)
        logits = class_logits(None, None, self.head, activations=layer.activations)
        return ForwardResult(features, layer, logits)

    __call__ = forward

    def detached(self) -> "ProtoModel":
        """Vue du modèle à paramètres constants : l'inférence ne construit aucun graphe."""
        clone = copy.copy(self)
        clone.backbone = self.backbone.detached()
        clone.prototypes = self.prototypes.detach()
        clone.head = ClassifierHead(self.head.weights.detach(), self.prototype_classes)
        return clone

    def predict_proba(self, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
        """
        Probabilités softmax ``(B, m)`` sans gradient.

        Args:
            images (np.ndarray): ``(B, H, W, C)`` ou une seule image ``(H, W, C)``.
        """
        images = np.asarray(images, dtype=np.float64)
        if images.ndim == 3:
            images = images[None]
        frozen = self.detached()
        out = [ad.softmax(frozen.forward(images[i:i + batch_size]).logits.data)
               for i in range(0, len(images), batch_size)]
        return np.concatenate(out, axis=0) if out else np.zeros((0, self.num_classes))

    def predict(self, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
        return np.argmax(self.predict_proba(images, batch_size), axis=1)

    def accuracy(self, images: np.ndarray, labels: np.ndarray, batch_size: int = 64) -> float:
        if len(images) == 0:
            return 0.0
        return float(np.mean(self.predict(images, batch_size) == np.asarray(labels)))

    # ------------------------------------------------------------------
    def state_tensors(self) -> Dict[str, np.ndarray]:
        """
        Tous les tableaux persistés, par nom.

        La provenance des prototypes (un masque par variante) n'est pas un
        tenseur : le point de contrôle la garde en entier dans son en-tête.
        """
        tensors = {name: t.data for name, t in self.parameters().items()}
        tensors["masks"] = self.mask_array
        tensors["prototype_classes"] = self.prototype_classes.astype(np.float64)
        return tensors

    def load_state_tensors(self, tensors: Dict[str, np.ndarray]) -> None:
        """
        Remplace les valeurs des paramètres et du réservoir de masques.

        Raises:
            ShapeMismatchError: Tenseur manquant ou de forme inattendue.
        """
        for name, tensor in self.parameters().items():
            if name not in tensors:
                raise ShapeMismatchError(f"Tenseur manquant : {name}")
            if tensors[name].shape != tensor.shape:
                raise ShapeMismatchError(
                    f"Tenseur {name} : forme {tensors[name].shape}, attendu {tensor.shape}"
                )
            tensor.data = np.array(tensors[name], dtype=np.float64)
            tensor.zero_grad()
        masks = np.asarray(tensors["masks"])
        if masks.shape != self.mask_array.shape:
            raise ShapeMismatchError(f"Masques : forme {masks.shape}, attendu {self.mask_array.shape}")
        self.masks = [FeatureMask(i, masks[i]) for i in range(masks.shape[0])]
        self.mask_array = stack_masks(self.masks)
        self.prototype_classes = np.asarray(tensors["prototype_classes"]).astype(np.int64)
        self.head.prototype_classes = self.prototype_classes
