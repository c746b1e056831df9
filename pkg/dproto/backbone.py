# -*- coding: utf-8 -*-
"""
backbone.py

Extracteur de caractéristiques (petit CNN) suivi du réseau de mise en forme.

Une image ``H×W×C`` traverse les blocs convolutifs (conv → ReLU → max-pool),
puis deux convolutions 1×1 séparées par une ReLU qui ramènent la profondeur
à ``D1``. La sortie est la carte de caractéristiques ``F(x)`` de forme
``H1×W1×D1``.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, replace
from typing import Dict, List, Tuple

import numpy as np

from dproto import autodiff as ad
from dproto.autodiff import Tensor
from dproto.config import BackboneConfig, make_rng
from dproto.errors import ConfigError, ShapeMismatchError

logger = logging.getLogger(__name__)

__all__ = ["BackboneConfig", "Backbone", "ConvLayer", "shape_trace", "build_backbone",
           "extract_features"]


def shape_trace(cfg: BackboneConfig) -> List[Tuple[int, int, int]]:
    """
    Formes ``(H, W, C)`` successives à travers les blocs convolutifs.

    Le premier élément est ``cfg.input_size``. Une convolution de noyau ``k``
    utilise un bourrage ``k // 2`` ; un pooling ``p > 1`` divise par ``p``
    (arrondi inférieur). La mise en forme 1×1 ne change pas la grille.

    Raises:
        ConfigError: Si une étape produit une dimension spatiale nulle.
    """
    height, width, channels = cfg.input_size
    trace = [(height, width, channels)]
    for out_channels, kernel, stride, pool in cfg.conv_blocks:
        pad = kernel // 2
        height = (height + 2 * pad - kernel) // stride + 1
        width = (width + 2 * pad - kernel) // stride + 1
        if pool > 1:
            height = (height - pool) // pool + 1 if height >= pool else 0
            width = (width - pool) // pool + 1 if width >= pool else 0
        channels = out_channels
        trace.append((height, width, channels))
        if height < 1 or width < 1:
            raise ConfigError(f"Grille vide dans le backbone : {_format_trace(trace)}")
    return trace


def _format_trace(trace) -> str:
    return " -> ".join(f"{h}x{w}x{c}" for h, w, c in trace)


@dataclass
class ConvLayer:
    """Convolution paramétrée ; ``pool > 1`` ajoute un max-pool après la ReLU."""
    weight: Tensor
    bias: Tensor
    stride: int = 1
    padding: int = 0
    pool: int = 1

    def __call__(self, x: Tensor, activation: bool = True) -> Tensor:
        out = ad.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)
        if activation:
            out = ad.relu(out)
        if self.pool > 1:
            out = ad.max_pool2d(out, self.pool)
        return out


def _kaiming_uniform(rng: np.random.Generator, kernel: int, cin: int, cout: int) -> np.ndarray:
    fan_in = kernel * kernel * cin
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=(kernel, kernel, cin, cout))


class Backbone:
    """
    Réseau ``f_a ∘ f_b`` paramétré de façon déterministe par une graine.

    Les paramètres sont exposés en deux groupes, ``backbone`` (θ_b) et
    ``shaping`` (θ_a), pour permettre le gel du premier pendant l'échauffement.
    """

    def __init__(self, cfg: BackboneConfig, seed: int = 0):
        self.cfg = cfg
        self.trace = shape_trace(cfg)
        final_h, final_w, final_c = self.trace[-1]
        if (final_h, final_w) != tuple(cfg.target_grid):
            raise ConfigError(
                f"Le backbone produit une grille {final_h}x{final_w} au lieu de "
                f"{cfg.target_grid[0]}x{cfg.target_grid[1]} ; trace : {_format_trace(self.trace)}"
            )
        rng = make_rng(seed, "backbone")
        self.blocks: List[ConvLayer] = []
        channels = cfg.input_size[2]
        for out_channels, kernel, stride, pool in cfg.conv_blocks:
            self.blocks.append(ConvLayer(
                weight=Tensor(_kaiming_uniform(rng, kernel, channels, out_channels), requires_grad=True),
                bias=Tensor(np.zeros(out_channels), requires_grad=True),
                stride=stride, padding=kernel // 2, pool=pool,
            ))
            channels = out_channels
        depth = cfg.shaping_channels
        self.shaping: List[ConvLayer] = [
            ConvLayer(Tensor(_kaiming_uniform(rng, 1, final_c, depth), requires_grad=True),
                      Tensor(np.zeros(depth), requires_grad=True)),
            ConvLayer(Tensor(_kaiming_uniform(rng, 1, depth, depth), requires_grad=True),
                      Tensor(np.zeros(depth), requires_grad=True)),
        ]
        logger.debug("Backbone construit : %s -> D1=%d", _format_trace(self.trace), depth)

    # ------------------------------------------------------------------
    @property
    def output_shape(self) -> Tuple[int, int, int]:
        return (*self.cfg.target_grid, self.cfg.shaping_channels)

    def backbone_parameters(self) -> Dict[str, Tensor]:
        params: Dict[str, Tensor] = {}
        for i, block in enumerate(self.blocks):
            params[f"backbone.{i}.weight"] = block.weight
            params[f"backbone.{i}.bias"] = block.bias
        return params

    def shaping_parameters(self) -> Dict[str, Tensor]:
        params: Dict[str, Tensor] = {}
        for i, layer in enumerate(self.shaping):
            params[f"shaping.{i}.weight"] = layer.weight
            params[f"shaping.{i}.bias"] = layer.bias
        return params

    def parameters(self) -> Dict[str, Tensor]:
        return {**self.backbone_parameters(), **self.shaping_parameters()}

    def detached(self) -> "Backbone":
        """Copie à paramètres constants (mêmes valeurs), pour l'inférence."""
        clone = copy.copy(self)
        clone.blocks = [replace(b, weight=b.weight.detach(), bias=b.bias.detach()) for b in self.blocks]
        clone.shaping = [replace(s, weight=s.weight.detach(), bias=s.bias.detach()) for s in self.shaping]
        return clone

    def set_trainable(self, backbone: bool, shaping: bool = True) -> None:
        """Active ou gèle les gradients de chaque groupe."""
        for tensor in self.backbone_parameters().values():
            _set_requires_grad(tensor, backbone)
        for tensor in self.shaping_parameters().values():
            _set_requires_grad(tensor, shaping)

    # ------------------------------------------------------------------
    def forward(self, images: Tensor) -> Tensor:
        """
        Args:
            images (Tensor): Lot ``(B, H, W, C)``.

        Returns:
            Tensor: ``(B, H1, W1, D1)``.
        """
        out = images
        for block in self.blocks:
            out = block(out)
        out = self.shaping[0](out, activation=True)
        out = self.shaping[1](out, activation=self.cfg.final_activation == "relu")
        return out

    __call__ = forward


def _set_requires_grad(tensor: Tensor, flag: bool) -> None:
    tensor.requires_grad = flag
    if flag and tensor.grad is None:
        tensor.grad = np.zeros_like(tensor.data)
    elif not flag:
        tensor.grad = None


def build_backbone(cfg: BackboneConfig, seed: int) -> Backbone:
    """
    Construit le réseau et vérifie que la grille de sortie vaut ``target_grid``.

    Raises:
        ConfigError: Invariant violé ; le message contient la trace des formes.
    """
    return Backbone(cfg, seed)


def extract_features(net: Backbone, image) -> Tensor:
    """
    Calcule ``F(x)`` pour une image ``H×W×C`` ou un lot ``B×H×W×C``.

    Les pixels hors de ``[0, 1]`` d'une image constante sont ramenés dans
    l'intervalle avec un avertissement ; une image qui porte un gradient
    n'est pas modifiée.

    Returns:
        Tensor: ``H1×W1×D1`` (ou ``B×H1×W1×D1`` pour un lot).

    Raises:
        ShapeMismatchError: Si la forme ne correspond pas à ``input_size``.
    """
    image = ad.as_tensor(image)
    expected = tuple(net.cfg.input_size)
    single = image.ndim == 3
    if image.shape[-3:] != expected or image.ndim not in (3, 4):
        raise ShapeMismatchError(
            f"extract_features : image {image.shape}, attendu {expected} ou (B, {', '.join(map(str, expected))})"
        )
    if image.data.min() < 0.0 or image.data.max() > 1.0:
        logger.warning("Pixels hors de [0, 1] (min %.3f, max %.3f)", image.data.min(), image.data.max())
        if not image.requires_grad:
            image = Tensor(np.clip(image.data, 0.0, 1.0))
    batch = ad.reshape(image, (1, *expected)) if single else image
    features = net.forward(batch)
    return ad.reshape(features, net.output_shape) if single else features
