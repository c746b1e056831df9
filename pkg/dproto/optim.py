# -*- coding: utf-8 -*-
"""
optim.py

Optimiseurs à groupes de paramètres : Adam et SGD.

Chaque groupe porte son propre taux d'apprentissage. Un paramètre dont
``requires_grad`` est faux (groupe gelé) n'est jamais modifié.
"""

from __future__ import annotations

import logging
from typing import Dict, Iterable, Mapping

import numpy as np

from dproto.autodiff import Tensor
from dproto.errors import ConfigError

logger = logging.getLogger(__name__)


class Optimizer:
    """Base commune : ``groups`` associe un nom de groupe à ``(lr, {nom: tenseur})``."""

    def __init__(self, groups: Mapping[str, Mapping[str, Tensor]], lrs: Mapping[str, float]):
        missing = sorted(set(groups) - set(lrs))
        if missing:
            raise ConfigError(f"Taux d'apprentissage manquant pour : {', '.join(missing)}")
        self.groups = {name: dict(params) for name, params in groups.items()}
        self.lrs = dict(lrs)
        self.steps = 0

    def _trainable(self) -> Iterable:
        for group, params in self.groups.items():
            for name, tensor in params.items():
                if tensor.requires_grad and tensor.grad is not None:
                    yield group, name, tensor

    def zero_grad(self) -> None:
        for params in self.groups.values():
            for tensor in params.values():
                tensor.zero_grad()

    def step(self) -> None:
        raise NotImplementedError


class SGD(Optimizer):
    def step(self) -> None:
        self.steps += 1
        for group, _, tensor in self._trainable():
            tensor.data -= self.lrs[group] * tensor.grad


class Adam(Optimizer):
    """Adam avec correction de biais (β1 = 0.9, β2 = 0.999)."""

    def __init__(self, groups, lrs, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        super().__init__(groups, lrs)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.state: Dict[str, Dict[str, np.ndarray]] = {}

    def step(self) -> None:
        self.steps += 1
        for group, name, tensor in self._trainable():
            key = f"{group}/{name}"
            state = self.state.setdefault(key, {"m": np.zeros_like(tensor.data),
                                                "v": np.zeros_like(tensor.data), "t": 0})
            state["t"] += 1
            state["m"] = self.beta1 * state["m"] + (1.0 - self.beta1) * tensor.grad
            state["v"] = self.beta2 * state["v"] + (1.0 - self.beta2) * tensor.grad ** 2
            m_hat = state["m"] / (1.0 - self.beta1 ** state["t"])
            v_hat = state["v"] / (1.0 - self.beta2 ** state["t"])
            tensor.data -= self.lrs[group] * m_hat / (np.sqrt(v_hat) + self.eps)


def make_optimizer(kind: str, groups, lrs) -> Optimizer:
    if kind == "adam":
        return Adam(groups, lrs)
    if kind == "sgd":
        return SGD(groups, lrs)
    raise ConfigError(f"Optimiseur inconnu : {kind!r}")
