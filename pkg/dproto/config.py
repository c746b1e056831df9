# -*- coding: utf-8 -*-
"""
config.py

Configuration d'une exécution (``RunConfig``) et dérivation des graines.

Une configuration est un document JSON à six sections : ``backbone``,
``protolayer``, ``trainer``, ``mdm``, ``eval`` et ``dataset``, plus la graine
racine ``seed`` et le nombre de fils ``threads``. Chaque champ a une valeur
par défaut ; une clé inconnue, à n'importe quel niveau, lève
:class:`~dproto.errors.ConfigError`.

Toute source d'aléa du projet est dérivée de la graine racine par
:func:`derive_seed`, ce qui rend chaque commande reproductible.
"""

from __future__ import annotations

import json
import logging
import os
import zlib
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from dproto.errors import ConfigError

logger = logging.getLogger(__name__)

#: Variable d'environnement équivalente à ``--threads``.
THREADS_ENV = "DPROTO_THREADS"


# ----------------------------------------------------------------------
#  GRAINES
# ----------------------------------------------------------------------
def _key_to_int(key) -> int:
    if isinstance(key, (bool, np.bool_)):
        return int(key)
    if isinstance(key, (int, np.integer)):
        return int(key) & 0xFFFFFFFF
    return zlib.crc32(str(key).encode("utf-8"))


def derive_seed(root: int, *keys) -> int:
    """
    Dérive une graine 32 bits indépendante à partir de la graine racine.

    Les clés (entiers ou chaînes) identifient l'usage : par exemple
    ``derive_seed(42, "push", epoch, j)``. Les chaînes sont hachées en CRC32.

    Args:
        root (int): Graine racine de l'exécution.
        *keys: Composantes identifiant l'usage.

    Returns:
        int: Graine dans ``[0, 2**32)``.
    """
    entropy = [_key_to_int(root)] + [_key_to_int(k) for k in keys]
    return int(np.random.SeedSequence(entropy).generate_state(1)[0])


def make_rng(root: int, *keys) -> np.random.Generator:
    """Générateur numpy initialisé par :func:`derive_seed`."""
    return np.random.default_rng(derive_seed(root, *keys))


def resolve_threads(cli_value: Optional[int] = None) -> int:
    """
    Nombre de fils à utiliser : ``--threads``, sinon ``DPROTO_THREADS``, sinon 1.

    Raises:
        ConfigError: Si la valeur n'est pas un entier >= 1.
    """
    raw: Any = cli_value if cli_value is not None else os.environ.get(THREADS_ENV, 1)
    try:
        threads = int(raw)
    except (TypeError, ValueError):
        raise ConfigError(f"Nombre de fils invalide : {raw!r}") from None
    if threads < 1:
        raise ConfigError(f"Nombre de fils invalide : {threads} (doit être >= 1)")
    return threads


# ----------------------------------------------------------------------
#  SECTIONS
# ----------------------------------------------------------------------
@dataclass
class BackboneConfig:
    """
    Extracteur de caractéristiques et réseau de mise en forme.

    Attributes:
        input_size: ``(H, W, C)`` de l'image d'entrée (défaut 56×56×3).
        conv_blocks: Blocs ``(canaux, noyau, pas, pooling)`` ; chaque bloc
            est conv (bourrage ``noyau // 2``) → ReLU → max-pool si
            ``pooling > 1`` (défaut : 16, 32, 32 canaux, noyaux 3, pooling 2).
        shaping_channels: ``D1``, profondeur de la carte de sortie (défaut 32).
        target_grid: ``(H1, W1)`` attendu en sortie (défaut 7×7).
        final_activation: ``"relu"`` (carte non négative) ou ``"none"``.
    """
    input_size: Tuple[int, int, int] = (56, 56, 3)
    conv_blocks: List[Tuple[int, int, int, int]] = field(
        default_factory=lambda: [(16, 3, 1, 2), (32, 3, 1, 2), (32, 3, 1, 2)]
    )
    shaping_channels: int = 32
    target_grid: Tuple[int, int] = (7, 7)
    final_activation: str = "relu"

    def __post_init__(self):
        self.input_size = tuple(int(v) for v in self.input_size)
        self.conv_blocks = [tuple(int(v) for v in block) for block in self.conv_blocks]
        self.target_grid = tuple(int(v) for v in self.target_grid)


@dataclass
class ProtoLayerConfig:
    """
    Couche de prototypes.

    Attributes:
        num_classes: ``m`` (défaut 4).
        prototypes_per_class: Prototypes par classe (défaut 10).
        num_masks: ``n``, taille du réservoir de masques (défaut 64).
        epsilon: ``ε`` de l'activation logarithmique (défaut 1e-12).
    """
    num_classes: int = 4
    prototypes_per_class: int = 10
    num_masks: int = 64
    epsilon: float = 1e-12


@dataclass
class TrainConfig:
    """
    Perte et calendrier d'entraînement.

    Attributes:
        lambda1: Poids du terme de regroupement (défaut 0.8).
        lambda2: Poids du terme de séparation (défaut -0.08).
        lambda3: Poids L1 sur les poids hors classe de la tête (défaut 1e-4).
        lr_backbone, lr_shaping, lr_prototype, lr_head: Taux d'apprentissage
            (défauts 1e-4, 3e-3, 3e-3, 1e-4).
        optimizer: ``"adam"`` (défaut) ou ``"sgd"``.
        batch_size: Taille de lot (défaut 60).
        epochs: ``C`` (défaut 30).
        warmup_epochs: ``C_j`` : époques sans mise à jour du backbone (défaut 5).
        push_period: Une projection toutes les ``push_period`` époques (défaut 10).
        refit_iterations: ``N`` passes de réajustement de la tête (défaut 20).
        augmentations_per_push: ``R`` images augmentées par projection (défaut 8).
        augment_training: Augmente les lots d'entraînement (défaut True).
        divergence_threshold: Perte au-delà de laquelle on abandonne (défaut 1e6).
    """
    lambda1: float = 0.8
    lambda2: float = -0.08
    lambda3: float = 1e-4
    lr_backbone: float = 1e-4
    lr_shaping: float = 3e-3
    lr_prototype: float = 3e-3
    lr_head: float = 1e-4
    optimizer: str = "adam"
    batch_size: int = 60
    epochs: int = 30
    warmup_epochs: int = 5
    push_period: int = 10
    refit_iterations: int = 20
    augmentations_per_push: int = 8
    augment_training: bool = True
    divergence_threshold: float = 1e6


@dataclass
class MDMConfig:
    """
    Décodeur à masques dynamiques multiples.

    Attributes:
        num_scales: ``D`` (défaut 10).
        grid_base: Les grilles valent ``a_i = b_i = grid_base + i`` pour
            ``i = 1..D`` (défaut 5, soit 6×6 à 15×15).
        tau: Valeur initiale des masques (défaut 0.5).
        eta: ``η_i`` commun à toutes les échelles (défaut 1.0).
        gamma: Seuil ``γ`` du mélange (défaut 3.0).
        steps: Nombre maximal d'itérations par échelle (défaut 800).
        lr: Pas de descente de gradient projetée par cellule (défaut 0.05).
        alpha, beta: Mélange de la carte de chaleur (défauts 0.5 et 0.3).
        window: Fenêtre (en itérations) du suivi de la perte (défaut 50).
        min_improvement: Arrêt anticipé quand, pour toutes les échelles, la
            perte moyenne d'une fenêtre baisse de moins de cette fraction
            par rapport à la fenêtre précédente (défaut 1e-3 ; 0 désactive).
    """
    num_scales: int = 10
    grid_base: int = 5
    tau: float = 0.5
    eta: float = 1.0
    gamma: float = 3.0
    steps: int = 800
    lr: float = 0.05
    alpha: float = 0.5
    beta: float = 0.3
    window: int = 50
    min_improvement: float = 1e-3

    def grid_sizes(self) -> List[Tuple[int, int]]:
        return [(self.grid_base + i, self.grid_base + i) for i in range(1, self.num_scales + 1)]


@dataclass
class EvalConfig:
    """
    Évaluation des cartes de saillance.

    Attributes:
        top_percent: Pourcentage de pixels gardés à la binarisation (défaut 20).
        step_percent: Pas des courbes suppression/insertion (défaut 2).
        occlusion_patch: Côté de la fenêtre d'occultation (défaut 8).
        occlusion_stride: Pas de la fenêtre d'occultation (défaut 4).
    """
    top_percent: float = 20.0
    step_percent: float = 2.0
    occlusion_patch: int = 8
    occlusion_stride: int = 4


@dataclass
class DatasetConfig:
    """
    Génération synthétique et augmentation.

    Attributes:
        classes: Nombre de classes (défaut 4, au plus 4 formes).
        per_class: Images par classe (défaut 200).
        image_size: Côté des images (défaut 56).
        clutter: Formes parasites par image (défaut 2).
        noise: Écart-type du bruit gaussien (défaut 0.02).
        test_fraction: Part de test par classe (défaut 0.2).
        max_rotation: Degrés (défaut 25).
        max_shear: Cisaillement (défaut 0.2).
        max_perspective: Déplacement des coins, fraction du côté (défaut 0.1).
        max_distortion: Déplacement élastique en pixels (défaut 3).
        distortion_smoothing: ``sigma`` du champ élastique (défaut 4).
    """
    classes: int = 4
    per_class: int = 200
    image_size: int = 56
    clutter: int = 2
    noise: float = 0.02
    test_fraction: float = 0.2
    max_rotation: float = 25.0
    max_shear: float = 0.2
    max_perspective: float = 0.1
    max_distortion: float = 3.0
    distortion_smoothing: float = 4.0


_SECTIONS = {
    "backbone": BackboneConfig,
    "protolayer": ProtoLayerConfig,
    "trainer": TrainConfig,
    "mdm": MDMConfig,
    "eval": EvalConfig,
    "dataset": DatasetConfig,
}


def _section_from_dict(name: str, cls, data: Dict[str, Any]):
    if not isinstance(data, dict):
        raise ConfigError(f"Section '{name}' : objet JSON attendu, reçu {type(data).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"Section '{name}' : clé(s) inconnue(s) {', '.join(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"Section '{name}' : {e}") from None


@dataclass
class RunConfig:
    """Configuration complète d'une exécution."""
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    protolayer: ProtoLayerConfig = field(default_factory=ProtoLayerConfig)
    trainer: TrainConfig = field(default_factory=TrainConfig)
    mdm: MDMConfig = field(default_factory=MDMConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    seed: int = 42
    threads: int = 1

    # ------------------------------------------------------------------
    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "RunConfig":
        """
        Construit et valide une configuration depuis un dictionnaire JSON.

        Les sections absentes prennent leurs valeurs par défaut.

        Raises:
            ConfigError: Clé inconnue, type invalide ou invariant violé.
        """
        if not isinstance(data, dict):
            raise ConfigError("La configuration doit être un objet JSON")
        allowed = set(_SECTIONS) | {"seed", "threads"}
        unknown = sorted(set(data) - allowed)
        if unknown:
            raise ConfigError(f"Clé(s) de configuration inconnue(s) : {', '.join(unknown)}")
        kwargs: Dict[str, Any] = {
            name: _section_from_dict(name, section, data[name])
            for name, section in _SECTIONS.items() if name in data
        }
        for key in ("seed", "threads"):
            if key in data:
                try:
                    kwargs[key] = int(data[key])
                except (TypeError, ValueError):
                    raise ConfigError(f"'{key}' doit être un entier (reçu {data[key]!r})") from None
        config = cls(**kwargs)
        config.validate()
        return config

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        path = Path(path)
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"Fichier de configuration introuvable : {path}") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"Configuration JSON invalide ({path}) : {e}") from None
        logger.info("Configuration chargée depuis %s", path)
        return cls.from_dict(data)

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        # les tuples deviennent des listes : même forme qu'après un aller-retour JSON
        return json.loads(json.dumps(data))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n",
                              encoding="utf-8")

    def with_overrides(self, **sections) -> "RunConfig":
        """Copie de la configuration avec des sections remplacées."""
        config = replace(self, **sections)
        config.validate()
        return config

    # ------------------------------------------------------------------
    def validate(self) -> None:
        """
        Vérifie les invariants de toutes les sections.

        Raises:
            ConfigError: Au premier invariant violé, avec son intitulé.
        """
        bb = self.backbone
        if len(bb.input_size) != 3 or min(bb.input_size) < 1:
            raise ConfigError(f"backbone.input_size invalide : {bb.input_size}")
        if bb.shaping_channels < 1:
            raise ConfigError("backbone.shaping_channels doit être >= 1 (D1 >= 1)")
        if len(bb.target_grid) != 2 or min(bb.target_grid) < 1:
            raise ConfigError(f"backbone.target_grid invalide : {bb.target_grid}")
        for block in bb.conv_blocks:
            if len(block) != 4 or min(block) < 1:
                raise ConfigError(f"backbone.conv_blocks : bloc invalide {block}")
        if bb.final_activation not in ("relu", "none"):
            raise ConfigError(f"backbone.final_activation inconnue : {bb.final_activation!r}")

        pl = self.protolayer
        if pl.num_classes < 1 or pl.prototypes_per_class < 1:
            raise ConfigError("protolayer : au moins une classe et un prototype par classe")
        if pl.num_masks < 1:
            raise ConfigError("protolayer.num_masks doit être >= 1")
        if not 0 < pl.epsilon < 1:
            raise ConfigError(f"protolayer.epsilon doit être dans ]0, 1[ (reçu {pl.epsilon})")

        tr = self.trainer
        if not tr.lambda2 <= 0 <= tr.lambda1:
            raise ConfigError(
                f"trainer : il faut lambda2 <= 0 <= lambda1 (reçu {tr.lambda2}, {tr.lambda1})"
            )
        if tr.lambda3 < 0:
            raise ConfigError("trainer.lambda3 doit être >= 0")
        for name in ("lr_backbone", "lr_shaping", "lr_prototype", "lr_head"):
            if getattr(tr, name) <= 0:
                raise ConfigError(f"trainer.{name} doit être > 0")
        if tr.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"trainer.optimizer inconnu : {tr.optimizer!r}")
        if tr.batch_size < 1 or tr.augmentations_per_push < 1 or tr.push_period < 1:
            raise ConfigError("trainer : batch_size, augmentations_per_push et push_period >= 1")
        if tr.epochs < 0 or tr.warmup_epochs < 0 or tr.refit_iterations < 0:
            raise ConfigError("trainer : epochs, warmup_epochs et refit_iterations >= 0")

        md = self.mdm
        if md.num_scales < 1 or md.grid_base < 0 or md.steps < 1:
            raise ConfigError("mdm : num_scales >= 1, grid_base >= 0, steps >= 1")
        if not 0 <= md.tau <= 1:
            raise ConfigError(f"mdm.tau doit être dans [0, 1] (reçu {md.tau})")
        if md.eta < 0 or md.lr <= 0 or md.alpha < 0 or md.beta < 0:
            raise ConfigError("mdm : eta, alpha, beta >= 0 et lr > 0")
        if md.window < 1 or md.min_improvement < 0:
            raise ConfigError("mdm : window >= 1 et min_improvement >= 0")
        largest = md.grid_base + md.num_scales
        if largest > min(bb.input_size[:2]):
            raise ConfigError(
                f"mdm : grille {largest}x{largest} plus grande que l'image {bb.input_size[:2]}"
            )

        ev = self.eval
        if not 0 < ev.top_percent <= 100:
            raise ConfigError(f"eval.top_percent doit être dans ]0, 100] (reçu {ev.top_percent})")
        if ev.step_percent <= 0 or abs(100.0 / ev.step_percent - round(100.0 / ev.step_percent)) > 1e-9:
            raise ConfigError(f"eval.step_percent doit diviser 100 (reçu {ev.step_percent})")
        if ev.occlusion_patch < 1 or ev.occlusion_stride < 1:
            raise ConfigError("eval : occlusion_patch et occlusion_stride >= 1")

        ds = self.dataset
        if not 1 <= ds.classes <= 4 or ds.per_class < 1:
            raise ConfigError("dataset : 1 à 4 classes et au moins une image par classe")
        if not 0 <= ds.test_fraction < 1 or ds.noise < 0 or ds.clutter < 0:
            raise ConfigError("dataset : test_fraction dans [0, 1[, noise >= 0, clutter >= 0")

        if self.threads < 1:
            raise ConfigError("threads doit être >= 1")

    # ------------------------------------------------------------------
    @classmethod
    def large_scale_preset(cls) -> "RunConfig":
        """
        Valeurs de l'expérience à grande échelle : 720 masques, D1 = 512,
        ``η = 10`` et une entrée 224×224 réduite à une grille 7×7.
        """
        return cls(
            backbone=BackboneConfig(
                input_size=(224, 224, 3),
                conv_blocks=[(64, 3, 1, 2), (128, 3, 1, 2), (256, 3, 1, 2),
                             (512, 3, 1, 2), (512, 3, 1, 2)],
                shaping_channels=512,
                target_grid=(7, 7),
            ),
            protolayer=ProtoLayerConfig(num_classes=200, prototypes_per_class=10, num_masks=720),
            mdm=MDMConfig(eta=10.0),
        )
