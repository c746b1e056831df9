# -*- coding: utf-8 -*-
"""
mdm.py

Décodeur à masques dynamiques multiples.

Pour expliquer la décision du modèle sur une image ``x`` :

1. on choisit un nœud de détection : le prototype ``p_t`` de la classe
   expliquée (par défaut la classe prédite) qui contribue le plus au
   logit, et le masque ``j_x`` dont le vecteur ``z_j(x)`` est le plus
   proche de ``p_t`` ;
2. pour chaque échelle ``i`` on optimise une grille ``d_i`` (``a_i × b_i``,
   valeurs dans [0, 1]) afin que l'image masquée ``g(d_i)·x`` garde la même
   réponse du nœud tout en éteignant le plus de cellules possible :
   ``L_i = ||z_j(g(d_i)·x) - cible||² / ||cible||² + η · moyenne|d_i|`` ;
   la descente s'arrête dès que la perte ne baisse plus ;
3. les grilles suréchantillonnées sont sommées, seuillées à ``γ`` puis
   normalisées pour former la carte (CAM) ;
4. la carte est rendue en carte de chaleur ``α·x + β·couleur(CAM)`` et en
   image binaire ``B∘x``.

Le même traitement est appliqué à l'image source du prototype, avec ``p_t``
lui-même pour cible.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import spearmanr

from dproto import autodiff as ad
from dproto.autodiff import Tensor
from dproto.config import MDMConfig
from dproto.errors import NonFiniteError, ShapeMismatchError, UntrainedModelError
from dproto.imageio import read_image, write_pgm, write_ppm
from dproto.model import ProtoModel
from dproto.parallel import parallel_map
from dproto.protolayer import masked_features

logger = logging.getLogger(__name__)

PROTOTYPE_SIMILARITY = "prototype-similarity"
CUSTOM_SCALAR = "custom-scalar"

#: Palette bleu → rouge, 256 entrées, ``(k/255, 0, 1 - k/255)``.
COLORMAP = np.stack([np.arange(256) / 255.0, np.zeros(256), 1.0 - np.arange(256) / 255.0], axis=1)

MONITOR_WINDOW = 100


# ----------------------------------------------------------------------
#  TYPES
# ----------------------------------------------------------------------
@dataclass
class MaskVector:
    """Grille ``a_i × b_i`` d'une échelle, toujours dans [0, 1]."""
    scale: int
    grid: np.ndarray
    eta: float
    trained: bool = False
    losses: List[float] = field(default_factory=list, repr=False)

    @classmethod
    def initial(cls, scale: int, size: Tuple[int, int], tau: float, eta: float) -> "MaskVector":
        return cls(scale, np.full(size, float(tau)), float(eta))

    @property
    def size(self) -> Tuple[int, int]:
        return self.grid.shape

    @property
    def final_loss(self) -> float:
        return self.losses[-1] if self.losses else float("nan")

    def upsampled(self, height: int, width: int) -> np.ndarray:
        return ad.bilinear_matrix(self.grid.shape[0], height) @ self.grid @ \
            ad.bilinear_matrix(self.grid.shape[1], width).T


@dataclass
class DetectionNode:
    """
    Fonction scalaire de l'image que les masques doivent préserver.

    Pour ``kind == "prototype-similarity"`` la réponse est
    ``||z_j(x') - target||² / ||target||²`` avec ``j = mask_index`` ;
    ``target`` vaut ``z_j(x)`` (explication de l'image) ou ``p_t`` (image du
    prototype). Rapportée à la norme de la cible, elle ne dépend pas de
    l'échelle des caractéristiques et ``η`` garde le même sens d'un modèle
    à l'autre.
    Pour ``kind == "custom-scalar"``, ``fn`` associe à un lot
    ``(B, H, W, C)`` un tenseur ``(B,)`` et la réponse est ``(fn - target)²``.
    """
    kind: str
    target: np.ndarray
    prototype_id: Optional[int] = None
    mask_index: Optional[int] = None
    class_id: Optional[int] = None
    mode: str = "image"
    fn: Optional[Callable[[Tensor], Tensor]] = field(default=None, repr=False, compare=False)

    @property
    def scale(self) -> float:
        """Dénominateur de la réponse (1 pour un nœud scalaire ou une cible nulle)."""
        if self.kind == CUSTOM_SCALAR:
            return 1.0
        norm = float(np.sum(np.square(self.target)))
        return norm if norm > 1e-12 else 1.0

    def response(self, images: Tensor, model: Optional[ProtoModel] = None) -> Tensor:
        """Réponse ``(B,)`` du nœud pour un lot d'images masquées."""
        if self.kind == CUSTOM_SCALAR:
            values = self.fn(images)
            return ad.square(ad.add_scalar(values, -float(np.asarray(self.target))))
        if model is None:
            raise ValueError("Un nœud de similarité de prototype exige le modèle")
        features = model.backbone(images)
        mask = model.mask_array[self.mask_index:self.mask_index + 1]
        z = ad.reshape(masked_features(features, mask), (images.shape[0], mask.shape[-1]))
        return ad.mul_scalar(ad.sq_distance(z, self.target), 1.0 / self.scale)

    def to_dict(self) -> Dict:
        return {
            "kind": self.kind,
            "prototype_id": self.prototype_id,
            "mask_index": self.mask_index,
            "class_id": self.class_id,
            "mode": self.mode,
        }


def custom_node(fn: Callable[[Tensor], Tensor], target: float) -> DetectionNode:
    return DetectionNode(CUSTOM_SCALAR, np.asarray(float(target)), fn=fn)


@dataclass
class Cam:
    """
    Carte d'activation ``H × W`` dans [0, 1].

    ``support`` est l'indicatrice ``S >= γ`` (vide si la carte est nulle).
    """
    values: np.ndarray
    gamma: float
    scales: List[int]
    support: np.ndarray

    @property
    def is_empty(self) -> bool:
        return not self.values.any()


# ----------------------------------------------------------------------
#  NŒUD DE DÉTECTION
# ----------------------------------------------------------------------
def _check_trained(model: ProtoModel) -> None:
    if model.epochs_trained == 0 and not model.is_pushed:
        raise UntrainedModelError("Le modèle n'a jamais été entraîné : explication impossible")


def _check_image(model: ProtoModel, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != model.input_size:
        raise ShapeMismatchError(f"Image {x.shape}, attendu {model.input_size}")
    return x


def select_detection_node(model: ProtoModel, x: np.ndarray, class_id: Optional[int] = None) -> DetectionNode:
    """
    Nœud de détection pour l'explication de ``x``.

    ``p_t`` est le prototype de la classe expliquée ``c`` qui maximise
    ``w_h[c, j] · g_j(x)`` (plus petit indice en cas d'égalité) ; le masque
    retenu est ``argmin_j ||z_j(x) - p_t||`` et la cible est ``z_j(x)``.
    Sans ``class_id``, ``c`` est la classe prédite.

    Raises:
        UntrainedModelError: Modèle jamais entraîné.
        ShapeMismatchError: Image de forme différente de l'entrée du modèle.
        ValueError: ``class_id`` hors de ``[0, m)``.
    """
    _check_trained(model)
    x = _check_image(model, x)
    if class_id is not None and not 0 <= class_id < model.num_classes:
        raise ValueError(f"Classe {class_id} hors de [0, {model.num_classes})")
    frozen = model.detached()
    out = frozen.forward(x[None])
    c = int(np.argmax(out.logits.data[0])) if class_id is None else int(class_id)
    candidates = model.class_prototypes(c)
    contributions = model.head.weights.data[c, candidates] * out.layer.activations.data[0, candidates]
    p_t = int(candidates[int(np.argmax(contributions))])
    j_x = int(out.layer.nearest_mask[0, p_t])
    target = out.layer.z.data[0, j_x].copy()
    logger.debug("Nœud : classe %d, prototype %d, masque %d", c, p_t, j_x)
    return DetectionNode(PROTOTYPE_SIMILARITY, target, p_t, j_x, c, mode="image")


def prototype_detection_node(model: ProtoModel, source_image: np.ndarray, prototype_id: int) -> DetectionNode:
    """Nœud pour l'image source de ``p_t`` : masque le plus proche de ``p_t``, cible ``p_t``."""
    source_image = _check_image(model, source_image)
    frozen = model.detached()
    z = masked_features(frozen.backbone(Tensor(source_image[None])), model.mask_array).data[0]
    p_t = model.prototypes.data[prototype_id]
    j = int(np.argmin(np.sum((z - p_t) ** 2, axis=1)))
    return DetectionNode(PROTOTYPE_SIMILARITY, p_t.copy(), prototype_id, j,
                         int(model.prototype_classes[prototype_id]), mode="prototype")


# ----------------------------------------------------------------------
#  OPTIMISATION DES GRILLES
# ----------------------------------------------------------------------
def _window_means(trace: np.ndarray, window: int) -> np.ndarray:
    """Moyennes des fenêtres complètes les plus récentes, de la plus ancienne à la dernière."""
    count = len(trace) // window
    start = len(trace) - count * window
    return trace[start:].reshape(count, window, *trace.shape[1:]).mean(axis=1)


def _monitor(trace: Sequence[float], scale: int, window: int = MONITOR_WINDOW) -> None:
    trace = np.asarray(trace)
    if len(trace) < 2 * window:
        return
    means = _window_means(trace, window)
    if np.any(means[1:] > means[:-1] + 1e-12):
        logger.warning("Échelle %d : perte moyenne croissante sur une fenêtre de %d itérations", scale, window)


def _stalled(trace: np.ndarray, window: int, min_improvement: float) -> bool:
    """Vrai quand la dernière fenêtre n'améliore plus la précédente, pour toutes les échelles."""
    previous, last = _window_means(trace[-2 * window:], window)
    gain = previous - last
    return bool(np.all(gain <= min_improvement * np.maximum(np.abs(previous), 1e-12)))


def optimize_mask_vectors(node: DetectionNode, x: np.ndarray, grids: Sequence[Tuple[int, int]],
                          steps: int, lr: float, eta: float, tau: float = 0.5,
                          model: Optional[ProtoModel] = None, min_improvement: float = 0.0,
                          window: int = MONITOR_WINDOW) -> List[MaskVector]:
    """
    Optimise toutes les échelles dans un seul graphe.

    Les ``D`` images masquées forment un seul lot : une passe avant et une
    passe arrière par itération, quel que soit ``D``. Les pertes par échelle
    sont indépendantes et chaque grille reçoit le gradient de
    ``a_i·b_i·L_i`` : le terme ``η·moyenne|d_i|`` garde sa forme, mais le
    pas par cellule ne rétrécit pas quand la grille s'affine. Pour une
    grille 1×1 c'est la descente de gradient simple. Après chaque pas les
    grilles sont projetées sur [0, 1]. Le modèle et l'image restent figés.

    Avec ``min_improvement > 0`` l'optimisation s'arrête à la fin d'une
    fenêtre de ``window`` itérations dont la perte moyenne n'a baissé, pour
    aucune échelle, de plus de cette fraction par rapport à la précédente.

    Args:
        node (DetectionNode): Nœud à préserver.
        x (np.ndarray): Image ``H × W × C``.
        grids: Tailles ``(a_i, b_i)``.
        steps (int): Nombre maximal d'itérations (>= 1).
        lr (float): Pas de descente par cellule.
        eta (float): Poids ``η`` de la régularisation L1.
        tau (float): Valeur initiale des grilles.
        model (ProtoModel | None): Requis pour un nœud de prototype.
        min_improvement (float): Seuil de l'arrêt anticipé (0 : jamais).
        window (int): Taille de la fenêtre de suivi.

    Returns:
        list[MaskVector]: Une grille entraînée par échelle, dans l'ordre de ``grids``.

    Raises:
        ValueError: ``steps < 1``, ``window < 1`` ou grille plus grande que l'image.
        NonFiniteError: Perte non finie.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[:, :, None]
    height, width = x.shape[:2]
    if steps < 1:
        raise ValueError(f"optimize_mask_vectors : steps doit être >= 1 (reçu {steps})")
    if window < 1:
        raise ValueError(f"optimize_mask_vectors : window doit être >= 1 (reçu {window})")
    for a, b in grids:
        if a < 1 or b < 1 or a > height or b > width:
            raise ValueError(f"Grille {a}x{b} incompatible avec l'image {height}x{width}")

    frozen = model.detached() if model is not None else None
    vectors = [MaskVector.initial(i, size, tau, eta) for i, size in enumerate(grids)]
    params = [Tensor(v.grid.copy(), requires_grad=True) for v in vectors]
    rows = [Tensor(ad.bilinear_matrix(a, height)) for a, _ in grids]
    cols = [Tensor(ad.bilinear_matrix(b, width).T) for _, b in grids]
    cells = Tensor([float(a * b) for a, b in grids])
    image = Tensor(x[None])
    traces = np.zeros((steps, len(grids)))

    done = steps
    for step in range(steps):
        upsampled = ad.stack([ad.matmul(ad.matmul(r, d), c) for r, d, c in zip(rows, params, cols)])
        masked = ad.mul(ad.reshape(upsampled, (len(grids), height, width, 1)), image)
        response = node.response(masked, frozen)
        penalties = ad.stack([ad.reduce_mean(ad.absolute(d)) for d in params])
        losses = ad.add(response, ad.mul_scalar(penalties, eta))
        if not np.all(np.isfinite(losses.data)):
            raise NonFiniteError(f"Perte non finie à l'itération {step} : {losses.data}")
        traces[step] = losses.data
        for d in params:
            d.zero_grad()
        ad.backward(ad.reduce_sum(ad.mul(losses, cells)))
        for d in params:
            d.data = np.clip(d.data - lr * d.grad, 0.0, 1.0)
        seen = step + 1
        if min_improvement > 0 and seen % window == 0 and seen >= 2 * window \
                and _stalled(traces[:seen], window, min_improvement):
            done = seen
            break

    if done < steps:
        logger.debug("Arrêt anticipé après %d itération(s) sur %d", done, steps)
    for i, (vector, d) in enumerate(zip(vectors, params)):
        vector.grid = d.data.copy()
        vector.losses = traces[:done, i].tolist()
        vector.trained = True
        _monitor(vector.losses, i, window)
    return vectors


def optimize_mask_vector(node: DetectionNode, x: np.ndarray, grid: Tuple[int, int], steps: int,
                         lr: float, eta: float, tau: float = 0.5,
                         model: Optional[ProtoModel] = None, scale: int = 0, **stopping) -> MaskVector:
    """Forme à une seule échelle de :func:`optimize_mask_vectors`."""
    vector = optimize_mask_vectors(node, x, [grid], steps, lr, eta, tau, model, **stopping)[0]
    vector.scale = scale
    return vector


def _optimize_for(node: DetectionNode, x: np.ndarray, cfg: MDMConfig, model: ProtoModel) -> List[MaskVector]:
    return optimize_mask_vectors(node, x, cfg.grid_sizes(), cfg.steps, cfg.lr, cfg.eta, cfg.tau, model,
                                 min_improvement=cfg.min_improvement, window=cfg.window)


# ----------------------------------------------------------------------
#  MÉLANGE ET RENDU
# ----------------------------------------------------------------------
def normalize_map(values: np.ndarray) -> np.ndarray:
    """``(X - min X) / (max X - min X)`` ; une carte constante donne des zéros."""
    values = np.asarray(values, dtype=np.float64)
    low, high = values.min(), values.max()
    if high <= low:
        return np.zeros_like(values)
    return (values - low) / (high - low)


def threshold_map(summed: np.ndarray, gamma: float, scales: Sequence[int] = ()) -> Cam:
    """Seuillage ``B = [S >= γ]`` puis normalisation de ``B∘S``."""
    support = summed >= gamma
    values = normalize_map(np.where(support, summed, 0.0))
    if not values.any():
        support = np.zeros_like(support)
    return Cam(values, float(gamma), list(scales), support)


def mix_cam(vectors: Sequence[MaskVector], gamma: float, height: int, width: int) -> Cam:
    """
    Somme des grilles suréchantillonnées, seuillée à ``γ`` et normalisée.

    Raises:
        ValueError: Liste vide ou grille non entraînée.
    """
    if not vectors:
        raise ValueError("mix_cam : au moins une grille est nécessaire")
    if not all(v.trained for v in vectors):
        raise ValueError("mix_cam : grille non entraînée")
    summed = sum(v.upsampled(height, width) for v in vectors)
    return threshold_map(summed, gamma, [v.scale for v in vectors])


def colorize(values: np.ndarray) -> np.ndarray:
    """Carte ``H × W`` dans [0, 1] → image RVB via :data:`COLORMAP`."""
    index = np.clip(np.round(np.asarray(values) * 255.0), 0, 255).astype(np.int64)
    return COLORMAP[index]


def render_explanations(x: np.ndarray, cam: Cam, alpha: float, beta: float) -> Tuple[np.ndarray, np.ndarray]:
    """
    Carte de chaleur ``α·x + β·couleur(CAM)`` et image binaire ``B∘x``.

    Raises:
        ValueError: ``α`` ou ``β`` négatif.
    """
    if alpha < 0 or beta < 0:
        raise ValueError(f"render_explanations : α et β doivent être >= 0 (reçu {alpha}, {beta})")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[:, :, None]
    heatmap = np.clip(alpha * x + beta * colorize(cam.values), 0.0, 1.0)
    binary = np.clip(cam.support[:, :, None] * x, 0.0, 1.0)
    return heatmap, binary


# ----------------------------------------------------------------------
#  EXPLICATION COMPLÈTE
# ----------------------------------------------------------------------
@dataclass
class SideExplanation:
    """Carte et rendus d'une image (``x`` ou image source du prototype)."""
    node: DetectionNode
    vectors: List[MaskVector]
    cam: Cam
    heatmap: np.ndarray
    binary: np.ndarray


@dataclass
class ExplanationBundle:
    image: np.ndarray
    predicted_class: int
    image_side: SideExplanation
    prototype_side: Optional[SideExplanation] = None
    prototype_image: Optional[np.ndarray] = None
    config: Optional[MDMConfig] = None

    @property
    def cam_x(self) -> Cam:
        return self.image_side.cam

    @property
    def cam_prototype(self) -> Optional[Cam]:
        return self.prototype_side.cam if self.prototype_side else None

    def metadata(self) -> Dict:
        def side(s: SideExplanation) -> Dict:
            return {
                "node": s.node.to_dict(),
                "final_losses": [v.final_loss for v in s.vectors],
                "grids": [list(v.size) for v in s.vectors],
                "support_pixels": int(s.cam.support.sum()),
            }

        cfg = self.config or MDMConfig()
        return {
            "predicted_class": self.predicted_class,
            "gamma": cfg.gamma,
            "D": len(self.image_side.vectors),
            "alpha": cfg.alpha,
            "beta": cfg.beta,
            "eta": cfg.eta,
            "steps": cfg.steps,
            "image": side(self.image_side),
            "prototype": side(self.prototype_side) if self.prototype_side else None,
        }

    def save(self, out_dir: str | Path) -> Path:
        """
        Écrit ``cam_*.ppm`` (P5), ``heatmap_*.ppm`` et ``binary_*.ppm`` (P6),
        l'image source du prototype et ``bundle.json``.
        """
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        sides = [("x", self.image_side)]
        if self.prototype_side is not None:
            sides.append(("prototype", self.prototype_side))
            write_ppm(out / "prototype_source.ppm", self.prototype_image)
        for name, s in sides:
            write_pgm(out / f"cam_{name}.ppm", s.cam.values)
            write_ppm(out / f"heatmap_{name}.ppm", s.heatmap)
            write_ppm(out / f"binary_{name}.ppm", s.binary)
        (out / "bundle.json").write_text(
            json.dumps(self.metadata(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
        logger.info("Explication écrite dans %s", out)
        return out


def _explain_side(model: ProtoModel, node: DetectionNode, image: np.ndarray, cfg: MDMConfig) -> SideExplanation:
    vectors = _optimize_for(node, image, cfg, model)
    height, width = image.shape[:2]
    cam = mix_cam(vectors, cfg.gamma, height, width)
    heatmap, binary = render_explanations(image, cam, cfg.alpha, cfg.beta)
    return SideExplanation(node, vectors, cam, heatmap, binary)


def image_cam(model: ProtoModel, x: np.ndarray, cfg: Optional[MDMConfig] = None,
              class_id: Optional[int] = None) -> Cam:
    """
    Carte de ``x`` seule, sans le côté prototype (utilisée par l'évaluation).

    ``class_id`` fixe la classe expliquée ; par défaut, la classe prédite.
    """
    cfg = cfg or model.cfg.mdm
    x = _check_image(model, x)
    node = select_detection_node(model, x, class_id)
    vectors = _optimize_for(node, x, cfg, model)
    return mix_cam(vectors, cfg.gamma, x.shape[0], x.shape[1])


def _source_image(model: ProtoModel, prototype_id: int) -> Optional[np.ndarray]:
    source = model.sources[prototype_id]
    if source is None or not source.image_path:
        return None
    try:
        return read_image(source.image_path, mode="RGB")
    except Exception as e:  # image source déplacée ou illisible
        logger.warning("Image source du prototype %d illisible (%s) : %s", prototype_id, source.image_path, e)
        return None


def explain(model: ProtoModel, x: np.ndarray, cfg: Optional[MDMConfig] = None, threads: int = 1) -> ExplanationBundle:
    """
    Explication complète d'une image.

    Les deux optimisations (image et image source du prototype) sont
    indépendantes et peuvent tourner en parallèle.

    Raises:
        UntrainedModelError: Modèle jamais entraîné.
        ShapeMismatchError: Image de mauvaise forme.
    """
    cfg = cfg or model.cfg.mdm
    x = _check_image(model, x)
    node = select_detection_node(model, x)
    jobs = [(node, x)]
    source = _source_image(model, node.prototype_id)
    if source is None:
        logger.warning("Prototype %d sans provenance : explication limitée à l'image", node.prototype_id)
    else:
        jobs.append((prototype_detection_node(model, source, node.prototype_id), source))
    sides = parallel_map(lambda job: _explain_side(model, job[0], job[1], cfg), jobs, threads)
    return ExplanationBundle(x, node.class_id, sides[0], sides[1] if len(sides) > 1 else None, source, cfg)


# ----------------------------------------------------------------------
#  PROPRIÉTÉ D'ORDRE
# ----------------------------------------------------------------------
@dataclass
class OrderingReport:
    contributions: np.ndarray
    masks: np.ndarray
    violations: List[Tuple[int, int, float]]
    spearman: float

    @property
    def ok(self) -> bool:
        return not self.violations


def additive_node(contributions: Sequence[float]) -> DetectionNode:
    """
    Nœud additif sur une image ``1 × R`` : ``f = Σ_k I_k (2 v_k - v_k²)``.

    Chaque région ``k`` est un pixel ; la réponse de la région croît avec sa
    valeur ``v_k`` et pèse ``I_k``. La cible est ``f`` sur l'image entière
    (tous les pixels à 1), soit ``Σ_k I_k``.
    """
    weights = Tensor(np.asarray(contributions, dtype=np.float64).reshape(1, 1, -1, 1))

    def fn(images: Tensor) -> Tensor:
        gain = ad.sub(ad.mul_scalar(images, 2.0), ad.square(images))
        return ad.reduce_sum(ad.mul(gain, weights), axis=(1, 2, 3))

    return custom_node(fn, float(np.sum(contributions)))


def ordering_property_harness(contributions: Sequence[float], eta: float = 0.04, steps: int = 4000,
                              lr: float = 0.1, tau: float = 0.5, tol: float = 1e-3) -> OrderingReport:
    """
    Vérifie que les masques optimisés respectent l'ordre des contributions.

    Une région qui contribue plus à la réponse du nœud doit recevoir une
    valeur de masque au moins aussi grande : pour chaque couple,
    ``(I_a - I_b)(m_a - m_b) >= -tol``.

    Returns:
        OrderingReport: Masques convergés, couples en violation et ρ de Spearman.
    """
    contributions = np.asarray(contributions, dtype=np.float64)
    regions = len(contributions)
    image = np.ones((1, regions, 1))
    vector = optimize_mask_vector(additive_node(contributions), image, (1, regions), steps, lr, eta, tau)
    masks = vector.grid[0]
    violations = []
    for a in range(regions):
        for b in range(a + 1, regions):
            product = (contributions[a] - contributions[b]) * (masks[a] - masks[b])
            if product < -tol:
                violations.append((a, b, float(product)))
    if regions > 1 and np.ptp(contributions) > 0 and np.ptp(masks) > 0:
        rho, _ = spearmanr(contributions, masks)
        rho = float(rho)
    else:
        rho = float("nan")
    if violations:
        logger.warning("Propriété d'ordre violée pour %d couple(s)", len(violations))
    return OrderingReport(contributions, masks, violations, rho)
