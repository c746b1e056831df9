# -*- coding: utf-8 -*-
"""
autodiff.py

Différentiation automatique en mode inverse sur des tableaux numpy denses.

Ce module fournit :

- la classe :class:`Tensor`, qui porte un tableau ``float64`` et, si
  ``requires_grad`` est vrai, un gradient de même forme ;
- les opérations différentiables nécessaires au réseau (convolution,
  max-pooling, ReLU, log, moyenne globale, suréchantillonnage bilinéaire,
  réductions, distance euclidienne au carré, entropie croisée...) ;
- la classe :class:`Graph` (ordre topologique des nœuds exécutés) et la
  fonction :func:`backward` qui la parcourt en ordre inverse ;
- :func:`gradient_check`, l'oracle par différences finies centrées utilisé
  par les tests.

Chaque passe avant construit un graphe neuf : aucun graphe n'est réutilisé
d'une itération à l'autre. Les nœuds ne sont enregistrés que si au moins une
entrée exige un gradient.
"""

from __future__ import annotations

import logging
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from dproto.errors import NonFiniteError, ShapeMismatchError

logger = logging.getLogger(__name__)

GradFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


class Tensor:
    """
    Tableau réel dense participant au graphe de différentiation.

    Les données sont toujours stockées en ``float64``, en ordre ligne par
    ligne (convention numpy). Une feuille avec ``requires_grad=True`` reçoit
    un gradient initialisé à zéro ; les gradients s'accumulent d'un appel
    de :func:`backward` à l'autre jusqu'à :meth:`zero_grad`.
    """

    def __init__(self, data, requires_grad: bool = False, *, _op: str = "leaf"):
        """
        Args:
            data: Valeurs (scalaire, liste, tableau numpy).
            requires_grad (bool): Si True, la feuille accumule d(perte)/d(feuille).
        """
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = (
            np.zeros_like(self.data) if self.requires_grad else None
        )
        self._parents: Tuple[Tensor, ...] = ()
        self._grad_fn: Optional[GradFn] = None
        self._op = _op
        # indices de l'argmax, renseignés par les réductions max
        self.argmax: Optional[np.ndarray] = None

    # ------------------------------------------------------------------
    # Accès
    # ------------------------------------------------------------------
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        """Copie des valeurs, détachée du graphe."""
        return self.data.copy()

    def detach(self) -> "Tensor":
        """Tenseur constant qui partage les mêmes valeurs."""
        return Tensor(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def backward(self) -> "Graph":
        return backward(self)

    def _accumulate(self, grad: np.ndarray) -> None:
        if grad.shape != self.data.shape:
            raise ShapeMismatchError(
                f"gradient de forme {grad.shape} pour un tenseur {self.data.shape}"
            )
        if self.grad is None:
            self.grad = np.array(grad, dtype=np.float64, copy=True)
        else:
            self.grad += grad

    # ------------------------------------------------------------------
    # Opérateurs
    # ------------------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul_scalar(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def relu(self):
        return relu(self)

    def log(self):
        return log(self)

    def square(self):
        return square(self)

    def abs(self):
        return absolute(self)

    def sum(self, axis=None, keepdims: bool = False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def max(self, axis: Optional[int] = None):
        return reduce_max(self, axis=axis)

    def min(self, axis: Optional[int] = None):
        return -reduce_max(-self, axis=axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op='{self._op}'{flag})"


TensorLike = Union[Tensor, np.ndarray, float, int, Sequence]


# ----------------------------------------------------------------------
#  GRAPHE ET PASSE ARRIÈRE
# ----------------------------------------------------------------------
class Graph:
    """
    Enregistrement topologique des opérations exécutées pour une perte.

    ``nodes`` contient chaque nœud différentiable une seule fois, les
    entrées avant les sorties ; la passe arrière le parcourt à l'envers.
    """

    def __init__(self, root: Tensor):
        self.root = root
        self.nodes: List[Tensor] = self._topological_order(root)

    @staticmethod
    def _topological_order(root: Tensor) -> List[Tensor]:
        # DFS itératif : pas de limite de récursion sur les graphes profonds
        order: List[Tensor] = []
        visited = set()
        stack: List[Tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
        return order

    def __len__(self) -> int:
        return len(self.nodes)


def backward(loss: Tensor) -> Graph:
    """
    Propage d(perte)/d(x) vers toutes les feuilles qui exigent un gradient.

    Les gradients des nœuds intermédiaires sont remis à zéro à chaque appel ;
    ceux des feuilles s'accumulent (somme sur les chemins multiples).

    Args:
        loss (Tensor): Perte scalaire.

    Returns:
        Graph: Le graphe parcouru.

    Raises:
        ShapeMismatchError: Si la perte n'est pas scalaire.
    """
    if loss.data.size != 1:
        raise ShapeMismatchError(
            f"backward : la perte doit être scalaire, forme reçue {loss.shape}"
        )
    graph = Graph(loss)
    if not loss.requires_grad:
        logger.debug("backward sur une perte constante : aucun gradient")
        return graph

    for node in graph.nodes:
        if not node.is_leaf:
            node.grad = np.zeros_like(node.data)
    loss._accumulate(np.ones_like(loss.data))

    for node in reversed(graph.nodes):
        if node._grad_fn is None:
            continue
        grads = node._grad_fn(node.grad)
        for parent, grad in zip(node._parents, grads):
            if grad is not None and parent.requires_grad:
                parent._accumulate(grad)
    return graph


# ----------------------------------------------------------------------
#  OUTILS INTERNES
# ----------------------------------------------------------------------
def as_tensor(value: TensorLike) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _node(data: np.ndarray, parents: Sequence[Tensor], op: str, grad_fn: GradFn) -> Tensor:
    out = Tensor(data, _op=op)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._grad_fn = grad_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast(kind: str, a: Tensor, b: Tensor) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatchError(
            f"{kind} : formes incompatibles {a.shape} et {b.shape}"
        ) from None


def _normalize_axes(axis, ndim: int) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


# ----------------------------------------------------------------------
#  OPÉRATIONS ÉLÉMENT PAR ÉLÉMENT
# ----------------------------------------------------------------------
def add(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast("add", a, b)
    return _node(
        a.data + b.data, (a, b), "add",
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast("sub", a, b)
    return _node(
        a.data - b.data, (a, b), "sub",
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast("mul", a, b)
    return _node(
        a.data * b.data, (a, b), "mul",
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast("div", a, b)
    return _node(
        a.data / b.data, (a, b), "div",
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        ),
    )


def add_scalar(a: TensorLike, c: float) -> Tensor:
    a = as_tensor(a)
    return _node(a.data + float(c), (a,), "add_scalar", lambda g: (g,))


def mul_scalar(a: TensorLike, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _node(a.data * c, (a,), "mul_scalar", lambda g: (g * c,))


def relu(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _node(np.where(mask, a.data, 0.0), (a,), "relu", lambda g: (g * mask,))


def log(a: TensorLike) -> Tensor:
    """Logarithme népérien ; l'argument doit être strictement positif."""
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise NonFiniteError(f"log : argument non positif (min = {a.data.min():.3e})")
    return _node(np.log(a.data), (a,), "log", lambda g: (g / a.data,))


def square(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    return _node(a.data * a.data, (a,), "square", lambda g: (2.0 * a.data * g,))


def absolute(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    return _node(np.abs(a.data), (a,), "abs", lambda g: (np.sign(a.data) * g,))


# ----------------------------------------------------------------------
#  ALGÈBRE LINÉAIRE ET FORMES
# ----------------------------------------------------------------------
def matmul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatchError(f"matmul : formes incompatibles {a.shape} et {b.shape}")

    def grad_fn(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _node(np.matmul(a.data, b.data), (a, b), "matmul", grad_fn)


def reshape(a: TensorLike, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    try:
        data = a.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeMismatchError(f"reshape : {a.shape} -> {tuple(shape)} impossible") from None
    return _node(data, (a,), "reshape", lambda g: (g.reshape(a.shape),))


def transpose(a: TensorLike, axes: Optional[Sequence[int]] = None) -> Tensor:
    a = as_tensor(a)
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _node(a.data.transpose(axes), (a,), "transpose", lambda g: (g.transpose(inverse),))


def getitem(a: TensorLike, index) -> Tensor:
    a = as_tensor(a)

    def grad_fn(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _node(a.data[index], (a,), "getitem", grad_fn)


def stack(tensors: Sequence[TensorLike], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise ShapeMismatchError(f"stack : formes différentes {sorted(shapes)}")
    data = np.stack([t.data for t in tensors], axis=axis)

    def grad_fn(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _node(data, tensors, "stack", grad_fn)


# ----------------------------------------------------------------------
#  RÉDUCTIONS
# ----------------------------------------------------------------------
def reduce_sum(a: TensorLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _normalize_axes(axis, a.ndim)

    def grad_fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape),)

    return _node(a.data.sum(axis=axes, keepdims=keepdims), (a,), "sum", grad_fn)


def reduce_mean(a: TensorLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _normalize_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return mul_scalar(reduce_sum(a, axis=axes, keepdims=keepdims), 1.0 / count)


def reduce_max(a: TensorLike, axis: Optional[int] = None) -> Tensor:
    """
    Maximum sur un axe (ou sur tout le tenseur), avec argmax enregistré.

    Le gradient est routé entièrement vers l'argmax ; en cas d'égalité,
    ``np.argmax`` retient le plus petit indice.
    """
    a = as_tensor(a)
    if axis is None:
        flat = int(np.argmax(a.data))
        out = _node(
            np.asarray(a.data.reshape(-1)[flat]), (a,), "max",
            lambda g: (_scatter_flat(a.shape, flat, g),),
        )
        out.argmax = np.asarray(flat)
        return out

    axis = axis % a.ndim
    idx = np.argmax(a.data, axis=axis)
    values = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

    def grad_fn(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        return (full,)

    out = _node(values, (a,), "max", grad_fn)
    out.argmax = idx
    return out


def _scatter_flat(shape, flat: int, g: np.ndarray) -> np.ndarray:
    full = np.zeros(int(np.prod(shape)) if shape else 1)
    full[flat] = float(g)
    return full.reshape(shape)


def global_average_pool(a: TensorLike) -> Tensor:
    """Moyenne sur les deux axes spatiaux d'une carte ``(..., H, W, C)``."""
    a = as_tensor(a)
    if a.ndim < 3:
        raise ShapeMismatchError(f"gap : carte (..., H, W, C) attendue, reçu {a.shape}")
    return reduce_mean(a, axis=(a.ndim - 3, a.ndim - 2))


# ----------------------------------------------------------------------
#  DISTANCES ET PERTES
# ----------------------------------------------------------------------
def sq_distance(a: TensorLike, b: TensorLike) -> Tensor:
    """``||a - b||²`` sur le dernier axe, avec diffusion sur les axes de tête."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1:] != b.shape[-1:]:
        raise ShapeMismatchError(f"sq_distance : dimensions {a.shape} et {b.shape}")
    _broadcast("sq_distance", a, b)
    diff = a.data - b.data

    def grad_fn(g):
        d = 2.0 * diff * g[..., None]
        return _unbroadcast(d, a.shape), _unbroadcast(-d, b.shape)

    return _node(np.sum(diff * diff, axis=-1), (a, b), "sq_distance", grad_fn)


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: TensorLike, labels) -> Tensor:
    """
    Entropie croisée moyenne entre ``softmax(logits)`` et des étiquettes entières.

    Args:
        logits (Tensor): Forme ``(B, m)``.
        labels: ``B`` entiers dans ``[0, m)``.

    Returns:
        Tensor: Scalaire.
    """
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeMismatchError(
            f"softmax_cross_entropy : logits {logits.shape}, étiquettes {labels.shape}"
        )
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ShapeMismatchError(
            f"softmax_cross_entropy : étiquette hors de [0, {logits.shape[1]})"
        )
    batch = logits.shape[0]
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    rows = np.arange(batch)
    loss = -log_probs[rows, labels].mean()

    def grad_fn(g):
        probs = np.exp(log_probs)
        probs[rows, labels] -= 1.0
        return (probs * (float(g) / batch),)

    return _node(np.asarray(loss), (logits,), "softmax_cross_entropy", grad_fn)


# ----------------------------------------------------------------------
#  CONVOLUTION, POOLING, SURÉCHANTILLONNAGE
# ----------------------------------------------------------------------
def conv2d(x: TensorLike, weight: TensorLike, bias: Optional[TensorLike] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """
    Convolution 2-D en disposition NHWC.

    Args:
        x (Tensor): ``(B, H, W, C)``.
        weight (Tensor): ``(kh, kw, C, O)``.
        bias (Tensor | None): ``(O,)``.
        stride (int): Pas.
        padding (int): Bourrage par des zéros sur chaque bord.

    Returns:
        Tensor: ``(B, Ho, Wo, O)`` avec ``Ho = (H + 2p - kh) // stride + 1``.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4 or x.shape[3] != weight.shape[2]:
        raise ShapeMismatchError(f"conv2d : entrée {x.shape}, noyau {weight.shape}")
    kh, kw, cin, cout = weight.shape
    batch, height, width, _ = x.shape
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    out_h = (xp.shape[1] - kh) // stride + 1
    out_w = (xp.shape[2] - kw) // stride + 1
    if out_h < 1 or out_w < 1:
        raise ShapeMismatchError(f"conv2d : noyau {kh}x{kw} plus grand que l'entrée {x.shape}")

    windows = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    windows = windows[:, :out_h, :out_w]
    cols = np.ascontiguousarray(windows.transpose(0, 1, 2, 4, 5, 3)).reshape(-1, kh * kw * cin)
    kernel = weight.data.reshape(kh * kw * cin, cout)
    out = (cols @ kernel).reshape(batch, out_h, out_w, cout)

    parents: List[Tensor] = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (cout,):
            raise ShapeMismatchError(f"conv2d : biais {bias.shape}, attendu ({cout},)")
        out = out + bias.data
        parents.append(bias)

    def grad_fn(g):
        g2 = g.reshape(-1, cout)
        grads: List[Optional[np.ndarray]] = [None, None]
        if x.requires_grad:
            dcols = (g2 @ kernel.T).reshape(batch, out_h, out_w, kh, kw, cin)
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, i:i + stride * out_h:stride, j:j + stride * out_w:stride, :] += dcols[:, :, :, i, j, :]
            grads[0] = dxp[:, padding:padding + height, padding:padding + width, :]
        if weight.requires_grad:
            grads[1] = (cols.T @ g2).reshape(weight.shape)
        if bias is not None:
            grads.append(g.sum(axis=(0, 1, 2)))
        return tuple(grads)

    return _node(out, parents, "conv2d", grad_fn)


def max_pool2d(x: TensorLike, size: int = 2, stride: Optional[int] = None) -> Tensor:
    """Max-pooling 2-D NHWC ; le gradient va à l'argmax de chaque fenêtre."""
    x = as_tensor(x)
    stride = stride or size
    if x.ndim != 4 or x.shape[1] < size or x.shape[2] < size:
        raise ShapeMismatchError(f"max_pool2d : fenêtre {size} sur une entrée {x.shape}")
    batch, height, width, channels = x.shape
    out_h = (height - size) // stride + 1
    out_w = (width - size) // stride + 1
    windows = sliding_window_view(x.data, (size, size), axis=(1, 2))[:, ::stride, ::stride]
    windows = windows[:, :out_h, :out_w].reshape(batch, out_h, out_w, channels, size * size)
    idx = np.argmax(windows, axis=-1)
    values = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]

    def grad_fn(g):
        full = np.zeros_like(x.data)
        b = np.arange(batch)[:, None, None, None]
        rows = np.arange(out_h)[None, :, None, None] * stride + idx // size
        cols = np.arange(out_w)[None, None, :, None] * stride + idx % size
        c = np.arange(channels)[None, None, None, :]
        np.add.at(full, (b, rows, cols, c), g)
        return (full,)

    return _node(values, (x,), "max_pool2d", grad_fn)


def bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """
    Matrice ``(n_out, n_in)`` d'interpolation linéaire 1-D.

    Convention ``align_corners=False`` : l'échantillon ``i`` est lu en
    ``(i + 0.5) * n_in / n_out - 0.5``, borné aux extrémités. Chaque ligne
    somme à 1, donc un champ constant est invariant.
    """
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    w1 = src - i0
    matrix = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    np.add.at(matrix, (rows, i0), 1.0 - w1)
    np.add.at(matrix, (rows, i1), w1)
    return matrix


def upsample_bilinear(x: TensorLike, out_size: Tuple[int, int]) -> Tensor:
    """Suréchantillonnage bilinéaire des deux derniers axes ``(..., h, w)``."""
    x = as_tensor(x)
    if x.ndim < 2:
        raise ShapeMismatchError(f"upsample_bilinear : au moins 2 axes, reçu {x.shape}")
    rows = bilinear_matrix(x.shape[-2], int(out_size[0]))
    cols = bilinear_matrix(x.shape[-1], int(out_size[1]))
    out = np.matmul(np.matmul(rows, x.data), cols.T)
    return _node(
        out, (x,), "upsample_bilinear",
        lambda g: (np.matmul(np.matmul(rows.T, g), cols),),
    )


def masked_gap(features: TensorLike, masks: TensorLike) -> Tensor:
    """
    Moyenne globale de ``masks[i] * features[b]`` pour chaque couple (b, i).

    Args:
        features (Tensor): ``(B, H, W, D)``.
        masks (Tensor): ``(n, H, W, D)``.

    Returns:
        Tensor: ``(B, n, D)``.
    """
    features, masks = as_tensor(features), as_tensor(masks)
    if features.ndim != 4 or masks.ndim != 4 or features.shape[1:] != masks.shape[1:]:
        raise ShapeMismatchError(f"masked_gap : carte {features.shape}, masques {masks.shape}")
    area = features.shape[1] * features.shape[2]
    out = np.einsum("ihwd,bhwd->bid", masks.data, features.data) / area

    def grad_fn(g):
        gf = np.einsum("ihwd,bid->bhwd", masks.data, g) / area if features.requires_grad else None
        gm = np.einsum("bhwd,bid->ihwd", features.data, g) / area if masks.requires_grad else None
        return gf, gm

    return _node(out, (features, masks), "masked_gap", grad_fn)


# ----------------------------------------------------------------------
#  REGISTRE
# ----------------------------------------------------------------------
OPS: Dict[str, Callable[..., Tensor]] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "add_scalar": add_scalar,
    "mul_scalar": mul_scalar,
    "matmul": matmul,
    "conv2d": conv2d,
    "max_pool2d": max_pool2d,
    "relu": relu,
    "log": log,
    "square": square,
    "gap": global_average_pool,
    "upsample_bilinear": upsample_bilinear,
    "sum": reduce_sum,
    "mean": reduce_mean,
    "max": reduce_max,
    "sq_distance": sq_distance,
    "abs": absolute,
    "softmax_cross_entropy": softmax_cross_entropy,
    "masked_gap": masked_gap,
    "reshape": reshape,
    "transpose": transpose,
    "stack": stack,
}


def op_forward(kind: str, *inputs, **params) -> Tensor:
    """
    Exécute l'opération ``kind`` et l'enregistre dans le graphe si besoin.

    Raises:
        KeyError: Si ``kind`` n'est pas une opération connue.
        ShapeMismatchError: Si les formes des entrées sont incompatibles.
    """
    try:
        fn = OPS[kind]
    except KeyError:
        raise KeyError(f"Opération inconnue : {kind!r} (connues : {', '.join(sorted(OPS))})") from None
    return fn(*inputs, **params)


# ----------------------------------------------------------------------
#  VÉRIFICATION PAR DIFFÉRENCES FINIES
# ----------------------------------------------------------------------
def _evaluate(f: Callable[[Tensor], Tensor], values: np.ndarray) -> float:
    out = as_tensor(f(Tensor(values)))
    value = float(np.asarray(out.data).reshape(-1)[0])
    if not np.isfinite(value):
        raise NonFiniteError(f"gradient_check : f non finie ({value})")
    return value


def gradient_check(f: Callable[[Tensor], Tensor], x: TensorLike, eps: float = 1e-5, *,
                   atol: float = 1e-6, exclude_kinks: bool = False,
                   kink_tol: Optional[float] = None) -> float:
    """
    Compare le gradient de :func:`backward` aux différences finies centrées.

    L'erreur relative d'une composante vaut ``|a - n| / max(|a|, |n|, atol)``.
    Avec ``exclude_kinks``, les composantes dont la différence seconde
    ``|f(x+e) - 2f(x) + f(x-e)|`` dépasse ``kink_tol`` (par défaut
    ``1e3 * eps² * max(1, |f(x)|)``) sont ignorées : elles sont à moins de
    ``eps`` d'un coude de ReLU ou d'un changement d'argmax.

    Args:
        f: Fonction scalaire différentiable d'un :class:`Tensor`.
        x: Point d'évaluation.
        eps (float): Pas des différences finies (> 0).

    Returns:
        float: Erreur relative maximale sur les composantes retenues.

    Raises:
        ValueError: Si ``eps <= 0``.
        NonFiniteError: Si ``f`` n'est pas finie en ``x`` ou ``x ± eps``.
    """
    if eps <= 0:
        raise ValueError(f"gradient_check : eps doit être > 0 (reçu {eps})")
    base = np.array(as_tensor(x).data, dtype=np.float64, copy=True)
    probe = Tensor(base.copy(), requires_grad=True)
    out = as_tensor(f(probe))
    if out.data.size != 1:
        raise ShapeMismatchError(f"gradient_check : f doit être scalaire, forme {out.shape}")
    f0 = float(out.data.reshape(-1)[0])
    if not np.isfinite(f0):
        raise NonFiniteError(f"gradient_check : f non finie ({f0})")
    backward(out)
    analytic = probe.grad if probe.grad is not None else np.zeros_like(base)

    if kink_tol is None:
        kink_tol = 1e3 * eps * eps * max(1.0, abs(f0))
    worst = 0.0
    for k in range(base.size):
        plus = base.copy()
        plus.flat[k] += eps
        minus = base.copy()
        minus.flat[k] -= eps
        f_plus = _evaluate(f, plus)
        f_minus = _evaluate(f, minus)
        if exclude_kinks and abs(f_plus - 2.0 * f0 + f_minus) > kink_tol:
            continue
        numeric = (f_plus - f_minus) / (2.0 * eps)
        a = float(analytic.flat[k])
        worst = max(worst, abs(a - numeric) / max(abs(a), abs(numeric), atol))
    return worst
