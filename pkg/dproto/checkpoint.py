# -*- coding: utf-8 -*-
"""
checkpoint.py

Sauvegarde et chargement binaires d'un modèle.

Format ::

    b"DPROTO1\\n"                      nombre magique (8 octets)
    longueur de l'en-tête            entier non signé 64 bits, petit-boutiste
    en-tête JSON (UTF-8, clés triées) configuration, noms de classes,
                                     répertoire des tenseurs
                                     (nom -> forme, décalage, longueur en octets),
                                     époques, provenance des prototypes
    charge utile                     tenseurs float64 petit-boutistes concaténés
                                     dans l'ordre des noms

Les décalages partitionnent exactement la charge utile ; l'écriture étant
entièrement déterministe, ``save(load(save(m)))`` redonne les mêmes octets.
"""

from __future__ import annotations

import json
import logging
import struct
from pathlib import Path
from typing import Any, Dict

import numpy as np

from dproto.config import RunConfig
from dproto.errors import ConfigError, DataError
from dproto.model import ProtoModel
from dproto.protolayer import PrototypeSource

logger = logging.getLogger(__name__)

MAGIC = b"DPROTO1\n"
FORMAT_VERSION = 1


def _source_to_dict(source) -> Any:
    if source is None:
        return None
    return {
        "image_id": source.image_id,
        "mask_ids": list(source.mask_ids),
        "augmentations": source.augmentations,
        "image_path": source.image_path,
    }


def _source_from_dict(data) -> Any:
    if data is None:
        return None
    return PrototypeSource(int(data["image_id"]), [int(i) for i in data["mask_ids"]],
                           int(data["augmentations"]), data.get("image_path"))


def save_bytes(model: ProtoModel) -> bytes:
    """Sérialise le modèle en mémoire."""
    tensors = model.state_tensors()
    directory: Dict[str, Dict[str, Any]] = {}
    blobs = []
    offset = 0
    for name in sorted(tensors):
        blob = np.ascontiguousarray(tensors[name], dtype="<f8").tobytes()
        directory[name] = {"shape": list(tensors[name].shape), "offset": offset, "length": len(blob)}
        blobs.append(blob)
        offset += len(blob)
    header = {
        "format_version": FORMAT_VERSION,
        "config": model.cfg.to_dict(),
        "class_names": model.class_names,
        "epochs_trained": model.epochs_trained,
        "prototype_sources": [_source_to_dict(s) for s in model.sources],
        "tensors": directory,
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(head)) + head + b"".join(blobs)


def save(model: ProtoModel, path: str | Path) -> Path:
    """
    Écrit le point de contrôle.

    Args:
        model (ProtoModel): Modèle à sauvegarder.
        path (str | Path): Fichier de destination.

    Returns:
        Path: Chemin écrit.
    """
    path = Path(path)
    path.write_bytes(save_bytes(model))
    logger.info("Point de contrôle écrit : %s", path)
    return path


def load_bytes(data: bytes, origin: str = "<mémoire>") -> ProtoModel:
    """
    Reconstruit un modèle à partir de ses octets.

    Raises:
        DataError: Nombre magique, en-tête ou charge utile invalides.
        ConfigError: Configuration embarquée invalide.
    """
    if not data.startswith(MAGIC):
        raise DataError(f"{origin} : nombre magique absent (attendu {MAGIC!r})")
    if len(data) < len(MAGIC) + 8:
        raise DataError(f"{origin} : en-tête tronqué à l'octet {len(data)}")
    (length,) = struct.unpack("<Q", data[len(MAGIC):len(MAGIC) + 8])
    start = len(MAGIC) + 8
    if len(data) < start + length:
        raise DataError(f"{origin} : en-tête tronqué à l'octet {len(data)} (attendu {start + length})")
    try:
        header = json.loads(data[start:start + length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DataError(f"{origin} : en-tête JSON invalide ({e})") from None
    if header.get("format_version") != FORMAT_VERSION:
        raise DataError(f"{origin} : version {header.get('format_version')!r} non prise en charge")

    payload = memoryview(data)[start + length:]
    tensors: Dict[str, np.ndarray] = {}
    expected = 0
    for name, entry in sorted(header["tensors"].items(), key=lambda kv: kv[1]["offset"]):
        shape = tuple(entry["shape"])
        offset, size = int(entry["offset"]), int(entry["length"])
        if offset != expected or size != 8 * int(np.prod(shape, dtype=np.int64)):
            raise DataError(f"{origin} : tenseur {name} mal placé (décalage {offset}, longueur {size})")
        if offset + size > len(payload):
            raise DataError(f"{origin} : charge utile tronquée (tenseur {name}, octet {start + length + len(payload)})")
        tensors[name] = np.frombuffer(payload[offset:offset + size], dtype="<f8").astype(np.float64).reshape(shape)
        expected = offset + size
    if expected != len(payload):
        raise DataError(f"{origin} : {len(payload) - expected} octet(s) en trop après la charge utile")

    try:
        cfg = RunConfig.from_dict(header["config"])
    except KeyError:
        raise ConfigError(f"{origin} : configuration absente de l'en-tête") from None
    model = ProtoModel.build(cfg, header.get("class_names"))
    model.load_state_tensors(tensors)
    model.epochs_trained = int(header.get("epochs_trained", 0))
    sources = header.get("prototype_sources") or [None] * model.num_prototypes
    model.sources = [_source_from_dict(s) for s in sources]
    return model


def load(path: str | Path) -> ProtoModel:
    """
    Charge un point de contrôle.

    Raises:
        DataError: Fichier absent ou invalide.
    """
    path = Path(path)
    try:
        data = path.read_bytes()
    except FileNotFoundError:
        raise DataError(f"Point de contrôle introuvable : {path}") from None
    model = load_bytes(data, str(path))
    logger.info("Point de contrôle chargé : %s (%d époque(s))", path, model.epochs_trained)
    return model
