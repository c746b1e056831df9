# -*- coding: utf-8 -*-
"""
parallel.py

Exécution parallèle à ordre préservé.

Avec ``threads = 1`` tout s'exécute dans le fil appelant ; au-delà, les
tâches sont réparties sur un ``ThreadPoolExecutor``, ou sur un
``ProcessPoolExecutor`` quand ``processes`` est vrai. Les calculs de
l'autodifférentiation enchaînent de petites opérations numpy qui gardent
le GIL : seuls des processus les font réellement tourner en parallèle.
Dans ce cas ``fn`` et les éléments doivent pouvoir être sérialisés par
``pickle`` (fonction définie au niveau d'un module, pas de lambda).

Les résultats sont toujours rendus dans l'ordre des entrées, donc
identiques quel que soit le nombre de fils ou de processus.
"""

from __future__ import annotations

from concurrent.futures import Executor, ProcessPoolExecutor, ThreadPoolExecutor
from typing import Callable, Iterable, List, TypeVar

T = TypeVar("T")
R = TypeVar("R")


def parallel_map(fn: Callable[[T], R], items: Iterable[T], threads: int = 1, processes: bool = False) -> List[R]:
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    workers = min(threads, len(items))
    pool: Executor = ProcessPoolExecutor(max_workers=workers) if processes else ThreadPoolExecutor(max_workers=workers)
    with pool:
        return list(pool.map(fn, items))
