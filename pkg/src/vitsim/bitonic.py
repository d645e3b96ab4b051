"""Bitonic sorting network used by the token dropping hardware model."""

from __future__ import annotations

import math
from typing import Callable, Sequence


def padded_size(n: int) -> int:
    return 1 << max(0, math.ceil(math.log2(n))) if n > 1 else 1


def num_stages(n: int) -> int:
    """Compare-exchange stages for ``n`` inputs padded to a power of two."""
    lg = int(math.log2(padded_size(n)))
    return lg * (lg + 1) // 2


def stage_pairs(n_hat: int):
    """Yield, per stage, the list of ``(i, partner, ascending)`` compare-exchange ops."""
    k = 2
    while k <= n_hat:
        j = k // 2
        while j >= 1:
            ops = []
            for i in range(n_hat):
                partner = i ^ j
                if partner > i:
                    ops.append((i, partner, (i & k) == 0))
            yield ops
            j //= 2
        k *= 2


def bitonic_sort(items: Sequence, before: Callable, pad) -> tuple[list, int]:
    """Sort ``items`` so that ``before(a, b)`` holds for consecutive outputs.

    ``pad`` fills the input up to a power of two and must sort after every
    real item.  Returns the sorted real items and the number of stages run.
    """
    n = len(items)
    n_hat = padded_size(n)
    a = list(items) + [pad] * (n_hat - n)
    stages = 0
    for ops in stage_pairs(n_hat):
        for i, p, asc in ops:
            # asc: a[i] should come first in the final order
            if before(a[p], a[i]) if asc else before(a[i], a[p]):
                a[i], a[p] = a[p], a[i]
        stages += 1
    return a[:n], stages
