"""Dynamic token dropping between the attention and MLP blocks.

Row 0 of a token matrix is the class token.  It is never ranked or dropped.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import InvalidArgument
from .staticprune import keep_count

DEFAULT_TDM_LAYERS = (3, 7, 10)


@dataclass(frozen=True)
class TokenRouting:
    """Where each input token goes: ``(id_old, id_new, flag)`` with flag 1 = kept.

    Kept tokens (class token included) get ``id_new`` in ``[0, kept)``; dropped
    tokens point at the fused row, ``id_new == kept``.
    """

    entries: tuple[tuple[int, int, int], ...]
    kept: int

    @property
    def n_in(self) -> int:
        return len(self.entries)

    @property
    def n_out(self) -> int:
        return self.kept + (1 if self.kept < self.n_in else 0)

    @property
    def dropped(self) -> tuple[int, ...]:
        return tuple(o for o, _, f in self.entries if not f)

    def kept_order(self) -> list[int]:
        """Old ids of kept tokens, listed by new id."""
        order = [0] * self.kept
        for old, new, flag in self.entries:
            if flag:
                order[new] = old
        return order

    def is_identity(self) -> bool:
        return all(o == n and f for o, n, f in self.entries)

    def to_json(self) -> dict:
        return {"kept": self.kept, "entries": [list(e) for e in self.entries]}

    @classmethod
    def identity(cls, n: int) -> "TokenRouting":
        return cls(tuple((i, i, 1) for i in range(n)), n)


def kept_tokens(n: int, r_t: float) -> int:
    """Non-class tokens that survive: ``ceil((n - 1) * r_t)``."""
    return keep_count(n - 1, r_t)


def tokens_after(n: int, r_t: float) -> int:
    k = kept_tokens(n, r_t)
    return n if k == n - 1 else k + 2


def importance_scores(attn_heads) -> np.ndarray:
    """Mean over heads of the class-token attention row."""
    a = np.asarray(attn_heads, dtype=np.float64)
    if a.ndim == 2:
        a = a[None]
    if a.ndim != 3 or a.shape[0] < 1 or a.shape[1] != a.shape[2]:
        raise InvalidArgument(f"expected (H, N, N) attention maps, got shape {a.shape}")
    return a[:, 0, :].mean(axis=0)


def rank_tokens(scores) -> list[int]:
    """Non-class token ids by descending score, smaller id first on ties."""
    s = np.asarray(scores, dtype=np.float64)
    body = np.arange(1, s.size)
    return [int(i) for i in body[np.argsort(-s[1:], kind="stable")]]


def routing_from_order(n: int, order: Sequence[int], k: int) -> TokenRouting:
    """Routing that keeps the first ``k`` ids of ``order`` (a ranking of 1..n-1)."""
    if k >= n - 1:
        return TokenRouting.identity(n)
    new = {0: 0}
    for pos, old in enumerate(order[:k]):
        new[old] = pos + 1
    entries = tuple((i, new[i], 1) if i in new else (i, k + 1, 0) for i in range(n))
    return TokenRouting(entries, k + 1)


def fuse(z: np.ndarray, scores, routing: TokenRouting) -> np.ndarray:
    """Build the output token matrix for ``routing``: kept rows then the fused row."""
    if routing.is_identity():
        return z
    s = np.asarray(scores, dtype=np.float64)
    kept = routing.kept_order()
    dropped = np.array(routing.dropped)
    w = s[dropped]
    total = w.sum()
    w = w / total if total > 0 else np.full(len(dropped), 1.0 / len(dropped))
    fused = w @ z[dropped]
    return np.vstack([z[kept], fused[None, :]])


def select_and_fuse(z, scores, r_t: float):
    z = np.asarray(z, dtype=np.float64)
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    if z.ndim != 2 or z.shape[0] < 2:
        raise InvalidArgument(f"token dropping needs at least 2 tokens, got shape {z.shape}")
    if s.size != z.shape[0]:
        raise InvalidArgument(f"{s.size} scores for {z.shape[0]} tokens")
    if not (0 < r_t <= 1):
        raise InvalidArgument(f"r_t must be in (0, 1], got {r_t}")
    n = z.shape[0]
    routing = routing_from_order(n, rank_tokens(s), kept_tokens(n, r_t))
    return fuse(z, s, routing), routing


def tdm_layers(layers: Iterable[int] = DEFAULT_TDM_LAYERS, depth: int = 12) -> frozenset[int]:
    """Validate 1-based encoder indices that host a token dropping module."""
    out = frozenset(int(x) for x in layers)
    bad = [x for x in out if not 1 <= x <= depth]
    if bad:
        raise InvalidArgument(f"TDM layers {sorted(bad)} outside 1..{depth}")
    return out


def token_trajectory(n: int, depth: int, layers: Iterable[int], r_t: float, overrides=None) -> list[int]:
    """Token count entering each encoder, plus the final count."""
    layers = tdm_layers(layers, depth)
    overrides = overrides or {}
    counts = [n]
    for j in range(1, depth + 1):
        if j in layers:
            n = tokens_after(n, overrides.get(j, r_t))
        counts.append(n)
    return counts
