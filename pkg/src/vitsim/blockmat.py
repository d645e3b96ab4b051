"""Block-partitioned matrix formats and reference block matrix products.

Dense matrices are held as a 4-D array ``blocks[i, j]`` of ``b x b`` tiles so
the flat ``data`` view is block-wise row-major: every tile is contiguous and the
tiles of one block row follow each other.  Sparse weights are stored column by
column; each block column carries a header with the (strictly increasing) block
row indices of its surviving tiles.

Every product in this module accumulates an output block column as::

    acc = 0
    for idx in header:        # header order
        acc += X[:, idx] @ W[idx, c]

and nothing else in the package is allowed to reorder that sum.  The simulator
reuses :func:`column_product` so its results are bit-identical to the reference.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import InvalidArgument


def ceil_div(a: int, b: int) -> int:
    return -(-a // b)


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class PruneMask:
    """Binary keep/prune decision per weight block."""

    grid: np.ndarray

    def __post_init__(self):
        g = np.asarray(self.grid)
        if g.ndim != 2:
            raise InvalidArgument(f"mask grid must be 2-D, got shape {g.shape}")
        if g.dtype != bool:
            if not np.isin(g, (0, 1)).all():
                raise InvalidArgument("mask entries must be 0 or 1")
            g = g.astype(bool)
        object.__setattr__(self, "grid", _frozen(g.copy()))

    @property
    def shape(self) -> tuple[int, int]:
        return self.grid.shape

    @property
    def ones(self) -> int:
        return int(self.grid.sum())

    @property
    def keep_rate(self) -> float:
        return self.ones / self.grid.size

    def __eq__(self, other):
        return isinstance(other, PruneMask) and np.array_equal(self.grid, other.grid)

    @classmethod
    def full(cls, m: int, n: int) -> "PruneMask":
        return cls(np.ones((m, n), dtype=bool))


@dataclass(frozen=True)
class ColumnProfile:
    """Present-block count of every block column, out of ``rows`` block rows."""

    counts: tuple[int, ...]
    rows: int

    @property
    def phi(self) -> tuple[float, ...]:
        if self.rows == 0:
            return tuple(0.0 for _ in self.counts)
        return tuple(c / self.rows for c in self.counts)


class BlockDenseMatrix:
    """Dense matrix split into ``b x b`` tiles, zero-padded to whole tiles."""

    __slots__ = ("blocks", "shape")

    def __init__(self, blocks: np.ndarray, shape: tuple[int, int]):
        if blocks.ndim != 4 or blocks.shape[2] != blocks.shape[3]:
            raise InvalidArgument(f"blocks must be (m, n, b, b), got {blocks.shape}")
        b = blocks.shape[2]
        m, n = blocks.shape[:2]
        rows, cols = shape
        if not (ceil_div(rows, b) == m and ceil_div(cols, b) == n):
            raise InvalidArgument(f"logical shape {shape} does not fit a {m}x{n} grid of b={b}")
        self.blocks = _frozen(np.ascontiguousarray(blocks, dtype=np.float64))
        self.shape = (int(rows), int(cols))

    @property
    def b(self) -> int:
        return self.blocks.shape[2]

    @property
    def grid(self) -> tuple[int, int]:
        return self.blocks.shape[:2]

    @property
    def rows(self) -> int:
        return self.blocks.shape[0] * self.b

    @property
    def cols(self) -> int:
        return self.blocks.shape[1] * self.b

    @property
    def data(self) -> np.ndarray:
        return self.blocks.reshape(-1)

    def block(self, i: int, j: int) -> np.ndarray:
        return self.blocks[i, j]

    def column_slab(self, j: int) -> np.ndarray:
        """Block column ``j`` as a contiguous ``(rows, b)`` array."""
        m, b = self.blocks.shape[0], self.b
        return np.ascontiguousarray(self.blocks[:, j]).reshape(m * b, b)

    def padded(self) -> np.ndarray:
        m, n, b, _ = self.blocks.shape
        return self.blocks.transpose(0, 2, 1, 3).reshape(m * b, n * b)

    def to_array(self) -> np.ndarray:
        r, c = self.shape
        return np.array(self.padded()[:r, :c])

    def __eq__(self, other):
        return (
            isinstance(other, BlockDenseMatrix)
            and self.shape == other.shape
            and np.array_equal(self.blocks, other.blocks)
        )

    def __repr__(self):
        return f"BlockDenseMatrix(shape={self.shape}, b={self.b}, grid={self.grid})"


class BlockSparseMatrix:
    """Weight matrix holding only unpruned tiles, block-column-major.

    ``headers[c]`` lists the block rows present in block column ``c`` and
    ``blocks[c]`` is a ``(len(headers[c]), b, b)`` array in the same order.
    """

    __slots__ = ("shape", "b", "grid", "headers", "blocks")

    def __init__(self, shape, b: int, headers: Sequence, blocks: Sequence):
        rows, cols = (int(s) for s in shape)
        m, n = ceil_div(rows, b), ceil_div(cols, b)
        if len(headers) != n or len(blocks) != n:
            raise InvalidArgument(f"expected {n} column records, got {len(headers)}/{len(blocks)}")
        hs, bs = [], []
        for c, (h, blk) in enumerate(zip(headers, blocks)):
            h = np.asarray(h, dtype=np.int64).reshape(-1)
            blk = np.asarray(blk, dtype=np.float64).reshape(-1, b, b)
            if len(h) != len(blk):
                raise InvalidArgument(f"column {c}: {len(h)} header entries but {len(blk)} blocks")
            if len(h) and (h[0] < 0 or h[-1] >= m or np.any(np.diff(h) <= 0)):
                raise InvalidArgument(f"column {c}: header must be strictly increasing in [0, {m})")
            hs.append(_frozen(h.copy()))
            bs.append(_frozen(np.ascontiguousarray(blk).copy()))
        self.shape = (rows, cols)
        self.b = int(b)
        self.grid = (m, n)
        self.headers = tuple(hs)
        self.blocks = tuple(bs)

    @property
    def nnz_blocks(self) -> int:
        return sum(len(h) for h in self.headers)

    def column_counts(self) -> tuple[int, ...]:
        return tuple(len(h) for h in self.headers)

    def column_profile(self) -> ColumnProfile:
        return ColumnProfile(self.column_counts(), self.grid[0])

    def mask(self) -> PruneMask:
        g = np.zeros(self.grid, dtype=bool)
        for c, h in enumerate(self.headers):
            g[h, c] = True
        return PruneMask(g)

    def __eq__(self, other):
        return (
            isinstance(other, BlockSparseMatrix)
            and self.shape == other.shape
            and self.b == other.b
            and all(np.array_equal(x, y) for x, y in zip(self.headers, other.headers))
            and all(np.array_equal(x, y) for x, y in zip(self.blocks, other.blocks))
        )

    def __repr__(self):
        return f"BlockSparseMatrix(shape={self.shape}, b={self.b}, nnz_blocks={self.nnz_blocks})"


def partition_dense(matrix, b: int) -> BlockDenseMatrix:
    a = np.asarray(matrix, dtype=np.float64)
    if b <= 0:
        raise InvalidArgument(f"block size must be positive, got {b}")
    if a.ndim != 2 or min(a.shape) < 1:
        raise InvalidArgument(f"expected a non-empty 2-D matrix, got shape {a.shape}")
    rows, cols = a.shape
    m, n = ceil_div(rows, b), ceil_div(cols, b)
    padded = np.zeros((m * b, n * b))
    padded[:rows, :cols] = a
    blocks = padded.reshape(m, b, n, b).transpose(0, 2, 1, 3)
    return BlockDenseMatrix(blocks, (rows, cols))


def _as_grid(mask) -> np.ndarray:
    return mask.grid if isinstance(mask, PruneMask) else PruneMask(mask).grid


def compress(dense: BlockDenseMatrix, mask) -> BlockSparseMatrix:
    g = _as_grid(mask)
    if g.shape != dense.grid:
        raise InvalidArgument(f"mask grid {g.shape} != block grid {dense.grid}")
    headers, blocks = [], []
    for c in range(g.shape[1]):
        h = np.flatnonzero(g[:, c])
        headers.append(h)
        blocks.append(dense.blocks[h, c])
    return BlockSparseMatrix(dense.shape, dense.b, headers, blocks)


def decompress(sparse: BlockSparseMatrix) -> BlockDenseMatrix:
    m, n = sparse.grid
    b = sparse.b
    out = np.zeros((m, n, b, b))
    for c, (h, blk) in enumerate(zip(sparse.headers, sparse.blocks)):
        out[h, c] = blk
    return BlockDenseMatrix(out, sparse.shape)


def sparse_from_array(matrix, b: int, mask=None) -> BlockSparseMatrix:
    """Partition ``matrix`` and keep the tiles selected by ``mask`` (all by default)."""
    dense = partition_dense(matrix, b)
    if mask is None:
        mask = PruneMask.full(*dense.grid)
    return compress(dense, mask)


def column_product(x: BlockDenseMatrix, header, blocks) -> np.ndarray:
    """One output block column: sum over ``header`` of ``X[:, idx] @ W[idx, c]``."""
    acc = np.zeros((x.rows, x.b))
    for idx, blk in zip(header, blocks):
        acc += x.column_slab(int(idx)) @ blk
    return acc


def _check_operands(x: BlockDenseMatrix, w_shape, w_b):
    if x.b != w_b:
        raise InvalidArgument(f"block size mismatch: X has b={x.b}, W has b={w_b}")
    if x.shape[1] != w_shape[0]:
        raise InvalidArgument(f"inner dimension mismatch: X is {x.shape}, W is {tuple(w_shape)}")


def assemble_columns(x: BlockDenseMatrix, n_cols: int, out_cols: int, columns: dict) -> BlockDenseMatrix:
    """Stack per-column results (``{c: (rows, b) array}``) into a block matrix."""
    m, b = x.grid[0], x.b
    out = np.zeros((m, n_cols, b, b))
    for c, col in columns.items():
        out[:, c] = col.reshape(m, b, b)
    return BlockDenseMatrix(out, (x.shape[0], out_cols))


def sbmm_ref(x: BlockDenseMatrix, w: BlockSparseMatrix) -> BlockDenseMatrix:
    _check_operands(x, w.shape, w.b)
    cols = {c: column_product(x, h, blk) for c, (h, blk) in enumerate(zip(w.headers, w.blocks)) if len(h)}
    return assemble_columns(x, w.grid[1], w.shape[1], cols)


def dbmm_ref(x: BlockDenseMatrix, w: BlockDenseMatrix) -> BlockDenseMatrix:
    _check_operands(x, w.shape, w.b)
    header = np.arange(w.grid[0])
    cols = {c: column_product(x, header, w.blocks[:, c]) for c in range(w.grid[1])}
    return assemble_columns(x, w.grid[1], w.shape[1], cols)
