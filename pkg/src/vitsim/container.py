"""Binary tensor container (``.vsbm``).

Layout, all integers little-endian::

    magic   4 bytes  b"VSBM"
    version u32      currently 1
    count   u32      number of records
    record * count:
        name_len u16, name (utf-8)
        dtype    u8   0=f64 1=f32 2=i64 3=u8
        layout   u8   0=plain 1=dense-block 2=sparse-block 3=mask (sparse headers, no payload)
        ndim     u8,  dims u32 * ndim      (logical shape)
        b        u32  block size (0 for plain)
        [layout 2, 3]  ncols u32, then per column: count u32, row indices u32 * count
        nbytes   u64, payload

Plain payloads are C-order.  Dense-block payloads are block-wise row-major
(tile after tile along a block row, each tile row-major).  Sparse payloads
hold the surviving tiles column after column in header order.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import BinaryIO, Mapping

import numpy as np

from .blockmat import BlockDenseMatrix, BlockSparseMatrix, PruneMask, ceil_div
from .errors import InvalidArgument

MAGIC = b"VSBM"
VERSION = 1

PLAIN, DENSE_BLOCK, SPARSE_BLOCK, MASK = 0, 1, 2, 3
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4"), 2: np.dtype("<i8"), 3: np.dtype("u1")}


def _dtype_code(dt) -> int:
    dt = np.dtype(dt)
    if dt == np.bool_:
        return 3
    for code, d in _DTYPES.items():
        if dt.kind == d.kind and dt.itemsize == d.itemsize:
            return code
    raise InvalidArgument(f"unsupported dtype {dt}")


def _write_headers(f: BinaryIO, headers):
    f.write(struct.pack("<I", len(headers)))
    for h in headers:
        f.write(struct.pack("<I", len(h)))
        f.write(np.asarray(h, dtype="<u4").tobytes())


def _write_record(f: BinaryIO, name: str, value):
    raw = name.encode("utf-8")
    f.write(struct.pack("<H", len(raw)))
    f.write(raw)
    if isinstance(value, BlockSparseMatrix):
        layout, shape, b, dt = SPARSE_BLOCK, value.shape, value.b, np.float64
        payload = b"".join(np.ascontiguousarray(blk, dtype="<f8").tobytes() for blk in value.blocks)
        headers = value.headers
    elif isinstance(value, BlockDenseMatrix):
        layout, shape, b, dt = DENSE_BLOCK, value.shape, value.b, np.float64
        payload = np.ascontiguousarray(value.blocks, dtype="<f8").tobytes()
        headers = None
    elif isinstance(value, tuple) and len(value) == 2 and isinstance(value[0], PruneMask):
        mask, b = value
        layout, dt, payload = MASK, np.uint8, b""
        shape = (mask.shape[0] * b, mask.shape[1] * b)
        headers = [np.flatnonzero(mask.grid[:, c]) for c in range(mask.shape[1])]
    else:
        arr = np.asarray(value)
        layout, shape, b, dt = PLAIN, arr.shape, 0, arr.dtype
        code = _dtype_code(dt)
        payload = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
        headers = None
    f.write(struct.pack("<BBB", _dtype_code(dt), layout, len(shape)))
    f.write(struct.pack(f"<{len(shape)}I", *shape))
    f.write(struct.pack("<I", b))
    if headers is not None:
        _write_headers(f, headers)
    f.write(struct.pack("<Q", len(payload)))
    f.write(payload)


def dumps(tensors: Mapping) -> bytes:
    import io

    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(tensors)))
    for name, value in tensors.items():
        _write_record(buf, name, value)
    return buf.getvalue()


def save(path, tensors: Mapping):
    path = Path(path)
    try:
        path.write_bytes(dumps(tensors))
    except OSError as e:
        raise OSError(f"cannot write tensor container {path}: {e}") from e


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise InvalidArgument("truncated tensor container")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def loads(data: bytes) -> dict:
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise InvalidArgument("not a VSBM container (bad magic)")
    version, count = r.unpack("<II")
    if version != VERSION:
        raise InvalidArgument(f"unsupported container version {version}")
    out = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        code, layout, ndim = r.unpack("<BBB")
        if code not in _DTYPES:
            raise InvalidArgument(f"{name}: unknown dtype code {code}")
        shape = r.unpack(f"<{ndim}I")
        (b,) = r.unpack("<I")
        headers = None
        if layout in (SPARSE_BLOCK, MASK):
            (ncols,) = r.unpack("<I")
            headers = []
            for _ in range(ncols):
                (k,) = r.unpack("<I")
                headers.append(np.frombuffer(r.take(4 * k), dtype="<u4").astype(np.int64))
        (nbytes,) = r.unpack("<Q")
        payload = r.take(nbytes)
        dt = _DTYPES[code]
        if layout == PLAIN:
            out[name] = np.frombuffer(payload, dtype=dt).reshape(shape).copy()
        elif layout == DENSE_BLOCK:
            m, n = ceil_div(shape[0], b), ceil_div(shape[1], b)
            blocks = np.frombuffer(payload, dtype=dt).reshape(m, n, b, b)
            out[name] = BlockDenseMatrix(blocks.copy(), tuple(shape))
        elif layout == SPARSE_BLOCK:
            flat = np.frombuffer(payload, dtype=dt).reshape(-1, b, b)
            blocks, i = [], 0
            for h in headers:
                blocks.append(flat[i:i + len(h)].copy())
                i += len(h)
            out[name] = BlockSparseMatrix(tuple(shape), b, headers, blocks)
        elif layout == MASK:
            m = ceil_div(shape[0], b)
            g = np.zeros((m, len(headers)), dtype=bool)
            for c, h in enumerate(headers):
                g[h, c] = True
            out[name] = PruneMask(g)
        else:
            raise InvalidArgument(f"{name}: unknown layout code {layout}")
    if r.pos != len(data):
        raise InvalidArgument("trailing bytes after last record")
    return out


def load(path) -> dict:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise OSError(f"cannot read tensor container {path}: {e}") from e
    return loads(data)


# -- model directories -------------------------------------------------------

CONFIG_FILE = "config.json"
WEIGHTS_FILE = "weights.vsbm"
SCORES_FILE = "scores.vsbm"
MASKS_FILE = "masks.vsbm"

_EMBED_FIELDS = ("patch_proj", "patch_bias", "cls_token", "pos_embed", "norm_gain", "norm_bias", "head", "head_bias")
_ENC_FIELDS = ("wq", "wk", "wv", "wproj", "w_int", "w_out", "bq", "bk", "bv", "b_proj", "b_int", "b_out",
               "ln1_gain", "ln1_bias", "ln2_gain", "ln2_bias")


def model_tensors(model) -> dict:
    out = {f"embed.{k}": getattr(model.embedding, k) for k in _EMBED_FIELDS}
    for j, enc in enumerate(model.encoders):
        for k in _ENC_FIELDS:
            out[f"enc{j}.{k}"] = getattr(enc, k)
    return out


def model_from_tensors(config, tensors: Mapping):
    from .vitref import EmbeddingWeights, EncoderWeights, ViTModel

    def get(name):
        if name not in tensors:
            raise InvalidArgument(f"weight container is missing tensor {name!r}")
        return tensors[name]

    emb = EmbeddingWeights(**{k: get(f"embed.{k}") for k in _EMBED_FIELDS})
    encs = []
    for j in range(config.depth):
        kw = {k: get(f"enc{j}.{k}") for k in _ENC_FIELDS}
        for k in ("wq", "wk", "wv", "wproj"):
            if not isinstance(kw[k], BlockSparseMatrix):
                raise InvalidArgument(f"enc{j}.{k} must be stored sparse-block")
        for k in ("w_int", "w_out"):
            if not isinstance(kw[k], BlockDenseMatrix):
                raise InvalidArgument(f"enc{j}.{k} must be stored dense-block")
        encs.append(EncoderWeights(**kw, num_heads=config.num_heads, head_dim=config.head_dim,
                                   mlp_dim=config.mlp_dim))
    return ViTModel(config, emb, tuple(encs))


def scores_tensors(scores) -> dict:
    return {f"enc{j}.{k}": np.asarray(v) for j, sc in enumerate(scores) for k, v in sc.items()}


def scores_from_tensors(tensors: Mapping, depth: int) -> list[dict]:
    out = [{} for _ in range(depth)]
    for name, v in tensors.items():
        layer, key = name.split(".", 1)
        j = int(layer[3:])
        if not 0 <= j < depth:
            raise InvalidArgument(f"score tensor {name!r} is outside the model depth {depth}")
        out[j][key] = v
    return out


def save_model(directory, model, scores=None, masks=None):
    """Write ``config.json`` and ``weights.vsbm`` (plus scores and masks if given)."""
    import json

    d = Path(directory)
    try:
        d.mkdir(parents=True, exist_ok=True)
        (d / CONFIG_FILE).write_text(json.dumps(model.config.to_json(), indent=2, sort_keys=True) + "\n")
    except OSError as e:
        raise OSError(f"cannot write model directory {d}: {e}") from e
    save(d / WEIGHTS_FILE, model_tensors(model))
    if scores is not None:
        save(d / SCORES_FILE, scores_tensors(scores))
    if masks is not None:
        b = model.config.block_size
        t = {}
        for j, m in enumerate(masks):
            for k in ("q", "k", "v", "proj"):
                t[f"enc{j}.{k}"] = (getattr(m, k), b)
            t[f"enc{j}.neurons"] = np.asarray(m.neurons, dtype=np.uint8)
        save(d / MASKS_FILE, t)


def load_config(path):
    import json

    from .vitref import ModelConfig

    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except OSError as e:
        raise OSError(f"cannot read config {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise InvalidArgument(f"{path}: invalid JSON: {e}") from e
    return ModelConfig.from_json(data)


def load_model(directory, weights=None):
    """Load a model directory; returns ``(model, scores or None)``."""
    d = Path(directory)
    cfg = load_config(d / CONFIG_FILE)
    model = model_from_tensors(cfg, load(weights or d / WEIGHTS_FILE))
    scores = None
    if (d / SCORES_FILE).exists():
        scores = scores_from_tensors(load(d / SCORES_FILE), cfg.depth)
    return model, scores
