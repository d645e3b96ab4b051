"""Reference inference for a block-pruned ViT with token dropping.

Matrix products go through :mod:`vitsim.blockmat`; everything else (LayerNorm,
softmax, GELU, residuals, token dropping) is plain numpy on logical-size
arrays.  The encoder is written against a small ``ops`` object so the
accelerator simulator can swap in its scheduled kernels while reusing every
other line of arithmetic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace, asdict
from typing import Sequence

import numpy as np
from scipy.special import erf

from . import blockmat as bm
from . import tokenprune as tp
from .errors import InvalidArgument

LN_EPS = 1e-6


@dataclass(frozen=True)
class ModelConfig:
    depth: int = 12
    num_heads: int = 6
    embed_dim: int = 384
    head_dim: int = 64
    mlp_dim: int = 1536
    image_size: int = 224
    patch_size: int = 16
    in_chans: int = 3
    num_classes: int = 1000
    block_size: int = 16
    tdm_layers: tuple[int, ...] = tp.DEFAULT_TDM_LAYERS
    keep_rate: float = 1.0
    keep_rate_overrides: dict = field(default_factory=dict)
    use_bias: bool = False

    def __post_init__(self):
        object.__setattr__(self, "tdm_layers", tuple(sorted(tp.tdm_layers(self.tdm_layers, self.depth))))
        object.__setattr__(self, "keep_rate_overrides",
                           {int(k): float(v) for k, v in dict(self.keep_rate_overrides).items()})
        if self.embed_dim != self.num_heads * self.head_dim:
            raise InvalidArgument(f"embed_dim {self.embed_dim} != heads {self.num_heads} x head_dim {self.head_dim}")
        if self.image_size % self.patch_size:
            raise InvalidArgument("image_size must be a multiple of patch_size")
        b = self.block_size
        if b <= 0 or self.head_dim % b or self.embed_dim % b:
            raise InvalidArgument(f"head_dim and embed_dim must be multiples of block size {b}")
        for r in (self.keep_rate, *self.keep_rate_overrides.values()):
            if not 0 < r <= 1:
                raise InvalidArgument(f"keep rate must be in (0, 1], got {r}")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def num_tokens(self) -> int:
        return self.num_patches + 1

    @property
    def patch_dim(self) -> int:
        return self.patch_size ** 2 * self.in_chans

    def keep_rate_for(self, layer: int) -> float | None:
        """Keep rate at 1-based ``layer``, or None when that encoder has no TDM."""
        if layer not in self.tdm_layers:
            return None
        return self.keep_rate_overrides.get(layer, self.keep_rate)

    def to_json(self) -> dict:
        d = asdict(self)
        d["tdm_layers"] = list(self.tdm_layers)
        d["keep_rate_overrides"] = {str(k): v for k, v in self.keep_rate_overrides.items()}
        return d

    @classmethod
    def from_json(cls, d: dict) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(d) - known
        if extra:
            raise InvalidArgument(f"unknown config keys: {sorted(extra)}")
        d = dict(d)
        if "tdm_layers" in d:
            d["tdm_layers"] = tuple(d["tdm_layers"])
        return cls(**d)


def deit_small(**kw) -> ModelConfig:
    return ModelConfig(**kw)


def tiny(**kw) -> ModelConfig:
    base = dict(depth=2, num_heads=2, embed_dim=32, head_dim=16, mlp_dim=64, image_size=32,
                patch_size=8, in_chans=3, num_classes=10, block_size=8, tdm_layers=(2,))
    base.update(kw)
    return ModelConfig(**base)


PRESETS = {"deit-small": deit_small, "tiny": tiny}


@dataclass(frozen=True)
class EncoderWeights:
    wq: bm.BlockSparseMatrix
    wk: bm.BlockSparseMatrix
    wv: bm.BlockSparseMatrix
    wproj: bm.BlockSparseMatrix
    w_int: bm.BlockDenseMatrix
    w_out: bm.BlockDenseMatrix
    bq: np.ndarray
    bk: np.ndarray
    bv: np.ndarray
    b_proj: np.ndarray
    b_int: np.ndarray
    b_out: np.ndarray
    ln1_gain: np.ndarray
    ln1_bias: np.ndarray
    ln2_gain: np.ndarray
    ln2_bias: np.ndarray
    num_heads: int
    head_dim: int
    mlp_dim: int

    @property
    def b(self) -> int:
        return self.wq.b

    @property
    def embed_dim(self) -> int:
        return self.wq.shape[0]

    def head_blocks(self) -> int:
        return self.head_dim // self.b

    def live_heads(self) -> list[int]:
        """Heads with at least one block in each of W_q, W_k, W_v columns and W_proj rows."""
        per = self.head_blocks()
        proj_rows = self.wproj.mask().grid.any(axis=1)
        out = []
        for h in range(self.num_heads):
            cols = range(h * per, (h + 1) * per)
            if not all(any(len(w.headers[c]) for c in cols) for w in (self.wq, self.wk, self.wv)):
                continue
            if proj_rows[h * per:(h + 1) * per].any():
                out.append(h)
        return out

    def dense_arrays(self) -> dict:
        """Masked weights as plain arrays (pruned blocks zero)."""
        return {
            "wq": bm.decompress(self.wq).to_array(),
            "wk": bm.decompress(self.wk).to_array(),
            "wv": bm.decompress(self.wv).to_array(),
            "wproj": bm.decompress(self.wproj).to_array(),
            "w_int": self.w_int.to_array(),
            "w_out": self.w_out.to_array(),
        }


@dataclass(frozen=True)
class EmbeddingWeights:
    patch_proj: np.ndarray
    patch_bias: np.ndarray
    cls_token: np.ndarray
    pos_embed: np.ndarray
    norm_gain: np.ndarray
    norm_bias: np.ndarray
    head: np.ndarray
    head_bias: np.ndarray

    def parameter_count(self) -> int:
        return int(sum(np.asarray(v).size for v in asdict(self).values()))


@dataclass(frozen=True)
class ViTModel:
    config: ModelConfig
    embedding: EmbeddingWeights
    encoders: tuple[EncoderWeights, ...]


def _uniform(rng, shape, scale=0.02):
    return rng.uniform(-scale, scale, size=shape)


def random_model(config: ModelConfig, seed: int = 0) -> ViTModel:
    """Seeded synthetic weights, uniform in [-0.02, 0.02]; LayerNorm gains start at 1."""
    rng = np.random.default_rng(seed)
    c = config
    d, hd, n = c.embed_dim, c.num_heads * c.head_dim, c.num_tokens
    bias = (lambda k: _uniform(rng, k)) if c.use_bias else (lambda k: np.zeros(k))
    emb = EmbeddingWeights(
        patch_proj=_uniform(rng, (c.patch_dim, d)),
        patch_bias=bias(d),
        cls_token=_uniform(rng, d),
        pos_embed=_uniform(rng, (n, d)),
        norm_gain=np.ones(d),
        norm_bias=np.zeros(d),
        head=_uniform(rng, (d, c.num_classes)),
        head_bias=bias(c.num_classes),
    )
    encs = []
    for _ in range(c.depth):
        b = c.block_size
        encs.append(EncoderWeights(
            wq=bm.sparse_from_array(_uniform(rng, (d, hd)), b),
            wk=bm.sparse_from_array(_uniform(rng, (d, hd)), b),
            wv=bm.sparse_from_array(_uniform(rng, (d, hd)), b),
            wproj=bm.sparse_from_array(_uniform(rng, (hd, d)), b),
            w_int=bm.partition_dense(_uniform(rng, (d, c.mlp_dim)), b),
            w_out=bm.partition_dense(_uniform(rng, (c.mlp_dim, d)), b),
            bq=bias(hd), bk=bias(hd), bv=bias(hd), b_proj=bias(d),
            b_int=bias(c.mlp_dim), b_out=bias(d),
            ln1_gain=np.ones(d), ln1_bias=np.zeros(d),
            ln2_gain=np.ones(d), ln2_bias=np.zeros(d),
            num_heads=c.num_heads, head_dim=c.head_dim, mlp_dim=c.mlp_dim,
        ))
    return ViTModel(c, emb, tuple(encs))


def random_scores(config: ModelConfig, seed: int = 0, head_spread: float = 3.0) -> list[dict]:
    """Synthetic block/neuron importance scores.

    Each head gets a shared random offset across its q/k/v/proj blocks so
    whole heads can fall out at low keep rates, as learned scores tend to do.
    """
    rng = np.random.default_rng(seed)
    c = config
    b = c.block_size
    db = bm.ceil_div(c.embed_dim, b)
    per = c.head_dim // b
    out = []
    for _ in range(c.depth):
        offs = rng.normal(0.0, head_spread, size=c.num_heads)
        col_off = np.repeat(offs, per)
        sc = {k: rng.normal(size=(db, per * c.num_heads)) + col_off[None, :] for k in "qkv"}
        sc["proj"] = rng.normal(size=(per * c.num_heads, db)) + col_off[:, None]
        sc["int"] = rng.normal(size=c.mlp_dim)
        sc["out"] = rng.normal(size=c.mlp_dim)
        out.append(sc)
    return out


# -- element-wise pieces -------------------------------------------------------

def layernorm(z, gain, bias, eps: float = LN_EPS) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    mu = z.mean(axis=-1, keepdims=True)
    var = ((z - mu) ** 2).mean(axis=-1, keepdims=True)
    return (z - mu) / np.sqrt(var + eps) * gain + bias


def softmax_rows(s: np.ndarray, scale: float) -> np.ndarray:
    """Scale, exponentiate (after row-max subtraction), then normalise each row."""
    x = s * scale
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def gelu(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return 0.5 * x * (1.0 + erf(x / math.sqrt(2.0)))


# -- ops backends -----------------------------------------------------------

class ReferenceOps:
    """Matrix-product stages computed with the blockmat reference kernels."""

    def begin_encoder(self, layer: int, enc: EncoderWeights, n_tokens: int):
        pass

    def elementwise(self, stage: str, elements: int):
        pass

    def qkv(self, x: bm.BlockDenseMatrix, enc: EncoderWeights, heads: Sequence[int]):
        return tuple(bm.sbmm_ref(x, w) for w in (enc.wq, enc.wk, enc.wv))

    def attention_scores(self, q_heads, kt_heads):
        return [bm.dbmm_ref(q, kt) for q, kt in zip(q_heads, kt_heads)]

    def softmax(self, score_heads, scale: float):
        return [softmax_rows(s, scale) for s in score_heads]

    def attention_values(self, a_heads, v_heads):
        return [bm.dbmm_ref(a, v) for a, v in zip(a_heads, v_heads)]

    def proj(self, x: bm.BlockDenseMatrix, enc: EncoderWeights):
        return bm.sbmm_ref(x, enc.wproj)

    def mlp(self, stage: str, x: bm.BlockDenseMatrix, w: bm.BlockDenseMatrix, group_width: int):
        return bm.dbmm_ref(x, w)

    def tdm(self, z, attn_heads, r_t: float, n_heads: int):
        scores = _importance(attn_heads, z.shape[0])
        return tp.select_and_fuse(z, scores, r_t)


REFERENCE = ReferenceOps()


def _importance(attn_heads, n: int) -> np.ndarray:
    if not attn_heads:
        return np.full(n, 1.0 / n)
    return tp.importance_scores(np.stack(attn_heads))


@dataclass
class MSAResult:
    out: np.ndarray
    attention: dict  # head index -> (N, N) attention map
    live_heads: list


def msa_forward(z, enc: EncoderWeights, ops: ReferenceOps = REFERENCE) -> MSAResult:
    """Multi-head self-attention on an already-normalised token matrix (no residual)."""
    z = np.asarray(z, dtype=np.float64)
    n, d = z.shape
    if d != enc.embed_dim:
        raise InvalidArgument(f"token length {d} != embed_dim {enc.embed_dim}")
    b, dh = enc.b, enc.head_dim
    heads = enc.live_heads()
    x = bm.partition_dense(z, b)
    q, k, v = (m.to_array() for m in ops.qkv(x, enc, heads))
    q, k, v = q + enc.bq, k + enc.bk, v + enc.bv
    sl = [slice(h * dh, (h + 1) * dh) for h in heads]
    q_heads = [bm.partition_dense(q[:, s], b) for s in sl]
    kt_heads = [bm.partition_dense(k[:, s].T, b) for s in sl]
    raw = [m.to_array() for m in ops.attention_scores(q_heads, kt_heads)]
    attn = ops.softmax(raw, 1.0 / math.sqrt(dh))
    a_blocks = [bm.partition_dense(a, b) for a in attn]
    v_heads = [bm.partition_dense(v[:, s], b) for s in sl]
    sa = ops.attention_values(a_blocks, v_heads)
    concat = np.zeros((n, enc.num_heads * dh))
    for s, r in zip(sl, sa):
        concat[:, s] = r.to_array()
    out = ops.proj(bm.partition_dense(concat, b), enc).to_array() + enc.b_proj
    return MSAResult(out, dict(zip(heads, attn)), heads)


def mlp_forward(z, enc: EncoderWeights, ops: ReferenceOps = REFERENCE) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.shape[1] != enc.w_int.shape[0]:
        raise InvalidArgument(f"token length {z.shape[1]} != MLP input {enc.w_int.shape[0]}")
    b = enc.b
    hidden = ops.mlp("mlp_fc1", bm.partition_dense(z, b), enc.w_int, enc.head_dim).to_array() + enc.b_int
    ops.elementwise("gelu", hidden.size)
    hidden = gelu(hidden)
    return ops.mlp("mlp_fc2", bm.partition_dense(hidden, b), enc.w_out, enc.head_dim).to_array() + enc.b_out


@dataclass
class EncoderTrace:
    n_in: int
    n_out: int
    routing: tp.TokenRouting | None
    live_heads: list


def encoder_forward(z, enc: EncoderWeights, r_t: float | None = None, ops: ReferenceOps = REFERENCE,
                    layer: int = 0):
    """One encoder; returns ``(Z_out, trace)``.

    With ``r_t`` set (and < 1) tokens are dropped from the post-residual
    attention output before the MLP, and the MLP residual uses the reduced
    matrix.
    """
    z = np.asarray(z, dtype=np.float64)
    n = z.shape[0]
    ops.begin_encoder(layer, enc, n)
    ops.elementwise("ln1", z.size)
    h = layernorm(z, enc.ln1_gain, enc.ln1_bias)
    msa = msa_forward(h, enc, ops)
    ops.elementwise("residual1", z.size)
    z1 = z + msa.out
    routing = None
    if r_t is not None and r_t < 1:
        attn = [msa.attention[hd] for hd in msa.live_heads]
        z1, routing = ops.tdm(z1, attn, r_t, len(attn))
    ops.elementwise("ln2", z1.size)
    h2 = layernorm(z1, enc.ln2_gain, enc.ln2_bias)
    m = mlp_forward(h2, enc, ops)
    ops.elementwise("residual2", z1.size)
    return z1 + m, EncoderTrace(n, z1.shape[0], routing, msa.live_heads)


def _patches(x, cfg: ModelConfig) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    want = (cfg.image_size, cfg.image_size, cfg.in_chans)
    if x.shape != want:
        raise InvalidArgument(f"image shape {x.shape} != expected {want}")
    p = cfg.patch_size
    g = cfg.image_size // p
    return x.reshape(g, p, g, p, cfg.in_chans).transpose(0, 2, 1, 3, 4).reshape(g * g, cfg.patch_dim)


def embed(x, model: ViTModel) -> np.ndarray:
    """Patch projection, class token and positional embedding: ``Z_0`` with N rows."""
    e = model.embedding
    tokens = _patches(x, model.config) @ e.patch_proj + e.patch_bias
    return np.vstack([e.cls_token[None, :], tokens]) + e.pos_embed


def classify(z, model: ViTModel) -> np.ndarray:
    e = model.embedding
    cls = layernorm(z[:1], e.norm_gain, e.norm_bias)[0]
    return cls @ e.head + e.head_bias


@dataclass
class ForwardResult:
    logits: np.ndarray
    token_counts: list
    traces: list


def run_model(x, model: ViTModel, ops: ReferenceOps = REFERENCE) -> ForwardResult:
    z = embed(x, model)
    counts = [z.shape[0]]
    traces = []
    for j, enc in enumerate(model.encoders, start=1):
        z, tr = encoder_forward(z, enc, model.config.keep_rate_for(j), ops, layer=j)
        counts.append(z.shape[0])
        traces.append(tr)
    return ForwardResult(classify(z, model), counts, traces)


def model_forward(x, model: ViTModel) -> np.ndarray:
    return run_model(x, model).logits


def with_keep_rate(model: ViTModel, r_t: float, layers=None) -> ViTModel:
    kw = {"keep_rate": r_t}
    if layers is not None:
        kw["tdm_layers"] = tuple(layers)
    return replace(model, config=replace(model.config, **kw))
