"""Closed-form complexity, cycle and resource models.

Every function here is plain arithmetic on its arguments and accepts
``fractions.Fraction`` ratios, so results can be compared exactly against the
simulator's counters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

from .blockmat import ceil_div
from .errors import InvalidArgument
from .tokenprune import kept_tokens, tokens_after


@dataclass(frozen=True)
class ComplexityInputs:
    n: int
    d: int
    head_dim: int
    mlp_dim: int
    heads: int
    batch: int = 1
    alpha: float = 1
    alpha_proj: float = 1
    alpha_mlp: float = 1
    heads_kept: int | None = None
    n_kept: int | None = None

    def __post_init__(self):
        for name in ("alpha", "alpha_proj", "alpha_mlp"):
            v = getattr(self, name)
            if not 0 <= v <= 1:
                raise InvalidArgument(f"{name} must be in [0, 1], got {v}")
        if self.heads_kept is not None and not 0 <= self.heads_kept <= self.heads:
            raise InvalidArgument("heads_kept must be in [0, heads]")
        if self.n_kept is not None and not 0 <= self.n_kept <= self.n:
            raise InvalidArgument("n_kept must be in [0, n]")

    @property
    def h_kept(self) -> int:
        return self.heads if self.heads_kept is None else self.heads_kept

    @property
    def nk(self) -> int:
        return self.n if self.n_kept is None else self.n_kept


def _num(x):
    if isinstance(x, Fraction) and x.denominator == 1:
        return int(x)
    return x


def complexity_unpruned(c: ComplexityInputs) -> dict:
    B, N, D, Dh, Dm, H = c.batch, c.n, c.d, c.head_dim, c.mlp_dim, c.heads
    ops = {
        "layernorm": 2 * B * N * D,
        "residual": 2 * B * N * D,
        "msa": 4 * B * H * N * D * Dh + 2 * B * H * N * N * Dh,
        "mlp": 2 * B * N * D * Dm,
    }
    ops["total"] = sum(ops.values())
    return ops


def complexity_pruned(c: ComplexityInputs, tdm: bool = True) -> dict:
    B, N, D, Dh, Dm, H = c.batch, c.n, c.d, c.head_dim, c.mlp_dim, c.heads
    Hk, Nk = c.h_kept, c.nk
    a, ap, am = Fraction(c.alpha), Fraction(c.alpha_proj), Fraction(c.alpha_mlp)
    ops = {
        "layernorm1": B * N * D,
        "layernorm2": B * Nk * D,
        "residual1": B * N * D,
        "residual2": B * Nk * D,
        "msa": B * Hk * N * Dh * D * (3 * a + ap) + 2 * B * Hk * N * N * Dh,
        "tdm": B * N * (H + N + D) if tdm else 0,
        "mlp": 2 * B * Nk * D * Dm * am,
    }
    ops["total"] = sum(ops.values())
    return {k: _num(v) for k, v in ops.items()}


def model_complexity(cfg, per_layer: list | None = None) -> dict:
    """Encoder-stack MACs for a config; ``per_layer`` overrides the pruned inputs."""
    if per_layer is None:
        one = complexity_unpruned(ComplexityInputs(cfg.num_tokens, cfg.embed_dim, cfg.head_dim,
                                                   cfg.mlp_dim, cfg.num_heads))
        return {"per_encoder": one, "encoders": cfg.depth, "total": one["total"] * cfg.depth}
    rows = [complexity_pruned(inp, tdm) for inp, tdm in per_layer]
    return {"per_encoder": rows, "encoders": len(rows), "total": _num(sum(Fraction(r["total"]) for r in rows))}


def embedding_macs(cfg) -> dict:
    return {
        "patch_embed": cfg.num_patches * cfg.patch_dim * cfg.embed_dim,
        "classifier": cfg.embed_dim * cfg.num_classes,
    }


# -- cycle model -----------------------------------------------------------------

def cycles_sbmm(m1: int, m2: int, d: int, head_dim: int, b: int, phi, hw) -> int | Fraction:
    """SBMM/DBMM cycles for an (m1 x m2) by (m2 x d) product split into head_dim groups."""
    tiles = ceil_div(ceil_div(m1, b) * ceil_div(head_dim, b), hw.p_t * hw.p_c)
    heads = ceil_div(ceil_div(d, head_dim), hw.p_h)
    inner = ceil_div(m2, b) * ceil_div(b, hw.p_pe) ** 2 * b
    return _num(tiles * heads * inner * Fraction(phi))


def cycles_dhbmm(m1: int, m2: int, d: int, heads: int, b: int, hw) -> int:
    tiles = ceil_div(ceil_div(m1, b) * ceil_div(d, b), hw.p_t * hw.p_c)
    return tiles * ceil_div(heads, hw.p_h) * ceil_div(m2, b) * ceil_div(b, hw.p_pe) ** 2 * b


@dataclass(frozen=True)
class ResourceEstimate:
    dsp: float
    lut: float
    buffer_words: int


def resource_model(hw) -> ResourceEstimate:
    units = hw.p_t * hw.p_h * hw.p_c * hw.p_pe ** 2
    b2 = hw.b * hw.b
    feature = b2 * hw.p_t * hw.gamma
    column = b2 * hw.p_c * hw.gamma
    result = b2 * hw.p_t * hw.p_h * hw.p_c
    return ResourceEstimate(
        dsp=hw.c1 * units,
        lut=hw.c2 * units,
        buffer_words=feature + column + result + 6 * max(result, feature),
    )


@dataclass(frozen=True)
class LayerSparsity:
    """Per-encoder inputs to the cycle prediction."""

    heads_kept: int
    alpha: Fraction = Fraction(1)
    alpha_proj: Fraction = Fraction(1)
    mlp_width: int | None = None


def predict_encoder_cycles(cfg, sparsity: LayerSparsity, hw, n: int, r_t: float | None = None) -> dict:
    """Per-stage cycles for one encoder with ``n`` input tokens.

    ``alpha``/``alpha_proj`` are treated as equal retained ratios in every
    weight column, which is what the closed forms assume.
    """
    b, D, Dh = cfg.block_size, cfg.embed_dim, cfg.head_dim
    Hk = sparsity.heads_kept
    dm = cfg.mlp_dim if sparsity.mlp_width is None else sparsity.mlp_width
    em = hw.em_cycles
    st = {}
    st["ln1"] = em(n * D)
    if Hk:
        st["qkv"] = cycles_sbmm(n, D, 3 * Hk * Dh, 3 * Dh, b, sparsity.alpha, hw)
        st["qk"] = cycles_dhbmm(n, Dh, n, Hk, b, hw)
        st["softmax"] = 3 * em(Hk * n * n)
        st["av"] = cycles_dhbmm(n, n, Dh, Hk, b, hw)
        st["proj"] = cycles_sbmm(n, Hk * Dh, D, Dh, b, sparsity.alpha_proj, hw)
    else:
        st.update(qkv=0, qk=0, softmax=0, av=0, proj=0)
    st["residual1"] = em(n * D)
    nk = n
    st["tdhm"] = 0
    if r_t is not None and r_t < 1:
        from .accelsim import tdhm_cycles

        nk = tokens_after(n, r_t)
        dropped = n - 1 - kept_tokens(n, r_t)
        st["tdhm"] = tdhm_cycles(n, D, dropped if nk != n else 0, hw).total
    st["ln2"] = em(nk * D)
    st["mlp_fc1"] = cycles_sbmm(nk, D, dm, Dh, b, 1, hw)
    st["gelu"] = em(nk * dm)
    st["mlp_fc2"] = cycles_sbmm(nk, dm, D, Dh, b, 1, hw)
    st["residual2"] = em(nk * D)
    st["total"] = sum(v for k, v in st.items())
    st["tokens_out"] = nk
    return st


def predict_model_cycles(cfg, layers: list[LayerSparsity], hw) -> dict:
    n = cfg.num_tokens
    out = []
    for j, sp in enumerate(layers, start=1):
        p = predict_encoder_cycles(cfg, sp, hw, n, cfg.keep_rate_for(j))
        out.append(p)
        n = p["tokens_out"]
    total = sum(p["total"] for p in out)
    return {"layers": out, "total_cycles": total, "latency_ms": float(total) / hw.clock_hz * 1e3}


def layer_sparsity(enc) -> LayerSparsity:
    """Measured sparsity of a (possibly pruned) encoder."""
    from .staticprune import measured_ratios

    r = measured_ratios(enc)
    return LayerSparsity(r["h_kept"], r["alpha"], r["alpha_proj"], enc.w_int.shape[1])


def complexity_report(cfg, model=None) -> dict:
    """Baseline and (if a model is given) measured pruned complexity of the encoder stack."""
    base = model_complexity(cfg)
    report = {
        "baseline": base,
        "embedding": embedding_macs(cfg),
    }
    if model is not None:
        from .staticprune import measured_ratios

        per = []
        n = cfg.num_tokens
        for j, enc in enumerate(model.encoders, start=1):
            r = measured_ratios(enc)
            r_t = cfg.keep_rate_for(j)
            tdm = r_t is not None and r_t < 1
            nk = tokens_after(n, r_t) if tdm else n
            per.append((ComplexityInputs(n, cfg.embed_dim, cfg.head_dim, cfg.mlp_dim, cfg.num_heads,
                                         alpha=r["alpha"], alpha_proj=r["alpha_proj"], alpha_mlp=r["alpha_mlp"],
                                         heads_kept=r["h_kept"], n_kept=nk), tdm))
            n = nk
        pruned = model_complexity(cfg, per)
        report["pruned"] = {
            "per_encoder": [{k: float(v) for k, v in row.items()} for row in pruned["per_encoder"]],
            "total": float(pruned["total"]),
        }
        report["reduction"] = base["total"] / float(pruned["total"]) if pruned["total"] else math.inf
    return report
