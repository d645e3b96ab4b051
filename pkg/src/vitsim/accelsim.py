"""Cycle-level simulator of the multi-level parallel compute array (MPCA).

Timing model
------------
The array has ``p_h`` compute head modules (CHMs), each a ``p_t x p_c`` grid
of PEs, each PE a ``p_pe x p_pe`` grid of MAC units.  One ``b x b`` by
``b x b`` block product occupies a PE for ``ceil(b / p_pe)**2 * b`` cycles.

A matrix product is split into column groups (one attention head, or a
``head_dim``-wide slice of an MLP matrix).  Groups are dispatched ``p_h`` at a
time; an iteration lasts as long as its slowest CHM.  Inside a CHM every weight
block column goes to one of the ``p_c`` PE columns (the column assignment).  A
PE column turns its columns into output tiles, column after column and top to
bottom, and deals them to its ``p_t`` PEs in waves; a wave lasts as long as its
heaviest tile, and a tile weighs the number of blocks in its weight column.
The PE columns of a CHM run independently.

With equal block counts in every column and ``p_c`` dividing the columns per
group this reproduces the closed-form SBMM/DBMM/DHBMM cycle counts exactly.

Element-wise work (LayerNorm, residual adds, softmax passes, GELU) streams
through the element-wise module at ``em_throughput`` elements per cycle.
Stages run back to back.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from typing import Sequence

import numpy as np

from . import blockmat as bm
from . import tokenprune as tp
from .bitonic import bitonic_sort, num_stages, padded_size
from .errors import InvalidArgument, InvariantViolation
from .vitref import ReferenceOps, ViTModel, embed, classify, encoder_forward

ceil_div = bm.ceil_div

MPCA_STAGES = ("qkv", "qk", "av", "proj", "mlp_fc1", "mlp_fc2")
STAGE_ORDER = ("ln1", "qkv", "qk", "softmax", "av", "proj", "residual1", "tdhm",
               "ln2", "mlp_fc1", "gelu", "mlp_fc2", "residual2")


@dataclass(frozen=True)
class HardwareConfig:
    p_h: int = 4
    p_t: int = 12
    p_c: int = 2
    p_pe: int = 8
    b: int = 16
    gamma: int = 96
    # calibrated so dsp/lut land on the U250 build at the default parallelism
    c1: float = 7088 / 6144
    c2: float = 798000 / 6144
    em_throughput: int = 64
    sorter_width: int = 64
    clock_hz: float = 300e6

    def __post_init__(self):
        for name in ("p_h", "p_t", "p_c", "p_pe", "b", "em_throughput", "sorter_width"):
            if getattr(self, name) <= 0:
                raise InvalidArgument(f"hardware parameter {name} must be positive")
        if self.gamma < 0 or self.c1 < 0 or self.c2 < 0 or self.clock_hz <= 0:
            raise InvalidArgument("gamma, c1, c2 must be >= 0 and clock_hz > 0")

    @property
    def block_cycles(self) -> int:
        return ceil_div(self.b, self.p_pe) ** 2 * self.b

    @property
    def pes(self) -> int:
        return self.p_h * self.p_t * self.p_c

    def em_cycles(self, elements: int) -> int:
        return ceil_div(int(elements), self.em_throughput)

    @classmethod
    def from_json(cls, d: dict) -> "HardwareConfig":
        extra = set(d) - set(cls.__dataclass_fields__)
        if extra:
            raise InvalidArgument(f"unknown hardware keys: {sorted(extra)}")
        return cls(**d)


# -- column load balancing ---------------------------------------------------

@dataclass(frozen=True)
class ColumnAssignment:
    """Weight block columns per PE column, in processing order."""

    bins: tuple[tuple[int, ...], ...]
    loads: tuple[int, ...]

    @property
    def max_load(self) -> int:
        return max(self.loads) if self.loads else 0

    def imbalance(self) -> float:
        total = sum(self.loads)
        if total == 0:
            return 1.0
        return self.max_load / (total / len(self.loads))


def lane_cycles(counts: Sequence[int], rows: int, p_t: int) -> int:
    """Critical path of one PE column, in block products."""
    if rows <= 0 or not len(counts):
        return 0
    tiles = np.repeat(np.asarray(counts, dtype=np.int64), rows)
    pad = (-len(tiles)) % p_t
    if pad:
        tiles = np.concatenate([tiles, np.zeros(pad, dtype=np.int64)])
    return int(tiles.reshape(-1, p_t).max(axis=1).sum())


def _profile_counts(profile) -> tuple[int, ...]:
    return tuple(profile.counts) if isinstance(profile, bm.ColumnProfile) else tuple(int(c) for c in profile)


def _assignment(bins, counts) -> ColumnAssignment:
    return ColumnAssignment(tuple(tuple(b) for b in bins),
                            tuple(sum(counts[c] for c in b) for b in bins))


def round_robin(profile, p_c: int) -> ColumnAssignment:
    counts = _profile_counts(profile)
    if p_c < 1:
        raise InvalidArgument("p_c must be >= 1")
    bins = [[c for c in range(len(counts)) if c % p_c == j] for j in range(p_c)]
    return _assignment(bins, counts)


def lpt(profile, p_c: int) -> ColumnAssignment:
    """Longest-processing-time greedy: heaviest column first, into the lightest bin."""
    counts = _profile_counts(profile)
    if p_c < 1:
        raise InvalidArgument("p_c must be >= 1")
    order = sorted(range(len(counts)), key=lambda c: (-counts[c], c))
    bins = [[] for _ in range(p_c)]
    loads = [0] * p_c
    for c in order:
        j = min(range(p_c), key=lambda i: (loads[i], i))
        bins[j].append(c)
        loads[j] += counts[c]
    return _assignment(bins, counts)


def assignment_cycles(assign: ColumnAssignment, counts, rows: int, p_t: int) -> int:
    return max((lane_cycles([counts[c] for c in b], rows, p_t) for b in assign.bins), default=0)


def balance_columns(profile, p_c: int, rows: int = 1, p_t: int = 1) -> ColumnAssignment:
    """Offline column assignment for one CHM.

    LPT greedy on block counts; if the plain round-robin split happens to give
    a shorter schedule for ``rows`` tile rows on ``p_t`` PE rows, that one is
    kept instead, so balancing never loses to the naive split.
    """
    counts = _profile_counts(profile)
    greedy = lpt(counts, p_c)
    naive = round_robin(counts, p_c)
    if assignment_cycles(naive, counts, rows, p_t) < assignment_cycles(greedy, counts, rows, p_t):
        return naive
    return greedy


# -- scheduling engine ---------------------------------------------------------

@dataclass
class KernelStats:
    cycles: int = 0
    busy: int = 0  # PE-cycles spent on block products
    macs: int = 0
    iterations: int = 0
    imbalance: list = field(default_factory=list)

    def add(self, other: "KernelStats"):
        self.cycles += other.cycles
        self.busy += other.busy
        self.macs += other.macs
        self.iterations += other.iterations
        self.imbalance.extend(other.imbalance)


def _policy_assign(counts, hw: HardwareConfig, rows: int, policy) -> ColumnAssignment:
    if policy in ("balanced", "lpt"):
        return balance_columns(counts, hw.p_c, rows, hw.p_t) if policy == "balanced" else lpt(counts, hw.p_c)
    if policy == "round_robin":
        return round_robin(counts, hw.p_c)
    raise InvalidArgument(f"unknown assignment policy {policy!r}")


def schedule(groups: Sequence[Sequence[int]], rows: int, hw: HardwareConfig, policy="balanced"):
    """Cycles for column groups of block counts; returns ``(stats, assignments)``.

    Groups whose columns are all empty (removed heads) are not dispatched.
    """
    live = [(g, list(c)) for g, c in enumerate(groups) if any(c)]
    stats = KernelStats()
    assigns = {}
    for start in range(0, len(live), hw.p_h):
        chunk = live[start:start + hw.p_h]
        chm = []
        for g, counts in chunk:
            a = _policy_assign(counts, hw, rows, policy)
            assigns[g] = a
            chm.append(assignment_cycles(a, counts, rows, hw.p_t))
            stats.imbalance.append(a.imbalance())
            stats.busy += sum(counts) * rows * hw.block_cycles
        stats.cycles += max(chm) * hw.block_cycles
        stats.iterations += 1
    return stats, assigns


def _block_extent(i: int, total: int, b: int) -> int:
    return min(b, total - i * b)


def _sparse_macs(m_rows: int, w: bm.BlockSparseMatrix) -> int:
    b = w.b
    rows, cols = w.shape
    s = 0
    for c, h in enumerate(w.headers):
        cw = _block_extent(c, cols, b)
        s += cw * sum(_block_extent(int(i), rows, b) for i in h)
    return m_rows * s


def _group_columns(n_cols: int, width_blocks: int) -> list[list[int]]:
    return [list(range(s, min(s + width_blocks, n_cols))) for s in range(0, n_cols, width_blocks)]


def _run_jobs(x: bm.BlockDenseMatrix, jobs, assigns, groups_jobs):
    """Evaluate the scheduled columns; ``jobs[key] = (header, blocks)``."""
    results = {}
    for g, a in sorted(assigns.items()):
        gj = groups_jobs[g]
        for lane in a.bins:
            for local in lane:
                key = gj[local]
                header, blocks = jobs[key]
                results[key] = bm.column_product(x, header, blocks)
    return results


def _check(x: bm.BlockDenseMatrix, w_shape, w_b, hw: HardwareConfig):
    if x.b != w_b or x.b != hw.b:
        raise InvalidArgument(f"block size mismatch: X b={x.b}, W b={w_b}, hardware b={hw.b}")
    if x.shape[1] != w_shape[0]:
        raise InvalidArgument(f"inner dimension mismatch: X is {x.shape}, W is {tuple(w_shape)}")


def simulate_sbmm(x: bm.BlockDenseMatrix, w: bm.BlockSparseMatrix, hw: HardwareConfig,
                  group_width: int | None = None, assignment="balanced"):
    """Sparse block product on the MPCA; returns ``(Y, stats)``.

    ``group_width`` is the per-head column width (elements) that maps one
    group to one CHM; by default the whole matrix is one group.
    """
    _check(x, w.shape, w.b, hw)
    n = w.grid[1]
    width = n if group_width is None else ceil_div(group_width, w.b)
    cols = _group_columns(n, width)
    counts = w.column_counts()
    stats, assigns = schedule([[counts[c] for c in g] for g in cols], x.grid[0], hw, assignment)
    stats.macs = _sparse_macs(x.shape[0], w)
    jobs = {c: (w.headers[c], w.blocks[c]) for c in range(n)}
    res = _run_jobs(x, jobs, assigns, cols)
    return bm.assemble_columns(x, n, w.shape[1], res), stats


def _dense_as_sparse(w: bm.BlockDenseMatrix) -> bm.BlockSparseMatrix:
    header = np.arange(w.grid[0])
    return bm.BlockSparseMatrix(w.shape, w.b, [header] * w.grid[1],
                                [w.blocks[:, c] for c in range(w.grid[1])])


def simulate_dbmm(x: bm.BlockDenseMatrix, w: bm.BlockDenseMatrix, hw: HardwareConfig,
                  group_width: int | None = None, assignment="balanced"):
    _check(x, w.shape, w.b, hw)
    return simulate_sbmm(x, _dense_as_sparse(w), hw, group_width, assignment)


def simulate_dhbmm(xs: Sequence[bm.BlockDenseMatrix], ws: Sequence[bm.BlockDenseMatrix], hw: HardwareConfig,
                   assignment="balanced"):
    """Head-wise dense products ``xs[h] @ ws[h]``, one head per CHM."""
    if len(xs) != len(ws):
        raise InvalidArgument(f"{len(xs)} left operands for {len(ws)} heads")
    if not xs:
        return [], KernelStats()
    rows = xs[0].grid[0]
    for x, w in zip(xs, ws):
        _check(x, w.shape, w.b, hw)
        if x.grid[0] != rows or w.grid != ws[0].grid:
            raise InvalidArgument("all heads must share operand shapes")
    groups = [[w.grid[0]] * w.grid[1] for w in ws]
    stats, assigns = schedule(groups, rows, hw, assignment)
    stats.macs = sum(x.shape[0] * w.shape[0] * w.shape[1] for x, w in zip(xs, ws))
    outs = []
    for h, (x, w) in enumerate(zip(xs, ws)):
        header = np.arange(w.grid[0])
        cols = {}
        for lane in assigns[h].bins:
            for c in lane:
                cols[c] = bm.column_product(x, header, w.blocks[:, c])
        outs.append(bm.assemble_columns(x, w.grid[1], w.shape[1], cols))
    return outs, stats


# -- token dropping hardware -------------------------------------------------

@dataclass
class TDHMCycles:
    sort: int = 0
    shuffle: int = 0
    fusion: int = 0
    stages: int = 0

    @property
    def total(self) -> int:
        return self.sort + self.shuffle + self.fusion


def tdhm_cycles(n: int, d: int, dropped: int, hw: HardwareConfig) -> TDHMCycles:
    n_hat = padded_size(n)
    st = num_stages(n)
    return TDHMCycles(
        sort=st * ceil_div(n_hat // 2, hw.sorter_width),
        shuffle=hw.em_cycles(n * d),
        fusion=hw.em_cycles(dropped * d),
        stages=st,
    )


def _before(a, b) -> bool:
    # higher score first, then smaller token id
    return (a[0] > b[0]) or (a[0] == b[0] and a[1] < b[1])


def sort_scores(scores) -> tuple[list[int], int]:
    """Token ids by the bitonic network (class token pinned first); returns ``(ids, stages)``."""
    s = np.asarray(scores, dtype=np.float64)
    items = [(math.inf, 0)] + [(float(s[i]), i) for i in range(1, s.size)]
    out, stages = bitonic_sort(items, _before, (-math.inf, s.size))
    return [i for _, i in out], stages


def simulate_tdhm(z, scores, r_t: float, hw: HardwareConfig):
    """Token dropping on the TDHM; returns ``(Z_out, cycles, routing)``."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or z.shape[0] < 2:
        raise InvalidArgument(f"token dropping needs at least 2 tokens, got shape {z.shape}")
    if not 0 < r_t <= 1:
        raise InvalidArgument(f"r_t must be in (0, 1], got {r_t}")
    n, d = z.shape
    order, _ = sort_scores(scores)
    if order[0] != 0:
        raise InvariantViolation("class token left the head of the sorted order")
    routing = tp.routing_from_order(n, order[1:], tp.kept_tokens(n, r_t))
    z_out = tp.fuse(z, scores, routing)
    return z_out, tdhm_cycles(n, d, len(routing.dropped), hw), routing


# -- encoder / model simulation ------------------------------------------------

@dataclass
class LayerRecord:
    layer: int
    n_in: int
    n_out: int = 0
    heads: int = 0
    stage_cycles: dict = field(default_factory=lambda: {s: 0 for s in STAGE_ORDER})
    busy: dict = field(default_factory=lambda: {s: 0 for s in MPCA_STAGES})
    macs: dict = field(default_factory=lambda: {s: 0 for s in MPCA_STAGES})
    ops: dict = field(default_factory=lambda: {"layernorm": 0, "residual": 0, "tdm": 0, "em": 0})
    imbalance: list = field(default_factory=list)
    routing: dict | None = None

    @property
    def total_cycles(self) -> int:
        return sum(self.stage_cycles.values())


@dataclass
class SimReport:
    layers: list
    hw: HardwareConfig

    @property
    def stage_cycles(self) -> dict:
        out = {s: 0 for s in STAGE_ORDER}
        for r in self.layers:
            for s, v in r.stage_cycles.items():
                out[s] += v
        return out

    @property
    def total_cycles(self) -> int:
        return sum(self.stage_cycles.values())

    @property
    def mpca_cycles(self) -> int:
        sc = self.stage_cycles
        return sum(sc[s] for s in MPCA_STAGES)

    @property
    def busy_pe_cycles(self) -> int:
        return sum(sum(r.busy.values()) for r in self.layers)

    @property
    def macs(self) -> int:
        return sum(sum(r.macs.values()) for r in self.layers)

    @property
    def latency_ms(self) -> float:
        return self.total_cycles / self.hw.clock_hz * 1e3

    def utilization(self) -> float:
        return utilization(self, self.hw)

    def overall_utilization(self) -> float:
        t = self.total_cycles
        return self.busy_pe_cycles / (t * self.hw.pes) if t else 0.0

    def complexity_total(self) -> int:
        """MACs plus the LayerNorm, residual and token-dropping element counts."""
        return self.macs + sum(r.ops["layernorm"] + r.ops["residual"] + r.ops["tdm"] for r in self.layers)

    def imbalance(self) -> dict:
        vals = [v for r in self.layers for v in r.imbalance]
        if not vals:
            return {"mean": 1.0, "max": 1.0}
        return {"mean": float(np.mean(vals)), "max": float(np.max(vals))}

    def to_json(self) -> dict:
        return {
            "stage_cycles": self.stage_cycles,
            "total_cycles": self.total_cycles,
            "mpca_cycles": self.mpca_cycles,
            "latency_ms": self.latency_ms,
            "clock_hz": self.hw.clock_hz,
            "utilization": self.utilization(),
            "overall_utilization": self.overall_utilization(),
            "macs": self.macs,
            "complexity_total": self.complexity_total(),
            "imbalance": self.imbalance(),
            "hardware": asdict(self.hw),
            "layers": [
                {
                    "layer": r.layer,
                    "tokens_in": r.n_in,
                    "tokens_out": r.n_out,
                    "heads": r.heads,
                    "stage_cycles": dict(r.stage_cycles),
                    "total_cycles": r.total_cycles,
                    "macs": dict(r.macs),
                    "ops": dict(r.ops),
                    "routing": r.routing,
                }
                for r in self.layers
            ],
        }


def utilization(report: SimReport, hw: HardwareConfig) -> float:
    """Busy PE-cycles over PE-cycles available during the MPCA stages."""
    c = report.mpca_cycles
    return report.busy_pe_cycles / (c * hw.pes) if c else 0.0


class SimulatorOps(ReferenceOps):
    """Backend for :func:`vitsim.vitref.encoder_forward` that runs the MPCA model."""

    def __init__(self, hw: HardwareConfig, assignment="balanced"):
        self.hw = hw
        self.assignment = assignment
        self.layers: list[LayerRecord] = []

    @property
    def rec(self) -> LayerRecord:
        return self.layers[-1]

    def begin_encoder(self, layer, enc, n_tokens):
        if enc.b != self.hw.b:
            raise InvalidArgument(f"model block size {enc.b} != hardware block size {self.hw.b}")
        self.layers.append(LayerRecord(layer, n_tokens))
        self._enc = enc

    def _kernel(self, stage: str, stats: KernelStats):
        r = self.rec
        r.stage_cycles[stage] += stats.cycles
        r.busy[stage] += stats.busy
        r.macs[stage] += stats.macs
        if stage in ("qkv", "proj"):
            r.imbalance.extend(stats.imbalance)

    def elementwise(self, stage, elements):
        r = self.rec
        r.stage_cycles[stage] += self.hw.em_cycles(elements)
        if stage.startswith("ln"):
            r.ops["layernorm"] += elements
        elif stage.startswith("residual"):
            r.ops["residual"] += elements
        else:
            r.ops["em"] += elements
        if stage == "ln2":
            r.n_out = elements // self._enc.embed_dim

    def qkv(self, x, enc, heads):
        per = enc.head_blocks()
        mats = {"q": enc.wq, "k": enc.wk, "v": enc.wv}
        groups_jobs, groups = [], []
        for h in heads:
            keys = [(m, c) for m in "qkv" for c in range(h * per, (h + 1) * per)]
            groups_jobs.append(keys)
            groups.append([len(mats[m].headers[c]) for m, c in keys])
        for w in mats.values():
            _check(x, w.shape, w.b, self.hw)
        stats, assigns = schedule(groups, x.grid[0], self.hw, self.assignment)
        stats.macs = sum(_sparse_macs(x.shape[0], _restrict(w, heads, per)) for w in mats.values())
        jobs = {(m, c): (mats[m].headers[c], mats[m].blocks[c]) for keys in groups_jobs for m, c in keys}
        res = _run_jobs(x, jobs, assigns, groups_jobs)
        self.rec.heads = len(heads)
        self._kernel("qkv", stats)
        out = []
        for m, w in mats.items():
            cols = {c: res[(m, c)] for keys in groups_jobs for mm, c in keys if mm == m}
            out.append(bm.assemble_columns(x, w.grid[1], w.shape[1], cols))
        return tuple(out)

    def attention_scores(self, q_heads, kt_heads):
        outs, stats = simulate_dhbmm(q_heads, kt_heads, self.hw, self.assignment)
        self._kernel("qk", stats)
        return outs

    def softmax(self, score_heads, scale):
        elements = sum(s.size for s in score_heads)
        # scale + exp, row sums, normalisation
        self.rec.stage_cycles["softmax"] += 3 * self.hw.em_cycles(elements)
        self.rec.ops["em"] += 3 * elements
        return super().softmax(score_heads, scale)

    def attention_values(self, a_heads, v_heads):
        outs, stats = simulate_dhbmm(a_heads, v_heads, self.hw, self.assignment)
        self._kernel("av", stats)
        return outs

    def proj(self, x, enc):
        y, stats = simulate_sbmm(x, enc.wproj, self.hw, enc.head_dim, self.assignment)
        self._kernel("proj", stats)
        return y

    def mlp(self, stage, x, w, group_width):
        y, stats = simulate_dbmm(x, w, self.hw, group_width, self.assignment)
        self._kernel(stage, stats)
        return y

    def tdm(self, z, attn_heads, r_t, n_heads):
        n, d = z.shape
        scores = np.full(n, 1.0 / n) if not attn_heads else tp.importance_scores(np.stack(attn_heads))
        z_out, cyc, routing = simulate_tdhm(z, scores, r_t, self.hw)
        r = self.rec
        r.stage_cycles["tdhm"] += cyc.total
        r.ops["tdm"] += n * (self._enc.num_heads + n + d)
        r.routing = routing.to_json()
        return z_out, routing


def _restrict(w: bm.BlockSparseMatrix, heads, per) -> bm.BlockSparseMatrix:
    keep = {c for h in heads for c in range(h * per, (h + 1) * per)}
    headers = [h if c in keep else np.array([], dtype=np.int64) for c, h in enumerate(w.headers)]
    blocks = [blk if c in keep else np.zeros((0, w.b, w.b)) for c, blk in enumerate(w.blocks)]
    return bm.BlockSparseMatrix(w.shape, w.b, headers, blocks)


def simulate_encoder(z, enc, hw: HardwareConfig, r_t: float | None = None, assignment="balanced", layer: int = 1):
    """One encoder on the simulated accelerator; returns ``(Z_out, SimReport)``."""
    ops = SimulatorOps(hw, assignment)
    z_out, _ = encoder_forward(z, enc, r_t, ops, layer=layer)
    return z_out, SimReport(ops.layers, hw)


def simulate_model(x, model: ViTModel, hw: HardwareConfig, assignment="balanced"):
    """Full inference; embedding and classifier run host-side and are not timed."""
    if model.config.block_size != hw.b:
        raise InvalidArgument(f"model block size {model.config.block_size} != hardware block size {hw.b}")
    ops = SimulatorOps(hw, assignment)
    z = embed(x, model)
    for j, enc in enumerate(model.encoders, start=1):
        z, _ = encoder_forward(z, enc, model.config.keep_rate_for(j), ops, layer=j)
    report = SimReport(ops.layers, hw)
    _check_report(report)
    return classify(z, model), report


def _check_report(report: SimReport):
    if report.total_cycles != sum(r.total_cycles for r in report.layers):
        raise InvariantViolation("stage cycles do not add up to the total")
    u = report.utilization()
    if report.mpca_cycles and not 0 < u <= 1 + 1e-12:
        raise InvariantViolation(f"utilization {u} outside (0, 1]")


def report_json(report: SimReport) -> str:
    return json.dumps(report.to_json(), indent=2, sort_keys=False)
