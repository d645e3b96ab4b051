"""``vitsim`` command-line front end.

Subcommands::

    gen       write a seeded synthetic model (weights + importance scores)
    prune     apply block/neuron top-k pruning to a generated model
    infer     reference inference, logits and token counts as JSON
    simulate  accelerator simulation, SimReport JSON (logits included)
    model     analytical complexity / cycle / resource report
    sweep     grid of (block, r_b, r_t) simulations as CSV

Exit codes: 0 success, 2 invalid input, 3 internal invariant violation.
The ``VITSIM_LOG`` environment variable sets the log level (default WARNING).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import accelsim, container, perfmodel, staticprune, vitref
from .errors import InvalidArgument, InvariantViolation

log = logging.getLogger("vitsim")

EXIT_OK, EXIT_INVALID, EXIT_INVARIANT = 0, 2, 3


@dataclass(frozen=True)
class RunConfig:
    """Resolved command-line settings."""

    config: Path | None = None
    weights: Path | None = None
    out: Path | None = None
    r_b: float | None = None
    r_t: float | None = None
    block: int | None = None
    hw: Path | None = None
    seed: int = 0

    def __post_init__(self):
        for name in ("r_b", "r_t"):
            v = getattr(self, name)
            if v is not None and not 0 < v <= 1:
                raise InvalidArgument(f"--{name.replace('_', '')} must be in (0, 1], got {v}")
        if self.block is not None and self.block <= 0:
            raise InvalidArgument("--block must be positive")


def _run_config(args) -> RunConfig:
    return RunConfig(
        config=getattr(args, "config", None),
        weights=getattr(args, "weights", None),
        out=getattr(args, "out", None),
        r_b=getattr(args, "rb", None),
        r_t=getattr(args, "rt", None),
        block=getattr(args, "block", None),
        hw=getattr(args, "hw", None),
        seed=getattr(args, "seed", 0),
    )


# -- helpers -------------------------------------------------------------------

def _model_config(rc: RunConfig, preset: str | None) -> vitref.ModelConfig:
    if rc.config is not None:
        cfg = container.load_config(rc.config)
    else:
        name = preset or "deit-small"
        if name not in vitref.PRESETS:
            raise InvalidArgument(f"unknown preset {name!r}; choose from {sorted(vitref.PRESETS)}")
        cfg = vitref.PRESETS[name]()
    kw = {}
    if rc.block is not None:
        kw["block_size"] = rc.block
    if rc.r_t is not None:
        kw["keep_rate"] = rc.r_t
    return replace(cfg, **kw) if kw else cfg


def _load_model(rc: RunConfig):
    if rc.weights is None:
        raise InvalidArgument("--weights (model directory or .vsbm file) is required")
    w = Path(rc.weights)
    if w.is_dir():
        model, scores = container.load_model(w)
    else:
        cfg_path = rc.config or w.parent / container.CONFIG_FILE
        cfg = container.load_config(cfg_path)
        model = container.model_from_tensors(cfg, container.load(w))
        sp = w.parent / container.SCORES_FILE
        scores = container.scores_from_tensors(container.load(sp), cfg.depth) if sp.exists() else None
    if rc.r_t is not None:
        model = vitref.with_keep_rate(model, rc.r_t)
    return model, scores


def _hardware(rc: RunConfig, block: int) -> accelsim.HardwareConfig:
    d = {}
    if rc.hw is not None:
        try:
            d = json.loads(Path(rc.hw).read_text())
        except OSError as e:
            raise OSError(f"cannot read hardware config {rc.hw}: {e}") from e
        except json.JSONDecodeError as e:
            raise InvalidArgument(f"{rc.hw}: invalid JSON: {e}") from e
    d.setdefault("b", block)
    return accelsim.HardwareConfig.from_json(d)


def _input_image(cfg: vitref.ModelConfig, path, seed: int) -> np.ndarray:
    if path is not None:
        try:
            x = np.load(path)
        except OSError as e:
            raise OSError(f"cannot read input tensor {path}: {e}") from e
        want = (cfg.image_size, cfg.image_size, cfg.in_chans)
        if x.shape != want:
            raise InvalidArgument(f"input shape {x.shape} != expected {want}")
        return np.asarray(x, dtype=np.float64)
    rng = np.random.default_rng(seed)
    return rng.normal(size=(cfg.image_size, cfg.image_size, cfg.in_chans))


def _emit(obj, out: Path | None):
    text = obj if isinstance(obj, str) else json.dumps(obj, indent=2) + "\n"
    if out is None:
        sys.stdout.write(text)
        return
    try:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text)
    except OSError as e:
        raise OSError(f"cannot write {out}: {e}") from e
    log.info("wrote %s", out)


def _jsonable(v):
    if isinstance(v, Fraction):
        return int(v) if v.denominator == 1 else float(v)
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    return v


# -- commands ------------------------------------------------------------------

def cmd_gen(args) -> int:
    rc = _run_config(args)
    if rc.out is None:
        raise InvalidArgument("--out directory is required")
    cfg = _model_config(rc, args.preset)
    model = vitref.random_model(cfg, rc.seed)
    scores = vitref.random_scores(cfg, rc.seed + 1)
    container.save_model(rc.out, model, scores)
    log.info("generated %d encoders, D=%d, N=%d", cfg.depth, cfg.embed_dim, cfg.num_tokens)
    return EXIT_OK


def prune_report(before, after, masks) -> dict:
    cfg = after.config
    ratios = [staticprune.measured_ratios(e) for e in after.encoders]
    return _jsonable({
        "r_b": None,
        "block_size": cfg.block_size,
        "head_retained_ratio": staticprune.head_retained_ratio(masks, cfg.num_heads),
        "param_count": staticprune.count_parameters(after),
        "param_count_baseline": staticprune.count_parameters(before),
        "layers": [
            {"alpha": r["alpha"], "alpha_proj": r["alpha_proj"], "heads_kept": r["h_kept"],
             "alpha_mlp": r["alpha_mlp"], "removed_heads": list(m.removed_heads)}
            for r, m in zip(ratios, masks)
        ],
    })


def cmd_prune(args) -> int:
    rc = _run_config(args)
    if rc.r_b is None:
        raise InvalidArgument("--rb is required")
    if rc.out is None:
        raise InvalidArgument("--out directory is required")
    model, scores = _load_model(rc)
    if scores is None:
        raise InvalidArgument(f"no importance scores next to {rc.weights}; pruning needs {container.SCORES_FILE}")
    pruned, masks = staticprune.prune_model(model, scores, rc.r_b, rc.block)
    container.save_model(rc.out, pruned, scores, masks)
    report = prune_report(model, pruned, masks)
    report["r_b"] = rc.r_b
    _emit(report, Path(rc.out) / "prune_report.json")
    return EXIT_OK


def cmd_infer(args) -> int:
    rc = _run_config(args)
    model, _ = _load_model(rc)
    x = _input_image(model.config, args.input, rc.seed)
    res = vitref.run_model(x, model)
    _emit({
        "logits": res.logits.tolist(),
        "prediction": int(np.argmax(res.logits)),
        "token_counts": res.token_counts,
    }, rc.out)
    return EXIT_OK


def cmd_simulate(args) -> int:
    rc = _run_config(args)
    model, _ = _load_model(rc)
    hw = _hardware(rc, model.config.block_size)
    x = _input_image(model.config, args.input, rc.seed)
    logits, report = accelsim.simulate_model(x, model, hw, args.assignment)
    out = report.to_json()
    out["logits"] = logits.tolist()
    out["token_counts"] = [report.layers[0].n_in] + [r.n_out for r in report.layers]
    _emit(out, rc.out)
    return EXIT_OK


def cmd_model(args) -> int:
    rc = _run_config(args)
    if rc.weights is not None:
        model, _ = _load_model(rc)
        cfg = model.config
        report = perfmodel.complexity_report(cfg, model)
        layers = [perfmodel.layer_sparsity(e) for e in model.encoders]
    else:
        cfg = _model_config(rc, args.preset)
        report = perfmodel.complexity_report(cfg)
        layers = None
        if any(v is not None for v in (args.alpha, args.alpha_proj, args.alpha_mlp, args.heads_kept)):
            layers = [perfmodel.LayerSparsity(
                args.heads_kept if args.heads_kept is not None else cfg.num_heads,
                Fraction(args.alpha if args.alpha is not None else 1),
                Fraction(args.alpha_proj if args.alpha_proj is not None else 1),
                staticprune.keep_count(cfg.mlp_dim, args.alpha_mlp if args.alpha_mlp is not None else 1),
            )] * cfg.depth
            per, n = [], cfg.num_tokens
            for j, sp in enumerate(layers, start=1):
                r_t = cfg.keep_rate_for(j)
                tdm = r_t is not None and r_t < 1
                nk = perfmodel.tokens_after(n, r_t) if tdm else n
                per.append((perfmodel.ComplexityInputs(
                    n, cfg.embed_dim, cfg.head_dim, cfg.mlp_dim, cfg.num_heads, alpha=sp.alpha,
                    alpha_proj=sp.alpha_proj, alpha_mlp=Fraction(sp.mlp_width, cfg.mlp_dim),
                    heads_kept=sp.heads_kept, n_kept=nk), tdm))
                n = nk
            pruned = perfmodel.model_complexity(cfg, per)
            report["pruned"] = {"per_encoder": pruned["per_encoder"], "total": pruned["total"]}
            report["reduction"] = report["baseline"]["total"] / float(pruned["total"])
    hw = _hardware(rc, cfg.block_size)
    if layers is None:
        layers = [perfmodel.LayerSparsity(cfg.num_heads)] * cfg.depth
    pred = perfmodel.predict_model_cycles(cfg, layers, hw)
    report["cycles"] = {"total_cycles": pred["total_cycles"], "latency_ms": pred["latency_ms"],
                        "per_encoder": [p["total"] for p in pred["layers"]]}
    report["resources"] = asdict(perfmodel.resource_model(hw))
    report["config"] = cfg.to_json()
    _emit(_jsonable(report), rc.out)
    return EXIT_OK


SWEEP_FIELDS = ("block", "r_b", "r_t", "total_cycles", "latency_ms", "mpca_cycles", "macs",
                "utilization", "head_retained_ratio", "param_count", "predicted_cycles")


def sweep_point(cfg: vitref.ModelConfig, b: int, r_b: float, r_t: float, seed: int, hw_dict: dict,
                assignment: str = "balanced") -> dict:
    """Generate, prune and simulate one grid point."""
    cfg = replace(cfg, block_size=b, keep_rate=r_t)
    model = vitref.random_model(cfg, seed)
    scores = vitref.random_scores(cfg, seed + 1)
    pruned, masks = staticprune.prune_model(model, scores, r_b)
    hw = accelsim.HardwareConfig.from_json({**hw_dict, "b": b})
    x = np.random.default_rng(seed).normal(size=(cfg.image_size, cfg.image_size, cfg.in_chans))
    _, rep = accelsim.simulate_model(x, pruned, hw, assignment)
    pred = perfmodel.predict_model_cycles(cfg, [perfmodel.layer_sparsity(e) for e in pruned.encoders], hw)
    return {
        "block": b, "r_b": r_b, "r_t": r_t,
        "total_cycles": rep.total_cycles,
        "latency_ms": rep.latency_ms,
        "mpca_cycles": rep.mpca_cycles,
        "macs": rep.macs,
        "utilization": rep.utilization(),
        "head_retained_ratio": staticprune.head_retained_ratio(masks, cfg.num_heads),
        "param_count": staticprune.count_parameters(pruned),
        "predicted_cycles": float(pred["total_cycles"]),
    }


def _floats(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError as e:
        raise InvalidArgument(f"expected a comma-separated list of numbers, got {text!r}") from e


def cmd_sweep(args) -> int:
    rc = _run_config(args)
    cfg = _model_config(replace(rc, block=None, r_t=None), args.preset)
    blocks = [int(b) for b in _floats(args.blocks)] if args.blocks else [rc.block or cfg.block_size]
    rbs = _floats(args.rbs) if args.rbs else [rc.r_b or 1.0]
    rts = _floats(args.rts) if args.rts else [rc.r_t or 1.0]
    for v in rbs + rts:
        RunConfig(r_b=v)
    hw_dict = asdict(_hardware(rc, blocks[0]))
    points = [(b, r_b, r_t) for b in blocks for r_b in rbs for r_t in rts]
    if args.jobs > 1:
        with ProcessPoolExecutor(args.jobs) as pool:
            futs = [pool.submit(sweep_point, cfg, b, rb, rt, rc.seed, hw_dict, args.assignment) for b, rb, rt in points]
            rows = [f.result() for f in futs]
    else:
        rows = [sweep_point(cfg, b, rb, rt, rc.seed, hw_dict, args.assignment) for b, rb, rt in points]
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=SWEEP_FIELDS, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    _emit(buf.getvalue(), rc.out)
    return EXIT_OK


# -- parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vitsim", description=__doc__.split("\n\n")[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, *, weights=False, config=True, preset=False, hw=False, rb=False, rt=False, block=False,
               inp=False):
        sp.add_argument("--seed", type=int, default=0, help="RNG seed (default 0)")
        sp.add_argument("--out", type=Path, help="output path (stdout if omitted where allowed)")
        if config:
            sp.add_argument("--config", type=Path, help="model config JSON")
        if preset:
            sp.add_argument("--preset", choices=sorted(vitref.PRESETS), help="built-in model config")
        if weights:
            sp.add_argument("--weights", type=Path, help="model directory or weight container")
        if hw:
            sp.add_argument("--hw", type=Path, help="hardware config JSON")
        if rb:
            sp.add_argument("--rb", type=float, help="block/neuron top-k keep rate")
        if rt:
            sp.add_argument("--rt", type=float, help="token keep rate at TDM layers")
        if block:
            sp.add_argument("--block", type=int, help="block size b")
        if inp:
            sp.add_argument("--input", type=Path, help=".npy image tensor (H, W, C); random if omitted")

    sp = sub.add_parser("gen", help="write a seeded synthetic model")
    common(sp, preset=True, block=True, rt=True)
    sp.set_defaults(func=cmd_gen)

    sp = sub.add_parser("prune", help="block/neuron top-k pruning")
    common(sp, weights=True, rb=True, block=True)
    sp.set_defaults(func=cmd_prune)

    sp = sub.add_parser("infer", help="reference inference")
    common(sp, weights=True, rt=True, inp=True)
    sp.set_defaults(func=cmd_infer)

    sp = sub.add_parser("simulate", help="accelerator simulation")
    common(sp, weights=True, rt=True, hw=True, inp=True)
    sp.add_argument("--assignment", choices=("balanced", "lpt", "round_robin"), default="balanced")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("model", help="analytical complexity, cycle and resource report")
    common(sp, weights=True, preset=True, hw=True, rt=True, block=True)
    sp.add_argument("--alpha", type=float, help="retained ratio of W_q/W_k/W_v blocks")
    sp.add_argument("--alpha-proj", type=float, help="retained ratio of W_proj blocks")
    sp.add_argument("--alpha-mlp", type=float, help="retained ratio of MLP neurons")
    sp.add_argument("--heads-kept", type=int, help="surviving heads per encoder")
    sp.set_defaults(func=cmd_model)

    sp = sub.add_parser("sweep", help="grid of simulations as CSV")
    common(sp, preset=True, hw=True, rb=True, rt=True, block=True)
    sp.add_argument("--blocks", help="comma-separated block sizes")
    sp.add_argument("--rbs", help="comma-separated r_b values")
    sp.add_argument("--rts", help="comma-separated r_t values")
    sp.add_argument("--jobs", type=int, default=1, help="worker processes")
    sp.add_argument("--assignment", choices=("balanced", "lpt", "round_robin"), default="balanced")
    sp.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    level = getattr(logging, os.environ.get("VITSIM_LOG", "WARNING").upper(), None)
    logging.basicConfig(level=level if isinstance(level, int) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except InvariantViolation as e:
        log.error("invariant violated: %s", e)
        print(f"vitsim: internal invariant violated: {e}", file=sys.stderr)
        return EXIT_INVARIANT
    except (InvalidArgument, OSError) as e:
        print(f"vitsim: {e}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
