"""Command-line entry point: ``ream <command> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from . import calibration as cal
from .evaluation import (
    ScoreRow,
    correlation_table,
    default_reference,
    fidelity,
    fidelity_score,
    hypervolume,
    mark_frontiers,
    numerical_rank,
    pareto_frontier,
    read_score_table,
    write_score_table,
)
from .merging import METHOD_ALIASES, CompressionConfig, baseline_config, compress_model
from .model import RedundancyPlan, _atomic_write, load_model, model_forward_batch, save_model, synth_model
from .saliency import saliency_freq, saliency_reap
from .similarity import dump_matrix, sim_expert_outputs, sim_gate_logits, sim_gated_outputs, sim_ream

log = logging.getLogger("ream")

COMMANDS = ("synth", "calibrate", "compress", "evaluate", "sweep", "report")
SWEEP_METHODS = ("freq", "reap", "hcsmoe", "ream")
DEFAULT_EVAL_TOKENS = 1024


@dataclass
class RunConfig:
    command: str
    model_path: Path | None = None
    out_path: Path | None = None
    mixture: cal.MixtureRatio | None = None
    compression: CompressionConfig | None = None
    num_tokens: int = cal.DEFAULT_NUM_TOKENS
    seed: int = 0


class CLIError(Exception):
    pass


def _ratio_arg(text: str) -> cal.MixtureRatio:
    try:
        return cal.parse_ratio(text)
    except cal.MixtureParseError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _keep_count(keep: float, n: int) -> int:
    if not 0 < keep <= 1:
        raise CLIError(f"--keep must be in (0, 1], got {keep}")
    return max(1, int(round(keep * n)))


def _mixture_from(args) -> tuple[cal.MixtureRatio, int, int]:
    """Ratio, seed and token count from ``--mixture-file`` or flags."""
    if getattr(args, "mixture_file", None):
        mc = cal.read_mixture_config(args.mixture_file)
        return mc.ratio, mc.seed, mc.num_tokens
    return args.ratio, args.seed, args.num_tokens


def _compression_config(args, n: int, method: str | None = None) -> CompressionConfig:
    method = method or args.method
    n_keep = args.n_keep if args.n_keep is not None else _keep_count(args.keep, n)
    name = {"prune_freq": "freq", "prune_reap": "reap", "cluster_avg_linkage": "hcsmoe"}.get(
        METHOD_ALIASES.get(method, method), "ream"
    )
    overrides = {}
    if name == "ream":
        overrides = dict(
            use_gate_sim=not args.no_gate_sim,
            use_gated_outputs=not args.no_gated_outputs,
            sequential=not args.no_sequential,
            alignment_mode=args.align,
            saliency=args.saliency,
            merge_weights=args.merge_weights or "reap",
        )
        if args.no_pseudo_prune:
            overrides["method"] = "assign_nearest"
    elif args.merge_weights:
        overrides["merge_weights"] = args.merge_weights
    if args.capacity is not None:
        overrides["capacity"] = args.capacity
    overrides["renormalize_topk"] = args.renormalize_topk
    overrides["dense_capture"] = args.dense_capture
    return baseline_config(name, n_keep, **overrides)


def _eval_sets(model, seed: int, n: int) -> dict[str, np.ndarray]:
    gens = cal.domain_generators(model.d_model, model.seed)
    return {d: cal.domain_tokens(gens, d, n, seed) for d in cal.DOMAINS}


def _calibration_set(model, ratio, num_tokens, seed) -> cal.CalibrationSet:
    gens = cal.domain_generators(model.d_model, model.seed)
    return cal.build_mixture(ratio, num_tokens, seed, gens)


def _fidelity_json(rep) -> dict:
    return {k: v for k, v in asdict(rep).items()}


def _write_json(path: Path, obj) -> None:
    _atomic_write(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode())


# --------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    plan = RedundancyPlan(
        base_experts=args.base_experts or args.experts,
        clones_per_base=args.clones,
        noise_scale=args.noise,
        permute_hidden=args.permute,
        router_jitter=args.router_jitter,
    )
    model = synth_model(
        args.d_model, args.d_ff, args.layers, args.experts, args.top_k, plan, args.seed, args.router_scale
    )
    save_model(model, args.out)
    log.info("wrote %s", args.out)
    return 0


def cmd_calibrate(args) -> int:
    model = load_model(args.model)
    ratio, seed, num_tokens = _mixture_from(args)
    calib = _calibration_set(model, ratio, num_tokens, seed)
    _, inputs = model_forward_batch(model, calib.tokens, renormalize=args.renormalize_topk)
    lines = ["layer,expert,active_count,freq,reap"]
    for li, (layer, x) in enumerate(zip(model.layers, inputs)):
        stats = cal.collect_layer_stats(layer, x, renormalize=args.renormalize_topk)
        f, r = saliency_freq(stats).scores, saliency_reap(stats).scores
        for i in range(layer.num_experts):
            lines.append(f"{li},{i},{int(stats.active_counts[i])},{float(f[i])!r},{float(r[i])!r}")
    _atomic_write(Path(args.out), ("\n".join(lines) + "\n").encode())
    if args.write_mixture:
        cal.write_mixture_config(cal.MixtureConfig(ratio, seed, num_tokens), args.write_mixture)
    return 0


def _dump_similarities(model, calib, dump_dir: Path) -> None:
    dump_dir.mkdir(parents=True, exist_ok=True)
    _, inputs = model_forward_batch(model, calib.tokens)
    for li, (layer, x) in enumerate(zip(model.layers, inputs)):
        stats = cal.collect_layer_stats(layer, x)
        for name, fn in (
            ("gate", sim_gate_logits),
            ("output", sim_expert_outputs),
            ("gated_output", sim_gated_outputs),
            ("ream", sim_ream),
        ):
            dump_matrix(fn(stats), dump_dir / f"layer{li}_{name}.txt")


def run_compress(model, ratio, num_tokens, seed, cfg):
    calib = _calibration_set(model, ratio, num_tokens, seed)
    return compress_model(model, calib, cfg)


def cmd_compress(args) -> int:
    model = load_model(args.model)
    ratio, seed, num_tokens = _mixture_from(args)
    cfg = _compression_config(args, model.num_experts)
    out = Path(args.out)
    compressed, report = run_compress(model, ratio, num_tokens, seed, cfg)
    save_model(compressed, out)
    report.write_manifest(args.manifest or out.with_name(out.name + ".manifest"))
    evals = _eval_sets(model, seed + 1, args.eval_tokens)
    held = np.concatenate([evals[d] for d in cal.DOMAINS])
    fid = fidelity(model, compressed, held, renormalize=cfg.renormalize_topk)
    _write_json(
        Path(args.fidelity or out.with_name(out.name + ".fidelity.json")),
        {"mixture": ratio.tag(), "n_keep": cfg.n_keep, "method": cfg.method, **_fidelity_json(fid)},
    )
    if args.dump_sim:
        _dump_similarities(model, _calibration_set(model, ratio, num_tokens, seed), Path(args.dump_sim))
    print(f"{cfg.method}: {model.num_experts} -> {compressed.num_experts} experts, pre-logit mse {fid.pre_logit_mse:.6g}")
    return 0


def domain_scores(original, compressed, seed: int, n: int, renormalize: bool = False) -> tuple[float, float, dict]:
    """(general-domain score, code-domain score, per-layer metrics)."""
    evals = _eval_sets(original, seed, n)
    fg = fidelity(original, compressed, evals["general"], renormalize)
    fc = fidelity(original, compressed, evals["code"], renormalize)
    metrics = {}
    for li, (a, b) in enumerate(zip(fg.per_layer_mse, fc.per_layer_mse)):
        metrics[f"layer{li}_mse_general"] = a
        metrics[f"layer{li}_mse_code"] = b
    return fidelity_score(fg), fidelity_score(fc), metrics


def cmd_evaluate(args) -> int:
    original = load_model(args.original)
    compressed = load_model(args.compressed)
    evals = _eval_sets(original, args.seed, args.num_tokens)
    result = {}
    for name in (*cal.DOMAINS, "all"):
        toks = np.concatenate(list(evals.values())) if name == "all" else evals[name]
        fid = fidelity(original, compressed, toks, args.renormalize_topk)
        pre, _ = model_forward_batch(compressed, toks)
        result[name] = {**_fidelity_json(fid), "score": fidelity_score(fid), "pre_logit_rank": numerical_rank(pre)}
    text = json.dumps(result, indent=2, sort_keys=True) + "\n"
    if args.out:
        _atomic_write(Path(args.out), text.encode())
    else:
        sys.stdout.write(text)
    return 0


def cmd_sweep(args) -> int:
    model = load_model(args.model)
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    for m in methods:
        if m not in SWEEP_METHODS:
            raise CLIError(f"unknown method {m!r}; choose from {','.join(SWEEP_METHODS)}")
    ratios = cal.sweep_mixtures() + list(args.ratio or [])
    rows = []
    for m in methods:
        cfg = _compression_config(args, model.num_experts, method=m)
        for ratio in ratios:
            compressed, _ = run_compress(model, ratio, args.num_tokens, args.seed, cfg)
            mc, gen, metrics = domain_scores(model, compressed, args.seed + 1, args.eval_tokens, cfg.renormalize_topk)
            rows.append(ScoreRow(f"{m}/{ratio.tag()}", mc, gen, False, metrics))
            log.info("%s %s mc=%.4f gen=%.4f", m, ratio.tag(), mc, gen)
    mark_frontiers(rows)
    write_score_table(rows, args.out)
    return 0


def report_text(rows: list[ScoreRow]) -> str:
    by_method: dict[str, list[ScoreRow]] = {}
    for r in rows:
        by_method.setdefault(r.method, []).append(r)
    ref = default_reference([r.point() for r in rows])
    out = [f"reference point: mc={ref[0]:.6g} gen={ref[1]:.6g}", "method,n_points,n_frontier,hypervolume"]
    for m, group in by_method.items():
        pts = [r.point() for r in group]
        front = pareto_frontier(pts)
        out.append(f"{m},{len(pts)},{len(front)},{hypervolume(pts, ref)!r}")
    out.append("")
    out.append("method,row,col,pearson_r")
    for m, group in by_method.items():
        mixtures = [r.mixture for r in group]
        if len(group) < 3 or any(x is None for x in mixtures):
            continue
        table = correlation_table(mixtures, [r.point() for r in group])
        for (a, b), r in table.entries.items():
            out.append(f"{m},{a},{b},{'nan' if r is None else repr(r)}")
    return "\n".join(out) + "\n"


def cmd_report(args) -> int:
    rows = read_score_table(args.scores)
    text = report_text(rows)
    if args.out:
        _atomic_write(Path(args.out), text.encode())
    else:
        sys.stdout.write(text)
    return 0


# --------------------------------------------------------------------------
# argument parsing


def _add_mixture_args(p) -> None:
    p.add_argument("--ratio", type=_ratio_arg, default=cal.MixtureRatio.normalized(1, 1, 1), help="C4:Math:Code")
    p.add_argument("--mixture-file", help="text file with c4=/math=/code=/seed=/num_tokens= records")
    p.add_argument("--num-tokens", type=int, default=cal.DEFAULT_NUM_TOKENS)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--renormalize-topk", action="store_true")


def _add_compression_args(p, with_method: bool = True) -> None:
    if with_method:
        p.add_argument("--method", default="ream", choices=sorted(set(METHOD_ALIASES) | set(METHOD_ALIASES.values())))
    p.add_argument("--keep", type=float, default=0.75, help="fraction of experts kept per layer")
    p.add_argument("--n-keep", type=int, help="absolute expert count per layer (overrides --keep)")
    p.add_argument("--capacity", type=int, help="group capacity C (default 16, or 32 above 128 experts)")
    p.add_argument("--align", default="combined", choices=("act", "wt", "combined", "none"))
    p.add_argument("--saliency", default="reap", choices=("freq", "reap"))
    p.add_argument("--merge-weights", choices=("freq", "reap", "uniform"))
    p.add_argument("--no-gate-sim", action="store_true")
    p.add_argument("--no-gated-outputs", action="store_true")
    p.add_argument("--no-pseudo-prune", action="store_true")
    p.add_argument("--no-sequential", action="store_true")
    p.add_argument("--dense-capture", action="store_true")
    p.add_argument("--eval-tokens", type=int, default=DEFAULT_EVAL_TOKENS)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ream", description="MoE expert compression on synthetic models")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic MOEC1 model")
    p.add_argument("--out", required=True)
    p.add_argument("--d-model", type=int, default=32)
    p.add_argument("--d-ff", type=int, default=64)
    p.add_argument("--layers", type=int, default=4)
    p.add_argument("--experts", type=int, default=16)
    p.add_argument("--top-k", type=int, default=2)
    p.add_argument("--base-experts", type=int)
    p.add_argument("--clones", type=int, default=1)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--permute", action="store_true")
    p.add_argument("--router-jitter", type=float)
    p.add_argument("--router-scale", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("calibrate", help="per-expert saliency table for a mixture")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--write-mixture", help="also write the mixture config file")
    _add_mixture_args(p)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("compress", help="compress a model")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--manifest")
    p.add_argument("--fidelity")
    p.add_argument("--dump-sim", help="directory for similarity matrix text dumps")
    _add_mixture_args(p)
    _add_compression_args(p)
    p.set_defaults(func=cmd_compress)

    p = sub.add_parser("evaluate", help="fidelity of a compressed model")
    p.add_argument("--original", required=True)
    p.add_argument("--compressed", required=True)
    p.add_argument("--out")
    p.add_argument("--num-tokens", type=int, default=DEFAULT_EVAL_TOKENS)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--renormalize-topk", action="store_true")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="compress across the calibration mixtures")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--methods", default=",".join(SWEEP_METHODS))
    p.add_argument("--ratio", type=_ratio_arg, action="append", help="extra mixture (repeatable)")
    p.add_argument("--num-tokens", type=int, default=cal.DEFAULT_NUM_TOKENS)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--renormalize-topk", action="store_true")
    _add_compression_args(p, with_method=False)
    p.set_defaults(func=cmd_sweep, method="ream", mixture_file=None)

    p = sub.add_parser("report", help="Pareto, hypervolume and correlations of a score table")
    p.add_argument("--scores", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"ream {args.command}: I/O error: {exc}", file=sys.stderr)
        return 2
    except (CLIError, ValueError) as exc:
        print(f"ream {args.command}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
