"""Fidelity against the original model, pre-logit rank, Pareto and hypervolume."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .calibration import MixtureRatio
from .model import ModelSpec, _atomic_write, layer_pass, model_forward_batch
from .numeric import ShapeError, UndefinedCorrelationError, pearson, rowwise_cosine


@dataclass
class FidelityReport:
    per_layer_mse: list[float]
    per_layer_cosine: list[float]
    pre_logit_mse: float
    pre_logit_cosine: float
    num_eval_tokens: int
    # share of the original model's total MoE contribution that survives,
    # 1 - ||pre_c - pre_o||^2 / ||pre_o - x||^2
    explained: float = 1.0


def fidelity(
    original: ModelSpec, compressed: ModelSpec, eval_tokens: np.ndarray, renormalize: bool = False
) -> FidelityReport:
    """Compare a compressed model to the original on ``eval_tokens``.

    Per-layer numbers feed both models' layer l with the original model's
    residual stream (teacher forcing); pre-logit numbers compare the two
    end-to-end streams.
    """
    if original.d_model != compressed.d_model or original.num_layers != compressed.num_layers:
        raise ShapeError("models differ in d_model or layer count")
    xs = np.atleast_2d(np.asarray(eval_tokens, dtype=np.float64))
    pre_o, inputs = model_forward_batch(original, xs, renormalize=renormalize)
    pre_c, _ = model_forward_batch(compressed, xs, renormalize=renormalize)
    mses, coss = [], []
    for lo, lc, x in zip(original.layers, compressed.layers, inputs):
        yo = layer_pass(lo, x, renormalize=renormalize).output
        yc = layer_pass(lc, x, renormalize=renormalize).output
        mses.append(float(np.mean((yo - yc) ** 2)))
        coss.append(float(rowwise_cosine(yo, yc).mean()))
    diff = pre_c - pre_o
    contrib = float(np.sum((pre_o - xs) ** 2))
    explained = 1.0 - float(np.sum(diff**2)) / contrib if contrib > 0 else 1.0
    return FidelityReport(
        per_layer_mse=mses,
        per_layer_cosine=coss,
        pre_logit_mse=float(np.mean(diff**2)),
        pre_logit_cosine=float(rowwise_cosine(pre_o, pre_c).mean()),
        num_eval_tokens=xs.shape[0],
        explained=explained,
    )


def fidelity_score(report: FidelityReport) -> float:
    """Higher-is-better score on a 0-100 scale used as a Pareto axis."""
    return 100.0 * report.explained


def numerical_rank(embeddings: np.ndarray) -> int:
    """Number of singular values above ``max(m, n) * eps * sigma_max``."""
    a = np.asarray(embeddings, dtype=np.float64)
    if a.ndim != 2 or a.size == 0:
        raise ShapeError("numerical_rank needs a nonempty 2-D matrix")
    s = np.linalg.svd(a, compute_uv=False)
    if s[0] == 0:
        return 0
    tol = max(a.shape) * np.finfo(np.float64).eps * s[0]
    return int(np.sum(s > tol))


def pre_logit_rank(model: ModelSpec, eval_tokens: np.ndarray) -> int:
    pre, _ = model_forward_batch(model, eval_tokens)
    return numerical_rank(pre)


# --------------------------------------------------------------------------
# Pareto analysis


@dataclass(frozen=True)
class ScorePoint:
    mc_score: float
    gen_score: float
    label: str = ""

    def __post_init__(self):
        if not (math.isfinite(self.mc_score) and math.isfinite(self.gen_score)):
            raise ValueError("scores must be finite")

    def dominates(self, other: "ScorePoint") -> bool:
        return (
            self.mc_score >= other.mc_score
            and self.gen_score >= other.gen_score
            and (self.mc_score > other.mc_score or self.gen_score > other.gen_score)
        )


def pareto_frontier(points: Sequence[ScorePoint]) -> list[ScorePoint]:
    """Points not dominated by any other point, in input order.

    Exact duplicates of a frontier point are all kept.
    """
    if not points:
        raise ValueError("pareto_frontier needs at least one point")
    # sweep: sort by mc desc, gen desc; a point survives if its gen is at
    # least the best gen seen among strictly larger mc, or ties it exactly
    order = sorted(range(len(points)), key=lambda i: (-points[i].mc_score, -points[i].gen_score))
    keep = set()
    best_gen = -math.inf
    k = 0
    while k < len(order):
        mc = points[order[k]].mc_score
        block = [i for i in order[k:] if points[i].mc_score == mc]
        top = points[block[0]].gen_score
        if top > best_gen:
            keep.update(i for i in block if points[i].gen_score == top)
        best_gen = max(best_gen, top)
        k += len(block)
    return [p for i, p in enumerate(points) if i in keep]


def default_reference(*point_sets: Iterable[ScorePoint]) -> tuple[float, float]:
    """One unit below the per-axis minimum over all compared point sets."""
    pts = [p for s in point_sets for p in s]
    if not pts:
        raise ValueError("no points")
    return (min(p.mc_score for p in pts) - 1.0, min(p.gen_score for p in pts) - 1.0)


def hypervolume(points: Sequence[ScorePoint], ref: tuple[float, float] | None = None) -> float:
    """Area dominated by the frontier and bounded below by ``ref``."""
    front = pareto_frontier(points)
    if ref is None:
        ref = default_reference(points)
    rx, ry = ref
    for p in front:
        if p.mc_score < rx or p.gen_score < ry:
            raise ValueError(f"point {p} does not dominate the reference {ref}")
    # frontier sorted by mc descending has gen ascending
    front = sorted(front, key=lambda p: (-p.mc_score, p.gen_score))
    area, prev = 0.0, ry
    for p in front:
        if p.gen_score > prev:
            area += (p.mc_score - rx) * (p.gen_score - prev)
            prev = p.gen_score
    return area


@dataclass
class CorrelationTable:
    """Pearson r per (row, column); ``None`` marks an undefined entry."""

    entries: dict[tuple[str, str], float | None] = field(default_factory=dict)

    @property
    def flagged(self) -> list[tuple[str, str]]:
        return [k for k, v in self.entries.items() if v is None]

    def __getitem__(self, key):
        return self.entries[key]


def correlation_table(mixtures: Sequence[MixtureRatio], scores: Sequence[ScorePoint]) -> CorrelationTable:
    if len(mixtures) != len(scores):
        raise ShapeError("mixtures and scores must align")
    if len(scores) < 3:
        raise ValueError("correlation table needs at least three rows")
    cols = {
        "c4": [m.c4 for m in mixtures],
        "math": [m.math for m in mixtures],
        "code": [m.code for m in mixtures],
    }
    axes = {"mc": [s.mc_score for s in scores], "gen": [s.gen_score for s in scores]}
    table = CorrelationTable()

    def put(key, xs, ys):
        try:
            table.entries[key] = pearson(xs, ys)
        except UndefinedCorrelationError:
            table.entries[key] = None

    for dname, xs in cols.items():
        for aname, ys in axes.items():
            put((dname, aname), xs, ys)
    put(("mc", "gen"), axes["mc"], axes["gen"])
    return table


# --------------------------------------------------------------------------
# score tables

SCORE_COLUMNS = ("label", "mc", "gen", "on_frontier")


@dataclass
class ScoreRow:
    label: str
    mc: float
    gen: float
    on_frontier: bool = False
    layer_metrics: dict[str, float] = field(default_factory=dict)

    @property
    def method(self) -> str:
        return self.label.split("/", 1)[0]

    @property
    def mixture(self) -> MixtureRatio | None:
        if "/" not in self.label:
            return None
        from .calibration import parse_ratio

        return parse_ratio(self.label.split("/", 1)[1])

    def point(self) -> ScorePoint:
        return ScorePoint(self.mc, self.gen, self.label)


def mark_frontiers(rows: list[ScoreRow]) -> None:
    """Set ``on_frontier`` per method group."""
    by_method: dict[str, list[ScoreRow]] = {}
    for r in rows:
        by_method.setdefault(r.method, []).append(r)
    for group in by_method.values():
        pts = [r.point() for r in group]
        front = pareto_frontier(pts)
        front_ids = {id(p) for p in front}
        for r, p in zip(group, pts):
            r.on_frontier = id(p) in front_ids


def score_table_text(rows: Sequence[ScoreRow]) -> str:
    """CSV with columns label, mc, gen, on_frontier, then per-layer metrics."""
    extra = []
    for r in rows:
        for k in r.layer_metrics:
            if k not in extra:
                extra.append(k)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(list(SCORE_COLUMNS) + extra)
    for r in rows:
        w.writerow(
            [r.label, repr(float(r.mc)), repr(float(r.gen)), int(r.on_frontier)]
            + [repr(float(r.layer_metrics.get(k, float("nan")))) for k in extra]
        )
    return buf.getvalue()


def write_score_table(rows: Sequence[ScoreRow], path) -> None:
    _atomic_write(Path(path), score_table_text(rows).encode())


def read_score_table(path) -> list[ScoreRow]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"score table not found: {path}")
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header[:4]) != SCORE_COLUMNS:
            raise ValueError(f"{path}: unexpected header {header[:4]}")
        extra = header[4:]
        rows = []
        for line in reader:
            rows.append(
                ScoreRow(
                    label=line[0],
                    mc=float(line[1]),
                    gen=float(line[2]),
                    on_frontier=bool(int(line[3])),
                    layer_metrics={k: float(v) for k, v in zip(extra, line[4:])},
                )
            )
    return rows
