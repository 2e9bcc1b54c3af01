"""Synthetic calibration mixtures and per-layer statistics capture."""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .model import MoELayer, layer_pass
from .numeric import NORM_EPS

DOMAINS = ("general", "math", "code")

# C4:Math:Code rows used in the sweep. The balanced row is normalized on use.
SWEEP_RATIOS = (
    (0.3, 0.3, 0.3),
    (0.5, 0.5, 0.0),
    (0.5, 0.0, 0.5),
    (0.0, 0.5, 0.5),
    (0.2, 0.5, 0.3),
    (0.1, 0.8, 0.1),
    (0.0, 0.7, 0.3),
    (0.2, 0.25, 0.55),
    (0.1, 0.1, 0.8),
    (0.0, 0.3, 0.7),
)

DEFAULT_NUM_TOKENS = 4096


class MixtureParseError(ValueError):
    pass


@dataclass(frozen=True)
class MixtureRatio:
    c4: float
    math: float
    code: float

    def __post_init__(self):
        vals = (self.c4, self.math, self.code)
        if any(not (0.0 <= v <= 1.0) for v in vals):
            raise ValueError(f"mixture fractions must lie in [0, 1], got {vals}")
        if abs(sum(vals) - 1.0) > 1e-9:
            raise ValueError(f"mixture fractions must sum to 1, got {sum(vals)!r}")

    @classmethod
    def normalized(cls, c4: float, math: float, code: float) -> "MixtureRatio":
        total = c4 + math + code
        if min(c4, math, code) < 0 or total <= 0:
            raise ValueError("mixture weights must be nonnegative and not all zero")
        return cls(c4 / total, math / total, code / total)

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.c4, self.math, self.code)

    def tag(self) -> str:
        return ":".join(f"{v:g}" for v in self.as_tuple())


def parse_ratio(text: str) -> MixtureRatio:
    """Parse ``"a:b:c"`` (C4:Math:Code) into a normalized ratio."""
    tokens = text.strip().split(":")
    if len(tokens) != 3:
        raise MixtureParseError(f"expected three ':'-separated numbers, got {text!r}")
    vals = []
    for tok in tokens:
        try:
            v = float(tok)
        except ValueError:
            raise MixtureParseError(f"not a number: {tok!r} in {text!r}") from None
        if not np.isfinite(v) or v < 0:
            raise MixtureParseError(f"negative or non-finite fraction {tok!r} in {text!r}")
        vals.append(v)
    if sum(vals) == 0:
        raise MixtureParseError(f"all fractions are zero in {text!r}")
    return MixtureRatio.normalized(*vals)


def sweep_mixtures() -> list[MixtureRatio]:
    return [MixtureRatio.normalized(*r) for r in SWEEP_RATIOS]


@dataclass(frozen=True)
class MixtureConfig:
    ratio: MixtureRatio
    seed: int = 0
    num_tokens: int = DEFAULT_NUM_TOKENS


_RECORD = re.compile(r"^\s*(\w+)\s*=\s*(\S+)\s*$")


def read_mixture_config(path) -> MixtureConfig:
    """Read ``key=value`` records: c4, math, code, seed, num_tokens.

    Records may share a line (``c4=0.3 math=0.3 code=0.4``)."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"mixture config not found: {path}")
    values: dict[str, str] = {}
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.split("#", 1)[0]
        for rec in line.split():
            m = _RECORD.match(rec)
            if not m:
                raise MixtureParseError(f"{path}:{lineno}: malformed record {rec!r}")
            values[m.group(1)] = m.group(2)
    try:
        ratio = MixtureRatio.normalized(
            float(values.get("c4", 0)), float(values.get("math", 0)), float(values.get("code", 0))
        )
        cfg = MixtureConfig(
            ratio,
            seed=int(values.get("seed", 0)),
            num_tokens=int(values.get("num_tokens", DEFAULT_NUM_TOKENS)),
        )
    except ValueError as exc:
        raise MixtureParseError(f"{path}: {exc}") from None
    return cfg


def write_mixture_config(cfg: MixtureConfig, path) -> None:
    r = cfg.ratio
    Path(path).write_text(
        f"c4={r.c4!r} math={r.math!r} code={r.code!r}\nseed={cfg.seed}\nnum_tokens={cfg.num_tokens}\n"
    )


@dataclass(frozen=True, eq=False)
class DomainGenerator:
    domain_id: str
    mean: np.ndarray
    scale: float
    seed: int

    def __post_init__(self):
        if self.domain_id not in DOMAINS:
            raise ValueError(f"unknown domain {self.domain_id!r}")
        if self.scale <= 0:
            raise ValueError("scale must be positive")

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return self.mean + self.scale * rng.standard_normal((n, self.mean.size))


def domain_generators(
    d_model: int, seed: int = 0, mean_norm: float = 2.0, scale: float | None = None
) -> dict[str, DomainGenerator]:
    """Three generators with orthogonal means of norm ``mean_norm``.

    Pairwise mean distance is ``mean_norm * sqrt(2)``. ``scale`` is the
    per-coordinate token std, by default ``1/sqrt(d_model)`` so token noise
    has roughly unit norm.
    """
    if d_model < len(DOMAINS):
        raise ValueError("d_model must be at least 3 to separate the domains")
    if mean_norm * np.sqrt(2.0) < 1.0:
        raise ValueError("domain means must be at least 1.0 apart")
    rng = np.random.default_rng([seed, 0xD0])
    q, _ = np.linalg.qr(rng.standard_normal((d_model, len(DOMAINS))))
    scale = 1.0 / np.sqrt(d_model) if scale is None else scale
    return {
        name: DomainGenerator(name, mean_norm * q[:, i], scale, seed)
        for i, name in enumerate(DOMAINS)
    }


def largest_remainder_counts(fractions: Sequence[float], total: int) -> list[int]:
    """Integer counts proportional to ``fractions`` summing exactly to ``total``.

    Floors first, then hands the leftover units to the largest remainders
    (ties to the lower index). Remainders are rounded to 9 decimals first so
    float noise cannot break a tie."""
    raw = [f * total for f in fractions]
    counts = [int(np.floor(round(r, 9))) for r in raw]
    short = total - sum(counts)
    order = sorted(range(len(raw)), key=lambda i: (-round(raw[i] - counts[i], 9), i))
    for i in order[:short]:
        counts[i] += 1
    return counts


@dataclass(frozen=True, eq=False)
class CalibrationSet:
    tokens: np.ndarray  # T x d_model
    domain_labels: tuple[str, ...]

    def __post_init__(self):
        if len(self.domain_labels) != self.tokens.shape[0]:
            raise ValueError("one domain label per token required")

    @property
    def num_tokens(self) -> int:
        return self.tokens.shape[0]

    def domain_counts(self) -> dict[str, int]:
        return {d: self.domain_labels.count(d) for d in DOMAINS}


def build_mixture(
    ratio: MixtureRatio,
    num_tokens: int,
    seed: int,
    generators: dict[str, DomainGenerator] | None = None,
    d_model: int | None = None,
) -> CalibrationSet:
    """Draw a calibration stream with per-domain counts set by ``ratio``.

    Tokens are grouped by domain (general, math, code); the order carries no
    meaning since statistics treat tokens as exchangeable.
    """
    if num_tokens <= 0:
        raise ValueError("num_tokens must be positive")
    if generators is None:
        if d_model is None:
            raise ValueError("pass either generators or d_model")
        generators = domain_generators(d_model, seed)
    counts = largest_remainder_counts(ratio.as_tuple(), num_tokens)
    rng = np.random.default_rng([seed, 0xCA11])
    chunks, labels = [], []
    for name, count in zip(DOMAINS, counts):
        gen = generators[name]
        chunks.append(gen.sample(count, rng))
        labels.extend([name] * count)
    return CalibrationSet(np.concatenate(chunks, axis=0), tuple(labels))


def domain_tokens(generators: dict[str, DomainGenerator], domain: str, n: int, seed: int) -> np.ndarray:
    """Held-out tokens from a single domain."""
    return generators[domain].sample(n, np.random.default_rng([seed, 0xE7A1, DOMAINS.index(domain)]))


@dataclass(eq=False)
class LayerStats:
    """Calibration record for one layer over T tokens.

    Per-expert arrays cover ``captured[i]``: the routed tokens under sparse
    capture, all tokens under dense capture. ``gated_outputs`` uses the full
    softmax value, which equals the masked value on routed tokens unless
    top-k renormalization is on.
    """

    gate_logits: np.ndarray  # T x N
    probs: np.ndarray  # T x N
    route_mask: np.ndarray  # T x N
    masked_probs: np.ndarray  # T x N
    captured: list[np.ndarray]
    expert_outputs: list[np.ndarray]  # |captured_i| x d_model
    gated_outputs: list[np.ndarray]  # |captured_i| x d_model
    hidden_acts: list[np.ndarray]  # d_ff x |captured_i|
    active_counts: np.ndarray  # N
    top_k: int
    dense: bool = False

    @property
    def num_tokens(self) -> int:
        return self.gate_logits.shape[0]

    @property
    def num_experts(self) -> int:
        return self.gate_logits.shape[1]

    def active_tokens(self, i: int) -> np.ndarray:
        return np.flatnonzero(self.route_mask[:, i])

    def active_outputs(self, i: int) -> np.ndarray:
        """Expert i's outputs on its routed tokens, in token order."""
        if not self.dense:
            return self.expert_outputs[i]
        return self.expert_outputs[i][self.route_mask[:, i]]


def collect_layer_stats(
    layer: MoELayer, inputs: np.ndarray, renormalize: bool = False, dense: bool = False
) -> LayerStats:
    inputs = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    if inputs.shape[0] == 0:
        raise ValueError("no calibration tokens")
    lp = layer_pass(layer, inputs, renormalize=renormalize, dense=dense)
    gated = [lp.probs[idx, i, None] * out for i, (idx, out) in enumerate(zip(lp.captured, lp.expert_outputs))]
    return LayerStats(
        gate_logits=lp.gate_logits,
        probs=lp.probs,
        route_mask=lp.route_mask,
        masked_probs=lp.masked_probs,
        captured=lp.captured,
        expert_outputs=lp.expert_outputs,
        gated_outputs=gated,
        hidden_acts=[h.T for h in lp.hidden],
        active_counts=lp.route_mask.sum(axis=0),
        top_k=layer.top_k,
        dense=dense,
    )


def normalize_rows(profile: np.ndarray) -> np.ndarray:
    """L2-normalize each row; rows with norm below 1e-12 become zero."""
    profile = np.asarray(profile, dtype=np.float64)
    norms = np.linalg.norm(profile, axis=1, keepdims=True)
    out = np.zeros_like(profile)
    ok = norms[:, 0] >= NORM_EPS
    out[ok] = profile[ok] / norms[ok]
    return out


def normalize_hidden_profiles(stats: LayerStats) -> list[np.ndarray | None]:
    """Per-expert neuron activation profiles with unit-norm rows.

    Experts with no captured tokens map to ``None`` (the empty-profile marker).
    """
    return [normalize_rows(h) if h.shape[1] else None for h in stats.hidden_acts]



def plant_domain_experts(
    model,
    generators: dict[str, DomainGenerator],
    assignment: dict[int, str],
    route_strength: float = 2.0,
    cross: float = 0.75,
    gain: float = 4.0,
):
    """Copy of ``model`` whose listed experts specialize in one domain each.

    For ``assignment[i] = d`` in every layer:

    * router row i drops its component in the span of the domain means, then
      gains ``route_strength`` along mean_d and ``cross * route_strength``
      along each other domain's mean. Native tokens prefer expert i; foreign
      tokens reach it now and then, depending on token noise.
    * each ``w_up`` row gains ``+-gain / sqrt(d_model)`` along mean_d, so the
      expert's output is large on native tokens and ordinary elsewhere.

    Router rows of unassigned experts are also projected off the mean span.
    """
    from .model import ExpertWeights, ModelSpec

    units = {d: g.mean / np.linalg.norm(g.mean) for d, g in generators.items()}
    q, _ = np.linalg.qr(np.stack([generators[d].mean for d in DOMAINS], axis=1))
    rng = np.random.default_rng([model.seed, 0x5EC])
    layers = []
    for layer in model.layers:
        rows = layer.w_gate.astype(np.float64)
        rows = rows - (rows @ q) @ q.T
        experts = list(layer.experts)
        for i, domain in sorted(assignment.items()):
            rows[i] += route_strength * units[domain]
            for other in DOMAINS:
                if other != domain:
                    rows[i] += cross * route_strength * units[other]
            e = experts[i]
            signs = rng.choice([-1.0, 1.0], size=(e.d_ff, 1))
            w_up = e.w_up.astype(np.float64) + gain / np.sqrt(model.d_model) * signs * units[domain]
            experts[i] = ExpertWeights(e.w_gate_proj, w_up, e.w_down)
        layers.append(MoELayer(rows, tuple(experts), layer.top_k))
    return ModelSpec(model.d_model, model.d_ff, model.num_layers, tuple(layers), model.seed)
