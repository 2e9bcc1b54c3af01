"""MoE layer stack, forward passes, synthetic models and the MOEC1 container."""

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .numeric import ShapeError, matmul, silu, softmax, topk_indices, topk_mask

WEIGHT_DTYPE = np.dtype("<f4")
MAGIC = b"MOEC1"
_HEADER = struct.Struct("<5sIIIIIq")


def _frozen(a, shape: tuple[int, ...], name: str) -> np.ndarray:
    arr = np.array(a, dtype=WEIGHT_DTYPE)
    if arr.shape != shape:
        raise ShapeError(f"{name} has shape {arr.shape}, expected {shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class ExpertWeights:
    """One SwiGLU expert. Hidden neuron ``p`` owns row p of ``w_gate_proj`` and
    ``w_up`` and column p of ``w_down``."""

    w_gate_proj: np.ndarray  # d_ff x d_model
    w_up: np.ndarray  # d_ff x d_model
    w_down: np.ndarray  # d_model x d_ff

    def __post_init__(self):
        gp = np.asarray(self.w_gate_proj)
        if gp.ndim != 2:
            raise ShapeError("w_gate_proj must be 2-D")
        d_ff, d_model = gp.shape
        object.__setattr__(self, "w_gate_proj", _frozen(gp, (d_ff, d_model), "w_gate_proj"))
        object.__setattr__(self, "w_up", _frozen(self.w_up, (d_ff, d_model), "w_up"))
        object.__setattr__(self, "w_down", _frozen(self.w_down, (d_model, d_ff), "w_down"))

    @property
    def d_model(self) -> int:
        return self.w_gate_proj.shape[1]

    @property
    def d_ff(self) -> int:
        return self.w_gate_proj.shape[0]

    def permute_hidden(self, perm: Sequence[int]) -> "ExpertWeights":
        """Reorder hidden neurons so that slot q holds neuron ``perm[q]``."""
        perm = np.asarray(perm, dtype=np.intp)
        if sorted(perm.tolist()) != list(range(self.d_ff)):
            raise ValueError("perm is not a permutation of the hidden dimension")
        return ExpertWeights(self.w_gate_proj[perm], self.w_up[perm], self.w_down[:, perm])

    def equals(self, other: "ExpertWeights") -> bool:
        return (
            np.array_equal(self.w_gate_proj, other.w_gate_proj)
            and np.array_equal(self.w_up, other.w_up)
            and np.array_equal(self.w_down, other.w_down)
        )


@dataclass(frozen=True, eq=False)
class MoELayer:
    w_gate: np.ndarray  # N x d_model, router rows
    experts: tuple[ExpertWeights, ...]
    top_k: int

    def __post_init__(self):
        experts = tuple(self.experts)
        object.__setattr__(self, "experts", experts)
        if not experts:
            raise ValueError("a layer needs at least one expert")
        d_model, d_ff = experts[0].d_model, experts[0].d_ff
        if any(e.d_model != d_model or e.d_ff != d_ff for e in experts):
            raise ShapeError("experts in a layer must share d_model and d_ff")
        object.__setattr__(self, "w_gate", _frozen(self.w_gate, (len(experts), d_model), "w_gate"))
        if not 1 <= self.top_k <= len(experts):
            raise ValueError(f"top_k={self.top_k} out of range for {len(experts)} experts")

    @property
    def num_experts(self) -> int:
        return len(self.experts)

    @property
    def d_model(self) -> int:
        return self.w_gate.shape[1]

    @property
    def d_ff(self) -> int:
        return self.experts[0].d_ff


@dataclass(frozen=True, eq=False)
class ModelSpec:
    d_model: int
    d_ff: int
    num_layers: int
    layers: tuple[MoELayer, ...]
    seed: int = 0

    def __post_init__(self):
        layers = tuple(self.layers)
        object.__setattr__(self, "layers", layers)
        if len(layers) != self.num_layers:
            raise ShapeError(f"expected {self.num_layers} layers, got {len(layers)}")
        for layer in layers:
            if layer.d_model != self.d_model or layer.d_ff != self.d_ff:
                raise ShapeError("layer dimensions disagree with the model")

    @property
    def num_experts(self) -> int:
        counts = {layer.num_experts for layer in self.layers}
        if len(counts) != 1:
            raise ValueError("layers hold different expert counts")
        return counts.pop()

    @property
    def top_k(self) -> int:
        ks = {layer.top_k for layer in self.layers}
        if len(ks) != 1:
            raise ValueError("layers use different top_k")
        return ks.pop()

    def replace_layer(self, index: int, layer: MoELayer) -> "ModelSpec":
        layers = list(self.layers)
        layers[index] = layer
        return ModelSpec(self.d_model, self.d_ff, self.num_layers, tuple(layers), self.seed)

    def equals(self, other: "ModelSpec") -> bool:
        """Bit-exact equality of every weight and header field."""
        if (self.d_model, self.d_ff, self.num_layers, self.seed) != (
            other.d_model,
            other.d_ff,
            other.num_layers,
            other.seed,
        ):
            return False
        for a, b in zip(self.layers, other.layers):
            if a.top_k != b.top_k or a.num_experts != b.num_experts:
                return False
            if not np.array_equal(a.w_gate, b.w_gate):
                return False
            if not all(ea.equals(eb) for ea, eb in zip(a.experts, b.experts)):
                return False
        return True


@dataclass(frozen=True)
class RedundancyPlan:
    """How synthetic layers plant redundant experts.

    ``router_jitter`` controls clone router rows: ``None`` draws every row
    independently; a float copies the base row and adds Gaussian noise of that
    scale, so 0.0 gives clones identical routing logits.
    """

    base_experts: int
    clones_per_base: int = 1
    noise_scale: float = 0.0
    permute_hidden: bool = False
    router_jitter: float | None = None

    def __post_init__(self):
        if self.base_experts < 1 or self.clones_per_base < 1:
            raise ValueError("base_experts and clones_per_base must be positive")
        if self.noise_scale < 0:
            raise ValueError("noise_scale must be >= 0")

    @property
    def num_experts(self) -> int:
        return self.base_experts * self.clones_per_base


# --------------------------------------------------------------------------
# forward passes


def expert_hidden(e: ExpertWeights, x: np.ndarray) -> np.ndarray:
    """Hidden activations ``silu(x W_gp^T) * (x W_up^T)`` for a batch of rows."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] != e.d_model:
        raise ShapeError(f"token width {x.shape[1]} != d_model {e.d_model}")
    both = matmul(x, np.concatenate([e.w_gate_proj, e.w_up], axis=0).T)
    return silu(both[:, : e.d_ff]) * both[:, e.d_ff :]


def expert_forward(e: ExpertWeights, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(output, hidden)`` for one token or a batch of tokens."""
    x = np.asarray(x, dtype=np.float64)
    h = expert_hidden(e, x)
    out = matmul(h, e.w_down.T)
    if x.ndim == 1:
        return out[0], h[0]
    return out, h


@dataclass
class RoutingTrace:
    """Per-token routing record produced by :func:`moe_forward`."""

    gate_logits: np.ndarray
    probs: np.ndarray
    masked_probs: np.ndarray
    active: np.ndarray
    outputs: dict[int, np.ndarray] = field(default_factory=dict)
    hidden: dict[int, np.ndarray] = field(default_factory=dict)


@dataclass
class LayerPass:
    """Batched version of :class:`RoutingTrace` for T tokens.

    ``captured[i]`` lists the tokens for which expert i's output was
    computed: its routed tokens, or every token when ``dense`` is set.
    """

    output: np.ndarray  # T x d_model, the MoE contribution (not the residual)
    gate_logits: np.ndarray  # T x N
    probs: np.ndarray  # T x N, full softmax
    masked_probs: np.ndarray  # T x N
    route_mask: np.ndarray  # T x N bool
    captured: list[np.ndarray]
    expert_outputs: list[np.ndarray]  # per expert, |captured_i| x d_model
    hidden: list[np.ndarray]  # per expert, |captured_i| x d_ff


def layer_pass(
    layer: MoELayer, xs: np.ndarray, renormalize: bool = False, dense: bool = False
) -> LayerPass:
    """Run a batch of tokens through one MoE layer, keeping everything needed
    for calibration."""
    xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))
    if xs.shape[1] != layer.d_model:
        raise ShapeError(f"token width {xs.shape[1]} != d_model {layer.d_model}")
    logits = matmul(xs, layer.w_gate.T)
    probs = softmax(logits)
    masked = topk_mask(probs, layer.top_k, renormalize=renormalize)
    # routing decided by rank, not by masked > 0: probabilities can underflow
    mask = np.zeros(probs.shape, dtype=bool)
    np.put_along_axis(mask, topk_indices(probs, layer.top_k), True, axis=1)
    y = np.zeros_like(xs)
    captured, outs, hids = [], [], []
    all_tokens = np.arange(xs.shape[0])
    for i, expert in enumerate(layer.experts):
        routed = np.flatnonzero(mask[:, i])
        idx = all_tokens if dense else routed
        if idx.size:
            out, h = expert_forward(expert, xs[idx])
        else:
            out = np.zeros((0, layer.d_model))
            h = np.zeros((0, layer.d_ff))
        captured.append(idx)
        outs.append(out)
        hids.append(h)
        if routed.size:
            sel = out if not dense else out[routed]
            y[routed] += masked[routed, i, None] * sel
    return LayerPass(y, logits, probs, masked, mask, captured, outs, hids)


def moe_forward(
    layer: MoELayer, x: np.ndarray, renormalize: bool = False
) -> tuple[np.ndarray, RoutingTrace]:
    """Single-token MoE output ``sum_i pi(x)_i E_i(x)`` and its routing trace."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ShapeError("moe_forward takes one token; use layer_pass for batches")
    lp = layer_pass(layer, x[None, :], renormalize=renormalize)
    active = np.flatnonzero(lp.route_mask[0])
    trace = RoutingTrace(
        gate_logits=lp.gate_logits[0],
        probs=lp.probs[0],
        masked_probs=lp.masked_probs[0],
        active=active,
        outputs={int(i): lp.expert_outputs[i][0] for i in active},
        hidden={int(i): lp.hidden[i][0] for i in active},
    )
    return lp.output[0], trace


def model_forward_batch(
    model: ModelSpec, xs: np.ndarray, renormalize: bool = False
) -> tuple[np.ndarray, list[np.ndarray]]:
    """Residual stream through all layers.

    Returns the pre-logit stream and the list of per-layer inputs (the
    stream entering each layer).
    """
    x = np.atleast_2d(np.asarray(xs, dtype=np.float64))
    inputs = []
    for layer in model.layers:
        inputs.append(x)
        x = x + layer_pass(layer, x, renormalize=renormalize).output
    return x, inputs


def model_forward(
    model: ModelSpec, x: np.ndarray, renormalize: bool = False
) -> tuple[np.ndarray, list[RoutingTrace]]:
    """Single-token pass returning the pre-logit vector and per-layer traces."""
    x = np.asarray(x, dtype=np.float64)
    traces = []
    for layer in model.layers:
        y, trace = moe_forward(layer, x, renormalize=renormalize)
        traces.append(trace)
        x = x + y
    return x, traces


# --------------------------------------------------------------------------
# synthetic models


def _random_expert(rng: np.random.Generator, d_model: int, d_ff: int) -> ExpertWeights:
    return ExpertWeights(
        rng.normal(0.0, 1.0 / np.sqrt(d_model), (d_ff, d_model)),
        rng.normal(0.0, 1.0 / np.sqrt(d_model), (d_ff, d_model)),
        rng.normal(0.0, 1.0 / np.sqrt(d_ff), (d_model, d_ff)),
    )


def _noisy(rng: np.random.Generator, e: ExpertWeights, scale: float) -> ExpertWeights:
    if scale == 0:
        return e
    return ExpertWeights(
        e.w_gate_proj + rng.normal(0.0, scale, e.w_gate_proj.shape),
        e.w_up + rng.normal(0.0, scale, e.w_up.shape),
        e.w_down + rng.normal(0.0, scale, e.w_down.shape),
    )


def synth_model(
    d_model: int,
    d_ff: int,
    num_layers: int,
    num_experts: int,
    top_k: int,
    plan: RedundancyPlan,
    seed: int,
    router_scale: float = 1.0,
) -> ModelSpec:
    """Random SwiGLU MoE stack with planted expert redundancy.

    Experts are laid out base-major: expert ``b * clones_per_base + c`` is
    clone ``c`` of base ``b``. Clone 0 is the base itself; later clones get
    an optional hidden permutation and additive noise. Router rows have
    per-entry std ``router_scale / sqrt(d_model)``.
    """
    if plan.num_experts != num_experts:
        raise ValueError(
            f"plan gives {plan.base_experts}x{plan.clones_per_base} experts, model needs {num_experts}"
        )
    rng = np.random.default_rng(seed)
    row_std = router_scale / np.sqrt(d_model)
    layers = []
    for _ in range(num_layers):
        experts = []
        rows = []
        for _b in range(plan.base_experts):
            base = _random_expert(rng, d_model, d_ff)
            base_row = rng.normal(0.0, row_std, d_model)
            for c in range(plan.clones_per_base):
                if c == 0:
                    experts.append(base)
                    rows.append(base_row)
                    continue
                clone = base
                if plan.permute_hidden:
                    clone = clone.permute_hidden(rng.permutation(d_ff))
                experts.append(_noisy(rng, clone, plan.noise_scale))
                if plan.router_jitter is None:
                    rows.append(rng.normal(0.0, row_std, d_model))
                else:
                    rows.append(base_row + rng.normal(0.0, plan.router_jitter * row_std, d_model))
        layers.append(MoELayer(np.array(rows), tuple(experts), top_k))
    return ModelSpec(d_model, d_ff, num_layers, tuple(layers), seed)


# --------------------------------------------------------------------------
# MOEC1 container


def _atomic_write(path: Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def model_to_bytes(model: ModelSpec) -> bytes:
    n = model.num_experts
    parts = [
        _HEADER.pack(MAGIC, model.d_model, model.d_ff, model.num_layers, n, model.top_k, model.seed)
    ]
    for layer in model.layers:
        parts.append(layer.w_gate.astype(WEIGHT_DTYPE).tobytes(order="C"))
        for e in layer.experts:
            for w in (e.w_gate_proj, e.w_up, e.w_down):
                parts.append(w.astype(WEIGHT_DTYPE).tobytes(order="C"))
    return b"".join(parts)


def model_from_bytes(data: bytes) -> ModelSpec:
    if len(data) < _HEADER.size:
        raise ValueError("truncated MOEC1 header")
    magic, d_model, d_ff, num_layers, n, top_k, seed = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise ValueError(f"bad magic {magic!r}, expected {MAGIC!r}")
    offset = _HEADER.size

    def take(shape):
        nonlocal offset
        count = int(np.prod(shape))
        nbytes = count * WEIGHT_DTYPE.itemsize
        if offset + nbytes > len(data):
            raise ValueError("truncated MOEC1 payload")
        arr = np.frombuffer(data, dtype=WEIGHT_DTYPE, count=count, offset=offset).reshape(shape)
        offset += nbytes
        return arr

    layers = []
    for _ in range(num_layers):
        w_gate = take((n, d_model))
        experts = [
            ExpertWeights(take((d_ff, d_model)), take((d_ff, d_model)), take((d_model, d_ff)))
            for _ in range(n)
        ]
        layers.append(MoELayer(w_gate, tuple(experts), top_k))
    if offset != len(data):
        raise ValueError(f"{len(data) - offset} trailing bytes after MOEC1 payload")
    return ModelSpec(d_model, d_ff, num_layers, tuple(layers), seed)


def save_model(model: ModelSpec, path) -> None:
    _atomic_write(Path(path), model_to_bytes(model))


def load_model(path) -> ModelSpec:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"model file not found: {path}")
    return model_from_bytes(path.read_bytes())
