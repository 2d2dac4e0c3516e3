"""A small Pre-LN transformer language model with manual autograd.

Architecture: token embedding plus learned additive position embedding,
then `layers` repetitions of (Pre-LN attention block, Pre-LN MLP block)
with residual adds and no biases on the linear projections, a final
LayerNorm, and a weight-tied LM head trained with mean cross-entropy
against next-token labels (inputs rolled left by one).

This module holds the configuration, deterministic parameter
construction, and the numerical units (layer norm, gelu, softmax, cross
entropy) with hand-written backward passes.  Every unit takes a
`PolicyOps` so the same code runs exact (fp32 policy) or with emulated
bf16/fp8 rounding.  The executable forward/backward lives in `engine`,
which runs this model under an arbitrary parallel layout; the trusted
single-device reference is the degenerate all-ones layout of that same
engine, exposed here as `forward` / `backward` / `optimizer_step`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .canonical import CanonicalId, TensorKind
from .errors import ConfigInvalid, MissingTape, ShapeMismatch
from .generation import GenSpec, Normal, generate_full
from .tensor import POLICIES, PolicyOps, PrecisionPolicy


@dataclass(frozen=True)
class ModelConfig:
    layers: int
    d_model: int
    n_heads: int
    d_ff: int
    seq_len: int
    vocab: int
    precision: str = "fp32"
    norm_eps: float = 1e-5
    init_std: float = 0.02

    def __post_init__(self):
        if self.layers < 1:
            raise ConfigInvalid("layers must be >= 1")
        for name in ("d_model", "n_heads", "d_ff", "seq_len", "vocab"):
            if getattr(self, name) < 1:
                raise ConfigInvalid(f"{name} must be positive")
        if self.d_model % self.n_heads != 0:
            raise ConfigInvalid("d_model must be divisible by n_heads")
        if self.precision not in POLICIES:
            raise ConfigInvalid(
                f"unknown precision policy {self.precision!r}; "
                f"choose from {sorted(POLICIES)}")

    @property
    def policy(self) -> PrecisionPolicy:
        return POLICIES[self.precision]

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def as_dict(self) -> dict:
        return {"layers": self.layers, "d_model": self.d_model,
                "n_heads": self.n_heads, "d_ff": self.d_ff,
                "seq_len": self.seq_len, "vocab": self.vocab,
                "precision": self.precision, "norm_eps": self.norm_eps,
                "init_std": self.init_std}


def attn_name(layer: int) -> str:
    return f"model.layers.{layer}.attn"


def mlp_name(layer: int) -> str:
    return f"model.layers.{layer}.mlp"


def param_specs(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...], object]]:
    """(path, shape, init) for every parameter, in registration order.

    init is either a `Normal` distribution or a float constant.  Output
    projections of residual branches get the depth-scaled std so the
    residual stream does not blow up with depth.
    """
    residual_std = cfg.init_std / math.sqrt(2.0 * cfg.layers)
    d, ff = cfg.d_model, cfg.d_ff
    specs: list[tuple[str, tuple[int, ...], object]] = [
        ("model.embedding.word", (cfg.vocab, d), Normal(0.0, cfg.init_std)),
        ("model.embedding.position", (cfg.seq_len, d), Normal(0.0, cfg.init_std)),
    ]
    for layer in range(cfg.layers):
        attn, mlp = attn_name(layer), mlp_name(layer)
        specs += [
            (f"{attn}.norm.weight", (d,), 1.0),
            (f"{attn}.norm.bias", (d,), 0.0),
            (f"{attn}.wq", (d, d), Normal(0.0, cfg.init_std)),
            (f"{attn}.wk", (d, d), Normal(0.0, cfg.init_std)),
            (f"{attn}.wv", (d, d), Normal(0.0, cfg.init_std)),
            (f"{attn}.wo", (d, d), Normal(0.0, residual_std)),
            (f"{mlp}.norm.weight", (d,), 1.0),
            (f"{mlp}.norm.bias", (d,), 0.0),
            (f"{mlp}.w1", (d, ff), Normal(0.0, cfg.init_std)),
            (f"{mlp}.w2", (ff, d), Normal(0.0, residual_std)),
        ]
    specs += [
        ("model.final_norm.weight", (d,), 1.0),
        ("model.final_norm.bias", (d,), 0.0),
    ]
    return specs


@dataclass
class Model:
    cfg: ModelConfig
    params: dict[str, np.ndarray]
    order: list[str] = field(default_factory=list)
    # single-device API state: tape of the last forward() call
    last_run: object = None

    def param_count(self) -> int:
        return sum(p.size for p in self.params.values())


def build_model(cfg: ModelConfig) -> Model:
    params: dict[str, np.ndarray] = {}
    order: list[str] = []
    for path, shape, init in param_specs(cfg):
        if isinstance(init, Normal):
            ident = CanonicalId(0, 0, TensorKind.PARAM, path)
            params[path] = generate_full(ident, GenSpec(init, shape)).data
        else:
            params[path] = np.full(shape, float(init))
        order.append(path)
    return Model(cfg=cfg, params=params, order=order)


# ---------------------------------------------------------------------------
# numerical units (policy-quantized forward + manual backward)

def layer_norm_forward(po: PolicyOps, x: np.ndarray, gamma: np.ndarray,
                       beta: np.ndarray, eps: float):
    mu = po.mean(x, axis=-1, keepdims=True)
    xc = po.sub(x, mu)
    var = po.mean(po.mul(xc, xc), axis=-1, keepdims=True)
    std = po.sqrt(po.add(var, eps))
    xhat = po.div(xc, std)
    y = po.add(po.mul(xhat, gamma), beta)
    return y, (xhat, std)


def layer_norm_backward(po: PolicyOps, dy: np.ndarray, tape, gamma: np.ndarray):
    xhat, std = tape
    dxhat = po.mul(dy, gamma)
    # dx = (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat)) / std
    term = po.sub(po.sub(dxhat, po.mean(dxhat, axis=-1, keepdims=True)),
                  po.mul(xhat, po.mean(po.mul(dxhat, xhat), axis=-1, keepdims=True)))
    dx = po.div(term, std)
    axes = tuple(range(dy.ndim - 1))
    dgamma = po.sum(po.mul(dy, xhat), axis=axes)
    dbeta = po.sum(dy, axis=axes)
    return dx, dgamma, dbeta


_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def gelu_forward(po: PolicyOps, u: np.ndarray):
    u3 = po.mul(po.mul(u, u), u)
    inner = po.scale(po.add(u, po.scale(u3, _GELU_A)), _GELU_C)
    t = po.tanh(inner)
    y = po.mul(po.scale(u, 0.5), po.add(t, 1.0))
    return y, (u, t)


def gelu_backward(po: PolicyOps, dy: np.ndarray, tape):
    u, t = tape
    # d/du [0.5 u (1+t)] = 0.5 (1+t) + 0.5 u (1-t^2) * c (1 + 3a u^2)
    sech2 = po.sub(1.0, po.mul(t, t))
    inner_d = po.scale(po.add(1.0, po.scale(po.mul(u, u), 3.0 * _GELU_A)), _GELU_C)
    grad = po.add(po.scale(po.add(t, 1.0), 0.5),
                  po.mul(po.scale(po.mul(u, sech2), 0.5), inner_d))
    return po.mul(dy, grad)


def softmax_rows(po: PolicyOps, scores: np.ndarray) -> np.ndarray:
    """Row softmax over the last axis.  `scores` may contain -inf from
    causal masking; the max-subtraction shift is fused into the exp (so
    the quantizer only ever sees the finite exp output, which is exactly
    zero for masked entries)."""
    m = np.max(scores, axis=-1, keepdims=True)
    e = po.q(np.exp(scores - m))
    z = po.sum(e, axis=-1, keepdims=True)
    return po.div(e, z)


def softmax_backward(po: PolicyOps, dp: np.ndarray, p: np.ndarray) -> np.ndarray:
    inner = po.sum(po.mul(dp, p), axis=-1, keepdims=True)
    return po.mul(p, po.sub(dp, inner))


def cross_entropy_rows(logits: np.ndarray, labels: np.ndarray):
    """Per-row negative log-likelihood, in working precision.

    Returns (nll per row, softmax probabilities).  The loss is a derived
    scalar metric, so it stays unquantized; the traced gradient
    (softmax - onehot) is rounded by the caller.
    """
    m = np.max(logits, axis=-1, keepdims=True)
    e = np.exp(logits - m)
    z = np.sum(e, axis=-1, keepdims=True)
    p = e / z
    rows = np.arange(len(labels))
    nll = (m[:, 0] + np.log(z[:, 0])) - logits[rows, labels]
    return nll, p


def labels_for(ids: np.ndarray) -> np.ndarray:
    """Next-token labels: inputs rolled left (last position wraps)."""
    return np.roll(ids, -1).astype(np.int64)


# ---------------------------------------------------------------------------
# single-device reference API (degenerate layout of the parallel engine)

def forward(model: Model, input_ids: np.ndarray, collector=None) -> float:
    """Run one microbatch forward; retains the tape for `backward`."""
    from .engine import Emulator, ParallelConfig
    ids = np.asarray(input_ids)
    if ids.shape != (model.cfg.seq_len,):
        raise ShapeMismatch(f"input_ids shape {ids.shape} != ({model.cfg.seq_len},)")
    if ids.min() < 0 or ids.max() >= model.cfg.vocab:
        raise ConfigInvalid("input ids out of vocabulary range")
    emulator = Emulator(model, ParallelConfig(), collector=collector)
    loss = emulator.forward_microbatch(0, ids_override=ids)
    model.last_run = emulator
    return loss


def backward(model: Model, collector=None) -> dict[str, np.ndarray]:
    """Gradients of the last `forward` call's loss, one array per param."""
    emulator = model.last_run
    if emulator is None:
        raise MissingTape("backward called before forward")
    if collector is not None:
        emulator.attach_collector(collector)
    grads = emulator.backward_microbatch(0)
    model.last_run = None
    return grads


def optimizer_step(model: Model, main_grads: dict[str, np.ndarray], lr: float,
                   num_microbatches: int = 1) -> dict[str, np.ndarray]:
    """Plain SGD on the working-precision masters: p - lr * g / M.

    MainGrad accumulators are raw sums over microbatches, so the mean
    semantics divide by the total microbatch count here, at a single
    fixed site.  Returns the updated parameter dict; the caller decides
    whether to adopt it.
    """
    updated: dict[str, np.ndarray] = {}
    for path in model.order:
        grad = main_grads[path]
        if grad.shape != model.params[path].shape:
            raise ShapeMismatch(f"gradient shape {grad.shape} != param "
                                f"{model.params[path].shape} for {path}")
        updated[path] = model.params[path] - lr * (grad / num_microbatches)
    return updated
