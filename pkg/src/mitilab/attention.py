"""Multi-head attention and the four transformer-layer wirings.

Wirings (``WiringMode``):

``PureSAN``
    multi-head attention only.
``SanMlp``
    ``MLP(MHA(X))`` with no skips and no normalisation.
``StandardSkip``
    post-norm block: ``Y = LN1(X + MHA(X))``, ``Z = LN2(Y + MLP(Y))``.
``MitiResidual``
    the StandardSkip block plus a parameter-free skip from the layer input to
    the layer output, ``Z + X``. The sum is deliberately left unnormalised.

All functions take ``X`` as ``(n, d)`` or batched ``(B, n, d)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from enum import Enum

import numpy as np

from . import tensor as T
from .tensor import NumericError, ShapeError, Tensor


class WiringMode(str, Enum):
    PURE_SAN = "PureSAN"
    SAN_MLP = "SanMlp"
    STANDARD_SKIP = "StandardSkip"
    MITI_RESIDUAL = "MitiResidual"

    @classmethod
    def parse(cls, name: "str | WiringMode") -> "WiringMode":
        if isinstance(name, cls):
            return name
        for mode in cls:
            if mode.value.lower() == str(name).strip().lower():
                return mode
        valid = ", ".join(m.value for m in cls)
        raise ValueError(f"unknown wiring {name!r}; valid: {valid}")

    def __str__(self) -> str:
        return self.value


@dataclass(frozen=True)
class AttentionConfig:
    d_model: int
    heads: int
    d_qk: int
    d_v: int
    n_tokens: int | None = None

    def __post_init__(self):
        if self.heads < 1 or self.d_qk < 1 or self.d_v < 1:
            raise ValueError(f"heads, d_qk and d_v must be positive: {self}")
        if self.heads * self.d_v != self.d_model:
            raise ValueError(
                f"heads * d_v must equal d_model ({self.heads} * {self.d_v} != {self.d_model})"
            )


@dataclass
class AttentionWeights:
    """Per-head query/key/value factors plus the shared output projection."""

    w_q: list[Tensor]
    w_k: list[Tensor]
    w_v: list[Tensor]
    w_o: Tensor

    @property
    def heads(self) -> int:
        return len(self.w_q)

    def named(self, prefix: str) -> dict[str, Tensor]:
        out = {}
        for h in range(self.heads):
            out[f"{prefix}.h{h}.w_q"] = self.w_q[h]
            out[f"{prefix}.h{h}.w_k"] = self.w_k[h]
            out[f"{prefix}.h{h}.w_v"] = self.w_v[h]
        out[f"{prefix}.w_o"] = self.w_o
        return out

    @classmethod
    def from_named(cls, prefix: str, heads: int, params: dict) -> "AttentionWeights":
        return cls(
            w_q=[params[f"{prefix}.h{h}.w_q"] for h in range(heads)],
            w_k=[params[f"{prefix}.h{h}.w_k"] for h in range(heads)],
            w_v=[params[f"{prefix}.h{h}.w_v"] for h in range(heads)],
            w_o=params[f"{prefix}.w_o"],
        )


@dataclass
class TransformerLayerWeights:
    attn: AttentionWeights
    mlp_w1: Tensor
    mlp_b1: Tensor
    mlp_w2: Tensor
    mlp_b2: Tensor
    ln1_gain: Tensor
    ln1_bias: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor

    _DENSE = ("mlp_w1", "mlp_b1", "mlp_w2", "mlp_b2", "ln1_gain", "ln1_bias", "ln2_gain", "ln2_bias")

    def named(self, prefix: str) -> dict[str, Tensor]:
        out = self.attn.named(f"{prefix}.attn")
        for key in self._DENSE:
            out[f"{prefix}.{key}"] = getattr(self, key)
        return out

    @classmethod
    def from_named(cls, prefix: str, heads: int, params: dict) -> "TransformerLayerWeights":
        return cls(
            attn=AttentionWeights.from_named(f"{prefix}.attn", heads, params),
            **{key: params[f"{prefix}.{key}"] for key in cls._DENSE},
        )


@dataclass
class DecoderLayerWeights:
    self_attn: AttentionWeights
    cross_attn: AttentionWeights
    mlp_w1: Tensor
    mlp_b1: Tensor
    mlp_w2: Tensor
    mlp_b2: Tensor
    ln1_gain: Tensor
    ln1_bias: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor
    ln3_gain: Tensor
    ln3_bias: Tensor

    _DENSE = TransformerLayerWeights._DENSE + ("ln3_gain", "ln3_bias")

    def named(self, prefix: str) -> dict[str, Tensor]:
        out = self.self_attn.named(f"{prefix}.self_attn")
        out.update(self.cross_attn.named(f"{prefix}.cross_attn"))
        for key in self._DENSE:
            out[f"{prefix}.{key}"] = getattr(self, key)
        return out

    @classmethod
    def from_named(cls, prefix: str, heads: int, params: dict) -> "DecoderLayerWeights":
        return cls(
            self_attn=AttentionWeights.from_named(f"{prefix}.self_attn", heads, params),
            cross_attn=AttentionWeights.from_named(f"{prefix}.cross_attn", heads, params),
            **{key: params[f"{prefix}.{key}"] for key in cls._DENSE},
        )


# ---------------------------------------------------------------------------
# initialisation


def init_attention(cfg: AttentionConfig, rng: np.random.Generator) -> AttentionWeights:
    from .optim import xavier_init

    d, dq, dv = cfg.d_model, cfg.d_qk, cfg.d_v
    return AttentionWeights(
        w_q=[xavier_init((d, dq), rng) for _ in range(cfg.heads)],
        w_k=[xavier_init((d, dq), rng) for _ in range(cfg.heads)],
        w_v=[xavier_init((d, dv), rng) for _ in range(cfg.heads)],
        w_o=xavier_init((cfg.heads * dv, d), rng),
    )


def _dense_init(d: int, h_mlp: int, rng: np.random.Generator, n_norms: int) -> dict:
    from .optim import xavier_init

    out = {
        "mlp_w1": xavier_init((d, h_mlp), rng),
        "mlp_b1": Tensor(np.zeros(h_mlp), requires_grad=True),
        "mlp_w2": xavier_init((h_mlp, d), rng),
        "mlp_b2": Tensor(np.zeros(d), requires_grad=True),
    }
    for k in range(1, n_norms + 1):
        out[f"ln{k}_gain"] = Tensor(np.ones(d), requires_grad=True)
        out[f"ln{k}_bias"] = Tensor(np.zeros(d), requires_grad=True)
    return out


def init_layer(cfg: AttentionConfig, h_mlp: int, rng: np.random.Generator) -> TransformerLayerWeights:
    attn = init_attention(cfg, rng)
    return TransformerLayerWeights(attn=attn, **_dense_init(cfg.d_model, h_mlp, rng, 2))


def init_decoder_layer(cfg: AttentionConfig, h_mlp: int, rng: np.random.Generator) -> DecoderLayerWeights:
    self_attn = init_attention(cfg, rng)
    cross_attn = init_attention(cfg, rng)
    return DecoderLayerWeights(
        self_attn=self_attn, cross_attn=cross_attn, **_dense_init(cfg.d_model, h_mlp, rng, 3)
    )


def map_weights(weights, fn):
    """Copy of a weight dataclass (or list) with ``fn`` applied to every Tensor."""
    if isinstance(weights, Tensor):
        return fn(weights)
    if isinstance(weights, list):
        return [map_weights(w, fn) for w in weights]
    kwargs = {f.name: map_weights(getattr(weights, f.name), fn) for f in fields(weights)}
    return type(weights)(**kwargs)


# ---------------------------------------------------------------------------
# forward


def _finite(t: Tensor, stage: str) -> Tensor:
    if not np.all(np.isfinite(t.data)):
        raise NumericError("non-finite intermediate", stage=stage)
    return t


def cross_head(queries: Tensor, memory: Tensor, w_q: Tensor, w_k: Tensor, w_v: Tensor):
    """One head of ``softmax(Q K^T / sqrt(d_qk)) V``; returns ``(out, P)``."""
    d = queries.shape[-1]
    if memory.shape[-1] != d or w_q.shape[0] != d or w_k.shape[0] != d or w_v.shape[0] != d:
        raise ShapeError(
            f"attention shapes: queries {queries.shape}, memory {memory.shape}, "
            f"w_q {w_q.shape}, w_k {w_k.shape}, w_v {w_v.shape}"
        )
    if w_q.shape[1] != w_k.shape[1]:
        raise ShapeError(f"w_q {w_q.shape} and w_k {w_k.shape} disagree on d_qk")
    q = T.matmul(queries, w_q)
    k = T.matmul(memory, w_k)
    logits = T.scale(T.matmul(q, T.transpose(k)), 1.0 / math.sqrt(w_q.shape[1]))
    p = T.softmax_rows(logits)
    return T.matmul(p, T.matmul(memory, w_v)), p


def attention_head(X: Tensor, w_q: Tensor, w_k: Tensor, w_v: Tensor):
    """Self-attention head: ``P = softmax(X W_q (X W_k)^T / sqrt(d_qk))``, ``P X W_v``."""
    return cross_head(X, X, w_q, w_k, w_v)


def multi_head(X: Tensor, attn: AttentionWeights, memory: Tensor | None = None, return_attention=False):
    """Concatenated heads projected by ``w_o``; keys and values come from ``memory`` if given.

    With ``return_attention=True`` the heads run one at a time and their
    attention matrices are returned too; otherwise a fused kernel is used.
    """
    mem = X if memory is None else memory
    if return_attention:
        outs, probs = [], []
        for h in range(attn.heads):
            o, p = cross_head(X, mem, attn.w_q[h], attn.w_k[h], attn.w_v[h])
            outs.append(o)
            probs.append(p)
        cat = outs[0] if len(outs) == 1 else T.concat(outs, axis=-1)
    else:
        d = X.shape[-1]
        if mem.shape[-1] != d or attn.w_q[0].shape[0] != d:
            raise ShapeError(f"attention shapes: queries {X.shape}, memory {mem.shape}, "
                             f"w_q {attn.w_q[0].shape}")
        if attn.w_q[0].shape[1] != attn.w_k[0].shape[1]:
            raise ShapeError(f"w_q {attn.w_q[0].shape} and w_k {attn.w_k[0].shape} disagree on d_qk")
        if attn.heads == 1:
            wq, wk, wv = attn.w_q[0], attn.w_k[0], attn.w_v[0]
        else:
            wq, wk, wv = (T.concat(ws, axis=-1) for ws in (attn.w_q, attn.w_k, attn.w_v))
        cat = T.attention_heads(T.matmul(X, wq), T.matmul(mem, wk), T.matmul(mem, wv), attn.heads)
    if cat.shape[-1] != attn.w_o.shape[0]:
        raise ShapeError(f"concat width {cat.shape[-1]} does not match w_o {attn.w_o.shape}")
    out = T.matmul(cat, attn.w_o)
    return (out, probs) if return_attention else out


def cross_attention(queries: Tensor, memory: Tensor, attn: AttentionWeights) -> Tensor:
    return multi_head(queries, attn, memory=memory)


def mlp(X: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    return T.add(T.matmul(T.relu(T.add(T.matmul(X, w1), b1)), w2), b2)


def _layer_mlp(X, w):
    return mlp(X, w.mlp_w1, w.mlp_b1, w.mlp_w2, w.mlp_b2)


def layer_forward(X: Tensor, weights: TransformerLayerWeights, mode, eps: float = 1e-5) -> Tensor:
    mode = WiringMode.parse(mode)
    _finite(X, "input")
    a = _finite(multi_head(X, weights.attn), "attention")
    if mode is WiringMode.PURE_SAN:
        return a
    if mode is WiringMode.SAN_MLP:
        return _finite(_layer_mlp(a, weights), "mlp")
    y = _finite(T.layer_norm(T.add(X, a), weights.ln1_gain, weights.ln1_bias, eps), "norm1")
    z = _finite(T.layer_norm(T.add(y, _finite(_layer_mlp(y, weights), "mlp")),
                             weights.ln2_gain, weights.ln2_bias, eps), "norm2")
    if mode is WiringMode.STANDARD_SKIP:
        return z
    return _finite(T.add(z, X), "layer_skip")


def stack_forward(X: Tensor, layers, mode, eps: float = 1e-5):
    """Apply ``layers`` in order; snapshots hold the input and every layer output."""
    if len(layers) < 1:
        raise ValueError("stack_forward needs at least one layer")
    snapshots = [X]
    for w in layers:
        X = layer_forward(X, w, mode, eps)
        snapshots.append(X)
    return X, snapshots


def decoder_layer_forward(
    tgt: Tensor,
    memory: Tensor,
    weights: DecoderLayerWeights,
    mode,
    miti_scope: str = "layer",
    eps: float = 1e-5,
) -> Tensor:
    """Query self-attention, cross-attention into ``memory``, then the MLP.

    ``miti_scope="layer"`` puts the single parameter-free skip around the whole
    decoder layer; ``"sublayer"`` adds one around each of the three sub-blocks.
    """
    mode = WiringMode.parse(mode)
    if miti_scope not in ("layer", "sublayer"):
        raise ValueError(f"miti_scope must be 'layer' or 'sublayer', got {miti_scope!r}")
    _finite(tgt, "decoder_input")
    s = _finite(multi_head(tgt, weights.self_attn), "decoder_self_attention")
    if mode is WiringMode.PURE_SAN:
        return _finite(cross_attention(s, memory, weights.cross_attn), "decoder_cross_attention")
    if mode is WiringMode.SAN_MLP:
        c = _finite(cross_attention(s, memory, weights.cross_attn), "decoder_cross_attention")
        return _finite(_layer_mlp(c, weights), "decoder_mlp")
    sub = mode is WiringMode.MITI_RESIDUAL and miti_scope == "sublayer"
    y = T.layer_norm(T.add(tgt, s), weights.ln1_gain, weights.ln1_bias, eps)
    if sub:
        y = T.add(y, tgt)
    c = _finite(cross_attention(y, memory, weights.cross_attn), "decoder_cross_attention")
    u = T.layer_norm(T.add(y, c), weights.ln2_gain, weights.ln2_bias, eps)
    if sub:
        u = T.add(u, y)
    z = T.layer_norm(T.add(u, _finite(_layer_mlp(u, weights), "decoder_mlp")),
                     weights.ln3_gain, weights.ln3_bias, eps)
    if sub:
        return _finite(T.add(z, u), "decoder_norm3")
    if mode is WiringMode.MITI_RESIDUAL:
        return _finite(T.add(z, tgt), "decoder_layer_skip")
    return _finite(z, "decoder_norm3")
