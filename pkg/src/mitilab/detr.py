"""Toy set-prediction detector: grid embedding stub, encoder-decoder, FFN heads.

The CNN backbone is replaced by a learned linear map over per-cell scene
statistics (see :func:`scene_features`). Everything after that follows the
usual detector layout: 2-D sine positional encoding added to the tokens, an
encoder stack, a decoder over ``num_queries`` learned query embeddings, a
linear class head with a trailing no-object class, and a 3-layer box MLP with
a sigmoid on ``(cx, cy, w, h)``.

Parameters live in a flat ``dict[str, Tensor]`` so the optimiser and the
checkpoint format can treat them uniformly.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import tensor as T
from .attention import (
    AttentionConfig,
    DecoderLayerWeights,
    TransformerLayerWeights,
    WiringMode,
    decoder_layer_forward,
    init_decoder_layer,
    init_layer,
    layer_forward,
)
from .optim import xavier_init
from .tensor import Tensor

GEOMETRY_FEATURES = 6


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    heads: int = 4
    d_qk: int = 16
    d_v: int = 16
    h_mlp: int = 128
    enc_layers: int = 2
    dec_layers: int = 2
    num_queries: int = 16
    num_classes: int = 3
    grid_size: int = 8
    wiring: WiringMode = WiringMode.MITI_RESIDUAL
    miti_scope: str = "layer"
    positional: bool = True
    eps: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, "wiring", WiringMode.parse(self.wiring))
        if self.d_model % 2:
            raise ValueError(f"d_model must be even for the sine encoding, got {self.d_model}")
        if self.heads * self.d_v != self.d_model:
            raise ValueError(f"heads * d_v must equal d_model ({self.heads}*{self.d_v} != {self.d_model})")
        if self.num_classes < 1 or self.num_queries < 1 or self.grid_size < 1:
            raise ValueError("num_classes, num_queries and grid_size must be positive")
        if self.enc_layers < 0 or self.dec_layers < 0:
            raise ValueError("layer counts must be nonnegative")
        if self.miti_scope not in ("layer", "sublayer"):
            raise ValueError(f"miti_scope must be 'layer' or 'sublayer', got {self.miti_scope!r}")

    @property
    def attention(self) -> AttentionConfig:
        return AttentionConfig(self.d_model, self.heads, self.d_qk, self.d_v, self.grid_size**2)

    @property
    def n_tokens(self) -> int:
        return self.grid_size**2

    @property
    def feature_dim(self) -> int:
        return self.num_classes + GEOMETRY_FEATURES

    def replace(self, **changes) -> "ModelConfig":
        values = {f.name: getattr(self, f.name) for f in fields(self)}
        values.update(changes)
        return ModelConfig(**values)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["wiring"] = str(self.wiring)
        return d


@dataclass
class DetectionOutput:
    class_logits: Tensor  # (..., Q, C+1); last class is "no object"
    boxes: Tensor  # (..., Q, 4) as (cx, cy, w, h) in (0, 1)


# ---------------------------------------------------------------------------
# embedding stub


def _overlap(lo: float, hi: float, cell: int, size: float) -> float:
    """Length of ``[lo, hi]`` inside a cell, as a fraction of the cell width."""
    c0 = cell * size
    return max(0.0, min(hi, c0 + size) - max(lo, c0)) / size


def _logit(v: float) -> float:
    return math.log(v / (1.0 - v))


def scene_features(scene, grid_size: int, num_classes: int) -> np.ndarray:
    """Per-cell statistics, shape ``(grid_size**2, num_classes + 6)``.

    The first ``num_classes`` columns hold the fraction of the cell covered by
    each class. The remaining six describe the object covering most of the
    cell: a presence flag, a flag marking the cell that holds its centre, and
    its ``(cx, cy, w, h)`` in logit coordinates, the scale the sigmoid box
    head works in. Only cells an object overlaps are touched, so the map is
    local. It stands in for a backbone feature map whose receptive field
    spans each object. Cells are ordered row-major (y outer, x inner).
    """
    from .data import validate_scene

    validate_scene(scene, num_classes)
    size = 1.0 / grid_size
    cover = np.zeros((grid_size, grid_size, num_classes))
    geom = np.zeros((grid_size, grid_size, GEOMETRY_FEATURES))
    best = np.zeros((grid_size, grid_size))
    for obj in scene.objects:
        centre = (min(int(obj.cy / size), grid_size - 1), min(int(obj.cx / size), grid_size - 1))
        code = [_logit(min(max(v, 1e-6), 1 - 1e-6)) for v in obj.box]
        x0, x1 = obj.cx - obj.w / 2, obj.cx + obj.w / 2
        y0, y1 = obj.cy - obj.h / 2, obj.cy + obj.h / 2
        xs = range(max(0, int(x0 / size)), min(grid_size, int(math.ceil(x1 / size))))
        ys = range(max(0, int(y0 / size)), min(grid_size, int(math.ceil(y1 / size))))
        for gy in ys:
            ly = _overlap(y0, y1, gy, size)
            if ly == 0.0:
                continue
            for gx in xs:
                a = _overlap(x0, x1, gx, size) * ly
                if a == 0.0:
                    continue
                cover[gy, gx, obj.class_id] += a
                if a > best[gy, gx]:
                    best[gy, gx] = a
                    geom[gy, gx] = [1.0, 1.0 if (gy, gx) == centre else 0.0, *code]
    feats = np.concatenate([cover, geom], axis=-1)
    return feats.reshape(grid_size * grid_size, num_classes + GEOMETRY_FEATURES)


def embed_scene(scene, cfg: ModelConfig, params: dict) -> Tensor:
    """Token matrix ``(grid_size**2, d_model)`` for one scene."""
    feats = Tensor(scene_features(scene, cfg.grid_size, cfg.num_classes))
    return embed_features(feats, params)


def embed_features(feats: Tensor, params: dict) -> Tensor:
    return T.add(T.matmul(feats, params["embed.w"]), params["embed.b"])


def sine_encoding(rows, cols, d_model: int) -> np.ndarray:
    """2-D sine/cosine encoding of (row, col) positions given in cell units.

    The first ``d_model/2`` channels encode the row, the rest the column.
    Within each half, channel ``c`` uses frequency ``10000^(-2*(c//2)/half)``
    with sine on even ``c`` and cosine on odd ``c``.
    """
    if d_model % 2:
        raise ValueError(f"d_model must be even, got {d_model}")
    half = d_model // 2
    c = np.arange(half)
    freq = 10000.0 ** (-2.0 * (c // 2) / half)

    def axis(v):
        pos = np.asarray(v, dtype=np.float64)[:, None] * freq[None, :]
        return np.where(c % 2 == 0, np.sin(pos), np.cos(pos))

    return np.concatenate([axis(rows), axis(cols)], axis=1)


def positional_encoding(n_tokens: int, d_model: int) -> np.ndarray:
    """Fixed encoding of every cell of a square grid of ``n_tokens`` cells, row-major."""
    if d_model % 2:
        raise ValueError(f"d_model must be even, got {d_model}")
    g = math.isqrt(n_tokens)
    if g * g != n_tokens:
        raise ValueError(f"n_tokens must be a perfect square, got {n_tokens}")
    idx = np.arange(g, dtype=np.float64)
    return sine_encoding(np.repeat(idx, g), np.tile(idx, g), d_model)


def anchor_queries(num_queries: int, grid_size: int, d_model: int) -> np.ndarray:
    """Initial query embeddings: encodings of a regular grid of anchor points.

    Anchors sit at the centres of a ``k x k`` partition of the cell grid with
    ``k = ceil(sqrt(num_queries))``; the first ``num_queries`` are used. This
    gives each slot a spatial starting preference; the embeddings are then
    learned like any other parameter.
    """
    k = math.isqrt(num_queries - 1) + 1 if num_queries > 1 else 1
    a = (np.arange(k) + 0.5) * grid_size / k - 0.5
    rows, cols = np.repeat(a, k)[:num_queries], np.tile(a, k)[:num_queries]
    return sine_encoding(rows, cols, d_model)


# ---------------------------------------------------------------------------
# parameters


def init_model(cfg: ModelConfig, seed: int = 0) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    d = cfg.d_model
    params: dict[str, Tensor] = {
        "embed.w": xavier_init((cfg.feature_dim, d), rng),
        "embed.b": Tensor(np.zeros(d), requires_grad=True),
        "query_embed": Tensor(anchor_queries(cfg.num_queries, cfg.grid_size, d), requires_grad=True),
    }
    for i in range(cfg.enc_layers):
        params.update(init_layer(cfg.attention, cfg.h_mlp, rng).named(f"enc{i}"))
    for i in range(cfg.dec_layers):
        params.update(init_decoder_layer(cfg.attention, cfg.h_mlp, rng).named(f"dec{i}"))
    params["class_head.w"] = xavier_init((d, cfg.num_classes + 1), rng)
    params["class_head.b"] = Tensor(np.zeros(cfg.num_classes + 1), requires_grad=True)
    params["box_head.w1"] = xavier_init((d, d), rng)
    params["box_head.b1"] = Tensor(np.zeros(d), requires_grad=True)
    params["box_head.w2"] = xavier_init((d, d), rng)
    params["box_head.b2"] = Tensor(np.zeros(d), requires_grad=True)
    params["box_head.w3"] = xavier_init((d, 4), rng)
    params["box_head.b3"] = Tensor(np.zeros(4), requires_grad=True)
    for name, t in params.items():
        t.name = name
    return params


def count_parameters(params: dict) -> int:
    return int(sum(t.size for t in params.values()))


def check_params(cfg: ModelConfig, params: dict) -> None:
    """Raise ``ValueError`` unless ``params`` has exactly the names/shapes ``cfg`` needs."""
    want = {k: v.shape for k, v in init_model(cfg, 0).items()}
    have = {k: v.shape for k, v in params.items()}
    missing = sorted(set(want) - set(have))
    extra = sorted(set(have) - set(want))
    bad = sorted(k for k in set(want) & set(have) if want[k] != have[k])
    if missing or extra or bad:
        parts = []
        if missing:
            parts.append(f"missing {missing[:5]}")
        if extra:
            parts.append(f"unexpected {extra[:5]}")
        if bad:
            parts.append(", ".join(f"{k}: {have[k]} != {want[k]}" for k in bad[:5]))
        raise ValueError("checkpoint does not match model config: " + "; ".join(parts))


def encoder_layers(cfg: ModelConfig, params: dict) -> list[TransformerLayerWeights]:
    return [TransformerLayerWeights.from_named(f"enc{i}", cfg.heads, params) for i in range(cfg.enc_layers)]


def decoder_layers(cfg: ModelConfig, params: dict) -> list[DecoderLayerWeights]:
    return [DecoderLayerWeights.from_named(f"dec{i}", cfg.heads, params) for i in range(cfg.dec_layers)]


# ---------------------------------------------------------------------------
# forward


def _heads(tgt: Tensor, params: dict) -> DetectionOutput:
    logits = T.add(T.matmul(tgt, params["class_head.w"]), params["class_head.b"])
    h = T.relu(T.add(T.matmul(tgt, params["box_head.w1"]), params["box_head.b1"]))
    h = T.relu(T.add(T.matmul(h, params["box_head.w2"]), params["box_head.b2"]))
    boxes = T.sigmoid(T.add(T.matmul(h, params["box_head.w3"]), params["box_head.b3"]))
    for stage, t in (("class_head", logits), ("box_head", boxes)):
        if not np.all(np.isfinite(t.data)):
            raise T.NumericError(f"{stage} produced non-finite values", stage=stage)
    return DetectionOutput(logits, boxes)


def model_forward(tokens: Tensor, cfg: ModelConfig, params: dict, trace: list | None = None,
                  intermediate: list | None = None) -> DetectionOutput:
    """Run encoder, decoder and heads on embedded tokens ``(n, d)`` or ``(B, n, d)``.

    If ``trace`` is a list, ``(stage, layer_input, layer_output)`` triples are
    appended for every encoder and decoder layer. If ``intermediate`` is a
    list, the shared heads are also applied after every decoder layer but the
    last and those outputs are appended (for auxiliary decoding losses).
    """
    x = tokens
    if cfg.positional:
        x = T.add(x, Tensor(positional_encoding(cfg.n_tokens, cfg.d_model)))
    for i, w in enumerate(encoder_layers(cfg, params)):
        y = layer_forward(x, w, cfg.wiring, cfg.eps)
        if trace is not None:
            trace.append((f"enc{i}", x, y))
        x = y
    memory = x
    tgt = params["query_embed"]
    layers = decoder_layers(cfg, params)
    for i, w in enumerate(layers):
        y = decoder_layer_forward(tgt, memory, w, cfg.wiring, cfg.miti_scope, cfg.eps)
        if trace is not None:
            trace.append((f"dec{i}", tgt, y))
        if intermediate is not None and i < len(layers) - 1:
            intermediate.append(_heads(y, params))
        tgt = y
    if tgt.data.ndim < memory.data.ndim:
        # no decoder layers: still give every batch item its own slots
        tgt = T.add(Tensor(np.zeros(memory.shape[:-2] + tgt.shape)), tgt)
    return _heads(tgt, params)
