"""Finite-difference checks for every differentiable op and the full loss.

Each check builds a scalar function of one input array. Inputs are drawn so
that no coordinate sits within a step of a kink (relu, abs, max/min ties),
which keeps central differences meaningful for piecewise-smooth ops.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .tensor import Tensor, finite_diff_check


@dataclass(frozen=True)
class GradcheckResult:
    name: str
    max_rel_err: float
    passed: bool


def _away_from_zero(rng, shape, margin=0.2):
    x = rng.uniform(margin, 1.5, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def _readout(rng, shape):
    """Fixed random weights so vector outputs reduce to a generic scalar."""
    w = Tensor(rng.normal(size=shape))
    return lambda y: T.sum_(T.mul(y, w))


def _unary(op, make_input):
    def build(rng):
        x = make_input(rng)
        out_shape = op(Tensor(x)).shape
        read = _readout(rng, out_shape)
        return (lambda t: read(op(t))), x
    return build


def _binary(op, make_a, make_b, which):
    def build(rng):
        a, b = make_a(rng), make_b(rng)
        out_shape = op(Tensor(a), Tensor(b)).shape
        read = _readout(rng, out_shape)
        if which == 0:
            return (lambda t: read(op(t, Tensor(b)))), a
        return (lambda t: read(op(Tensor(a), t))), b
    return build


def _tie_free(op, which):
    """Binary max/min check with operands kept apart (ties have no derivative)."""
    def build(rng):
        a = rng.normal(size=(3, 4))
        b = a + _away_from_zero(rng, (3, 4))
        read = _readout(rng, (3, 4))
        if which == 0:
            return (lambda t: read(op(t, Tensor(b)))), a
        return (lambda t: read(op(Tensor(a), t))), b
    return build


def _normal(*shape):
    return lambda rng: rng.normal(size=shape)


def _op_checks() -> dict[str, Callable]:
    idx = np.array([4, 0, 4, 2])
    gidx = np.array([[0, 2, 1], [3, 3, 0]])
    checks = {
        "matmul[a]": _binary(lambda a, b: T.matmul(a, b), _normal(2, 3, 4), _normal(4, 5), 0),
        "matmul[b]": _binary(lambda a, b: T.matmul(a, b), _normal(2, 3, 4), _normal(4, 5), 1),
        "add": _binary(lambda a, b: T.add(a, b), _normal(3, 4), _normal(4), 1),
        "sub": _binary(lambda a, b: T.sub(a, b), _normal(3, 4), _normal(3, 4), 1),
        "mul": _binary(lambda a, b: T.mul(a, b), _normal(3, 4), _normal(3, 4), 0),
        "div[a]": _binary(lambda a, b: T.div(a, b), _normal(3, 4),
                          lambda r: _away_from_zero(r, (3, 4), 0.5), 0),
        "div[b]": _binary(lambda a, b: T.div(a, b), _normal(3, 4),
                          lambda r: _away_from_zero(r, (3, 4), 0.5), 1),
        "scale": _unary(lambda x: T.scale(x, -1.7), _normal(3, 4)),
        "neg": _unary(T.neg, _normal(3, 4)),
        "transpose": _unary(T.transpose, _normal(2, 3, 4)),
        "reshape": _unary(lambda x: T.reshape(x, (4, 3)), _normal(3, 4)),
        "relu": _unary(T.relu, lambda r: _away_from_zero(r, (3, 4))),
        "sigmoid": _unary(T.sigmoid, _normal(3, 4)),
        "log": _unary(T.log, lambda r: r.uniform(0.3, 2.0, size=(3, 4))),
        "abs": _unary(T.abs_, lambda r: _away_from_zero(r, (3, 4))),
        "maximum": _tie_free(T.maximum, 0),
        "minimum": _tie_free(T.minimum, 1),
        "softmax_rows": _unary(T.softmax_rows, _normal(2, 3, 5)),
        "log_softmax_rows": _unary(T.log_softmax_rows, _normal(3, 5)),
        "layer_norm[x]": _unary(lambda x: T.layer_norm(x, Tensor(np.linspace(0.5, 1.5, 6)),
                                                       Tensor(np.linspace(-1, 1, 6))), _normal(2, 4, 6)),
        "layer_norm[gain]": _unary(lambda g: T.layer_norm(Tensor(np.arange(24.0).reshape(4, 6) % 5),
                                                          g, Tensor(np.zeros(6))), _normal(6)),
        "layer_norm[bias]": _unary(lambda b: T.layer_norm(Tensor(np.arange(24.0).reshape(4, 6) % 5),
                                                          Tensor(np.ones(6)), b), _normal(6)),
        "sum": _unary(T.sum_, _normal(3, 4)),
        "concat": _unary(lambda x: T.concat([x, T.scale(x, 2.0), x], axis=-1), _normal(3, 2)),
        "select_cols": _unary(lambda x: T.select_cols(x, 1, 3), _normal(2, 3, 4)),
        "take_rows": _unary(lambda x: T.take_rows(x, idx), _normal(5, 3)),
        "gather_last": _unary(lambda x: T.gather_last(x, gidx), _normal(2, 3, 4)),
    }
    for which, name in enumerate("qkv"):
        def fused(rng, which=which):
            qkv = [rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 5, 4)), rng.normal(size=(2, 5, 6))]
            read = _readout(rng, (2, 3, 6))

            def f(t):
                args = [Tensor(a) for a in qkv]
                args[which] = t
                return read(T.attention_heads(*args, heads=2))
            return f, qkv[which]
        checks[f"attention_heads[{name}]"] = fused
    return checks


def _attention_checks() -> dict[str, Callable]:
    from .attention import (
        AttentionConfig,
        WiringMode,
        decoder_layer_forward,
        init_decoder_layer,
        init_layer,
        layer_forward,
        multi_head,
    )

    cfg = AttentionConfig(d_model=6, heads=2, d_qk=3, d_v=3)
    checks = {}

    def head_check(rng):
        layer = init_layer(cfg, 8, np.random.default_rng(1))
        read = _readout(rng, (5, 6))
        return (lambda x: read(multi_head(x, layer.attn))), rng.normal(size=(5, 6))

    checks["multi_head"] = head_check
    for mode in WiringMode:
        def layer_check(rng, mode=mode):
            layer = init_layer(cfg, 8, np.random.default_rng(2))
            read = _readout(rng, (5, 6))
            return (lambda x: read(layer_forward(x, layer, mode))), rng.normal(size=(5, 6))

        def dec_check(rng, mode=mode):
            layer = init_decoder_layer(cfg, 8, np.random.default_rng(3))
            memory = Tensor(rng.normal(size=(5, 6)))
            read = _readout(rng, (4, 6))
            return (lambda x: read(decoder_layer_forward(x, memory, layer, mode))), rng.normal(size=(4, 6))

        checks[f"layer[{mode}]"] = layer_check
        checks[f"decoder_layer[{mode}]"] = dec_check
    return checks


def _loss_checks() -> dict[str, Callable]:
    from .detr import ModelConfig, embed_features, init_model, model_forward
    from .matching import GroundTruth, batch_set_loss, giou_tensor, hungarian, match_cost

    def giou_check(rng):
        target = np.array([[0.5, 0.5, 0.3, 0.2], [0.3, 0.6, 0.2, 0.4], [0.7, 0.2, 0.1, 0.1]])
        pred = target + rng.uniform(0.01, 0.05, size=target.shape) * rng.choice([-1, 1], size=target.shape)
        return (lambda p: T.sum_(giou_tensor(p, target))), pred

    cfg = ModelConfig(d_model=8, heads=2, d_qk=4, d_v=4, h_mlp=8, enc_layers=1, dec_layers=1,
                      num_queries=4, num_classes=2, grid_size=2)
    gts = [GroundTruth((0, 1), ((0.3, 0.3, 0.2, 0.3), (0.7, 0.6, 0.25, 0.2))),
           GroundTruth((1,), ((0.5, 0.4, 0.4, 0.3),))]

    def loss_check(param_name, wiring):
        def build(rng):
            c = cfg.replace(wiring=wiring)
            params = init_model(c, 5)
            feats = Tensor(rng.uniform(0, 1, size=(2, c.n_tokens, c.feature_dim)))
            pred = model_forward(embed_features(feats, params), c, params)
            assignments = [hungarian(match_cost(_Single(pred, b), gt)) for b, gt in enumerate(gts)]

            def f(x):
                p = dict(params)
                p[param_name] = x
                out = model_forward(embed_features(feats, p), c, p)
                return batch_set_loss(out, gts, assignments)[0]

            return f, params[param_name].data.copy()
        return build

    checks = {"giou": giou_check}
    for wiring in ("StandardSkip", "MitiResidual"):
        for name in ("embed.w", "query_embed", "enc0.attn.h0.w_q", "enc0.mlp_w1", "dec0.cross_attn.h1.w_k",
                     "dec0.ln3_gain", "class_head.w", "box_head.w3"):
            checks[f"set_loss[{wiring}:{name}]"] = loss_check(name, wiring)
    return checks


class _Single:
    def __init__(self, pred, b):
        self.class_logits = pred.class_logits.data[b]
        self.boxes = pred.boxes.data[b]


def all_checks() -> dict[str, Callable]:
    checks = _op_checks()
    checks.update(_attention_checks())
    checks.update(_loss_checks())
    return checks


def run_gradchecks(step: float = 1e-6, tol: float = 1e-5, seed: int = 0,
                   names=None) -> list[GradcheckResult]:
    if not 1e-8 <= step <= 1e-4:
        raise ValueError(f"step must lie in [1e-8, 1e-4], got {step}")
    checks = all_checks()
    if names is not None:
        unknown = sorted(set(names) - set(checks))
        if unknown:
            raise ValueError(f"unknown checks {unknown}")
        checks = {k: checks[k] for k in names}
    results = []
    for name, build in checks.items():
        rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
        f, x = build(rng)
        err = finite_diff_check(f, x, step=step)
        results.append(GradcheckResult(name, err, err <= tol))
    return results
