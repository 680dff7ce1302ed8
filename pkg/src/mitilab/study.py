"""Rank-collapse experiments over random attention stacks.

A trial draws ``depth`` Xavier-initialised layers, rescales each so the
attention weight estimate satisfies ``4·alpha <= sqrt(d_qk)``, feeds a
zero-mean random input with a chosen composite residual below 1, and records
a :class:`~mitilab.rank_probe.ResidualReport` over the snapshots.

Inputs are zero-mean so that the token-mean row shrinks together with the
residual; with a large mean row, float64 rounding would pin the residual at
about ``1e-16·|X|`` and hide the collapse rate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .attention import (
    AttentionConfig,
    AttentionWeights,
    TransformerLayerWeights,
    WiringMode,
    init_layer,
    layer_forward,
    map_weights,
)
from .rank_probe import (
    ALPHA_CONVENTION,
    FitError,
    ResidualReport,
    anchor_gap,
    collapse_exponent_fit,
    composite_norm,
    estimate_alpha,
    estimate_lambda,
    min_residual_norm,
    residual_report,
)
from .tensor import Tensor

COLLAPSE_THRESHOLD = 1e-12


@dataclass
class CollapseSettings:
    d_model: int = 32
    heads: int = 1
    d_qk: int = 32
    h_mlp: int = 64
    depth: int = 12
    n_tokens: int = 8
    input_residual: float = 0.8
    margin: float = 0.999
    value_norm: float = 1.0
    seeds: int = 100

    @property
    def attention(self) -> AttentionConfig:
        return AttentionConfig(self.d_model, self.heads, self.d_qk, self.d_model // self.heads)


def scale_for_collapse(layer: TransformerLayerWeights, d_qk: int, margin: float = 0.999,
                       value_norm: float = 1.0) -> TransformerLayerWeights:
    """Rescale so each head has composite(W_v W_o) = value_norm and
    4·l1(W_q W_k^T)·value_norm = margin·sqrt(d_qk)."""
    attn = layer.attn
    d_v = attn.w_v[0].shape[1]
    w_o = attn.w_o.data.copy()
    w_q, w_k, w_v = [], [], []
    for h in range(attn.heads):
        rows = slice(h * d_v, (h + 1) * d_v)
        s = math.sqrt(value_norm / composite_norm(attn.w_v[h].data @ w_o[rows]))
        w_v.append(Tensor(attn.w_v[h].data * s, requires_grad=True))
        w_o[rows] *= s
        qk = float(np.abs(attn.w_q[h].data @ attn.w_k[h].data.T).sum(axis=0).max())
        s = math.sqrt(margin * math.sqrt(d_qk) / (4.0 * value_norm) / qk)
        w_q.append(Tensor(attn.w_q[h].data * s, requires_grad=True))
        w_k.append(Tensor(attn.w_k[h].data * s, requires_grad=True))
    new_attn = AttentionWeights(w_q, w_k, w_v, Tensor(w_o, requires_grad=True))
    return TransformerLayerWeights(
        attn=new_attn, **{k: getattr(layer, k) for k in TransformerLayerWeights._DENSE}
    )


def random_trial(settings: CollapseSettings, seed: int):
    """Scaled layers and a zero-mean input for one trial seed."""
    rng = np.random.default_rng(seed)
    cfg = settings.attention
    layers = [
        scale_for_collapse(init_layer(cfg, settings.h_mlp, rng), settings.d_qk,
                           settings.margin, settings.value_norm)
        for _ in range(settings.depth)
    ]
    R = rng.normal(size=(settings.n_tokens, settings.d_model))
    R -= R.mean(axis=0)
    R *= settings.input_residual / composite_norm(R)
    return layers, Tensor(R)


def run_trial(settings: CollapseSettings, seed: int, mode) -> ResidualReport:
    mode = WiringMode.parse(mode)
    layers, X = random_trial(settings, seed)
    snapshots = [X]
    for w in layers:
        snapshots.append(layer_forward(snapshots[-1], w, mode))
    alpha = estimate_alpha(layers) if layers else 0.0
    lam = estimate_lambda(layers) if layers else 1.0
    return residual_report(snapshots, alpha, lam, settings.heads, settings.d_qk)


@dataclass
class TrialSummary:
    seed: int
    monotone: bool
    collapse_layer: int | None
    exponent: float | None
    bound_san_ok: bool
    bound_mlp_ok: bool
    underflow_events: int
    final_ratio: float


def summarize_trial(seed: int, report: ResidualReport) -> TrialSummary:
    rows = report.rows
    res = [r.res_composite for r in rows]
    collapse = next((r.layer for r in rows if r.res_composite < COLLAPSE_THRESHOLD), None)
    resolved = [r for r in rows if not r.underflow]
    stop = len(rows) if collapse is None else collapse + 1
    monotone = all(res[l + 1] <= res[l] for l in range(stop - 1))
    try:
        exponent = collapse_exponent_fit(report)
    except FitError:
        exponent = None
    san_ok = all(math.log(r.res_composite) <= r.bound_san_log for r in resolved)
    mlp_ok = all(math.log(r.res_composite) <= r.bound_mlp_log for r in resolved)
    final_ratio = res[-1] / res[0] if res[0] > 0 else math.nan
    return TrialSummary(seed, monotone, collapse, exponent, san_ok, mlp_ok,
                        sum(r.underflow for r in rows), final_ratio)


def anchor_gap_trials(settings: CollapseSettings, seeds: int):
    """One random MitiResidual layer pass per seed: anchor-gap outcomes."""
    out = []
    for seed in range(seeds):
        layers, _ = random_trial(settings, seed)
        rng = np.random.default_rng(10_000 + seed)
        X = Tensor(rng.normal(size=(settings.n_tokens, settings.d_model)))
        Y = layer_forward(X, layers[0], WiringMode.MITI_RESIDUAL)
        out.append(anchor_gap(X.data, Y.data))
    return out


def study_summary(settings: CollapseSettings, mode, trials: list[TrialSummary]) -> dict:
    n = len(trials)
    exps = [t.exponent for t in trials if t.exponent is not None]
    return {
        "wiring": str(WiringMode.parse(mode)),
        "trials": n,
        "depth": settings.depth,
        "alpha_convention": ALPHA_CONVENTION,
        "monotone_rate": sum(t.monotone for t in trials) / n if n else None,
        "collapse_rate": sum(t.collapse_layer is not None for t in trials) / n if n else None,
        "max_collapse_layer": max((t.collapse_layer for t in trials if t.collapse_layer is not None),
                                  default=None),
        "bound_san_rate": sum(t.bound_san_ok for t in trials) / n if n else None,
        "bound_mlp_rate": sum(t.bound_mlp_ok for t in trials) / n if n else None,
        "underflow_events": sum(t.underflow_events for t in trials),
        "exponent_fits": len(exps),
        "exponent_min": min(exps) if exps else None,
        "exponent_max": max(exps) if exps else None,
        "exponent_mean": sum(exps) / len(exps) if exps else None,
        "retained_rate": sum(t.final_ratio >= 0.1 for t in trials) / n if n else None,
    }
