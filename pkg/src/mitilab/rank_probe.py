"""Rank-collapse probes: token residuals, ℓ1,∞ norms, bound evaluators.

The composite norm is ``sqrt(||A||_1 * ||A||_inf)`` with induced matrix
norms (max absolute column sum, max absolute row sum).

Two residual operators are provided. :func:`residual` subtracts the column
means, which is the exact Frobenius minimiser and cheap. :func:`min_residual`
minimises the composite norm over the offset row by multi-start coordinate
descent; bound checks use it so a loose proxy never reports a false
violation.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import kernels
from .tensor import Tensor

UNDERFLOW_FLOOR = 1e-300
#: Residuals within this factor of |X| are float64 rounding, not signal.
RELATIVE_RESOLUTION = 64 * np.finfo(np.float64).eps

#: Which norms ``estimate_alpha`` multiplies; surfaced in study summaries.
ALPHA_CONVENTION = "max over layers/heads of l1(W_q W_k^T) * composite(W_v W_o[head rows])"


def _arr(X) -> np.ndarray:
    a = X.data if isinstance(X, Tensor) else np.asarray(X, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"expected a matrix, got shape {a.shape}")
    return a


def composite_norm(A) -> float:
    a = np.abs(_arr(A))
    if a.size == 0:
        return 0.0
    return math.sqrt(float(a.sum(axis=0).max()) * float(a.sum(axis=1).max()))


def residual(X) -> np.ndarray:
    """``X - 1 x^T`` with ``x`` the column means."""
    a = _arr(X)
    # offsets from the first row first, so identical rows give exactly zero
    d = a - a[:1]
    return d - d.mean(axis=0, keepdims=True)


def min_residual(X, tol: float = 1e-9) -> tuple[float, np.ndarray]:
    """Smallest composite norm of ``X - 1 x^T`` found, and its ``x``.

    Coordinate descent is started from the column mean, the column median and
    zero; the best result wins.
    """
    a = np.ascontiguousarray(_arr(X))
    starts = (a.mean(axis=0), np.median(a, axis=0), np.zeros(a.shape[1]))
    best, best_x = math.inf, None
    for x0 in starts:
        val, x = kernels.min_composite_residual(a, x0, tol)
        if val < best:
            best, best_x = val, x
    return best, best_x


def min_residual_norm(X, tol: float = 1e-9) -> float:
    return min_residual(X, tol)[0]


# ---------------------------------------------------------------------------
# bounds


@dataclass(frozen=True)
class BoundParameters:
    alpha: float
    lam: float = 1.0
    heads: int = 1
    d_qk: int = 1
    depth: int = 0

    def __post_init__(self):
        if self.alpha < 0 or self.lam < 0 or self.heads < 1 or self.d_qk < 1 or self.depth < 0:
            raise ValueError(f"invalid bound parameters: {self}")


@dataclass(frozen=True)
class BoundValue:
    """A bound carried in the log domain; ``value`` may under/overflow."""

    log: float

    @property
    def value(self) -> float:
        if self.log > 709.0:
            return math.inf
        return math.exp(self.log) if self.log > -math.inf else 0.0

    @property
    def overflow(self) -> bool:
        return self.log > 709.0

    @property
    def underflow(self) -> bool:
        return self.log < math.log(UNDERFLOW_FLOOR)


def _double_exp_bound_log(coef: float, depth: int, res0: float) -> float:
    if res0 < 0:
        raise ValueError("res0 must be nonnegative")
    e_coef = (3**depth - 1) // 2
    e_res = 3**depth
    log_c = 0.0 if e_coef == 0 else (math.log(coef) * e_coef if coef > 0 else -math.inf)
    log_r = math.log(res0) * e_res if res0 > 0 else -math.inf
    return log_c + log_r


def san_bound(p: BoundParameters, res0: float) -> BoundValue:
    """``(4α/√d_qk)^((3^L-1)/2) · res0^(3^L)`` for a pure attention stack."""
    coef = 4.0 * p.alpha / math.sqrt(p.d_qk)
    return BoundValue(_double_exp_bound_log(coef, p.depth, res0))


def mlp_bound(p: BoundParameters, res0: float) -> BoundValue:
    """``(4αHλ/√d_qk)^((3^L-1)/2) · res0^(3^L)``: attention followed by MLPs."""
    coef = 4.0 * p.alpha * p.heads * p.lam / math.sqrt(p.d_qk)
    return BoundValue(_double_exp_bound_log(coef, p.depth, res0))


def _attention_blocks(layers):
    for w in layers:
        attn = getattr(w, "attn", w)
        yield attn


def estimate_alpha(layers, qk_norm: str = "l1") -> float:
    """Upper-bound estimate of the attention weight norm; see ``ALPHA_CONVENTION``.

    ``qk_norm="composite"`` swaps the ℓ1 norm of ``W_q W_k^T`` for the
    composite norm.
    """
    if qk_norm not in ("l1", "composite"):
        raise ValueError(f"qk_norm must be 'l1' or 'composite', got {qk_norm!r}")
    alpha = 0.0
    for attn in _attention_blocks(layers):
        d_v = attn.w_v[0].shape[1]
        for h in range(attn.heads):
            qk = attn.w_q[h].data @ attn.w_k[h].data.T
            if qk_norm == "l1":
                qk_n = float(np.abs(qk).sum(axis=0).max())
            else:
                qk_n = composite_norm(qk)
            vo = attn.w_v[h].data @ attn.w_o.data[h * d_v:(h + 1) * d_v]
            alpha = max(alpha, qk_n * composite_norm(vo))
    return alpha


def estimate_lambda(layers) -> float:
    """Norm-product Lipschitz estimate of the MLP (relu contributes 1)."""
    lam = 0.0
    for w in layers:
        lam = max(lam, composite_norm(w.mlp_w1) * composite_norm(w.mlp_w2))
    return lam


# ---------------------------------------------------------------------------
# reports


@dataclass
class LayerResidual:
    layer: int
    res_composite: float
    res_frobenius: float
    bound_san_log: float
    bound_mlp_log: float
    underflow: bool = False

    @property
    def log_residual(self) -> float:
        return math.log(self.res_composite) if self.res_composite > 0 else -math.inf


CSV_HEADER = ("layer", "res_composite", "res_frobenius", "bound_san_log", "bound_mlp_log")


@dataclass
class ResidualReport:
    rows: list[LayerResidual] = field(default_factory=list)
    alpha: float = 0.0
    lam: float = 1.0
    heads: int = 1
    d_qk: int = 1

    @property
    def residuals(self) -> list[float]:
        return [r.res_composite for r in self.rows]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in self.rows:
            w.writerow([r.layer] + [repr(float(getattr(r, k))) for k in CSV_HEADER[1:]])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "ResidualReport":
        reader = csv.reader(io.StringIO(text))
        header = tuple(next(reader))
        if header != CSV_HEADER:
            raise ValueError(f"unexpected residual CSV header {header}")
        rows = []
        for r in reader:
            if r:
                comp = float(r[1])
                rows.append(LayerResidual(int(r[0]), comp, *(float(v) for v in r[2:]),
                                          underflow=comp < UNDERFLOW_FLOOR))
        return cls(rows=rows)


def residual_report(snapshots: Sequence, alpha: float, lam: float = 1.0, heads: int = 1,
                    d_qk: int = 1) -> ResidualReport:
    """Measure every snapshot and pair it with both bounds at that depth.

    Bounds at depth ``l`` start from the measured input residual. A layer is
    flagged as underflow when its residual is below ``UNDERFLOW_FLOOR`` or
    below ``RELATIVE_RESOLUTION`` times the composite norm of the snapshot.
    """
    report = ResidualReport(alpha=alpha, lam=lam, heads=heads, d_qk=d_qk)
    res0 = None
    for l, X in enumerate(snapshots):
        a = _arr(X)
        comp = min_residual_norm(a)
        if res0 is None:
            res0 = comp
        frob = float(np.linalg.norm(residual(a)))
        p = BoundParameters(alpha=alpha, lam=lam, heads=heads, d_qk=d_qk, depth=l)
        under = comp < UNDERFLOW_FLOOR or comp <= RELATIVE_RESOLUTION * composite_norm(a)
        report.rows.append(
            LayerResidual(l, comp, frob, san_bound(p, res0).log, mlp_bound(p, res0).log, under)
        )
    return report


class FitError(ValueError):
    """Too few usable layers for an exponent fit."""


def collapse_exponent_fit(report, floor: float = UNDERFLOW_FLOOR) -> float:
    """Per-layer collapse exponent from consecutive residuals.

    Least-squares slope of ``log r_{l+1}`` against ``log r_l`` over layers with
    ``floor < r < 1`` (and, for a report, not flagged as underflow). A recursion ``r_{l+1} = c r_l^k`` gives exactly ``k``:
    3 for cubic collapse, 1 for a geometric decay.
    """
    if isinstance(report, ResidualReport):
        r = report.residuals
        usable = [(floor < row.res_composite < 1.0) and not row.underflow for row in report.rows]
    else:
        r = list(report)
        usable = [(floor < v < 1.0) for v in r]
    if sum(usable) < 3:
        raise FitError(f"need >= 3 layers with residual in ({floor}, 1), got {sum(usable)}")
    xs, ys = [], []
    for l in range(len(r) - 1):
        if usable[l] and usable[l + 1]:
            xs.append(math.log(r[l]))
            ys.append(math.log(r[l + 1]))
    if len(xs) < 2:
        raise FitError("need >= 2 consecutive usable pairs")
    x = np.array(xs)
    y = np.array(ys)
    xc = x - x.mean()
    denom = float(xc @ xc)
    if denom == 0.0:
        raise FitError("all usable residuals are equal")
    return float(xc @ (y - y.mean()) / denom)


@dataclass(frozen=True)
class AnchorGap:
    lhs: float
    rhs: float
    holds: bool


def anchor_gap(X_l, X_next) -> AnchorGap:
    """Compare a layer output's residual with that of its update alone.

    The offset row ``x`` minimises ``||(X_next - X_l) - 1x^T||``; ``lhs`` is
    ``||X_next - 1x^T||`` and ``rhs`` the minimised update residual. ``holds``
    is the strict inequality ``lhs > rhs``.
    """
    a, b = _arr(X_l), _arr(X_next)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    rhs, x = min_residual(b - a)
    lhs = composite_norm(b - x[None, :])
    return AnchorGap(lhs, rhs, lhs > rhs)
