"""Closed-form generalization-bound calculus.

Binary-entropy based functions (``h_D``, ``h_C``) default to bits, matching
``h_D`` taking values in [0, 2]. KL/MDL rates must be supplied in the same
base as the evaluation; use :func:`to_base` to convert from nats.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from enum import Enum

import numpy as np


class LogBase(str, Enum):
    BITS = "bits"
    NATS = "nats"

    @property
    def ln_factor(self) -> float:
        """Multiply a natural log by this to express it in this base."""
        return 1.0 / math.log(2.0) if self is LogBase.BITS else 1.0


def _base(base) -> LogBase:
    return base if isinstance(base, LogBase) else LogBase(str(base).lower())


def to_base(value_nats, base):
    return value_nats * _base(base).ln_factor


def _log(x, base):
    return np.log(x) * _base(base).ln_factor


def _check_prob(name, x):
    arr = np.asarray(x, dtype=float)
    if np.any(~np.isfinite(arr)) or np.any(arr < 0.0) or np.any(arr > 1.0):
        raise ValueError(f"{name} must lie in [0, 1], got {x!r}")
    return arr


def _scalar_or_array(out, *inputs):
    if all(np.ndim(i) == 0 for i in inputs):
        return float(out)
    return out


@dataclass(frozen=True)
class BoundInputs:
    n: int
    num_classes: int
    mdl_rate: float
    emp_risk_train: float
    emp_risk_test: float
    tv: float = 0.0
    delta: float = 1.0
    base: LogBase = LogBase.BITS

    def __post_init__(self):
        if self.n < 10:
            raise ValueError(f"bounds require n >= 10, got n={self.n}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.mdl_rate < 0:
            raise ValueError("mdl_rate must be nonnegative")
        _check_prob("emp_risk_train", self.emp_risk_train)
        _check_prob("emp_risk_test", self.emp_risk_test)
        if not 0.0 <= self.tv <= 2.0:
            raise ValueError("tv must lie in [0, 2]")
        if not 0.0 < self.delta <= 1.0:
            raise ValueError("delta must lie in (0, 1]")
        object.__setattr__(self, "base", _base(self.base))


def binary_entropy(x, base=LogBase.BITS):
    """h_b(x) with the 0 log 0 = 0 convention. Accepts scalars or arrays."""
    p = _check_prob("x", x)
    q = 1.0 - p
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = np.where(p > 0, -p * np.log(np.where(p > 0, p, 1.0)), 0.0)
        t2 = np.where(q > 0, -q * np.log(np.where(q > 0, q, 1.0)), 0.0)
    return _scalar_or_array((t1 + t2) * _base(base).ln_factor, x)


def h_D(x1, x2, base=LogBase.BITS):
    """2 h_b((x1 + x2)/2) - h_b(x1) - h_b(x2): twice the Bernoulli Jensen-Shannon divergence."""
    a = _check_prob("x1", x1)
    b = _check_prob("x2", x2)
    out = 2.0 * binary_entropy((a + b) / 2.0, base) - binary_entropy(a, base) - binary_entropy(b, base)
    return _scalar_or_array(np.maximum(out, 0.0), x1, x2)


def h_C(x1, x2, eps, base=LogBase.BITS):
    """Label-mismatch penalty, maximized over eps' in [0, min(eps, |x1 - x2|/2)].

    The objective is nondecreasing in eps' on that interval (h_b' is decreasing
    and the shifted arguments never cross), so the maximizer is the right end.
    """
    a = _check_prob("x1", x1)
    b = _check_prob("x2", x2)
    e = np.asarray(eps, dtype=float)
    if np.any(~np.isfinite(e)) or np.any(e < 0):
        raise ValueError(f"eps must be nonnegative, got {eps!r}")
    lo = np.minimum(a, b)
    hi = np.maximum(a, b)
    e_star = np.minimum(e, (hi - lo) / 2.0)
    out = (
        binary_entropy(lo + e_star, base)
        - binary_entropy(lo, base)
        + binary_entropy(hi - e_star, base)
        - binary_entropy(hi, base)
    )
    return _scalar_or_array(np.maximum(out, 0.0), x1, x2, eps)


def h_D_inverse(y: float, x2: float, base=LogBase.BITS, tol: float = 1e-10) -> float:
    """sup{x1 in [0, 1] : h_D(x1, x2) <= y}, by bisection on [x2, 1]."""
    if y < 0:
        raise ValueError("y must be nonnegative")
    _check_prob("x2", x2)
    if tol <= 0:
        raise ValueError("tol must be positive")
    if y >= h_D(1.0, x2, base):
        return 1.0
    if y == 0:
        # x2 is the only zero on [x2, 1]; bisection would wander ~sqrt(machine eps) past it
        return float(x2)
    lo, hi = float(x2), 1.0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if h_D(mid, x2, base) <= y:
            lo = mid
        else:
            hi = mid
    return lo


def _complexity_term(mdl_rate: float, n: int, base) -> float:
    return mdl_rate + float(_log(n, base)) / n


def theorem1_rhs(b: BoundInputs) -> float:
    """(MDL + log n)/n plus the label-mismatch residual at eps = tv/2."""
    return _complexity_term(b.mdl_rate, b.n, b.base) + h_C(
        b.emp_risk_train, b.emp_risk_test, b.tv / 2.0, b.base
    )


def _check_n(n: int):
    if n < 10:
        raise ValueError(f"bounds require n >= 10, got n={n}")


def gen_bound_thm1(
    mdl_rate: float,
    emp_risk: float,
    n: int,
    num_classes: int,
    base=LogBase.BITS,
    step: float = 1e-4,
) -> float:
    """Largest generalization gap g consistent with the in-expectation h_D bound.

    Scans g on a grid of spacing <= ``step`` and refines the last feasible
    crossing by bisection. The total-variation plug-in is sqrt(C/n).
    """
    _check_n(n)
    _check_prob("emp_risk", emp_risk)
    if mdl_rate < 0:
        raise ValueError("mdl_rate must be nonnegative")
    base = _base(base)
    tv = math.sqrt(num_classes / n)
    complexity = _complexity_term(mdl_rate, n, base)
    top = 1.0 - emp_risk
    if top <= 0:
        return 0.0

    def slack(g):
        g = np.clip(g, 0.0, top)
        lhs = h_D(emp_risk + g, emp_risk, base)
        return complexity + h_C(emp_risk, emp_risk + g, tv / 2.0, base) - lhs

    grid = np.linspace(0.0, top, int(math.ceil(top / step)) + 1)
    feasible = np.nonzero(slack(grid) >= 0.0)[0]
    k = int(feasible[-1])
    if k == grid.size - 1:
        return float(top)
    lo, hi = float(grid[k]), float(grid[k + 1])
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if slack(mid) >= 0.0:
            lo = mid
        else:
            hi = mid
    return lo


def sqrt_bound(mdl: float, n: int, num_classes: int) -> float:
    """sqrt((2 MDL + C + 2)/n)."""
    if mdl < 0 or n < 1:
        raise ValueError("need mdl >= 0 and n >= 1")
    return math.sqrt((2.0 * mdl + num_classes + 2.0) / n)


def lossy_sqrt_bound(mdl_quantized: float, n: int, num_classes: int, distortion: float) -> float:
    if distortion < 0:
        raise ValueError("distortion must be nonnegative")
    return sqrt_bound(mdl_quantized, n, num_classes) + distortion


def lossy_gen_bound(
    rhs: float, emp_risk: float, distortion: float, base=LogBase.BITS, tol: float = 1e-10
) -> float:
    """h_D^{-1}(min(cap, rhs) | emp_risk) - emp_risk + distortion.

    ``rhs`` is the full in-expectation right-hand side evaluated for the
    quantized encoder; ``cap`` is 2 bits expressed in ``base``.
    """
    if distortion < 0:
        raise ValueError("distortion must be nonnegative")
    cap = 2.0 * math.log(2.0) * _base(base).ln_factor
    return h_D_inverse(min(cap, rhs), emp_risk, base, tol) - emp_risk + distortion


def theorem2_rhs(kl_value: float, n: int, delta: float, residual: float, base=LogBase.BITS) -> float:
    """Tail-bound right-hand side (KL + log(n/delta))/n + residual."""
    _check_n(n)
    if not 0.0 < delta <= 1.0:
        raise ValueError(f"delta must lie in (0, 1], got {delta}")
    return (kl_value + float(_log(n / delta, base))) / n + residual


def dp_penalty(eps_p: float, n: int, delta: float) -> float:
    """Extra tail-bound term for an eps_p-differentially-private prior.

    The same result replaces the confidence term by log(2n/delta)/n; see
    :func:`dp_confidence_term`.
    """
    if eps_p < 0:
        raise ValueError("eps_p must be nonnegative")
    if not 0.0 < delta < 1.0:
        raise ValueError(f"delta must lie in (0, 1), got {delta}")
    return 0.5 * eps_p**2 + eps_p * math.sqrt(math.log(4.0 / delta) / (2.0 * n))


def dp_confidence_term(n: int, delta: float, base=LogBase.NATS) -> float:
    if not 0.0 < delta <= 1.0:
        raise ValueError(f"delta must lie in (0, 1], got {delta}")
    return float(_log(2.0 * n / delta, base)) / n


def partial_sym_log_term(delta: float, n: int, eps: float, base=LogBase.NATS) -> float:
    """log(delta e^{2n} + n e^{eps}) / n without forming e^{2n}."""
    if not 0.0 <= delta <= 1.0:
        raise ValueError("delta must lie in [0, 1]")
    if n < 1:
        raise ValueError("n must be >= 1")
    log_delta = math.log(delta) if delta > 0 else -math.inf
    return float(np.logaddexp(log_delta + 2.0 * n, math.log(n) + eps)) * _base(base).ln_factor / n


def curve_fig2(n: int, num_classes: int, emp_risk: float, gen_grid, base=LogBase.BITS):
    """Rows (g, residual) with residual = h_C(L, L + g; sqrt(C/n)/2)."""
    eps = math.sqrt(num_classes / n) / 2.0
    rows = []
    for g in gen_grid:
        g = float(g)
        if g < 0 or emp_risk + g > 1.0:
            raise ValueError(f"emp_risk + g must lie in [0, 1], got {emp_risk + g}")
        rows.append((g, h_C(emp_risk, emp_risk + g, eps, base)))
    return rows


def curve_fig3(n: int, num_classes: int, emp_risks, mdl_rate_grid, base=LogBase.BITS):
    """Rows (mdl_rate, emp_risk, thm1 bound, sqrt bound), mdl_rate outermost."""
    rows = []
    for rate in mdl_rate_grid:
        for risk in emp_risks:
            rows.append(
                (
                    float(rate),
                    float(risk),
                    gen_bound_thm1(float(rate), float(risk), n, num_classes, base),
                    sqrt_bound(float(rate) * n, n, num_classes),
                )
            )
    return rows


FIG2_HEADER = ("gen", "residual")
FIG3_HEADER = ("mdl_rate", "emp_risk", "thm1", "sqrt")


def format_csv(header, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([v if isinstance(v, str) else f"{v:.12g}" for v in row])
    return buf.getvalue()
