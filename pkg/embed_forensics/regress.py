"""
Cluster regression.

Ordinary least squares of a PC/LD score on a binary indicator, with the
coefficient of determination, Pearson correlation and the F-test of the
joint linear hypothesis.
"""

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import pandas as pd
from scipy.special import betaln

from .errors import DegenerateInputError, DimensionMismatchError, ValidationError

logger = logging.getLogger(__name__)

# continued fraction controls for the incomplete beta function
CF_TOLERANCE = 1e-10
CF_MAX_ITER = 300
_TINY = 1e-300

# relative residual below which a fit counts as perfect
PERFECT_FIT_RTOL = 1e-12


@dataclass(frozen=True)
class RegressionReport:
    """
    Result of one regression.

    ``f_statistic`` is ``inf`` (and ``f_infinite`` True) for a perfect fit,
    in which case ``p_value`` is 0.
    """

    slope: float
    intercept: float
    r_squared: float
    pearson_r: float
    f_statistic: float
    p_value: float
    df_model: int
    df_resid: int
    n: int
    f_infinite: bool = False
    construction: str = "score_on_indicator"
    coefficients: tuple = field(default=())
    response: str = None
    explanatory: str = None

    def to_dict(self):
        out = asdict(self)
        out["coefficients"] = list(self.coefficients)
        if self.f_infinite:
            out["f_statistic"] = None
        return out

    def named(self, response, explanatory):
        """Copy of the report labelled with what was regressed on what."""
        values = asdict(self)
        values.update(response=response, explanatory=explanatory)
        return RegressionReport(**values)


def _betacf(a, b, x):
    """Continued fraction for the incomplete beta function (modified Lentz)."""
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < _TINY:
        d = _TINY
    d = 1.0 / d
    h = d
    for m in range(1, CF_MAX_ITER + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < _TINY:
            d = _TINY
        c = 1.0 + aa / c
        if abs(c) < _TINY:
            c = _TINY
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < _TINY:
            d = _TINY
        c = 1.0 + aa / c
        if abs(c) < _TINY:
            c = _TINY
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < CF_TOLERANCE:
            return h
    logger.warning(
        "incomplete beta continued fraction did not converge (a=%g, b=%g, x=%g)", a, b, x
    )
    return h


def regularized_beta(a, b, x):
    """I_x(a, b), the regularized incomplete beta function."""
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    log_front = a * math.log(x) + b * math.log1p(-x) - betaln(a, b)
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def _check_f_args(x, d1, d2):
    if math.isnan(x) or x < 0:
        raise ValidationError(f"F quantile must be >= 0, got {x}")
    if d1 <= 0 or d2 <= 0:
        raise ValidationError(f"degrees of freedom must be positive, got ({d1}, {d2})")


def f_cdf(x, d1, d2):
    """
    CDF of the F(d1, d2) distribution.

    Computed as I_{d1 x / (d1 x + d2)}(d1 / 2, d2 / 2).
    """
    x = float(x)
    _check_f_args(x, d1, d2)
    if math.isinf(x):
        return 1.0
    return regularized_beta(d1 / 2.0, d2 / 2.0, d1 * x / (d1 * x + d2))


def f_sf(x, d1, d2):
    """
    Upper tail 1 - f_cdf(x, d1, d2), evaluated directly so that tiny
    p-values keep their precision.
    """
    x = float(x)
    _check_f_args(x, d1, d2)
    if math.isinf(x):
        return 0.0
    return regularized_beta(d2 / 2.0, d1 / 2.0, d2 / (d2 + d1 * x))


def _f_test(r_squared, ss_res, ss_tot, df_model, df_resid):
    if ss_res <= PERFECT_FIT_RTOL * ss_tot:
        return math.inf, 0.0, True
    f_statistic = (r_squared / df_model) / ((1.0 - r_squared) / df_resid)
    p_value = min(1.0, max(0.0, f_sf(f_statistic, df_model, df_resid)))
    return f_statistic, p_value, False


def _check_indicator(indicator, n):
    indicator = np.asarray(indicator, dtype=np.float64).ravel()
    if indicator.size != n:
        raise DimensionMismatchError(f"indicator has {indicator.size} values for {n} samples")
    if not np.isin(indicator, (0.0, 1.0)).all():
        raise ValidationError("indicator values must be 0 or 1")
    if indicator.min() == indicator.max():
        raise DegenerateInputError("indicator is constant; it needs both 0 and 1")
    return indicator


def regress_indicator(scores, indicator):
    """
    Regress a score on a binary indicator.

    Parameters
    ----------
    scores : array
        Shape (N,), N >= 3.
    indicator : array
        Shape (N,), values in {0, 1}, both present.

    Returns
    -------
    RegressionReport
    """
    y = np.asarray(scores, dtype=np.float64).ravel()
    n = y.size
    if n < 3:
        raise ValidationError(f"need at least 3 samples, got {n}")
    x = _check_indicator(indicator, n)
    if not np.isfinite(y).all():
        raise ValidationError("scores contain non-finite values")

    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(dx @ dx)
    syy = float(dy @ dy)
    if syy == 0:
        raise DegenerateInputError("scores are constant")
    sxy = float(dx @ dy)

    slope = sxy / sxx
    intercept = float(y.mean() - slope * x.mean())
    residuals = y - (intercept + slope * x)
    ss_res = float(residuals @ residuals)
    r_squared = min(1.0, max(0.0, 1.0 - ss_res / syy))
    pearson_r = max(-1.0, min(1.0, sxy / math.sqrt(sxx * syy)))

    df_model, df_resid = 1, n - 2
    f_statistic, p_value, f_infinite = _f_test(r_squared, ss_res, syy, df_model, df_resid)
    return RegressionReport(
        slope=slope,
        intercept=intercept,
        r_squared=r_squared,
        pearson_r=pearson_r,
        f_statistic=f_statistic,
        p_value=p_value,
        df_model=df_model,
        df_resid=df_resid,
        n=n,
        f_infinite=f_infinite,
        construction="score_on_indicator",
        coefficients=(slope,),
    )


def regress_multi(scores, indicator):
    """
    Regress a binary indicator on several component scores.

    The R^2 of this reversed regression is the squared multiple correlation,
    i.e. how much of the best linear combination of the scores the
    indicator explains. The F-test has (P, N - P - 1) degrees of freedom.

    Parameters
    ----------
    scores : array
        Shape (N, P), N > P + 1.
    indicator : array
        Shape (N,), values in {0, 1}, both present.

    Returns
    -------
    RegressionReport
        ``coefficients`` holds the P score coefficients, ``slope`` the first.
    """
    S = np.asarray(scores, dtype=np.float64)
    if S.ndim == 1:
        S = S[:, None]
    n, p = S.shape
    if n <= p + 1:
        raise ValidationError(f"need more than {p + 1} samples for {p} scores, got {n}")
    y = _check_indicator(indicator, n)
    design = np.column_stack([np.ones(n), S])
    if np.linalg.matrix_rank(design) < p + 1:
        raise DegenerateInputError("design matrix is rank deficient")

    beta, *_ = np.linalg.lstsq(design, y, rcond=None)
    residuals = y - design @ beta
    ss_res = float(residuals @ residuals)
    dy = y - y.mean()
    ss_tot = float(dy @ dy)
    r_squared = min(1.0, max(0.0, 1.0 - ss_res / ss_tot))
    pearson_r = math.sqrt(r_squared)
    if p == 1 and beta[1] < 0:
        pearson_r = -pearson_r

    df_model, df_resid = p, n - p - 1
    f_statistic, p_value, f_infinite = _f_test(r_squared, ss_res, ss_tot, df_model, df_resid)
    return RegressionReport(
        slope=float(beta[1]),
        intercept=float(beta[0]),
        r_squared=r_squared,
        pearson_r=pearson_r,
        f_statistic=f_statistic,
        p_value=p_value,
        df_model=df_model,
        df_resid=df_resid,
        n=n,
        f_infinite=f_infinite,
        construction="indicator_on_scores",
        coefficients=tuple(float(b) for b in beta[1:]),
    )


def format_p_value(p):
    """Render a p-value; anything below 1e-300 prints as 0.0."""
    if p < 1e-300:
        return "0.0"
    return f"{p:.2g}"


def format_f_statistic(report):
    if report.f_infinite:
        return "inf"
    return f"{report.f_statistic:.2g}"


def regression_table(reports):
    """
    Tabulate reports with the columns of a "Regressions and Correlations" table.

    Parameters
    ----------
    reports : list[RegressionReport]

    Returns
    -------
    DataFrame
    """
    rows = [
        {
            "response": r.response,
            "explanatory": r.explanatory,
            "r_squared": round(r.r_squared, 2),
            "pearson_r": round(r.pearson_r, 2),
            "f_statistic": format_f_statistic(r),
            "p_value": format_p_value(r.p_value),
        }
        for r in reports
    ]
    return pd.DataFrame(
        rows,
        columns=["response", "explanatory", "r_squared", "pearson_r", "f_statistic", "p_value"],
    )
