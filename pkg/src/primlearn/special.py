"""Special functions used for probability regions and the failure-rate monitor.

Only scalar, pure-Python implementations live here: the regularized
incomplete gamma and beta functions and the chi-square quantile.  They are
small enough to own outright and keep the numerics auditable.
"""

from __future__ import annotations

import math

_EPS = 1e-16
_TINY = 1e-300
_MAX_ITER = 100_000


def _gammainc_series(a: float, x: float) -> float:
    # P(a, x) by the power series, good for x < a + 1
    ap = a
    term = 1.0 / a
    total = term
    for _ in range(_MAX_ITER):
        ap += 1.0
        term *= x / ap
        total += term
        if abs(term) < abs(total) * _EPS:
            break
    return total * math.exp(-x + a * math.log(x) - math.lgamma(a))


def _gammaincc_cf(a: float, x: float) -> float:
    # Q(a, x) by the modified Lentz continued fraction, good for x >= a + 1
    b = x + 1.0 - a
    c = 1.0 / _TINY
    d = 1.0 / b
    h = d
    for i in range(1, _MAX_ITER):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < _TINY:
            d = _TINY
        c = b + an / c
        if abs(c) < _TINY:
            c = _TINY
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _EPS:
            break
    return math.exp(-x + a * math.log(x) - math.lgamma(a)) * h


def gammainc(a: float, x: float) -> float:
    """Regularized lower incomplete gamma function P(a, x)."""
    if a <= 0:
        raise ValueError("a must be positive")
    if x < 0:
        raise ValueError("x must be non-negative")
    if x == 0:
        return 0.0
    if math.isinf(x):
        return 1.0
    if x < a + 1.0:
        return _gammainc_series(a, x)
    return 1.0 - _gammaincc_cf(a, x)


def chi2_cdf(x: float, dof: int) -> float:
    if x <= 0:
        return 0.0
    return gammainc(0.5 * dof, 0.5 * x)


def chi2_quantile(p: float, dof: int) -> float:
    """Inverse of the chi-square CDF with ``dof`` degrees of freedom.

    Newton steps on the regularized lower incomplete gamma function, kept
    inside a shrinking bracket so that a bad step falls back to bisection.
    """
    if dof < 1:
        raise ValueError("dof must be >= 1")
    if not 0.0 <= p < 1.0:
        if p == 1.0:
            return math.inf
        raise ValueError("p must lie in [0, 1]")
    if p == 0.0:
        return 0.0

    a = 0.5 * dof
    # Wilson-Hilferty starting point
    z = _norm_ppf(p)
    h = 2.0 / (9.0 * dof)
    x = max(dof * (1.0 - h + z * math.sqrt(h)) ** 3, 1e-8)

    lo, hi = 0.0, max(2.0 * x, 1.0)
    while chi2_cdf(hi, dof) < p:
        lo, hi = hi, 2.0 * hi

    log_norm = math.lgamma(a) + a * math.log(2.0)
    for _ in range(200):
        f = chi2_cdf(x, dof) - p
        if f > 0:
            hi = min(hi, x)
        else:
            lo = max(lo, x)
        if f == 0.0 or (hi - lo) <= 4 * _EPS * hi:
            break
        # chi-square density at x
        pdf = math.exp((a - 1.0) * math.log(x) - 0.5 * x - log_norm)
        step = f / pdf if pdf > 0 else math.inf
        x_new = x - step
        if not lo < x_new < hi:
            x_new = 0.5 * (lo + hi)
        if abs(x_new - x) <= 1e-15 * max(x, 1.0):
            x = x_new
            break
        x = x_new
    return x


def _norm_ppf(p: float) -> float:
    # Acklam's rational approximation; only used as a starting guess.
    a = (-3.969683028665376e01, 2.209460984245205e02, -2.759285104469687e02,
         1.383577518672690e02, -3.066479806614716e01, 2.506628277459239e00)
    b = (-5.447609879822406e01, 1.615858368580409e02, -1.556989798598866e02,
         6.680131188771972e01, -1.328068155288572e01)
    c = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e00,
         -2.549732539343734e00, 4.374664141464968e00, 2.938163982698783e00)
    d = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e00,
         3.754408661907416e00)
    plow = 0.02425
    if p < plow:
        q = math.sqrt(-2 * math.log(p))
        return (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) / \
            ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1)
    if p > 1 - plow:
        q = math.sqrt(-2 * math.log(1 - p))
        return -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) / \
            ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1)
    q = p - 0.5
    r = q * q
    return (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q / \
        (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1)


def _betacf(a: float, b: float, x: float) -> float:
    # Continued fraction for I_x(a, b), modified Lentz
    qab = a + b
    qap = a + 1.0
    qam = a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < _TINY:
        d = _TINY
    d = 1.0 / d
    h = d
    for m in range(1, _MAX_ITER):
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
        if abs(delta - 1.0) < _EPS:
            break
    return h


_LN_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


def _stirling_corr(z: float) -> float:
    # lgamma(z) - ((z - 1/2) log z - z + log sqrt(2 pi)), valid for z >= 10
    z2 = 1.0 / (z * z)
    return (1.0 / 12 - z2 * (1.0 / 360 - z2 * (1.0 / 1260 - z2 * (1.0 / 1680 - z2 / 1188)))) / z


def _lbeta(a: float, b: float) -> float:
    """log B(a, b), arranged so large arguments do not cancel."""
    p, q = min(a, b), max(a, b)
    if p >= 10.0:
        corr = _stirling_corr(p) + _stirling_corr(q) - _stirling_corr(p + q)
        return (-0.5 * math.log(q) + _LN_SQRT_2PI + corr
                + (p - 0.5) * math.log(p / (p + q)) + q * math.log1p(-p / (p + q)))
    if q >= 10.0:
        corr = _stirling_corr(q) - _stirling_corr(p + q)
        return math.lgamma(p) + corr + p - p * math.log(p + q) + (q - 0.5) * math.log1p(-p / (p + q))
    return math.lgamma(p) + math.lgamma(q) - math.lgamma(p + q)


def _log_front(x: float, a: float, b: float) -> float:
    return a * math.log(x) + b * math.log1p(-x) - _lbeta(a, b)


def beta_cdf(x: float, a: float, b: float) -> float:
    """Regularized incomplete beta function I_x(a, b).

    Evaluated with the continued fraction on whichever tail converges
    fastest, using the symmetry I_x(a, b) = 1 - I_{1-x}(b, a).
    """
    if a <= 0 or b <= 0:
        raise ValueError("a and b must be positive")
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    front = math.exp(_log_front(x, a, b))
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def beta_sf(x: float, a: float, b: float) -> float:
    """Upper tail 1 - I_x(a, b), computed without cancellation where possible."""
    if a <= 0 or b <= 0:
        raise ValueError("a and b must be positive")
    if x <= 0.0:
        return 1.0
    if x >= 1.0:
        return 0.0
    front = math.exp(_log_front(x, a, b))
    if x < (a + 1.0) / (a + b + 2.0):
        return 1.0 - front * _betacf(a, b, x) / a
    return front * _betacf(b, a, 1.0 - x) / b
