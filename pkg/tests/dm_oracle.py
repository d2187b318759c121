"""Diebold-Mariano statistic written out term by term."""

from __future__ import annotations

import math


def dm(errors_a, errors_b, loss="absolute", horizon=1):
    f = abs if loss == "absolute" else (lambda e: e * e)
    d = [f(a) - f(b) for a, b in zip(errors_a, errors_b)]
    n = len(d)
    if all(x == 0 for x in d):
        return 0.0, 1.0
    mean = math.fsum(d) / n

    def gamma(k):
        return math.fsum((d[t] - mean) * (d[t - k] - mean) for t in range(k, n)) / n

    lrv = gamma(0) + 2 * math.fsum((1 - k / horizon) * gamma(k) for k in range(1, horizon))
    stat = mean / math.sqrt(lrv / n)
    p = math.erfc(abs(stat) / math.sqrt(2))
    return stat, p
