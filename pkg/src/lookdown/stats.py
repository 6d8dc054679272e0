"""Small statistical helpers used by the CLI and the acceptance suite."""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np
from scipy import stats as _st

from .errors import ArgumentError

MIN_SAMPLES = 30


@dataclass
class KSResult:
    ks_stat: float
    p_value: float


@dataclass
class MomentResult:
    name: str
    estimate: float
    se: float
    target: float | None = None
    passed: bool | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["pass"] = d.pop("passed")
        return d


def _as_sample(x, name):
    x = np.asarray(x, float).ravel()
    if len(x) < MIN_SAMPLES:
        raise ArgumentError(f"{name} needs at least {MIN_SAMPLES} samples, got {len(x)}")
    return x


def compare_distributions(samplesA, samplesB) -> KSResult:
    """Two-sample Kolmogorov-Smirnov test (scipy ``ks_2samp``, two-sided)."""
    a = _as_sample(samplesA, "samplesA")
    b = _as_sample(samplesB, "samplesB")
    res = _st.ks_2samp(a, b)
    return KSResult(float(res.statistic), float(res.pvalue))


def mean_se(x) -> tuple[float, float]:
    x = np.asarray(x, float).ravel()
    if len(x) < 2:
        raise ArgumentError("need at least 2 samples for a standard error")
    return float(x.mean()), float(x.std(ddof=1) / np.sqrt(len(x)))


def moment_test(samples, target: float, tolerance_sigmas: float = 3.0, name: str = "mean") -> MomentResult:
    """Pass iff ``|mean - target| <= tolerance_sigmas * SE`` with ``SE = sd / sqrt(N)``."""
    x = _as_sample(samples, "samples")
    m, se = mean_se(x)
    return MomentResult(name, m, se, float(target), bool(abs(m - target) <= tolerance_sigmas * se))


def two_sample_mean_test(a, b, tolerance_sigmas: float = 3.0, name: str = "difference") -> MomentResult:
    """Pass iff the mean difference is within ``tolerance_sigmas`` combined SEs."""
    a = _as_sample(a, "a")
    b = _as_sample(b, "b")
    ma, sa = mean_se(a)
    mb, sb = mean_se(b)
    se = float(np.hypot(sa, sb))
    return MomentResult(name, ma - mb, se, 0.0, bool(abs(ma - mb) <= tolerance_sigmas * se))
