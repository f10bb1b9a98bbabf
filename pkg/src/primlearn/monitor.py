"""Streaming abnormality detection for primitive executions.

Each observation is tested for membership in the learned model's
probability region.  Exits are counted over a sliding time window and fed
into a Beta-Binomial posterior on the exit (failure) rate; the execution is
flagged when the posterior probability that the rate exceeds 1 - P is
above a threshold.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, Mapping

import numpy as np

from .execution_model import N_STATE, PrimitiveExecutionModel, mahalanobis_sq
from .simulator import ExecutionTrace
from .special import beta_sf, chi2_quantile

NORMAL = "normal"
ABNORMAL = "abnormal"


@dataclass(frozen=True)
class MonitorConfig:
    P: float = 0.999
    prior_strength: float = 1000.0
    alpha: float = 1.0
    beta: float = 999.0
    window: float = 1.0
    flag_threshold: float = 0.999

    def __post_init__(self):
        if not 0 < self.P < 1:
            raise ValueError("P must lie in (0, 1)")
        if min(self.prior_strength, self.alpha, self.beta, self.window) <= 0:
            raise ValueError("prior parameters and window must be positive")
        if abs(self.alpha + self.beta - self.prior_strength) > 1e-9 * self.prior_strength:
            raise ValueError("alpha + beta must equal the prior strength")
        if abs(self.alpha / self.prior_strength - (1.0 - self.P)) > 1e-9:
            raise ValueError("prior mean failure rate alpha / N must equal 1 - P")
        if not 0 < self.flag_threshold < 1:
            raise ValueError("flag_threshold must lie in (0, 1)")

    @classmethod
    def from_prior(cls, P: float = 0.999, prior_strength: float = 1000.0, **kw) -> "MonitorConfig":
        return cls(P, prior_strength, prior_strength * (1 - P), prior_strength * P, **kw)

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d: Mapping) -> "MonitorConfig":
        return cls(**d)


@lru_cache(maxsize=65536)
def _tail(x: float, a: float, b: float) -> float:
    return beta_sf(x, a, b)


def exceedance_probability(n_abnormal: int, n_normal: int, config: MonitorConfig) -> float:
    """p(theta > 1 - P | counts) under the Beta(alpha + abnormal, beta + normal) posterior."""
    return _tail(1.0 - config.P, config.alpha + n_abnormal, config.beta + n_normal)


@dataclass
class MonitorState:
    """Sliding window of (timestamp, abnormal) flags with running counts."""

    config: MonitorConfig = field(default_factory=MonitorConfig)
    window: deque = field(default_factory=deque)
    n_abnormal: int = 0
    n_normal: int = 0

    @property
    def n_total(self) -> int:
        return self.n_abnormal + self.n_normal

    def _evict(self, now: float) -> None:
        # entries exactly t_W old are kept
        horizon = now - self.config.window
        w = self.window
        while w and w[0][0] < horizon:
            _, ab = w.popleft()
            if ab:
                self.n_abnormal -= 1
            else:
                self.n_normal -= 1

    def update(self, timestamp: float, abnormal: bool) -> float:
        if self.window and timestamp < self.window[-1][0]:
            raise ValueError("timestamps must be non-decreasing")
        self._evict(timestamp)
        self.window.append((timestamp, bool(abnormal)))
        if abnormal:
            self.n_abnormal += 1
        else:
            self.n_normal += 1
        return exceedance_probability(self.n_abnormal, self.n_normal, self.config)

    def probability(self, now: float | None = None) -> float:
        if now is not None:
            self._evict(now)
        return exceedance_probability(self.n_abnormal, self.n_normal, self.config)


def abnormal_points(model: PrimitiveExecutionModel, tau, states, P: float) -> np.ndarray:
    """Vectorized region-exit test over all six state dimensions."""
    return mahalanobis_sq(model, tau, states) > chi2_quantile(P, N_STATE)


def is_abnormal_point(tau: float, state, model: PrimitiveExecutionModel, P: float) -> bool:
    return bool(abnormal_points(model, np.asarray([tau]), np.asarray(state, dtype=float)[None, :], P)[0])


def posterior_trace(trace: ExecutionTrace, model: PrimitiveExecutionModel,
                    config: MonitorConfig) -> tuple[np.ndarray, np.ndarray]:
    """Per-observation exit flags and the posterior exceedance probability after each one."""
    flags = abnormal_points(model, trace.times, trace.states, config.P)
    state = MonitorState(config)
    probs = np.array([state.update(trace.t_start + t, f) for t, f in zip(trace.times, flags)])
    return flags, probs


def classify_execution(trace: ExecutionTrace, model: PrimitiveExecutionModel,
                       config: MonitorConfig = MonitorConfig(), method: str = "beta") -> str:
    if method == "naive":
        flags = abnormal_points(model, trace.times, trace.states, config.P)
        return ABNORMAL if np.any(flags) else NORMAL
    if method == "beta":
        _, probs = posterior_trace(trace, model, config)
        return ABNORMAL if np.any(probs > config.flag_threshold) else NORMAL
    raise ValueError(f"unknown method {method!r}")


class StreamMonitor:
    """Consumes observation records and emits verdict records.

    Input records: ``{t, primitive_id, tau, state}``; output records:
    ``{t, p_failure_rate_exceeds, flagged}``.  One window is shared by the
    whole stream.
    """

    def __init__(self, models: Mapping[int, PrimitiveExecutionModel], config: MonitorConfig = MonitorConfig()):
        self.models = models
        self.config = config
        self.state = MonitorState(config)
        self.flagged = False

    def process(self, record: Mapping) -> dict:
        model = self.models[int(record["primitive_id"])]
        ab = is_abnormal_point(float(record["tau"]), record["state"], model, self.config.P)
        p = self.state.update(float(record["t"]), ab)
        flag = p > self.config.flag_threshold
        self.flagged = self.flagged or flag
        return {"t": float(record["t"]), "p_failure_rate_exceeds": p, "flagged": bool(flag)}

    def run(self, records: Iterable[Mapping]) -> Iterable[dict]:
        for rec in records:
            yield self.process(rec)


def simulate_bernoulli_stream(rate: float, config: MonitorConfig, duration: float, hz: float,
                              rng: np.random.Generator) -> float | None:
    """Feed a Bernoulli(rate) exit stream; return the first flag time or None."""
    n = int(round(duration * hz))
    flags = rng.random(n) < rate
    state = MonitorState(config)
    for k in range(n):
        t = k / hz
        if state.update(t, bool(flags[k])) > config.flag_threshold:
            return t
    return None
