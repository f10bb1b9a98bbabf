"""Per-primitive models of normal execution and the safety margins built on them.

Each training trace is turned into a GP posterior per state dimension
(fitted on residuals w.r.t. the primitive reference), evaluated on a shared
time grid, and the resulting equal-weight mixture is collapsed to a single
Gaussian per grid time.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import gp
from .lattice import MotionPrimitive
from .margins import MarginProvider, MarginTable
from .simulator import ExecutionTrace
from .special import chi2_quantile

N_STATE = 6
POS_DIMS = 3
DEFAULT_DT_MODEL = 0.05


class DegenerateModel(ArithmeticError):
    pass


class InsufficientData(ValueError):
    pass


def model_grid(t_F: float, dt_model: float = DEFAULT_DT_MODEL) -> np.ndarray:
    n = int(round(t_F / dt_model))
    if abs(n * dt_model - t_F) > 1e-9:
        raise ValueError("primitive duration must be a multiple of dt_model")
    return dt_model * np.arange(n + 1)


def _interp_rows(grid: np.ndarray, values: np.ndarray, tau) -> np.ndarray:
    tau = np.asarray(tau, dtype=float)
    idx = np.interp(tau, grid, np.arange(len(grid), dtype=float))
    lo = np.minimum(np.floor(idx).astype(int), len(grid) - 2)
    w = (idx - lo)[..., None]
    return values[lo] * (1 - w) + values[lo + 1] * w


@dataclass(frozen=True, eq=False)
class AlignedComponent:
    """GP posterior of one execution evaluated on the model grid (absolute state, primitive frame)."""

    times: np.ndarray
    mean: np.ndarray  # (G, 6)
    var: np.ndarray  # (G, 6)


@dataclass(frozen=True, eq=False)
class PrimitiveExecutionModel:
    primitive_id: int
    dt_model: float
    times: np.ndarray  # (G,)
    mean: np.ndarray  # (G, 6)
    var: np.ndarray  # (G, 6)
    n_components: int

    def __post_init__(self):
        if self.n_components < 2:
            raise InsufficientData("an execution model needs at least two executions")
        if np.any(~(self.var > 0)):
            raise DegenerateModel(f"non-positive variance in model of primitive {self.primitive_id}")

    def at(self, tau) -> tuple[np.ndarray, np.ndarray]:
        """Mean and variance at arbitrary ``tau``, linear between grid points."""
        return _interp_rows(self.times, self.mean, tau), _interp_rows(self.times, self.var, tau)

    def to_dict(self) -> dict:
        return {
            "primitive_id": self.primitive_id,
            "dt_model": self.dt_model,
            "J_i": self.n_components,
            "per_dim": [{"mu": self.mean[:, d].tolist(), "var": self.var[:, d].tolist()}
                        for d in range(self.mean.shape[1])],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "PrimitiveExecutionModel":
        mean = np.column_stack([pd["mu"] for pd in d["per_dim"]])
        var = np.column_stack([pd["var"] for pd in d["per_dim"]])
        times = float(d["dt_model"]) * np.arange(len(mean))
        return cls(int(d["primitive_id"]), float(d["dt_model"]), times, mean, var, int(d["J_i"]))


def residuals(trace: ExecutionTrace, primitive: MotionPrimitive) -> np.ndarray:
    return trace.states - primitive.state_at(trace.times)


def fit_trace(trace: ExecutionTrace, primitive: MotionPrimitive, **fit_kwargs) -> list[gp.GPModel]:
    """One GP per state dimension, fitted to the residuals of the trace."""
    res = residuals(trace, primitive)
    models = []
    for d in range(res.shape[1]):
        y = res[:, d]
        s2 = max(float(np.var(y)), 1e-12)
        init = gp.Hyperparams(s2, 0.5, 0.1 * s2)
        models.append(gp.fit(trace.times, y, init=init, **fit_kwargs))
    return models


def align(trace: ExecutionTrace, primitive: MotionPrimitive, gps: Sequence[gp.GPModel] | None = None,
          dt_model: float = DEFAULT_DT_MODEL, **fit_kwargs) -> AlignedComponent:
    """Evaluate the per-dimension GP posteriors of one trace on the model grid."""
    if gps is None:
        gps = fit_trace(trace, primitive, **fit_kwargs)
    grid = model_grid(primitive.t_F, dt_model)
    ref = primitive.state_at(grid)
    mean = np.empty((len(grid), len(gps)))
    var = np.empty_like(mean)
    for d, g in enumerate(gps):
        m, v = g.predict(grid)
        mean[:, d] = m + ref[:, d]
        var[:, d] = v
    return AlignedComponent(grid, mean, var)


def mixture_moments(means: np.ndarray, variances: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mean and variance of an equal-weight Gaussian mixture along axis 0.

    Uses mean(var) + mean((mu_j - mu)^2), the same quantity as
    mean(var + mu_j^2) - mu^2 but without the cancellation.
    """
    mu = means.mean(axis=0)
    var = variances.mean(axis=0) + ((means - mu) ** 2).mean(axis=0)
    return mu, var


def build_model(primitive_id: int, components: Sequence[AlignedComponent],
                dt_model: float = DEFAULT_DT_MODEL) -> PrimitiveExecutionModel:
    if len(components) < 2:
        raise InsufficientData("need at least two aligned executions")
    times = components[0].times
    for c in components[1:]:
        if c.times.shape != times.shape or not np.allclose(c.times, times):
            raise ValueError("components must share a grid")
    means = np.stack([c.mean for c in components])
    variances = np.stack([c.var for c in components])
    mu, var = mixture_moments(means, variances)
    if np.any(~(var > 0)):
        raise DegenerateModel("mixture variance is not positive")
    return PrimitiveExecutionModel(primitive_id, dt_model, times, mu, var, len(components))


@dataclass(frozen=True)
class Ellipsoid:
    center: np.ndarray
    semi_axes: np.ndarray


def probability_region(mean, variance, P: float, n_dof: int | None = None) -> Ellipsoid:
    """Centered region holding probability P of N(mean, diag(variance))."""
    mean = np.asarray(mean, dtype=float)
    variance = np.asarray(variance, dtype=float)
    if np.any(variance <= 0):
        raise ValueError("variances must be positive")
    if not 0 < P < 1:
        raise ValueError("P must lie in (0, 1)")
    n = mean.shape[-1] if n_dof is None else n_dof
    return Ellipsoid(mean, np.sqrt(variance * chi2_quantile(P, n)))


@dataclass(frozen=True, eq=False)
class BaselineMargins:
    """Per-dimension variances of the three reference-centered baselines."""

    global_var: np.ndarray  # (6,)
    per_primitive: Mapping[int, np.ndarray]  # pid -> (6,)
    time_varying: Mapping[int, np.ndarray]  # pid -> (G, 6)
    times: Mapping[int, np.ndarray]  # pid -> (G,)

    def to_dict(self) -> dict:
        return {
            "global": self.global_var.tolist(),
            "per_primitive": {str(k): v.tolist() for k, v in sorted(self.per_primitive.items())},
            "time_varying": {str(k): v.tolist() for k, v in sorted(self.time_varying.items())},
            "times": {str(k): v.tolist() for k, v in sorted(self.times.items())},
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "BaselineMargins":
        return cls(
            np.asarray(d["global"], dtype=float),
            {int(k): np.asarray(v, dtype=float) for k, v in d["per_primitive"].items()},
            {int(k): np.asarray(v, dtype=float) for k, v in d["time_varying"].items()},
            {int(k): np.asarray(v, dtype=float) for k, v in d["times"].items()},
        )


def compute_baselines(components: Mapping[int, Sequence[AlignedComponent]],
                      primitives: Sequence[MotionPrimitive]) -> BaselineMargins:
    """Sample variances of aligned execution means about the reference, and their maxima."""
    if not components:
        raise InsufficientData("no primitives to build baselines from")
    tv, pp, grids = {}, {}, {}
    for pid in sorted(components):
        comps = components[pid]
        if len(comps) < 2:
            raise InsufficientData(f"primitive {pid} has {len(comps)} executions, need >= 2")
        grid = comps[0].times
        ref = primitives[pid].state_at(grid)
        dev = np.stack([c.mean for c in comps]) - ref
        tv[pid] = (dev ** 2).sum(axis=0) / (len(comps) - 1)
        pp[pid] = tv[pid].max(axis=0)
        grids[pid] = grid
    glob = np.max(np.stack(list(pp.values())), axis=0)
    return BaselineMargins(glob, pp, tv, grids)


def _sphere_table(times, var_rows, P, n_dof):
    # one radius for all position axes: the largest per-axis variance
    r2 = np.max(np.atleast_2d(var_rows)[:, :POS_DIMS], axis=1) * chi2_quantile(P, n_dof)
    semi = np.repeat(np.sqrt(r2)[:, None], 3, axis=1)
    return MarginTable(np.asarray(times, dtype=float), np.zeros_like(semi), semi)


def margin_provider(kind: str, P: float, baselines: BaselineMargins | None = None,
                    models: Mapping[int, PrimitiveExecutionModel] | None = None,
                    primitives: Sequence[MotionPrimitive] | None = None,
                    n_dof: int = POS_DIMS) -> MarginProvider:
    """Spatial margin of the given kind as a probability region of position.

    Sphere kinds are centered on the reference with one radius for all
    axes; the learned kind is centered on the model mean.
    """
    if kind == "GlobalSphere":
        return MarginProvider(kind, P, {}, _sphere_table([0.0], baselines.global_var, P, n_dof))
    if kind == "PerPrimitiveSphere":
        return MarginProvider(kind, P, {pid: _sphere_table([0.0], v, P, n_dof)
                                        for pid, v in baselines.per_primitive.items()})
    if kind == "TimeVaryingSphere":
        return MarginProvider(kind, P, {pid: _sphere_table(baselines.times[pid], v, P, n_dof)
                                        for pid, v in baselines.time_varying.items()})
    if kind == "LearnedModel":
        scale = chi2_quantile(P, n_dof)
        tables = {}
        for pid, m in models.items():
            ref = primitives[pid].state_at(m.times)
            center = m.mean[:, :POS_DIMS] - ref[:, :POS_DIMS]
            tables[pid] = MarginTable(m.times, center, np.sqrt(m.var[:, :POS_DIMS] * scale))
        return MarginProvider(kind, P, tables)
    raise ValueError(f"unknown margin kind {kind!r}")


def _position_rmse(err: np.ndarray) -> float:
    return float(np.sqrt(np.mean(np.sum(err[:, :POS_DIMS] ** 2, axis=1))))


RMSE_ROWS = ("obs_vs_reference", "obs_vs_model_mean", "reference_vs_model_mean")


def rmse_per_primitive(models: Mapping[int, PrimitiveExecutionModel],
                       traces: Mapping[int, Sequence[ExecutionTrace]],
                       primitives: Sequence[MotionPrimitive]) -> dict[int, dict[str, float]]:
    """Position RMSE (Euclidean, over all observations) for each primitive."""
    out = {}
    for pid in sorted(models):
        trs = traces.get(pid, [])
        if not trs:
            continue
        model = models[pid]
        prim = primitives[pid]
        tau = np.concatenate([t.times for t in trs])
        obs = np.concatenate([t.states for t in trs])
        mu, _ = model.at(tau)
        ref_grid = prim.state_at(model.times)
        out[pid] = {
            "obs_vs_reference": _position_rmse(obs - prim.state_at(tau)),
            "obs_vs_model_mean": _position_rmse(obs - mu),
            "reference_vs_model_mean": _position_rmse(ref_grid - model.mean),
        }
    return out


def rmse_report(models, traces, primitives) -> dict[str, tuple[float, float]]:
    """Mean and standard deviation across primitives of each RMSE row, meters."""
    per = rmse_per_primitive(models, traces, primitives)
    if not per:
        raise InsufficientData("no held-out traces for the modelled primitives")
    return {row: (float(np.mean([v[row] for v in per.values()])),
                  float(np.std([v[row] for v in per.values()])))
            for row in RMSE_ROWS}


AREA_ROWS = ("GlobalSphere", "PerPrimitiveSphere", "TimeVaryingSphere", "LearnedModel")
_PAIRS = ((0, 1), (0, 2), (1, 2))


def _mean_pair_area(sigmas: np.ndarray, k: float) -> float:
    # sigmas: (..., 3) per-axis standard deviations
    areas = [math.pi * k * k * sigmas[..., a] * sigmas[..., b] for a, b in _PAIRS]
    return float(np.mean(np.stack(areas)))


def area_report(models: Mapping[int, PrimitiveExecutionModel], baselines: BaselineMargins,
                P: float = 0.99) -> dict[str, float]:
    """Average 2D margin area per kind, normalized by the global sphere.

    Areas are ellipses pi * a * b over the (x,y), (x,z) and (y,z) position
    pairs with semi-axes k * sigma, k = sqrt(chi2_1(P)) (about 2.6 at
    P = 0.99), averaged over primitives, grid times and pairs.
    """
    k = math.sqrt(chi2_quantile(P, 1))
    pids = sorted(models)
    if not pids:
        raise InsufficientData("no models")
    raw = {}
    sig_g = math.sqrt(float(np.max(baselines.global_var[:POS_DIMS])))
    per_prim, per_time, learned = [], [], []
    for pid in pids:
        G = len(models[pid].times)
        s_i = math.sqrt(float(np.max(baselines.per_primitive[pid][:POS_DIMS])))
        per_prim.append(np.full((G, 3), s_i))
        s_t = np.sqrt(np.max(baselines.time_varying[pid][:, :POS_DIMS], axis=1))
        per_time.append(np.repeat(s_t[:, None], 3, axis=1))
        learned.append(np.sqrt(models[pid].var[:, :POS_DIMS]))
    G_all = sum(len(models[p].times) for p in pids)
    raw["GlobalSphere"] = _mean_pair_area(np.full((G_all, 3), sig_g), k)
    raw["PerPrimitiveSphere"] = _mean_pair_area(np.concatenate(per_prim), k)
    raw["TimeVaryingSphere"] = _mean_pair_area(np.concatenate(per_time), k)
    raw["LearnedModel"] = _mean_pair_area(np.concatenate(learned), k)
    norm = raw["GlobalSphere"]
    if not norm > 0:
        return {kind: 1.0 for kind in AREA_ROWS}
    return {kind: raw[kind] / norm for kind in AREA_ROWS}


def mahalanobis_sq(model: PrimitiveExecutionModel, tau, states) -> np.ndarray:
    mu, var = model.at(tau)
    return np.sum((np.asarray(states) - mu) ** 2 / var, axis=-1)


def coverage(model: PrimitiveExecutionModel, traces: Sequence[ExecutionTrace], P: float) -> float:
    """Fraction of observations inside the model's P probability region (all state dims)."""
    thr = chi2_quantile(P, N_STATE)
    inside = [mahalanobis_sq(model, t.times, t.states) <= thr for t in traces]
    return float(np.mean(np.concatenate(inside)))


def train_primitive(primitive: MotionPrimitive, traces: Sequence[ExecutionTrace],
                    dt_model: float = DEFAULT_DT_MODEL, **fit_kwargs
                    ) -> tuple[PrimitiveExecutionModel, list[AlignedComponent]]:
    comps = [align(t, primitive, dt_model=dt_model, **fit_kwargs) for t in traces]
    return build_model(primitive.id, comps, dt_model), comps
