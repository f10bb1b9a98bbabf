"""End-to-end stages: primitives -> traces -> models -> reports.

Every stage reads its inputs from and writes its outputs to the artifact
directory named in the :class:`PipelineConfig`, so stages can be run one at
a time from the command line.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import io
from .execution_model import (
    AREA_ROWS, RMSE_ROWS, BaselineMargins, PrimitiveExecutionModel,
    align, area_report, build_model, compute_baselines, fit_trace, margin_provider, rmse_report,
)
from .lattice import (
    LatticeConfig, MotionPrimitive, generate_primitive_set, primitives_from_dict, primitives_to_dict,
)
from .margins import ZERO_MARGIN
from .monitor import ABNORMAL, MonitorConfig, classify_execution
from .special import chi2_quantile
from .simulator import (
    ExecutionTrace, FaultSpec, SimConfig, execution_seed, run_triplet, select_triplets,
)

log = logging.getLogger(__name__)


class MissingArtifacts(FileNotFoundError):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    root: str = "artifacts"
    lattice: LatticeConfig = field(default_factory=LatticeConfig)
    sim: SimConfig = field(default_factory=SimConfig)
    monitor: MonitorConfig = field(default_factory=MonitorConfig)
    P_margin: float = 0.99
    seed: int = 0
    primitive_ids: tuple[int, ...] | None = None
    triplets_per_primitive: int = 20
    n_train: int = 10
    allow_repeats: bool = True
    dt_model: float = 0.05
    gp_starts: int = 8
    gp_maxiter: int = 500
    gp_tol: float = 1e-8
    fault_sigma_multiple: float = 5.0
    jobs: int = 1

    def __post_init__(self):
        if not 0 < self.P_margin < 1:
            raise ValueError("P_margin must lie in (0, 1)")
        if self.n_train > self.triplets_per_primitive:
            raise ValueError("n_train cannot exceed triplets_per_primitive")
        if self.primitive_ids is not None:
            object.__setattr__(self, "primitive_ids", tuple(int(i) for i in self.primitive_ids))

    @property
    def sim_seeded(self) -> SimConfig:
        return replace(self.sim, seed=self.seed)

    # artifact locations
    @property
    def primitives_path(self) -> Path:
        return Path(self.root) / "primitives.json"

    @property
    def dataset_dir(self) -> Path:
        return Path(self.root) / "dataset"

    @property
    def models_dir(self) -> Path:
        return Path(self.root) / "models"

    @property
    def reports_dir(self) -> Path:
        return Path(self.root) / "reports"

    def to_dict(self) -> dict:
        return {
            "root": self.root, "lattice": self.lattice.to_dict(), "sim": self.sim.to_dict(),
            "monitor": self.monitor.to_dict(), "P_margin": self.P_margin, "seed": self.seed,
            "primitive_ids": None if self.primitive_ids is None else list(self.primitive_ids),
            "triplets_per_primitive": self.triplets_per_primitive, "n_train": self.n_train,
            "allow_repeats": self.allow_repeats, "dt_model": self.dt_model,
            "gp_starts": self.gp_starts, "gp_maxiter": self.gp_maxiter, "gp_tol": self.gp_tol,
            "fault_sigma_multiple": self.fault_sigma_multiple, "jobs": self.jobs,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "PipelineConfig":
        d = dict(d)
        if "lattice" in d:
            d["lattice"] = LatticeConfig.from_dict(d["lattice"])
        if "sim" in d:
            d["sim"] = SimConfig.from_dict(d["sim"])
        if "monitor" in d:
            d["monitor"] = MonitorConfig.from_dict(d["monitor"])
        return cls(**d)


def _map(fn, items, jobs: int):
    items = list(items)
    if jobs > 1 and len(items) > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(jobs) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


# primitives ---------------------------------------------------------------

def gen_primitives(cfg: PipelineConfig) -> list[MotionPrimitive]:
    prims = generate_primitive_set(cfg.lattice)
    io.write_json(cfg.primitives_path, primitives_to_dict(prims, cfg.lattice))
    return prims


def load_primitives(cfg: PipelineConfig) -> list[MotionPrimitive]:
    if not cfg.primitives_path.exists():
        raise MissingArtifacts(f"{cfg.primitives_path} not found; run gen-primitives first")
    prims, _ = primitives_from_dict(io.read_json(cfg.primitives_path))
    return prims


def selected_ids(cfg: PipelineConfig, primitives: Sequence[MotionPrimitive]) -> list[int]:
    if cfg.primitive_ids is None:
        return [p.id for p in primitives]
    return list(cfg.primitive_ids)


# data collection ------------------------------------------------------------

def _trace_name(pid: int, j: int) -> str:
    return f"traces/p{pid:03d}_j{j:02d}.jsonl"


def _collect_one(args):
    pid, j, trip, prims, sim = args
    return run_triplet(trip, prims, sim, execution_seed(sim.seed, pid, j))


def collect(cfg: PipelineConfig) -> dict:
    """Execute the triplets and write one trace file per execution plus a manifest."""
    prims = load_primitives(cfg)
    sim = cfg.sim_seeded
    work = []
    for pid in selected_ids(cfg, prims):
        for j, trip in enumerate(select_triplets(pid, cfg.triplets_per_primitive, prims,
                                                 cfg.seed, cfg.allow_repeats)):
            work.append((pid, j, trip))
    traces = _map(_collect_one, [(pid, j, trip, prims, sim) for pid, j, trip in work], cfg.jobs)
    files = []
    for (pid, j, trip), tr in zip(work, traces):
        name = _trace_name(pid, j)
        io.write_jsonl(cfg.dataset_dir / name, tr.records())
        files.append({"file": name, "primitive_id": pid, "index": j, "triplet": list(trip),
                      "split": "train" if j < cfg.n_train else "test"})
    manifest = {
        "seed": cfg.seed,
        "bias": sim.resolved_bias().tolist(),
        "triplets_per_primitive": cfg.triplets_per_primitive,
        "n_train": cfg.n_train,
        "files": files,
        "counts": {"total": len(files),
                   "train": sum(f["split"] == "train" for f in files),
                   "test": sum(f["split"] == "test" for f in files)},
    }
    io.write_json(cfg.dataset_dir / "manifest.json", manifest)
    return manifest


def load_dataset(cfg: PipelineConfig) -> tuple[dict, dict[str, dict[int, list[ExecutionTrace]]]]:
    path = cfg.dataset_dir / "manifest.json"
    if not path.exists():
        raise MissingArtifacts(f"{path} not found; run collect first")
    manifest = io.read_json(path)
    split: dict[str, dict[int, list[ExecutionTrace]]] = {"train": {}, "test": {}}
    for f in manifest["files"]:
        tr = ExecutionTrace.from_records(io.read_jsonl(cfg.dataset_dir / f["file"]))
        split[f["split"]].setdefault(f["primitive_id"], []).append(tr)
    return manifest, split


# training ---------------------------------------------------------------

def _train_one(args):
    prim, traces, dt_model, fit_kwargs = args
    comps, gps = [], []
    for tr in traces:
        g = fit_trace(tr, prim, **fit_kwargs)
        gps.append(g)
        comps.append(align(tr, prim, g, dt_model=dt_model))
    return build_model(prim.id, comps, dt_model), comps, gps


def train(cfg: PipelineConfig) -> tuple[dict[int, PrimitiveExecutionModel], BaselineMargins]:
    prims = load_primitives(cfg)
    _, split = load_dataset(cfg)
    fit_kwargs = {"n_starts": cfg.gp_starts, "maxiter": cfg.gp_maxiter, "tol": cfg.gp_tol}
    pids = sorted(split["train"])
    results = _map(_train_one, [(prims[p], split["train"][p], cfg.dt_model, fit_kwargs) for p in pids],
                   cfg.jobs)
    models, comps = {}, {}
    for pid, (model, cs, gps) in zip(pids, results):
        models[pid] = model
        comps[pid] = cs
        io.write_json(cfg.models_dir / f"model_{pid:03d}.json", model.to_dict())
        io.write_json(cfg.models_dir / "gp" / f"p{pid:03d}.json",
                      [[g.to_dict() for g in per_trace] for per_trace in gps])
    baselines = compute_baselines(comps, prims)
    io.write_json(cfg.models_dir / "baselines.json", baselines.to_dict())
    return models, baselines


def load_models(model_dir: Path | str) -> dict[int, PrimitiveExecutionModel]:
    model_dir = Path(model_dir)
    files = sorted(model_dir.glob("model_*.json"))
    if not files:
        raise MissingArtifacts(f"no model files in {model_dir}; run train first")
    models = {}
    for f in files:
        m = PrimitiveExecutionModel.from_dict(io.read_json(f))
        models[m.primitive_id] = m
    return models


def load_baselines(cfg: PipelineConfig) -> BaselineMargins:
    path = cfg.models_dir / "baselines.json"
    if not path.exists():
        raise MissingArtifacts(f"{path} not found; run train first")
    return BaselineMargins.from_dict(io.read_json(path))


# reports ----------------------------------------------------------------

RMSE_LABELS = {
    "obs_vs_reference": "Observed executions vs motion primitive",
    "obs_vs_model_mean": "Observed executions vs model mean",
    "reference_vs_model_mean": "Motion primitive vs model mean",
}


def report_rmse(cfg: PipelineConfig) -> dict[str, tuple[float, float]]:
    prims = load_primitives(cfg)
    models = load_models(cfg.models_dir)
    _, split = load_dataset(cfg)
    table = rmse_report(models, split["test"], prims)
    io.write_csv(cfg.reports_dir / "rmse.csv", ["row", "label", "rmse_mean_m", "rmse_std_m"],
                 [[row, RMSE_LABELS[row], *table[row]] for row in RMSE_ROWS])
    return table


def report_area(cfg: PipelineConfig) -> dict[str, float]:
    models = load_models(cfg.models_dir)
    baselines = load_baselines(cfg)
    table = area_report(models, baselines, cfg.P_margin)
    io.write_csv(cfg.reports_dir / "area.csv", ["margin", "normalized_area"],
                 [[k, table[k]] for k in AREA_ROWS])
    return table


def fault_for(model: PrimitiveExecutionModel, sim: SimConfig, sigma_multiple: float) -> FaultSpec:
    """Extra-bias fault along x whose steady-state offset is ``sigma_multiple`` model std devs."""
    sigma_x = float(np.mean(np.sqrt(model.var[:, 0])))
    return FaultSpec("extra_bias", sigma_multiple * sim.kp * sigma_x, onset=0.0)


def faulty_traces(cfg: PipelineConfig, prims, models, traces: Mapping[int, Sequence[ExecutionTrace]],
                  split_name: str) -> dict[int, list[ExecutionTrace]]:
    sim = cfg.sim_seeded
    salt = 1 if split_name == "train" else 2
    out = {}
    for pid, trs in sorted(traces.items()):
        fault = fault_for(models[pid], sim, cfg.fault_sigma_multiple)
        out[pid] = [
            run_triplet(tr.triplet, prims, sim, execution_seed(cfg.seed, pid, j, salt), [fault],
                        label=ABNORMAL, fault_relative_to_middle=True)
            for j, tr in enumerate(trs)
        ]
    return out


def confusion(models, normal, abnormal, config: MonitorConfig, method: str) -> dict[str, int]:
    """Counts keyed predicted_actual, e.g. ``abnormal_normal`` = false positives."""
    counts = {"normal_normal": 0, "normal_abnormal": 0, "abnormal_normal": 0, "abnormal_abnormal": 0}
    for actual, group in (("normal", normal), ("abnormal", abnormal)):
        for pid, trs in group.items():
            for tr in trs:
                pred = classify_execution(tr, models[pid], config, method)
                counts[f"{pred}_{actual}"] += 1
    return counts


def report_detection(cfg: PipelineConfig) -> dict[tuple[str, str], dict[str, int]]:
    prims = load_primitives(cfg)
    models = load_models(cfg.models_dir)
    _, split = load_dataset(cfg)
    out = {}
    rows = []
    for split_name in ("train", "test"):
        normal = {p: t for p, t in split[split_name].items() if p in models}
        abnormal = faulty_traces(cfg, prims, models, normal, split_name)
        for method in ("naive", "beta"):
            c = confusion(models, normal, abnormal, cfg.monitor, method)
            out[(method, split_name)] = c
            rows.append([method, split_name, "normal", c["normal_normal"], c["normal_abnormal"]])
            rows.append([method, split_name, "abnormal", c["abnormal_normal"], c["abnormal_abnormal"]])
    io.write_csv(cfg.reports_dir / "detection.csv",
                 ["method", "split", "predicted", "actual_normal", "actual_abnormal"], rows)
    return out


def report_svg(cfg: PipelineConfig) -> list[Path]:
    """Envelope plots per primitive: reference, model mean, P band and baseline bands."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    prims = load_primitives(cfg)
    models = load_models(cfg.models_dir)
    baselines = load_baselines(cfg)
    k = math.sqrt(chi2_quantile(cfg.P_margin, 1))
    paths = []
    for pid, m in sorted(models.items()):
        ref = prims[pid].state_at(m.times)
        fig, axes = plt.subplots(3, 1, figsize=(6, 7), sharex=True)
        for d, ax in enumerate(axes):
            r = ref[:, d]
            s_ri = math.sqrt(baselines.per_primitive[pid][d])
            s_rt = np.sqrt(baselines.time_varying[pid][:, d])
            ax.fill_between(m.times, -k * s_ri, k * s_ri, color="0.85", label="per-primitive")
            ax.fill_between(m.times, -k * s_rt, k * s_rt, color="0.6", label="time-varying")
            mu = m.mean[:, d] - r
            s = np.sqrt(m.var[:, d])
            ax.fill_between(m.times, mu - k * s, mu + k * s, color="tab:blue", alpha=0.4, label="model")
            ax.plot(m.times, mu, color="tab:blue")
            ax.axhline(0.0, color="k", lw=0.8)
            ax.set_ylabel("xyz"[d] + " residual [m]")
        axes[-1].set_xlabel("tau [s]")
        axes[0].legend(fontsize=7, loc="upper right")
        path = cfg.reports_dir / "svg" / f"envelope_{pid:03d}.svg"
        path.parent.mkdir(parents=True, exist_ok=True)
        plt.rcParams["svg.hashsalt"] = "primlearn"
        fig.savefig(path, metadata={"Date": None})
        plt.close(fig)
        paths.append(path)
    return paths


def run_all(cfg: PipelineConfig) -> dict:
    gen_primitives(cfg)
    collect(cfg)
    train(cfg)
    return {"rmse": report_rmse(cfg), "area": report_area(cfg), "detection": report_detection(cfg)}


# planning and monitoring ------------------------------------------------

def planning_margin(cfg: PipelineConfig, kind: str = "LearnedModel"):
    """Margin provider from trained artifacts; primitives without a model get the global sphere."""
    if kind == "None":
        return ZERO_MARGIN
    prims = load_primitives(cfg)
    baselines = load_baselines(cfg)
    models = load_models(cfg.models_dir) if kind == "LearnedModel" else None
    prov = margin_provider(kind, cfg.P_margin, baselines, models, prims)
    if prov.default is None:
        glob = margin_provider("GlobalSphere", cfg.P_margin, baselines)
        prov = replace(prov, default=glob.default)
    return prov
