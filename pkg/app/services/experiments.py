"""
experiments.py
Desk-scale study matrix: scheme comparison, LL-ratio sweep over G, shared-layers
ablation, K scaling and coupling comparison, plus sample dumps and row replay.

A sweep resolves every (combination, seed) job up front, runs them in a process
pool (inline when threads == 1) and aggregates rows with pandas. Each job only
needs the echoed spec, its combination index and its seed, so any row can be
regenerated on its own.
"""

from __future__ import annotations

import json
import logging
import math
import time
import traceback
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np
import pandas as pd

from app.errors import ConfigurationError, DivergenceError, InvertibilityError
from app.schemas.config import SCHEMES, DatasetConfig, ExperimentSpec, ModelConfig
from app.schemas.results import RESULT_COLUMNS, ResultRow
from app.services.data import Dataset, make_dataset
from app.services.flow_model import (
    FlowModel,
    build_model,
    check_round_trip,
    count_parameters,
    load_checkpoint,
    save_checkpoint,
)
from app.services.rng import make_rng
from app.services.tensor_io import write_bytes, write_tensor
from app.services.training import dequantize, train

logger = logging.getLogger(__name__)

GROUP_KEYS = ("combination", "scheme", "coupling", "groups", "flows", "shared_layers", "head_kernel")
ROUND_TRIP_TOLERANCE = 1e-6
DEFAULT_LLR_GROUPS = (4, 16, 64)
DEFAULT_K_LIST = (8, 16)


# ── Combinations ─────────────────────────────────────────────────────────────
@dataclass(frozen=True)
class Combination:
    index: int
    model: ModelConfig


def _shape_for(dataset: DatasetConfig) -> tuple[str, list[int]]:
    if dataset.kind == "seq1d":
        return "seq", [dataset.length]
    if dataset.kind == "image_patches":
        return "image", [dataset.channels, dataset.patch, dataset.patch]
    return "flat", [2]


def _default_embedding_dim(config: ModelConfig) -> int:
    area = math.lcm(*(rows * cols for _, rows, cols in config.grid_shapes()))
    if area == 0:
        raise ConfigurationError(f"G={config.groups} leaves an empty grid for data shape {config.data_shape}")
    return area * max(1, math.ceil(16 / area))


def scheme_config(base: ModelConfig, scheme: str, **overrides: Any) -> ModelConfig:
    """base re-targeted at another scheme, dropping fields that scheme forbids."""
    fields = base.model_dump()
    fields.update(overrides)
    fields["scheme"] = scheme
    if scheme == "nanoflow":
        bare = ModelConfig(**{**fields, "scheme": "naive", "embedding_dim": None, "injection": None,
                               "per_flow_projection": False})
        bare.check()
        fields["embedding_dim"] = fields.get("embedding_dim") or _default_embedding_dim(bare)
    else:
        fields.update(embedding_dim=None, injection=None, per_flow_projection=False)
    if scheme == "baseline":
        fields["shared_layers"] = 0
    return ModelConfig(**fields)


def resolve_combinations(spec: ExperimentSpec) -> list[Combination]:
    """Every swept model config, validated before anything runs."""
    layout, shape = _shape_for(spec.dataset)
    base = spec.model.model_copy(update={"layout": layout, "data_shape": shape})
    sweep = spec.sweep
    configs: list[ModelConfig] = []

    if spec.experiment == "train":
        configs = [scheme_config(base, base.scheme)]
    elif spec.experiment == "scheme_comparison":
        for scheme in sweep.schemes or list(SCHEMES):
            for hk in sweep.head_kernels or [base.head_kernel]:
                configs.append(scheme_config(base, scheme, head_kernel=hk))
    elif spec.experiment == "llr_sweep":
        for g in sweep.groups or list(DEFAULT_LLR_GROUPS):
            for scheme in sweep.schemes or ["baseline", "nanoflow"]:
                configs.append(scheme_config(base, scheme, groups=g))
    elif spec.experiment == "shared_layers_ablation":
        for scheme in sweep.schemes or ["naive", "nanoflow"]:
            for s in sweep.shared_layers or list(range(base.depth + 1)):
                configs.append(scheme_config(base, scheme, shared_layers=s))
    elif spec.experiment == "k_scaling":
        flows = sweep.flows or list(DEFAULT_K_LIST)
        if flows != sorted(flows):
            raise ConfigurationError(f"K list must be ascending, got {flows}")
        for k in flows:
            for scheme in sweep.schemes or ["baseline", "nanoflow"]:
                configs.append(scheme_config(base, scheme, flows=k))
    elif spec.experiment == "coupling_comparison":
        for coupling in sweep.couplings or ["affine", "rq_spline"]:
            for scheme in sweep.schemes or ["baseline", "nanoflow"]:
                configs.append(scheme_config(base, scheme, coupling=coupling))
    else:
        raise ConfigurationError(f"unknown experiment {spec.experiment!r}")

    for config in configs:
        config.check()
    return [Combination(index=i, model=c) for i, c in enumerate(configs)]


# ── Single run ───────────────────────────────────────────────────────────────
def spline_gate(model: FlowModel, dataset: Dataset, seed: int) -> float:
    """Round-trip error of the model with randomized heads; raises above tolerance."""
    rng = make_rng(seed, "spline-gate")
    perturbed = model.with_arrays({
        name: arr + (0.1 * rng.standard_normal(arr.shape) if ".head." in name else 0.0)
        for name, arr in model.store.arrays.items()
    })
    x = dataset.test[:64]
    if dataset.integer_valued:
        x = dequantize(x, dataset.levels, rng)
    error = check_round_trip(perturbed, x)
    if error > ROUND_TRIP_TOLERANCE:
        raise InvertibilityError(f"spline round trip error {error:.3g} exceeds {ROUND_TRIP_TOLERANCE:g}")
    logger.info("✅ spline round-trip gate passed | max_err=%.2e", error)
    return error


def _run_job(spec_json: str, index: int, seed: int, out_dir: str | None) -> dict[str, Any]:
    """Train one (combination, seed) and return its ResultRow as a dict."""
    spec = ExperimentSpec.model_validate_json(spec_json)
    combination = resolve_combinations(spec)[index]
    config = combination.model.model_copy(update={"seed": seed})
    train_config = spec.train.model_copy(update={"seed": seed})
    tag = f"c{index:02d}-s{seed}"

    started = time.perf_counter()
    dataset = make_dataset(spec.dataset)
    model = build_model(config)
    param_total = count_parameters(model).total
    if config.coupling == "rq_spline":
        spline_gate(model, dataset, seed)

    out = Path(out_dir) if out_dir else None
    row: dict[str, Any] = {
        "experiment": spec.experiment,
        "combination": index,
        "scheme": config.scheme,
        "coupling": config.coupling,
        "groups": config.groups,
        "flows": config.flows,
        "shared_layers": config.effective_shared_layers,
        "head_kernel": config.head_kernel,
        "seed": seed,
        "param_total": param_total,
    }
    try:
        result = train(
            model,
            dataset,
            train_config,
            metrics_path=out / "metrics" / f"{tag}.jsonl" if out else None,
        )
    except DivergenceError as exc:
        logger.error("❌ %s diverged: %s", tag, exc)
        row.update(eval_ll=None, eval_nll=None, bpd=None, diverged=True,
                   runtime_seconds=time.perf_counter() - started)
        return row

    final = result.metrics[-1]
    if out:
        save_checkpoint(result.model, out / "checkpoints" / tag)
    row.update(
        eval_ll=final.eval_ll,
        eval_nll=-final.eval_ll,
        bpd=final.bpd,
        diverged=False,
        runtime_seconds=time.perf_counter() - started,
    )
    return row


# ── Result table ─────────────────────────────────────────────────────────────
@dataclass
class ResultTable:
    experiment: str
    rows: list[ResultRow]
    verdicts: dict[str, Any] = field(default_factory=dict)
    extras: dict[str, pd.DataFrame] = field(default_factory=dict)

    def frame(self) -> pd.DataFrame:
        frame = pd.DataFrame([r.model_dump() for r in self.rows], columns=list(RESULT_COLUMNS))
        for col in ("eval_ll", "eval_nll", "bpd"):
            frame[col] = pd.to_numeric(frame[col], errors="coerce")
        return frame

    @property
    def diverged(self) -> int:
        return sum(r.diverged for r in self.rows)

    def aggregate(self) -> pd.DataFrame:
        """Mean and stderr over seeds per combination; diverged runs excluded and counted."""
        frame = self.frame()
        agg = (
            frame.groupby(list(GROUP_KEYS), sort=True)
            .agg(
                seeds=("eval_ll", "count"),
                diverged=("diverged", "sum"),
                param_total=("param_total", "first"),
                eval_ll_mean=("eval_ll", "mean"),
                eval_ll_stderr=("eval_ll", "sem"),
                eval_nll_mean=("eval_nll", "mean"),
                eval_nll_stderr=("eval_nll", "sem"),
                bpd_mean=("bpd", "mean"),
                bpd_stderr=("bpd", "sem"),
                runtime_mean=("runtime_seconds", "mean"),
            )
            .reset_index()
        )
        for col in ("eval_ll_stderr", "eval_nll_stderr", "bpd_stderr"):
            agg.loc[agg["seeds"] <= 1, col] = 0.0
        agg["diverged"] = agg["diverged"].astype(int)
        return agg

    def write(self, out_dir: str | Path) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_bytes(out / "results.csv", self.frame().to_csv(index=False).encode("utf-8"))
        write_bytes(out / "aggregate.csv", self.aggregate().to_csv(index=False).encode("utf-8"))
        for name, extra in self.extras.items():
            write_bytes(out / f"{name}.csv", extra.to_csv(index=False).encode("utf-8"))
        verdicts = json.dumps(self.verdicts, indent=2, sort_keys=True)
        write_bytes(out / "verdicts.json", verdicts.encode("utf-8"))
        return out


# ── Verdict helpers ──────────────────────────────────────────────────────────
def _cell(agg: pd.DataFrame, **keys: Any) -> pd.Series | None:
    mask = np.ones(len(agg), dtype=bool)
    for key, value in keys.items():
        mask &= (agg[key] == value).to_numpy()
    match = agg[mask]
    if match.empty or match["seeds"].iloc[0] == 0:
        return None
    return match.iloc[0]


def _leq_within_stderr(a: pd.Series, b: pd.Series, metric: str = "eval_nll") -> bool:
    joint = math.hypot(a[f"{metric}_stderr"], b[f"{metric}_stderr"])
    return bool(a[f"{metric}_mean"] <= b[f"{metric}_mean"] + joint)


def _strictly_below(a: pd.Series, b: pd.Series, metric: str = "eval_nll") -> bool:
    joint = math.hypot(a[f"{metric}_stderr"], b[f"{metric}_stderr"])
    return bool(b[f"{metric}_mean"] - a[f"{metric}_mean"] > joint)


def _scheme_verdicts(spec: ExperimentSpec, table: ResultTable) -> None:
    agg = table.aggregate()
    hk = spec.model.head_kernel
    cells = {s: _cell(agg, scheme=s, head_kernel=hk) for s in SCHEMES}
    ordered = ["baseline", "nanoflow", "decomp", "naive"]
    if all(cells[s] is not None for s in ordered):
        table.verdicts["ordering_within_stderr"] = all(
            _leq_within_stderr(cells[a], cells[b]) for a, b in zip(ordered, ordered[1:])
        )
        table.verdicts["nanoflow_beats_naive"] = _strictly_below(cells["nanoflow"], cells["naive"])
    if cells["nanoflow"] is not None and cells["baseline"] is not None:
        ratio = cells["nanoflow"]["param_total"] / cells["baseline"]["param_total"]
        table.verdicts["param_ratio_nanoflow_baseline"] = float(ratio)
        table.verdicts["param_ratio_below_0.2"] = bool(ratio < 0.2)


def _llr_verdicts(spec: ExperimentSpec, table: ResultTable) -> None:
    agg = table.aggregate()
    records = []
    for g in sorted(agg["groups"].unique()):
        base, nano = _cell(agg, scheme="baseline", groups=g), _cell(agg, scheme="nanoflow", groups=g)
        if base is None or nano is None:
            continue
        records.append({
            "groups": int(g),
            "ll_baseline": base["eval_ll_mean"],
            "ll_nanoflow": nano["eval_ll_mean"],
            "llr": base["eval_ll_mean"] - nano["eval_ll_mean"],
            "llr_stderr": math.hypot(base["eval_ll_stderr"], nano["eval_ll_stderr"]),
            "ll_baseline_stderr": base["eval_ll_stderr"],
        })
    llr = pd.DataFrame(records)
    table.extras["llr"] = llr
    if len(llr) >= 2:
        table.verdicts["llr_min_g_below_max_g"] = bool(llr["llr"].iloc[0] < llr["llr"].iloc[-1])
        table.verdicts["baseline_ll_nondecreasing_in_g"] = bool(all(
            llr["ll_baseline"].iloc[i] <= llr["ll_baseline"].iloc[i + 1]
            + math.hypot(llr["ll_baseline_stderr"].iloc[i], llr["ll_baseline_stderr"].iloc[i + 1])
            for i in range(len(llr) - 1)
        ))


def _shared_layers_verdicts(spec: ExperimentSpec, table: ResultTable) -> None:
    agg = table.aggregate()
    depth = spec.model.depth
    nano, naive = _cell(agg, scheme="nanoflow", shared_layers=depth), _cell(agg, scheme="naive", shared_layers=depth)
    if nano is not None and naive is not None:
        table.verdicts["full_sharing_nanoflow_leq_naive"] = _leq_within_stderr(nano, naive)
    curve = agg[["scheme", "shared_layers", "eval_nll_mean", "eval_nll_stderr", "param_total"]]
    table.extras["shared_layers_curve"] = curve.sort_values(["scheme", "shared_layers"]).reset_index(drop=True)


def _k_scaling_verdicts(spec: ExperimentSpec, table: ResultTable) -> None:
    agg = table.aggregate()
    combos = resolve_combinations(spec)
    ledgers = {
        (c.model.scheme, c.model.flows): count_parameters(build_model(c.model)) for c in combos
    }
    flows = sorted({k for _, k in ledgers})
    if len(flows) < 2:
        return
    k1, k2 = flows[0], flows[-1]
    if ("nanoflow", k1) in ledgers and ("nanoflow", k2) in ledgers:
        growth = ledgers[("nanoflow", k2)].total / ledgers[("nanoflow", k1)].total
        table.verdicts["nanoflow_param_growth"] = float(growth)
        table.verdicts["nanoflow_growth_sublinear"] = bool(growth < 1 + 0.1 * (k2 / k1 - 1))
    if ("baseline", k1) in ledgers and ("baseline", k2) in ledgers:
        table.verdicts["baseline_trunk_linear_in_k"] = bool(
            ledgers[("baseline", k2)].trunk * k1 == ledgers[("baseline", k1)].trunk * k2
        )
    cells = [_cell(agg, scheme="nanoflow", flows=k) for k in flows]
    if all(c is not None for c in cells):
        table.verdicts["nanoflow_nll_nonincreasing_in_k"] = all(
            _leq_within_stderr(b, a) for a, b in zip(cells, cells[1:])
        )


def _coupling_verdicts(spec: ExperimentSpec, table: ResultTable) -> None:
    agg = table.aggregate()
    table.verdicts["all_cells_finite"] = bool(
        len(agg) > 0 and agg["seeds"].gt(0).all() and np.isfinite(agg["eval_ll_mean"]).all()
    )


# ── Runners ──────────────────────────────────────────────────────────────────
def run_experiment(spec: ExperimentSpec, out_dir: str | Path | None = None, threads: int = 1) -> ResultTable:
    """Run every (combination, seed) of spec and aggregate the rows."""
    combinations = resolve_combinations(spec)
    jobs = [(c.index, seed) for c in combinations for seed in spec.seeds]
    spec_json = spec.model_dump_json()
    out = str(out_dir) if out_dir else None
    if out:
        write_bytes(Path(out) / "spec.json", spec.model_dump_json(indent=2).encode("utf-8"))

    logger.info("🚀 %s | combinations=%d seeds=%d threads=%d",
                spec.experiment, len(combinations), len(spec.seeds), threads)
    rows: list[dict[str, Any]] = []
    if threads <= 1:
        for index, seed in jobs:
            rows.append(_run_job(spec_json, index, seed, out))
    else:
        with ProcessPoolExecutor(max_workers=threads) as executor:
            futures = {executor.submit(_run_job, spec_json, i, s, out): (i, s) for i, s in jobs}
            for future in as_completed(futures):
                index, seed = futures[future]
                try:
                    rows.append(future.result())
                except Exception:
                    logger.error("💥 job c%02d-s%d failed\n%s", index, seed, traceback.format_exc())
                    raise

    rows.sort(key=lambda r: (r["combination"], r["seed"]))
    table = ResultTable(experiment=spec.experiment, rows=[ResultRow(**r) for r in rows])
    VERDICTS.get(spec.experiment, lambda s, t: None)(spec, table)
    if table.diverged:
        logger.warning("⚠️ %d diverged runs excluded from aggregates", table.diverged)
    if out:
        table.write(out)
    logger.info("✅ %s done | rows=%d verdicts=%s", spec.experiment, len(table.rows), table.verdicts)
    return table


VERDICTS: dict[str, Callable[[ExperimentSpec, ResultTable], None]] = {
    "scheme_comparison": _scheme_verdicts,
    "llr_sweep": _llr_verdicts,
    "shared_layers_ablation": _shared_layers_verdicts,
    "k_scaling": _k_scaling_verdicts,
    "coupling_comparison": _coupling_verdicts,
}


def _runner(experiment: str) -> Callable[..., ResultTable]:
    def run(spec: ExperimentSpec, out_dir: str | Path | None = None, threads: int = 1) -> ResultTable:
        if spec.experiment != experiment:
            spec = spec.model_copy(update={"experiment": experiment})
        return run_experiment(spec, out_dir, threads)

    run.__name__ = f"run_{experiment}"
    return run


run_scheme_comparison = _runner("scheme_comparison")
run_llr_sweep = _runner("llr_sweep")
run_shared_layers_ablation = _runner("shared_layers_ablation")
run_k_scaling = _runner("k_scaling")
run_coupling_comparison = _runner("coupling_comparison")


def replay_row(spec_echo: str | dict | ExperimentSpec, row: ResultRow) -> ResultRow:
    """Re-run one (combination, seed) from an echoed spec without writing files."""
    if isinstance(spec_echo, ExperimentSpec):
        spec = spec_echo
    elif isinstance(spec_echo, dict):
        spec = ExperimentSpec.model_validate(spec_echo)
    else:
        spec = ExperimentSpec.model_validate_json(spec_echo)
    return ResultRow(**_run_job(spec.model_dump_json(), row.combination, row.seed, None))


# ── Sample dumps ─────────────────────────────────────────────────────────────
def grid_layout(n: int) -> tuple[int, int]:
    """(columns, rows) of tiles for n samples."""
    if n <= 0:
        return 0, 0
    cols = math.ceil(math.sqrt(n))
    return cols, math.ceil(n / cols)


def _image_grid(samples: np.ndarray) -> np.ndarray:
    n, c, h, w = samples.shape
    cols, rows = grid_layout(n)
    pixels = np.clip(np.floor(samples * 256.0), 0, 255).astype(np.uint8)
    canvas = np.zeros((rows * h, cols * w, c), dtype=np.uint8)
    for i in range(n):
        r, col = divmod(i, cols)
        canvas[r * h:(r + 1) * h, col * w:(col + 1) * w] = pixels[i].transpose(1, 2, 0)
    return canvas


def encode_netpbm(canvas: np.ndarray) -> bytes:
    """8-bit binary PGM (1 channel) or PPM (3 channels)."""
    height, width, channels = canvas.shape
    if channels not in (1, 3):
        raise ConfigurationError(f"sample grids need 1 or 3 channels, got {channels}")
    magic = b"P5" if channels == 1 else b"P6"
    return magic + f"\n{width} {height}\n255\n".encode("ascii") + canvas.tobytes()


def dump_samples(
    checkpoint: str | Path,
    n: int,
    temperature: float,
    out: str | Path,
    seed: int = 0,
) -> list[Path]:
    """Write n samples as NFTN, plus a PGM/PPM tile grid for image models."""
    if n == 0:
        return []
    model = load_checkpoint(checkpoint)
    samples = model.sample(n, temperature, seed)
    out = Path(out)
    written = [write_tensor(out / "samples.nftn", samples)]
    if model.config.layout == "image":
        suffix = "pgm" if samples.shape[1] == 1 else "ppm"
        written.append(write_bytes(out / f"samples.{suffix}", encode_netpbm(_image_grid(samples))))
    logger.info("✅ wrote %d samples (T=%.2f) to %s", n, temperature, out)
    return written
