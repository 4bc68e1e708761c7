"""Forecast metrics, report formatting, and the ablation harness.

Metrics are computed in de-normalized visit-count units on POI nodes,
averaged over the forecast horizon and evaluation windows.  MAPE masks
zero-target points and reports how many were masked.
"""

from __future__ import annotations

import csv
import statistics
from dataclasses import dataclass, field

import numpy as np

from .data import PoiMetadata, VisitSeriesDataset, split_dataset
from .errors import ConfigurationError
from .model import ABLATIONS, ModelConfig

METRIC_NAMES = ("mae", "mape", "rmse")


@dataclass
class MetricsReport:
    mae: float
    mape: float | None
    rmse: float
    n_windows: int
    mape_masked_count: int
    per_horizon_mae: list[float] = field(default_factory=list)
    per_horizon_mape: list = field(default_factory=list)
    per_horizon_rmse: list[float] = field(default_factory=list)
    skipped_windows: int = 0

    def __post_init__(self):
        if self.mae < 0 or self.rmse < 0:
            raise ConfigurationError("metrics must be non-negative")
        # RMSE >= MAE by Jensen's inequality; allow float rounding slack
        if self.rmse < self.mae - 1e-9:
            raise ConfigurationError(
                f"invalid report: rmse {self.rmse} < mae {self.mae}")

    def value(self, name: str):
        return getattr(self, name)


def compute_metrics(pred: np.ndarray, truth: np.ndarray,
                    skipped_windows: int = 0) -> MetricsReport:
    """MAE / MAPE / RMSE over (windows, POIs, horizon) arrays of counts."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape or pred.ndim != 3:
        raise ConfigurationError(
            f"prediction/truth shape mismatch: {pred.shape} vs {truth.shape}")
    err = pred - truth
    abs_err = np.abs(err)
    positive = truth > 0
    masked = int(truth.size - positive.sum())

    def mape_of(a, mask):
        if not np.any(mask):
            return None
        return float((a[mask] / truth_like[mask]).mean())

    truth_like = truth
    mae = float(abs_err.mean())
    rmse = float(np.sqrt((err ** 2).mean()))
    mape = mape_of(abs_err, positive)

    ph_mae, ph_mape, ph_rmse = [], [], []
    for h in range(pred.shape[2]):
        e = err[:, :, h]
        ph_mae.append(float(np.abs(e).mean()))
        ph_rmse.append(float(np.sqrt((e ** 2).mean())))
        m = positive[:, :, h]
        ph_mape.append(float((np.abs(e)[m] / truth[:, :, h][m]).mean())
                       if np.any(m) else None)
    return MetricsReport(mae=mae, mape=mape, rmse=rmse, n_windows=pred.shape[0],
                         mape_masked_count=masked, per_horizon_mae=ph_mae,
                         per_horizon_mape=ph_mape, per_horizon_rmse=ph_rmse,
                         skipped_windows=skipped_windows)


def relative_change(variant: float, base: float) -> float:
    """Signed percent change of a variant against the base value."""
    if base == 0:
        raise ConfigurationError("relative change undefined for a zero base")
    return (variant - base) / base * 100.0


def format_percent(value) -> str:
    return "" if value is None else f"{value:+.2f}%"


def _fmt(value) -> str:
    if value is None:
        return "n/a"
    return f"{value:.4f}"


# ---------------------------------------------------------------------------
# model-vs-baseline evaluation on the test split
# ---------------------------------------------------------------------------

@dataclass
class EvaluationResult:
    reports: dict[str, MetricsReport]            # method -> report
    improvement: dict[str, float | None]         # metric -> % vs best baseline
    n_test_windows: int


def evaluate_on_test(model, stats, ds: VisitSeriesDataset,
                     split=(0.70, 0.20, 0.10), stride: int = 1) -> EvaluationResult:
    """Evaluate a trained model and both baselines on the test split.

    All methods are scored on the same window set; baseline windows that
    lack lookback history are skipped and counted.
    """
    from . import baselines as bl
    from .training import plan_windows, predict_windows, window_truth
    from .data import zscore_apply

    inputs = model.inputs
    cfg = model.config
    w, h = cfg.window, cfg.horizon
    splits = split_dataset(ds, split, min_hours=w + h)
    first_test = splits.train.n_hours + splits.val.n_hours
    plan = plan_windows(first_test, splits.test.n_hours, w, h, stride)

    norm = zscore_apply(inputs.augmented, stats)
    poi_stats = stats.take_rows(np.arange(inputs.n_pois))
    pred_norm = predict_windows(model, norm, plan)
    poi_pred = (pred_norm[:, :inputs.n_pois]
                * poi_stats.std[None, :, None] + poi_stats.mean[None, :, None])
    truth = window_truth(inputs.augmented[:inputs.n_pois], plan)
    reports = {"bysgnn": compute_metrics(poi_pred, truth)}

    for method in bl.BASELINES:
        fc = bl.evaluate_baseline(ds, plan.starts, w, h, method)
        lookup = {s: i for i, s in enumerate(plan.starts)}
        rows = [lookup[s] for s in fc.used_starts]
        reports[method] = compute_metrics(fc.predictions, truth[rows],
                                          skipped_windows=fc.skipped)

    improvement = {}
    for metric in METRIC_NAMES:
        model_v = reports["bysgnn"].value(metric)
        base_vs = [reports[m].value(metric) for m in bl.BASELINES]
        base_vs = [v for v in base_vs if v is not None]
        if model_v is None or not base_vs or min(base_vs) == 0:
            improvement[metric] = None
        else:
            best = min(base_vs)
            improvement[metric] = (best - model_v) / best * 100.0
    return EvaluationResult(reports=reports, improvement=improvement,
                            n_test_windows=len(plan))


def evaluate_checkpoint(checkpoint, ds: VisitSeriesDataset) -> EvaluationResult:
    model, _ = checkpoint.build_model(ds)
    return evaluate_on_test(model, checkpoint.stats, ds,
                            split=checkpoint.train_config.split,
                            stride=checkpoint.train_config.stride)


def format_evaluation_table(result: EvaluationResult) -> str:
    """Aligned text table: one row per method, MAE/MAPE/RMSE columns."""
    names = {"bysgnn": "BysGNN", "naive_seasonal": "Naive Seasonal",
             "historical_average": "Historical Average"}
    headers = ["method", "mae", "mape", "rmse", "n_windows",
               "mape_masked_count", "skipped_windows"]
    rows = []
    for key, report in result.reports.items():
        rows.append([names.get(key, key), _fmt(report.mae), _fmt(report.mape),
                     _fmt(report.rmse), str(report.n_windows),
                     str(report.mape_masked_count), str(report.skipped_windows)])
    rows.append(["improvement vs best baseline",
                 format_percent(result.improvement["mae"]),
                 format_percent(result.improvement["mape"]),
                 format_percent(result.improvement["rmse"]), "", "", ""])
    widths = [max(len(r[i]) for r in rows + [headers]) for i in range(len(headers))]
    lines = ["  ".join(h.ljust(w) for h, w in zip(headers, widths))]
    lines += ["  ".join(c.ljust(w) for c, w in zip(row, widths)) for row in rows]
    return "\n".join(lines) + "\n"


def write_evaluation_csv(path, result: EvaluationResult) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "mae", "mape", "rmse", "n_windows",
                         "mape_masked_count", "skipped_windows"])
        for key, report in result.reports.items():
            writer.writerow([key, _csv_num(report.mae), _csv_num(report.mape),
                             _csv_num(report.rmse), report.n_windows,
                             report.mape_masked_count, report.skipped_windows])
        writer.writerow(["improvement_vs_best_baseline",
                         _csv_num(result.improvement["mae"]),
                         _csv_num(result.improvement["mape"]),
                         _csv_num(result.improvement["rmse"]), "", "", ""])


def _csv_num(value) -> str:
    return "" if value is None else f"{value:.10g}"


# ---------------------------------------------------------------------------
# ablation harness
# ---------------------------------------------------------------------------

FULL_VARIANT = "full"


@dataclass
class AblationRow:
    variant: str
    seeds: list[int]
    median: dict[str, float | None]
    per_seed: list[MetricsReport]
    change_vs_full: dict[str, float | None] = field(default_factory=dict)


def run_ablation(ds: VisitSeriesDataset, metadata: list[PoiMetadata],
                 model_cfg: ModelConfig, base_cfg, variants, seeds,
                 progress=None) -> list[AblationRow]:
    """One full train+eval per (variant, seed); medians plus relative change
    against the full model, shaped like the published ablation tables."""
    import dataclasses as dc

    from .training import train

    variants = list(variants)
    unknown = [v for v in variants if v not in ABLATIONS]
    if unknown:
        raise ConfigurationError(f"unknown ablation variants {unknown}")

    rows: list[AblationRow] = []
    for variant in [FULL_VARIANT] + variants:
        ablations = () if variant == FULL_VARIANT else (variant,)
        per_seed = []
        for seed in seeds:
            cfg = dc.replace(base_cfg, seed=int(seed), ablations=ablations)
            if progress is not None:
                progress(variant, int(seed))
            result = train(ds, metadata, model_cfg, cfg, out_dir=None)
            outcome = evaluate_on_test(result.model, result.stats, ds,
                                       split=cfg.split, stride=cfg.stride)
            per_seed.append(outcome.reports["bysgnn"])
        median = {}
        for metric in METRIC_NAMES:
            values = [r.value(metric) for r in per_seed]
            median[metric] = (None if any(v is None for v in values)
                              else float(statistics.median(values)))
        rows.append(AblationRow(variant=variant, seeds=[int(s) for s in seeds],
                                median=median, per_seed=per_seed))

    full = rows[0]
    for row in rows:
        for metric in METRIC_NAMES:
            base, value = full.median[metric], row.median[metric]
            row.change_vs_full[metric] = (
                None if row.variant == FULL_VARIANT or base in (None, 0.0)
                or value is None else relative_change(value, base))
    return rows


def format_ablation_table(rows: list[AblationRow]) -> str:
    """Metric-major table with a relative-change line under each value row,
    mirroring the published ablation-table layout."""
    variants = [r.variant for r in rows]
    header = ["metric"] + variants
    col_w = [max(len(h), 12) for h in header]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, col_w))]
    for metric in METRIC_NAMES:
        value_cells = [metric] + [_fmt(r.median[metric]) for r in rows]
        change_cells = [""] + [("--" if r.variant == FULL_VARIANT
                                else format_percent(r.change_vs_full[metric]))
                               for r in rows]
        lines.append("  ".join(c.ljust(w) for c, w in zip(value_cells, col_w)))
        lines.append("  ".join(c.ljust(w) for c, w in zip(change_cells, col_w)))
    return "\n".join(lines) + "\n"


def write_ablation_csv(path, rows: list[AblationRow]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["variant", "seeds", "median_mae", "median_mape",
                         "median_rmse", "change_mae_pct", "change_mape_pct",
                         "change_rmse_pct"])
        for row in rows:
            writer.writerow([
                row.variant, ";".join(str(s) for s in row.seeds),
                _csv_num(row.median["mae"]), _csv_num(row.median["mape"]),
                _csv_num(row.median["rmse"]),
                _csv_num(row.change_vs_full.get("mae")),
                _csv_num(row.change_vs_full.get("mape")),
                _csv_num(row.change_vs_full.get("rmse"))])
