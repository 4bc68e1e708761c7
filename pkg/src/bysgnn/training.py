"""Optimization loop: RMSProp with step decay, mini-batch training over
stride-1 windows, best-validation checkpointing, and a CSV training log.

Loss is computed on every node (meta-node targets are aggregated from the
target window); validation metrics are reported on POI nodes only, in
de-normalized units.
"""

from __future__ import annotations

import dataclasses
import io
import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import (NormalizationStats, PoiMetadata, VisitSeriesDataset,
                   split_dataset, window_count, zscore_apply, zscore_fit)
from .errors import ConfigurationError, DivergenceError
from .model import (BusynessForecaster, ModelConfig, PreparedInputs,
                    prepare_inputs, validate_ablations)
from .metanodes import CategoryIndex
from .runtime import enable_fast_allocator

CHECKPOINT_VERSION = 1
LOG_HEADER = ["epoch", "lr", "train_loss", "val_loss", "val_mae", "val_mape", "val_rmse"]
LOSS_KINDS = ("mae", "mse")


@dataclass(frozen=True)
class TrainConfig:
    """Optimization protocol; defaults are the published protocol values."""
    lr0: float = 0.001
    decay_factor: float = 0.2
    decay_every: int = 10
    epochs: int = 40
    batch_size: int = 32
    seed: int = 0
    loss_kind: str = "mae"
    ablations: tuple[str, ...] = ()
    rho: float = 0.99
    eps: float = 1e-8
    split: tuple[float, float, float] = (0.70, 0.20, 0.10)
    stride: int = 1

    def validate(self) -> None:
        if self.loss_kind not in LOSS_KINDS:
            raise ConfigurationError(f"loss_kind must be one of {LOSS_KINDS}")
        if self.epochs < 1 or self.batch_size < 1 or self.stride < 1:
            raise ConfigurationError("epochs, batch_size, and stride must be positive")
        if self.lr0 <= 0 or not 0 < self.decay_factor <= 1 or self.decay_every < 1:
            raise ConfigurationError("invalid learning-rate schedule")
        validate_ablations(self.ablations)


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    """Step decay: lr0 * factor^floor(epoch / every)."""
    if epoch < 0:
        raise ConfigurationError("epoch must be >= 0")
    return cfg.lr0 * cfg.decay_factor ** (epoch // cfg.decay_every)


class Rmsprop:
    """RMSProp: s <- rho*s + (1-rho)*g^2; theta <- theta - lr*g/(sqrt(s)+eps)."""

    def __init__(self, store, rho: float = 0.99, eps: float = 1e-8):
        self.store = store
        self.rho = rho
        self.eps = eps
        self.sq = {p.name: np.zeros_like(p.data) for p in store.parameters()}

    def step(self, lr: float) -> None:
        for p in self.store.parameters():
            s = self.sq[p.name]
            if p.grad is None:
                s *= self.rho
                continue
            g = p.grad
            if not np.all(np.isfinite(g)):
                raise DivergenceError(f"non-finite gradient in parameter {p.name}")
            s *= self.rho
            s += (1.0 - self.rho) * g * g
            p.data -= lr * g / (np.sqrt(s) + self.eps)


def loss_tensor(pred: Tensor, target: np.ndarray, kind: str) -> Tensor:
    diff = pred - Tensor(target)
    if kind == "mae":
        return diff.abs().mean()
    if kind == "mse":
        return (diff * diff).mean()
    raise ConfigurationError(f"unknown loss kind {kind!r}")


# ---------------------------------------------------------------------------
# window batching over a normalized augmented matrix
# ---------------------------------------------------------------------------

@dataclass
class WindowPlan:
    """Input-window start offsets (hours, relative to the full matrix)."""
    starts: np.ndarray
    window: int
    horizon: int

    def __len__(self):
        return len(self.starts)


def plan_windows(first: int, length: int, window: int, horizon: int,
                 stride: int) -> WindowPlan:
    count = window_count(length, window, horizon, stride)
    starts = first + stride * np.arange(count)
    return WindowPlan(starts=starts, window=window, horizon=horizon)


def gather_batch(norm: np.ndarray, starts, window: int, horizon: int):
    """Stack (B, S, T) inputs and (B, S, H) targets for the given starts."""
    xs = np.stack([norm[:, s:s + window] for s in starts])
    ys = np.stack([norm[:, s + window:s + window + horizon] for s in starts])
    return xs, ys


def predict_windows(model: BusynessForecaster, norm: np.ndarray, plan: WindowPlan,
                    batch_size: int = 64) -> np.ndarray:
    """Forward every window without gradients; returns (W, S, H) normalized."""
    outputs = []
    with ad.no_grad():
        for i in range(0, len(plan), batch_size):
            chunk = plan.starts[i:i + batch_size]
            xs, _ = gather_batch(norm, chunk, plan.window, plan.horizon)
            outputs.append(model.forward(xs).data)
    return np.concatenate(outputs, axis=0)


def window_truth(raw: np.ndarray, plan: WindowPlan) -> np.ndarray:
    """Raw-count targets (W, S, H) aligned with a window plan."""
    return np.stack([raw[:, s + plan.window:s + plan.window + plan.horizon]
                     for s in plan.starts])


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    model_config: ModelConfig
    train_config: TrainConfig
    params: dict[str, np.ndarray]
    stats: NormalizationStats
    poi_ids: list[str]
    labels: list[str]
    categories: list[str]
    membership: np.ndarray | None
    raw_semantic: np.ndarray | None
    spatial_sim: np.ndarray | None
    spatial_sigma: float | None
    spatial_tau: float | None
    best_epoch: int
    extra: dict = field(default_factory=dict)

    def rebuild_inputs(self, ds: VisitSeriesDataset) -> PreparedInputs:
        """Recreate model inputs for a dataset with the same node set."""
        from .metanodes import aggregate_by_category
        if list(ds.poi_ids) != list(self.poi_ids):
            raise ConfigurationError("dataset poi_ids do not match checkpoint")
        if self.membership is not None:
            index = CategoryIndex(n_pois=len(self.poi_ids),
                                  categories=list(self.categories),
                                  membership=self.membership)
            augmented = aggregate_by_category(ds.visits, index).values
        else:
            index = None
            augmented = np.array(ds.visits, dtype=np.float64)
        return PreparedInputs(index=index, augmented=augmented, labels=self.labels,
                              raw_semantic=self.raw_semantic, spatial=None,
                              spatial_sim=self.spatial_sim, n_pois=len(self.poi_ids))

    def build_model(self, ds: VisitSeriesDataset) -> tuple[BusynessForecaster, PreparedInputs]:
        inputs = self.rebuild_inputs(ds)
        model = BusynessForecaster(self.model_config, inputs,
                                   ablations=self.train_config.ablations,
                                   seed=self.train_config.seed)
        model.store.load_state(self.params)
        return model, inputs


def save_checkpoint(path, model: BusynessForecaster, stats: NormalizationStats,
                    model_cfg: ModelConfig, train_cfg: TrainConfig,
                    poi_ids: list[str], best_epoch: int, extra: dict | None = None) -> None:
    inputs = model.inputs
    meta = {
        "format_version": CHECKPOINT_VERSION,
        "model_config": dataclasses.asdict(model_cfg),
        "train_config": dataclasses.asdict(train_cfg),
        "poi_ids": list(poi_ids),
        "labels": list(model.labels),
        "categories": [] if inputs.index is None else list(inputs.index.categories),
        "has_membership": inputs.index is not None,
        "has_semantic": inputs.raw_semantic is not None,
        "has_spatial": inputs.spatial_sim is not None,
        "spatial_sigma": None if inputs.spatial is None else inputs.spatial.sigma,
        "spatial_tau": None if inputs.spatial is None else inputs.spatial.tau,
        "stats_floored": list(stats.floored),
        "best_epoch": best_epoch,
        "param_names": model.store.names(),
        "param_shapes": {n: list(model.store[n].data.shape) for n in model.store.names()},
        "extra": extra or {},
    }
    arrays = {f"param/{name}": p for name, p in model.store.state_arrays().items()}
    arrays["stats_mean"] = stats.mean
    arrays["stats_std"] = stats.std
    if inputs.index is not None:
        arrays["membership"] = inputs.index.membership
    if inputs.raw_semantic is not None:
        arrays["raw_semantic"] = inputs.raw_semantic
    if inputs.spatial_sim is not None:
        arrays["spatial_sim"] = inputs.spatial_sim
    _write_npz(path, meta, arrays)


def _write_npz(path, meta: dict, arrays: dict) -> None:
    # np.savez plus a json member, written deterministically (no timestamps)
    buf = {name: arr for name, arr in arrays.items()}
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        zf.writestr(zipfile.ZipInfo("meta.json"), json.dumps(meta, sort_keys=True, indent=1))
        for name in sorted(buf):
            stream = io.BytesIO()
            np.save(stream, np.asarray(buf[name]), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(name + ".npy"), stream.getvalue())


def load_checkpoint(path) -> Checkpoint:
    with zipfile.ZipFile(path, "r") as zf:
        meta = json.loads(zf.read("meta.json"))
        if meta.get("format_version") != CHECKPOINT_VERSION:
            raise ConfigurationError(
                f"unsupported checkpoint version {meta.get('format_version')}")

        def read(name):
            with zf.open(name + ".npy") as fh:
                return np.load(io.BytesIO(fh.read()), allow_pickle=False)

        params = {name: read(f"param/{name}") for name in meta["param_names"]}
        stats = NormalizationStats(mean=read("stats_mean"), std=read("stats_std"),
                                   floored=list(meta["stats_floored"]))
        membership = read("membership") if meta["has_membership"] else None
        raw_semantic = read("raw_semantic") if meta["has_semantic"] else None
        spatial_sim = read("spatial_sim") if meta["has_spatial"] else None
    model_cfg = ModelConfig(**meta["model_config"])
    tc = dict(meta["train_config"])
    tc["ablations"] = tuple(tc.get("ablations", ()))
    tc["split"] = tuple(tc.get("split", (0.70, 0.20, 0.10)))
    train_cfg = TrainConfig(**tc)
    return Checkpoint(model_config=model_cfg, train_config=train_cfg, params=params,
                      stats=stats, poi_ids=meta["poi_ids"], labels=meta["labels"],
                      categories=meta["categories"], membership=membership,
                      raw_semantic=raw_semantic, spatial_sim=spatial_sim,
                      spatial_sigma=meta["spatial_sigma"], spatial_tau=meta["spatial_tau"],
                      best_epoch=meta["best_epoch"], extra=meta.get("extra", {}))


# ---------------------------------------------------------------------------
# the training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    log_rows: list[dict]
    best_epoch: int
    best_val_mae: float
    checkpoint_path: str | None
    stats: NormalizationStats
    n_train_windows: int
    n_val_windows: int
    model: "BusynessForecaster" = None   # holds the best-validation weights
    inputs: "PreparedInputs" = None


def format_log_csv(rows: list[dict]) -> str:
    lines = [",".join(LOG_HEADER)]
    for row in rows:
        lines.append(",".join(_format_cell(row.get(k)) for k in LOG_HEADER))
    return "\n".join(lines) + "\n"


def _format_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.10g}"
    return str(value)


def train(ds: VisitSeriesDataset, metadata: list[PoiMetadata],
          model_cfg: ModelConfig, train_cfg: TrainConfig,
          out_dir=None, embeddings_path=None, distances_path=None,
          region: str | None = None, progress=None) -> TrainResult:
    """Run the full optimization protocol and write checkpoint + log.

    Deterministic for a fixed seed in single-threaded mode.  On divergence
    the last good epoch checkpoint is written before DivergenceError.
    """
    from .evaluation import compute_metrics

    enable_fast_allocator()
    model_cfg.validate()
    train_cfg.validate()
    w, h = model_cfg.window, model_cfg.horizon

    inputs = prepare_inputs(ds, metadata, model_cfg, train_cfg.ablations,
                            embeddings_path=embeddings_path,
                            distances_path=distances_path, region=region)
    splits = split_dataset(ds, train_cfg.split, min_hours=w + h)
    n_train, n_val = splits.train.n_hours, splits.val.n_hours

    stats = zscore_fit(inputs.augmented[:, :n_train])
    norm = zscore_apply(inputs.augmented, stats)
    poi_rows = np.arange(inputs.n_pois)
    poi_stats = stats.take_rows(poi_rows)

    train_plan = plan_windows(0, n_train, w, h, train_cfg.stride)
    val_plan = (plan_windows(n_train, n_val, w, h, train_cfg.stride)
                if n_val >= w + h else None)
    val_truth = None if val_plan is None else window_truth(inputs.augmented[:inputs.n_pois], val_plan)

    model = BusynessForecaster(model_cfg, inputs, ablations=train_cfg.ablations,
                               seed=train_cfg.seed)
    optimizer = Rmsprop(model.store, rho=train_cfg.rho, eps=train_cfg.eps)
    rng = np.random.default_rng(train_cfg.seed)

    out_dir = Path(out_dir) if out_dir is not None else None
    ckpt_path = None if out_dir is None else out_dir / "checkpoint.npz"
    log_rows: list[dict] = []
    best_epoch, best_val_mae = -1, float("inf")
    best_params: dict[str, np.ndarray] | None = None
    last_good: dict[str, np.ndarray] | None = None

    def snapshot():
        return {name: arr.copy() for name, arr in model.store.state_arrays().items()}

    def write_outputs(params: dict[str, np.ndarray], epoch: int):
        if out_dir is None:
            return
        out_dir.mkdir(parents=True, exist_ok=True)
        current = snapshot()
        model.store.load_state(params)
        save_checkpoint(ckpt_path, model, stats, model_cfg, train_cfg,
                        ds.poi_ids, epoch,
                        extra={"n_train_hours": n_train, "n_val_hours": n_val})
        model.store.load_state(current)
        (out_dir / "training_log.csv").write_text(format_log_csv(log_rows))

    for epoch in range(train_cfg.epochs):
        lr = lr_schedule(epoch, train_cfg)
        order = rng.permutation(len(train_plan))
        epoch_losses = []
        for i in range(0, len(order), train_cfg.batch_size):
            starts = train_plan.starts[order[i:i + train_cfg.batch_size]]
            xs, ys = gather_batch(norm, starts, w, h)
            pred = model.forward(xs)
            loss = loss_tensor(pred, ys, train_cfg.loss_kind)
            value = float(loss.data)
            if not np.isfinite(value):
                if last_good is not None:
                    write_outputs(last_good, epoch - 1)
                raise DivergenceError(f"training loss became {value} at epoch {epoch}")
            ad.backward(loss)
            optimizer.step(lr)
            model.store.zero_grad()
            epoch_losses.append(value)

        row = {"epoch": epoch, "lr": lr,
               "train_loss": float(np.mean(epoch_losses)),
               "val_loss": None, "val_mae": None, "val_mape": None, "val_rmse": None}
        if val_plan is not None:
            val_pred_norm = predict_windows(model, norm, val_plan)
            val_target_norm = np.stack(
                [norm[:, s + w:s + w + h] for s in val_plan.starts])
            diff = val_pred_norm - val_target_norm
            row["val_loss"] = float(np.mean(np.abs(diff)) if train_cfg.loss_kind == "mae"
                                    else np.mean(diff * diff))
            poi_pred = (val_pred_norm[:, :inputs.n_pois]
                        * poi_stats.std[None, :, None] + poi_stats.mean[None, :, None])
            report = compute_metrics(poi_pred, val_truth)
            row["val_mae"], row["val_mape"], row["val_rmse"] = \
                report.mae, report.mape, report.rmse
            selection = report.mae
        else:
            selection = row["train_loss"]
        log_rows.append(row)
        if progress is not None:
            progress(row)

        if selection < best_val_mae:
            best_val_mae = selection
            best_epoch = epoch
            best_params = snapshot()
        last_good = snapshot()

    write_outputs(best_params if best_params is not None else snapshot(), best_epoch)
    if best_params is not None:
        model.store.load_state(best_params)
    return TrainResult(log_rows=log_rows, best_epoch=best_epoch,
                       best_val_mae=best_val_mae,
                       checkpoint_path=None if ckpt_path is None else str(ckpt_path),
                       stats=stats, n_train_windows=len(train_plan),
                       n_val_windows=0 if val_plan is None else len(val_plan),
                       model=model, inputs=inputs)
