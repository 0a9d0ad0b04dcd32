"""End-to-end optimization: Adam, early stopping and seeded random search."""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .evaluation import auroc
from .features import Standardizer
from .model import ModelParams, Variant, bce_loss, init_params, loss_and_grad, predict


class TrainingError(ValueError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 256
    max_epochs: int = 15
    patience: int = 3
    l2_coefficient: float = 1e-3
    dropout_rate: float = 0.3
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    hidden_dim: int = 32
    latent_dim: int = 32
    encoder_layers: int = 2
    projection_layers: int = 2
    pos_weight: float = 1.0

    def validate(self) -> None:
        if not self.learning_rate > 0:
            raise TrainingError("learning_rate must be positive")
        if self.batch_size < 1:
            raise TrainingError("batch_size must be at least 1")
        if self.patience < 1:
            raise TrainingError("patience must be at least 1")
        if self.max_epochs < 1:
            raise TrainingError("max_epochs must be at least 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise TrainingError("dropout_rate must be in [0, 1)")
        if self.l2_coefficient < 0 or self.pos_weight <= 0:
            raise TrainingError("l2_coefficient must be >= 0 and pos_weight > 0")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise TrainingError(f"unknown training options: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# data


@dataclass
class Dataset:
    x: Optional[np.ndarray]  # (n, width) EHR rows
    z: Optional[np.ndarray]  # (n, dim) image embeddings
    y: np.ndarray
    encounter_ids: np.ndarray
    timestamps: np.ndarray

    def __len__(self) -> int:
        return self.y.size

    def subset(self, idx) -> "Dataset":
        take = lambda a: None if a is None else a[idx]  # noqa: E731
        return Dataset(take(self.x), take(self.z), self.y[idx], self.encounter_ids[idx], self.timestamps[idx])

    def by_encounters(self, ids) -> "Dataset":
        return self.subset(np.isin(self.encounter_ids, list(ids)))


def split_encounters(
    encounter_ids: Sequence[str], fractions: Sequence[float], seed: int
) -> list[list[str]]:
    """Shuffle unique encounter ids and cut them into consecutive groups."""
    if not math.isclose(sum(fractions), 1.0) or any(f < 0 for f in fractions):
        raise TrainingError("split fractions must be non-negative and sum to 1")
    ids = sorted(set(encounter_ids))
    order = np.random.default_rng(seed).permutation(len(ids))
    ids = [ids[i] for i in order]
    cuts = np.round(np.cumsum(fractions) * len(ids)).astype(int)
    out, lo = [], 0
    for hi in cuts:
        out.append(sorted(ids[lo:hi]))
        lo = hi
    return out


def check_disjoint(*datasets: Dataset) -> None:
    seen: set = set()
    for d in datasets:
        ids = set(d.encounter_ids.tolist())
        if ids & seen:
            raise TrainingError("encounters appear in more than one split")
        seen |= ids


def standardize(train: Dataset, *others: Dataset) -> tuple[Standardizer, list[Dataset]]:
    """Fit z-scoring on the training rows and apply it to every split."""
    if train.x is None:
        return None, [train, *others]
    st = Standardizer.fit(train.x)
    out = []
    for d in (train, *others):
        out.append(replace(d, x=st.transform(d.x) if d.x is not None else None))
    return st, out


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adam_init(tensors: dict) -> AdamState:
    return AdamState(
        m={k: np.zeros_like(t) for k, t in tensors.items()},
        v={k: np.zeros_like(t) for k, t in tensors.items()},
    )


def adam_step(tensors: dict, grads: dict, state: AdamState, config: TrainConfig) -> AdamState:
    """One bias-corrected Adam update, applied in place to ``tensors``."""
    b1, b2 = config.adam_beta1, config.adam_beta2
    state.step += 1
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for k, t in tensors.items():
        g = grads[k]
        m = state.m[k]
        v = state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        t -= config.learning_rate * (m / c1) / (np.sqrt(v / c2) + config.adam_eps)
    return state


# ---------------------------------------------------------------------------
# training loop


def batched_predict(params: ModelParams, data: Dataset, batch: int = 8192) -> np.ndarray:
    out = np.empty(len(data))
    for lo in range(0, len(data), batch):
        sl = slice(lo, lo + batch)
        x = None if data.x is None or not params.variant.uses_ehr else data.x[sl]
        z = None if data.z is None or not params.variant.uses_cxr else data.z[sl]
        out[sl] = predict(params, x, z)
    return out


def _check_split(name: str, data: Dataset, variant: Variant) -> None:
    if len(data) == 0:
        raise TrainingError(f"{name} split is empty")
    if variant.uses_ehr and data.x is None:
        raise TrainingError(f"{name} split lacks EHR rows for {variant.value}")
    if variant.uses_cxr and data.z is None:
        raise TrainingError(f"{name} split lacks image embeddings for {variant.value}")


def train(
    variant: Variant | str,
    train_data: Dataset,
    val_data: Dataset,
    config: TrainConfig,
    *,
    n_static: Optional[int] = None,
    n_dynamic: Optional[int] = None,
    init: Optional[ModelParams] = None,
) -> tuple[ModelParams, list[dict]]:
    """Fit one variant; returns the checkpoint with the best validation AUROC.

    Expects standardized EHR rows. Stops once ``patience`` epochs pass
    without a validation improvement.
    """
    from . import schema

    variant = Variant(variant)
    config.validate()
    _check_split("training", train_data, variant)
    _check_split("validation", val_data, variant)
    check_disjoint(train_data, val_data)
    if np.unique(train_data.y).size < 2:
        raise TrainingError("training data contains a single class")
    if np.unique(val_data.y).size < 2:
        raise TrainingError("validation data contains a single class")

    if init is not None:
        params = init.with_variant(variant)
    else:
        params = init_params(
            variant,
            schema.STATIC_COUNT if n_static is None else n_static,
            schema.N_DYNAMIC if n_dynamic is None else n_dynamic,
            train_data.z.shape[1] if train_data.z is not None else 1,
            hidden_dim=config.hidden_dim,
            latent_dim=config.latent_dim,
            encoder_layers=config.encoder_layers,
            projection_layers=config.projection_layers,
            seed=config.seed,
        )
    tensors = params.tensors()
    state = adam_init(tensors)
    shuffle_rng = np.random.default_rng([config.seed, 1])
    dropout_rng = np.random.default_rng([config.seed, 2])

    x = train_data.x if variant.uses_ehr else None
    z = train_data.z if variant.uses_cxr else None
    y = train_data.y.astype(float)
    n = y.size

    best = params.copy()
    best_auc = -math.inf
    since_best = 0
    history = []
    for epoch in range(1, config.max_epochs + 1):
        order = shuffle_rng.permutation(n)
        losses = []
        for lo in range(0, n, config.batch_size):
            idx = order[lo : lo + config.batch_size]
            loss, grads = loss_and_grad(
                params,
                None if x is None else x[idx],
                None if z is None else z[idx],
                y[idx],
                pos_weight=config.pos_weight,
                l2=config.l2_coefficient,
                dropout=config.dropout_rate,
                rng=dropout_rng,
            )
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}")
            adam_step(tensors, grads, state, config)
            losses.append(loss * idx.size)
        p_val = batched_predict(params, val_data)
        val_auc = auroc(p_val, val_data.y)
        history.append(
            {
                "epoch": epoch,
                "train_loss": float(np.sum(losses) / n),
                "val_loss": bce_loss(p_val, val_data.y.astype(float)),
                "val_auroc": val_auc,
            }
        )
        if val_auc > best_auc:
            best_auc = val_auc
            best = params.copy()
            since_best = 0
        else:
            since_best += 1
            if since_best >= config.patience:
                break
    return best, history


# ---------------------------------------------------------------------------
# hyperparameter search


@dataclass
class SearchSpace:
    learning_rate: tuple[float, float] = (3e-4, 3e-3)
    batch_size: tuple[int, int] = (128, 512)
    hidden_dim: tuple[int, int] = (32, 128)
    l2_coefficient: tuple[float, float] = (1e-6, 1e-3)
    dropout_rate: tuple[float, float] = (0.0, 0.3)
    n_trials: int = 8
    seed: int = 0

    # log-uniform ranges; the rest are uniform
    LOG_SCALE = ("learning_rate", "batch_size", "l2_coefficient")
    INTEGER = ("batch_size", "hidden_dim")
    NAMES = ("learning_rate", "batch_size", "hidden_dim", "l2_coefficient", "dropout_rate")

    def validate(self) -> None:
        if self.n_trials < 1:
            raise TrainingError("n_trials must be at least 1")
        for name in self.NAMES:
            lo, hi = getattr(self, name)
            if lo > hi:
                raise TrainingError(f"{name}: empty range [{lo}, {hi}]")
            if name in self.LOG_SCALE and lo <= 0:
                raise TrainingError(f"{name}: log-scale range must be positive")
        lo, hi = self.dropout_rate
        if lo < 0 or hi >= 1:
            raise TrainingError("dropout_rate range must lie in [0, 1)")

    @classmethod
    def from_dict(cls, d: dict) -> "SearchSpace":
        d = dict(d)
        for k in cls.NAMES:
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)

    def sample(self, rng: np.random.Generator) -> dict:
        out = {}
        for name in self.NAMES:
            lo, hi = getattr(self, name)
            if name in self.LOG_SCALE:
                v = math.exp(rng.uniform(math.log(lo), math.log(hi)))
            else:
                v = rng.uniform(lo, hi)
            if lo == hi:
                v = lo
            if name in self.INTEGER:
                v = int(min(hi, max(lo, round(v))))
            out[name] = v
        return out


TRIAL_COLUMNS = (
    "trial_id", "learning_rate", "batch_size", "hidden_dim", "l2_coefficient", "dropout_rate",
    "val_auroc", "wall_time",
)


def random_search(
    space: SearchSpace,
    variant: Variant | str,
    train_data: Dataset,
    val_data: Dataset,
    base: Optional[TrainConfig] = None,
    log_path: Optional[str | Path] = None,
    **train_kw,
) -> tuple[TrainConfig, list[dict]]:
    """Seeded random search; returns the best config by validation AUROC and the trial log.

    ``train_kw`` is passed through to :func:`train` (e.g. ``n_static``).
    """
    space.validate()
    base = base or TrainConfig()
    rng = np.random.default_rng(space.seed)
    trials: list[dict] = []
    best_cfg, best_auc = None, -math.inf
    if log_path is not None and not Path(log_path).exists():
        with open(log_path, "w", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow(TRIAL_COLUMNS)
    for trial_id in range(space.n_trials):
        hp = space.sample(rng)
        cfg = replace(base, **hp, latent_dim=hp["hidden_dim"], seed=base.seed + trial_id)
        t = time.perf_counter()
        params, history = train(variant, train_data, val_data, cfg, **train_kw)
        val_auc = max(h["val_auroc"] for h in history)
        row = {"trial_id": trial_id, **hp, "val_auroc": val_auc, "wall_time": time.perf_counter() - t}
        trials.append(row)
        if log_path is not None:
            with open(log_path, "a", newline="") as fh:
                csv.writer(fh, lineterminator="\n").writerow([row[c] for c in TRIAL_COLUMNS])
        if val_auc > best_auc:
            best_cfg, best_auc = cfg, val_auc
    return best_cfg, trials
