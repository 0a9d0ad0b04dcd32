"""Hourly feature assembly: binning, carry-forward, imputation and derived channels."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from . import schema
from .cohort import Encounter, binary_imv_label, prediction_timestamps
from .schema import DYNAMIC, N_COLUMNS, N_DYNAMIC, SCHEMA_VERSION, TSLM, VAR_INDEX

MAX_CARRY_HOURS = 24.0
BASELINE_HOURS = 72.0
FMX_MAGIC = b"FMX1"

OBSERVED, FILLED, IMPUTED = 0, 1, 2


class SchemaMismatch(ValueError):
    pass


# ---------------------------------------------------------------------------
# per-variable transforms


def _grouped_median(cells: np.ndarray, values: np.ndarray, n_cells: int) -> np.ndarray:
    """Median of ``values`` per integer cell id; NaN for empty cells."""
    out = np.full(n_cells, np.nan)
    if cells.size == 0:
        return out
    order = np.lexsort((values, cells))
    cells, values = cells[order], values[order]
    ids, start, size = np.unique(cells, return_index=True, return_counts=True)
    lo = values[start + (size - 1) // 2]
    hi = values[start + size // 2]
    out[ids] = 0.5 * (lo + hi)
    return out


def _cell_index(times: np.ndarray, grid: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    idx = np.searchsorted(grid, times, side="right") - 1
    ok = (idx >= 0) & (times < grid[np.clip(idx, 0, None)] + 1.0)
    return idx, ok


def bin_hourly(times: Sequence[float], values: Sequence[float], grid: np.ndarray) -> np.ndarray:
    """Median of the samples falling in each ``[t, t + 1)`` grid cell; NaN when empty."""
    grid = np.asarray(grid, dtype=float)
    if len(times) == 0 or grid.size == 0:
        return np.full(grid.shape, np.nan)
    t = np.asarray(times, dtype=float)
    v = np.asarray(values, dtype=float)
    idx, ok = _cell_index(t, grid)
    return _grouped_median(idx[ok], v[ok], grid.size)


def bin_encounter(e: Encounter, grid: np.ndarray) -> np.ndarray:
    """Hourly medians for every dynamic variable, shape ``(len(grid), 50)``."""
    grid = np.asarray(grid, dtype=float)
    cells, vals = [], []
    for obs in e.observations:
        if not obs.times:
            continue
        t = np.asarray(obs.times, dtype=float)
        idx, ok = _cell_index(t, grid)
        cells.append(idx[ok] * N_DYNAMIC + obs.variable_id)
        vals.append(np.asarray(obs.values, dtype=float)[ok])
    if not cells:
        return np.full((grid.size, N_DYNAMIC), np.nan)
    flat = _grouped_median(np.concatenate(cells), np.concatenate(vals), grid.size * N_DYNAMIC)
    return flat.reshape(grid.size, N_DYNAMIC)


def _last_observed(observed: np.ndarray) -> np.ndarray:
    n = observed.shape[0]
    steps = np.arange(n).reshape((n,) + (1,) * (observed.ndim - 1))
    pos = np.where(observed, steps, -1)
    return np.maximum.accumulate(pos, axis=0) if n else pos


def forward_fill(
    binned: np.ndarray, grid: np.ndarray, max_hours: float = MAX_CARRY_HOURS
) -> tuple[np.ndarray, np.ndarray]:
    """Carry the last observed value forward for at most ``max_hours``.

    Works on a single series or column-wise on ``(len(grid), k)`` arrays.
    Returns ``(values, tslm)``: observed cells have tslm 0; cells past the
    carry horizon stay NaN but still report their age. A variable never
    observed is aged as if last seen ``max_hours + 1`` hours before the grid
    opens.
    """
    if max_hours <= 0:
        raise ValueError("max_hours must be positive")
    binned = np.asarray(binned, dtype=float)
    grid = np.asarray(grid, dtype=float)
    if binned.shape[0] == 0:
        return binned.copy(), binned.copy()
    g = grid.reshape((grid.size,) + (1,) * (binned.ndim - 1))
    last = _last_observed(~np.isnan(binned))
    seen = last >= 0
    safe = np.where(seen, last, 0)
    age = np.where(seen, g - grid[safe], g - grid[0] + max_hours + 1.0)
    carried = np.take_along_axis(binned, safe, axis=0)
    values = np.where(seen & (age <= max_hours), carried, np.nan)
    return values, age


def derive_features(
    binned: np.ndarray, filled: np.ndarray, grid: np.ndarray, window: float = BASELINE_HOURS
) -> tuple[np.ndarray, np.ndarray]:
    """Baseline (mean of observed cells in the previous ``window`` hours) and trend.

    Baseline falls back to the current value when the window holds no
    observation. Trend is the current value minus the observation before the
    most recent one; 0 with a single observation, NaN when the current value
    is absent.
    """
    binned = np.asarray(binned, dtype=float)
    filled = np.asarray(filled, dtype=float)
    grid = np.asarray(grid, dtype=float)
    n = binned.shape[0]
    observed = ~np.isnan(binned)
    zero = np.zeros((1,) + binned.shape[1:])
    csum = np.concatenate([zero, np.cumsum(np.where(observed, binned, 0.0), axis=0)])
    ccnt = np.concatenate([zero, np.cumsum(observed, axis=0)])
    lo = np.searchsorted(grid, grid - window, side="left")
    hi = np.arange(n)  # exclusive: cells strictly before t
    cnt = ccnt[hi] - ccnt[lo]
    with np.errstate(invalid="ignore", divide="ignore"):
        baseline = np.where(cnt > 0, (csum[hi] - csum[lo]) / np.maximum(cnt, 1), filled)

    last = _last_observed(observed)
    # last observation strictly before cell i, then strictly before the latest one
    before = np.concatenate([np.full((1,) + binned.shape[1:], -1), last[:-1]])
    prev = np.take_along_axis(before, np.clip(last, 0, None), axis=0)
    prev = np.where(last >= 0, prev, -1)
    prev_val = np.take_along_axis(binned, np.clip(prev, 0, None), axis=0)
    trend = np.where(prev >= 0, filled - prev_val, 0.0)
    trend = np.where(np.isnan(filled), np.nan, trend)
    return baseline, trend


# ---------------------------------------------------------------------------
# static blocks

# (variable, [(cutoff, points), ...]) evaluated top-down; first hit wins
SOFA_TABLES = {
    "coagulation": ("platelets", "lt", [(20, 4), (50, 3), (100, 2), (150, 1)]),
    "liver": ("bilirubin", "ge", [(12.0, 4), (6.0, 3), (2.0, 2), (1.2, 1)]),
    "cns": ("gcs", "lt", [(6, 4), (10, 3), (13, 2), (15, 1)]),
    "renal": ("creatinine", "ge", [(5.0, 4), (3.5, 3), (2.0, 2), (1.2, 1)]),
}
SOFA_PF_TABLE = [(100, 4), (200, 3), (300, 2), (400, 1)]
SIRS_CUTOFFS = {
    "temperature": (36.0, 38.0),
    "heart_rate": 90.0,
    "resp_rate": 20.0,
    "paco2": 32.0,
    "wbc": (4.0, 12.0),
}


def _tiered(x: np.ndarray, op: str, table: list[tuple[float, int]]) -> np.ndarray:
    out = np.zeros(x.shape)
    done = np.isnan(x)
    for cut, pts in table:
        hit = ~done & ((x < cut) if op == "lt" else (x >= cut))
        out[hit] = pts
        done |= hit
    return out


def criteria_block(dyn: np.ndarray, vasopressor: np.ndarray) -> np.ndarray:
    """SIRS flags and SOFA subscores per row from carried-forward dynamic values.

    Absent inputs score as normal.
    """
    col = lambda name: dyn[:, VAR_INDEX[name]]  # noqa: E731
    with np.errstate(invalid="ignore"):
        t = col("temperature")
        lo, hi = SIRS_CUTOFFS["temperature"]
        s_temp = ((t < lo) | (t > hi)).astype(float)
        s_hr = (col("heart_rate") > SIRS_CUTOFFS["heart_rate"]).astype(float)
        s_rr = (
            (col("resp_rate") > SIRS_CUTOFFS["resp_rate"]) | (col("paco2") < SIRS_CUTOFFS["paco2"])
        ).astype(float)
        w = col("wbc")
        lo, hi = SIRS_CUTOFFS["wbc"]
        s_wbc = ((w < lo) | (w > hi)).astype(float)

        pf = col("pao2") / col("fio2")
        resp = _tiered(pf, "lt", SOFA_PF_TABLE)
        subs = {k: _tiered(col(v), op, tab) for k, (v, op, tab) in SOFA_TABLES.items()}
        cardio = np.where(vasopressor > 0, 2.0, (col("map") < 70).astype(float))
    sirs = np.stack([s_temp, s_hr, s_rr, s_wbc], axis=1)
    sofa = np.stack(
        [resp, subs["coagulation"], subs["liver"], cardio, subs["cns"], subs["renal"]], axis=1
    )
    return np.concatenate([sirs, sofa, sirs.sum(1, keepdims=True), sofa.sum(1, keepdims=True)], 1)


def medication_block(e: Encounter, rows: np.ndarray) -> np.ndarray:
    """Active flag per category: any event in the 24 hourly cells ending at the row's cell."""
    out = np.zeros((rows.size, schema.N_MEDICATIONS))
    for cat, t in e.medications:
        out[:, cat] = np.maximum(out[:, cat], ((rows + 1.0 - 24.0 <= t) & (t < rows + 1.0)))
    return out


# ---------------------------------------------------------------------------
# matrices


@dataclass
class FeatureMatrix:
    encounter_id: str
    timestamps: np.ndarray  # (n,)
    values: np.ndarray  # (n, N_COLUMNS); NaN allowed before imputation
    label: np.ndarray  # (n,) uint8
    mask: Optional[np.ndarray] = None  # (n, N_COLUMNS) provenance codes

    @property
    def tslm(self) -> np.ndarray:
        return self.values[:, TSLM]

    @property
    def n_rows(self) -> int:
        return self.timestamps.size


@dataclass
class ImputationStats:
    means: Optional[np.ndarray] = None

    @property
    def fitted(self) -> bool:
        return self.means is not None

    @classmethod
    def fit(cls, matrices: Iterable[FeatureMatrix]) -> "ImputationStats":
        total = np.zeros(N_COLUMNS)
        count = np.zeros(N_COLUMNS)
        for fm in matrices:
            ok = ~np.isnan(fm.values)
            total += np.where(ok, fm.values, 0.0).sum(0)
            count += ok.sum(0)
        means = np.where(count > 0, total / np.maximum(count, 1), 0.0)
        return cls(means=means)


def encounter_grid(e: Encounter, last: float) -> np.ndarray:
    """Hourly grid aligned to admission, reaching back at most 72 h before it."""
    first = e.icu_admit
    for obs in e.observations:
        if obs.times:
            first = min(first, obs.times[0])
    k0 = max(-int(BASELINE_HOURS), int(math.floor(first - e.icu_admit)))
    k1 = int(round(last - e.icu_admit))
    return e.icu_admit + np.arange(k0, k1 + 1, dtype=float)


def assemble_raw(e: Encounter, timestamps: Optional[Sequence[float]] = None) -> FeatureMatrix:
    """Feature rows for each prediction time, before mean imputation."""
    t0 = e.t0
    ts = np.asarray(
        prediction_timestamps(e, t0) if timestamps is None else list(timestamps), dtype=float
    )
    label = np.array([binary_imv_label(t, t0) for t in ts], dtype=np.uint8)
    values = np.full((ts.size, N_COLUMNS), np.nan)
    mask = np.zeros((ts.size, N_COLUMNS), dtype=np.uint8)
    if ts.size == 0:
        return FeatureMatrix(e.encounter_id, ts, values, label, mask)

    grid = encounter_grid(e, float(ts[-1]))
    rows = np.searchsorted(grid, ts - 1e-9)
    if not np.allclose(grid[rows], ts):
        raise SchemaMismatch("prediction times are not on the encounter's hourly grid")

    binned = bin_encounter(e, grid)
    filled, age = forward_fill(binned, grid)
    baseline, trend = derive_features(binned, filled, grid)
    dyn = filled[rows]
    values[:, schema.BASELINE] = baseline[rows]
    values[:, schema.TREND] = trend[rows]
    values[:, TSLM] = age[rows]
    mask[:, DYNAMIC] = np.where(age[rows] == 0, OBSERVED, FILLED)
    values[:, DYNAMIC] = dyn

    meds = medication_block(e, ts)
    n_demo, n_com = schema.N_DEMOGRAPHICS, schema.N_COMORBIDITIES
    values[:, :n_demo] = np.asarray(e.demographics, dtype=float)
    values[:, n_demo : n_demo + n_com] = np.asarray(e.comorbidities, dtype=float)
    m0 = n_demo + n_com
    values[:, m0 : m0 + schema.N_MEDICATIONS] = meds
    c0 = m0 + schema.N_MEDICATIONS
    values[:, c0 : c0 + schema.N_CRITERIA] = criteria_block(dyn, meds[:, 0])
    return FeatureMatrix(e.encounter_id, ts, values, label, mask)


def impute_mean(fm: FeatureMatrix, stats: ImputationStats) -> FeatureMatrix:
    """Replace remaining NaN cells with training-split column means."""
    if not stats.fitted:
        raise ValueError("imputation statistics have not been fitted")
    if fm.values.shape[1] != stats.means.size:
        raise SchemaMismatch("column count differs from fitted statistics")
    gap = np.isnan(fm.values)
    values = np.where(gap, stats.means[None, :], fm.values)
    mask = fm.mask.copy() if fm.mask is not None else np.zeros(values.shape, np.uint8)
    mask[gap] = IMPUTED
    return FeatureMatrix(fm.encounter_id, fm.timestamps.copy(), values, fm.label.copy(), mask)


def assemble(e: Encounter, stats: ImputationStats) -> FeatureMatrix:
    return impute_mean(assemble_raw(e), stats)


# ---------------------------------------------------------------------------
# standardization


@dataclass
class Standardizer:
    """Per-column z-scoring fitted on training rows; TSLM columns pass through as hours."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, x: np.ndarray) -> "Standardizer":
        mean = x.mean(0)
        std = x.std(0)
        std = np.where(std > 1e-12, std, 1.0)
        mean[TSLM] = 0.0
        std[TSLM] = 1.0
        return cls(mean, std)

    def transform(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.std


# ---------------------------------------------------------------------------
# FMX1 file format


def write_feature_matrix(path: str | Path, fm: FeatureMatrix) -> None:
    path = Path(path)
    n, c = fm.values.shape
    with open(path, "wb") as fh:
        fh.write(FMX_MAGIC)
        fh.write(struct.pack("<III", n, c, SCHEMA_VERSION))
        fh.write(np.ascontiguousarray(fm.values, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(fm.label, dtype=np.uint8).tobytes())
    sidecar = {
        "schema_version": SCHEMA_VERSION,
        "encounter_id": fm.encounter_id,
        "timestamps": [float(t) for t in fm.timestamps],
        "columns": list(schema.COLUMNS),
    }
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar, indent=1) + "\n")


def read_feature_matrix(path: str | Path) -> FeatureMatrix:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != FMX_MAGIC:
        raise SchemaMismatch(f"{path}: bad magic")
    if len(raw) < 16:
        raise SchemaMismatch(f"{path}: truncated header")
    n, c, version = struct.unpack_from("<III", raw, 4)
    if version != SCHEMA_VERSION:
        raise SchemaMismatch(f"{path}: schema version {version}, expected {SCHEMA_VERSION}")
    if c != N_COLUMNS:
        raise SchemaMismatch(f"{path}: {c} columns, expected {N_COLUMNS}")
    body = 16 + 4 * n * c
    if len(raw) != body + n:
        raise SchemaMismatch(f"{path}: truncated or oversized payload")
    values = np.frombuffer(raw, dtype="<f4", count=n * c, offset=16).reshape(n, c).astype(np.float64)
    label = np.frombuffer(raw, dtype=np.uint8, count=n, offset=body).copy()
    meta = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    if meta["columns"] != list(schema.COLUMNS):
        raise SchemaMismatch(f"{path}: column names differ from schema")
    ts = np.asarray(meta["timestamps"], dtype=float)
    if ts.size != n:
        raise SchemaMismatch(f"{path}: sidecar has {ts.size} timestamps for {n} rows")
    return FeatureMatrix(meta["encounter_id"], ts, values, label)
