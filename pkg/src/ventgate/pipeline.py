"""Cohort-to-dataset plumbing shared by the CLI and experiments."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .cohort import Encounter, apply_inclusion_criteria, binary_imv_label, severity_points
from .cxr import AlignedSample, CxrEmbeddingTable, align
from .features import FeatureMatrix, ImputationStats, assemble_raw, impute_mean
from .model import Variant
from .schema import DYNAMIC, VAR_INDEX
from .training import Dataset, TrainConfig, batched_predict, split_encounters, standardize, train


@dataclass
class Featurized:
    matrices: dict[str, FeatureMatrix]  # imputed, by encounter id
    aligned: dict[str, list[AlignedSample]]
    t0: dict[str, Optional[float]]
    stats: ImputationStats
    dropped: Counter = field(default_factory=Counter)


def include(encounters: Sequence[Encounter]) -> tuple[list[Encounter], Counter]:
    kept, reasons = [], Counter()
    for e in encounters:
        ok, why = apply_inclusion_criteria(e)
        if ok:
            kept.append(e)
        else:
            for r in why:
                reasons[r.value] += 1
    return kept, reasons


def featurize(
    encounters: Sequence[Encounter],
    train_ids: set[str],
    table: Optional[CxrEmbeddingTable] = None,
) -> Featurized:
    """Assemble, impute (training means) and align every encounter.

    ``table`` is only used to check that every study resolves to an embedding.
    """
    raws = {e.encounter_id: assemble_raw(e) for e in encounters}
    stats = ImputationStats.fit(fm for eid, fm in raws.items() if eid in train_ids)
    matrices = {eid: impute_mean(fm, stats) for eid, fm in raws.items()}
    aligned: dict[str, list[AlignedSample]] = {}
    dropped: Counter = Counter()
    for e in encounters:
        fm = matrices[e.encounter_id]
        aligned[e.encounter_id] = align(e, fm.timestamps, table)
        dropped["unmatched_cxr"] += fm.n_rows - len(aligned[e.encounter_id])
    return Featurized(matrices, aligned, {e.encounter_id: e.t0 for e in encounters}, stats, dropped)


def to_dataset(
    feats: Featurized,
    ids: Sequence[str],
    table: Optional[CxrEmbeddingTable],
    aligned_only: bool = True,
) -> Dataset:
    xs, zs, ys, es, ts = [], [], [], [], []
    for eid in ids:
        fm = feats.matrices[eid]
        if aligned_only and table is not None:
            samples = feats.aligned[eid]
            rows = np.array([s.row for s in samples], dtype=int)
            if rows.size:
                zs.append(np.stack([table[s.embedding_key] for s in samples]).astype(float))
        else:
            rows = np.arange(fm.n_rows)
        if rows.size == 0:
            continue
        xs.append(fm.values[rows])
        ys.append(fm.label[rows])
        es.append(np.full(rows.size, eid, dtype=object))
        ts.append(fm.timestamps[rows])
    width = next(iter(feats.matrices.values())).values.shape[1] if feats.matrices else 0
    cat = lambda parts, shape: np.concatenate(parts) if parts else np.zeros(shape)  # noqa: E731
    return Dataset(
        x=cat(xs, (0, width)),
        z=cat(zs, (0, table.dim)) if (aligned_only and table is not None) else None,
        y=cat(ys, (0,)).astype(np.uint8),
        encounter_ids=cat(es, (0,)).astype(str),
        timestamps=cat(ts, (0,)),
    )


def row_severity(fm: FeatureMatrix, t0: Optional[float]) -> np.ndarray:
    """Severity points per row from carried-forward oxygenation values."""
    dyn = fm.values[:, DYNAMIC]
    fio2, pao2, spo2 = (dyn[:, VAR_INDEX[k]] for k in ("fio2", "pao2", "spo2"))
    out = np.zeros(fm.n_rows, dtype=int)
    for i, t in enumerate(fm.timestamps):
        pf = pao2[i] / fio2[i] if fio2[i] > 0 else None
        sf = spo2[i] / fio2[i] if fio2[i] > 0 else None
        # rows precede onset, so the "IMV > 24 h" state never applies here
        out[i] = severity_points(pf, sf, binary_imv_label(t, t0) == 1, False)
    return out


@dataclass
class Splits:
    train: list[str]
    val: list[str]
    test: list[str]


def make_splits(ids: Sequence[str], seed: int, test_fraction: float = 0.2, val_fraction: float = 0.2) -> Splits:
    """Encounter-level development/test split, with validation carved out of development."""
    dev_fraction = 1.0 - test_fraction
    tr, va, te = split_encounters(
        ids, [dev_fraction * (1 - val_fraction), dev_fraction * val_fraction, test_fraction], seed
    )
    return Splits(tr, va, te)


def run_comparison(
    encounters: Sequence[Encounter],
    table: CxrEmbeddingTable,
    variants: Sequence[Variant],
    config: TrainConfig,
    split_seed: int = 0,
) -> dict[Variant, float]:
    """Train each variant on the same aligned rows and return held-out AUROC."""
    from .evaluation import auroc

    kept, _ = include(encounters)
    splits = make_splits([e.encounter_id for e in kept], split_seed)
    feats = featurize(kept, set(splits.train), table)
    tr = to_dataset(feats, splits.train, table)
    va = to_dataset(feats, splits.val, table)
    te = to_dataset(feats, splits.test, table)
    _, (tr, va, te) = standardize(tr, va, te)
    out = {}
    for v in variants:
        params, _ = train(v, tr, va, config)
        out[Variant(v)] = auroc(batched_predict(params, te), te.y)
    return out
