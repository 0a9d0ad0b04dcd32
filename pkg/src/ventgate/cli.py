"""Command-line driver: gen, featurize, train, gradcheck, search, eval, compare, report.

Every command reads one YAML run config (``--config``), optionally adjusted with
``--set section.key=value``. Output paths are relative to ``paths.out_dir``,
which the ``VENTGATE_OUT_DIR`` environment variable overrides.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import yaml

from . import gradcheck, synth
from .cohort import InvalidEncounter, read_cohort, write_cohort
from .cxr import (
    CxrEmbeddingTable,
    EmbeddingFileError,
    UnresolvedEmbedding,
    load_embeddings,
    save_embeddings,
)
from .evaluation import (
    ConfusionCounts,
    EvalReport,
    MetricError,
    RocCurve,
    binary_predictor_metrics,
    compare,
    compare_csv,
    encounter_confusion,
    ratio_metrics,
    score_report,
    select_threshold,
)
from .features import (
    FeatureMatrix,
    SchemaMismatch,
    Standardizer,
    read_feature_matrix,
    write_feature_matrix,
)
from .model import CheckpointError, MissingModality, Variant, load_checkpoint, save_checkpoint
from .pipeline import featurize, include, make_splits, row_severity
from .synth import SynthConfig, SynthConfigError
from .training import (
    Dataset,
    SearchSpace,
    TrainConfig,
    TrainingError,
    batched_predict,
    random_search,
    standardize,
    train,
)

OUT_DIR_ENV = "VENTGATE_OUT_DIR"


class ConfigError(ValueError):
    pass


class ProvenanceError(ValueError):
    pass


# errors that map to a nonzero exit status
CONTRACT_ERRORS = (
    ConfigError,
    ProvenanceError,
    SynthConfigError,
    TrainingError,
    MetricError,
    SchemaMismatch,
    EmbeddingFileError,
    UnresolvedEmbedding,
    CheckpointError,
    MissingModality,
    InvalidEncounter,
    OSError,
)


# ---------------------------------------------------------------------------
# run config


@dataclass
class Paths:
    out_dir: str = "runs"
    cohort: str = "cohort.jsonl"
    embeddings: str = "embeddings.cxre"
    features: str = "features"
    checkpoints: str = "checkpoints"
    reports: str = "reports"

    def resolve(self, name: str) -> Path:
        return Path(self.out_dir) / getattr(self, name)


@dataclass
class RunConfig:
    paths: Paths = field(default_factory=Paths)
    synth: SynthConfig = field(default_factory=SynthConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    search: SearchSpace = field(default_factory=SearchSpace)
    variants: list[str] = field(default_factory=lambda: [v.value for v in Variant])
    target_sensitivity: float = 0.60
    seed: int = 0
    test_fraction: float = 0.2
    val_fraction: float = 0.2

    def validate(self) -> None:
        names = [f.name for f in fields(Paths) if f.name != "out_dir"]
        resolved = [self.paths.resolve(n) for n in names]
        if len(set(resolved)) != len(resolved):
            raise ConfigError("configured paths must be distinct")
        for v in self.variants:
            try:
                Variant(v)
            except ValueError:
                raise ConfigError(f"unknown variant {v!r}") from None
        if not 0.0 <= self.target_sensitivity <= 1.0:
            raise ConfigError("target_sensitivity must be in [0, 1]")
        if not (0 < self.test_fraction < 1 and 0 < self.val_fraction < 1):
            raise ConfigError("split fractions must be in (0, 1)")
        self.synth.validate()
        self.train.validate()
        self.search.validate()


def _set_path(tree: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    node = tree
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot set {dotted}: {k} is not a section")
    node[keys[-1]] = value


def load_config(path: Optional[str], overrides: Sequence[str] = ()) -> RunConfig:
    tree: dict = {}
    if path:
        with open(path) as fh:
            tree = yaml.safe_load(fh) or {}
        if not isinstance(tree, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} is not key=value")
        _set_path(tree, key.strip(), yaml.safe_load(raw))

    known = {f.name for f in fields(RunConfig)}
    unknown = set(tree) - known
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    try:
        paths = Paths(**tree.get("paths", {}))
        cfg = RunConfig(
            paths=paths,
            synth=SynthConfig.from_dict(tree.get("synth", {})),
            train=TrainConfig.from_dict(tree.get("train", {})),
            search=SearchSpace.from_dict(tree.get("search", {})),
            **{k: tree[k] for k in known - {"paths", "synth", "train", "search"} if k in tree},
        )
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    env_out = os.environ.get(OUT_DIR_ENV)
    if env_out:
        cfg.paths.out_dir = env_out
    cfg.validate()
    return cfg


# ---------------------------------------------------------------------------
# shared helpers


def _need(path: Path, what: str) -> Path:
    if not path.exists():
        raise ConfigError(f"{what} not found: {path}")
    return path


def _dump_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _fmt_mean_sd(x: np.ndarray) -> str:
    return f"{np.mean(x):.1f} ({np.std(x):.1f})" if x.size else "--"


def _fmt_count(n: int, total: int) -> str:
    return f"{n} ({100.0 * n / total:.1f}%)" if total else "0"


def cohort_summary(encounters, table: CxrEmbeddingTable) -> str:
    """Markdown cohort characteristics, split by eventual ventilation."""
    groups = {
        "All": encounters,
        "IMV": [e for e in encounters if e.t0 is not None],
        "No IMV": [e for e in encounters if e.t0 is None],
    }
    rows = [("Encounters, n", lambda g: str(len(g)))]
    rows.append(("Ventilated, n (%)", lambda g: _fmt_count(sum(e.t0 is not None for e in g), len(g))))
    rows.append(("Age, mean (sd)", lambda g: _fmt_mean_sd(np.array([e.demographics[0] for e in g]))))
    rows.append(("Male, n (%)", lambda g: _fmt_count(sum(e.demographics[1] == 1 for e in g), len(g))))
    rows.append(("BMI, mean (sd)", lambda g: _fmt_mean_sd(np.array([e.demographics[4] for e in g]))))
    rows.append((
        "ICU stay h, median",
        lambda g: f"{np.median([e.icu_discharge - e.icu_admit for e in g]):.1f}" if g else "--",
    ))
    rows.append(("Radiographs, total", lambda g: str(sum(len(e.cxr_studies) for e in g))))
    rows.append(("DNR, n (%)", lambda g: _fmt_count(sum(e.dnr for e in g), len(g))))
    out = ["| Characteristic | " + " | ".join(groups) + " |", "|---|" + "---|" * len(groups)]
    for label, fn in rows:
        out.append(f"| {label} | " + " | ".join(fn(g) for g in groups.values()) + " |")
    out.append("")
    out.append(f"Embedding table: {len(table)} studies, dim {table.dim}, encoder {table.encoder or '--'}")
    return "\n".join(out) + "\n"


@dataclass
class FeatureCache:
    root: Path
    splits: dict
    t0: dict
    aligned: dict  # encounter id -> list of (row, embedding_key)

    @classmethod
    def open(cls, root: Path) -> "FeatureCache":
        meta = json.loads(_need(root / "splits.json", "feature cache").read_text())
        aligned: dict[str, list] = {}
        with open(_need(root / "aligned.csv", "alignment index"), newline="") as fh:
            for r in csv.DictReader(fh):
                aligned.setdefault(r["encounter_id"], []).append((int(r["row"]), r["embedding_key"]))
        return cls(root, meta["splits"], meta["t0"], aligned)

    def matrix(self, eid: str) -> FeatureMatrix:
        return read_feature_matrix(self.root / f"{eid}.fmx")

    def dataset(self, split: str, table: Optional[CxrEmbeddingTable]) -> Dataset:
        """Aligned rows of one split; embeddings only when a table is given."""
        xs, zs, ys, es, ts = [], [], [], [], []
        for eid in self.splits[split]:
            pairs = self.aligned.get(eid, [])
            if not pairs:
                continue
            fm = self.matrix(eid)
            rows = np.array([r for r, _ in pairs], dtype=int)
            xs.append(fm.values[rows])
            ys.append(fm.label[rows])
            es.extend([eid] * rows.size)
            ts.append(fm.timestamps[rows])
            if table is not None:
                zs.append(np.stack([table[k] for _, k in pairs]).astype(float))
        if not xs:
            raise TrainingError(f"{split} split has no aligned rows")
        return Dataset(
            x=np.concatenate(xs),
            z=np.concatenate(zs) if table is not None else None,
            y=np.concatenate(ys).astype(np.uint8),
            encounter_ids=np.array(es, dtype=str),
            timestamps=np.concatenate(ts),
        )


def _table_for(cfg: RunConfig, variant: Variant) -> Optional[CxrEmbeddingTable]:
    if not variant.uses_cxr:
        return None
    return load_embeddings(_need(cfg.paths.resolve("embeddings"), "embedding file"))


def _prepared(cfg: RunConfig, variant: Variant, splits=("train", "val")):
    cache = FeatureCache.open(cfg.paths.resolve("features"))
    table = _table_for(cfg, variant)
    data = [cache.dataset(s, table) for s in splits]
    return cache, data


# ---------------------------------------------------------------------------
# commands


def cmd_gen(cfg: RunConfig, args) -> int:
    encounters, table = synth.generate(cfg.synth)
    out = Path(cfg.paths.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_cohort(cfg.paths.resolve("cohort"), encounters)
    save_embeddings(cfg.paths.resolve("embeddings"), table)
    summary = cohort_summary(encounters, table)
    (out / "cohort_summary.md").write_text(summary)
    print(summary, end="")
    return 0


def cmd_featurize(cfg: RunConfig, args) -> int:
    encounters = read_cohort(_need(cfg.paths.resolve("cohort"), "cohort file"))
    emb_path = cfg.paths.resolve("embeddings")
    table = load_embeddings(emb_path) if emb_path.exists() else None
    kept, excluded = include(encounters)
    ids = [e.encounter_id for e in kept]
    if not ids:
        raise TrainingError("no encounters pass the inclusion criteria")
    splits = make_splits(ids, cfg.seed, cfg.test_fraction, cfg.val_fraction)
    feats = featurize(kept, set(splits.train), table)

    root = cfg.paths.resolve("features")
    root.mkdir(parents=True, exist_ok=True)
    n_rows = 0
    sev_lines = ["encounter_id,timestamp,label,severity_points"]
    for e in kept:
        fm = feats.matrices[e.encounter_id]
        write_feature_matrix(root / f"{e.encounter_id}.fmx", fm)
        n_rows += fm.n_rows
        for t, lab, pts in zip(fm.timestamps, fm.label, row_severity(fm, e.t0)):
            sev_lines.append(f"{e.encounter_id},{float(t)!r},{int(lab)},{int(pts)}")
    (root / "severity.csv").write_text("\n".join(sev_lines) + "\n")

    n_aligned = 0
    with open(root / "aligned.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["encounter_id", "timestamp", "row", "study_id", "embedding_key", "embedding_age_hours"])
        for e in kept:
            samples = feats.aligned[e.encounter_id]
            n_aligned += len(samples)
            for s in samples:
                w.writerow([s.encounter_id, repr(s.timestamp), s.row, s.study_id, s.embedding_key,
                            repr(s.embedding_age_hours)])

    _dump_json(root / "splits.json", {
        "seed": cfg.seed,
        "splits": {"train": splits.train, "val": splits.val, "test": splits.test},
        "t0": {e.encounter_id: e.t0 for e in kept},
    })
    _dump_json(root / "imputation.json", {"means": [float(m) for m in feats.stats.means]})
    dropped = {
        "encounters_in": len(encounters),
        "encounters_excluded": len(encounters) - len(kept),
        "excluded_by_reason": dict(sorted(excluded.items())),
        "rows_in": n_rows,
        "rows_unmatched_cxr": n_rows - n_aligned,
        "rows_aligned": n_aligned,
    }
    _dump_json(root / "dropped.json", dropped)
    print(f"encounters: {len(encounters)} in, {len(kept)} kept")
    for reason, n in sorted(excluded.items()):
        print(f"  excluded {reason}: {n}")
    print(f"rows: {n_rows} assembled, {n_rows - n_aligned} without an eligible radiograph, {n_aligned} kept")
    return 0


def _checkpoint_path(cfg: RunConfig, variant: Variant) -> Path:
    return cfg.paths.resolve("checkpoints") / f"{variant.value}.vgm"


def cmd_train(cfg: RunConfig, args) -> int:
    variant = Variant(args.variant)
    _, (tr, va) = _prepared(cfg, variant)
    st, (tr, va) = standardize(tr, va)
    params, history = train(variant, tr, va, cfg.train)
    threshold = select_threshold(batched_predict(params, va), va.y, cfg.target_sensitivity)
    extras = {
        "standardizer.mean": st.mean,
        "standardizer.std": st.std,
        "threshold": np.array([threshold]),
        "target_sensitivity": np.array([cfg.target_sensitivity]),
    }
    root = cfg.paths.resolve("checkpoints")
    root.mkdir(parents=True, exist_ok=True)
    save_checkpoint(_checkpoint_path(cfg, variant), params, extras)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "train_loss", "val_loss", "val_auroc"])
    for h in history:
        w.writerow([h["epoch"], repr(h["train_loss"]), repr(h["val_loss"]), repr(h["val_auroc"])])
    (root / f"{variant.value}.history.csv").write_text(buf.getvalue())
    best = max(history, key=lambda h: h["val_auroc"])
    print(f"{variant.value}: best validation AUROC {best['val_auroc']:.4f} at epoch {best['epoch']}, "
          f"threshold {threshold:.6g}")
    return 0


def cmd_gradcheck(cfg: RunConfig, args) -> int:
    results = gradcheck.run(args.configs, args.seed)
    worst: dict[str, float] = {}
    for r in results:
        worst[r.variant.value] = max(worst.get(r.variant.value, 0.0), r.max_rel_error)
    for v, err in worst.items():
        print(f"{v:10s} max relative error {err:.3e}")
    bad = [r for r in results if r.max_rel_error >= args.tolerance]
    for r in bad:
        print(f"FAIL {r.variant.value} config {r.config_seed}: {r.worst_tensor} {r.max_rel_error:.3e}",
              file=sys.stderr)
    return 1 if bad else 0


def cmd_search(cfg: RunConfig, args) -> int:
    variant = Variant(args.variant)
    _, (tr, va) = _prepared(cfg, variant)
    _, (tr, va) = standardize(tr, va)
    root = cfg.paths.resolve("checkpoints")
    root.mkdir(parents=True, exist_ok=True)
    best, trials = random_search(cfg.search, variant, tr, va, cfg.train, root / f"search_{variant.value}.csv")
    (root / f"search_{variant.value}_best.yaml").write_text(yaml.safe_dump({"train": asdict(best)}, sort_keys=True))
    top = max(trials, key=lambda t: t["val_auroc"])
    print(f"{variant.value}: {len(trials)} trials, best validation AUROC {top['val_auroc']:.4f} (trial {top['trial_id']})")
    return 0


def _read_physician(path: Path, cache: Optional[FeatureCache]) -> ConfusionCounts:
    """Counts from either a ``tp,fp,fn,tn`` row or per-encounter ``encounter_id,call`` rows."""
    with open(_need(path, "physician file"), newline="") as fh:
        rows = list(csv.DictReader(fh))
    header = set(rows[0]) if rows else set()
    if {"tp", "fp", "fn", "tn"} <= header:
        if len(rows) != 1:
            raise MetricError("physician counts file must hold exactly one row")
        try:
            return ConfusionCounts(**{k: int(rows[0][k]) for k in ("tp", "fp", "fn", "tn")})
        except ValueError:
            raise MetricError("physician counts must be integers") from None
    if {"encounter_id", "call"} <= header:
        if cache is None:
            raise ConfigError("per-encounter physician calls need the feature cache")
        c = ConfusionCounts()
        for r in rows:
            eid = r["encounter_id"]
            if eid not in cache.t0:
                raise MetricError(f"physician call for unknown encounter {eid}")
            if r["call"] not in ("0", "1"):
                raise MetricError(f"physician call for {eid} must be 0 or 1")
            fm = cache.matrix(eid)
            truth = bool(fm.label.any())
            call = r["call"] == "1"
            c.tp += call and truth
            c.fp += call and not truth
            c.fn += (not call) and truth
            c.tn += (not call) and not truth
        return c
    raise MetricError(f"{path}: expected columns tp,fp,fn,tn or encounter_id,call")


def cmd_eval(cfg: RunConfig, args) -> int:
    if not args.checkpoint and not args.physician:
        raise ConfigError("eval needs --checkpoint and/or --physician")
    reports = cfg.paths.resolve("reports")
    reports.mkdir(parents=True, exist_ok=True)
    cache = None
    if args.checkpoint:
        params, extras = load_checkpoint(_need(Path(args.checkpoint), "checkpoint"))
        if "threshold" not in extras or "target_sensitivity" not in extras:
            raise ProvenanceError("checkpoint carries no validation-selected threshold")
        if "standardizer.mean" not in extras or "standardizer.std" not in extras:
            raise ProvenanceError("checkpoint carries no standardizer statistics")
        variant = params.variant
        cache, (te,) = _prepared(cfg, variant, ("test",))
        st = Standardizer(extras["standardizer.mean"], extras["standardizer.std"])
        te = Dataset(st.transform(te.x), te.z, te.y, te.encounter_ids, te.timestamps)
        threshold = float(extras["threshold"][0])
        scores = batched_predict(params, te)
        rep = score_report(scores, te.y, threshold)
        enc = encounter_confusion(te.encounter_ids, te.timestamps, scores, te.y, cache.t0, threshold)
        rep.encounter_counts = enc.encounter
        rep.encounter_metrics = ratio_metrics(enc.encounter)
        rep.extra = {
            "variant": variant.value,
            "target_sensitivity": float(extras["target_sensitivity"][0]),
            "test_rows": int(len(te)),
            "test_encounters": len(enc.encounter_cells),
        }
        stem = args.name or variant.value
        (reports / f"{stem}.json").write_text(rep.to_json())
        (reports / f"{stem}_roc.csv").write_text(RocCurve(list(rep.roc), rep.auroc).to_csv())
        print(f"{stem}: AUROC {rep.auroc:.4f}, sensitivity {_f(rep.sensitivity)}, "
              f"specificity {_f(rep.specificity)}, PPV {_f(rep.ppv)}")
    if args.physician:
        if cache is None:
            root = cfg.paths.resolve("features")
            cache = FeatureCache.open(root) if (root / "splits.json").exists() else None
        counts = _read_physician(Path(args.physician), cache)
        rep = binary_predictor_metrics(counts)
        rep.extra = {"variant": "physician"}
        (reports / "physician.json").write_text(rep.to_json())
        print(f"physician: sensitivity {_f(rep.sensitivity)}, specificity {_f(rep.specificity)}, "
              f"PPV {_f(rep.ppv)}, balanced accuracy {_f(rep.balanced_accuracy)}")
    return 0


def _f(v: Optional[float]) -> str:
    return "--" if v is None else f"{v:.3f}"


REPORT_KEYS = {"auroc", "threshold", "sensitivity", "specificity", "ppv", "balanced_accuracy", "counts"}


def _load_report(path: Path) -> EvalReport:
    text = _need(path, "report").read_text()
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaMismatch(f"{path}: not JSON ({exc})") from None
    if not isinstance(d, dict) or not REPORT_KEYS <= set(d):
        raise SchemaMismatch(f"{path}: not an evaluation report")
    return EvalReport.from_json(text)


def _named(arg: str) -> tuple[str, Path]:
    name, sep, path = arg.partition("=")
    if sep:
        return name, Path(path)
    return "", Path(arg)


def cmd_compare(cfg: RunConfig, args) -> int:
    named = []
    for arg in args.reports:
        name, path = _named(arg)
        rep = _load_report(path)
        named.append((name or rep.extra.get("variant") or path.stem, rep))
    table = compare(named)
    out = cfg.paths.resolve("reports")
    out.mkdir(parents=True, exist_ok=True)
    (out / "comparison.md").write_text(table)
    (out / "comparison.csv").write_text(compare_csv(named))
    bars = ["predictor,auroc"] + [f"{n},{r.auroc:.6f}" for n, r in named if r.auroc is not None]
    (out / "auroc_bars.csv").write_text("\n".join(bars) + "\n")
    print(table, end="")
    return 0


def cmd_report(cfg: RunConfig, args) -> int:
    rep = _load_report(Path(args.report))
    lines = [f"# {rep.extra.get('variant', Path(args.report).stem)}", ""]
    if rep.auroc is not None:
        lines.append(f"AUROC {rep.auroc:.4f} at threshold {rep.threshold:.6g}")
        lines.append("")
    lines.append("| Level | TP | FP | FN | TN | Sensitivity | Specificity | PPV | Balanced accuracy |")
    lines.append("|---|---|---|---|---|---|---|---|---|")
    levels = [("prediction", rep.counts, ratio_metrics(rep.counts))]
    if rep.encounter_counts is not None:
        levels.append(("encounter", rep.encounter_counts, ratio_metrics(rep.encounter_counts)))
    for level, c, m in levels:
        lines.append(
            f"| {level} | {c.tp} | {c.fp} | {c.fn} | {c.tn} | {_f(m['sensitivity'])} | "
            f"{_f(m['specificity'])} | {_f(m['ppv'])} | {_f(m['balanced_accuracy'])} |"
        )
    print("\n".join(lines))
    return 0


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ventgate", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="YAML run config")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config entry, e.g. train.learning_rate=0.002")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("gen", help="generate a synthetic cohort and embedding table")
    sub.add_parser("featurize", help="build feature matrices, alignment index and splits")
    variants = [v.value for v in Variant]
    t = sub.add_parser("train", help="train one variant")
    t.add_argument("--variant", required=True, choices=variants)
    g = sub.add_parser("gradcheck", help="finite-difference check of all variants")
    g.add_argument("--configs", type=int, default=20)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--tolerance", type=float, default=1e-4)
    s = sub.add_parser("search", help="seeded random hyperparameter search")
    s.add_argument("--variant", required=True, choices=variants)
    e = sub.add_parser("eval", help="evaluate a checkpoint and/or physician calls on the test split")
    e.add_argument("--checkpoint")
    e.add_argument("--physician", help="CSV of tp,fp,fn,tn or encounter_id,call")
    e.add_argument("--name", help="report file stem (default: variant)")
    c = sub.add_parser("compare", help="tabulate two or more reports")
    c.add_argument("reports", nargs="+", metavar="[NAME=]REPORT")
    r = sub.add_parser("report", help="print prediction and encounter level metrics of one report")
    r.add_argument("report")
    return p


COMMANDS = {
    "gen": cmd_gen,
    "featurize": cmd_featurize,
    "train": cmd_train,
    "gradcheck": cmd_gradcheck,
    "search": cmd_search,
    "eval": cmd_eval,
    "compare": cmd_compare,
    "report": cmd_report,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.set)
        return COMMANDS[args.command](cfg, args)
    except CONTRACT_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
