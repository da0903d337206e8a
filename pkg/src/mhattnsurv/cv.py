"""Stratified splitting and nested cross-validation.

The protocol: 5 outer folds estimate generalization; within each outer
fold, 4 inner folds grid-search the feature dropout rate by mean
validation c-index. The four inner models at the winning rate are reused
as-is (no refit) to score the outer test patients — each patient's risk is
the plain average of the four model outputs on one shared 1,000-patch
sample — and the headline number is the mean test c-index over outer
folds. Fold construction is seeded and reproducible; ablation over head
counts reuses one fold plan so every head count sees identical splits.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .data import times_events
from .errors import ConfigError, DomainError
from .evaluate import c_index, predict_risks
from .numerics import RngStream
from .train import TrainConfig, train


def stratified_kfold(records: Sequence, k: int, stream: RngStream) -> list[list[str]]:
    """Split patient ids into k folds, stratified on event status.

    Each stratum (events, censored) is shuffled with the seeded stream and
    dealt round-robin; the censored stratum continues dealing where the
    event stratum stopped so fold sizes stay within one patient of each
    other overall as well as per stratum.
    """
    if k < 2:
        raise DomainError(f"need k >= 2 folds, got {k}")
    if k > len(records):
        raise DomainError(f"k={k} exceeds {len(records)} patients")
    ids = [r.patient_id for r in records]
    if len(set(ids)) != len(ids):
        raise DomainError("duplicate patient ids")
    rng = stream.generator()
    events = [r.patient_id for r in records if r.event == 1]
    censored = [r.patient_id for r in records if r.event == 0]
    folds: list[list[str]] = [[] for _ in range(k)]
    cursor = 0
    for stratum in (events, censored):
        order = rng.permutation(len(stratum))
        for j in order:
            folds[cursor % k].append(stratum[j])
            cursor += 1
    return folds


@dataclass
class FoldPlan:
    """Outer test folds plus, per outer fold, inner folds over its train set."""

    seed: int
    outer: list[list[str]]  # k_outer disjoint test-id lists covering all patients
    inner: list[list[list[str]]]  # per outer fold: k_inner folds of the outer-train ids

    @property
    def k_outer(self) -> int:
        return len(self.outer)

    @property
    def k_inner(self) -> int:
        return len(self.inner[0]) if self.inner else 0

    def to_json(self) -> str:
        doc = {"seed": self.seed, "outer": self.outer, "inner": self.inner}
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "FoldPlan":
        doc = json.loads(text)
        return cls(seed=doc["seed"], outer=doc["outer"], inner=doc["inner"])


def build_fold_plan(
    records: Sequence, k_outer: int, k_inner: int, stream: RngStream
) -> FoldPlan:
    """Stratified nested fold plan; inner folds are fixed per outer fold."""
    outer = stratified_kfold(records, k_outer, stream.child("outer"))
    inner = []
    for f, test_ids in enumerate(outer):
        test = set(test_ids)
        train_recs = [r for r in records if r.patient_id not in test]
        inner.append(stratified_kfold(train_recs, k_inner, stream.child("inner").child(f)))
    plan = FoldPlan(seed=stream.seed, outer=outer, inner=inner)
    validate_fold_plan(plan, records)
    return plan


def validate_fold_plan(plan: FoldPlan, records: Sequence) -> None:
    """Assert partition, disjointness, and stratification on a plan."""
    all_ids = [r.patient_id for r in records]
    id_set = set(all_ids)
    covered: set[str] = set()
    for f, test_ids in enumerate(plan.outer):
        test = set(test_ids)
        if len(test) != len(test_ids):
            raise DomainError(f"outer fold {f} repeats a patient id")
        if test & covered:
            raise DomainError(f"outer fold {f} overlaps another test fold")
        if not test <= id_set:
            raise DomainError(f"outer fold {f} names unknown patients")
        covered |= test
        train_ids = id_set - test
        inner_cover: set[str] = set()
        for j, fold_ids in enumerate(plan.inner[f]):
            fold = set(fold_ids)
            if fold & test:
                raise DomainError(f"inner fold {f}/{j} leaks outer-test patients")
            if fold & inner_cover:
                raise DomainError(f"inner fold {f}/{j} overlaps another inner fold")
            inner_cover |= fold
        if inner_cover != train_ids:
            raise DomainError(f"inner folds of outer fold {f} do not cover its train set")
    if covered != id_set:
        raise DomainError("outer test folds do not cover all patients")
    # stratification: each fold's event proportion within one patient of global
    by_id = {r.patient_id: r for r in records}
    global_prop = sum(r.event for r in records) / len(records)
    for f, test_ids in enumerate(plan.outer):
        ev = sum(by_id[i].event for i in test_ids)
        if abs(ev - global_prop * len(test_ids)) > 1.0 + 1e-9:
            raise DomainError(f"outer fold {f} is not event-stratified")


@dataclass
class GridSpec:
    dropout_rates: list[float] = field(default_factory=lambda: [0.0, 0.2, 0.5, 0.8, 0.95])
    head_counts: list[int] = field(default_factory=lambda: [1, 4, 8, 16, 32])

    def __post_init__(self):
        if not self.dropout_rates:
            raise ConfigError("dropout grid must be non-empty")
        for r in self.dropout_rates:
            if not 0.0 <= r < 1.0:
                raise ConfigError(f"dropout rate must be in [0, 1), got {r}")
        if not self.head_counts:
            raise ConfigError("head-count list must be non-empty")
        for h in self.head_counts:
            if int(h) != h or h < 1:
                raise ConfigError(f"head count must be a positive integer, got {h}")


@dataclass
class OuterFoldReport:
    fold: int
    selected_rate: float
    inner_val_cindex: dict[float, list[float]]  # rate -> per-inner-fold best val c-index
    test_ids: list[str]
    test_predictions: np.ndarray  # aligned with test_ids
    test_cindex: float


@dataclass
class CVReport:
    folds: list[OuterFoldReport]
    mean_cindex: float
    kind: str
    plan: FoldPlan

    def predictions_by_patient(self) -> dict[str, float]:
        out: dict[str, float] = {}
        for fr in self.folds:
            for pid, risk in zip(fr.test_ids, fr.test_predictions):
                out[pid] = float(risk)
        return out

    def to_json(self) -> str:
        doc = {
            "kind": self.kind,
            "mean_cindex": self.mean_cindex,
            "folds": [
                {
                    "fold": fr.fold,
                    "selected_rate": fr.selected_rate,
                    "inner_val_cindex": {
                        repr(rate): vals for rate, vals in fr.inner_val_cindex.items()
                    },
                    "test_cindex": fr.test_cindex,
                    "predictions": {
                        pid: float(risk)
                        for pid, risk in zip(fr.test_ids, fr.test_predictions)
                    },
                }
                for fr in self.folds
            ],
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def aggregate_predictions(pred_sets: Sequence[np.ndarray]) -> np.ndarray:
    """Arithmetic mean of raw risk vectors over the same patients."""
    if len(pred_sets) == 0:
        raise DomainError("no prediction sets to aggregate")
    arrays = [np.asarray(p, dtype=np.float64) for p in pred_sets]
    shape = arrays[0].shape
    for a in arrays[1:]:
        if a.shape != shape:
            raise DomainError(
                f"prediction sets cover different patients: shapes {shape} vs {a.shape}"
            )
    return np.mean(np.stack(arrays), axis=0)


def _check_fold_events(records_by_id, plan: FoldPlan) -> None:
    for f, test_ids in enumerate(plan.outer):
        if sum(records_by_id[i].event for i in test_ids) == 0:
            raise ConfigError(f"outer test fold {f} has no events")
        for j, fold_ids in enumerate(plan.inner[f]):
            if sum(records_by_id[i].event for i in fold_ids) == 0:
                raise ConfigError(f"inner fold {j} of outer fold {f} has no events")


def nested_cv(
    dataset,
    grid: GridSpec,
    config: TrainConfig,
    kind: str = "mhattn",
    stream: RngStream | None = None,
    plan: FoldPlan | None = None,
    k_outer: int = 5,
    k_inner: int = 4,
    test_patches: int = 1000,
) -> CVReport:
    """Nested cross-validation with a dropout-rate grid.

    For every outer fold and grid rate, k_inner models train on the inner
    splits; the rate with the best mean inner validation c-index wins
    (ties break toward the earlier grid entry). Those same inner models
    then each score the outer test set on a shared seeded patch sample,
    their risk vectors are averaged raw, and the outer test c-index is
    computed from the average.
    """
    records = dataset.records
    bags = dataset.bags
    if stream is None:
        stream = RngStream(config.seed, "cv")
    by_id = {r.patient_id: r for r in records}
    if plan is None:
        plan = build_fold_plan(records, k_outer, k_inner, stream.child("folds"))
    _check_fold_events(by_id, plan)

    fold_reports: list[OuterFoldReport] = []
    for f, test_ids in enumerate(plan.outer):
        inner_folds = plan.inner[f]
        rate_scores: dict[float, list[float]] = {}
        rate_models: dict[float, list] = {}
        for rate_idx, rate in enumerate(grid.dropout_rates):
            cfg = replace(config, feature_dropout_rate=rate)
            scores = []
            models = []
            for j in range(len(inner_folds)):
                val_ids = set(inner_folds[j])
                train_recs = [
                    by_id[i]
                    for fold in inner_folds
                    for i in fold
                    if i not in val_ids
                ]
                val_recs = [by_id[i] for i in inner_folds[j]]
                result = train(
                    train_recs,
                    val_recs,
                    bags,
                    cfg,
                    kind=kind,
                    stream=stream.child("fit").child(f).child(rate_idx).child(j),
                )
                best = result.best_val_cindex
                if best is None:
                    # runs too short to hit an eval epoch: score the final model once
                    tv, ev = times_events(val_recs)
                    best = c_index(
                        predict_risks(
                            result.params,
                            val_recs,
                            bags,
                            stream.child("late-val").child(f).child(rate_idx).child(j),
                            n_patches=config.val_patches,
                        ),
                        tv,
                        ev,
                    )
                scores.append(float(best))
                models.append(result.params)
            rate_scores[rate] = scores
            rate_models[rate] = models
        means = [float(np.mean(rate_scores[r])) for r in grid.dropout_rates]
        selected = grid.dropout_rates[int(np.argmax(means))]

        test_recs = [by_id[i] for i in test_ids]
        test_stream = stream.child("test").child(f)
        pred_sets = [
            predict_risks(m, test_recs, bags, test_stream, n_patches=test_patches)
            for m in rate_models[selected]
        ]
        avg = aggregate_predictions(pred_sets)
        tt, te = times_events(test_recs)
        fold_reports.append(
            OuterFoldReport(
                fold=f,
                selected_rate=selected,
                inner_val_cindex=rate_scores,
                test_ids=list(test_ids),
                test_predictions=avg,
                test_cindex=c_index(avg, tt, te),
            )
        )

    report = CVReport(
        folds=fold_reports,
        mean_cindex=float(np.mean([fr.test_cindex for fr in fold_reports])),
        kind=kind,
        plan=plan,
    )
    preds = report.predictions_by_patient()
    if set(preds) != set(by_id):
        raise DomainError("internal error: test predictions do not cover all patients")
    return report


@dataclass
class AblationRow:
    heads: int
    mean_cindex: float
    fold_cindexes: list[float]
    selected_rates: list[float]


def ablation_runner(
    dataset,
    head_counts: Sequence[int],
    grid: GridSpec,
    config: TrainConfig,
    stream: RngStream | None = None,
    k_outer: int = 5,
    k_inner: int = 4,
    test_patches: int = 1000,
) -> list[AblationRow]:
    """Nested CV once per head count on one shared fold plan."""
    d = dataset.d
    for h in head_counts:
        if d % int(h) != 0:
            raise ConfigError(f"head count {h} does not divide embedding dim {d}")
    if stream is None:
        stream = RngStream(config.seed, "ablation")
    plan = build_fold_plan(dataset.records, k_outer, k_inner, stream.child("folds"))
    rows = []
    for h in head_counts:
        cfg = replace(config, heads=int(h))
        report = nested_cv(
            dataset,
            GridSpec(dropout_rates=list(grid.dropout_rates), head_counts=[int(h)]),
            cfg,
            kind="mhattn",
            stream=stream.child("heads").child(int(h)),
            plan=plan,
            test_patches=test_patches,
        )
        rows.append(
            AblationRow(
                heads=int(h),
                mean_cindex=report.mean_cindex,
                fold_cindexes=[fr.test_cindex for fr in report.folds],
                selected_rates=[fr.selected_rate for fr in report.folds],
            )
        )
    return rows


def cv_folds_csv(report: CVReport) -> str:
    from .data import fmt_float

    lines = ["fold,selected_rate,test_cindex,n_test"]
    for fr in report.folds:
        lines.append(
            f"{fr.fold},{fmt_float(fr.selected_rate)},{fmt_float(fr.test_cindex)},{len(fr.test_ids)}"
        )
    lines.append(f"mean,,{fmt_float(report.mean_cindex)},")
    return "\n".join(lines) + "\n"


def cv_predictions_csv(report: CVReport) -> str:
    from .data import fmt_float

    lines = ["id,fold,risk"]
    for fr in report.folds:
        for pid, risk in zip(fr.test_ids, fr.test_predictions):
            lines.append(f"{pid},{fr.fold},{fmt_float(risk)}")
    return "\n".join(lines) + "\n"


def ablation_csv(rows: Sequence[AblationRow]) -> str:
    from .data import fmt_float

    k = len(rows[0].fold_cindexes) if rows else 0
    header = "heads,mean_cindex," + ",".join(f"fold{i}_cindex" for i in range(k))
    lines = [header]
    for row in rows:
        folds = ",".join(fmt_float(c) for c in row.fold_cindexes)
        lines.append(f"{row.heads},{fmt_float(row.mean_cindex)},{folds}")
    return "\n".join(lines) + "\n"
