"""Nested cross-validation with target preprocessing refit inside every outer iteration."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import krr
from .. import ndcore as nd
from ..dataio import Dataset, compute_fc, fit_target_transform, vectorize_lower
from ..training import DEEP_FAMILIES, PreparedData, TrainConfig, TrainingError, fit_deep, predict
from .folds import FoldPlan
from .metrics import METRICS


class LeakageError(AssertionError):
    pass


@dataclass
class KrrConfig:
    lambdas: tuple[float, ...] = krr.DEFAULT_LAMBDAS


@dataclass
class AuditRecord:
    fold: int
    statistic: str
    ids: frozenset[str]


@dataclass
class FoldOutcome:
    fold: int
    metrics: dict[str, float]
    test_ids: list[str]
    predictions: np.ndarray
    targets: np.ndarray
    audit: list[AuditRecord]
    detail: dict = field(default_factory=dict)


@dataclass
class MetricCell:
    model: str
    modality: str
    values: dict[str, list[float]]
    plan: str = ""

    def __post_init__(self):
        lengths = {len(v) for v in self.values.values()}
        if len(lengths) > 1:
            raise ValueError(f"{self.model}/{self.modality}: uneven per-fold metric counts {lengths}")


@dataclass
class CvResult:
    cell: MetricCell
    folds: list[FoldOutcome]

    @property
    def audit(self) -> list[AuditRecord]:
        return [r for f in self.folds for r in f.audit]


def audit_violations(outcome: FoldOutcome) -> list[AuditRecord]:
    test = set(outcome.test_ids)
    return [r for r in outcome.audit if r.ids & test]


def _ids(dataset: Dataset, idx) -> frozenset[str]:
    return frozenset(dataset.subjects[i].id for i in idx)


def run_outer_fold(dataset: Dataset, family: str, plan: FoldPlan, iteration: int, seed: int,
                   train_config: TrainConfig | None = None, krr_config: KrrConfig | None = None,
                   data: PreparedData | None = None) -> FoldOutcome:
    """One outer iteration: fit everything on non-test folds, score the test fold."""
    test_fold, val_fold = plan.schedule()[iteration]
    fold_of = np.array([plan.assignments[s.id] for s in dataset.subjects])
    test_idx = np.flatnonzero(fold_of == test_fold)
    subjects = dataset.subjects
    audit: list[AuditRecord] = []

    if family == "krr":
        cfg = krr_config or KrrConfig()
        pool_idx = np.flatnonzero(fold_of != test_fold)
        fcs = data.fc if data is not None else [compute_fc(s.ts) for s in subjects]
        feats = np.array([vectorize_lower(f) for f in fcs])
        inner = [np.flatnonzero(fold_of[pool_idx] == f) for f in range(plan.k) if f != test_fold]
        pool_subjects = [subjects[i] for i in pool_idx]

        def prepare(tr, va):
            tt = fit_target_transform([pool_subjects[i] for i in tr])
            audit.append(AuditRecord(iteration, "inner_target_transform", _ids(dataset, pool_idx[tr])))
            return (tt.apply_subjects([pool_subjects[i] for i in tr]),
                    tt.apply_subjects([pool_subjects[i] for i in va]))

        lam = krr.select_lambda(feats[pool_idx], None, inner, cfg.lambdas, prepare=prepare)
        audit.append(AuditRecord(iteration, "lambda", _ids(dataset, pool_idx)))
        tt = fit_target_transform(pool_subjects)
        audit.append(AuditRecord(iteration, "target_transform", _ids(dataset, pool_idx)))
        model = krr.fit(feats[pool_idx], tt.apply_subjects(pool_subjects), lam)
        audit.append(AuditRecord(iteration, "krr_weights", _ids(dataset, pool_idx)))
        z = krr.predict(model, feats[test_idx])
        detail = {"lambda": lam}
    elif family in DEEP_FAMILIES:
        cfg = train_config or TrainConfig()
        train_idx = np.flatnonzero((fold_of != test_fold) & (fold_of != val_fold))
        val_idx = np.flatnonzero(fold_of == val_fold)
        tt = fit_target_transform([subjects[i] for i in train_idx])
        audit.append(AuditRecord(iteration, "target_transform", _ids(dataset, train_idx)))
        y_tr = tt.apply_subjects([subjects[i] for i in train_idx])
        y_va = tt.apply_subjects([subjects[i] for i in val_idx])
        data = data or PreparedData(dataset)
        try:
            model, trials = fit_deep(family, data, train_idx, y_tr, val_idx, y_va, cfg,
                                     nd.derive_seed(seed, family, dataset.modality, iteration))
        except TrainingError as err:
            raise TrainingError(f"{family}/{dataset.modality} fold {iteration}: {err}", family,
                                dataset.modality, iteration, err.trial) from None
        audit.append(AuditRecord(iteration, "network_weights", _ids(dataset, train_idx)))
        audit.append(AuditRecord(iteration, "model_selection", _ids(dataset, val_idx)))
        z = predict(family, model, data, test_idx)
        detail = {"trials": [(t.params, t.best_val_loss, t.best_epoch) for t in trials]}
    else:
        raise ValueError(f"unknown model family {family!r}")

    pred = tt.invert_standardization(z)
    target = tt.residualize_subjects([subjects[i] for i in test_idx])
    metrics = {name: fn(pred, target) for name, fn in METRICS.items()}
    outcome = FoldOutcome(iteration, metrics, [subjects[i].id for i in test_idx], pred, target, audit, detail)
    leaks = audit_violations(outcome)
    if leaks:
        raise LeakageError(f"fold {iteration}: {leaks[0].statistic} was fit on test subjects")
    return outcome


def assemble_cell(family: str, modality: str, outcomes: list[FoldOutcome], plan: str = "") -> MetricCell:
    outcomes = sorted(outcomes, key=lambda o: o.fold)
    values = {name: [o.metrics[name] for o in outcomes] for name in METRICS}
    return MetricCell(family, modality, values, plan)


def nested_cv_run(dataset: Dataset, family: str, plan: FoldPlan, seed: int = 0,
                  train_config: TrainConfig | None = None, krr_config: KrrConfig | None = None,
                  data: PreparedData | None = None) -> CvResult:
    missing = set(dataset.ids) - set(plan.assignments)
    if missing:
        raise ValueError(f"fold plan does not cover subject {sorted(missing)[0]!r}")
    if data is None:
        data = PreparedData(dataset)
    outcomes = [run_outer_fold(dataset, family, plan, i, seed, train_config, krr_config, data)
                for i in range(plan.k)]
    return CvResult(assemble_cell(family, dataset.modality, outcomes, plan.digest()), outcomes)
