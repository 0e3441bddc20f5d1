from __future__ import annotations
import csv
import io
import logging
from typing import Optional, Sequence
import numpy as np
from pydantic import BaseModel
from attrsv.errors import DataError
from attrsv.models import EerResult, ErrorCurve, ImportanceReport, SimilarityVector, TrialPair, TrialScore
from attrsv.similarity import mask
from attrsv.verifier import StageTwoModel, TrainingSet, importance, score_vectors

logger = logging.getLogger(__name__)

# published embedding-cosine systems; recorded for context, never reproduced here
REFERENCE_BASELINES = {"xvector-org": 0.035, "ecapa-org": 0.018}


class MetricError(DataError):
    pass


def curve_from_arrays(scores: np.ndarray, targets: np.ndarray) -> ErrorCurve:
    scores = np.asarray(scores, dtype=np.float64)
    targets = np.asarray(targets).astype(bool)
    pos = np.sort(scores[targets])
    neg = np.sort(scores[~targets])
    if pos.size == 0 or neg.size == 0:
        raise MetricError(f"an error curve needs both classes, got {pos.size} positive and {neg.size} negative trials")
    if not np.all(np.isfinite(scores)):
        raise MetricError("scores must be finite")
    thresholds = np.concatenate(([-np.inf], np.unique(scores), [np.inf]))
    far = (neg.size - np.searchsorted(neg, thresholds, side="left")) / neg.size
    frr = np.searchsorted(pos, thresholds, side="left") / pos.size
    return ErrorCurve(thresholds=thresholds, far=far, frr=frr, n_pos=int(pos.size), n_neg=int(neg.size))


def error_curve(scores: Sequence[TrialScore]) -> ErrorCurve:
    return curve_from_arrays(
        np.array([s.score for s in scores], dtype=np.float64),
        np.array([s.trial.target for s in scores], dtype=bool),
    )


def _finite_threshold(lo: float, hi: float, alpha: float) -> float:
    if np.isinf(lo):
        return hi
    if np.isinf(hi):
        return lo
    return lo + alpha * (hi - lo)


def equal_error_rate(curve: ErrorCurve) -> EerResult:
    """Error rate where FAR meets FRR, linearly interpolated between the two
    thresholds that bracket the sign change of FAR - FRR."""
    d = curve.far - curve.frr
    i = int(np.argmax(d <= 0))
    thresholds = curve.thresholds
    # d starts at 1 (t = -inf) and ends at -1 (t = +inf), so 0 < i < len - 1 when d[i] == 0
    if d[i] == 0:
        eer = 0.5 * (curve.far[i] + curve.frr[i])
        threshold = thresholds[i]
    else:
        alpha = d[i - 1] / (d[i - 1] - d[i])
        eer = curve.far[i - 1] + alpha * (curve.far[i] - curve.far[i - 1])
        threshold = _finite_threshold(thresholds[i - 1], thresholds[i], alpha)
    # two finite thresholds means only two distinct scores
    degenerate = thresholds.size <= 4
    if degenerate:
        logger.warning("EER computed on a two-point curve (%d distinct scores)", thresholds.size - 2)
    return EerResult(eer=float(np.clip(eer, 0.0, 1.0)), threshold=float(threshold),
                     n_pos=curve.n_pos, n_neg=curve.n_neg, degenerate=degenerate)


def eer_from_arrays(scores: np.ndarray, targets: np.ndarray) -> float:
    return equal_error_rate(curve_from_arrays(scores, targets)).eer


def accuracy(predicted: Sequence[int], truth: Sequence[int]) -> float:
    if len(predicted) != len(truth) or not truth:
        raise MetricError("accuracy needs equally long, non-empty label lists")
    return float(np.mean(np.asarray(predicted) == np.asarray(truth)))


class SystemResult(BaseModel):
    route: str
    mode: str
    kind: str
    attributes: list[str]
    eer: EerResult
    importance: ImportanceReport
    attribute_accuracy: dict[str, float] = {}


class SingleAttributeResult(BaseModel):
    route: str
    mode: str
    attribute: str
    eer: EerResult


def evaluate_system(route: str, model: StageTwoModel, rows: Sequence[tuple[TrialPair, SimilarityVector]],
                    attribute_accuracy: Optional[dict[str, float]] = None,
                    seed: int = 0) -> tuple[SystemResult, list[TrialScore]]:
    """Score every trial, then report EER and attribute importance for one system."""
    if not rows:
        raise MetricError(f"no trials to evaluate for route '{route}'")
    scores = score_vectors(model, rows)
    result = equal_error_rate(error_curve(scores))
    report = importance(model, TrainingSet.from_vectors(rows), seed=seed)
    logger.info("%s/%s/%s EER %.4f", route, model.mode, model.kind, result.eer)
    system = SystemResult(
        route=route, mode=model.mode, kind=model.kind, attributes=list(model.attributes),
        eer=result, importance=report, attribute_accuracy=attribute_accuracy or {},
    )
    return system, scores


def single_attribute_eer(attribute: str, route: str,
                         rows: Sequence[tuple[TrialPair, SimilarityVector]]) -> SingleAttributeResult:
    """EER when one similarity component is the whole score."""
    if not rows:
        raise MetricError("no trials to evaluate")
    if attribute not in rows[0][1].attributes:
        raise MetricError(f"unknown attribute '{attribute}'")
    values = np.array([mask(sv, [attribute]).values[0] for _, sv in rows])
    targets = np.array([t.target for t, _ in rows])
    result = equal_error_rate(curve_from_arrays(values, targets))
    return SingleAttributeResult(route=route, mode=rows[0][1].mode, attribute=attribute, eer=result)


class ErrorOverlap(BaseModel):
    system_a: str
    system_b: str
    total: int
    shared: int
    only_a: int
    only_b: int


def misclassified(scores: Sequence[TrialScore], threshold: float) -> set[tuple[str, str, bool]]:
    return {
        (s.trial.clip_a, s.trial.clip_b, s.trial.target)
        for s in scores
        if (s.score >= threshold) != s.trial.target
    }


def compare_errors(name_a: str, scores_a: Sequence[TrialScore], eer_a: EerResult,
                   name_b: str, scores_b: Sequence[TrialScore], eer_b: EerResult) -> ErrorOverlap:
    """Which trials two systems get wrong at their own EER thresholds."""
    keys_a = {(s.trial.clip_a, s.trial.clip_b, s.trial.target) for s in scores_a}
    keys_b = {(s.trial.clip_a, s.trial.clip_b, s.trial.target) for s in scores_b}
    if keys_a != keys_b:
        raise MetricError(f"{name_a} and {name_b} were scored on different trial lists")
    wrong_a = misclassified(scores_a, eer_a.threshold)
    wrong_b = misclassified(scores_b, eer_b.threshold)
    return ErrorOverlap(
        system_a=name_a, system_b=name_b, total=len(keys_a),
        shared=len(wrong_a & wrong_b), only_a=len(wrong_a - wrong_b), only_b=len(wrong_b - wrong_a),
    )


class EvalReport(BaseModel):
    fingerprint: str
    version: str
    seed: int
    schema_hash: str
    attributes: list[str]
    trial_counts: dict[str, int]
    attribute_accuracy: dict[str, dict[str, float]]
    random_accuracy: dict[str, float]
    systems: list[SystemResult]
    single_attribute: list[SingleAttributeResult] = []
    error_overlap: list[ErrorOverlap] = []
    reference_baselines: dict[str, float] = REFERENCE_BASELINES

    def eer(self, route: str, mode: str, kind: str) -> float:
        for s in self.systems:
            if (s.route, s.mode, s.kind) == (route, mode, kind):
                return s.eer.eer
        raise KeyError((route, mode, kind))


def grid_columns(systems: Sequence[SystemResult]) -> list[tuple[str, str]]:
    """Groundtruth, then every route under softmax, then under hard, then Random."""
    seen = []
    for s in systems:
        if (s.route, s.mode) not in seen:
            seen.append((s.route, s.mode))
    baseline = {"groundtruth": 0, "random": 3}
    mode_rank = {"softmax": 1, "hard": 2}

    def rank(col: tuple[str, str]) -> int:
        return baseline.get(col[0], mode_rank.get(col[1], 2))

    return sorted(seen, key=rank)


def eer_grid_csv(report: EvalReport) -> str:
    columns = grid_columns(report.systems)
    kinds = []
    for s in report.systems:
        if s.kind not in kinds:
            kinds.append(s.kind)
    cells = {(s.route, s.mode, s.kind): s.eer.eer for s in report.systems}

    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    header = ["model"]
    for route, mode in columns:
        header.append(route if route in ("groundtruth", "random") else f"{route}-{mode}")
    writer.writerow(header)
    for kind in kinds:
        row = [kind]
        for route, mode in columns:
            value = cells.get((route, mode, kind))
            row.append("" if value is None else f"{value:.4f}")
        writer.writerow(row)
    return out.getvalue()
