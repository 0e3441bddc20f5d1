from __future__ import annotations
from typing import Literal
from attrsv.models import (
    AttributeExplanation,
    Explanation,
    ImportanceReport,
    SimilarityVector,
    TrialPair,
)
from attrsv.verifier import LinearModel, StageTwoModel

GLOBAL_CAPTION = "global importance, not per-trial attribution"


def build_explanation(
    trial: TrialPair,
    route: str,
    model: StageTwoModel,
    sv: SimilarityVector,
    classes_a: dict[str, str],
    classes_b: dict[str, str],
    importance: ImportanceReport,
    threshold: float,
) -> Explanation:
    model.check_vector(sv)
    weights = importance.as_dict()
    linear = isinstance(model, LinearModel)
    rows = []
    for i, name in enumerate(sv.attributes):
        rows.append(AttributeExplanation(
            attribute=name,
            class_a=classes_a[name],
            class_b=classes_b[name],
            similarity=sv.values[i],
            importance=weights.get(name, 0.0),
            contribution=float(model.coefficients[i] * sv.values[i]) if linear else None,
        ))
    score = float(model.score_matrix(sv.as_array()[None, :])[0])
    return Explanation(
        trial=trial,
        route=route,
        mode=sv.mode,
        kind=model.kind,
        attributes=rows,
        intercept=model.intercept if linear else None,
        score=score,
        threshold=threshold,
        decision="same speaker" if score >= threshold else "different speakers",
        schema_hash=sv.schema_hash,
    )


def _signed(value: float) -> str:
    return f"{value:+.4f}"


def render_explanation(e: Explanation, format: Literal["text", "json"] = "text") -> str:
    if format == "json":
        return e.model_dump_json(indent=2)

    lines = [
        f"Trial: {e.trial.clip_a} vs {e.trial.clip_b}",
        f"System: {e.route} / {e.mode} / {e.kind}",
        "",
    ]
    linear = e.intercept is not None
    if not linear:
        lines.append(f"Attribute weights are {GLOBAL_CAPTION}.")
    # least similar attribute first: that is where a rejection comes from
    for attr in sorted(e.attributes, key=lambda a: a.similarity):
        line = (
            f"- {attr.attribute}: {attr.class_a} vs {attr.class_b}  "
            f"similarity {attr.similarity:.4f}  importance {attr.importance:.4f}"
        )
        if attr.contribution is not None:
            line += f"  contribution {_signed(attr.contribution)}"
        lines.append(line)
    lines.append("")
    if linear:
        lines.append(f"Intercept: {_signed(e.intercept)}")
    lines.append(f"Score: {e.score:.4f} (threshold {e.threshold:.4f})")
    lines.append(f"Decision: {e.decision}")
    return "\n".join(lines)
