from __future__ import annotations
import logging
from pathlib import Path
from typing import Literal, Optional, Sequence
import numpy as np
from pydantic import BaseModel, ValidationError
from attrsv.errors import DataError
from attrsv.models import (
    AttributeOutputs,
    AttributeSchema,
    ProbabilityVector,
    SimilarityVector,
    SpeakerRecord,
    TrialPair,
)

logger = logging.getLogger(__name__)

COSINE_GUARD = 1e-12


class SchemaMismatchError(DataError):
    pass


def _check_pair(a: AttributeOutputs, b: AttributeOutputs) -> tuple[str, ...]:
    if a.schema_hash != b.schema_hash:
        raise SchemaMismatchError(
            f"clips {a.clip_id} and {b.clip_id} were scored under different schemas "
            f"({a.schema_hash} vs {b.schema_hash})"
        )
    names_a = tuple(p.attribute for p in a.predictions)
    names_b = tuple(p.attribute for p in b.predictions)
    if names_a != names_b:
        raise SchemaMismatchError(f"attribute order differs: {names_a} vs {names_b}")
    return names_a


def cosine(p: np.ndarray, q: np.ndarray) -> float:
    denom = np.sqrt(np.dot(p, p) * np.dot(q, q))
    return float(min(np.dot(p, q) / max(denom, COSINE_GUARD), 1.0))


def hard_similarity(a: AttributeOutputs, b: AttributeOutputs) -> SimilarityVector:
    names = _check_pair(a, b)
    values = tuple(
        1.0 if pa.class_index == pb.class_index else 0.0
        for pa, pb in zip(a.predictions, b.predictions)
    )
    return SimilarityVector(values=values, attributes=names, mode="hard", schema_hash=a.schema_hash)


def softmax_similarity(a: AttributeOutputs, b: AttributeOutputs) -> SimilarityVector:
    names = _check_pair(a, b)
    values = []
    for pa, pb in zip(a.predictions, b.predictions):
        if len(pa.probs) != len(pb.probs):
            raise SchemaMismatchError(
                f"'{pa.attribute}' probability vectors have {len(pa.probs)} and {len(pb.probs)} classes"
            )
        values.append(cosine(pa.probs.as_array(), pb.probs.as_array()))
    return SimilarityVector(values=tuple(values), attributes=names, mode="softmax", schema_hash=a.schema_hash)


def similarity(a: AttributeOutputs, b: AttributeOutputs, mode: Literal["hard", "softmax"]) -> SimilarityVector:
    return hard_similarity(a, b) if mode == "hard" else softmax_similarity(a, b)


def groundtruth_similarity(rec_a: SpeakerRecord, rec_b: SpeakerRecord, schema: AttributeSchema) -> SimilarityVector:
    """Hard similarity of the manifest labels, bypassing the stage-1 classifiers."""
    for rec in (rec_a, rec_b):
        if set(rec.labels) != set(schema.names):
            raise SchemaMismatchError(
                f"speaker {rec.speaker_id} labels {sorted(rec.labels)} do not match schema {schema.names}"
            )
    values = tuple(1.0 if rec_a.labels[n] == rec_b.labels[n] else 0.0 for n in schema.names)
    return SimilarityVector(values=values, attributes=tuple(schema.names), mode="hard",
                            schema_hash=schema.schema_hash())


def random_similarity(schema: AttributeSchema, distributions: Sequence[ProbabilityVector],
                      seed: int) -> SimilarityVector:
    """Draw two labels per attribute from its label distribution; 1.0 when they collide."""
    if len(distributions) != len(schema.attributes):
        raise SchemaMismatchError(f"{len(distributions)} distributions given for {len(schema.attributes)} attributes")
    rng = np.random.default_rng(seed)
    values = []
    for spec, dist in zip(schema.attributes, distributions):
        p = dist.as_array()
        if p.size not in (1, len(spec.classes)):
            raise SchemaMismatchError(
                f"distribution for '{spec.name}' has {p.size} entries, schema has {len(spec.classes)} classes"
            )
        first, second = rng.choice(p.size, size=2, p=p)
        values.append(1.0 if first == second else 0.0)
    return SimilarityVector(values=tuple(values), attributes=tuple(schema.names), mode="hard",
                            schema_hash=schema.schema_hash())


def mask(sv: SimilarityVector, attributes: Sequence[str]) -> SimilarityVector:
    """Keep only the named components, in schema order."""
    unknown = set(attributes) - set(sv.attributes)
    if unknown:
        raise SchemaMismatchError(f"unknown attributes {sorted(unknown)}; vector has {list(sv.attributes)}")
    keep = [i for i, name in enumerate(sv.attributes) if name in attributes]
    return SimilarityVector(
        values=tuple(sv.values[i] for i in keep),
        attributes=tuple(sv.attributes[i] for i in keep),
        mode=sv.mode,
        schema_hash=sv.schema_hash,
    )


class VectorRecord(BaseModel):
    trial: tuple[str, str]
    target: int
    mode: Literal["hard", "softmax"]
    values: list[float]
    attributes: list[str]
    schema_hash: str


def format_vectors(rows: Sequence[tuple[TrialPair, SimilarityVector]]) -> str:
    lines = []
    for trial, sv in rows:
        record = VectorRecord(
            trial=(trial.clip_a, trial.clip_b), target=int(trial.target), mode=sv.mode,
            values=list(sv.values), attributes=list(sv.attributes), schema_hash=sv.schema_hash,
        )
        lines.append(record.model_dump_json() + "\n")
    return "".join(lines)


def read_vectors(path: Path | str, expected_hash: Optional[str] = None) -> list[tuple[TrialPair, SimilarityVector]]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"Similarity dump not found: {path}")
    rows = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = VectorRecord.model_validate_json(line)
            trial = TrialPair(clip_a=rec.trial[0], clip_b=rec.trial[1], target=bool(rec.target))
            sv = SimilarityVector(values=tuple(rec.values), attributes=tuple(rec.attributes),
                                  mode=rec.mode, schema_hash=rec.schema_hash)
        except ValidationError as e:
            raise DataError(f"{path}:{lineno}: invalid similarity record: {e}") from e
        if expected_hash is not None and sv.schema_hash != expected_hash:
            raise SchemaMismatchError(
                f"{path}:{lineno}: schema hash {sv.schema_hash} does not match {expected_hash}"
            )
        rows.append((trial, sv))
    return rows
