from __future__ import annotations
import hashlib
import json
from typing import Literal, Optional
import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from attrsv.config import DEFAULT_ATTRIBUTES


class AudioClip(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    samples: np.ndarray
    sample_rate: int = Field(gt=0)
    source_id: str = ""

    @field_validator("samples", mode="before")
    @classmethod
    def check_samples(cls, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64)
        if v.ndim != 1:
            raise ValueError("samples must be a mono 1-D array")
        if not np.all(np.isfinite(v)):
            raise ValueError("samples must be finite")
        if v.size and np.max(np.abs(v)) > 1.0:
            raise ValueError("samples must lie within [-1.0, 1.0]")
        return v

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate


class MfccMatrix(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    values: np.ndarray
    frame_length_ms: float = 25.0
    frame_hop_ms: float = 10.0

    @field_validator("values", mode="before")
    @classmethod
    def check_values(cls, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64)
        if v.ndim != 2:
            raise ValueError("values must be a frames x n_coeffs matrix")
        if not np.all(np.isfinite(v)):
            raise ValueError("MFCC values must be finite")
        return v

    @property
    def frames(self) -> int:
        return self.values.shape[0]

    @property
    def n_coeffs(self) -> int:
        return self.values.shape[1]


class AttributeSpec(BaseModel):
    name: str
    classes: list[str]

    @field_validator("classes", mode="after")
    @classmethod
    def check_classes(cls, v: list[str]) -> list[str]:
        if len(v) < 2:
            raise ValueError("every attribute needs at least 2 classes")
        if len(set(v)) != len(v):
            raise ValueError("class labels must be unique")
        return v


class AttributeSchema(BaseModel):
    attributes: list[AttributeSpec]

    @field_validator("attributes", mode="after")
    @classmethod
    def check_unique(cls, v: list[AttributeSpec]) -> list[AttributeSpec]:
        names = [a.name for a in v]
        if len(set(names)) != len(names):
            raise ValueError("attribute names must be unique")
        return v

    @classmethod
    def from_counts(cls, counts: dict[str, int]) -> AttributeSchema:
        return cls(attributes=[
            AttributeSpec(name=name, classes=[f"{name}-{i}" for i in range(k)])
            for name, k in counts.items()
        ])

    @classmethod
    def default(cls, k_nat: int = 8, k_age: int = 6, k_pro: int = 10) -> AttributeSchema:
        counts = dict(zip(DEFAULT_ATTRIBUTES, (2, k_nat, k_age, k_pro)))
        return cls.from_counts(counts)

    @property
    def names(self) -> list[str]:
        return [a.name for a in self.attributes]

    def spec(self, name: str) -> AttributeSpec:
        for a in self.attributes:
            if a.name == name:
                return a
        raise KeyError(name)

    def class_count(self, name: str) -> int:
        return len(self.spec(name).classes)

    def schema_hash(self) -> str:
        canonical = json.dumps(self.model_dump(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()[:16]


class ClipRef(BaseModel):
    id: str
    path: str


class SpeakerRecord(BaseModel):
    speaker_id: str
    labels: dict[str, int]
    clips: list[ClipRef] = Field(default_factory=list)

    @field_validator("clips", mode="after")
    @classmethod
    def check_clip_ids(cls, v: list[ClipRef]) -> list[ClipRef]:
        ids = [c.id for c in v]
        if len(set(ids)) != len(ids):
            raise ValueError("clip ids must be unique within a speaker")
        return v

    @property
    def clip_ids(self) -> list[str]:
        return [c.id for c in self.clips]


class TrialPair(BaseModel):
    model_config = ConfigDict(frozen=True)

    clip_a: str
    clip_b: str
    target: bool

    @model_validator(mode="after")
    def check_distinct(self) -> TrialPair:
        if self.clip_a == self.clip_b:
            raise ValueError(f"trial pairs a clip with itself: {self.clip_a}")
        return self


class TrialSet(BaseModel):
    trials: list[TrialPair]
    # set when a pool ran out and the remainder was drawn with replacement
    positives_resampled: bool = False
    negatives_resampled: bool = False


class EmbeddingVector(BaseModel):
    clip_id: str
    dim: int = Field(gt=0)
    values: list[float]
    source_tag: str = ""

    @model_validator(mode="after")
    def check_values(self) -> EmbeddingVector:
        if len(self.values) != self.dim:
            raise ValueError(f"embedding for {self.clip_id} has {len(self.values)} values, dim says {self.dim}")
        if not all(np.isfinite(self.values)):
            raise ValueError(f"embedding for {self.clip_id} has non-finite values")
        return self


class ProbabilityVector(BaseModel):
    probs: tuple[float, ...]

    @field_validator("probs", mode="after")
    @classmethod
    def check_probs(cls, v: tuple[float, ...]) -> tuple[float, ...]:
        if not v:
            raise ValueError("probability vector is empty")
        if any(not (0.0 <= p <= 1.0) for p in v):
            raise ValueError("probabilities must lie in [0, 1]")
        if abs(sum(v) - 1.0) > 1e-6:
            raise ValueError(f"probabilities sum to {sum(v)}, not 1")
        return v

    def as_array(self) -> np.ndarray:
        return np.asarray(self.probs, dtype=np.float64)

    def __len__(self) -> int:
        return len(self.probs)


class AttributePrediction(BaseModel):
    attribute: str
    class_index: int
    probs: ProbabilityVector


class AttributeOutputs(BaseModel):
    clip_id: str
    schema_hash: str
    predictions: list[AttributePrediction]

    def by_attribute(self) -> dict[str, AttributePrediction]:
        return {p.attribute: p for p in self.predictions}


class SimilarityVector(BaseModel):
    values: tuple[float, ...]
    attributes: tuple[str, ...]
    mode: Literal["hard", "softmax"]
    schema_hash: str

    @model_validator(mode="after")
    def check_range(self) -> SimilarityVector:
        if len(self.values) != len(self.attributes):
            raise ValueError("one similarity value per attribute is required")
        if self.mode == "hard" and any(v not in (0.0, 1.0) for v in self.values):
            raise ValueError("hard similarity components must be 0 or 1")
        if any(not (0.0 <= v <= 1.0) for v in self.values):
            raise ValueError("similarity components must lie in [0, 1]")
        return self

    def as_array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=np.float64)


class TrialScore(BaseModel):
    trial: TrialPair
    score: float

    @field_validator("score", mode="after")
    @classmethod
    def check_finite(cls, v: float) -> float:
        if not np.isfinite(v):
            raise ValueError("score must be finite")
        return v


class ImportanceReport(BaseModel):
    kind: str
    method: Literal["coefficient", "impurity", "permutation", "uniform"]
    attributes: list[str]
    weights: list[float]

    @model_validator(mode="after")
    def check_weights(self) -> ImportanceReport:
        if len(self.weights) != len(self.attributes):
            raise ValueError("one importance weight per attribute is required")
        if any(w < 0 for w in self.weights) or abs(sum(self.weights) - 1.0) > 1e-6:
            raise ValueError("importance weights must be non-negative and sum to 1")
        return self

    def as_dict(self) -> dict[str, float]:
        return dict(zip(self.attributes, self.weights))


class ErrorCurve(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    thresholds: np.ndarray
    far: np.ndarray
    frr: np.ndarray
    n_pos: int
    n_neg: int

    @model_validator(mode="after")
    def check_monotone(self) -> ErrorCurve:
        if not (self.thresholds.shape == self.far.shape == self.frr.shape):
            raise ValueError("thresholds, FAR and FRR must have equal length")
        if np.any(np.diff(self.far) > 0) or np.any(np.diff(self.frr) < 0):
            raise ValueError("FAR must be non-increasing and FRR non-decreasing in the threshold")
        return self


class EerResult(BaseModel):
    eer: float = Field(ge=0.0, le=1.0)
    threshold: float
    n_pos: int
    n_neg: int
    # only two distinct scores: the crossing is interpolated on a two-point curve
    degenerate: bool = False


class AttributeExplanation(BaseModel):
    attribute: str
    class_a: str
    class_b: str
    similarity: float
    importance: float
    contribution: Optional[float] = None


class Explanation(BaseModel):
    trial: TrialPair
    route: str
    mode: str
    kind: str
    attributes: list[AttributeExplanation]
    intercept: Optional[float] = None
    score: float
    threshold: float
    decision: Literal["same speaker", "different speakers"]
    schema_hash: str
