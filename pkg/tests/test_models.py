import numpy as np
import pytest
from pydantic import ValidationError
from attrsv.models import (
    AttributeSchema,
    AttributeSpec,
    AudioClip,
    EmbeddingVector,
    ImportanceReport,
    MfccMatrix,
    ProbabilityVector,
    SimilarityVector,
    SpeakerRecord,
    ClipRef,
    TrialPair,
)


def test_default_schema_layout(schema):
    assert schema.names == ["gender", "nationality", "age", "profession"]
    assert [schema.class_count(n) for n in schema.names] == [2, 8, 6, 10]
    assert schema.spec("gender").classes == ["gender-0", "gender-1"]


def test_schema_hash_changes_with_classes():
    assert AttributeSchema.default().schema_hash() == AttributeSchema.default().schema_hash()
    assert AttributeSchema.default(k_pro=12).schema_hash() != AttributeSchema.default().schema_hash()


def test_schema_json_roundtrip(schema):
    loaded = AttributeSchema.model_validate_json(schema.model_dump_json())
    assert loaded.schema_hash() == schema.schema_hash()


def test_attribute_needs_two_classes():
    with pytest.raises(ValidationError, match="at least 2 classes"):
        AttributeSpec(name="gender", classes=["only"])


def test_duplicate_attribute_names_rejected():
    spec = AttributeSpec(name="age", classes=["young", "old"])
    with pytest.raises(ValidationError, match="unique"):
        AttributeSchema(attributes=[spec, spec])


def test_unknown_attribute_lookup_raises(schema):
    with pytest.raises(KeyError):
        schema.spec("height")


def test_audio_clip_rejects_out_of_range_samples():
    with pytest.raises(ValidationError, match=r"\[-1.0, 1.0\]"):
        AudioClip(samples=[0.0, 1.5], sample_rate=16000)


def test_audio_clip_rejects_stereo_array():
    with pytest.raises(ValidationError, match="mono"):
        AudioClip(samples=np.zeros((10, 2)), sample_rate=16000)


def test_audio_clip_duration():
    assert AudioClip(samples=np.zeros(8000), sample_rate=16000).duration_s == 0.5


def test_mfcc_matrix_must_be_finite():
    with pytest.raises(ValidationError, match="finite"):
        MfccMatrix(values=[[0.0, np.nan]])


def test_probability_vector_must_sum_to_one():
    with pytest.raises(ValidationError, match="sum"):
        ProbabilityVector(probs=(0.5, 0.6))
    assert len(ProbabilityVector(probs=(0.25, 0.75))) == 2


def test_trial_pair_rejects_self_pair():
    with pytest.raises(ValidationError, match="itself"):
        TrialPair(clip_a="x", clip_b="x", target=True)


def test_trial_pair_is_hashable():
    a = TrialPair(clip_a="x", clip_b="y", target=False)
    assert {a, TrialPair(clip_a="x", clip_b="y", target=False)} == {a}


def test_speaker_clip_ids_unique():
    clip = ClipRef(id="c", path="c.wav")
    with pytest.raises(ValidationError, match="unique"):
        SpeakerRecord(speaker_id="s", labels={}, clips=[clip, clip])


def test_embedding_dim_must_match_values():
    with pytest.raises(ValidationError, match="dim says"):
        EmbeddingVector(clip_id="c", dim=3, values=[0.0, 1.0])


def test_hard_similarity_must_be_binary():
    with pytest.raises(ValidationError, match="0 or 1"):
        SimilarityVector(values=(0.5,), attributes=("gender",), mode="hard", schema_hash="h")
    sv = SimilarityVector(values=(0.5,), attributes=("gender",), mode="softmax", schema_hash="h")
    assert sv.as_array().tolist() == [0.5]


def test_importance_weights_must_be_normalized():
    with pytest.raises(ValidationError, match="sum to 1"):
        ImportanceReport(kind="linreg", method="coefficient", attributes=["a", "b"], weights=[0.5, 0.6])
    report = ImportanceReport(kind="linreg", method="coefficient", attributes=["a", "b"], weights=[0.25, 0.75])
    assert report.as_dict() == {"a": 0.25, "b": 0.75}
