import numpy as np
import pytest
from attrsv.models import (
    AttributeOutputs,
    AttributePrediction,
    AttributeSchema,
    ProbabilityVector,
    TrialPair,
)
from attrsv.similarity import (
    SchemaMismatchError,
    cosine,
    format_vectors,
    groundtruth_similarity,
    hard_similarity,
    mask,
    random_similarity,
    read_vectors,
    similarity,
    softmax_similarity,
)
from tests.conftest import make_records


def _one_hot(k, i):
    p = [0.0] * k
    p[i] = 1.0
    return tuple(p)


def _outputs(schema, classes, clip_id="c", probs=None):
    probs = probs or {}
    predictions = []
    for spec, cls in zip(schema.attributes, classes):
        p = probs.get(spec.name, _one_hot(len(spec.classes), cls))
        predictions.append(AttributePrediction(attribute=spec.name, class_index=cls,
                                               probs=ProbabilityVector(probs=p)))
    return AttributeOutputs(clip_id=clip_id, schema_hash=schema.schema_hash(), predictions=predictions)


def test_hard_identical_outputs_are_all_ones(schema):
    a = _outputs(schema, (1, 3, 2, 7))
    assert hard_similarity(a, a).values == (1.0, 1.0, 1.0, 1.0)


def test_hard_componentwise(schema):
    a = _outputs(schema, (0, 1, 2, 3))
    b = _outputs(schema, (0, 7, 2, 9))
    sv = hard_similarity(a, b)
    assert sv.values == (1.0, 0.0, 1.0, 0.0)
    assert sv.attributes == ("gender", "nationality", "age", "profession")
    assert sv.mode == "hard"
    assert sv.schema_hash == schema.schema_hash()


def test_softmax_identical_distributions(schema):
    probs = {"gender": (0.3, 0.7), "age": (0.1, 0.2, 0.3, 0.2, 0.1, 0.1)}
    a = _outputs(schema, (1, 0, 2, 0), probs=probs)
    assert np.allclose(softmax_similarity(a, a).values, 1.0, atol=1e-9)


def test_softmax_orthogonal_one_hots(schema):
    a = _outputs(schema, (0, 0, 0, 0))
    b = _outputs(schema, (1, 0, 0, 0))
    assert softmax_similarity(a, b).values[0] == 0.0


def test_softmax_hand_computed_cosine(schema):
    a = _outputs(schema, (0, 0, 0, 0), probs={"gender": (0.6, 0.4)})
    b = _outputs(schema, (1, 0, 0, 0), probs={"gender": (0.4, 0.6)})
    assert softmax_similarity(a, b).values[0] == pytest.approx(0.9231, abs=1e-4)


def test_softmax_equals_hard_on_one_hots(schema):
    a = _outputs(schema, (0, 5, 2, 3))
    b = _outputs(schema, (0, 4, 2, 9))
    assert softmax_similarity(a, b).values == hard_similarity(a, b).values


def test_cosine_properties_on_random_vectors():
    rng = np.random.default_rng(0)
    for _ in range(10_000):
        k = int(rng.integers(2, 12))
        p = rng.dirichlet(np.ones(k))
        q = rng.dirichlet(np.ones(k))
        s = cosine(p, q)
        assert 0.0 <= s <= 1.0
        assert s == cosine(q, p)
        assert cosine(p, p) == 1.0


def test_similarity_is_symmetric(schema):
    rng = np.random.default_rng(1)
    for _ in range(200):
        probs_a = {s.name: tuple(rng.dirichlet(np.ones(len(s.classes)))) for s in schema.attributes}
        probs_b = {s.name: tuple(rng.dirichlet(np.ones(len(s.classes)))) for s in schema.attributes}
        a = _outputs(schema, tuple(int(np.argmax(probs_a[n])) for n in schema.names), "a", probs_a)
        b = _outputs(schema, tuple(int(np.argmax(probs_b[n])) for n in schema.names), "b", probs_b)
        for mode in ("hard", "softmax"):
            assert similarity(a, b, mode).values == similarity(b, a, mode).values


def test_schema_mismatch_rejected(schema):
    other = AttributeSchema.default(k_pro=12)
    with pytest.raises(SchemaMismatchError, match="different schemas"):
        hard_similarity(_outputs(schema, (0, 0, 0, 0)), _outputs(other, (0, 0, 0, 0)))


def test_groundtruth_examples(schema):
    base = {"gender": 0, "nationality": 1, "age": 2, "profession": 3}
    same, other = make_records([base, {**base, "profession": 4}])
    assert groundtruth_similarity(same, same, schema).values == (1.0, 1.0, 1.0, 1.0)
    assert groundtruth_similarity(same, other, schema).values == (1.0, 1.0, 1.0, 0.0)


def test_groundtruth_needs_complete_labels(schema):
    partial, full = make_records([{"gender": 0}, {"gender": 0, "nationality": 0, "age": 0, "profession": 0}])
    with pytest.raises(SchemaMismatchError, match="do not match schema"):
        groundtruth_similarity(partial, full, schema)


def test_random_single_class_always_collides():
    schema = AttributeSchema.from_counts({"gender": 2})
    forced = [ProbabilityVector(probs=(1.0,))]
    assert all(random_similarity(schema, forced, seed).values == (1.0,) for seed in range(50))


def test_random_uniform_gender_collides_half_the_time():
    schema = AttributeSchema.from_counts({"gender": 2})
    uniform = [ProbabilityVector(probs=(0.5, 0.5))]
    hits = [random_similarity(schema, uniform, seed).values[0] for seed in range(10_000)]
    assert np.mean(hits) == pytest.approx(0.5, abs=0.02)


def test_random_is_seeded(schema):
    dists = [ProbabilityVector(probs=tuple(np.full(len(s.classes), 1.0 / len(s.classes)))) for s in schema.attributes]
    assert random_similarity(schema, dists, 3) == random_similarity(schema, dists, 3)


def test_random_distribution_count_must_match(schema):
    with pytest.raises(SchemaMismatchError, match="distributions"):
        random_similarity(schema, [ProbabilityVector(probs=(0.5, 0.5))], 0)


def test_mask_keeps_schema_order(schema):
    sv = hard_similarity(_outputs(schema, (0, 1, 2, 3)), _outputs(schema, (0, 2, 2, 4)))
    masked = mask(sv, ["profession", "gender"])
    assert masked.attributes == ("gender", "profession")
    assert masked.values == (1.0, 0.0)
    with pytest.raises(SchemaMismatchError, match="height"):
        mask(sv, ["height"])


def test_vector_dump_roundtrip(tmp_path, schema):
    a = _outputs(schema, (0, 1, 2, 3), probs={"gender": (0.6, 0.4)})
    b = _outputs(schema, (0, 2, 2, 3), probs={"gender": (0.4, 0.6)})
    rows = [(TrialPair(clip_a="x", clip_b="y", target=True), softmax_similarity(a, b))]
    (tmp_path / "v.jsonl").write_text(format_vectors(rows))
    assert read_vectors(tmp_path / "v.jsonl", schema.schema_hash()) == rows
    with pytest.raises(SchemaMismatchError, match="does not match"):
        read_vectors(tmp_path / "v.jsonl", "0000")
