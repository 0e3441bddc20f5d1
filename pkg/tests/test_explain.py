import json
import numpy as np
import pytest
from attrsv.config import ForestConfig
from attrsv.explain import GLOBAL_CAPTION, build_explanation, render_explanation
from attrsv.models import Explanation, ImportanceReport, SimilarityVector, TrialPair
from attrsv.similarity import SchemaMismatchError
from attrsv.verifier import LinearModel, TrainingSet, fit_forest, importance

ATTRS = ("gender", "nationality", "age", "profession")
CLASSES_A = {"gender": "female", "nationality": "nat03", "age": "age2", "profession": "pro01"}
CLASSES_B = {"gender": "female", "nationality": "nat05", "age": "age2", "profession": "pro04"}
TRIAL = TrialPair(clip_a="spk001-c00", clip_b="spk002-c01", target=False)


def _sv(values, mode="softmax"):
    return SimilarityVector(values=tuple(values), attributes=ATTRS, mode=mode, schema_hash="h")


def _logreg():
    return LinearModel("logreg", np.array([0.1, 0.2, 0.3, 0.1, 0.2]), attributes=ATTRS, schema_hash="h",
                       mode="softmax")


def _forest():
    rng = np.random.default_rng(0)
    X = rng.random((200, 4))
    data = TrainingSet(X=X, y=(X[:, 3] > 0.5).astype(float), attributes=ATTRS, schema_hash="h", mode="softmax")
    return fit_forest(data, ForestConfig(n_trees=3, max_depth=2, feature_subsample="all"))


def _explain(model, sv, threshold=0.5):
    return build_explanation(TRIAL, "ac", model, sv, CLASSES_A, CLASSES_B, importance(model), threshold)


def test_linear_contributions_add_up_to_pre_activation():
    model = _logreg()
    sv = _sv([0.9, 0.2, 0.7, 0.1])
    e = _explain(model, sv)
    total = sum(a.contribution for a in e.attributes)
    assert total == pytest.approx(model.pre_activation(sv.as_array()[None, :])[0] - e.intercept)
    assert e.intercept == pytest.approx(0.1)
    assert [a.contribution for a in e.attributes] == pytest.approx([0.18, 0.06, 0.07, 0.02])


def test_linear_explanation_fields():
    e = _explain(_logreg(), _sv([0.9, 0.2, 0.7, 0.1]), threshold=0.99)
    assert e.kind == "logreg"
    assert e.mode == "softmax"
    assert e.decision == "different speakers"
    assert 0.0 < e.score < 1.0
    gender = e.attributes[0]
    assert (gender.class_a, gender.class_b, gender.similarity) == ("female", "female", 0.9)
    assert sum(a.importance for a in e.attributes) == pytest.approx(1.0)


def test_decision_at_threshold_is_same_speaker():
    e = _explain(_logreg(), _sv([1, 1, 1, 1]), threshold=0.0)
    assert e.decision == "same speaker"


def test_forest_explanation_has_no_contributions():
    e = _explain(_forest(), _sv([0.9, 0.2, 0.7, 0.1]))
    assert e.intercept is None
    assert all(a.contribution is None for a in e.attributes)
    assert max(e.attributes, key=lambda a: a.importance).attribute == "profession"


def test_text_lists_least_similar_first():
    text = render_explanation(_explain(_logreg(), _sv([0.9, 0.2, 0.7, 0.1])))
    order = [text.index(f"- {name}:") for name in ("profession", "nationality", "age", "gender")]
    assert order == sorted(order)
    assert "Intercept: +0.1000" in text
    assert "contribution +0.1800" in text
    assert GLOBAL_CAPTION not in text


def test_text_for_forest_carries_global_caption():
    text = render_explanation(_explain(_forest(), _sv([0.9, 0.2, 0.7, 0.1])))
    assert GLOBAL_CAPTION in text
    assert "contribution" not in text
    assert "Intercept" not in text


def test_json_roundtrip():
    e = _explain(_logreg(), _sv([0.9, 0.2, 0.7, 0.1]))
    rendered = render_explanation(e, format="json")
    assert json.loads(rendered)["decision"] == e.decision
    assert Explanation.model_validate_json(rendered) == e


def test_foreign_vector_rejected():
    foreign = SimilarityVector(values=(1, 1, 1, 1), attributes=ATTRS, mode="softmax", schema_hash="other")
    report = ImportanceReport(kind="logreg", method="uniform", attributes=list(ATTRS), weights=[0.25] * 4)
    with pytest.raises(SchemaMismatchError):
        build_explanation(TRIAL, "ac", _logreg(), foreign, CLASSES_A, CLASSES_B, report, 0.5)
