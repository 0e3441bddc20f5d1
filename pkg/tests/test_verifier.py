import logging
import numpy as np
import pytest
from attrsv.config import ForestConfig, LogRegConfig, NnConfig
from attrsv.models import SimilarityVector, TrialPair
from attrsv.similarity import SchemaMismatchError
from attrsv.verifier import (
    FitError,
    LinearModel,
    RankDeficientError,
    TrainingSet,
    best_split,
    decode_model,
    encode_model,
    fit,
    fit_forest,
    fit_linreg,
    fit_logreg,
    fit_nn,
    importance,
    init_nn,
    logreg_loss_and_grad,
    nn_loss_and_grads,
    score,
    score_vectors,
)

ATTRS = ("gender", "nationality", "age", "profession")
HASH = "abc123"


def _data(X, y, attributes=ATTRS, mode="hard"):
    return TrainingSet(X=X, y=y, attributes=attributes, schema_hash=HASH, mode=mode)


def _sv(values, attributes=ATTRS, mode="hard"):
    return SimilarityVector(values=tuple(values), attributes=attributes, mode=mode, schema_hash=HASH)


def _trial(target=True):
    return TrialPair(clip_a="a", clip_b="b", target=target)


def _binary(n=200, seed=0):
    """Hard vectors where same-speaker trials match on most attributes."""
    rng = np.random.default_rng(seed)
    y = (np.arange(n) % 2).astype(float)
    match_prob = np.where(y[:, None] == 1, 0.9, np.array([0.5, 0.15, 0.2, 0.1]))
    X = (rng.random((n, 4)) < match_prob).astype(float)
    return _data(X, y)


def _profession_threshold(n=1000, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.random((n, 4))
    return _data(X, (X[:, 3] > 0.5).astype(float), mode="softmax")


def _model(kind, weights):
    return LinearModel(kind, np.array(weights, dtype=float), attributes=ATTRS, schema_hash=HASH, mode="hard")


def test_linreg_recovers_exact_target():
    rng = np.random.default_rng(0)
    X = rng.random((50, 4))
    model = fit_linreg(_data(X, X[:, 0], mode="softmax"))
    assert np.allclose(model.weights, [0, 1, 0, 0, 0], atol=1e-6)


def test_linreg_constant_target():
    X = np.random.default_rng(1).random((30, 4))
    model = fit_linreg(_data(X, np.full(30, 0.5), mode="softmax"))
    assert model.intercept == pytest.approx(0.5, abs=1e-9)
    assert np.allclose(model.coefficients, 0.0, atol=1e-9)


def test_linreg_matches_closed_form_in_one_dimension():
    x = np.array([0.0, 0.2, 0.4, 0.6, 0.8, 1.0])
    y = np.array([0.0, 0.0, 1.0, 0.0, 1.0, 1.0])
    slope = np.sum((x - x.mean()) * (y - y.mean())) / np.sum((x - x.mean()) ** 2)
    intercept = y.mean() - slope * x.mean()
    model = fit_linreg(_data(x[:, None], y, attributes=("gender",), mode="softmax"))
    assert model.intercept == pytest.approx(intercept, abs=1e-9)
    assert model.coefficients[0] == pytest.approx(slope, abs=1e-9)


def test_linreg_absorbs_constant_component(caplog):
    rng = np.random.default_rng(2)
    X = (rng.random((200, 4)) < 0.5).astype(float)
    X[:, 0] = 1.0
    data = _data(X, X[:, 3])
    with caplog.at_level(logging.WARNING):
        model = fit_linreg(data, seed=7)
    assert "gender" in caplog.text
    assert np.allclose(model.score_matrix(X), X[:, 3], atol=1e-6)
    assert model.coefficients[3] == pytest.approx(1.0, abs=1e-6)
    assert model.meta == {"seed": 7, "jitter": 1e-8}


def test_linreg_rank_deficiency_after_jitter_names_constant_component():
    X = np.random.default_rng(2).random((20, 4))
    X[:, 2] = 1e200
    with pytest.raises(RankDeficientError, match="age"):
        fit_linreg(_data(X, np.arange(20) % 2, mode="softmax"))


def test_linreg_needs_enough_rows():
    with pytest.raises(FitError, match="at least 5"):
        fit_linreg(_data(np.zeros((3, 4)), np.zeros(3)))


def test_linreg_scores_are_clamped():
    model = _model("linreg", [0.5, 1.0, 0.0, 0.0, 0.0])
    assert score(model, _sv([1, 0, 0, 0]), _trial()).score == 1.0
    assert model.score_matrix(np.array([[-1.0, 0, 0, 0]]))[0] == 0.0


def test_score_examples():
    assert score(_model("linreg", [0, 1, 0, 0, 0]), _sv([1, 0, 0, 0]), _trial()).score == 1.0
    zero = _model("logreg", [0, 0, 0, 0, 0])
    for values in ([0, 0, 0, 0], [1, 1, 1, 1], [1, 0, 1, 0]):
        assert score(zero, _sv(values), _trial()).score == 0.5


def test_score_rejects_foreign_vectors():
    model = _model("linreg", [0, 1, 0, 0, 0])
    foreign = SimilarityVector(values=(1, 0, 0, 0), attributes=ATTRS, mode="hard", schema_hash="other")
    with pytest.raises(SchemaMismatchError):
        score(model, foreign, _trial())
    with pytest.raises(SchemaMismatchError):
        score(model, _sv([1, 0], attributes=("gender", "age")), _trial())


def test_logreg_separable_data_is_perfectly_ranked():
    x = np.array([0.05, 0.1, 0.2, 0.3, 0.4, 0.6, 0.7, 0.8, 0.9, 0.95])
    y = (x > 0.5).astype(float)
    model = fit_logreg(_data(x[:, None], y, attributes=("gender",), mode="softmax"))
    scores = model.score_matrix(x[:, None])
    assert np.all(np.diff(scores) > 0)
    assert scores[y == 1].min() > scores[y == 0].max()


def test_logreg_symmetric_data_centres_on_half():
    x = np.array([0.6, 0.7, 0.8, 0.9, 0.4, 0.55])
    X = np.concatenate((x, 1 - x))[:, None]
    y = np.concatenate((np.ones(6), np.zeros(6)))
    model = fit_logreg(_data(X, y, attributes=("gender",), mode="softmax"), LogRegConfig(epochs=10_000))
    assert model.score_matrix(np.array([[0.5]]))[0] == pytest.approx(0.5, abs=1e-3)


@pytest.mark.parametrize("seed", range(20))
def test_logreg_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    A = np.column_stack((np.ones(40), rng.random((40, 4))))
    y = (rng.random(40) < 0.5).astype(float)
    w = rng.normal(0.0, 1.0, size=5)
    _, grad = logreg_loss_and_grad(w, A, y)
    eps = 1e-6
    for j in range(5):
        step = np.zeros(5)
        step[j] = eps
        numeric = (logreg_loss_and_grad(w + step, A, y)[0] - logreg_loss_and_grad(w - step, A, y)[0]) / (2 * eps)
        assert numeric == pytest.approx(grad[j], rel=1e-5, abs=1e-9)


def test_logreg_needs_both_classes():
    with pytest.raises(FitError, match="both"):
        fit_logreg(_data(np.zeros((4, 4)), np.ones(4)))


def test_forest_recovers_threshold_split():
    data = _profession_threshold()
    cfg = ForestConfig(n_trees=1, max_depth=1, min_leaf=1, feature_subsample="all", bootstrap=False)
    model = fit_forest(data, cfg)
    root = model.trees[0].nodes[0]
    assert root.feature == 3
    assert root.threshold == pytest.approx(0.5, abs=0.01)
    predicted = model.score_matrix(data.X) > 0.5
    assert np.mean(predicted == (data.y == 1)) >= 0.99


def test_forest_stump_scores_positive_rate():
    data = _binary(n=60)
    cfg = ForestConfig(n_trees=1, max_depth=0, bootstrap=False)
    model = fit_forest(data, cfg)
    assert np.all(model.score_matrix(data.X) == data.y.mean())


def _oracle_split(X, y):
    def gini(labels):
        if labels.size == 0:
            return 0.0
        p = labels.mean()
        return 2 * p * (1 - p)

    parent = gini(y)
    best = None
    for f in range(X.shape[1]):
        values = np.unique(X[:, f])
        feature_best = None
        for lo, hi in zip(values[:-1], values[1:]):
            threshold = 0.5 * (lo + hi)
            left = y[X[:, f] <= threshold]
            right = y[X[:, f] > threshold]
            gain = parent - (left.size * gini(left) + right.size * gini(right)) / y.size
            if feature_best is None or gain > feature_best[2]:
                feature_best = (f, threshold, gain)
        if feature_best and (best is None or feature_best[2] > best[2] + 1e-12):
            best = feature_best
    return best


@pytest.mark.parametrize("seed", range(5))
def test_first_split_matches_exhaustive_oracle(seed):
    rng = np.random.default_rng(seed)
    X = np.round(rng.random((30, 4)), 2)
    y = (X[:, 1] + 0.3 * rng.random(30) > 0.6).astype(float)
    f, threshold, gain = best_split(X, y, range(4))
    of, othreshold, ogain = _oracle_split(X, y)
    assert gain == pytest.approx(ogain, abs=1e-12)
    assert (f, threshold) == (of, pytest.approx(othreshold))


def test_forest_importance_concentrates_on_profession():
    model = fit_forest(_profession_threshold(), ForestConfig(n_trees=20, max_depth=3, feature_subsample="all"))
    assert importance(model).as_dict()["profession"] > 0.9


def test_forest_is_invariant_to_row_order():
    data = _binary()
    perm = np.random.default_rng(3).permutation(len(data))
    shuffled = _data(data.X[perm], data.y[perm])
    cfg = ForestConfig(n_trees=10, max_depth=4)
    a = fit_forest(data, cfg, seed=1).score_matrix(data.X)
    b = fit_forest(shuffled, cfg, seed=1).score_matrix(data.X)
    assert np.array_equal(a, b)


def test_linreg_is_invariant_to_row_order():
    data = _binary()
    perm = np.random.default_rng(4).permutation(len(data))
    a = fit_linreg(data).weights
    b = fit_linreg(_data(data.X[perm], data.y[perm])).weights
    assert np.allclose(a, b, atol=1e-12)


def test_nn_learns_parity():
    X = np.array([[0, 0], [0, 1], [1, 0], [1, 1]] * 4, dtype=float)
    y = (X[:, 0] != X[:, 1]).astype(float)
    data = _data(X, y, attributes=("gender", "nationality"))
    cfg = NnConfig(hidden_units=8, epochs=4000, learning_rate=2.0)
    accuracies = []
    for seed in range(5):
        model = fit_nn(data, cfg, seed=seed)
        accuracies.append(np.mean((model.score_matrix(X) > 0.5) == (y == 1)))
    assert max(accuracies) == 1.0


def test_nn_zero_epochs_depends_only_on_seed():
    data = _binary(n=40)
    a = fit_nn(data, NnConfig(epochs=0), seed=3).score_matrix(data.X)
    b = fit_nn(data, NnConfig(epochs=0), seed=3).score_matrix(data.X)
    c = fit_nn(data, NnConfig(epochs=0), seed=4).score_matrix(data.X)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


@pytest.mark.parametrize("seed", range(20))
def test_nn_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(300 + seed)
    X = rng.random((16, 4))
    y = (rng.random(16) < 0.5).astype(float)
    params = init_nn(4, 6, seed=seed)
    params["b1"] = rng.normal(0.0, 0.1, size=6)
    _, grads = nn_loss_and_grads(params, X, y)
    eps = 1e-6
    for name, p in params.items():
        for idx in np.ndindex(p.shape):
            original = p[idx]
            p[idx] = original + eps
            up, _ = nn_loss_and_grads(params, X, y)
            p[idx] = original - eps
            down, _ = nn_loss_and_grads(params, X, y)
            p[idx] = original
            numeric = (up - down) / (2 * eps)
            assert abs(numeric - grads[name][idx]) < 1e-8 or numeric == pytest.approx(grads[name][idx], rel=1e-4)


@pytest.mark.parametrize("kind", ["linreg", "logreg", "forest", "nn"])
def test_matching_vector_outscores_mismatch(kind):
    model = fit(kind, _binary(), forest=ForestConfig(n_trees=20), nn=NnConfig(epochs=2000, learning_rate=0.5))
    ones = score(model, _sv([1, 1, 1, 1]), _trial()).score
    zeros = score(model, _sv([0, 0, 0, 0]), _trial(False)).score
    assert ones > zeros


@pytest.mark.parametrize("kind", ["linreg", "logreg", "forest", "nn"])
def test_fits_are_deterministic(kind):
    data = _binary()
    a = fit(kind, data, seed=7).score_matrix(data.X)
    b = fit(kind, data, seed=7).score_matrix(data.X)
    assert np.array_equal(a, b)


@pytest.mark.parametrize("kind", ["linreg", "logreg", "forest", "nn"])
def test_model_file_roundtrip(kind, tmp_path):
    data = _binary()
    model = fit(kind, data, forest=ForestConfig(n_trees=5), seed=2)
    path = tmp_path / f"{kind}.json"
    path.write_text(encode_model(model))
    loaded = decode_model(path.read_text(), source=str(path))
    assert loaded.kind == kind
    assert loaded.attributes == ATTRS
    assert np.array_equal(loaded.score_matrix(data.X), model.score_matrix(data.X))
    assert encode_model(decode_model(encode_model(model))) == encode_model(model)


def test_one_hot_softmax_and_hard_vectors_score_alike():
    data = _binary()
    hard = fit_logreg(data, seed=1)
    soft = fit_logreg(_data(data.X, data.y, mode="softmax"), seed=1)
    assert np.array_equal(hard.weights, soft.weights)


def test_linear_importance_normalizes_coefficients():
    report = importance(_model("linreg", [0, 0.2, 0.6, 0.2, 0]))
    assert report.method == "coefficient"
    assert report.weights == pytest.approx([0.2, 0.6, 0.2, 0.0])


def test_all_zero_weights_give_uniform_importance():
    report = importance(_model("logreg", [0.3, 0, 0, 0, 0]))
    assert report.method == "uniform"
    assert report.weights == [0.25, 0.25, 0.25, 0.25]


def test_nn_permutation_importance():
    rng = np.random.default_rng(0)
    X = rng.random((400, 4))
    y = (X[:, 1] > 0.5).astype(float)
    data = _data(X, y, mode="softmax")
    model = fit_nn(data, NnConfig(epochs=2000, learning_rate=1.0), seed=0)
    report = importance(model, data, seed=0)
    assert report.method == "permutation"
    assert max(report.as_dict(), key=report.as_dict().get) == "nationality"


def test_nn_importance_needs_validation_data():
    model = fit_nn(_binary(n=20), NnConfig(epochs=1))
    with pytest.raises(FitError, match="validation"):
        importance(model)


def test_training_set_from_vectors():
    rows = [(_trial(True), _sv([1, 1, 0, 1])), (_trial(False), _sv([0, 1, 0, 0]))]
    data = TrainingSet.from_vectors(rows)
    assert data.X.shape == (2, 4)
    assert data.y.tolist() == [1.0, 0.0]
    assert data.attributes == ATTRS
    with pytest.raises(FitError, match="no similarity vectors"):
        TrainingSet.from_vectors([])


def test_score_vectors_batches():
    model = _model("linreg", [0, 0.25, 0.25, 0.25, 0.25])
    rows = [(_trial(True), _sv([1, 1, 1, 1])), (_trial(False), _sv([1, 0, 0, 0]))]
    assert [s.score for s in score_vectors(model, rows)] == [1.0, 0.25]
