"""Stage-2 verifiers: similarity vector in, same-speaker score out."""
from __future__ import annotations
import base64
import logging
import math
from typing import Optional, Sequence
import numpy as np
from joblib import Parallel, delayed
from pydantic import BaseModel, ConfigDict, ValidationError, field_validator, model_validator
from scipy.special import expit
from attrsv.config import ForestConfig, LogRegConfig, NnConfig, StageTwoKind
from attrsv.errors import DataError, NumericError
from attrsv.models import ImportanceReport, SimilarityVector, TrialPair, TrialScore
from attrsv.similarity import SchemaMismatchError

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
RIDGE_JITTER = 1e-8
PERMUTATION_REPEATS = 10


class RankDeficientError(NumericError):
    pass


class FitError(NumericError):
    pass


class TrainingSet(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    X: np.ndarray
    y: np.ndarray
    attributes: tuple[str, ...]
    schema_hash: str
    mode: str

    @field_validator("X", "y", mode="before")
    @classmethod
    def as_float(cls, v) -> np.ndarray:
        return np.asarray(v, dtype=np.float64)

    @model_validator(mode="after")
    def check_shapes(self) -> TrainingSet:
        if self.X.ndim != 2 or self.X.shape[1] != len(self.attributes):
            raise ValueError(f"X must be n x {len(self.attributes)}, got {self.X.shape}")
        if self.y.shape != (self.X.shape[0],):
            raise ValueError("one target per row is required")
        return self

    @classmethod
    def from_vectors(cls, rows: Sequence[tuple[TrialPair, SimilarityVector]]) -> TrainingSet:
        if not rows:
            raise FitError("no similarity vectors to train on")
        first = rows[0][1]
        for trial, sv in rows:
            if sv.schema_hash != first.schema_hash or sv.attributes != first.attributes:
                raise SchemaMismatchError(
                    f"trial {trial.clip_a}/{trial.clip_b} has a different attribute layout than the first vector"
                )
        return cls(
            X=np.array([sv.values for _, sv in rows]),
            y=np.array([float(t.target) for t, _ in rows]),
            attributes=first.attributes,
            schema_hash=first.schema_hash,
            mode=first.mode,
        )

    def __len__(self) -> int:
        return self.X.shape[0]


def _check_binary(data: TrainingSet, kind: str) -> None:
    if len(data) == 0:
        raise FitError(f"{kind} needs non-empty training data")
    if not np.all(np.isin(data.y, (0.0, 1.0))):
        raise FitError(f"{kind} targets must be 0 or 1")
    if np.unique(data.y).size < 2:
        raise FitError(f"{kind} needs both same-speaker and different-speaker trials")


def _design(X: np.ndarray) -> np.ndarray:
    return np.column_stack((np.ones(X.shape[0]), X))


class StageTwoModel:
    kind: str = ""

    def __init__(self, attributes: Sequence[str], schema_hash: str, mode: str, meta: Optional[dict] = None):
        self.attributes = tuple(attributes)
        self.schema_hash = schema_hash
        self.mode = mode
        self.meta = meta or {}

    def score_matrix(self, X: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def check_vector(self, sv: SimilarityVector) -> None:
        if sv.schema_hash != self.schema_hash or sv.attributes != self.attributes:
            raise SchemaMismatchError(
                f"{self.kind} model expects {list(self.attributes)} under schema {self.schema_hash}, "
                f"got {list(sv.attributes)} under {sv.schema_hash}"
            )


class LinearModel(StageTwoModel):
    """Linear (clamped) or logistic scoring over [1, s_1..s_k]."""

    def __init__(self, kind: str, weights: np.ndarray, **kwargs):
        super().__init__(**kwargs)
        self.kind = kind
        self.weights = np.asarray(weights, dtype=np.float64)

    @property
    def intercept(self) -> float:
        return float(self.weights[0])

    @property
    def coefficients(self) -> np.ndarray:
        return self.weights[1:]

    def pre_activation(self, X: np.ndarray) -> np.ndarray:
        return _design(X) @ self.weights

    def score_matrix(self, X: np.ndarray) -> np.ndarray:
        z = self.pre_activation(X)
        return np.clip(z, 0.0, 1.0) if self.kind == "linreg" else expit(z)


class TreeNode(BaseModel):
    feature: int
    threshold: float
    left: int
    right: int
    leaf_probs: tuple[float, float]


class Tree:
    def __init__(self, nodes: list[TreeNode]):
        self.nodes = nodes
        self.feature = np.array([n.feature for n in nodes], dtype=np.int64)
        self.threshold = np.array([n.threshold for n in nodes])
        self.left = np.array([n.left for n in nodes], dtype=np.int64)
        self.right = np.array([n.right for n in nodes], dtype=np.int64)
        self.value = np.array([n.leaf_probs[1] for n in nodes])

    def predict(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(X.shape[0], dtype=np.int64)
        rows = np.arange(X.shape[0])
        while True:
            active = self.feature[node] >= 0
            if not active.any():
                return self.value[node]
            f = np.where(active, self.feature[node], 0)
            go_left = X[rows, f] <= self.threshold[node]
            node = np.where(active, np.where(go_left, self.left[node], self.right[node]), node)


class ForestModel(StageTwoModel):
    kind = "forest"

    def __init__(self, trees: list[Tree], impurity: np.ndarray, **kwargs):
        super().__init__(**kwargs)
        self.trees = trees
        self.impurity = np.asarray(impurity, dtype=np.float64)

    def score_matrix(self, X: np.ndarray) -> np.ndarray:
        return np.mean([t.predict(X) for t in self.trees], axis=0)


class NeuralModel(StageTwoModel):
    """k -> hidden (sigmoid) -> 1 (sigmoid)."""

    kind = "nn"

    def __init__(self, params: dict[str, np.ndarray], **kwargs):
        super().__init__(**kwargs)
        self.params = params

    def score_matrix(self, X: np.ndarray) -> np.ndarray:
        hidden = expit(X @ self.params["W1"] + self.params["b1"])
        return expit(hidden @ self.params["w2"] + self.params["b2"][0])


def _model_kwargs(data: TrainingSet, meta: dict) -> dict:
    return {"attributes": data.attributes, "schema_hash": data.schema_hash, "mode": data.mode, "meta": meta}


def fit_linreg(data: TrainingSet, seed: int = 0) -> LinearModel:
    n, k = data.X.shape
    if n < k + 1:
        raise FitError(f"linear regression needs at least {k + 1} samples, got {n}")
    A = _design(data.X)
    constant = [data.attributes[j] for j in range(k) if np.ptp(data.X[:, j]) == 0]
    if constant:
        logger.warning("Constant similarity components %s; the ridge jitter splits their weight with the intercept",
                       constant)
    gram = A.T @ A
    rhs = A.T @ data.y
    jittered = gram + RIDGE_JITTER * np.eye(k + 1)
    cond = np.linalg.cond(jittered) if np.isfinite(jittered).all() else np.inf
    if not np.isfinite(cond) or cond * np.finfo(np.float64).eps >= 1.0:
        detail = f"; constant components: {constant}" if constant else ""
        raise RankDeficientError(f"design matrix is rank deficient after jitter (condition {cond:.3g}){detail}")
    w = np.linalg.solve(jittered, rhs)
    for _ in range(2):
        w += np.linalg.solve(jittered, rhs - gram @ w)
    return LinearModel("linreg", w, **_model_kwargs(data, {"seed": seed, "jitter": RIDGE_JITTER}))


def logreg_loss_and_grad(w: np.ndarray, A: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    z = A @ w
    # log(1 + e^z) - y z, stable for either sign of z
    loss = float(np.mean(np.logaddexp(0.0, z) - y * z))
    return loss, A.T @ (expit(z) - y) / y.size


def fit_logreg(data: TrainingSet, config: LogRegConfig | None = None, seed: int = 0) -> LinearModel:
    config = config or LogRegConfig()
    _check_binary(data, "logistic regression")
    A = _design(data.X)
    w = np.random.default_rng(seed).normal(0.0, 0.01, size=A.shape[1])
    for epoch in range(config.epochs):
        loss, grad = logreg_loss_and_grad(w, A, data.y)
        if not np.isfinite(loss):
            raise FitError(f"logistic regression diverged at epoch {epoch}")
        w = w - config.learning_rate * grad
    meta = {"seed": seed, "epochs": config.epochs, "learning_rate": config.learning_rate}
    return LinearModel("logreg", w, **_model_kwargs(data, meta))


def _gini(pos: np.ndarray, total: np.ndarray) -> np.ndarray:
    p = pos / total
    return 2.0 * p * (1.0 - p)


def best_split(X: np.ndarray, y: np.ndarray, features: Sequence[int],
               min_leaf: int = 1) -> Optional[tuple[int, float, float]]:
    """Best Gini split as (feature, threshold, gain); ``x <= threshold`` goes left.

    Candidates are midpoints between consecutive distinct values. Ties keep the
    lowest feature index, then the lowest threshold.
    """
    n = y.size
    parent = _gini(np.array(y.sum()), np.array(float(n)))
    best: Optional[tuple[int, float, float]] = None
    for f in sorted(features):
        order = np.argsort(X[:, f], kind="stable")
        values, labels = X[order, f], y[order]
        cut = np.nonzero(values[:-1] < values[1:])[0]
        if cut.size == 0:
            continue
        n_left = cut + 1.0
        n_right = n - n_left
        ok = (n_left >= min_leaf) & (n_right >= min_leaf)
        if not ok.any():
            continue
        cut, n_left, n_right = cut[ok], n_left[ok], n_right[ok]
        pos_left = np.cumsum(labels)[cut]
        pos_right = labels.sum() - pos_left
        child = (n_left * _gini(pos_left, n_left) + n_right * _gini(pos_right, n_right)) / n
        gains = parent - child
        i = int(np.argmax(gains))
        if best is None or gains[i] > best[2] + 1e-12:
            threshold = 0.5 * (values[cut[i]] + values[cut[i] + 1])
            best = (f, float(threshold), float(gains[i]))
    return best


def _grow_tree(X: np.ndarray, y: np.ndarray, config: ForestConfig,
               seed_seq: np.random.SeedSequence) -> tuple[list[TreeNode], np.ndarray]:
    rng = np.random.default_rng(seed_seq)
    n, k = X.shape
    rows = np.sort(rng.integers(0, n, size=n)) if config.bootstrap else np.arange(n)
    n_features = math.ceil(math.sqrt(k)) if config.feature_subsample == "sqrt" else k
    nodes: list[TreeNode] = []
    impurity = np.zeros(k)

    def grow(idx: np.ndarray, depth: int) -> int:
        p = float(y[idx].mean())
        node_id = len(nodes)
        nodes.append(TreeNode(feature=-1, threshold=0.0, left=-1, right=-1, leaf_probs=(1.0 - p, p)))
        if depth >= config.max_depth or idx.size < 2 * config.min_leaf or p in (0.0, 1.0):
            return node_id
        features = np.sort(rng.choice(k, size=n_features, replace=False))
        split = best_split(X[idx], y[idx], features, config.min_leaf)
        if split is None or split[2] <= 1e-12:
            return node_id
        f, threshold, gain = split
        impurity[f] += gain * idx.size / rows.size
        go_left = X[idx, f] <= threshold
        left = grow(idx[go_left], depth + 1)
        right = grow(idx[~go_left], depth + 1)
        nodes[node_id] = TreeNode(feature=f, threshold=threshold, left=left, right=right, leaf_probs=(1.0 - p, p))
        return node_id

    grow(rows, 0)
    return nodes, impurity


def fit_forest(data: TrainingSet, config: ForestConfig | None = None, seed: int = 0, n_jobs: int = 1) -> ForestModel:
    config = config or ForestConfig()
    _check_binary(data, "random forest")
    # canonical row order so the fit does not depend on input order
    order = np.lexsort(np.column_stack((data.X, data.y)).T[::-1])
    X, y = data.X[order], data.y[order]
    seeds = np.random.SeedSequence(seed).spawn(config.n_trees)
    grown = Parallel(n_jobs=n_jobs)(delayed(_grow_tree)(X, y, config, s) for s in seeds)
    trees = [Tree(nodes) for nodes, _ in grown]
    impurity = np.mean([imp for _, imp in grown], axis=0)
    meta = {"seed": seed, **config.model_dump()}
    return ForestModel(trees, impurity, **_model_kwargs(data, meta))


def nn_loss_and_grads(params: dict[str, np.ndarray], X: np.ndarray,
                      y: np.ndarray) -> tuple[float, dict[str, np.ndarray]]:
    hidden = expit(X @ params["W1"] + params["b1"])
    z = hidden @ params["w2"] + params["b2"][0]
    loss = float(np.mean(np.logaddexp(0.0, z) - y * z))
    dz = (expit(z) - y) / y.size
    dhidden = np.outer(dz, params["w2"]) * hidden * (1.0 - hidden)
    grads = {
        "W1": X.T @ dhidden,
        "b1": dhidden.sum(axis=0),
        "w2": hidden.T @ dz,
        "b2": np.array([dz.sum()]),
    }
    return loss, grads


def init_nn(n_inputs: int, hidden_units: int, seed: int) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    limit_1 = np.sqrt(6.0 / (n_inputs + hidden_units))
    limit_2 = np.sqrt(6.0 / (hidden_units + 1))
    return {
        "W1": rng.uniform(-limit_1, limit_1, size=(n_inputs, hidden_units)),
        "b1": np.zeros(hidden_units),
        "w2": rng.uniform(-limit_2, limit_2, size=hidden_units),
        "b2": np.zeros(1),
    }


def fit_nn(data: TrainingSet, config: NnConfig | None = None, seed: int = 0) -> NeuralModel:
    config = config or NnConfig()
    if len(data) == 0:
        raise FitError("neural verifier needs non-empty training data")
    params = init_nn(data.X.shape[1], config.hidden_units, seed)
    for epoch in range(config.epochs):
        loss, grads = nn_loss_and_grads(params, data.X, data.y)
        if not np.isfinite(loss):
            raise FitError(f"neural verifier diverged at epoch {epoch}")
        for name in params:
            params[name] = params[name] - config.learning_rate * grads[name]
    meta = {"seed": seed, **config.model_dump()}
    return NeuralModel(params, **_model_kwargs(data, meta))


def fit(kind: StageTwoKind, data: TrainingSet, *, logreg: LogRegConfig | None = None,
        forest: ForestConfig | None = None, nn: NnConfig | None = None,
        seed: int = 0, n_jobs: int = 1) -> StageTwoModel:
    if kind == "linreg":
        return fit_linreg(data, seed)
    if kind == "logreg":
        return fit_logreg(data, logreg, seed)
    if kind == "forest":
        return fit_forest(data, forest, seed, n_jobs)
    return fit_nn(data, nn, seed)


def score(model: StageTwoModel, sv: SimilarityVector, trial: TrialPair) -> TrialScore:
    model.check_vector(sv)
    value = float(model.score_matrix(sv.as_array()[None, :])[0])
    return TrialScore(trial=trial, score=value)


def score_vectors(model: StageTwoModel, rows: Sequence[tuple[TrialPair, SimilarityVector]]) -> list[TrialScore]:
    if not rows:
        return []
    for _, sv in rows:
        model.check_vector(sv)
    values = model.score_matrix(np.array([sv.values for _, sv in rows]))
    return [TrialScore(trial=t, score=float(v)) for (t, _), v in zip(rows, values)]


def _normalized(kind: str, method: str, attributes: Sequence[str], raw: np.ndarray) -> ImportanceReport:
    raw = np.maximum(np.asarray(raw, dtype=np.float64), 0.0)
    total = raw.sum()
    if total <= 0.0:
        weights = np.full(raw.size, 1.0 / raw.size)
        method = "uniform"
    else:
        weights = raw / total
    return ImportanceReport(kind=kind, method=method, attributes=list(attributes), weights=weights.tolist())


def importance(model: StageTwoModel, validation: Optional[TrainingSet] = None, seed: int = 0,
               repeats: int = PERMUTATION_REPEATS) -> ImportanceReport:
    """|coefficient| for linear models, mean impurity decrease for forests and
    permutation importance (EER increase) for the neural verifier."""
    if isinstance(model, LinearModel):
        return _normalized(model.kind, "coefficient", model.attributes, np.abs(model.coefficients))
    if isinstance(model, ForestModel):
        return _normalized(model.kind, "impurity", model.attributes, model.impurity)
    if not isinstance(model, NeuralModel):
        raise FitError(f"no importance rule for model {model!r}")
    if validation is None or len(validation) == 0:
        raise FitError("permutation importance needs a non-empty validation set")

    from attrsv.metrics import eer_from_arrays

    base = eer_from_arrays(model.score_matrix(validation.X), validation.y)
    rng = np.random.default_rng(seed)
    raw = np.zeros(len(model.attributes))
    for j in range(len(model.attributes)):
        drops = []
        for _ in range(repeats):
            shuffled = validation.X.copy()
            shuffled[:, j] = rng.permutation(shuffled[:, j])
            drops.append(eer_from_arrays(model.score_matrix(shuffled), validation.y) - base)
        raw[j] = np.mean(drops)
    return _normalized(model.kind, "permutation", model.attributes, raw)


class _ModelEnvelope(BaseModel):
    format_version: int
    kind: StageTwoKind
    attributes: list[str]
    schema_hash: str
    mode: str
    meta: dict = {}
    weights: Optional[list[float]] = None
    trees: Optional[list[list[TreeNode]]] = None
    impurity: Optional[list[float]] = None
    nn_shapes: Optional[dict[str, list[int]]] = None
    nn_weights: Optional[str] = None


def encode_model(model: StageTwoModel) -> str:
    env = _ModelEnvelope(
        format_version=FORMAT_VERSION, kind=model.kind, attributes=list(model.attributes),
        schema_hash=model.schema_hash, mode=model.mode, meta=model.meta,
    )
    if isinstance(model, LinearModel):
        env.weights = model.weights.tolist()
    elif isinstance(model, ForestModel):
        env.trees = [t.nodes for t in model.trees]
        env.impurity = model.impurity.tolist()
    elif isinstance(model, NeuralModel):
        env.nn_shapes = {name: list(p.shape) for name, p in model.params.items()}
        flat = np.concatenate([p.ravel() for p in model.params.values()])
        env.nn_weights = base64.b64encode(flat.astype("<f8").tobytes()).decode("ascii")
    return env.model_dump_json(indent=2)


def decode_model(text: str, source: str = "<memory>") -> StageTwoModel:
    try:
        env = _ModelEnvelope.model_validate_json(text)
    except ValidationError as e:
        raise DataError(f"{source} is not a stage-2 model file: {e}") from e
    if env.format_version != FORMAT_VERSION:
        raise DataError(f"{source} has model format {env.format_version}, expected {FORMAT_VERSION}")
    common = {"attributes": env.attributes, "schema_hash": env.schema_hash, "mode": env.mode, "meta": env.meta}
    if env.kind in ("linreg", "logreg") and env.weights is not None:
        return LinearModel(env.kind, np.array(env.weights), **common)
    if env.kind == "forest" and env.trees is not None and env.impurity is not None:
        return ForestModel([Tree(nodes) for nodes in env.trees], np.array(env.impurity), **common)
    if env.kind == "nn" and env.nn_shapes is not None and env.nn_weights is not None:
        flat = np.frombuffer(base64.b64decode(env.nn_weights), dtype="<f8").astype(np.float64)
        params, pos = {}, 0
        for name, shape in env.nn_shapes.items():
            size = int(np.prod(shape))
            params[name] = flat[pos:pos + size].reshape(shape).copy()
            pos += size
        return NeuralModel(params, **common)
    raise DataError(f"{source} is missing the parameters of its {env.kind} model")
