"""Stage-1 attribute classifiers.

Two routes share one training loop: an MLP over fixed-length speaker
embeddings and a TDNN with statistics pooling over MFCC frames. Everything is
plain numpy with hand-written backprop so gradients can be checked against
finite differences.
"""
from __future__ import annotations
import base64
import copy
import json
import logging
from pathlib import Path
from typing import Literal, Optional, Sequence, Union
import numpy as np
from pydantic import BaseModel, ValidationError
from scipy.special import log_softmax, softmax
from attrsv.config import MlpConfig, TdnnConfig, TrainConfig
from attrsv.errors import DataError, NumericError
from attrsv.models import EmbeddingVector, MfccMatrix, ProbabilityVector

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
POOL_EPS = 1e-5

Route = Literal["embedding-mlp", "mfcc-tdnn"]
Features = Union[np.ndarray, EmbeddingVector, MfccMatrix]


class ShapeError(DataError):
    pass


class LabelError(DataError):
    pass


class DivergenceError(NumericError):
    pass


class TrainMeta(BaseModel):
    seed: int
    iterations: int
    batch_size: int
    learning_rate: float
    momentum: float
    lr_schedule: str
    final_loss: Optional[float] = None


class AttrClassifier:
    def __init__(
        self,
        attribute: str,
        route: Route,
        input_dim: int,
        class_count: int,
        params: dict[str, np.ndarray],
        negative_slope: float = 0.01,
        contexts: Optional[list[list[int]]] = None,
        shift: Optional[np.ndarray] = None,
        scale: Optional[np.ndarray] = None,
        meta: Optional[TrainMeta] = None,
    ):
        self.attribute = attribute
        self.route = route
        self.input_dim = input_dim
        self.class_count = class_count
        self.params = params
        self.negative_slope = negative_slope
        self.contexts = contexts or []
        self.shift = np.zeros(input_dim) if shift is None else shift
        self.scale = np.ones(input_dim) if scale is None else scale
        self.meta = meta
        self.loss_history: list[float] = []

    @property
    def receptive_field(self) -> int:
        return 1 + sum(ctx[-1] - ctx[0] for ctx in self.contexts)

    @property
    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    @property
    def n_dense_layers(self) -> int:
        return sum(1 for name in self.params if name.startswith("W"))


def _f32(a: np.ndarray) -> np.ndarray:
    return np.asarray(a, dtype=np.float32).astype(np.float64)


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return _f32(rng.uniform(-limit, limit, size=(fan_in, fan_out)))


def _dense_stack(rng: np.random.Generator, dims: list[int]) -> dict[str, np.ndarray]:
    params = {}
    for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
        params[f"W{i}"] = _glorot(rng, fan_in, fan_out)
        params[f"b{i}"] = np.zeros(fan_out)
    return params


def build_embedding_mlp(attribute: str, input_dim: int, class_count: int,
                        config: MlpConfig | None = None, seed: int = 0) -> AttrClassifier:
    config = config or MlpConfig()
    if input_dim < 1 or class_count < 1:
        raise ShapeError(f"input_dim and class_count must be positive, got {input_dim} and {class_count}")
    rng = np.random.default_rng(seed)
    params = _dense_stack(rng, [input_dim, *config.hidden_dims, class_count])
    return AttrClassifier(attribute, "embedding-mlp", input_dim, class_count, params,
                          negative_slope=config.negative_slope)


def build_mfcc_tdnn(attribute: str, n_coeffs: int, class_count: int,
                    config: TdnnConfig | None = None, seed: int = 0) -> AttrClassifier:
    config = config or TdnnConfig()
    if n_coeffs < 1 or class_count < 1:
        raise ShapeError(f"n_coeffs and class_count must be positive, got {n_coeffs} and {class_count}")
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    channels_in = n_coeffs
    for i, (ctx, channels) in enumerate(zip(config.contexts, config.channels)):
        params[f"T{i}"] = _glorot(rng, len(ctx) * channels_in, channels)
        params[f"t{i}"] = np.zeros(channels)
        channels_in = channels
    params.update(_dense_stack(rng, [2 * channels_in, *config.fc_dims, class_count]))
    return AttrClassifier(attribute, "mfcc-tdnn", n_coeffs, class_count, params,
                          negative_slope=config.negative_slope,
                          contexts=[list(c) for c in config.contexts])


def _leaky(z: np.ndarray, slope: float) -> np.ndarray:
    return np.where(z > 0, z, slope * z)


def _leaky_grad(z: np.ndarray, slope: float) -> np.ndarray:
    return np.where(z > 0, 1.0, slope)


def _as_array(features: Features) -> np.ndarray:
    if isinstance(features, EmbeddingVector):
        return np.asarray(features.values, dtype=np.float64)
    if isinstance(features, MfccMatrix):
        return features.values
    return np.asarray(features, dtype=np.float64)


def _check_shape(clf: AttrClassifier, x: np.ndarray) -> None:
    if clf.route == "embedding-mlp":
        if x.ndim != 1 or x.size != clf.input_dim:
            raise ShapeError(f"{clf.attribute} classifier expects a {clf.input_dim}-dim embedding, got shape {x.shape}")
        return
    if x.ndim != 2 or x.shape[1] != clf.input_dim:
        raise ShapeError(f"{clf.attribute} classifier expects frames x {clf.input_dim} MFCCs, got shape {x.shape}")
    if x.shape[0] < clf.receptive_field:
        raise ShapeError(
            f"clip has {x.shape[0]} frames, shorter than the {clf.receptive_field}-frame receptive field"
        )


def _context_view(h: np.ndarray, ctx: list[int]) -> np.ndarray:
    """Stack the context-offset frames of (B, T, C) into (B, T_out, len(ctx) * C)."""
    t_out = h.shape[1] - (ctx[-1] - ctx[0])
    return np.concatenate([h[:, o - ctx[0]: o - ctx[0] + t_out, :] for o in ctx], axis=-1)


def _forward(clf: AttrClassifier, x: np.ndarray) -> tuple[np.ndarray, dict]:
    """x is (B, D) for the MLP route and (B, T, C) for the TDNN route."""
    slope = clf.negative_slope
    h = (x - clf.shift) / clf.scale
    cache: dict = {"tdnn": [], "dense": []}

    for i, ctx in enumerate(clf.contexts):
        stacked = _context_view(h, ctx)
        z = stacked @ clf.params[f"T{i}"] + clf.params[f"t{i}"]
        cache["tdnn"].append((stacked, z))
        h = _leaky(z, slope)

    if clf.contexts:
        mu = h.mean(axis=1)
        sd = np.sqrt(h.var(axis=1) + POOL_EPS)
        cache["pool"] = (h, mu, sd)
        h = np.concatenate((mu, sd), axis=-1)

    n_dense = clf.n_dense_layers
    for i in range(n_dense):
        z = h @ clf.params[f"W{i}"] + clf.params[f"b{i}"]
        cache["dense"].append((h, z))
        h = _leaky(z, slope) if i < n_dense - 1 else z
    return h, cache


def _backward(clf: AttrClassifier, cache: dict, dlogits: np.ndarray) -> dict[str, np.ndarray]:
    slope = clf.negative_slope
    grads: dict[str, np.ndarray] = {}
    dh = dlogits
    n_dense = clf.n_dense_layers
    for i in reversed(range(n_dense)):
        h_in, z = cache["dense"][i]
        dz = dh if i == n_dense - 1 else dh * _leaky_grad(z, slope)
        grads[f"W{i}"] = h_in.T @ dz
        grads[f"b{i}"] = dz.sum(axis=0)
        dh = dz @ clf.params[f"W{i}"].T

    if clf.contexts:
        h, mu, sd = cache["pool"]
        n_frames = h.shape[1]
        channels = mu.shape[-1]
        dmu, dsd = dh[:, :channels], dh[:, channels:]
        dh = dmu[:, None, :] / n_frames + dsd[:, None, :] * (h - mu[:, None, :]) / (n_frames * sd[:, None, :])

    for i in reversed(range(len(clf.contexts))):
        stacked, z = cache["tdnn"][i]
        dz = dh * _leaky_grad(z, slope)
        w = clf.params[f"T{i}"]
        grads[f"T{i}"] = stacked.reshape(-1, stacked.shape[-1]).T @ dz.reshape(-1, dz.shape[-1])
        grads[f"t{i}"] = dz.sum(axis=(0, 1))
        if i == 0:
            break
        dstacked = dz @ w.T
        ctx = clf.contexts[i]
        c_in = w.shape[0] // len(ctx)
        t_out = dz.shape[1]
        dh = np.zeros((dz.shape[0], t_out + ctx[-1] - ctx[0], c_in))
        for j, o in enumerate(ctx):
            dh[:, o - ctx[0]: o - ctx[0] + t_out, :] += dstacked[..., j * c_in:(j + 1) * c_in]
    return grads


def loss_and_grads(clf: AttrClassifier, x: np.ndarray, y: np.ndarray) -> tuple[float, dict[str, np.ndarray]]:
    """Mean cross-entropy over a batch and its gradient for every parameter."""
    logits, cache = _forward(clf, x)
    logp = log_softmax(logits, axis=-1)
    rows = np.arange(y.size)
    loss = float(-logp[rows, y].mean())
    dlogits = np.exp(logp)
    dlogits[rows, y] -= 1.0
    return loss, _backward(clf, cache, dlogits / y.size)


def _stack_batch(clf: AttrClassifier, xs: Sequence[np.ndarray]) -> np.ndarray:
    if clf.route == "embedding-mlp":
        return np.stack(xs)
    shortest = min(x.shape[0] for x in xs)
    return np.stack([x[:shortest] for x in xs])


def _fit_standardization(clf: AttrClassifier, xs: list[np.ndarray]) -> None:
    rows = np.concatenate(xs, axis=0) if clf.route == "mfcc-tdnn" else np.stack(xs)
    std = rows.std(axis=0)
    clf.shift = _f32(rows.mean(axis=0))
    clf.scale = _f32(np.where(std < 1e-8, 1.0, std))


def _batch_indices(rng: np.random.Generator, n: int, batch_size: int):
    order = rng.permutation(n)
    pos = 0
    size = min(batch_size, n)
    while True:
        if pos + size > n:
            head = order[pos:]
            order = rng.permutation(n)
            pos = size - head.size
            yield np.concatenate((head, order[:pos]))
        else:
            yield order[pos:pos + size]
            pos += size


def train(clf: AttrClassifier, dataset: Sequence[tuple[Features, int]], cfg: TrainConfig) -> AttrClassifier:
    """Fit by mini-batch SGD with classical momentum; returns a new classifier."""
    if not dataset:
        raise ShapeError(f"cannot train the {clf.attribute} classifier on an empty dataset")
    xs = [_as_array(f) for f, _ in dataset]
    ys = np.array([label for _, label in dataset], dtype=np.int64)
    for x in xs:
        _check_shape(clf, x)
    bad = ys[(ys < 0) | (ys >= clf.class_count)]
    if bad.size:
        raise LabelError(f"label {int(bad[0])} out of range for {clf.class_count} '{clf.attribute}' classes")

    out = copy.deepcopy(clf)
    _fit_standardization(out, xs)
    out.loss_history = []
    velocity = {name: np.zeros_like(p) for name, p in out.params.items()}
    batches = _batch_indices(np.random.default_rng(cfg.seed), len(xs), cfg.batch_size)

    loss = float("nan")
    for it in range(cfg.iterations):
        idx = next(batches)
        loss, grads = loss_and_grads(out, _stack_batch(out, [xs[i] for i in idx]), ys[idx])
        if not np.isfinite(loss):
            raise DivergenceError(f"{clf.attribute} training diverged at iteration {it} (loss={loss})")
        lr = cfg.lr_at(it)
        for name, p in out.params.items():
            velocity[name] = cfg.momentum * velocity[name] - lr * grads[name]
            p += velocity[name]
        out.loss_history.append(loss)
        if it % cfg.log_every == 0:
            logger.debug("%s/%s iteration %d loss %.4f lr %.4f", out.route, out.attribute, it, loss, lr)

    for name in out.params:
        out.params[name] = _f32(out.params[name])
        if not np.all(np.isfinite(out.params[name])):
            raise DivergenceError(f"{clf.attribute} weights became non-finite during training")
    out.meta = TrainMeta(
        seed=cfg.seed, iterations=cfg.iterations, batch_size=cfg.batch_size,
        learning_rate=cfg.learning_rate, momentum=cfg.momentum, lr_schedule=cfg.lr_schedule,
        final_loss=loss,
    )
    logger.info("Trained %s/%s: final loss %.4f", out.route, out.attribute, loss)
    return out


def predict_proba(clf: AttrClassifier, features: Features) -> np.ndarray:
    x = _as_array(features)
    _check_shape(clf, x)
    logits, _ = _forward(clf, x[None, ...])
    return softmax(logits[0])


def argmax_class(probs: ProbabilityVector | np.ndarray) -> int:
    """Most likely class; ties go to the lowest index."""
    arr = probs.as_array() if isinstance(probs, ProbabilityVector) else np.asarray(probs)
    return int(np.argmax(arr))


def to_probability_vector(probs: np.ndarray) -> ProbabilityVector:
    probs = np.clip(probs, 0.0, 1.0)
    return ProbabilityVector(probs=tuple((probs / probs.sum()).tolist()))


def predict(clf: AttrClassifier, features: Features) -> tuple[int, ProbabilityVector]:
    pv = to_probability_vector(predict_proba(clf, features))
    return argmax_class(pv), pv


def predict_batch(clf: AttrClassifier, features: Sequence[Features]) -> list[tuple[int, ProbabilityVector]]:
    if clf.route == "embedding-mlp" and features:
        xs = [_as_array(f) for f in features]
        for x in xs:
            _check_shape(clf, x)
        logits, _ = _forward(clf, np.stack(xs))
        out = []
        for row in softmax(logits, axis=-1):
            pv = to_probability_vector(row)
            out.append((argmax_class(pv), pv))
        return out
    return [predict(clf, f) for f in features]


def evaluate_accuracy(clf: AttrClassifier, labeled: Sequence[tuple[Features, int]]) -> float:
    if not labeled:
        raise ShapeError("accuracy needs a non-empty labeled set")
    preds = predict_batch(clf, [f for f, _ in labeled])
    hits = sum(1 for (cls, _), (_, label) in zip(preds, labeled) if cls == label)
    return hits / len(labeled)


def random_guess_accuracy(distribution: ProbabilityVector) -> float:
    """Expected accuracy of guessing a label drawn from the label distribution itself."""
    p = distribution.as_array()
    return float(np.sum(p * p))


class _ClassifierEnvelope(BaseModel):
    format_version: int
    route: Route
    attribute: str
    input_dim: int
    class_count: int
    negative_slope: float
    contexts: list[list[int]]
    shapes: dict[str, list[int]]
    weights: str
    shift: str
    scale: str
    meta: Optional[TrainMeta] = None


def _b64(a: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(a, dtype="<f4").tobytes()).decode("ascii")


def _unb64(s: str) -> np.ndarray:
    return np.frombuffer(base64.b64decode(s), dtype="<f4").astype(np.float64)


def encode_classifier(clf: AttrClassifier) -> str:
    envelope = _ClassifierEnvelope(
        format_version=FORMAT_VERSION,
        route=clf.route,
        attribute=clf.attribute,
        input_dim=clf.input_dim,
        class_count=clf.class_count,
        negative_slope=clf.negative_slope,
        contexts=clf.contexts,
        shapes={name: list(p.shape) for name, p in clf.params.items()},
        weights=_b64(np.concatenate([p.ravel() for p in clf.params.values()])),
        shift=_b64(clf.shift),
        scale=_b64(clf.scale),
        meta=clf.meta,
    )
    return envelope.model_dump_json(indent=2)


def decode_classifier(text: str, source: str = "<memory>") -> AttrClassifier:
    try:
        env = _ClassifierEnvelope.model_validate_json(text)
    except ValidationError as e:
        raise ShapeError(f"{source} is not a classifier model file: {e}") from e
    if env.format_version != FORMAT_VERSION:
        raise ShapeError(f"{source} has model format {env.format_version}, expected {FORMAT_VERSION}")
    flat = _unb64(env.weights)
    expected = sum(int(np.prod(s)) for s in env.shapes.values())
    if flat.size != expected:
        raise ShapeError(f"{source} holds {flat.size} weights, its shapes need {expected}")
    params, pos = {}, 0
    for name, shape in env.shapes.items():
        size = int(np.prod(shape))
        params[name] = flat[pos:pos + size].reshape(shape).copy()
        pos += size
    return AttrClassifier(
        env.attribute, env.route, env.input_dim, env.class_count, params,
        negative_slope=env.negative_slope, contexts=env.contexts or None,
        shift=_unb64(env.shift), scale=_unb64(env.scale), meta=env.meta,
    )


def format_embeddings(vectors: Sequence[EmbeddingVector]) -> str:
    return "".join(v.model_dump_json() + "\n" for v in vectors)


def read_embeddings(path: Path | str) -> dict[str, EmbeddingVector]:
    path = Path(path)
    if not path.exists():
        raise ShapeError(f"Embedding file not found: {path}")
    vectors: dict[str, EmbeddingVector] = {}
    dim = None
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            vec = EmbeddingVector.model_validate(json.loads(line))
        except (ValidationError, json.JSONDecodeError) as e:
            raise ShapeError(f"{path}:{lineno}: invalid embedding line: {e}") from e
        if dim is not None and vec.dim != dim:
            raise ShapeError(f"{path}:{lineno}: embedding dim {vec.dim} differs from {dim}")
        dim = vec.dim
        vectors[vec.clip_id] = vec
    return vectors
