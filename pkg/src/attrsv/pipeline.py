"""One function per command; ``cli`` only parses flags and prints results."""
from __future__ import annotations
import json
import logging
from pathlib import Path
from typing import Optional, Sequence
from joblib import Parallel, delayed
from pydantic import BaseModel
from attrsv import __version__
from attrsv.attrnet import (
    AttrClassifier,
    build_embedding_mlp,
    build_mfcc_tdnn,
    encode_classifier,
    decode_classifier,
    format_embeddings,
    predict_batch,
    random_guess_accuracy,
    read_embeddings,
    train,
)
from attrsv.config import RunConfig, derive_seed
from attrsv.corpus import (
    SIMULATED_TAG,
    clip_owner,
    format_trials,
    generate_trials,
    label_distribution,
    load_manifest,
    read_trials,
    synthesize_corpus,
    synthesize_embeddings,
)
from attrsv.dsp import compute_mfcc, encode_features, load_features, load_wav
from attrsv.errors import ConfigError, DataError
from attrsv.metrics import (
    EvalReport,
    SingleAttributeResult,
    SystemResult,
    accuracy,
    compare_errors,
    eer_grid_csv,
    evaluate_system,
    single_attribute_eer,
)
from attrsv.models import (
    AttributeOutputs,
    AttributePrediction,
    AttributeSchema,
    ClipRef,
    Explanation,
    SimilarityVector,
    SpeakerRecord,
    TrialPair,
)
from attrsv.similarity import (
    SchemaMismatchError,
    format_vectors,
    groundtruth_similarity,
    mask,
    random_similarity,
    read_vectors,
    similarity,
)
from attrsv.store import ArtifactStore
from attrsv.verifier import TrainingSet, decode_model, encode_model, fit
from attrsv.explain import build_explanation

logger = logging.getLogger(__name__)

SPLITS = ("train", "test")


class Corpus(BaseModel):
    attribute_schema: AttributeSchema
    train: list[SpeakerRecord]
    test: list[SpeakerRecord]

    def records(self) -> list[SpeakerRecord]:
        return self.train + self.test

    def split(self, name: str) -> list[SpeakerRecord]:
        return self.train if name == "train" else self.test


def open_store(config: RunConfig) -> ArtifactStore:
    return ArtifactStore(config.work_dir)


def _write_artifact(config: RunConfig, store: ArtifactStore, path: Path, text: str, **details) -> bool:
    written = store.write_text(path, text)
    store.write_provenance(path, config.seed, config.fingerprint(), **details)
    return written


def load_corpus(config: RunConfig, store: ArtifactStore) -> Corpus:
    if config.train_manifest is not None:
        if config.test_manifest is None:
            raise ConfigError("train_manifest is set but test_manifest is not")
        train_path, test_path = config.train_manifest, config.test_manifest
    else:
        train_path = store.require(store.manifest_path("train"), "corpus")
        test_path = store.require(store.manifest_path("test"), "corpus")
    schema, train_records = load_manifest(train_path)
    test_schema, test_records = load_manifest(test_path)
    if test_schema.schema_hash() != schema.schema_hash():
        raise SchemaMismatchError(f"{train_path} and {test_path} declare different attribute schemas")
    store.bind_schema(schema)
    return Corpus(attribute_schema=schema, train=train_records, test=test_records)


class SynthSummary(BaseModel):
    train_speakers: int
    test_speakers: int
    clips: int
    schema_hash: str


def synth(config: RunConfig, store: ArtifactStore) -> SynthSummary:
    corpus = synthesize_corpus(config.synth, store.root / "corpus", config.seed,
                               mfcc=config.mfcc, n_jobs=config.workers)
    store.bind_schema(corpus.attribute_schema)
    for split in SPLITS:
        if store.manifest_path(split).exists():
            store.write_provenance(store.manifest_path(split), config.seed, config.fingerprint())
    store.record_run("synth", config.fingerprint(), config.seed)
    clips = sum(len(r.clips) for r in corpus.train + corpus.test)
    return SynthSummary(train_speakers=len(corpus.train), test_speakers=len(corpus.test), clips=clips,
                        schema_hash=corpus.attribute_schema.schema_hash())


def _extract_one(clip: ClipRef, config: RunConfig) -> bytes:
    return encode_features(compute_mfcc(load_wav(clip.path), config.mfcc))


class ExtractSummary(BaseModel):
    clips: int
    features_written: int
    embedding_routes: dict[str, str]


def extract(config: RunConfig, store: ArtifactStore) -> ExtractSummary:
    corpus = load_corpus(config, store)
    clips = [c for r in corpus.records() for c in r.clips]
    logger.info("Extracting MFCCs for %d clips with %d workers", len(clips), config.workers)
    encoded = Parallel(n_jobs=config.workers)(delayed(_extract_one)(c, config) for c in clips)
    written = sum(store.write_bytes(store.feature_path(c.id), data) for c, data in zip(clips, encoded))

    routes = {}
    if config.embedding_routes:
        features = {c.id: _load_mfcc(config, store, c.id) for c in clips}
        for route in config.embedding_routes:
            path = store.embeddings_path(route)
            if path.exists() and not _is_simulated(path):
                routes[route] = "ingested"
                continue
            vectors = synthesize_embeddings(features, config.embedding_dim,
                                            config.embedding_noise.get(route, 0.5), config.seed, route)
            _write_artifact(config, store, path, format_embeddings(vectors), source_tag=SIMULATED_TAG)
            routes[route] = "simulated"
    store.record_run("extract", config.fingerprint(), config.seed)
    return ExtractSummary(clips=len(clips), features_written=written, embedding_routes=routes)


def _is_simulated(path) -> bool:
    first = path.read_text().split("\n", 1)[0]
    return bool(first) and json.loads(first).get("source_tag", "") == SIMULATED_TAG


def _load_mfcc(config: RunConfig, store: ArtifactStore, clip_id: str):
    path = store.require(store.feature_path(clip_id), "features")
    return load_features(path, config.mfcc.frame_length_ms, config.mfcc.frame_hop_ms)


def route_features(config: RunConfig, store: ArtifactStore, route: str, clips: Sequence[ClipRef]) -> list:
    if route == "ac":
        return [_load_mfcc(config, store, c.id) for c in clips]
    vectors = read_embeddings(store.require(store.embeddings_path(route), "embeddings"))
    missing = [c.id for c in clips if c.id not in vectors]
    if missing:
        raise DataError(f"{route} embeddings are missing {len(missing)} clips, e.g. '{missing[0]}'")
    return [vectors[c.id] for c in clips]


def _build(config: RunConfig, route: str, attribute: str, input_dim: int, k: int) -> AttrClassifier:
    seed = derive_seed(config.seed, "init", route, attribute)
    if route == "ac":
        return build_mfcc_tdnn(attribute, input_dim, k, config.tdnn, seed)
    return build_embedding_mlp(attribute, input_dim, k, config.mlp, seed)


def _fit_one(config: RunConfig, route: str, attribute: str, features: list, labels: list[int],
             k: int) -> AttrClassifier:
    first = features[0]
    input_dim = first.n_coeffs if route == "ac" else first.dim
    clf = _build(config, route, attribute, input_dim, k)
    cfg = config.train.model_copy(update={"seed": derive_seed(config.seed, "stage1", route, attribute)})
    return train(clf, list(zip(features, labels)), cfg)


def predict_outputs(schema: AttributeSchema, classifiers: dict[str, AttrClassifier],
                    clips: Sequence[ClipRef], features: list) -> list[AttributeOutputs]:
    per_attribute = {name: predict_batch(classifiers[name], features) for name in schema.names}
    outputs = []
    for i, clip in enumerate(clips):
        predictions = [
            AttributePrediction(attribute=name, class_index=per_attribute[name][i][0], probs=per_attribute[name][i][1])
            for name in schema.names
        ]
        outputs.append(AttributeOutputs(clip_id=clip.id, schema_hash=schema.schema_hash(), predictions=predictions))
    return outputs


class Stage1Result(BaseModel):
    route: str
    attribute: str
    final_loss: float
    test_accuracy: float


def _split_clips(records: list[SpeakerRecord]) -> tuple[list[ClipRef], dict[str, SpeakerRecord]]:
    return [c for r in records for c in r.clips], clip_owner(records)


def train_attr(config: RunConfig, store: ArtifactStore) -> list[Stage1Result]:
    corpus = load_corpus(config, store)
    schema = corpus.attribute_schema
    results = []
    for route in config.routes:
        split_data = {}
        for split in SPLITS:
            clips, owner = _split_clips(corpus.split(split))
            split_data[split] = (clips, owner, route_features(config, store, route, clips))
        clips, owner, features = split_data["train"]
        jobs = [
            (name, [owner[c.id].labels[name] for c in clips], schema.class_count(name))
            for name in schema.names
        ]
        fitted = Parallel(n_jobs=config.workers)(
            delayed(_fit_one)(config, route, name, features, labels, k) for name, labels, k in jobs
        )
        classifiers = {}
        for clf in fitted:
            text = encode_classifier(clf)
            store.write_text(store.classifier_path(route, clf.attribute), text)
            # score with exactly what was saved
            classifiers[clf.attribute] = decode_classifier(text)

        for split in SPLITS:
            clips, owner, features = split_data[split]
            outputs = predict_outputs(schema, classifiers, clips, features)
            store.write_outputs(route, split, outputs)
            store.write_provenance(store.outputs_path(route, split), config.seed, config.fingerprint())
            if split == "test" and clips:
                for name in schema.names:
                    predicted = [o.by_attribute()[name].class_index for o in outputs]
                    truth = [owner[c.id].labels[name] for c in clips]
                    results.append(Stage1Result(
                        route=route, attribute=name,
                        final_loss=classifiers[name].meta.final_loss,
                        test_accuracy=accuracy(predicted, truth),
                    ))
    store.record_run("train-attr", config.fingerprint(), config.seed)
    return results


class TrialSummary(BaseModel):
    split: str
    positives: int
    negatives: int
    positives_resampled: bool
    negatives_resampled: bool


def make_trials(config: RunConfig, store: ArtifactStore) -> list[TrialSummary]:
    corpus = load_corpus(config, store)
    counts = {"train": (config.trials.train_pos, config.trials.train_neg),
              "test": (config.trials.test_pos, config.trials.test_neg)}
    summaries = []
    for split in SPLITS:
        n_pos, n_neg = counts[split]
        trial_seed = derive_seed(config.seed, "trials", split)
        trial_set = generate_trials(corpus.split(split), n_pos, n_neg, trial_seed)
        _write_artifact(config, store, store.trials_path(split), format_trials(trial_set.trials),
                        sampling_seed=trial_seed, positives_resampled=trial_set.positives_resampled,
                        negatives_resampled=trial_set.negatives_resampled)
        summaries.append(TrialSummary(
            split=split, positives=n_pos, negatives=n_neg,
            positives_resampled=trial_set.positives_resampled,
            negatives_resampled=trial_set.negatives_resampled,
        ))
    store.record_run("make-trials", config.fingerprint(), config.seed)
    return summaries


def systems(config: RunConfig) -> list[tuple[str, str]]:
    """(route, mode) pairs: the baselines compare true or sampled labels, so hard mode only."""
    pairs = [("groundtruth", "hard")]
    pairs += [(route, mode) for route in config.routes for mode in config.similarity_modes]
    pairs.append(("random", "hard"))
    return pairs


def build_vectors(config: RunConfig, store: ArtifactStore, corpus: Corpus, route: str, mode: str,
                  split: str, trials: Sequence[TrialPair]) -> list[tuple[TrialPair, SimilarityVector]]:
    schema = corpus.attribute_schema
    owner = clip_owner(corpus.records())
    unknown = [c for t in trials for c in (t.clip_a, t.clip_b) if c not in owner]
    if unknown:
        raise DataError(f"trial list references unknown clip '{unknown[0]}'")
    if route == "groundtruth":
        return [(t, groundtruth_similarity(owner[t.clip_a], owner[t.clip_b], schema)) for t in trials]
    if route == "random":
        dists = [label_distribution(corpus.train, schema, name) for name in schema.names]
        return [
            (t, random_similarity(schema, dists, derive_seed(config.seed, "random", split, str(i))))
            for i, t in enumerate(trials)
        ]
    outputs = store.read_outputs(route, split, schema.schema_hash())
    return [(t, similarity(outputs[t.clip_a], outputs[t.clip_b], mode)) for t in trials]


def _fit_kind(config: RunConfig, kind: str, data: TrainingSet, route: str):
    return fit(kind, data, logreg=config.stage2.logreg, forest=config.stage2.forest, nn=config.stage2.nn,
               seed=derive_seed(config.seed, "stage2", route, data.mode, kind), n_jobs=config.workers)


class Stage2Summary(BaseModel):
    route: str
    mode: str
    kinds: list[str]
    train_trials: int


def train_sv(config: RunConfig, store: ArtifactStore) -> list[Stage2Summary]:
    corpus = load_corpus(config, store)
    trials = {split: read_trials(store.require(store.trials_path(split), "trials")) for split in SPLITS}
    summaries = []
    for route, mode in systems(config):
        rows = {}
        for split in SPLITS:
            rows[split] = build_vectors(config, store, corpus, route, mode, split, trials[split])
            _write_artifact(config, store, store.vectors_path(route, mode, split), format_vectors(rows[split]))
        data = TrainingSet.from_vectors(rows["train"])
        for kind in config.stage2.kinds:
            model = _fit_kind(config, kind, data, route)
            store.write_text(store.model_path(route, mode, kind), encode_model(model))
        summaries.append(Stage2Summary(route=route, mode=mode, kinds=list(config.stage2.kinds),
                                       train_trials=len(data)))
    store.record_run("train-sv", config.fingerprint(), config.seed)
    return summaries


def _masked(rows, attributes):
    return [(t, mask(sv, attributes)) for t, sv in rows]


def evaluate(config: RunConfig, store: ArtifactStore, attributes: Optional[list[str]] = None) -> EvalReport:
    corpus = load_corpus(config, store)
    schema = corpus.attribute_schema
    if attributes:
        unknown = set(attributes) - set(schema.names)
        if unknown:
            raise ConfigError(f"unknown attributes {sorted(unknown)}; schema has {schema.names}")
        attributes = [n for n in schema.names if n in attributes]
    selected = attributes or schema.names
    subset = attributes is not None and selected != schema.names

    test_owner = clip_owner(corpus.test)
    stage1_accuracy: dict[str, dict[str, float]] = {}
    for route in config.routes:
        outputs = store.read_outputs(route, "test", schema.schema_hash())
        stage1_accuracy[route] = {}
        for name in selected:
            ids = [c for c in outputs if c in test_owner]
            stage1_accuracy[route][name] = accuracy(
                [outputs[c].by_attribute()[name].class_index for c in ids],
                [test_owner[c].labels[name] for c in ids],
            )

    results: list[SystemResult] = []
    singles: list[SingleAttributeResult] = []
    scored = {}
    thresholds = {}
    for route, mode in systems(config):
        test_rows = read_vectors(store.require(store.vectors_path(route, mode, "test"), "vectors"),
                                 schema.schema_hash())
        train_rows = None
        if subset:
            test_rows = _masked(test_rows, selected)
            train_rows = _masked(
                read_vectors(store.require(store.vectors_path(route, mode, "train"), "vectors"), schema.schema_hash()),
                selected,
            )
        for kind in config.stage2.kinds:
            if subset:
                model = _fit_kind(config, kind, TrainingSet.from_vectors(train_rows), route)
            else:
                model = decode_model(store.require(store.model_path(route, mode, kind), "stage2").read_text())
            system, scores = evaluate_system(route, model, test_rows, stage1_accuracy.get(route),
                                             seed=derive_seed(config.seed, "importance", route, mode, kind))
            results.append(system)
            scored[(route, mode, kind)] = (scores, system.eer)
            thresholds[f"{route}/{mode}/{kind}"] = system.eer.threshold
        if route != "random":
            singles.extend(single_attribute_eer(name, route, test_rows) for name in selected)

    overlap = []
    kind = "forest" if "forest" in config.stage2.kinds else config.stage2.kinds[0]
    if "ac" in config.routes:
        for mode in config.similarity_modes:
            for route in config.embedding_routes:
                a, b = scored[(route, mode, kind)], scored[("ac", mode, kind)]
                overlap.append(compare_errors(f"{route}-{mode}-{kind}", a[0], a[1],
                                              f"ac-{mode}-{kind}", b[0], b[1]))

    trial_counts = {}
    for split in SPLITS:
        split_trials = read_trials(store.require(store.trials_path(split), "trials"))
        trial_counts[f"{split}_pos"] = sum(t.target for t in split_trials)
        trial_counts[f"{split}_neg"] = sum(not t.target for t in split_trials)

    report = EvalReport(
        fingerprint=config.fingerprint(),
        version=__version__,
        seed=config.seed,
        schema_hash=schema.schema_hash(),
        attributes=selected,
        trial_counts=trial_counts,
        attribute_accuracy=stage1_accuracy,
        random_accuracy={
            name: random_guess_accuracy(label_distribution(corpus.train, schema, name)) for name in selected
        },
        systems=results,
        single_attribute=singles,
        error_overlap=overlap,
    )
    suffix = "-" + "-".join(selected) if subset else ""
    report_path = store.report_path.with_name(f"report{suffix}.json")
    store.write_text(report_path, report.model_dump_json(indent=2))
    _write_artifact(config, store, store.grid_path.with_name(f"eer_grid{suffix}.csv"), eer_grid_csv(report))
    if not subset:
        store.save_thresholds(thresholds)
        store.write_provenance(store.thresholds_path, config.seed, config.fingerprint())
    store.record_run("eval", config.fingerprint(), config.seed)
    return report


def _classes_from_outputs(schema: AttributeSchema, outputs: AttributeOutputs) -> dict[str, str]:
    return {p.attribute: schema.spec(p.attribute).classes[p.class_index] for p in outputs.predictions}


def _classes_from_labels(schema: AttributeSchema, record: SpeakerRecord) -> dict[str, str]:
    return {name: schema.spec(name).classes[idx] for name, idx in record.labels.items()}


def explain(config: RunConfig, store: ArtifactStore, clip_a: str, clip_b: str,
            route: str, mode: str, kind: str) -> Explanation:
    corpus = load_corpus(config, store)
    schema = corpus.attribute_schema
    owner = clip_owner(corpus.records())
    for clip in (clip_a, clip_b):
        if clip not in owner:
            raise DataError(f"unknown clip '{clip}'")
    trial = TrialPair(clip_a=clip_a, clip_b=clip_b,
                      target=owner[clip_a].speaker_id == owner[clip_b].speaker_id)

    if route == "random":
        raise ConfigError("the random baseline has no attribute predictions to explain")
    if route == "groundtruth":
        mode = "hard"
        sv = groundtruth_similarity(owner[clip_a], owner[clip_b], schema)
        classes_a = _classes_from_labels(schema, owner[clip_a])
        classes_b = _classes_from_labels(schema, owner[clip_b])
    elif route in config.routes:
        outputs = {}
        for split in SPLITS:
            outputs.update(store.read_outputs(route, split, schema.schema_hash()))
        sv = similarity(outputs[clip_a], outputs[clip_b], mode)
        classes_a = _classes_from_outputs(schema, outputs[clip_a])
        classes_b = _classes_from_outputs(schema, outputs[clip_b])
    else:
        raise ConfigError(f"unknown route '{route}'; configured routes are {config.routes}")

    model = decode_model(store.require(store.model_path(route, mode, kind), "stage2").read_text())
    threshold = store.threshold(route, mode, kind)
    report = EvalReport.model_validate_json(store.require(store.report_path, "report").read_text())
    system = next((s for s in report.systems if (s.route, s.mode, s.kind) == (route, mode, kind)), None)
    if system is None:
        raise DataError(f"report has no {route}/{mode}/{kind} system. Run: attrsv eval")
    return build_explanation(trial, route, model, sv, classes_a, classes_b, system.importance, threshold)
