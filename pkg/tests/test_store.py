import logging
import pytest
from attrsv.models import AttributeOutputs, AttributePrediction, AttributeSchema, ProbabilityVector
from attrsv.similarity import SchemaMismatchError
from attrsv.store import ArtifactStore, MissingArtifactError


@pytest.fixture
def store(tmp_path):
    return ArtifactStore(tmp_path / "work")


def test_write_is_idempotent(store):
    path = store.trials_path("train")
    assert store.write_text(path, "a b 1\n") is True
    mtime = path.stat().st_mtime_ns
    assert store.write_text(path, "a b 1\n") is False
    assert path.stat().st_mtime_ns == mtime
    assert store.write_text(path, "a b 0\n") is True
    assert path.read_text() == "a b 0\n"


def test_require_names_producing_command(store):
    with pytest.raises(MissingArtifactError, match="Run: attrsv make-trials"):
        store.require(store.trials_path("test"), "trials")
    with pytest.raises(MissingArtifactError, match="Run: attrsv synth"):
        store.schema()


def test_require_returns_existing_path(store):
    path = store.model_path("ac", "hard", "linreg")
    store.write_text(path, "{}")
    assert store.require(path, "stage2") == path


def test_schema_binding(store, schema):
    store.bind_schema(schema)
    store.bind_schema(schema)
    assert store.schema() == schema
    with pytest.raises(SchemaMismatchError, match="refusing to mix"):
        store.bind_schema(AttributeSchema.default(k_pro=12))


def _outputs(schema, clip_id, schema_hash=None):
    return AttributeOutputs(
        clip_id=clip_id,
        schema_hash=schema_hash or schema.schema_hash(),
        predictions=[
            AttributePrediction(attribute=s.name, class_index=0,
                                probs=ProbabilityVector(probs=(1.0,) + (0.0,) * (len(s.classes) - 1)))
            for s in schema.attributes
        ],
    )


def test_outputs_roundtrip(store, schema):
    outputs = [_outputs(schema, "c1"), _outputs(schema, "c2")]
    store.write_outputs("ac", "test", outputs)
    loaded = store.read_outputs("ac", "test", schema.schema_hash())
    assert list(loaded) == ["c1", "c2"]
    assert loaded["c2"] == outputs[1]


def test_outputs_from_other_schema_rejected(store, schema):
    store.write_outputs("ac", "test", [_outputs(schema, "c1", schema_hash="stale")])
    with pytest.raises(SchemaMismatchError, match="stale"):
        store.read_outputs("ac", "test", schema.schema_hash())


def test_thresholds(store):
    with pytest.raises(MissingArtifactError, match="Run: attrsv eval"):
        store.threshold("ac", "hard", "linreg")
    store.save_thresholds({"ac/hard/linreg": 0.42})
    assert store.threshold("ac", "hard", "linreg") == 0.42
    with pytest.raises(MissingArtifactError, match="ac/softmax/forest"):
        store.threshold("ac", "softmax", "forest")


def test_run_records_append(store):
    assert store.runs() == []
    store.record_run("synth", "fp1", 0)
    store.record_run("extract", "fp1", 0)
    assert [r.command for r in store.runs()] == ["synth", "extract"]
    assert store.runs()[0].fingerprint == "fp1"


def test_corrupt_run_record_is_skipped(store, caplog):
    store.record_run("synth", "fp1", 0)
    with (store.root / "runs.jsonl").open("a") as fh:
        fh.write("not json\n")
    store.record_run("eval", "fp1", 0)
    with caplog.at_level(logging.WARNING):
        runs = store.runs()
    assert [r.command for r in runs] == ["synth", "eval"]
    assert "line 2" in caplog.text


def test_provenance_sidecar(store):
    path = store.trials_path("train")
    store.write_text(path, "1 a b\n")
    with pytest.raises(MissingArtifactError, match="No provenance"):
        store.provenance(path)
    assert store.write_provenance(path, 3, "f00d", positives_resampled=False) is True
    assert store.write_provenance(path, 3, "f00d", positives_resampled=False) is False
    record = store.provenance(path)
    assert (record.artifact, record.seed, record.fingerprint) == ("train.txt", 3, "f00d")
    assert record.details == {"positives_resampled": False}
    assert store.provenance_path(path).name == "train.txt.meta.json"
