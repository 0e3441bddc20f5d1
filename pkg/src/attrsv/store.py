from __future__ import annotations
import json
import logging
from datetime import datetime, timezone
from pathlib import Path
from pydantic import BaseModel, ValidationError
from attrsv import __version__
from attrsv.errors import DataError
from attrsv.models import AttributeOutputs, AttributeSchema
from attrsv.similarity import SchemaMismatchError

logger = logging.getLogger(__name__)

# artifact -> command that writes it
PRODUCERS = {
    "corpus": "synth",
    "features": "extract",
    "embeddings": "extract",
    "stage1": "train-attr",
    "outputs": "train-attr",
    "trials": "make-trials",
    "vectors": "train-sv",
    "stage2": "train-sv",
    "report": "eval",
    "thresholds": "eval",
}


class MissingArtifactError(DataError):
    pass


class Provenance(BaseModel):
    """Sidecar for artifacts whose own format has no room for run metadata."""

    artifact: str
    seed: int
    fingerprint: str
    version: str
    details: dict[str, bool | int | float | str] = {}


class RunRecord(BaseModel):
    command: str
    fingerprint: str
    version: str
    seed: int
    finished_at: datetime


def _now() -> datetime:
    return datetime.now(tz=timezone.utc)


class ArtifactStore:
    def __init__(self, root: Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._runs = self.root / "runs.jsonl"
        self._schema = self.root / "schema.json"

    def manifest_path(self, split: str) -> Path:
        return self.root / "corpus" / f"{split}.jsonl"

    def feature_path(self, clip_id: str) -> Path:
        return self.root / "features" / f"{clip_id}.mfcc"

    def embeddings_path(self, route: str) -> Path:
        return self.root / "embeddings" / f"{route}.jsonl"

    def classifier_path(self, route: str, attribute: str) -> Path:
        return self.root / "models" / "stage1" / route / f"{attribute}.json"

    def outputs_path(self, route: str, split: str) -> Path:
        return self.root / "outputs" / f"{route}-{split}.jsonl"

    def trials_path(self, split: str) -> Path:
        return self.root / "trials" / f"{split}.txt"

    def vectors_path(self, route: str, mode: str, split: str) -> Path:
        return self.root / "vectors" / f"{route}-{mode}-{split}.jsonl"

    def model_path(self, route: str, mode: str, kind: str) -> Path:
        return self.root / "models" / "stage2" / f"{route}-{mode}-{kind}.json"

    @property
    def report_path(self) -> Path:
        return self.root / "reports" / "report.json"

    @property
    def grid_path(self) -> Path:
        return self.root / "reports" / "eer_grid.csv"

    @property
    def thresholds_path(self) -> Path:
        return self.root / "reports" / "thresholds.json"

    def write_bytes(self, path: Path, data: bytes) -> bool:
        """Write unless the file already holds exactly these bytes; True when written."""
        if path.exists() and path.read_bytes() == data:
            return False
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(data)
        return True

    def write_text(self, path: Path, text: str) -> bool:
        return self.write_bytes(path, text.encode("utf-8"))

    def provenance_path(self, path: Path) -> Path:
        return path.with_name(f"{path.name}.meta.json")

    def write_provenance(self, path: Path, seed: int, fingerprint: str, **details) -> bool:
        record = Provenance(artifact=path.name, seed=seed, fingerprint=fingerprint, version=__version__,
                            details=details)
        return self.write_text(self.provenance_path(path), record.model_dump_json(indent=2))

    def provenance(self, path: Path) -> Provenance:
        meta = self.provenance_path(path)
        if not meta.exists():
            raise MissingArtifactError(f"No provenance recorded for {path.relative_to(self.root)}")
        return Provenance.model_validate_json(meta.read_text())

    def require(self, path: Path, artifact: str) -> Path:
        if not path.exists():
            raise MissingArtifactError(
                f"Missing {artifact} artifact {path.relative_to(self.root)}. Run: attrsv {PRODUCERS[artifact]}"
            )
        return path

    def bind_schema(self, schema: AttributeSchema) -> None:
        if self._schema.exists():
            bound = AttributeSchema.model_validate_json(self._schema.read_text())
            if bound.schema_hash() != schema.schema_hash():
                raise SchemaMismatchError(
                    f"work dir {self.root} holds artifacts for schema {bound.schema_hash()}, "
                    f"refusing to mix in schema {schema.schema_hash()}"
                )
            return
        self.write_text(self._schema, schema.model_dump_json(indent=2))

    def schema(self) -> AttributeSchema:
        self.require(self._schema, "corpus")
        return AttributeSchema.model_validate_json(self._schema.read_text())

    def write_outputs(self, route: str, split: str, outputs: list[AttributeOutputs]) -> bool:
        return self.write_text(self.outputs_path(route, split), "".join(o.model_dump_json() + "\n" for o in outputs))

    def read_outputs(self, route: str, split: str, schema_hash: str) -> dict[str, AttributeOutputs]:
        path = self.require(self.outputs_path(route, split), "outputs")
        outputs = {}
        for line in path.read_text().splitlines():
            if not line.strip():
                continue
            out = AttributeOutputs.model_validate_json(line)
            if out.schema_hash != schema_hash:
                raise SchemaMismatchError(f"{path.name} was written for schema {out.schema_hash}, not {schema_hash}")
            outputs[out.clip_id] = out
        return outputs

    def save_thresholds(self, thresholds: dict[str, float]) -> bool:
        return self.write_text(self.thresholds_path, json.dumps(thresholds, indent=2, sort_keys=True))

    def threshold(self, route: str, mode: str, kind: str) -> float:
        path = self.require(self.thresholds_path, "thresholds")
        thresholds = json.loads(path.read_text())
        key = f"{route}/{mode}/{kind}"
        if key not in thresholds:
            raise MissingArtifactError(f"No EER threshold for {key}. Run: attrsv eval")
        return thresholds[key]

    def record_run(self, command: str, fingerprint: str, seed: int) -> RunRecord:
        record = RunRecord(command=command, fingerprint=fingerprint, version=__version__, seed=seed,
                           finished_at=_now())
        with self._runs.open("a") as fh:
            fh.write(record.model_dump_json() + "\n")
        return record

    def runs(self) -> list[RunRecord]:
        if not self._runs.exists():
            return []
        records = []
        for lineno, line in enumerate(self._runs.read_text().splitlines(), start=1):
            if not line.strip():
                continue
            try:
                records.append(RunRecord.model_validate_json(line))
            except ValidationError:
                logger.warning("Could not read run record on line %d of %s", lineno, self._runs.name)
        return records
