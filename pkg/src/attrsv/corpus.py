from __future__ import annotations
import json
import logging
import math
import os
from pathlib import Path
from typing import Optional
import numpy as np
from joblib import Parallel, delayed
from pydantic import BaseModel, ValidationError
from attrsv.config import DEFAULT_ATTRIBUTES, MfccConfig, SynthSpec, derive_seed
from attrsv.dsp import write_wav
from attrsv.errors import DataError
from attrsv.models import (
    AttributeSchema,
    AudioClip,
    ClipRef,
    EmbeddingVector,
    MfccMatrix,
    ProbabilityVector,
    SpeakerRecord,
    TrialPair,
    TrialSet,
)

logger = logging.getLogger(__name__)

# reserved source_tag of generated embeddings; any other tag is external extractor output
SIMULATED_TAG = "simulated"


class ManifestError(DataError):
    pass


class TrialError(DataError):
    pass


class _ManifestSpeaker(BaseModel):
    speaker_id: str
    labels: dict[str, str]
    clips: list[ClipRef]


def load_manifest(path: Path | str) -> tuple[AttributeSchema, list[SpeakerRecord]]:
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"Manifest not found: {path}")
    lines = [ln for ln in path.read_text().splitlines() if ln.strip()]
    if not lines:
        raise ManifestError(f"Manifest {path} is empty")
    try:
        schema = AttributeSchema.model_validate_json(lines[0])
    except ValidationError as e:
        raise ManifestError(f"{path}:1: invalid schema line: {e}") from e

    records: list[SpeakerRecord] = []
    seen_speakers: set[str] = set()
    seen_clips: set[str] = set()
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            raw = _ManifestSpeaker.model_validate_json(line)
        except ValidationError as e:
            raise ManifestError(f"{path}:{lineno}: invalid speaker line: {e}") from e
        if raw.speaker_id in seen_speakers:
            raise ManifestError(f"{path}:{lineno}: duplicate speaker id '{raw.speaker_id}'")
        seen_speakers.add(raw.speaker_id)

        labels: dict[str, int] = {}
        for spec in schema.attributes:
            if spec.name not in raw.labels:
                raise ManifestError(f"Speaker '{raw.speaker_id}' is missing a label for attribute '{spec.name}'")
            class_name = raw.labels[spec.name]
            if class_name not in spec.classes:
                raise ManifestError(
                    f"Speaker '{raw.speaker_id}' has unknown class '{class_name}' for attribute '{spec.name}'"
                )
            labels[spec.name] = spec.classes.index(class_name)
        extra = set(raw.labels) - set(schema.names)
        if extra:
            raise ManifestError(f"Speaker '{raw.speaker_id}' has labels for unknown attributes: {sorted(extra)}")

        clips = []
        for clip in raw.clips:
            if clip.id in seen_clips:
                raise ManifestError(f"{path}:{lineno}: clip id '{clip.id}' appears more than once")
            seen_clips.add(clip.id)
            clips.append(ClipRef(id=clip.id, path=str((path.parent / clip.path).resolve())))
        try:
            records.append(SpeakerRecord(speaker_id=raw.speaker_id, labels=labels, clips=clips))
        except ValidationError as e:
            raise ManifestError(f"{path}:{lineno}: {e}") from e
    return schema, records


def write_manifest(path: Path | str, schema: AttributeSchema, records: list[SpeakerRecord]) -> str:
    """Serialize to the JSON-lines manifest format; clip paths become relative to the manifest."""
    path = Path(path)
    base = path.parent.resolve()
    lines = [schema.model_dump_json()]
    for record in records:
        labels = {name: schema.spec(name).classes[idx] for name, idx in record.labels.items()}
        clips = [
            {"id": c.id, "path": Path(os.path.relpath(Path(c.path).resolve(), base)).as_posix()}
            for c in record.clips
        ]
        lines.append(json.dumps({"speaker_id": record.speaker_id, "labels": labels, "clips": clips}))
    text = "\n".join(lines) + "\n"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    return text


def clip_owner(records: list[SpeakerRecord]) -> dict[str, SpeakerRecord]:
    return {clip_id: r for r in records for clip_id in r.clip_ids}


def _pair_counts(block_end: np.ndarray, same_speaker: bool) -> tuple[np.ndarray, np.ndarray]:
    """Per clip i: number of partners j > i and the first partner index."""
    idx = np.arange(block_end.size)
    if same_speaker:
        return block_end - idx - 1, idx + 1
    return block_end.size - block_end, block_end


def _decode_pairs(k: np.ndarray, counts: np.ndarray, first: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    cum = np.cumsum(counts)
    i = np.searchsorted(cum, k, side="right")
    start = np.concatenate(([0], cum))[i]
    return i, first[i] + (k - start)


def _sample_pool(rng: np.random.Generator, pool: int, n: int) -> tuple[np.ndarray, bool]:
    if n <= pool:
        return rng.choice(pool, size=n, replace=False), False
    extra = rng.integers(0, pool, size=n - pool)
    return np.concatenate((rng.permutation(pool), extra)), True


def generate_trials(records: list[SpeakerRecord], n_pos: int, n_neg: int, seed: int) -> TrialSet:
    if n_pos < 0 or n_neg < 0:
        raise TrialError("trial counts must be non-negative")
    clip_ids = [c for r in records for c in r.clip_ids]
    if len(set(clip_ids)) != len(clip_ids):
        raise TrialError("clip ids must be unique across speakers to build trials")
    sizes = np.array([len(r.clips) for r in records], dtype=np.int64)
    block_end = np.repeat(np.cumsum(sizes), sizes)

    rng = np.random.default_rng(seed)
    trials: list[TrialPair] = []
    flags = {}
    for target, n, label in ((True, n_pos, "positives"), (False, n_neg, "negatives")):
        if n == 0:
            flags[label] = False
            continue
        counts, first = _pair_counts(block_end, same_speaker=target)
        pool = int(counts.sum())
        if pool == 0:
            need = "a speaker with at least 2 clips" if target else "at least 2 speakers with clips"
            raise TrialError(f"{n} {label} requested but the corpus has no {need}")
        picks, resampled = _sample_pool(rng, pool, n)
        if resampled:
            logger.warning("Only %d distinct %s available; drew %d with replacement", pool, label, n - pool)
        a, b = _decode_pairs(picks, counts, first)
        trials.extend(TrialPair(clip_a=clip_ids[i], clip_b=clip_ids[j], target=target) for i, j in zip(a, b))
        flags[label] = resampled

    order = rng.permutation(len(trials))
    return TrialSet(
        trials=[trials[i] for i in order],
        positives_resampled=flags["positives"],
        negatives_resampled=flags["negatives"],
    )


def format_trials(trials: list[TrialPair]) -> str:
    return "".join(f"{int(t.target)} {t.clip_a} {t.clip_b}\n" for t in trials)


def read_trials(path: Path | str) -> list[TrialPair]:
    path = Path(path)
    if not path.exists():
        raise TrialError(f"Trial list not found: {path}")
    trials = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 3 or parts[0] not in ("0", "1"):
            raise TrialError(f"{path}:{lineno}: expected '<0|1> <clip_a> <clip_b>', got {line!r}")
        try:
            trials.append(TrialPair(clip_a=parts[1], clip_b=parts[2], target=parts[0] == "1"))
        except ValidationError as e:
            raise TrialError(f"{path}:{lineno}: {e}") from e
    return trials


def label_distribution(records: list[SpeakerRecord], schema: AttributeSchema, attribute: str) -> ProbabilityVector:
    if attribute not in schema.names:
        raise ManifestError(f"Unknown attribute '{attribute}'")
    if not records:
        raise ManifestError("label distribution needs at least one speaker")
    counts = np.bincount([r.labels[attribute] for r in records], minlength=schema.class_count(attribute))
    return ProbabilityVector(probs=tuple((counts / counts.sum()).tolist()))


class VoiceParams(BaseModel):
    """Per-speaker source/filter settings of the synthetic voice."""

    f0: float
    formants: tuple[float, float]
    tilt_db: float
    am_rate: float


class SynthCorpus(BaseModel):
    attribute_schema: AttributeSchema
    train: list[SpeakerRecord]
    test: list[SpeakerRecord]
    train_manifest: Path
    test_manifest: Optional[Path] = None


def _position(labels: dict[str, int], counts: dict[str, int], name: str) -> float:
    """Class index of a role scaled to [0, 1]; roles absent from the schema sit mid-range."""
    if name not in counts:
        return 0.5
    return labels[name] / max(counts[name] - 1, 1)


def _coprime_step(k: int) -> int:
    step = 3
    while math.gcd(step, k) != 1:
        step += 2
    return step


def speaker_voice(labels: dict[str, int], counts: dict[str, int], rng: np.random.Generator) -> VoiceParams:
    gender = _position(labels, counts, "gender")
    nationality = _position(labels, counts, "nationality")
    age = _position(labels, counts, "age")
    profession = _position(labels, counts, "profession")

    k_nat = counts.get("nationality", 2)
    nat_class = labels.get("nationality", 0)
    # second formant visits the classes in a shuffled order so F1/F2 pairs stay distinct
    f2_pos = ((nat_class * _coprime_step(k_nat)) % k_nat) / max(k_nat - 1, 1)

    return VoiceParams(
        f0=110.0 * 2.0 ** gender * (1.0 + rng.uniform(-0.04, 0.04)),
        formants=(
            (300.0 + 500.0 * nationality) * (1.0 + rng.uniform(-0.02, 0.02)),
            (1000.0 + 1400.0 * f2_pos) * (1.0 + rng.uniform(-0.02, 0.02)),
        ),
        tilt_db=-3.0 - 9.0 * age + rng.uniform(-0.3, 0.3),
        am_rate=3.0 + 18.0 * profession + rng.uniform(-0.15, 0.15),
    )


def render_clip(voice: VoiceParams, duration_s: float, sample_rate: int, noise_std: float,
                rng: np.random.Generator, source_id: str = "") -> AudioClip:
    n = int(round(duration_s * sample_rate))
    t = np.arange(n) / sample_rate
    f0 = voice.f0 * (1.0 + rng.uniform(-0.01, 0.01))
    harmonics = np.arange(1, int(0.45 * sample_rate // f0) + 1)
    freqs = harmonics * f0
    envelope = 0.15 + sum(np.exp(-0.5 * ((freqs - f) / 120.0) ** 2) for f in voice.formants)
    amps = envelope * harmonics ** (voice.tilt_db / 6.0206)
    phases = rng.uniform(0.0, 2.0 * np.pi, size=harmonics.size)
    source = amps @ np.sin(2.0 * np.pi * freqs[:, None] * t[None, :] + phases[:, None])

    modulation = 1.0 - 0.8 * 0.5 * (1.0 - np.cos(2.0 * np.pi * voice.am_rate * t + rng.uniform(0.0, 2.0 * np.pi)))
    signal = source * modulation
    signal *= 0.5 / max(np.max(np.abs(signal)), 1e-12)
    signal += rng.normal(0.0, noise_std, size=n)
    return AudioClip(samples=np.clip(signal, -1.0, 1.0), sample_rate=sample_rate, source_id=source_id)


def _render_and_write(path: Path, voice: VoiceParams, spec: SynthSpec, clip_seed: list[int]) -> None:
    clip = render_clip(voice, spec.duration_s, spec.sample_rate, spec.noise_std,
                       np.random.default_rng(clip_seed), source_id=str(path))
    write_wav(path, clip)


def synthesize_corpus(spec: SynthSpec, out_dir: Path | str, seed: int,
                      mfcc: MfccConfig | None = None, n_jobs: int = 1) -> SynthCorpus:
    """Write train/test manifests plus one WAV per clip under ``out_dir``.

    Each attribute drives one acoustic property: gender the fundamental band,
    nationality the spectral-envelope peaks, age the spectral tilt and
    profession the amplitude-modulation rate. Per-speaker and per-clip jitter
    plus Gaussian noise keep the task non-trivial.
    """
    if spec.n_speakers == 0:
        raise ManifestError("synthetic corpus needs at least one speaker")
    unknown = set(spec.class_counts) - set(DEFAULT_ATTRIBUTES)
    if unknown:
        raise ManifestError(f"synthetic voices only know the roles {DEFAULT_ATTRIBUTES}; got {sorted(unknown)}")
    mfcc = mfcc or MfccConfig(sample_rate=spec.sample_rate)
    min_samples = int(round(spec.sample_rate * mfcc.frame_length_ms / 1000.0))
    if int(round(spec.duration_s * spec.sample_rate)) < min_samples:
        raise ManifestError(f"clip duration {spec.duration_s}s is shorter than one {mfcc.frame_length_ms} ms frame")

    out_dir = Path(out_dir).resolve()
    schema = AttributeSchema.from_counts(spec.class_counts)
    label_rng = np.random.default_rng([seed, 0])
    splits: dict[str, list[SpeakerRecord]] = {"train": [], "test": []}
    jobs = []
    total = spec.n_speakers + spec.n_test_speakers
    for idx in range(total):
        split = "train" if idx < spec.n_speakers else "test"
        labels = {}
        for name, k in spec.class_counts.items():
            prior = spec.priors.get(name)
            labels[name] = int(label_rng.choice(k, p=prior))
        voice = speaker_voice(labels, spec.class_counts, np.random.default_rng([seed, 1, idx]))
        speaker_id = f"spk{idx:04d}"
        clips = []
        for c in range(spec.clips_per_speaker):
            clip_id = f"{speaker_id}-u{c:02d}"
            path = out_dir / "wav" / speaker_id / f"u{c:02d}.wav"
            clips.append(ClipRef(id=clip_id, path=str(path)))
            jobs.append((path, voice, spec, [seed, 2, idx, c]))
        splits[split].append(SpeakerRecord(speaker_id=speaker_id, labels=labels, clips=clips))

    logger.info("Rendering %d synthetic clips for %d speakers", len(jobs), total)
    Parallel(n_jobs=n_jobs)(delayed(_render_and_write)(*job) for job in jobs)

    train_manifest = out_dir / "train.jsonl"
    write_manifest(train_manifest, schema, splits["train"])
    test_manifest = None
    if splits["test"]:
        test_manifest = out_dir / "test.jsonl"
        write_manifest(test_manifest, schema, splits["test"])
    return SynthCorpus(attribute_schema=schema, train=splits["train"], test=splits["test"],
                       train_manifest=train_manifest, test_manifest=test_manifest)


def synthesize_embeddings(features: dict[str, MfccMatrix], dim: int, noise_std: float,
                          seed: int, route: str) -> list[EmbeddingVector]:
    """Stand-in for a pretrained speaker-embedding extractor.

    Pooled MFCC statistics go through a fixed seeded projection and a tanh;
    ``noise_std`` sets how much per-clip noise blurs the attribute information.
    Vectors are tagged ``SIMULATED_TAG`` so a later run can tell them from external output.
    """
    clip_ids = list(features)
    stats = np.stack([np.concatenate((m.values.mean(axis=0), m.values.std(axis=0))) for m in features.values()])
    stats = (stats - stats.mean(axis=0)) / np.maximum(stats.std(axis=0), 1e-8)
    proj_rng = np.random.default_rng(derive_seed(seed, "embedding", route))
    proj = proj_rng.normal(0.0, 1.0 / np.sqrt(stats.shape[1]), size=(stats.shape[1], dim))
    clean = np.tanh(stats @ proj)

    out = []
    for clip_id, row in zip(clip_ids, clean):
        noise = np.random.default_rng(derive_seed(seed, "embedding", route, clip_id)).normal(0.0, noise_std, dim)
        out.append(EmbeddingVector(clip_id=clip_id, dim=dim, values=(row + noise).tolist(), source_tag=SIMULATED_TAG))
    return out
