import pytest
from attrsv.config import SynthSpec
from attrsv.corpus import synthesize_corpus
from attrsv.models import AttributeSchema, ClipRef, SpeakerRecord

TINY_SPEC = SynthSpec(n_speakers=4, n_test_speakers=2, clips_per_speaker=3, duration_s=0.3)


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    return synthesize_corpus(TINY_SPEC, tmp_path_factory.mktemp("tiny") / "corpus", seed=7)


@pytest.fixture
def schema():
    return AttributeSchema.default()


def make_records(labels: list[dict[str, int]], clips_per_speaker: int = 2) -> list[SpeakerRecord]:
    """Speakers with placeholder clip paths, for code that never opens the audio."""
    records = []
    for i, lab in enumerate(labels):
        clips = [ClipRef(id=f"s{i}-c{c}", path=f"/nowhere/s{i}/{c}.wav") for c in range(clips_per_speaker)]
        records.append(SpeakerRecord(speaker_id=f"s{i}", labels=lab, clips=clips))
    return records
