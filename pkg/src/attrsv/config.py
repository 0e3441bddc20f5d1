from __future__ import annotations
import hashlib
import json
from pathlib import Path
from typing import Literal, Optional
import tomli_w
from pydantic import BaseModel, Field, PositiveFloat, PositiveInt, ValidationError, model_validator
from pydantic_settings import (
    BaseSettings,
    PydanticBaseSettingsSource,
    SettingsConfigDict,
    TomlConfigSettingsSource,
)
from attrsv.errors import ConfigError

DEFAULT_ATTRIBUTES = ("gender", "nationality", "age", "profession")
RESERVED_ROUTES = ("groundtruth", "random")
StageTwoKind = Literal["linreg", "logreg", "forest", "nn"]
SimilarityMode = Literal["hard", "softmax"]


class MfccConfig(BaseModel):
    sample_rate: PositiveInt = 16000
    frame_length_ms: PositiveFloat = 25.0
    frame_hop_ms: PositiveFloat = 10.0
    preemphasis: float = Field(0.97, ge=0.0, lt=1.0)
    n_fft: PositiveInt = 512
    n_mels: PositiveInt = 26
    f_min: float = Field(20.0, ge=0.0)
    # None means sample_rate / 2
    f_max: PositiveFloat | None = None
    n_coeffs: PositiveInt = 20
    log_floor: PositiveFloat = 1e-10
    window: Literal["hann", "hamming"] = "hann"
    cmvn: bool = False

    @model_validator(mode="after")
    def check_filterbank(self) -> MfccConfig:
        if self.n_coeffs > self.n_mels:
            raise ValueError(f"n_coeffs ({self.n_coeffs}) exceeds mel filter count ({self.n_mels})")
        return self

    @property
    def frame_length_samples(self) -> int:
        return int(round(self.sample_rate * self.frame_length_ms / 1000.0))

    @property
    def hop_samples(self) -> int:
        return int(round(self.sample_rate * self.frame_hop_ms / 1000.0))


class TrainConfig(BaseModel):
    """SGD with classical momentum. The long published setting is 100,000 iterations
    (`[train] iterations = 100000`); the default here is the desk-scale run length."""

    iterations: PositiveInt = 5000
    batch_size: PositiveInt = 256
    learning_rate: float = Field(0.2, ge=0.0)
    momentum: float = Field(0.5, ge=0.0, lt=1.0)
    lr_schedule: Literal["none", "linear-decay"] = "linear-decay"
    final_lr_ratio: float = Field(0.1, ge=0.0, le=1.0)
    seed: int = 0
    log_every: PositiveInt = 100

    def lr_at(self, iteration: int) -> float:
        if self.lr_schedule == "none" or self.iterations == 1:
            return self.learning_rate
        frac = iteration / (self.iterations - 1)
        return self.learning_rate * (1.0 - frac * (1.0 - self.final_lr_ratio))


class MlpConfig(BaseModel):
    hidden_dims: list[PositiveInt] = [256, 256]
    negative_slope: float = Field(0.01, ge=0.0, lt=1.0)


class TdnnConfig(BaseModel):
    contexts: list[list[int]] = [[-2, -1, 0, 1, 2], [-2, 0, 2], [-3, 0, 3]]
    channels: list[PositiveInt] = [128, 128, 128]
    fc_dims: list[PositiveInt] = [256, 256]
    negative_slope: float = Field(0.01, ge=0.0, lt=1.0)

    @model_validator(mode="after")
    def check_layers(self) -> TdnnConfig:
        if len(self.contexts) != len(self.channels):
            raise ValueError("contexts and channels must describe the same number of TDNN layers")
        for ctx in self.contexts:
            if not ctx or sorted(set(ctx)) != ctx:
                raise ValueError(f"context {ctx} must be non-empty, sorted and unique")
        return self

    @property
    def receptive_field(self) -> int:
        return 1 + sum(ctx[-1] - ctx[0] for ctx in self.contexts)


class LogRegConfig(BaseModel):
    epochs: int = Field(500, ge=0)
    learning_rate: PositiveFloat = 0.5


class ForestConfig(BaseModel):
    n_trees: PositiveInt = 100
    max_depth: int = Field(8, ge=0)
    min_leaf: PositiveInt = 5
    feature_subsample: Literal["sqrt", "all"] = "sqrt"
    bootstrap: bool = True


class NnConfig(BaseModel):
    hidden_units: PositiveInt = 16
    epochs: int = Field(500, ge=0)
    learning_rate: PositiveFloat = 0.1


class Stage2Config(BaseModel):
    kinds: list[StageTwoKind] = ["linreg", "logreg", "forest", "nn"]
    logreg: LogRegConfig = LogRegConfig()
    forest: ForestConfig = ForestConfig()
    nn: NnConfig = NnConfig()


class SynthSpec(BaseModel):
    n_speakers: int = Field(160, ge=0)
    n_test_speakers: int = Field(40, ge=0)
    clips_per_speaker: PositiveInt = 10
    class_counts: dict[str, PositiveInt] = {"gender": 2, "nationality": 8, "age": 6, "profession": 10}
    # attribute -> class prior; attributes left out are uniform
    priors: dict[str, list[float]] = {}
    duration_s: PositiveFloat = 1.0
    sample_rate: PositiveInt = 16000
    noise_std: float = Field(0.01, ge=0.0)

    @model_validator(mode="after")
    def check_priors(self) -> SynthSpec:
        for name, prior in self.priors.items():
            if name not in self.class_counts:
                raise ValueError(f"prior given for unknown attribute '{name}'")
            if len(prior) != self.class_counts[name]:
                raise ValueError(f"prior for '{name}' has {len(prior)} entries, expected {self.class_counts[name]}")
            if any(p < 0 for p in prior) or abs(sum(prior) - 1.0) > 1e-6:
                raise ValueError(f"prior for '{name}' must be non-negative and sum to 1")
        return self


class TrialCounts(BaseModel):
    train_pos: int = Field(5000, ge=0)
    train_neg: int = Field(5000, ge=0)
    test_pos: int = Field(1500, ge=0)
    test_neg: int = Field(1500, ge=0)


class RunConfig(BaseSettings):
    model_config = SettingsConfigDict(env_prefix="ATTRSV_", env_nested_delimiter="__", extra="ignore")

    seed: int = 0
    work_dir: Path = Path("attrsv-work")
    workers: PositiveInt = 1
    # external corpus; when unset the synthetic corpus in work_dir is used
    train_manifest: Optional[Path] = None
    test_manifest: Optional[Path] = None
    routes: list[str] = ["ac", "xvector", "ecapa"]
    similarity_modes: list[SimilarityMode] = ["softmax", "hard"]
    embedding_dim: PositiveInt = 192
    # noise of the simulated extractor per embedding route; an existing
    # embedding file not tagged "simulated" is external and ingested as-is
    embedding_noise: dict[str, float] = {"xvector": 0.5, "ecapa": 0.25}
    mfcc: MfccConfig = MfccConfig()
    train: TrainConfig = TrainConfig()
    mlp: MlpConfig = MlpConfig()
    tdnn: TdnnConfig = TdnnConfig()
    stage2: Stage2Config = Stage2Config()
    synth: SynthSpec = SynthSpec()
    trials: TrialCounts = TrialCounts()

    @classmethod
    def settings_customise_sources(
        cls,
        settings_cls: type[BaseSettings],
        init_settings: PydanticBaseSettingsSource,
        env_settings: PydanticBaseSettingsSource,
        dotenv_settings: PydanticBaseSettingsSource,
        file_secret_settings: PydanticBaseSettingsSource,
    ) -> tuple[PydanticBaseSettingsSource, ...]:
        return (init_settings, env_settings, TomlConfigSettingsSource(settings_cls))

    @model_validator(mode="after")
    def check_routes(self) -> RunConfig:
        for route in self.routes:
            if route in RESERVED_ROUTES:
                raise ValueError(f"route name '{route}' is reserved for baselines")
        return self

    @property
    def embedding_routes(self) -> list[str]:
        return [r for r in self.routes if r != "ac"]

    def fingerprint(self) -> str:
        payload = self.model_dump(mode="json", exclude={"workers", "work_dir"})
        canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()[:16]


def load_config(path: Path | None = None, **overrides) -> RunConfig:
    """Flags > ATTRSV_* environment > TOML file > defaults."""
    if path is not None and not Path(path).exists():
        raise ConfigError(f"Config file not found: {path}")

    class FileConfig(RunConfig):
        model_config = SettingsConfigDict(toml_file=path)

    clean = {k: v for k, v in overrides.items() if v is not None}
    try:
        return FileConfig(**clean)
    except ValidationError as e:
        raise ConfigError(f"Invalid configuration: {e}") from e
    except ValueError as e:
        # malformed TOML surfaces as tomllib.TOMLDecodeError, a ValueError
        raise ConfigError(f"Could not read config {path}: {e}") from e


def default_config_toml() -> str:
    defaults = RunConfig.model_construct()
    return tomli_w.dumps(defaults.model_dump(mode="json", exclude_none=True))


def derive_seed(seed: int, *parts: str) -> int:
    digest = hashlib.sha256("/".join([str(seed), *parts]).encode()).digest()
    return int.from_bytes(digest[:8], "little")
