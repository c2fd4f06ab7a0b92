"""
Configuration for the ImpNovo sequencer using pydantic-settings and .env
"""

import json
from pathlib import Path
from typing import Any, Literal, Optional

from pydantic import BaseModel, Field, PositiveInt, ValidationError, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from errors import ConfigError


class Settings(BaseSettings):
    # Logging
    log_level: Literal["debug", "info", "warning", "error"] = Field(
        "info", alias="IMPNOVO_LOG_LEVEL", description="Minimum console log level"
    )
    log_file: str = Field(
        "events.jsonl",
        alias="IMPNOVO_LOG_FILE",
        description="Event log file name inside a run directory",
    )

    # File paths
    runs_dir: Path = Field(
        default_factory=lambda: Path("runs"),
        alias="IMPNOVO_RUNS_DIR",
        description="Default parent directory for run outputs",
    )

    # Performance settings
    workers: PositiveInt = Field(
        1, alias="IMPNOVO_WORKERS", description="Threads for per-record work"
    )
    device: str = Field(
        "cpu", alias="IMPNOVO_DEVICE", description="torch device for the model"
    )
    keep_checkpoints: PositiveInt = Field(
        3,
        alias="IMPNOVO_KEEP_CHECKPOINTS",
        description="Epoch checkpoints kept besides best/last",
    )

    model_config = SettingsConfigDict(
        env_file=".env",
        env_file_encoding="utf-8",
        case_sensitive=False,
        extra="ignore",
        populate_by_name=True,
    )


settings = Settings()


class PreprocessConfig(BaseModel):
    """Spectrum cleaning knobs applied before embedding."""

    max_peaks: PositiveInt = 150
    min_mz: float = 50.0
    max_mz: float = 2500.0
    min_intensity: float = Field(0.01, ge=0.0, lt=1.0)
    remove_precursor_tol: float = Field(2.0, ge=0.0)
    intensity_transform: Literal["sqrt", "none"] = "sqrt"
    precursor_tol_ppm: float = Field(50.0, gt=0.0)
    drop_precursor_mismatch: bool = False

    @model_validator(mode="after")
    def _check_window(self):
        if self.min_mz >= self.max_mz:
            raise ValueError("min_mz must be below max_mz")
        return self


class SynthParams(BaseModel):
    """Parameters of the synthetic PSM generator."""

    n_psms: PositiveInt = 1000
    min_length: int = Field(6, ge=2)
    max_length: int = Field(14, ge=2)
    ptm_probability: float = Field(0.1, ge=0.0, le=1.0)
    missing_ratio: float = Field(0.3, ge=0.0, le=1.0)
    noise_peaks: tuple[int, int] = (5, 20)
    mz_jitter: float = Field(0.005, ge=0.0)
    signal_intensity: tuple[float, float] = (0.3, 1.0)
    noise_intensity_scale: float = Field(0.3, ge=0.0)
    charges: tuple[int, int] = (1, 3)
    split_fractions: tuple[float, float, float] = (0.8, 0.1, 0.1)

    @model_validator(mode="after")
    def _check_ranges(self):
        if self.min_length > self.max_length:
            raise ValueError("min_length must not exceed max_length")
        if self.max_length > 100:
            raise ValueError("max_length must not exceed 100")
        if not 0 <= self.noise_peaks[0] <= self.noise_peaks[1]:
            raise ValueError("noise_peaks must be an ordered non-negative range")
        if not 1 <= self.charges[0] <= self.charges[1] <= 10:
            raise ValueError("charges must be an ordered range within 1..10")
        return self


class ModelConfig(BaseModel):
    """Shape and behaviour of the encoder / imputer / decoder stack."""

    d: PositiveInt = 512
    encoder_layers: PositiveInt = 9
    decoder_layers: PositiveInt = 9
    heads: PositiveInt = 8
    ffn_width: PositiveInt = 1024
    imputer_layers: PositiveInt = 3
    n_queries: PositiveInt = 100
    tau: float = 0.8
    lambda_max: float = 10000.0
    lambda_min: float = 0.001
    max_len: PositiveInt = 100
    max_charge: PositiveInt = 10
    dropout: float = Field(0.1, ge=0.0, lt=1.0)
    log_eps: float = Field(1e-7, gt=0.0, lt=0.5)
    reverse: bool = False
    use_imputation: bool = True
    use_theory_ce: bool = True
    use_complement: bool = True
    extra_ffn: bool = False

    @model_validator(mode="after")
    def _check_shapes(self):
        if self.d % 2:
            raise ValueError("d must be even")
        if self.d % self.heads:
            raise ValueError("d must be divisible by heads")
        if not 0.0 < self.tau < 1.0:
            raise ValueError("tau must lie in (0, 1)")
        return self

    @classmethod
    def desk(cls, **overrides) -> "ModelConfig":
        base = dict(
            d=64,
            encoder_layers=2,
            decoder_layers=2,
            imputer_layers=2,
            heads=4,
            ffn_width=256,
            n_queries=32,
            max_len=40,
        )
        base.update(overrides)
        return cls(**base)

    @classmethod
    def full(cls, **overrides) -> "ModelConfig":
        return cls(**overrides)

    def matched_baseline(self) -> "ModelConfig":
        """
        Plain encoder-decoder sized to roughly this model's parameter count:
        no imputation or theoretical CE, the imputer's layers moved into the
        encoder, plus a residual FFN on the encoder output
        """
        return self.model_copy(update={
            "use_imputation": False,
            "use_theory_ce": False,
            "encoder_layers": self.encoder_layers + self.imputer_layers,
            "extra_ffn": True,
        })


class TrainConfig(BaseModel):
    """Optimisation settings."""

    batch_size: PositiveInt = 32
    epochs: PositiveInt = 30
    peak_lr: float = Field(5e-4, gt=0.0)
    weight_decay: float = Field(1e-5, ge=0.0)
    warmup_steps: int = Field(100_000, ge=1)
    label_smoothing: float = Field(0.01, ge=0.0, lt=1.0)
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = Field(1e-8, gt=0.0)
    seed: int = 0
    dropout: Optional[float] = Field(None, ge=0.0, lt=1.0)
    deterministic: bool = True
    desk_scale: bool = False
    val_max_psms: Optional[PositiveInt] = 200
    max_steps: Optional[PositiveInt] = None

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        base = dict(warmup_steps=500, desk_scale=True, epochs=30)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def full(cls, **overrides) -> "TrainConfig":
        return cls(**overrides)


class InferConfig(BaseModel):
    beam_width: PositiveInt = 5
    precursor_tol_ppm: float = Field(50.0, gt=0.0)
    max_len: Optional[PositiveInt] = None


class EvalConfig(BaseModel):
    aa_tol: float = Field(0.1, gt=0.0)
    prefix_tol: float = Field(0.5, gt=0.0)
    missing_tol: float = Field(0.05, gt=0.0)
    precursor_tol_ppm: float = Field(50.0, gt=0.0)
    bins: list[float] = Field(default_factory=lambda: [i / 10 for i in range(11)])

    @model_validator(mode="after")
    def _check_bins(self):
        if len(self.bins) < 2 or any(b >= a for a, b in zip(self.bins[1:], self.bins)):
            raise ValueError("bins must be strictly increasing edges")
        if self.bins[0] > 0.0 or self.bins[-1] < 1.0:
            raise ValueError("bins must cover [0, 1]")
        return self


class ExperimentConfig(BaseModel):
    """All sections of a JSON config file; missing sections use defaults."""

    preprocess: PreprocessConfig = Field(default_factory=PreprocessConfig)
    synth: SynthParams = Field(default_factory=SynthParams)
    model: ModelConfig = Field(default_factory=ModelConfig.desk)
    train: TrainConfig = Field(default_factory=TrainConfig.desk)
    infer: InferConfig = Field(default_factory=InferConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)

    @classmethod
    def load(cls, path: Optional[Path]) -> "ExperimentConfig":
        """Read a JSON config file, or return defaults when no path is given"""
        if path is None:
            return cls()
        try:
            with open(path, "r", encoding="utf-8") as f:
                raw = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"Cannot read config {path}: {e}") from e
        return cls.from_dict(raw)

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> "ExperimentConfig":
        try:
            return cls.model_validate(raw)
        except ValidationError as e:
            raise ConfigError(f"Invalid config: {e}") from e

    def merged(self, overrides: dict[str, dict[str, Any]]) -> "ExperimentConfig":
        """
        Apply flag overrides on top of this config.

        Args:
            overrides: section name -> {field: value}; None values are ignored

        Returns:
            ExperimentConfig: a new, re-validated config
        """
        raw = self.model_dump()
        for section, values in overrides.items():
            for key, value in values.items():
                if value is not None:
                    raw[section][key] = value
        return self.from_dict(raw)


def validated(model_cls: type[BaseModel], **values) -> Any:
    """Build a config model, mapping validation failures to ConfigError"""
    try:
        return model_cls(**values)
    except ValidationError as e:
        raise ConfigError(f"Invalid {model_cls.__name__}: {e}") from e
