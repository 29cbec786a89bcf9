"""Pipeline configuration: config/config.yaml validated into frozen pydantic models.

Resolution order: YAML file, then --preset, then --set overrides, then the
PIANOCODEC_WORK_DIR environment variable.
"""

import copy
import hashlib
import json
import os
from typing import Any, Dict, Iterable, Literal, Optional, Tuple

import yaml
from pydantic import BaseModel, ConfigDict, Field, model_validator

from app.core.model import ModelConfig
from app.core.presets import get_preset_sections
from app.core.tokenizer import PromptMode, TokenizerConfig

DEFAULT_CONFIG_PATH = "config/config.yaml"
WORK_DIR_ENV = "PIANOCODEC_WORK_DIR"


class _Section(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")


class PathsConfig(_Section):
    midi_dir: str = "data/midi"
    audio_dir: str = "data/audio"
    work_dir: str = "work"


class SegmentConfig(_Section):
    min_seconds: float = 15.0
    max_seconds: float = 20.0
    remainder_min_seconds: float = 5.0
    min_note_seconds: float = 0.01
    split_ratios: Tuple[float, float, float] = (0.8, 0.1, 0.1)
    seed: int = 0


class CodecConfig(_Section):
    levels: int = 4
    codebook_size: int = 256
    n_mels: int = 64
    max_iter: int = 100
    tol: float = 1e-5
    seed: int = 0
    griffin_lim_iterations: int = 32
    crop_seconds: float = 1.0
    refine_iterations: int = 5


class TrainingConfig(_Section):
    steps: int = 2000
    batch_size: int = 4
    learning_rate: float = 0.05
    momentum: float = 0.9
    seed: int = 0
    prompt_frames: int = 150
    nar_levels: Literal["sampled", "all"] = "sampled"
    log_every: int = 50


class PromptConfig(_Section):
    seconds: float = 3.0
    mode: PromptMode = PromptMode.HARD_CUT


class SamplingConfig(_Section):
    greedy: bool = False
    top_k: int = 16
    temperature: float = 1.0
    seed: int = 0
    segment_seconds: float = 20.0


class PipelineConfig(_Section):
    paths: PathsConfig = Field(default_factory=PathsConfig)
    segment: SegmentConfig = Field(default_factory=SegmentConfig)
    tokenizer: TokenizerConfig = Field(default_factory=TokenizerConfig)
    codec: CodecConfig = Field(default_factory=CodecConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    training: TrainingConfig = Field(default_factory=TrainingConfig)
    prompt: PromptConfig = Field(default_factory=PromptConfig)
    sampling: SamplingConfig = Field(default_factory=SamplingConfig)

    @model_validator(mode="after")
    def _codec_matches_model(self):
        if self.model.codebook_size != self.codec.codebook_size:
            raise ValueError(f"model.codebook_size={self.model.codebook_size} differs from "
                             f"codec.codebook_size={self.codec.codebook_size}")
        if self.model.levels != self.codec.levels:
            raise ValueError(f"model.levels={self.model.levels} differs from "
                             f"codec.levels={self.codec.levels}")
        return self

    def digest(self) -> str:
        """SHA-256 of everything that affects outputs (paths excluded)."""
        return _sha256(self.model_dump(mode="json", exclude={"paths"}))

    def codec_digest(self) -> str:
        """SHA-256 of the sections that determine codec tokens."""
        return _sha256(self.model_dump(mode="json", include={"codec", "segment"}))


def _sha256(data: Dict) -> str:
    return hashlib.sha256(json.dumps(data, sort_keys=True).encode()).hexdigest()


def _merge(base: Dict, update: Dict) -> Dict:
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            _merge(base[key], value)
        else:
            base[key] = copy.deepcopy(value)
    return base


def parse_override(item: str) -> Tuple[Tuple[str, ...], Any]:
    """'section.key=value' with value read as a YAML scalar."""
    if "=" not in item:
        raise ValueError(f"Override '{item}' must look like section.key=value")
    key, raw = item.split("=", 1)
    path = tuple(part for part in key.strip().split(".") if part)
    if len(path) < 2:
        raise ValueError(f"Override '{item}' must name a section and a key")
    return path, yaml.safe_load(raw)


def load_config(file_path: Optional[str] = DEFAULT_CONFIG_PATH, preset: Optional[str] = None,
                overrides: Iterable[str] = ()) -> PipelineConfig:
    raw: Dict = {}
    if file_path:
        if not os.path.exists(file_path):
            raise FileNotFoundError(f"Config file not found: {file_path}")
        with open(file_path) as f:
            raw = yaml.safe_load(f) or {}
    if preset:
        _merge(raw, get_preset_sections(preset))
    for item in overrides:
        path, value = parse_override(item)
        node = raw
        for part in path[:-1]:
            node = node.setdefault(part, {})
        node[path[-1]] = value
    if os.getenv(WORK_DIR_ENV):
        raw.setdefault("paths", {})["work_dir"] = os.getenv(WORK_DIR_ENV)
    return PipelineConfig.model_validate(raw)


def save_config(cfg: PipelineConfig, file_path: str):
    os.makedirs(os.path.dirname(file_path) or ".", exist_ok=True)
    with open(file_path, "w") as f:
        yaml.safe_dump({**cfg.model_dump(mode="json"), "digest": cfg.digest()}, f, sort_keys=True)
