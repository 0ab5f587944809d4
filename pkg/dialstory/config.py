"""
Declarative configuration.
Settings live in YAML files (package defaults in dialstory/config/*.yaml, user overrides
via --config). Each YAML section maps onto a frozen dataclass; unknown keys, wrong types
and out-of-range values raise ConfigError naming the offending field.
"""

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union, get_args, get_origin

import yaml

from dialstory.errors import ConfigError

CONFIG_DIR = Path(__file__).parent / "config"   # Package-relative defaults
ACTIVATIONS = ("relu", "silu")                  # Feed-forward nonlinearities


def default_config_path(name):
    """Path of a packaged YAML file such as 'corpus.yaml'."""
    return CONFIG_DIR / name


def load_yaml(path):
    """Read a YAML mapping. Missing files and parse errors become ConfigError."""
    try:
        with open(path, "r", encoding="utf-8") as handle:
            payload = yaml.safe_load(handle)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: YAML parse error: {exc}") from exc
    if payload is None:
        return {}
    if not isinstance(payload, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return payload


def _check_type(section, name, value, expected):
    """Loose runtime type check for the handful of field types configs use."""
    optional = False
    if get_origin(expected) is Union:
        args = [a for a in get_args(expected) if a is not type(None)]
        expected, optional = args[0], True
    if value is None and optional:
        return value
    if expected is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if expected is int and isinstance(value, bool):
        raise ConfigError(f"{section}.{name}: expected int, got bool")
    if expected in (int, float, str, bool, dict) and not isinstance(value, expected):
        raise ConfigError(f"{section}.{name}: expected {expected.__name__}, got {type(value).__name__}")
    return value


def from_mapping(cls, section, mapping):
    """
    Build a config dataclass from a mapping, rejecting unknown keys.
    Args:
        cls: Config dataclass type
        section (str): Section name used in error messages
        mapping (dict | None): Raw values, missing keys take dataclass defaults
    """
    mapping = mapping or {}
    if not isinstance(mapping, dict):
        raise ConfigError(f"{section}: expected a mapping")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(mapping) - set(known))
    if unknown:
        raise ConfigError(f"{section}: unknown field(s) {', '.join(unknown)}")
    values = {name: _check_type(section, name, value, known[name].type) for name, value in mapping.items()}
    config = cls(**values)
    config.validate(section)
    return config


def _require(condition, section, name, message):
    if not condition:
        raise ConfigError(f"{section}.{name}: {message}")


@dataclass(frozen=True)
class GeneratorConfig:
    """Synthetic corpus settings."""
    story_count: int = 200
    seed: int = 0
    characters_min: int = 5
    characters_max: int = 7
    turns_min: int = 10
    turns_max: int = 14
    turn_length_min: int = 6
    turn_length_max: int = 12
    ratio_min: float = 0.30
    ratio_max: float = 0.50
    lexicon_size: int = 24
    style_vocab_size: int = 12
    shared_vocab_size: int = 40
    style_mode: str = "separable"
    style_strength: float = 0.8
    pre_attribution_weight: float = 0.45
    post_attribution_weight: float = 0.40
    implicit_weight: float = 0.15
    distractor_rate: float = 0.02
    vocative_rate: float = 0.0
    intro_tokens: int = 55
    outro_tokens: int = 35
    max_story_tokens: int = 480

    def validate(self, section="corpus"):
        _require(self.story_count >= 1, section, "story_count", "must be >= 1")
        _require(self.characters_min >= 5, section, "characters_min", "stories need at least 5 characters")
        _require(self.characters_max >= self.characters_min, section, "characters_max", "must be >= characters_min")
        _require(self.characters_max <= self.lexicon_size, section, "lexicon_size", "must be >= characters_max")
        _require(self.turns_min >= 10, section, "turns_min", "stories need at least 10 dialogue turns")
        _require(self.turns_max >= self.turns_min, section, "turns_max", "must be >= turns_min")
        _require(self.turn_length_min >= 2, section, "turn_length_min", "must be >= 2")
        _require(self.turn_length_max >= self.turn_length_min, section, "turn_length_max", "must be >= turn_length_min")
        _require(0.0 < self.ratio_min <= self.ratio_max < 1.0, section, "ratio_min",
                 f"need 0 < ratio_min <= ratio_max < 1, got [{self.ratio_min}, {self.ratio_max}]")
        _require(self.style_vocab_size >= 2, section, "style_vocab_size", "must be >= 2")
        _require(self.shared_vocab_size >= 2, section, "shared_vocab_size", "must be >= 2")
        _require(self.style_mode in ("separable", "overlapping"), section, "style_mode",
                 "must be 'separable' or 'overlapping'")
        _require(0.0 <= self.style_strength <= 1.0, section, "style_strength", "must lie in [0, 1]")
        weights = (self.pre_attribution_weight, self.post_attribution_weight, self.implicit_weight)
        _require(all(w >= 0 for w in weights) and sum(weights[:2]) > 0, section, "pre_attribution_weight",
                 "attribution weights must be nonnegative and pre + post must be positive")
        _require(0.0 <= self.distractor_rate <= 1.0, section, "distractor_rate", "must lie in [0, 1]")
        _require(0.0 <= self.vocative_rate <= 1.0, section, "vocative_rate", "must lie in [0, 1]")
        _require(self.intro_tokens >= 0 and self.outro_tokens >= 0, section, "intro_tokens", "must be >= 0")


@dataclass(frozen=True)
class ModelConfig:
    """Encoder-decoder dimensions. vocab_size 0 means 'take it from the dataset vocabulary'."""
    vocab_size: int = 0
    model_dim: int = 64
    layers_encoder: int = 2
    layers_decoder: int = 2
    character_encoder_layers: int = 1
    attention_heads: int = 4
    feedforward_dim: int = 256
    max_sequence_length: int = 512
    dropout: float = 0.1
    activation: str = "relu"

    def validate(self, section="model"):
        _require(self.vocab_size >= 0, section, "vocab_size", "must be >= 0")
        for name in ("model_dim", "layers_encoder", "attention_heads", "feedforward_dim", "max_sequence_length"):
            _require(getattr(self, name) > 0, section, name, "must be positive")
        _require(self.layers_decoder >= 0, section, "layers_decoder", "must be >= 0")
        _require(self.character_encoder_layers >= 0, section, "character_encoder_layers", "must be >= 0")
        _require(self.model_dim % self.attention_heads == 0, section, "model_dim",
                 f"{self.model_dim} is not divisible by attention_heads={self.attention_heads}")
        _require(0.0 <= self.dropout < 1.0, section, "dropout", "must lie in [0, 1)")
        _require(self.activation in ACTIVATIONS, section, "activation", f"must be one of {', '.join(ACTIVATIONS)}")


@dataclass(frozen=True)
class TrainConfig:
    """Training schedule for one task."""
    task: str = "dialgen"
    epochs: int = 10
    batch_size: int = 8
    learning_rate: float = 1e-3
    seed: int = 0
    coverage_window: int = 1000
    checkpoint_every: int = 1
    clip_norm: Optional[float] = None
    max_steps: Optional[int] = None

    def validate(self, section="train"):
        _require(self.task in ("dialgen", "dialspk"), section, "task", "must be 'dialgen' or 'dialspk'")
        _require(self.epochs >= 1, section, "epochs", "must be >= 1")
        _require(self.batch_size >= 1, section, "batch_size", "must be >= 1")
        _require(self.learning_rate >= 0.0, section, "learning_rate", "must be >= 0")
        _require(self.coverage_window >= 1, section, "coverage_window", "must be >= 1")
        _require(self.checkpoint_every >= 1, section, "checkpoint_every", "must be >= 1")
        _require(self.clip_norm is None or self.clip_norm > 0, section, "clip_norm", "must be positive when set")
        _require(self.max_steps is None or self.max_steps >= 1, section, "max_steps", "must be >= 1 when set")


@dataclass(frozen=True)
class DecodingConfig:
    """Generation settings for DialGen evaluation."""
    strategy: str = "greedy"
    top_k: int = 5
    max_tokens: int = 160
    seed: int = 0

    def validate(self, section="decoding"):
        _require(self.strategy in ("greedy", "top_k"), section, "strategy", "must be 'greedy' or 'top_k'")
        _require(self.top_k >= 1, section, "top_k", "must be >= 1")
        _require(self.max_tokens >= 1, section, "max_tokens", "must be >= 1")


@dataclass(frozen=True)
class CoherenceConfig:
    """Shuffled-dialogue classifier settings."""
    epochs: int = 6
    batch_size: int = 16
    learning_rate: float = 1e-3
    seed: int = 0
    valid_fraction: float = 0.1
    threshold: float = 0.5
    model_dim: int = 48
    layers: int = 1
    attention_heads: int = 4
    feedforward_dim: int = 128
    max_sequence_length: int = 512
    dropout: float = 0.1

    def validate(self, section="coherence"):
        _require(self.epochs >= 1, section, "epochs", "must be >= 1")
        _require(self.batch_size >= 1, section, "batch_size", "must be >= 1")
        _require(self.learning_rate >= 0.0, section, "learning_rate", "must be >= 0")
        _require(0.0 < self.valid_fraction < 1.0, section, "valid_fraction", "must lie in (0, 1)")
        _require(0.0 < self.threshold < 1.0, section, "threshold", "must lie in (0, 1)")
        _require(self.model_dim % self.attention_heads == 0, section, "model_dim",
                 "must be divisible by attention_heads")

    def model_config(self, vocab_size):
        return ModelConfig(vocab_size=vocab_size, model_dim=self.model_dim, layers_encoder=self.layers,
                           layers_decoder=0, character_encoder_layers=0, attention_heads=self.attention_heads,
                           feedforward_dim=self.feedforward_dim, max_sequence_length=self.max_sequence_length,
                           dropout=self.dropout)


@dataclass(frozen=True)
class RunConfig:
    """Everything one training run reads from its YAML file."""
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    decoding: DecodingConfig = field(default_factory=DecodingConfig)

    def to_dict(self):
        return dataclasses.asdict(self)


def load_generator_config(path=None):
    payload = load_yaml(path or default_config_path("corpus.yaml"))
    return from_mapping(GeneratorConfig, "corpus", payload.get("corpus", payload))


def load_run_config(path):
    """Load a training YAML with model / train / decoding sections."""
    payload = load_yaml(path)
    unknown = sorted(set(payload) - {"model", "train", "decoding"})
    if unknown:
        raise ConfigError(f"{path}: unknown section(s) {', '.join(unknown)}")
    return RunConfig(model=from_mapping(ModelConfig, "model", payload.get("model")),
                     train=from_mapping(TrainConfig, "train", payload.get("train")),
                     decoding=from_mapping(DecodingConfig, "decoding", payload.get("decoding")))


def run_config_from_dict(payload):
    """Rebuild a RunConfig from its to_dict() form (checkpoint headers, run directories)."""
    return RunConfig(model=from_mapping(ModelConfig, "model", payload.get("model")),
                     train=from_mapping(TrainConfig, "train", payload.get("train")),
                     decoding=from_mapping(DecodingConfig, "decoding", payload.get("decoding")))


def load_coherence_config(path=None):
    payload = load_yaml(path or default_config_path("coherence.yaml"))
    return from_mapping(CoherenceConfig, "coherence", payload.get("coherence", payload))
