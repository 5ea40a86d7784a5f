"""
Configuration management module for loract.
Loads run configurations from TOML files, the environment and CLI overrides.
"""

import hashlib
import json
import os
import sys
from pathlib import Path
from typing import List, Literal, Optional, Union

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .compress import CompressionPolicy, parse_ratio
from .decompose import DecomposeMethod, MethodKind
from .errors import ConfigError, ContractViolation
from .logger import get_logger

ADAPTER_SITES = ('wq', 'wk', 'wv', 'wo', 'w_in', 'w_out', 'head')
CHECKS = ('accumulation', 'projection_floor', 'deterministic', 'sampling')
CHECK_ALIASES = {'3.1': 'accumulation', '3.2': 'projection_floor', '3.3': 'deterministic', '3.4': 'sampling'}
LOG_LEVELS = ('DEBUG', 'INFO', 'WARNING', 'ERROR', 'CRITICAL')


class _Section(BaseModel):
    model_config = ConfigDict(extra='forbid', validate_assignment=True)


class ModelConfig(_Section):
    depth: int = Field(2, ge=1, description="Number of Transformer layers")
    width: int = Field(32, ge=2, description="Model width n")
    heads: int = Field(4, ge=1, description="Attention heads")
    ffn_hidden: int = Field(64, ge=1, description="FFN hidden width")
    n_classes: int = Field(4, ge=2, description="Classification classes")
    lora_rank: int = Field(8, ge=1, description="LoRA bottleneck dimension")
    lora_alpha: float = Field(1.0, description="LoRA output scale")
    adapter_placement: List[str] = Field(
        default_factory=lambda: ['wq', 'wv', 'w_in', 'w_out', 'head'],
        description="Projections carrying LoRA adapters",
    )
    eps: float = Field(1e-6, ge=0.0, description="RMSNorm stabilizer")
    activation: Literal['silu', 'gelu'] = 'silu'
    causal: bool = False
    train_gamma: bool = Field(False, description="Also train the RMSNorm scales")

    @field_validator('adapter_placement')
    @classmethod
    def _known_sites(cls, value):
        unknown = sorted(set(value) - set(ADAPTER_SITES))
        if unknown:
            raise ValueError(f"unknown adapter sites {unknown}; choose from {list(ADAPTER_SITES)}")
        return value

    @model_validator(mode='after')
    def _heads_divide_width(self):
        if self.width % self.heads:
            raise ValueError(f"width {self.width} is not divisible by heads {self.heads}")
        return self


class PolicyConfig(_Section):
    enabled: bool = Field(True, description="False keeps every activation exact")
    ratio: Union[str, float] = Field('1/2', description="Compression ratio r = k/n")
    method: MethodKind = MethodKind.SAMPLED
    l: Optional[int] = Field(None, ge=1, description="Test-matrix width; default l = k")
    t: int = Field(1, ge=0, description="Power iterations")
    min_side: int = Field(16, ge=1, description="Activations with a shorter side stay exact")
    precision: Optional[Literal['f32', 'f64']] = None

    @field_validator('ratio')
    @classmethod
    def _valid_ratio(cls, value):
        try:
            parse_ratio(value)
        except ContractViolation as e:
            raise ValueError(str(e)) from None
        return value

    def to_policy(self):
        """Build the CompressionPolicy this section describes."""
        return CompressionPolicy(
            ratio=self.ratio,
            method=DecomposeMethod(self.method, self.l, self.t),
            min_side=self.min_side,
            precision=self.precision,
            enabled=self.enabled,
        )


class TaskConfig(_Section):
    batch: int = Field(8, ge=1)
    seq_len: int = Field(8, ge=1)
    steps: int = Field(300, ge=0)
    lr: float = Field(1e-2, gt=0.0)
    optimizer: Literal['adam', 'sgd'] = 'adam'
    momentum: float = Field(0.0, ge=0.0, lt=1.0)
    train_size: int = Field(400, ge=1, description="Sequences in the synthetic training set")
    input_rank: int = Field(4, ge=1, description="Rank of the synthetic token embeddings")
    input_noise: float = Field(0.1, ge=0.0)
    labeler_depth: int = Field(2, ge=1, description="Depth of the frozen network that assigns labels")
    label_noise: float = Field(0.25, ge=0.0, le=1.0, description="Fraction of labels redrawn uniformly")
    strategy: Literal['prenorm', 'layerwise', 'full'] = 'prenorm'
    shadow: bool = Field(False, description="Record gradient error against an exact shadow backward")


class BoundsConfig(_Section):
    checks: List[str] = Field(default_factory=lambda: list(CHECKS))
    trials: int = Field(500, ge=1)
    instances: int = Field(200, ge=1)

    @field_validator('checks')
    @classmethod
    def _known_checks(cls, value):
        value = [CHECK_ALIASES.get(name, name) for name in value]
        unknown = sorted(set(value) - set(CHECKS))
        if unknown:
            raise ValueError(f"unknown checks {unknown}; choose from {list(CHECKS)}")
        return value


class OutputConfig(_Section):
    dir: str = 'loract-out'
    formats: List[Literal['csv', 'json']] = Field(default_factory=lambda: ['csv', 'json'])


class RunConfig(_Section):
    seed: int = Field(0, ge=0, lt=2 ** 64)
    precision: Literal['f32', 'f64'] = 'f32'
    model: ModelConfig = Field(default_factory=ModelConfig)
    policy: PolicyConfig = Field(default_factory=PolicyConfig)
    task: TaskConfig = Field(default_factory=TaskConfig)
    bounds: BoundsConfig = Field(default_factory=BoundsConfig)
    output: OutputConfig = Field(default_factory=OutputConfig)

    def config_hash(self):
        """SHA-256 of the canonical JSON form."""
        canonical = json.dumps(self.model_dump(mode='json'), sort_keys=True, separators=(',', ':'))
        return hashlib.sha256(canonical.encode('utf-8')).hexdigest()


def format_validation_error(error, source):
    """Render a pydantic ValidationError with dotted field paths."""
    lines = [f"invalid configuration in {source}:"]
    for item in error.errors():
        path = '.'.join(str(part) for part in item['loc']) or '<root>'
        lines.append(f"  {path}: {item['msg']}")
    return '\n'.join(lines)


def _merge(base, override):
    merged = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged


class LoractConfig:
    """Configuration manager for loract runs."""

    def __init__(self, verbose=False):
        """
        Initialize configuration manager.

        Args:
            verbose (bool): Enable verbose logging
        """
        self.logger = get_logger(verbose=verbose)
        load_dotenv()

    def read_file(self, path):
        """
        Parse a TOML configuration file.

        Args:
            path (str): Path to the file

        Returns:
            dict: Raw configuration mapping
        """
        path_obj = Path(path)
        if not path_obj.is_file():
            raise ConfigError(f"configuration file not found: {path}")
        try:
            with open(path_obj, 'rb') as f:
                return tomllib.load(f)
        except tomllib.TOMLDecodeError as e:
            # message carries "(at line X, column Y)"
            raise ConfigError(f"{path}: {e}") from None

    def env_overrides(self):
        """Overrides taken from the environment (LORACT_SEED)."""
        overrides = {}
        seed = os.getenv('LORACT_SEED')
        if seed:
            try:
                overrides['seed'] = int(seed)
            except ValueError:
                raise ConfigError(f"LORACT_SEED must be an integer, got {seed!r}") from None
            self.logger.debug(f"Using seed {seed} from environment")
        return overrides

    def load(self, path=None, overrides=None):
        """
        Load and validate a run configuration.

        Precedence, lowest first: built-in defaults, the TOML file, the
        environment, explicit overrides (CLI flags).

        Args:
            path (str): Optional TOML file
            overrides (dict): Nested mapping of values to force

        Returns:
            RunConfig: Validated configuration
        """
        raw = self.read_file(path) if path else {}
        if path:
            self.logger.debug(f"Loaded configuration from {path}")
        raw = _merge(raw, self.env_overrides())
        raw = _merge(raw, overrides or {})
        try:
            return RunConfig.model_validate(raw)
        except ValidationError as e:
            raise ConfigError(format_validation_error(e, path or '<defaults>')) from None

    def threads(self):
        """Worker cap from LORACT_THREADS (default 1)."""
        value = os.getenv('LORACT_THREADS', '1')
        try:
            threads = int(value)
        except ValueError:
            raise ConfigError(f"LORACT_THREADS must be an integer, got {value!r}") from None
        if threads < 1:
            raise ConfigError(f"LORACT_THREADS must be >= 1, got {threads}")
        return threads

    def log_level(self):
        """Console level from LORACT_LOG_LEVEL (default INFO)."""
        level = os.getenv('LORACT_LOG_LEVEL', 'INFO').upper()
        if level not in LOG_LEVELS:
            raise ConfigError(f"LORACT_LOG_LEVEL must be one of {list(LOG_LEVELS)}, got {level!r}")
        return level
