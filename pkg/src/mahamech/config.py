"""Run configuration shared by the CLI subcommands.

Configs are YAML mappings whose keys are the :class:`RunConfig` field
names. Values come from three layers, later layers winning: the defaults
below, then the config file, then command-line flags.
"""

from dataclasses import asdict, dataclass, field, fields

import yaml

from ._validation import check_epsilon, check_lambda, check_seed
from .geometry import DEFAULT_EIGENVALUE_FLOOR
from .mechanism import OOV_POLICIES

DEFAULT_EPSILONS = [1.0, 5.0, 10.0, 20.0, 40.0]
DEFAULT_LAMBDAS = [0.0, 0.25, 0.5, 0.75, 1.0]


class ConfigError(ValueError):
    """Invalid configuration; the CLI maps it to exit status 2."""


@dataclass
class RunConfig:
    embedding_path: str = None
    embedding_format: str = "glove-text"
    vocab_paths: list = field(default_factory=list)
    covariance_path: str = None
    epsilon_grid: list = field(default_factory=lambda: list(DEFAULT_EPSILONS))
    lambda_grid: list = field(default_factory=lambda: list(DEFAULT_LAMBDAS))
    repetitions: int = 100
    seed: int = 0
    oov_policy: str = "pass-through"
    lowercase: bool = False
    eigenvalue_floor: float = DEFAULT_EIGENVALUE_FLOOR
    output_dir: str = None
    # 0 means the whole vocabulary; otherwise a seeded random subset of this size
    word_sample: int = 0
    audit_trials: int = 10**6
    audit_vocab_size: int = 20
    audit_dim: int = 2
    audit_scale: float = 1.5
    # used when embedding_path is unset
    synthetic_vocab_size: int = 2000
    synthetic_dim: int = 50
    synthetic_decay: float = 1.5
    synthetic_scale: float = 0.8
    synthetic_seed: int = 0

    def validate(self):
        try:
            self.epsilon_grid = [check_epsilon(e) for e in self.epsilon_grid]
            self.lambda_grid = [check_lambda(l) for l in self.lambda_grid]
            check_seed(self.seed)
            check_seed(self.synthetic_seed)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
        if not self.epsilon_grid or not self.lambda_grid:
            raise ConfigError("epsilon_grid and lambda_grid must be non-empty")
        if int(self.repetitions) < 1:
            raise ConfigError(f"repetitions must be >= 1, got {self.repetitions}")
        if self.oov_policy not in OOV_POLICIES:
            raise ConfigError(f"oov_policy must be one of {OOV_POLICIES}")
        if self.embedding_format not in ("glove-text", "word2vec-text"):
            raise ConfigError(f"unknown embedding_format {self.embedding_format!r}")
        if not float(self.eigenvalue_floor) > 0:
            raise ConfigError("eigenvalue_floor must be positive")
        if int(self.word_sample) < 0:
            raise ConfigError("word_sample must be >= 0")
        if int(self.synthetic_vocab_size) < 2 or int(self.synthetic_dim) < 1:
            raise ConfigError("synthetic vocabulary needs >= 2 words and dim >= 1")
        return self

    def to_dict(self):
        return asdict(self)

    def to_yaml(self):
        return yaml.safe_dump(self.to_dict(), sort_keys=True, default_flow_style=None)

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_yaml(cls, text):
        data = yaml.safe_load(text) or {}
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a mapping")
        return cls.from_dict(data)

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_yaml(fh.read())

    def save(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.to_yaml())

    def merged(self, overrides):
        """Copy with every non-None entry of `overrides` applied."""
        data = self.to_dict()
        data.update({k: v for k, v in overrides.items() if v is not None})
        return type(self).from_dict(data)
