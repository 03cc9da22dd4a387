"""Experiment configuration and its flat ``key = value`` text format.

Files are split into sections::

    # anything after '#' is a comment
    m = 9                 # keys before the first header belong to [experiment]
    [transformer]
    dim = 32
    [synthetic]
    num_informative = 5
    [signal]
    streak_amplitude = 0.4

Unknown sections or keys, and values that do not parse as the field's type,
are errors that cite the line number.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from ..instances.synthetic import SignalPatterns, SyntheticSpec
from ..prid import POOLING_MODES
from ..tmil import TransformerConfig

DISCARD_STRATEGIES = ("prid", "random")


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    n: int = 19
    m: int = 14
    cube_size: int = 20
    k_folds: int = 5
    max_folds: int | None = None  # run only the first max_folds folds
    tmil_epochs: int = 200
    agent_epochs: int = 400
    batch_size: int = 2
    pooling: str = "pma"
    discard_strategy: str = "prid"
    seed: int = 0
    lr: float = 1e-3
    agent_lr: float = 1e-3
    augment: bool = True
    reward_baseline: bool = False
    compare_random: bool = True  # also score random discarding with the same T-MIL
    tmil_target_accuracy: float | None = None  # stop stage 1 early once reached on train bags
    eval_every: int = 1
    tmil_grad_clip: float | None = None  # joint gradient-norm cap for stage 1
    transformer: TransformerConfig = field(default_factory=TransformerConfig)
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)

    def __post_init__(self):
        self.resolve()

    def resolve(self) -> ExperimentConfig:
        """Push shared fields into the nested configs and validate."""
        self.synthetic.n = self.n
        self.synthetic.cube_size = self.cube_size
        self.transformer.max_instances = self.n
        self.validate()
        return self

    def validate(self) -> None:
        if not 0 <= self.m < self.n:
            raise ConfigError(f"m must satisfy 0 <= m < n (got m={self.m}, n={self.n})")
        if self.pooling not in POOLING_MODES:
            raise ConfigError(f"pooling must be one of {POOLING_MODES}, got {self.pooling!r}")
        if self.discard_strategy not in DISCARD_STRATEGIES:
            raise ConfigError(f"discard_strategy must be one of {DISCARD_STRATEGIES}, got {self.discard_strategy!r}")
        if self.k_folds < 2:
            raise ConfigError("k_folds must be >= 2")
        if self.batch_size < 1 or self.tmil_epochs < 0 or self.agent_epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epoch counts >= 0")
        if self.max_folds is not None and not 1 <= self.max_folds <= self.k_folds:
            raise ConfigError("max_folds must be in [1, k_folds]")
        if self.tmil_grad_clip is not None and not self.tmil_grad_clip > 0:
            raise ConfigError("tmil_grad_clip must be > 0 or none")
        try:
            self.synthetic.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def replace(self, **changes) -> ExperimentConfig:
        """Copy with top-level fields changed; nested configs are deep-copied."""
        clone = copy_config(self)
        for key, value in changes.items():
            if not hasattr(clone, key):
                raise ConfigError(f"unknown field {key!r}")
            setattr(clone, key, value)
        return clone.resolve()


def copy_config(config: ExperimentConfig) -> ExperimentConfig:
    return ExperimentConfig(
        **{
            f.name: getattr(config, f.name)
            for f in dataclasses.fields(config)
            if f.name not in ("transformer", "synthetic")
        },
        transformer=dataclasses.replace(config.transformer),
        synthetic=dataclasses.replace(
            config.synthetic, signal_patterns=dataclasses.replace(config.synthetic.signal_patterns)
        ),
    )


# -- text format ------------------------------------------------------------

_NESTED = ("transformer", "synthetic")
# [synthetic] must not override the experiment-level copies of these.
_SHARED = {"synthetic": {"n", "cube_size"}, "transformer": {"max_instances"}}


def _section_fields(section: str) -> dict[str, Any]:
    """Field name -> default value for one section."""
    target = {
        "experiment": ExperimentConfig,
        "transformer": TransformerConfig,
        "synthetic": SyntheticSpec,
        "signal": SignalPatterns,
    }[section]
    defaults = {}
    for f in dataclasses.fields(target):
        if f.name in _NESTED or f.name == "signal_patterns":
            continue
        if f.name in _SHARED.get(section, ()):
            continue
        if f.default is not dataclasses.MISSING:
            defaults[f.name] = f.default
        else:
            defaults[f.name] = f.default_factory()
    return defaults


SECTIONS = ("experiment", "transformer", "synthetic", "signal")

_OPTIONAL_TYPES = {
    ("experiment", "max_folds"): int,
    ("experiment", "tmil_target_accuracy"): float,
    ("experiment", "tmil_grad_clip"): float,
    ("synthetic", "segment_center"): int,
}


def _convert(section: str, key: str, raw: str, default: Any) -> Any:
    if (section, key) in _OPTIONAL_TYPES:
        if raw.lower() in ("none", ""):
            return None
        return _OPTIONAL_TYPES[(section, key)](raw)
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        kind = type(default[0]) if default else int
        return tuple(kind(v.strip()) for v in raw.split(",") if v.strip())
    return raw


def parse_config_text(text: str, origin: str = "<config>") -> ExperimentConfig:
    values: dict[str, dict[str, Any]] = {s: {} for s in SECTIONS}
    section = "experiment"
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section not in SECTIONS:
                raise ConfigError(f"{origin}:{lineno}: unknown section [{section}]")
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{lineno}: expected 'key = value', got {raw_line.strip()!r}")
        key, _, value = (part.strip() for part in line.partition("="))
        defaults = _section_fields(section)
        if key not in defaults:
            raise ConfigError(f"{origin}:{lineno}: unknown key {key!r} in [{section}]")
        if key in values[section]:
            raise ConfigError(f"{origin}:{lineno}: duplicate key {key!r} in [{section}]")
        try:
            values[section][key] = _convert(section, key, value, defaults[key])
        except ValueError as exc:
            raise ConfigError(f"{origin}:{lineno}: bad value for {key!r}: {exc}") from None

    try:
        signal = SignalPatterns(**values["signal"])
        synthetic = SyntheticSpec(**values["synthetic"], signal_patterns=signal)
        transformer = TransformerConfig(**values["transformer"])
    except ValueError as exc:
        raise ConfigError(f"{origin}: {exc}") from None
    return ExperimentConfig(**values["experiment"], transformer=transformer, synthetic=synthetic)


def load_config(path: str | Path | None) -> ExperimentConfig:
    """Read a config file; ``None`` gives every documented default."""
    if path is None:
        return ExperimentConfig()
    path = Path(path)
    return parse_config_text(path.read_text(), origin=str(path))


def _format_value(value: Any) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return str(value).lower()
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def render_config(config: ExperimentConfig) -> str:
    """The fully resolved config in the same text format (round-trips through the parser)."""
    sources = {
        "experiment": config,
        "transformer": config.transformer,
        "synthetic": config.synthetic,
        "signal": config.synthetic.signal_patterns,
    }
    lines = []
    for section in SECTIONS:
        lines.append(f"[{section}]")
        for key in _section_fields(section):
            lines.append(f"{key} = {_format_value(getattr(sources[section], key))}")
        lines.append("")
    return "\n".join(lines)


def defaults_help() -> str:
    out = []
    for section in SECTIONS:
        pairs = ", ".join(f"{k}={_format_value(v)}" for k, v in _section_fields(section).items())
        out.append(f"[{section}] {pairs}")
    return "\n".join(out)
