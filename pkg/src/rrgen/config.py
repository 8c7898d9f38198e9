"""Run configuration: flat module-prefixed keys, desk and paper profiles,
and strict rejection of unknown keys.

The paper profile carries the full-scale reference hyperparameters
verbatim; the desk profile holds small values sized for CPU-minutes runs. Keys under
model.*, fgm.*, and generator.prompt are artifact knobs for the toy stack.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path

from .util import canonical_json, sha256_text
from .neural.training import TrainStep

logger = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


@dataclass
class ModelSection:
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2


@dataclass
class FgmSection:
    enabled: bool = False
    epsilon: float = 1.0


@dataclass
class RetrieverSection:
    train_batch_size: int = 32
    epochs: int = 45
    max_input_length: int = 48
    dropout: float = 0.0
    weight_decay: float = 0.0
    warmup_steps: int = 10
    gradient_checkpoint_segments: int = 1  # recorded only; a no-op at toy scale
    optim: str = "adam"
    learning_rate: float = 1e-3
    preKturns: int = 2


@dataclass
class RerankerSection:
    learning_rate: float = 1e-3
    dropout: float = 0.0
    epochs: int = 24
    train_batch_size: int = 1
    accumulation_steps: int = 4
    weight_decay: float = 0.0
    warmup_steps: int = 10
    max_input_length: int = 48
    passages: int = 20
    preKturns: int = 2


@dataclass
class GeneratorSection:
    learning_rate: float = 1e-3
    dropout: float = 0.0
    epochs: int = 10
    accumulation_steps: int = 2
    max_grad_norm: float = 1.0
    train_batch_size: int = 1
    weight_decay: float = 0.0
    warmup_steps: int = 10
    max_input_length: int = 64
    max_output_length: int = 16
    beam_size: int = 3
    passages4gen: int = 3
    preKturns: int = 2
    prompt: str = "please generate the response:"


@dataclass
class RunConfig:
    profile: str = "desk"
    seed: int = 0
    model: ModelSection = field(default_factory=ModelSection)
    fgm: FgmSection = field(default_factory=FgmSection)
    retriever: RetrieverSection = field(default_factory=RetrieverSection)
    reranker: RerankerSection = field(default_factory=RerankerSection)
    generator: GeneratorSection = field(default_factory=GeneratorSection)


_SECTIONS = {
    "model": ModelSection,
    "fgm": FgmSection,
    "retriever": RetrieverSection,
    "reranker": RerankerSection,
    "generator": GeneratorSection,
}

# Full-scale reference values, key for key. The source sheet lists the
# generator's accumulation_steps twice (16 then 1); the later assignment wins.
PAPER_PROFILE: dict[str, object] = {
    "retriever.train_batch_size": 128,
    "retriever.epochs": 50,
    "retriever.max_input_length": 512,
    "retriever.dropout": 0.1,
    "retriever.weight_decay": 0.1,
    "retriever.warmup_steps": 1000,
    "retriever.gradient_checkpoint_segments": 32,
    "retriever.optim": "adam",
    "retriever.learning_rate": 4e-05,
    "retriever.preKturns": 2,
    "reranker.learning_rate": 2e-05,
    "reranker.dropout": 0.1,
    "reranker.epochs": 20,
    "reranker.train_batch_size": 1,
    "reranker.accumulation_steps": 32,
    "reranker.weight_decay": 0.1,
    "reranker.warmup_steps": 1000,
    "reranker.max_input_length": 512,
    "reranker.passages": 20,
    "reranker.preKturns": 2,
    "generator.learning_rate": 2e-04,
    "generator.dropout": 0.1,
    "generator.epochs": 20,
    "generator.accumulation_steps": 1,
    "generator.max_grad_norm": 1.0,
    "generator.train_batch_size": 1,
    "generator.weight_decay": 0.1,
    "generator.warmup_steps": 1000,
    "generator.max_input_length": 1024,
    "generator.max_output_length": 128,
    "generator.beam_size": 3,
    "generator.passages4gen": 5,
    "generator.preKturns": 2,
}


def known_keys() -> list[str]:
    keys = ["profile", "seed"]
    for name, cls in _SECTIONS.items():
        keys.extend(f"{name}.{f.name}" for f in dataclasses.fields(cls))
    return keys


def _coerce(raw: object, target_type: type, key: str) -> object:
    if isinstance(raw, target_type) and not (target_type is int and isinstance(raw, bool)):
        return raw
    if not isinstance(raw, str):
        if target_type is float and isinstance(raw, int):
            return float(raw)
        raise ConfigError(f"{key}: cannot coerce {raw!r} to {target_type.__name__}")
    text = raw.strip()
    try:
        if target_type is bool:
            if text.lower() in ("true", "1", "yes"):
                return True
            if text.lower() in ("false", "0", "no"):
                return False
            raise ValueError(text)
        if target_type is int:
            return int(text)
        if target_type is float:
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"{key}: invalid {target_type.__name__} value {raw!r}") from None


def get_key(config: RunConfig, key: str) -> object:
    section, _, name = key.partition(".")
    if not name:
        if key in ("profile", "seed"):
            return getattr(config, key)
        raise ConfigError(f"unknown config key {key!r}")
    if section not in _SECTIONS or name not in {f.name for f in dataclasses.fields(_SECTIONS[section])}:
        raise ConfigError(f"unknown config key {key!r}")
    return getattr(getattr(config, section), name)


def set_key(config: RunConfig, key: str, value: object) -> None:
    section, _, name = key.partition(".")
    if not name:
        if key == "profile":
            config.profile = str(_coerce(value, str, key))
            return
        if key == "seed":
            config.seed = int(_coerce(value, int, key))
            return
        raise ConfigError(f"unknown config key {key!r}")
    if section not in _SECTIONS:
        raise ConfigError(f"unknown config key {key!r}")
    cls = _SECTIONS[section]
    fields = {f.name: f for f in dataclasses.fields(cls)}
    if name not in fields:
        raise ConfigError(f"unknown config key {key!r}")
    setattr(getattr(config, section), name, _coerce(value, _field_type(fields[name]), key))


def _field_type(f: dataclasses.Field) -> type:
    mapping = {"int": int, "float": float, "bool": bool, "str": str}
    t = f.type
    if isinstance(t, type):
        return t
    return mapping[t]


def default_config(profile: str = "desk", seed: int = 0) -> RunConfig:
    if profile not in ("desk", "paper"):
        raise ConfigError(f"unknown profile {profile!r} (expected desk or paper)")
    config = RunConfig(profile=profile, seed=seed)
    if profile == "paper":
        for key, value in PAPER_PROFILE.items():
            set_key(config, key, value)
    return config


def parse_kv_text(text: str) -> dict[str, str]:
    """Flat `key = value` lines; '#' starts a comment."""
    out: dict[str, str] = {}
    for line_no, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {line_no}: expected key = value")
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    return out


def apply_overrides(config: RunConfig, overrides: dict[str, object]) -> RunConfig:
    # Profile first so later keys override the profile's values.
    if "profile" in overrides:
        base = default_config(str(overrides["profile"]), seed=config.seed)
        config = base
    for key, value in overrides.items():
        if key == "profile":
            continue
        set_key(config, key, value)
    return config


def load_config(path: str | Path | None = None, overrides: dict[str, object] | None = None) -> RunConfig:
    file_overrides: dict[str, object] = {}
    if path is not None:
        file_overrides = dict(parse_kv_text(Path(path).read_text(encoding="utf-8")))
    merged = {**file_overrides, **(overrides or {})}
    profile = str(merged.get("profile", "desk"))
    config = default_config(profile)
    merged.pop("profile", None)
    for key, value in merged.items():
        set_key(config, key, value)
    return config


def dump_config(config: RunConfig) -> str:
    lines = []
    for key in sorted(known_keys()):
        lines.append(f"{key} = {get_key(config, key)}")
    return "\n".join(lines) + "\n"


def config_hash(config: RunConfig) -> str:
    return sha256_text(canonical_json({k: get_key(config, k) for k in known_keys()}))[:16]


def train_step_for(config: RunConfig, component: str, seed: int | None = None) -> TrainStep:
    """Map a config section onto the optimizer step contract."""
    section = getattr(config, component)
    return TrainStep(
        learning_rate=section.learning_rate,
        weight_decay=section.weight_decay,
        warmup_steps=section.warmup_steps,
        accumulation_steps=getattr(section, "accumulation_steps", 1),
        max_grad_norm=getattr(section, "max_grad_norm", 0.0),
        dropout=section.dropout,
        seed=config.seed if seed is None else seed,
    )
