"""Model, pre-training and fine-tuning configuration.

Defaults are the 12-layer base-model values;
``desk()`` presets shrink them to something that trains on one CPU core.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, fields
from pathlib import Path

from ambert.errors import UsageError

VARIANTS = ("ambert", "combo", "hybrid", "bert")


@dataclass
class ModelConfig:
    variant: str = "ambert"
    layers: int = 12
    hidden: int = 768
    heads: int = 12
    head_size: int = 64
    ffn_inner: int = 3072
    max_positions: int = 512
    fine_vocab_size: int = 30522
    coarse_vocab_size: int = 77650
    hidden_dropout: float = 0.1
    attention_dropout: float = 0.1
    type_vocab: int = 2
    granularity_embedding: bool = True
    nsp: bool = False
    init_std: float = 0.02

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.variant not in VARIANTS:
            raise UsageError(f"variant must be one of {', '.join(VARIANTS)}; got {self.variant!r}")
        if self.hidden != self.heads * self.head_size:
            raise UsageError(
                f"hidden ({self.hidden}) must equal heads ({self.heads}) x head_size ({self.head_size})"
            )
        for name in ("layers", "hidden", "heads", "head_size", "ffn_inner", "max_positions", "type_vocab"):
            if getattr(self, name) < 1:
                raise UsageError(f"{name} must be positive")
        for name in ("fine_vocab_size", "coarse_vocab_size"):
            if getattr(self, name) <= 5:
                raise UsageError(f"{name} must exceed the 5 special tokens")
        for name in ("hidden_dropout", "attention_dropout"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise UsageError(f"{name} must lie in [0, 1)")

    @property
    def streams(self):
        return ("fine",) if self.variant == "bert" else ("fine", "coarse")

    @property
    def dual(self):
        """True when the two streams are computed independently."""
        return self.variant in ("ambert", "combo")

    @classmethod
    def desk(cls, **overrides):
        base = dict(layers=2, hidden=64, heads=4, head_size=16, ffn_inner=256, max_positions=128,
                    fine_vocab_size=100, coarse_vocab_size=150)
        base.update(overrides)
        return cls(**base)

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise UsageError(f"unknown model config keys: {', '.join(sorted(unknown))}")
        return cls(**d)


@dataclass
class RunConfig:
    """Flat ``key = value`` configuration for a pre-training run.

    Defaults reproduce the English base-model table; ``language = zh`` switches
    batch size and step budget to the Chinese column.
    """

    language: str = "en"
    variant: str = "ambert"
    num_layers: int = 12
    hidden_size: int = 768
    max_seq_length: int = 512
    ffn_inner_hidden_size: int = 3072
    attention_heads: int = 12
    attention_head_size: int = 64
    dropout: float = 0.1
    attention_dropout: float = 0.1
    warmup_steps: int = 10_000
    peak_learning_rate: float = 1e-4
    batch_size: int = 1024
    weight_decay: float = 0.01
    max_steps: int = 500_000
    learning_rate_decay: str = "linear"
    adam_epsilon: float = 1e-6
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    mask_rate: float = 0.15
    nsp: bool = False
    seed: int = 42
    fine_mode: str = "subword"
    max_coarse_length: int = 512
    log_interval: int = 100
    checkpoint_interval: int = 10_000
    granularity_embedding: bool = True

    def __post_init__(self):
        if self.learning_rate_decay != "linear":
            raise UsageError("only linear learning-rate decay is supported")
        if self.language not in ("en", "zh"):
            raise UsageError("language must be 'en' or 'zh'")
        if not 0.0 <= self.mask_rate <= 1.0:
            raise UsageError("mask_rate must lie in [0, 1]")

    @classmethod
    def base(cls, language="en"):
        if language == "zh":
            return cls(language="zh", batch_size=512, max_steps=1_000_000, fine_mode="char")
        return cls(language=language)

    @classmethod
    def parse(cls, text: str) -> "RunConfig":
        types = {f.name: f.type for f in fields(cls)}
        given = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = (s.strip() for s in line.partition("="))
            if not sep:
                raise UsageError(f"config line {lineno}: expected key = value")
            if key not in types:
                raise UsageError(f"config line {lineno}: unknown key {key!r}")
            given[key] = _coerce(types[key], value, key, lineno)
        # language picks the column of defaults; explicit keys override it
        values = dataclasses.asdict(cls.base(given.get("language", "en")))
        values.update(given)
        return cls(**values)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.parse(Path(path).read_text(encoding="utf-8"))

    def dumps(self) -> str:
        return "".join(f"{k} = {_render(v)}\n" for k, v in dataclasses.asdict(self).items())

    def digest(self) -> str:
        return hashlib.sha256(self.dumps().encode()).hexdigest()

    def model_config(self, fine_vocab_size, coarse_vocab_size) -> ModelConfig:
        return ModelConfig(
            variant=self.variant, layers=self.num_layers, hidden=self.hidden_size,
            heads=self.attention_heads, head_size=self.attention_head_size,
            ffn_inner=self.ffn_inner_hidden_size,
            max_positions=max(self.max_seq_length, self.max_coarse_length),
            fine_vocab_size=fine_vocab_size, coarse_vocab_size=coarse_vocab_size,
            hidden_dropout=self.dropout, attention_dropout=self.attention_dropout,
            granularity_embedding=self.granularity_embedding, nsp=self.nsp,
        )


def _coerce(typ, value, key, lineno):
    typ = str(typ)
    try:
        if typ == "bool":
            if value.lower() in ("true", "1", "yes"):
                return True
            if value.lower() in ("false", "0", "no"):
                return False
            raise ValueError(value)
        if typ == "int":
            return int(float(value)) if "e" in value.lower() else int(value.replace("_", ""))
        if typ == "float":
            return float(value)
        return value
    except ValueError:
        raise UsageError(f"config line {lineno}: bad value {value!r} for {key} ({typ})") from None


def _render(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


@dataclass
class FineTuneConfig:
    task: str = "classification"
    num_labels: int = 2
    reg_lambda: float = 1.0
    seed: int = 0
    epochs: int = 6
    learning_rate: float = 2e-5
    batch_size: int = 32
    max_length: int = 512
    warmup_fraction: float = 0.1
    weight_decay: float = 0.01

    def __post_init__(self):
        if self.task not in ("classification", "span"):
            raise UsageError("task must be 'classification' or 'span'")
        if self.reg_lambda < 0:
            raise UsageError("regularization coefficient must be >= 0")
        if self.task == "classification" and self.num_labels < 2:
            raise UsageError("classification needs num_labels >= 2")

    @classmethod
    def desk(cls, **kw):
        """Budget for the synthetic tasks on the desk-scale model (about 120 steps)."""
        base = dict(epochs=15, learning_rate=1e-3, batch_size=32)
        base.update(kw)
        return cls(**base)

    @classmethod
    def race(cls, **kw):
        """Multiple-choice preset: no agreement regularization."""
        base = dict(reg_lambda=0.0, epochs=6, learning_rate=1e-5, batch_size=32)
        base.update(kw)
        return cls(**base)

    def to_json(self):
        return json.dumps(dataclasses.asdict(self), sort_keys=True)
