"""Run configuration as flat ``section.key = value`` text.

Sections: ``model.*`` (:class:`~sstg.network.ModelConfig`), ``train.*``
(:class:`TrainingConfig`), ``ssl.*`` (:class:`SSLConfig`) and ``synth.*``
(:class:`~sstg.synthdata.SynthConfig`). Tuples are written comma-separated,
booleans as ``true``/``false``. Blank lines and ``#`` comments are ignored.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

from .network import ABLATIONS, ModelConfig
from .synthdata import SynthConfig


class ConfigError(ValueError):
    pass


@dataclass
class TrainingConfig:
    lr0: float = 1e-4
    halve_every: int = 50
    epochs: int = 300
    batch_size: int = 32
    split: tuple = (0.6, 0.2, 0.2)
    mask_rate: float = 0.1
    topk_ratio: float = 0.8
    seed: int = 0
    ablate: tuple = ()
    pcgrad_tasks: int = 2
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    threshold: float = 0.5
    dtype: str = "float32"
    eval_batch_size: int = 64

    def validate(self):
        if len(self.split) != 3 or any(s < 0 for s in self.split):
            raise ConfigError(f"split must be three non-negative fractions, got {self.split}")
        if not math.isclose(sum(self.split), 1.0, abs_tol=1e-9):
            raise ConfigError(f"split must sum to 1, got {sum(self.split)}")
        if not 0.0 <= self.mask_rate <= 1.0:
            raise ConfigError(f"mask_rate must lie in [0, 1], got {self.mask_rate}")
        if not 0.0 < self.topk_ratio <= 1.0:
            raise ConfigError(f"topk_ratio must lie in (0, 1], got {self.topk_ratio}")
        unknown = set(self.ablate) - set(ABLATIONS)
        if unknown:
            raise ConfigError(f"unknown ablation flags {sorted(unknown)}; known: {', '.join(ABLATIONS)}")
        if self.pcgrad_tasks not in (2, 3):
            raise ConfigError(f"pcgrad_tasks must be 2 or 3, got {self.pcgrad_tasks}")
        if self.batch_size < 1 or self.epochs < 0 or self.halve_every < 1:
            raise ConfigError("batch_size >= 1, epochs >= 0 and halve_every >= 1 are required")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype}")


@dataclass
class SSLConfig:
    granularity: str = "element"
    patch_len: int = 4
    lam_rec: float = 1.0
    lam_sparse: float = 0.1
    lam_cos: float = 1.0
    lam_mse: float = 1.0
    sparse_p: int = 4
    masked_only: bool = False
    topk_on_ssl: bool = False


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainingConfig = field(default_factory=TrainingConfig)
    ssl: SSLConfig = field(default_factory=SSLConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)

    def validate(self):
        self.train.validate()
        if self.ssl.granularity not in ("element", "time-patch"):
            raise ConfigError(f"unknown ssl.granularity {self.ssl.granularity!r}")
        if self.model.arch not in ("sstg", "mlp"):
            raise ConfigError(f"unknown model.arch {self.model.arch!r}")
        return self


SECTIONS = ("model", "train", "ssl", "synth")


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _coerce(raw: str, default, key: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            as_float = float(raw)
            if not as_float.is_integer():
                raise ValueError(raw)
            return int(as_float)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [s.strip() for s in raw.split(",") if s.strip()]
            if not default:
                return tuple(items)
            return tuple(_coerce(s, default[0], key) for s in items)
        return raw
    except ValueError as exc:
        raise ConfigError(f"cannot parse {key} = {raw!r} as {type(default).__name__}") from exc


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for section in SECTIONS:
        obj = getattr(cfg, section)
        for f in dataclasses.fields(obj):
            lines.append(f"{section}.{f.name} = {_format(getattr(obj, f.name))}")
        lines.append("")
    return "\n".join(lines)


def apply_overrides(cfg: RunConfig, pairs) -> RunConfig:
    """Set ``(dotted_key, raw_value)`` pairs on ``cfg`` in place."""
    for key, raw in pairs:
        section, _, name = key.partition(".")
        if section not in SECTIONS or not name:
            raise ConfigError(f"unknown config key {key!r}; expected one of {SECTIONS}.<name>")
        obj = getattr(cfg, section)
        names = {f.name for f in dataclasses.fields(obj)}
        if name not in names:
            raise ConfigError(f"unknown config key {key!r}")
        setattr(obj, name, _coerce(raw, getattr(obj, name), key))
    # re-run dataclass checks where they exist
    if hasattr(cfg.synth, "__post_init__"):
        cfg.synth.__post_init__()
    return cfg


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    cfg = base or RunConfig()
    pairs = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {line!r}")
        key, _, value = line.partition("=")
        pairs.append((key.strip(), value))
    return apply_overrides(cfg, pairs).validate()


def load_config(path) -> RunConfig:
    from pathlib import Path
    return parse_config(Path(path).read_text())
