"""Flat key=value experiment configuration with section prefixes.

One file drives every subcommand; keys look like ``finetune.beta=5e-4``.
Unknown keys, unparseable values and missing files raise ConfigError with a
machine-parsable code and the offending key, which the CLI turns into exit
status 2.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import get_origin, get_type_hints

from . import FORMAT_VERSION


class ConfigError(ValueError):
    def __init__(self, code: str, key: str, message: str):
        super().__init__(f"{code}: {key}: {message}")
        self.code = code
        self.key = key
        self.message = message


@dataclass
class DataSection:
    num_images: int = 4096
    p_defect: float = 0.3
    image_size: int = 32


@dataclass
class ModelSection:
    base_channels: int = 16
    emb_dim: int = 64
    num_steps: int = 50
    noise_min: float = 0.004
    noise_max: float = 0.36


@dataclass
class PretrainSection:
    steps: int = 4000
    batch_size: int = 64
    lr: float = 2e-3
    cond_dropout: float = 0.1
    classifier_steps: int = 600
    classifier_lr: float = 1e-3
    classifier_channels: int = 16
    calibration_samples: int = 1000


@dataclass
class FinetuneSection:
    beta: float = 1e-3
    lr0: float = 2e-5
    truncate_k: int = 2
    rank: int = 64
    steps: int = 2000
    batch_size: int = 8
    method: str = "focus_n_fix"
    cfg_weight: float = 1.0
    clamp_denoised: bool = True
    lora_init_scale: float = 0.01
    reward: str = "defect"
    num_pairs: int = 64
    smooth_kernel: int = 16
    smooth_sigma: float = 4.0
    cache_references: bool = True
    checkpoint_every: int = 0
    out_name: str = "finetune"


@dataclass
class MaskSection:
    threshold: float = 0.4
    min_area: int = 4
    max_components: int = 3
    dilation_radius: int = 2


@dataclass
class GuidanceSection:
    preset: str = "rg"  # "rg" or "rg-rc"
    scale: float = 2.0
    clip_norm: float = 2.0
    start_step: int = 10
    num_pairs: int = 16
    out_name: str = ""  # default: preset name


@dataclass
class EvalSection:
    num_pairs: int = 64
    lora_scale: float = 1.0
    grid_pairs: int = 16
    judges: int = 11
    pos_threshold: float = 0.05
    neg_threshold: float = 0.05
    noise_sigma: float = 0.02
    margin: int = 3
    run_dir: str = ""  # default: <out>/<finetune.out_name>
    out_name: str = "eval"


@dataclass
class AblateSection:
    betas: list[float] = field(default_factory=lambda: [0.0, 1e-4, 5e-4, 1e-3, 5e-3])
    out_name: str = "ablate"


@dataclass
class ReportSection:
    input_dir: str = ""  # default: <out>/<ablate.out_name>
    out_name: str = "report"


@dataclass
class ExperimentConfig:
    seed: int = 0
    out_dir: str = "runs/exp"
    version: int = FORMAT_VERSION
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    finetune: FinetuneSection = field(default_factory=FinetuneSection)
    mask: MaskSection = field(default_factory=MaskSection)
    guidance: GuidanceSection = field(default_factory=GuidanceSection)
    eval: EvalSection = field(default_factory=EvalSection)
    ablate: AblateSection = field(default_factory=AblateSection)
    report: ReportSection = field(default_factory=ReportSection)


_TOP_KEYS = ("seed", "out_dir", "version")
_SECTIONS = ("data", "model", "pretrain", "finetune", "mask", "guidance", "eval", "ablate", "report")


def _parse_value(key: str, raw: str, typ):
    raw = raw.strip()
    try:
        if typ is bool:
            low = raw.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        if typ is str:
            return raw
        if get_origin(typ) is list:
            if raw == "":
                return []
            return [float(x) for x in raw.split(",")]
    except ValueError as exc:
        raise ConfigError("invalid-value", key, str(exc)) from None
    raise ConfigError("invalid-value", key, f"unsupported field type {typ}")


def set_key(cfg: ExperimentConfig, key: str, raw: str) -> None:
    if key in _TOP_KEYS:
        hints = get_type_hints(ExperimentConfig)
        setattr(cfg, key, _parse_value(key, raw, hints[key]))
        return
    if "." not in key:
        raise ConfigError("unknown-key", key, "expected section.field or one of " + ", ".join(_TOP_KEYS))
    section, _, name = key.partition(".")
    if section not in _SECTIONS:
        raise ConfigError("unknown-key", key, f"unknown section {section!r}")
    sub = getattr(cfg, section)
    hints = get_type_hints(type(sub))
    if name not in hints:
        raise ConfigError("unknown-key", key, f"section {section!r} has no field {name!r}")
    setattr(sub, name, _parse_value(key, raw, hints[name]))


def parse_config_text(text: str, cfg: ExperimentConfig | None = None) -> ExperimentConfig:
    cfg = cfg or ExperimentConfig()
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError("invalid-value", f"line {lineno}", f"expected key=value, got {stripped!r}")
        key, _, raw = stripped.partition("=")
        set_key(cfg, key.strip(), raw)
    return cfg


def load_config(path: str | Path) -> ExperimentConfig:
    p = Path(path)
    if not p.exists():
        raise ConfigError("missing-file", str(path), "config file does not exist")
    return parse_config_text(p.read_text())


def apply_overrides(cfg: ExperimentConfig, overrides: list[str]) -> ExperimentConfig:
    for item in overrides:
        if "=" not in item:
            raise ConfigError("invalid-value", item, "override must look like key=value")
        key, _, raw = item.partition("=")
        set_key(cfg, key.strip(), raw)
    return cfg


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, list):
        return ",".join(f"{x:g}" for x in v)
    if isinstance(v, float):
        return f"{v:.10g}"
    return str(v)


def to_text(cfg: ExperimentConfig) -> str:
    """Serialize the fully resolved configuration (defaults + overrides)."""
    lines = [f"{k}={_format_value(getattr(cfg, k))}" for k in _TOP_KEYS]
    for section in _SECTIONS:
        sub = getattr(cfg, section)
        for f in dataclasses.fields(sub):
            lines.append(f"{section}.{f.name}={_format_value(getattr(sub, f.name))}")
    return "\n".join(lines) + "\n"


def validate(cfg: ExperimentConfig) -> None:
    if cfg.version != FORMAT_VERSION:
        raise ConfigError(
            "version-mismatch",
            "version",
            f"config version {cfg.version}, binary supports {FORMAT_VERSION}",
        )
    if cfg.guidance.preset not in ("rg", "rg-rc"):
        raise ConfigError("invalid-value", "guidance.preset", f"expected rg or rg-rc, got {cfg.guidance.preset!r}")
    if cfg.finetune.method not in ("focus_n_fix", "draft"):
        raise ConfigError("invalid-value", "finetune.method", f"unknown method {cfg.finetune.method!r}")
    if cfg.finetune.reward not in ("defect", "classifier"):
        raise ConfigError("invalid-value", "finetune.reward", f"unknown reward {cfg.finetune.reward!r}")
    if not 0.0 <= cfg.mask.threshold <= 1.0:
        raise ConfigError("invalid-value", "mask.threshold", "threshold must lie in [0, 1]")
    if cfg.mask.dilation_radius < 0:
        raise ConfigError("invalid-value", "mask.dilation_radius", "radius must be >= 0")
    if cfg.finetune.beta < 0:
        raise ConfigError("invalid-value", "finetune.beta", "beta must be >= 0")
    if cfg.finetune.lr0 <= 0:
        raise ConfigError("invalid-value", "finetune.lr0", "lr0 must be > 0")
