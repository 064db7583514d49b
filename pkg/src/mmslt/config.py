"""Pipeline configuration: dataclasses, YAML round-trip, dotted overrides."""

from __future__ import annotations

import hashlib
import json
from dataclasses import MISSING, asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any, Optional

import yaml

from .models import ModelProfile


class ConfigError(ValueError):
    pass


@dataclass
class StageConfig:
    stage: str = "mmlp"
    epochs: int = 80
    batch_size: int = 16
    lr_max: float = 1e-4
    lr_min: float = 1e-8
    weight_decay: float = 0.2
    betas: tuple = (0.9, 0.98)
    eps: float = 1e-8
    warmup_steps: int = 0
    label_smoothing: float = 0.0
    lam: float = 0.1
    augment_p: float = 0.5
    eval_every: int = 5
    use_align: bool = True
    use_dm: bool = True
    dev_decode: str = "beam"

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.stage not in ("mmlp", "slt"):
            raise ConfigError(f"stage must be mmlp or slt, got {self.stage!r}")
        if self.epochs < 0 or self.batch_size < 1 or self.eval_every < 1:
            raise ConfigError(f"{self.stage}: epochs >= 0, batch_size >= 1 and eval_every >= 1 required")
        if not 0.0 <= self.augment_p <= 1.0:
            raise ConfigError(f"{self.stage}: augment_p must be in [0, 1]")
        if self.lam < 0:
            raise ConfigError(f"{self.stage}: lam must be >= 0")
        if self.lr_min > self.lr_max:
            raise ConfigError(f"{self.stage}: lr_min exceeds lr_max")
        if self.dev_decode not in ("beam", "greedy"):
            raise ConfigError(f"{self.stage}: dev_decode must be beam or greedy")


def _mmlp_defaults() -> StageConfig:
    return StageConfig("mmlp", epochs=80, batch_size=16, weight_decay=0.2, lam=0.1)


def _slt_defaults() -> StageConfig:
    return StageConfig("slt", epochs=200, batch_size=8, weight_decay=1e-3, label_smoothing=0.2)


@dataclass
class GSDConfig:
    prompt_id: int = 3
    client: str = "mock"         # mock | http
    url: Optional[str] = None
    model: Optional[str] = None
    batch_size: int = 8
    max_tokens: int = 256
    target_side: int = 256
    attempts: int = 3
    backoff: float = 0.5
    encoder_seed: int = 1234


@dataclass
class DecodeSettings:
    beam_size: int = 8
    length_penalty: float = 1.0
    max_len: Optional[int] = None     # None: 1.5x longest training sentence, capped at 128


@dataclass
class ModelSettings:
    desc_mode: str = "mapped"         # mapped | direct | none
    enc_layernorm: bool = True
    dec_layernorm: bool = True
    dec_base_trainable: bool = False
    dm_grad_to_visual: bool = True


@dataclass
class DataSettings:
    manifest: str = "data/manifest.jsonl"
    tokenizer: str = "whitespace"
    metric_tokenization: str = "whitespace"


@dataclass
class PipelineConfig:
    seed: int = 0
    profile: ModelProfile = field(default_factory=ModelProfile.full)
    data: DataSettings = field(default_factory=DataSettings)
    gsd: GSDConfig = field(default_factory=GSDConfig)
    model: ModelSettings = field(default_factory=ModelSettings)
    mmlp: StageConfig = field(default_factory=_mmlp_defaults)
    slt: StageConfig = field(default_factory=_slt_defaults)
    decode: DecodeSettings = field(default_factory=DecodeSettings)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("mmlp", "slt"):
            d[k]["betas"] = list(d[k]["betas"])
        return d

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def dump(self, path: str | Path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        return _build(cls, d, "")


def toy_config(seed: int = 0) -> PipelineConfig:
    """Desk-scale preset: toy profile, short schedules, per-epoch dev evaluation."""
    cfg = PipelineConfig(seed=seed, profile=ModelProfile.toy(ma_hidden=128))
    # the mapper still learns from frozen visual features; only alignment shapes them
    cfg.model.dm_grad_to_visual = False
    cfg.mmlp = StageConfig("mmlp", epochs=5, batch_size=12, lr_max=3e-3, lr_min=1e-8,
                           weight_decay=0.2, lam=0.1, eval_every=1, augment_p=0.0)
    cfg.slt = StageConfig("slt", epochs=20, batch_size=8, lr_max=3e-3, lr_min=1e-8,
                          weight_decay=1e-3, label_smoothing=0.2, eval_every=1, augment_p=0.0)
    cfg.gsd.target_side = 256
    return cfg


PRESETS = {"full": PipelineConfig, "toy": toy_config}


def _build(cls, d: Any, where: str):
    if d is None:
        d = {}
    if not isinstance(d, dict):
        raise ConfigError(f"{where or 'config'}: expected a mapping")
    if cls is ModelProfile:
        known = {f.name for f in fields(ModelProfile)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"{where}: unknown key(s) {sorted(unknown)}")
        defaults = {f.name: f.default for f in fields(ModelProfile)}
        d = {k: _coerce(v, defaults[k], f"{where}.{k}") for k, v in d.items()}
        try:
            return ModelProfile.from_dict(d)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"{where}: {e}") from None
    kwargs = {}
    known = {f.name: f for f in fields(cls)}
    for k, v in d.items():
        if k not in known:
            raise ConfigError(f"{where + '.' if where else ''}{k}: unknown key")
        f = known[k]
        sub = f.default_factory() if f.default_factory is not MISSING else None
        if sub is not None and is_dataclass(sub):
            kwargs[k] = _build(type(sub), v, f"{where + '.' if where else ''}{k}")
        else:
            kwargs[k] = _coerce(v, f.default, f"{where + '.' if where else ''}{k}")
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where or 'config'}: {e}") from None


def _coerce(v: Any, default: Any, where: str) -> Any:
    # YAML 1.1 reads "5e-3" (no dot) as a string
    if isinstance(v, str) and isinstance(default, float):
        try:
            return float(v)
        except ValueError:
            raise ConfigError(f"{where}: expected a number, got {v!r}") from None
    return v


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def apply_overrides(d: dict, overrides: list[str]) -> dict:
    """Apply ``a.b.c=value`` strings; values are parsed as YAML scalars."""
    d = json.loads(json.dumps(d))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError as e:
            raise ConfigError(f"override {item!r}: {e}") from None
        node = d
        parts = key.strip().split(".")
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                raise ConfigError(f"override {key!r}: {p!r} is not a section")
            node = node[p]
        if parts[-1] not in node:
            raise ConfigError(f"override {key!r}: unknown key")
        node[parts[-1]] = value
    return d


def load_config(path: Optional[str | Path] = None, overrides: Optional[list[str]] = None,
                preset: Optional[str] = None) -> PipelineConfig:
    """Preset defaults, then the YAML file, then dotted overrides."""
    file_d: dict = {}
    if path is not None:
        try:
            file_d = yaml.safe_load(Path(path).read_text()) or {}
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except yaml.YAMLError as e:
            raise ConfigError(f"{path}: invalid YAML ({e})") from None
        if not isinstance(file_d, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    preset = preset or file_d.pop("preset", None) or "full"
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}")
    base = PRESETS[preset]().to_dict()
    merged = apply_overrides(_merge(base, file_d), overrides or [])
    return PipelineConfig.from_dict(merged)
