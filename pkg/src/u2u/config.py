"""Flat ``key = value`` pipeline configuration.

Blank lines and ``#`` comments are ignored. Unknown keys are an error, and
each value is checked by the dataclass that owns it as soon as the file
is loaded.
"""

import os
from dataclasses import dataclass, field, fields

from .errors import ConfigError
from .features import FeatureConfig
from .seqprep import SEQ_LEN, vocab_size
from .trainer import TrainConfig
from .transformer import ModelConfig

FEATURE_KEYS = {f.name: f.type for f in fields(FeatureConfig) if f.name != "sample_rate"}
MODEL_KEYS = {"d_model": int, "heads": int, "enc_layers": int, "dec_layers": int, "ffn_dim": int,
              "dropout": float, "max_len": int, "feature_dim": int, "stack_factor": int}
TRAIN_KEYS = {"lr": float, "beta1": float, "beta2": float, "eps": float, "epochs": int, "batch_size": int,
              "val_every": int, "dedup": bool}
OTHER_KEYS = {"seed": int, "k": int, "max_frames": int, "frontend": str, "out_dir": str,
              "train_manifest": str, "dev_manifest": str, "test_manifest": str,
              "source_codebook": str, "target_codebook": str}

FRONTEND_DEFAULTS = {
    "discrete": dict(d_model=512, heads=1, enc_layers=3, dec_layers=3, ffn_dim=2048),
    "continuous": dict(d_model=256, heads=4, enc_layers=6, dec_layers=6, ffn_dim=2048),
}

_TYPES = {"float": float, "int": int, "bool": bool, "str": str}


def _convert(key, raw, typ):
    if isinstance(typ, str):
        typ = _TYPES[typ]
    try:
        if typ is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return typ(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {typ.__name__}") from None


@dataclass
class PipelineConfig:
    values: dict = field(default_factory=dict)
    base_dir: str = "."

    ALL_KEYS = {**FEATURE_KEYS, **MODEL_KEYS, **TRAIN_KEYS, **OTHER_KEYS}

    def __post_init__(self):
        unknown = sorted(set(self.values) - set(self.ALL_KEYS))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        self.frontend_name(None)
        if self.k < 2:
            raise ConfigError("k must be >= 2")
        self.feature_config()
        self.train_config()
        for frontend in FRONTEND_DEFAULTS:
            self.model_config(frontend)

    def get(self, key, default=None):
        return self.values.get(key, default)

    @property
    def seed(self):
        return self.values.get("seed", 0)

    @property
    def k(self):
        return self.values.get("k", 100)

    def frontend_name(self, override=None):
        name = override or self.values.get("frontend", "discrete")
        if name not in FRONTEND_DEFAULTS:
            raise ConfigError(f"unknown frontend {name!r}")
        return name

    def path(self, key, default=None):
        p = self.values.get(key, default)
        if p is None:
            return None
        return p if os.path.isabs(p) else os.path.join(self.base_dir, p)

    def feature_config(self):
        kw = {k: v for k, v in self.values.items() if k in FEATURE_KEYS}
        return FeatureConfig(**kw)

    def model_config(self, frontend=None, k_source=None, k_target=None):
        frontend = self.frontend_name(frontend)
        kw = dict(FRONTEND_DEFAULTS[frontend])
        kw.update({k: v for k, v in self.values.items() if k in MODEL_KEYS})
        kw.setdefault("max_len", SEQ_LEN)
        kw.setdefault("dropout", 0.1)
        # one shared vocabulary sized for the larger of the two codebooks
        kw["vocab"] = vocab_size(max(k_source or self.k, k_target or self.k))
        return ModelConfig(frontend=frontend, **kw)

    def train_config(self):
        kw = {k: v for k, v in self.values.items() if k in TRAIN_KEYS}
        return TrainConfig(seed=self.seed, **kw)


def parse_config(text, base_dir="."):
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in PipelineConfig.ALL_KEYS:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _convert(key, raw, PipelineConfig.ALL_KEYS[key])
    return PipelineConfig(values, base_dir)


def load_config(path):
    if path is None:
        return PipelineConfig()
    with open(path, encoding="utf-8") as f:
        return parse_config(f.read(), os.path.dirname(os.path.abspath(path)))
