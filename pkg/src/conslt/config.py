"""Flat ``key = value`` run configuration shared by every CLI command.

One key per line, ``#`` starts a comment. Keys mirror the fields of
``ModelConfig``, ``TrainConfig`` and ``ContrastiveConfig`` (the latter with a
``cl_`` prefix) plus data paths and decoding options. Unknown keys and values
of the wrong type raise ``ParseError`` with the offending line.
"""
import dataclasses
import os
from pathlib import Path

from .contrastive import ContrastiveConfig
from .errors import ConfigError, ParseError
from .model import ModelConfig
from .train import TrainConfig

_MODEL_KEYS = ("num_encoder_layers", "num_decoder_layers", "d_model", "num_heads", "d_ff",
               "dropout_rate", "max_positions", "position_encoding", "norm_style")
_TRAIN_KEYS = tuple(f.name for f in dataclasses.fields(TrainConfig) if f.name != "contrastive")
_CL_KEYS = tuple(f.name for f in dataclasses.fields(ContrastiveConfig))
_PATH_KEYS = ("train_path", "dev_path", "test_path", "out_dir")

TABLES = ("3", "4")


@dataclasses.dataclass
class RunConfig:
    model: dict = dataclasses.field(default_factory=lambda: build({}).model)
    train: TrainConfig = dataclasses.field(default_factory=TrainConfig)
    train_path: str = None
    dev_path: str = None
    test_path: str = None
    out_dir: str = None
    source_kind: str = "tokens"  # or "features"
    min_freq: int = 1
    lowercase: bool = False
    beam_size: int = 1
    length_penalty: float = 1.0
    ablate_tables: tuple = TABLES

    def model_config(self, src_vocab_size, tgt_vocab_size, src_feature_dim=0):
        return ModelConfig(src_vocab_size=src_vocab_size, tgt_vocab_size=tgt_vocab_size,
                           src_feature_dim=src_feature_dim, **self.model)

    def items(self):
        """Every key with its resolved value, in file order."""
        out = [(k, self.model[k]) for k in _MODEL_KEYS]
        out += [(k, getattr(self.train, k)) for k in _TRAIN_KEYS]
        out += [("cl_" + k, getattr(self.train.contrastive, k)) for k in _CL_KEYS]
        out += [(k, getattr(self, k)) for k in _PATH_KEYS]
        out += [("source_kind", self.source_kind), ("min_freq", self.min_freq),
                ("lowercase", self.lowercase), ("beam_size", self.beam_size),
                ("length_penalty", self.length_penalty),
                ("ablate_tables", tuple(self.ablate_tables))]
        return out

    def dumps(self):
        lines = []
        for key, value in self.items():
            if value is None:
                continue
            if isinstance(value, bool):
                value = "true" if value else "false"
            elif isinstance(value, float):
                value = repr(value)
            elif isinstance(value, tuple):
                value = ",".join(value)
            lines.append(f"{key} = {value}")
        return "\n".join(lines) + "\n"

    def write(self, path):
        Path(path).write_text(self.dumps(), encoding="utf-8")


def _field_types():
    types = {}
    mfields = {f.name: f for f in dataclasses.fields(ModelConfig)}
    for k in _MODEL_KEYS:
        types[k] = mfields[k].type
    tfields = {f.name: f for f in dataclasses.fields(TrainConfig)}
    for k in _TRAIN_KEYS:
        types[k] = tfields[k].type
    types["stop_at_score"] = "optional_float"
    for f in dataclasses.fields(ContrastiveConfig):
        types["cl_" + f.name] = f.type
    types.update({k: "path" for k in _PATH_KEYS})
    types.update(source_kind="str", min_freq="int", lowercase="bool", beam_size="int",
                 length_penalty="float", ablate_tables="tables")
    return {k: (t if isinstance(t, str) else t.__name__) for k, t in types.items()}


KEY_TYPES = _field_types()


def _coerce(kind, raw):
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    if kind == "optional_float":
        return None if raw.lower() in ("none", "") else float(raw)
    if kind == "bool":
        low = raw.lower()
        if low in ("true", "yes", "1", "on"):
            return True
        if low in ("false", "no", "0", "off"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if kind == "tables":
        tables = tuple(t.strip() for t in raw.split(",") if t.strip())
        if not tables or any(t not in TABLES for t in tables):
            raise ValueError(f"ablate_tables takes a subset of {','.join(TABLES)}, got {raw!r}")
        return tables
    return raw


def parse_config(text, path="<config>", base_dir=None):
    """Parse config text; relative paths resolve against ``base_dir``."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError("expected 'key = value'", path, lineno)
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in KEY_TYPES:
            raise ParseError(f"unknown key {key!r}", path, lineno)
        if key in values:
            raise ParseError(f"duplicate key {key!r}", path, lineno)
        kind = KEY_TYPES[key]
        try:
            value = _coerce(kind, raw)
        except ValueError as exc:
            raise ParseError(f"{key}: {exc}", path, lineno) from None
        if kind == "path" and base_dir is not None and not os.path.isabs(value):
            value = os.path.normpath(os.path.join(base_dir, value))
        values[key] = value
    try:
        return build(values)
    except (ConfigError, TypeError) as exc:
        raise ParseError(str(exc), path) from None


def build(values):
    """A validated RunConfig from a ``{key: typed value}`` mapping."""
    model = {k: values[k] for k in _MODEL_KEYS if k in values}
    model = dataclasses.asdict(ModelConfig(src_vocab_size=1, tgt_vocab_size=1, **model))
    model = {k: model[k] for k in _MODEL_KEYS}
    ccfg = ContrastiveConfig(**{k: values["cl_" + k] for k in _CL_KEYS if "cl_" + k in values})
    tcfg = TrainConfig(contrastive=ccfg, **{k: values[k] for k in _TRAIN_KEYS if k in values})
    rest = {k: values[k] for k in values if k not in _MODEL_KEYS and k not in _TRAIN_KEYS
            and not k.startswith("cl_")}
    cfg = RunConfig(model=model, train=tcfg, **rest)
    if cfg.source_kind not in ("tokens", "features"):
        raise ConfigError(f"source_kind must be 'tokens' or 'features', got {cfg.source_kind!r}")
    if cfg.beam_size < 1:
        raise ConfigError(f"beam_size must be >= 1, got {cfg.beam_size}")
    if cfg.min_freq < 1:
        raise ConfigError(f"min_freq must be >= 1, got {cfg.min_freq}")
    return cfg


def load_config(path):
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except UnicodeDecodeError as exc:
        raise ParseError(f"not UTF-8: {exc}", path) from None
    return parse_config(text, str(path), base_dir=str(path.parent))


def with_overrides(cfg, **values):
    """Copy of ``cfg`` with key=value overrides using config-file key names."""
    merged = dict(cfg.items())
    for key, value in values.items():
        if key not in KEY_TYPES:
            raise ConfigError(f"unknown key {key!r}")
        merged[key] = value
    merged = {k: v for k, v in merged.items() if v is not None or k == "stop_at_score"}
    return build(merged)
