"""Run configuration: presets, INI files and command-line overrides.

Resolution order, later wins:

  1. the preset bundle named by the profile (``--profile`` beats the file's
     ``[run] profile``, which beats the default ``reduced``)
  2. individual fields from the INI file
  3. individual command-line flags

The profile name picks a whole bundle (network dims, image size, epoch
budgets); file keys and flags then tweak single fields on top of it.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, replace

from .datagen import SyntheticConfig
from .errors import ConfigError
from .fusion import DecisionConfig, HtdnTrainConfig
from .language_net import LanguageConfig
from .vision_net import PROFILES, VisionTrainConfig


@dataclass
class EmbedConfig:
    dim: int = 100
    window: int = 5
    negatives: int = 5
    epochs: int = 5
    min_count: int = 2
    subsample: float = 1e-3
    lr: float = 0.025

    def validate(self):
        for name in ("dim", "window", "negatives", "epochs", "min_count"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"embeddings.{name} must be positive")
        if self.lr <= 0:
            raise ConfigError("embeddings.lr must be positive")
        return self


@dataclass
class RunConfig:
    seed: int = 0
    profile: str = "reduced"
    val_fraction: float = 0.1
    pretrain_epochs: int = 2
    baseline_c: float = 1.0
    forest_trees: int = 10
    data: SyntheticConfig = field(default_factory=SyntheticConfig)
    embed: EmbedConfig = field(default_factory=EmbedConfig)
    language: LanguageConfig = field(default_factory=LanguageConfig)
    vision: VisionTrainConfig = field(default_factory=VisionTrainConfig)
    decision: DecisionConfig = field(default_factory=DecisionConfig)
    joint: HtdnTrainConfig = field(default_factory=HtdnTrainConfig)

    def validate(self):
        if self.profile not in PROFILES:
            raise ConfigError(f"unknown profile {self.profile!r}; "
                              f"choose one of {sorted(PROFILES)}")
        if not 0.0 < self.val_fraction < 0.5:
            raise ConfigError("run.val_fraction must be in (0, 0.5)")
        if self.pretrain_epochs < 0:
            raise ConfigError("vision.pretrain_epochs must be >= 0")
        if self.baseline_c <= 0:
            raise ConfigError("run.baseline_c must be positive")
        if self.forest_trees <= 0:
            raise ConfigError("run.forest_trees must be positive")
        # the language branch consumes whatever the embedding stage produces
        if self.language.embed_dim != self.embed.dim:
            raise ConfigError("language.embed_dim is derived from embeddings.dim; "
                              "set embeddings.dim instead")
        try:
            self.data.validate()
            self.embed.validate()
            self.language.validate()
            self.vision.validate()
            self.decision.validate()
            self.joint.validate()
        except ConfigError:
            raise
        except Exception as e:
            raise ConfigError(str(e)) from None
        return self


def _preset(profile: str) -> RunConfig:
    if profile == "full":
        return RunConfig(
            profile="full",
            data=SyntheticConfig(image_size=224),
            embed=EmbedConfig(dim=100),
            language=LanguageConfig(embed_dim=100, hidden_dim=300, repr_dim=300),
            decision=DecisionConfig(channels=(8, 16), kernel=5, fc_width=150),
        )
    if profile == "reduced":
        return RunConfig(
            profile="reduced",
            data=SyntheticConfig(image_size=64),
            embed=EmbedConfig(dim=100),
            language=LanguageConfig(embed_dim=100, hidden_dim=300, repr_dim=300),
            decision=DecisionConfig(channels=(8, 16), kernel=5, fc_width=150),
        )
    if profile == "light":
        return RunConfig(
            profile="light",
            data=SyntheticConfig(ads=600, image_size=24, images_mean=2.0,
                                 images_max=6, length_mean=60.0, length_sd=30.0,
                                 length_cap=90),
            embed=EmbedConfig(dim=32, epochs=4),
            language=LanguageConfig(embed_dim=32, hidden_dim=48, repr_dim=48,
                                    max_len=90, epochs=6),
            decision=DecisionConfig(channels=(6, 12), kernel=5, fc_width=64),
            joint=HtdnTrainConfig(epochs=6),
            pretrain_epochs=2,
        )
    raise ConfigError(f"unknown profile {profile!r}; choose one of {sorted(PROFILES)}")


# section -> key -> (dataclass attribute path, parser)
def _parse_channels(raw: str) -> tuple:
    try:
        vals = tuple(int(v.strip()) for v in raw.split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"decision.channels must be comma-separated integers, got {raw!r}") from None
    if not vals:
        raise ConfigError("decision.channels must name at least one channel count")
    return vals


_SCHEMA = {
    "run": {
        "seed": ("seed", int),
        "profile": ("profile", str),
        "val_fraction": ("val_fraction", float),
        "baseline_c": ("baseline_c", float),
        "forest_trees": ("forest_trees", int),
    },
    "data": {
        "ads": ("data.ads", int),
        "positive_fraction": ("data.positive_fraction", float),
        "length_mean": ("data.length_mean", float),
        "length_sd": ("data.length_sd", float),
        "length_min": ("data.length_min", int),
        "length_cap": ("data.length_cap", int),
        "images_mean": ("data.images_mean", float),
        "images_max": ("data.images_max", int),
        "image_size": ("data.image_size", int),
        "text_signal": ("data.text_signal", float),
        "image_signal": ("data.image_signal", float),
        "obfuscation_rate": ("data.obfuscation_rate", float),
        "emoji_rate": ("data.emoji_rate", float),
        "seed": ("data.seed", int),
    },
    "embeddings": {
        "dim": ("embed.dim", int),
        "window": ("embed.window", int),
        "negatives": ("embed.negatives", int),
        "epochs": ("embed.epochs", int),
        "min_count": ("embed.min_count", int),
        "subsample": ("embed.subsample", float),
        "lr": ("embed.lr", float),
    },
    "language": {
        "hidden_dim": ("language.hidden_dim", int),
        "repr_dim": ("language.repr_dim", int),
        "dropout": ("language.dropout", float),
        "max_len": ("language.max_len", int),
        "lr": ("language.lr", float),
        "epochs": ("language.epochs", int),
        "batch_size": ("language.batch_size", int),
    },
    "vision": {
        "lr": ("vision.lr", float),
        "epochs": ("vision.epochs", int),
        "batch_size": ("vision.batch_size", int),
        "pretrain_epochs": ("pretrain_epochs", int),
    },
    "decision": {
        "channels": ("decision.channels", _parse_channels),
        "kernel": ("decision.kernel", int),
        "fc_width": ("decision.fc_width", int),
        "dropout": ("decision.dropout", float),
    },
    "joint": {
        "lr": ("joint.lr", float),
        "epochs": ("joint.epochs", int),
        "batch_size": ("joint.batch_size", int),
    },
}


def _set_path(cfg: RunConfig, path: str, value):
    if "." not in path:
        return replace(cfg, **{path: value})
    head, leaf = path.split(".", 1)
    sub = replace(getattr(cfg, head), **{leaf: value})
    return replace(cfg, **{head: sub})


def _read_ini(path) -> configparser.ConfigParser:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        with open(path, "r", encoding="utf-8") as f:
            parser.read_file(f, source=str(path))
    except OSError as e:
        raise ConfigError(f"cannot read config file: {e}") from None
    except configparser.Error as e:
        raise ConfigError(f"{path}: {e}") from None
    return parser


def load_run_config(path=None, profile: str | None = None,
                    overrides: dict | None = None) -> RunConfig:
    """Build the effective configuration.

    ``path`` is an optional INI file, ``profile`` an explicit profile name
    (usually from a command-line flag) and ``overrides`` dotted attribute
    paths such as ``{"seed": 7, "data.ads": 500}`` that win over the file.
    """
    parser = _read_ini(path) if path is not None else None

    name = profile
    if name is None and parser is not None and parser.has_option("run", "profile"):
        name = parser.get("run", "profile")
    if name is None:
        name = "reduced"
    cfg = _preset(name)

    data_seed_explicit = False
    if parser is not None:
        for section in parser.sections():
            if section not in _SCHEMA:
                raise ConfigError(f"{path}: unknown section [{section}]")
            for key, raw in parser.items(section):
                if key not in _SCHEMA[section]:
                    raise ConfigError(f"{path}: unknown key {key!r} in [{section}]")
                if section == "run" and key == "profile":
                    continue  # consumed above
                attr, parse = _SCHEMA[section][key]
                try:
                    value = parse(raw)
                except ConfigError:
                    raise
                except ValueError:
                    raise ConfigError(f"{path}: bad value {raw!r} for {section}.{key}") from None
                cfg = _set_path(cfg, attr, value)
                if attr == "data.seed":
                    data_seed_explicit = True

    for attr, value in (overrides or {}).items():
        cfg = _set_path(cfg, attr, value)
        if attr == "data.seed":
            data_seed_explicit = True

    if not data_seed_explicit:
        cfg = _set_path(cfg, "data.seed", cfg.seed)
    # the text branch reads vectors of whatever width the embedding stage made
    cfg = _set_path(cfg, "language.embed_dim", cfg.embed.dim)
    return cfg.validate()


def config_summary(cfg: RunConfig) -> str:
    """Echo the effective configuration as INI text, one line per field."""
    lines = []
    for section, keys in _SCHEMA.items():
        lines.append(f"[{section}]")
        for key, (attr, _parse) in keys.items():
            obj = cfg
            for part in attr.split("."):
                obj = getattr(obj, part)
            if isinstance(obj, tuple):
                obj = ",".join(str(v) for v in obj)
            lines.append(f"{key} = {obj}")
        lines.append("")
    return "\n".join(lines)


__all__ = ["EmbedConfig", "RunConfig", "load_run_config", "config_summary"]
