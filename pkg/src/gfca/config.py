"""Experiment configuration files (TOML), overrides and the resolved echo.

Layout::

    [train]        # any TrainConfig field
    mode = "gfca"
    seed = 0

    [synthetic]    # SyntheticDomainConfig fields; or use [data] instead
    noise_std = 0.4

    [data]
    source = "source.csv"
    target = "target.gfcf"
    format = "csv"          # optional, else inferred from the suffix

    [protocol]
    few_shot_classes = [7, 8, 9]
    shots = 3

    [output]
    dir = "runs/example"
    formats = ["json", "csv"]

Exactly one of ``[synthetic]`` and ``[data]`` may be present.  Overrides are
``key=value`` strings; a bare key means ``train.<key>``.  Values are parsed
as TOML literals and fall back to plain strings.  Environment variables
``GFCA_<KEY>`` (``GFCA_<SECTION>__<KEY>`` for other sections) apply before
``--set`` overrides.  Unset optional values (``None``) are omitted from the
resolved file, which re-loads to the same configuration.
"""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path

import tomli
import tomli_w

from .datasets import SyntheticDomainConfig
from .errors import ConfigError, GFCAError
from .trainer import TrainConfig

SECTIONS = ("train", "synthetic", "data", "protocol", "output")
DATA_KEYS = ("source", "target", "format")
PROTOCOL_KEYS = ("few_shot_classes", "shots", "seed")
OUTPUT_KEYS = ("dir", "formats")
REPORT_FORMATS = ("json", "csv")
ENV_PREFIX = "GFCA_"


@dataclass
class DataPaths:
    source: str
    target: str
    format: str | None = None


@dataclass
class ProtocolSpec:
    few_shot_classes: list[int] = field(default_factory=list)
    shots: int = 3
    seed: int | None = None  # None: use the training seed


@dataclass
class ExperimentConfig:
    train: TrainConfig
    protocol: ProtocolSpec
    output_dir: str
    synthetic: SyntheticDomainConfig | None = None
    data: DataPaths | None = None
    formats: list[str] = field(default_factory=lambda: list(REPORT_FORMATS))

    def __post_init__(self):
        if (self.synthetic is None) == (self.data is None):
            raise ConfigError("data", "exactly one of [data] and [synthetic] must be given")
        bad = [f for f in self.formats if f not in REPORT_FORMATS]
        if bad:
            raise ConfigError("output.formats", f"unknown report format {bad[0]!r}")

    def to_dict(self) -> dict:
        out = {"train": _drop_none(self.train.to_dict()),
               "protocol": _drop_none(dataclasses.asdict(self.protocol)),
               "output": {"dir": self.output_dir, "formats": list(self.formats)}}
        if self.synthetic is not None:
            syn = _drop_none(dataclasses.asdict(self.synthetic))
            syn["rotation_deg"] = list(syn["rotation_deg"])
            if isinstance(syn["translation"], tuple):
                syn["translation"] = list(syn["translation"])
            out["synthetic"] = syn
        else:
            out["data"] = _drop_none(dataclasses.asdict(self.data))
        return out

    def to_toml(self) -> str:
        return tomli_w.dumps(self.to_dict())


def _drop_none(d: dict) -> dict:
    return {k: v for k, v in d.items() if v is not None}


def parse_value(text: str):
    """Interpret ``text`` as a TOML value, or keep it as a string."""
    try:
        return tomli.loads(f"v = {text}")["v"]
    except tomli.TOMLDecodeError:
        return text


def _set_path(tree: dict, key: str, value):
    key = key.strip()
    section, _, name = key.rpartition(".")
    section = section or "train"
    if section not in SECTIONS or not name:
        raise ConfigError(key, f"unknown section {section!r}")
    tree.setdefault(section, {})[name] = value


def apply_overrides(tree: dict, overrides) -> dict:
    for item in overrides or ():
        key, sep, text = item.partition("=")
        if not sep:
            raise ConfigError(item, "override must look like key=value")
        _set_path(tree, key, parse_value(text))
    return tree


def env_overrides(environ=None) -> list[str]:
    environ = os.environ if environ is None else environ
    out = []
    for name in sorted(environ):
        if not name.startswith(ENV_PREFIX):
            continue
        key = name[len(ENV_PREFIX):].lower()
        if "__" in key:
            section, _, rest = key.partition("__")
            key = f"{section}.{rest}"
        out.append(f"{key}={environ[name]}")
    return out


def _build(cls, section: str, values: dict, allowed=None):
    names = {f.name for f in dataclasses.fields(cls)} if allowed is None else set(allowed)
    for k in values:
        if k not in names:
            raise ConfigError(f"{section}.{k}", "unknown option")
    try:
        return cls(**values)
    except ConfigError:
        raise
    except (GFCAError, TypeError, ValueError) as exc:
        raise ConfigError(section, str(exc)) from None


def from_tree(tree: dict) -> ExperimentConfig:
    for section in tree:
        if section not in SECTIONS:
            raise ConfigError(section, "unknown section")
    train = _build(TrainConfig, "train", dict(tree.get("train", {})))
    protocol = _build(ProtocolSpec, "protocol", dict(tree.get("protocol", {})))
    out = dict(tree.get("output", {}))
    for k in out:
        if k not in OUTPUT_KEYS:
            raise ConfigError(f"output.{k}", "unknown option")
    if "dir" not in out:
        raise ConfigError("output.dir", "missing output directory")
    synthetic = data = None
    if "synthetic" in tree:
        syn = dict(tree["synthetic"])
        if isinstance(syn.get("translation"), list):
            syn["translation"] = tuple(syn["translation"])
        if "rotation_deg" in syn:
            syn["rotation_deg"] = tuple(syn["rotation_deg"])
        synthetic = _build(SyntheticDomainConfig, "synthetic", syn)
    if "data" in tree:
        d = dict(tree["data"])
        for req in ("source", "target"):
            if not d.get(req):
                raise ConfigError(f"data.{req}", "missing dataset path")
        data = _build(DataPaths, "data", d)
    return ExperimentConfig(train=train, protocol=protocol, output_dir=str(out["dir"]),
                            synthetic=synthetic, data=data,
                            formats=list(out.get("formats", REPORT_FORMATS)))


def load_config(path=None, overrides=(), environ=None) -> ExperimentConfig:
    """Read a TOML file (optional) and apply env then ``--set`` overrides."""
    tree: dict = {}
    if path is not None:
        try:
            tree = tomli.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError("config", f"cannot read {path}: {exc.strerror}") from None
        except tomli.TOMLDecodeError as exc:
            raise ConfigError("config", f"{path}: {exc}") from None
    apply_overrides(tree, env_overrides(environ))
    apply_overrides(tree, overrides)
    return from_tree(tree)
