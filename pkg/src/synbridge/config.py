"""Run configuration: one INI file with a section per stage, overridable with
``section.key=value`` strings.

Unknown sections or keys are errors, so typos never silently fall back to
defaults.
"""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .dataio import SyntheticSpec
from .distill import DistillConfig
from .errors import ConfigInvalid
from .fusion import FusionConfig
from .synmine import ProviderConfig
from .vsbird import BridgeConfig

BUNDLED_CONFIG = Path(__file__).with_name("configs") / "synthetic.ini"
CACHE_ENV = "SYNBRIDGE_CACHE_DIR"


@dataclass
class RunSection:
    seed: int = 0
    workdir: str = "runs/synthetic"


@dataclass
class PathSection:
    student_visual: str = "data/student_visual.synb"
    teacher_visual: str = "data/teacher_visual.synb"
    teacher_text: str = "data/teacher_text.synb"
    descriptor_bank: str = "data/teacher_text.synb"
    split: str = "data/split.json"
    cache: str = "cache"
    checkpoints: str = "checkpoints"
    reports: str = "reports"


@dataclass
class EvalSection:
    n_way: int = 5
    k_shot: int = 1
    n_query: int = 15
    episodes: int = 600
    lam: float | None = None
    score: str = "cosine"
    write_csv: bool = True
    dump_episodes: int = 20


@dataclass
class SweepSection:
    alphas: str = "0.0,0.3,0.5,0.7,0.9,1.0"

    def grid(self) -> list[float]:
        try:
            return [float(a) for a in self.alphas.split(",") if a.strip()]
        except ValueError:
            raise ConfigInvalid(f"sweep.alphas is not a comma-separated list: {self.alphas!r}") from None


SECTIONS = {
    "run": RunSection,
    "paths": PathSection,
    "synthetic": SyntheticSpec,
    "distill": DistillConfig,
    "mine": ProviderConfig,
    "bridge": BridgeConfig,
    "fusion": FusionConfig,
    "eval": EvalSection,
    "sweep": SweepSection,
}


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    paths: PathSection = field(default_factory=PathSection)
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)
    distill: DistillConfig = field(default_factory=DistillConfig)
    mine: ProviderConfig = field(default_factory=ProviderConfig)
    bridge: BridgeConfig = field(default_factory=BridgeConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    eval: EvalSection = field(default_factory=EvalSection)
    sweep: SweepSection = field(default_factory=SweepSection)
    base_dir: Path = field(default_factory=Path.cwd, compare=False)

    # stage sections that carry their own seed take the run seed
    def __post_init__(self):
        self._sync_seeds()

    def _sync_seeds(self):
        for name in ("synthetic", "distill", "bridge", "fusion"):
            section = getattr(self, name)
            if section.seed != self.run.seed:
                setattr(self, name, dataclasses.replace(section, seed=self.run.seed))
        if self.mine.stub_seed != self.run.seed:
            self.mine = dataclasses.replace(self.mine, stub_seed=self.run.seed)

    @property
    def workdir(self) -> Path:
        return (self.base_dir / self.run.workdir).resolve()

    def path(self, key: str) -> Path:
        if key == "cache" and os.environ.get(CACHE_ENV):
            return Path(os.environ[CACHE_ENV]).resolve()
        return self.workdir / getattr(self.paths, key)

    def section_dict(self, name: str) -> dict:
        return dataclasses.asdict(getattr(self, name))


def _parse_value(raw: str, type_name: str):
    text = raw.strip()
    low = text.lower()
    if low in ("none", "null", ""):
        if "None" in type_name:
            return None
        if "str" in type_name:
            return text
        raise ValueError("value required")
    if type_name.startswith("bool"):
        if low in ("true", "yes", "on", "1"):
            return True
        if low in ("false", "no", "off", "0"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if type_name.startswith("int"):
        return int(text)
    if type_name.startswith("float"):
        return float(text)
    return text


def _build_section(name: str, values: dict):
    cls = SECTIONS[name]
    types = {f.name: str(f.type) for f in dataclasses.fields(cls) if not f.name.startswith("_")}
    kwargs = {}
    for key, raw in values.items():
        if key not in types:
            raise ConfigInvalid(f"unknown key {name}.{key}")
        try:
            kwargs[key] = _parse_value(raw, types[key])
        except ValueError as exc:
            raise ConfigInvalid(f"bad value for {name}.{key}: {exc}") from None
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigInvalid(f"[{name}] {exc}") from None


def load_config(path=None, overrides=(), seed: int | None = None) -> RunConfig:
    """Read an INI file (the bundled synthetic config when ``path`` is None),
    then apply ``section.key=value`` overrides and an optional seed."""
    path = Path(path) if path is not None else BUNDLED_CONFIG
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except FileNotFoundError:
        raise ConfigInvalid(f"config file {path} not found") from None
    except configparser.Error as exc:
        raise ConfigInvalid(f"{path}: {exc}".replace("\n", " ")) from None
    raw = {name: dict(parser[name]) for name in parser.sections()}
    for item in overrides:
        key, sep, value = item.partition("=")
        section, dot, option = key.strip().partition(".")
        if not sep or not dot:
            raise ConfigInvalid(f"override {item!r} is not of the form section.key=value")
        raw.setdefault(section, {})[option] = value
    if seed is not None:
        raw.setdefault("run", {})["seed"] = str(seed)
    unknown = set(raw) - set(SECTIONS)
    if unknown:
        raise ConfigInvalid(f"unknown config section(s): {', '.join(sorted(unknown))}")
    sections = {name: _build_section(name, raw.get(name, {})) for name in SECTIONS}
    # relative workdirs resolve against the config file, or the cwd for the bundled one
    base_dir = Path.cwd() if path == BUNDLED_CONFIG else path.resolve().parent
    return RunConfig(**sections, base_dir=base_dir)


def stable_hash(*parts) -> str:
    """Short sha256 over JSON-serialized parts; stable across runs and platforms."""
    text = json.dumps(parts, sort_keys=True, default=str, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()[:16]
