"""Experiment configuration: typed sections read from an INI-style file."""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

from .errors import ConfigError

ATTACKS = ("eumc", "sba", "none")
DEFENSES = ("none", "prune", "prune+ld", "od")
ABLATIONS = ("w/o-stru", "w/o-feat", "w/o-tgt", "w/o-sele", "link-all", "link-one")
ARCHS = ("gcn", "sage", "gat")


@dataclass
class ExperimentSection:
    seed: int = 0
    archs: tuple = ("gcn",)
    attack: str = "eumc"
    defense: str = "none"
    ablations: tuple = ()


@dataclass
class DataSection:
    path: str = ""
    n_classes: int = 4
    n_nodes: int = 400
    n_features: int = 16
    p_in: float = 0.005
    p_out: float = 0.0001
    signal: float = 0.35
    sigma: float = 0.1
    seed: int = 0


@dataclass
class AttackSection:
    n_poison: int = 20
    n_pool: int = 40
    trigger_size: int = 5
    n_candidates: int = 300
    aps_threshold: float = 0.2
    tau_a: float = 0.2
    tau_l: float = 0.6
    alpha: float = 5.0
    inner_steps: int = 5
    outer_iters: int = 200
    hidden: int = 64
    surrogate_lr: float = 0.01
    trigger_lr: float = 0.01
    weight_decay: float = 5e-4
    clean_epochs: int = 200
    target_sample: int = 256
    patience: int = 20
    cluster_on: str = "embedding"
    p_edge: float = 0.3


@dataclass
class VictimSection:
    epochs: int = 200
    lr: float = 0.01
    weight_decay: float = 5e-4
    hidden: int = 64
    dropout: float = 0.5


@dataclass
class DefenseSection:
    percentile: float = 0.1
    threshold: float | None = None
    od_ratio: float = 0.05
    od_weight: float = 0.5
    od_epochs: int = 100


@dataclass
class ExperimentConfig:
    experiment: ExperimentSection = field(default_factory=ExperimentSection)
    data: DataSection = field(default_factory=DataSection)
    attack: AttackSection = field(default_factory=AttackSection)
    victim: VictimSection = field(default_factory=VictimSection)
    defense: DefenseSection = field(default_factory=DefenseSection)

    def validate(self) -> ExperimentConfig:
        e = self.experiment
        if e.attack not in ATTACKS:
            raise ConfigError(f"attack must be one of {ATTACKS}, got {e.attack!r}")
        if e.defense not in DEFENSES:
            raise ConfigError(f"defense must be one of {DEFENSES}, got {e.defense!r}")
        bad = [a for a in e.archs if a not in ARCHS]
        if bad or not e.archs:
            raise ConfigError(f"archs must be drawn from {ARCHS}, got {list(e.archs)}")
        bad = [a for a in e.ablations if a not in ABLATIONS]
        if bad:
            raise ConfigError(f"unknown ablation(s) {bad}; expected {ABLATIONS}")
        if "link-all" in e.ablations and "link-one" in e.ablations:
            raise ConfigError("link-all and link-one are exclusive")
        if self.victim.epochs < 1:
            raise ConfigError("victim.epochs must be >= 1")
        if not 0.0 <= self.victim.dropout < 1.0:
            raise ConfigError("victim.dropout must be in [0, 1)")
        if self.attack.alpha < 0 or not 0.0 <= self.attack.tau_l <= 1.0 or self.attack.inner_steps < 1:
            raise ConfigError("attack needs alpha >= 0, tau_l in [0, 1], inner_steps >= 1")
        if not 0.0 <= self.defense.od_ratio < 1.0:
            raise ConfigError("defense.od_ratio must be in [0, 1)")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, default=list)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def replace(self, **sections) -> ExperimentConfig:
        """Copy with section fields overridden, e.g. ``replace(attack={"alpha": 0})``."""
        kw = {}
        for f in dataclasses.fields(self):
            sec = getattr(self, f.name)
            kw[f.name] = dataclasses.replace(sec, **sections.get(f.name, {}))
        return ExperimentConfig(**kw).validate()


def _coerce(section, name, default, raw):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, tuple):
            return tuple(p.strip() for p in raw.split(",") if p.strip())
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float) or default is None:
            return None if raw.lower() in ("", "none") else float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"[{section}] {name}: cannot parse {raw!r}") from None


def parse_config(text: str) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    cfg = ExperimentConfig()
    known = {f.name: f for f in dataclasses.fields(cfg)}
    for section in parser.sections():
        if section not in known:
            raise ConfigError(f"unknown section [{section}]")
        sec = getattr(cfg, section)
        fields = {f.name: f for f in dataclasses.fields(sec)}
        for key, raw in parser.items(section):
            if key not in fields:
                raise ConfigError(f"unknown key {section}.{key}")
            setattr(sec, key, _coerce(section, key, getattr(sec, key), raw))
    return cfg.validate()


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            return parse_config(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None


def dump_config(cfg: ExperimentConfig) -> str:
    lines = []
    for name, sec in cfg.to_dict().items():
        lines.append(f"[{name}]")
        for k, v in sec.items():
            if isinstance(v, (list, tuple)):
                v = ", ".join(v)
            lines.append(f"{k} = {'none' if v is None else v}")
        lines.append("")
    return "\n".join(lines)
