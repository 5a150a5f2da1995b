"""Run configuration: flat ``key = value`` sections in an INI-style file.

Unknown sections or keys are rejected. ``MTLAVSR_WORKDIR`` overrides
``[paths] workdir``.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from . import features


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class CorpusSection:
    size: int = 2000
    seed: int = 0
    grammar: str = ""  # empty -> built-in GRID grammar
    lexicon: str = ""  # empty -> built-in lexicon
    duration: float = 3.0
    jitter: float = 0.1
    babble_sources: int = 6


@dataclass(frozen=True)
class FeaturesSection:
    """Front-end constants; recorded for provenance, only these values are supported."""

    frame_len_ms: int = 25
    frame_shift_ms: int = 10
    n_mels: int = features.N_MELS
    n_dct: int = features.N_DCT
    context: int = features.CONTEXT


@dataclass(frozen=True)
class GmmSection:
    em_iters: int = 5
    lda_iters: int = 5
    lda_dim: int = 40
    lda_context: int = 4
    components: int = 4


@dataclass(frozen=True)
class DnnSection:
    lambdas: tuple[float, ...] = (0.1, 0.3)
    stl: bool = True
    hidden_layers: int = 4
    hidden_dim: int = 1500
    activation: str = "sigmoid"
    batch_size: int = 256
    lr: float = 0.008
    halve_threshold: float = 0.5
    stop_threshold: float = 0.1
    max_epochs: int = 20
    epoch_fraction: float = 1.0
    suppress_eps: float = 1e-5


@dataclass(frozen=True)
class DecodeSection:
    acoustic_scale: float = 1.0
    beam: float = 0.0


@dataclass(frozen=True)
class ExperimentSection:
    snrs: tuple[str, ...] = ("-3", "0", "10", "clean")
    modalities: tuple[str, ...] = ("audio-only", "AV", "video-only")


@dataclass(frozen=True)
class PathsSection:
    workdir: str = "work"


@dataclass(frozen=True)
class RunConfig:
    corpus: CorpusSection = field(default_factory=CorpusSection)
    features: FeaturesSection = field(default_factory=FeaturesSection)
    gmmhmm: GmmSection = field(default_factory=GmmSection)
    dnn: DnnSection = field(default_factory=DnnSection)
    decode: DecodeSection = field(default_factory=DecodeSection)
    experiment: ExperimentSection = field(default_factory=ExperimentSection)
    paths: PathsSection = field(default_factory=PathsSection)

    @property
    def workdir(self):
        return Path(self.paths.workdir)

    def models(self):
        """(name, lambda) for every network the experiment trains."""
        out = [(f"mtl_{lam:g}", float(lam)) for lam in self.dnn.lambdas]
        if self.dnn.stl:
            out.append(("stl", 0.0))
        return out


SECTIONS = [f.name for f in fields(RunConfig)]


def _parse_value(kind, raw, where):
    raw = raw.strip()
    try:
        if kind in ("int", int):
            return int(raw)
        if kind in ("float", float):
            return float(raw)
        if kind in ("bool", bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind == "tuple[float, ...]":
            return tuple(float(x) for x in raw.split(",") if x.strip())
        if kind == "tuple[str, ...]":
            return tuple(x.strip() for x in raw.split(",") if x.strip())
        return raw
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {kind}") from None


def _format_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(_format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def validate(cfg):
    f = cfg.features
    fixed = FeaturesSection()
    for name in ("frame_len_ms", "frame_shift_ms", "n_mels", "n_dct", "context"):
        if getattr(f, name) != getattr(fixed, name):
            raise ConfigError(f"features.{name} is fixed at {getattr(fixed, name)}")
    if cfg.corpus.size < 10:
        raise ConfigError("corpus.size must be >= 10")
    if cfg.corpus.babble_sources < 1:
        raise ConfigError("corpus.babble_sources must be >= 1")
    d = cfg.dnn
    if any(not 0.0 <= lam <= 1.0 for lam in d.lambdas):
        raise ConfigError("dnn.lambdas must lie in [0, 1]")
    if d.activation not in ("sigmoid", "relu", "tanh"):
        raise ConfigError(f"dnn.activation {d.activation!r} not supported")
    if not 1 <= d.hidden_layers <= 8:
        raise ConfigError("dnn.hidden_layers must be in 1..8")
    if d.batch_size < 1 or d.hidden_dim < 1 or d.max_epochs < 1:
        raise ConfigError("dnn sizes must be positive")
    if d.halve_threshold <= 0 or d.stop_threshold <= 0:
        raise ConfigError("dnn thresholds must be positive")
    if not 0.0 < d.epoch_fraction <= 1.0:
        raise ConfigError("dnn.epoch_fraction must be in (0, 1]")
    for snr in cfg.experiment.snrs:
        if snr.lower() != "clean":
            try:
                float(snr)
            except ValueError:
                raise ConfigError(f"experiment.snrs: bad SNR {snr!r}") from None
    for m in cfg.experiment.modalities:
        if m not in ("audio-only", "AV", "video-only"):
            raise ConfigError(f"experiment.modalities: unknown modality {m!r}")
    if not cfg.models():
        raise ConfigError("no models configured")
    return cfg


def parse_config(text, source="<config>", environ=None):
    parser = configparser.ConfigParser(interpolation=None, strict=True)
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as e:
        raise ConfigError(f"{source}: {e}") from None
    sections = {}
    for name in parser.sections():
        if name not in SECTIONS:
            raise ConfigError(f"{source}: unknown section [{name}]")
        cls = type(getattr(RunConfig(), name))
        known = {f.name: f.type for f in fields(cls)}
        values = {}
        for key, raw in parser.items(name):
            if key not in known:
                raise ConfigError(f"{source}: unknown key {name}.{key}")
            values[key] = _parse_value(known[key], raw, f"{source}: {name}.{key}")
        sections[name] = cls(**values)
    cfg = RunConfig(**sections)
    env = os.environ if environ is None else environ
    if env.get("MTLAVSR_WORKDIR"):
        cfg = replace(cfg, paths=replace(cfg.paths, workdir=env["MTLAVSR_WORKDIR"]))
    return validate(cfg)


def load_config(path=None, environ=None):
    if path is None:
        return parse_config("", environ=environ)
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {path}")
    cfg = parse_config(p.read_text(), str(p), environ)
    base = p.parent
    resolved = {}
    for key in ("grammar", "lexicon"):
        val = getattr(cfg.corpus, key)
        if val and not Path(val).is_absolute():
            resolved[key] = str((base / val).resolve())
    if resolved:
        cfg = replace(cfg, corpus=replace(cfg.corpus, **resolved))
    if not Path(cfg.paths.workdir).is_absolute():
        cfg = replace(cfg, paths=replace(cfg.paths, workdir=str((Path.cwd() / cfg.paths.workdir))))
    return cfg


def dump_config(cfg):
    """Canonical text form: every section and key, in declaration order."""
    out = []
    for name in SECTIONS:
        section = getattr(cfg, name)
        out.append(f"[{name}]")
        for f in fields(section):
            out.append(f"{f.name} = {_format_value(getattr(section, f.name))}")
        out.append("")
    return "\n".join(out)
