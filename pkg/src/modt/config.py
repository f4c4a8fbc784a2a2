"""Run configuration: one INI-style file, one section per module, unknown keys rejected."""
from __future__ import annotations

import ast
import configparser
import io
from dataclasses import dataclass, field, fields, replace

from .affinity import AttentionConfig
from .encoder import EncoderConfig
from .heads import HeadConfig
from .losses import LossWeights
from .scans import SceneConfig
from .tracker import TrackerConfig


class ConfigError(ValueError):
    """Invalid or unknown configuration entry."""


@dataclass
class ModelConfig:
    refine: str = "full"  # none | self | full
    intermediate_supervision: bool = False
    gt_margin: float = 0.1  # box inflation used when labelling tokens (m)
    match_radius: float = 2.0
    conf_sigma: float = 0.4  # width (m) of the soft objectness target around object centers
    init_seed: int = 0

    def __post_init__(self):
        if self.refine not in ("none", "self", "full"):
            raise ConfigError(f"refine must be none, self or full, got {self.refine!r}")


@dataclass
class TrainConfig:
    iterations: int = 50
    lr: float = 0.001
    lr_decay: float = 5.0
    decay_every: int = 0  # 0 disables the step schedule
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    sequences: int = 1
    seed: int = 0


@dataclass
class EvalConfig:
    dist_max: float = 1.0


@dataclass
class RunConfig:
    scene: SceneConfig = field(default_factory=SceneConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    affinity: AttentionConfig = field(default_factory=AttentionConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    heads: HeadConfig = field(default_factory=HeadConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    tracker: TrackerConfig = field(default_factory=TrackerConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)


SECTIONS = [f.name for f in fields(RunConfig)]


def _format(v) -> str:
    return repr(v)


def _parse(text: str, default):
    try:
        val = ast.literal_eval(text)
    except (ValueError, SyntaxError):
        val = text
    if isinstance(default, bool) and not isinstance(val, bool):
        raise ConfigError(f"expected a boolean, got {text!r}")
    if isinstance(default, float) and isinstance(val, int) and not isinstance(val, bool):
        val = float(val)
    if isinstance(default, tuple) and isinstance(val, list):
        val = tuple(val)
    return val


def dumps(cfg: RunConfig) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    for sec in SECTIONS:
        obj = getattr(cfg, sec)
        parser[sec] = {f.name: _format(getattr(obj, f.name)) for f in fields(obj)}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def loads(text: str, base: RunConfig | None = None) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    cfg = base or RunConfig()
    for sec in parser.sections():
        if sec not in SECTIONS:
            raise ConfigError(f"unknown section [{sec}]")
        obj = getattr(cfg, sec)
        known = {f.name: getattr(obj, f.name) for f in fields(obj)}
        updates = {}
        for key, raw in parser[sec].items():
            if key not in known:
                raise ConfigError(f"unknown key {sec}.{key}")
            updates[key] = _parse(raw, known[key])
        try:
            cfg = replace(cfg, **{sec: replace(obj, **updates)})
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[{sec}] {exc}") from None
    return cfg


def load(path) -> RunConfig:
    with open(path) as fh:
        return loads(fh.read())


def save(path, cfg: RunConfig) -> None:
    with open(path, "w") as fh:
        fh.write(dumps(cfg))


def toy_config() -> RunConfig:
    """The standard toy scene: small, CPU-trainable in seconds."""
    return RunConfig(
        scene=SceneConfig(
            num_objects=3,
            num_frames=6,
            points_per_object=24,
            noise=0.02,
            clutter=8,
            extent=6.0,
            speed_min=0.2,
            speed_max=0.6,
        ),
        encoder=EncoderConfig(tokens=24, neighbors=8),
        train=TrainConfig(iterations=50, lr=0.005, decay_every=100),
    )
