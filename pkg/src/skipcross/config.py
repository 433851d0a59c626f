"""INI run configuration shared by every CLI command.

Sections and keys are fixed; unknown sections or keys are rejected so a typo
never silently falls back to a default. ``write_config`` dumps the fully
resolved configuration, which each command stores next to its outputs.
"""
from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from . import geometry
from .model import ALL_STRATEGIES, FusionTopology
from .synth import SceneSpec
from .train import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class ModelSection:
    strategy: str = field(default="skipcross", metadata={"help": f"one of {', '.join(ALL_STRATEGIES)}"})
    stage_blocks: tuple = field(default=(2, 3, 3), metadata={"help": "BasicBlocks per fusion stage"})
    stage_channels: tuple = field(default=(32, 64, 128), metadata={"help": "feature width per stage"})
    encoder_mask: tuple = field(default=(), metadata={"help": "per-stage fusion on/off; empty = all on"})
    decoder_fusion: bool = field(default=True, metadata={"help": "encoder skips into the decoder"})
    head_channels: int = field(default=16, metadata={"help": "width of the last decoder level"})


@dataclass
class GeometrySection:
    radius: int = field(default=geometry.DEFAULT_RADIUS, metadata={"help": "ADI neighbourhood radius in pixels"})
    clip: float = field(default=geometry.DEFAULT_CLIP, metadata={"help": "ADI normalization clip (metres)"})
    knn_k: int = field(default=geometry.DEFAULT_KNN_K, metadata={"help": "neighbours for densification"})
    densify: bool = field(default=False, metadata={"help": "fill blank pixels before computing the ADI"})


@dataclass
class DataSection:
    train_root: str = field(default="", metadata={"help": "dataset directory; empty = synthesize in memory"})
    val_root: str = field(default="", metadata={"help": "validation directory; empty = synthesize in memory"})
    height: int = field(default=64, metadata={"help": "network input height (multiple of 16)"})
    width: int = field(default=64, metadata={"help": "network input width (multiple of 16)"})


@dataclass
class SynthSection:
    n_train: int = field(default=32, metadata={"help": "synthetic training samples"})
    n_val: int = field(default=8, metadata={"help": "synthetic validation samples"})
    seed: int = field(default=0, metadata={"help": "scene generator seed (independent of run seed)"})
    lidar_lines: int = field(default=64, metadata={"help": "simulated LiDAR beams"})
    n_obstacles: int = field(default=3, metadata={"help": "random boxes per scene"})
    curb_height: float = field(default=0.15, metadata={"help": "terrain step at the road edge (metres)"})
    jitter: float = field(default=0.02, metadata={"help": "LiDAR range noise std (metres)"})
    brightness_corruption: bool = field(default=False, metadata={"help": "darken images by U[0.3, 0.7]"})


@dataclass
class RunSection:
    seed: int = field(default=0, metadata={"help": "weight init and shuffling seed"})
    out_dir: str = field(default="runs/default", metadata={"help": "output directory"})
    deterministic: bool = field(default=False, metadata={"help": "single-threaded numeric paths"})


_TRAIN_HELP = {
    "lr": "initial learning rate",
    "batch_size": "minibatch size",
    "max_epochs": "epoch budget",
    "plateau_patience": "epochs without MaxF gain before decay",
    "min_improvement": "MaxF gain that counts as progress",
    "lr_decay": "learning-rate decay factor",
    "min_lr": "learning-rate floor",
    "multiscale": "random scale in [0.75, 1.25]",
    "crop": "random crop to crop_size",
    "brightness": "random brightness in [0.6, 1.4]",
    "road_removal": "mean-fill a rectangle over the road (p = 0.5)",
    "crop_size": "training patch height, width (multiples of 16)",
}
# the training seed always comes from [run] seed
_HIDDEN = {("train", "seed")}


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    model: ModelSection = field(default_factory=ModelSection)
    geometry: GeometrySection = field(default_factory=GeometrySection)
    data: DataSection = field(default_factory=DataSection)
    synth: SynthSection = field(default_factory=SynthSection)
    run: RunSection = field(default_factory=RunSection)

    def topology(self) -> FusionTopology:
        m = self.model
        return FusionTopology(
            stage_blocks=m.stage_blocks,
            stage_channels=m.stage_channels,
            encoder_mask=m.encoder_mask or None,
            decoder_fusion_enabled=m.decoder_fusion,
            strategy=m.strategy,
            head_channels=m.head_channels,
        )

    def train_config(self) -> TrainConfig:
        return replace(self.train, seed=self.run.seed)

    def scene_spec(self, seed_offset: int = 0) -> SceneSpec:
        s = self.synth
        return SceneSpec(
            lidar_lines=s.lidar_lines,
            n_obstacles=s.n_obstacles,
            curb_height=s.curb_height,
            jitter=s.jitter,
            brightness_corruption=s.brightness_corruption,
            width=self.data.width,
            height=self.data.height,
            seed=s.seed + seed_offset,
        )

    def geometry_kwargs(self) -> dict:
        g = self.geometry
        return {"radius": g.radius, "clip": g.clip, "knn_k": g.knn_k, "densify": g.densify}

    def validate(self):
        try:
            self.train.validate()
            self.topology()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.model.strategy not in ALL_STRATEGIES:
            raise ConfigError(f"unknown strategy {self.model.strategy!r}")
        if self.data.height % 16 or self.data.width % 16 or self.data.height <= 0 or self.data.width <= 0:
            raise ConfigError("data height and width must be positive multiples of 16")
        if self.geometry.radius < 1 or self.geometry.clip <= 0 or self.geometry.knn_k < 1:
            raise ConfigError("geometry needs radius >= 1, clip > 0, knn_k >= 1")
        if self.synth.n_train < 1 or self.synth.n_val < 1:
            raise ConfigError("synthetic splits need at least one sample each")
        return self


SECTIONS = ("train", "model", "geometry", "data", "synth", "run")


# -- value codecs -----------------------------------------------------------------


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse(text: str, default):
    if isinstance(default, bool):
        return _parse_bool(text)
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if isinstance(default, tuple):
        items = [t for t in text.replace(",", " ").split() if t]
        if not default or isinstance(default[0], bool):
            # encoder_mask is the only tuple with an empty default
            return tuple(_parse_bool(t) for t in items)
        return tuple(int(t) for t in items)
    return text.strip()


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


# -- load / dump -------------------------------------------------------------------


def parse_config(text: str, source: str = "<string>") -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None, default_section="__none__")
    cp.optionxform = str
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    cfg = RunConfig()
    for section in cp.sections():
        if section not in SECTIONS:
            raise ConfigError(f"{source}: unknown section [{section}]")
        current = getattr(cfg, section)
        known = {f.name for f in fields(current) if (section, f.name) not in _HIDDEN}
        updates = {}
        for key, raw in cp.items(section):
            if key not in known:
                raise ConfigError(f"{source}: unknown key {key!r} in [{section}]")
            try:
                updates[key] = _parse(raw, getattr(current, key))
            except ValueError as exc:
                raise ConfigError(f"{source}: [{section}] {key}: {exc}") from exc
        try:
            setattr(cfg, section, replace(current, **updates))
        except ValueError as exc:
            raise ConfigError(f"{source}: [{section}] {exc}") from exc
    return cfg.validate()


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, source=str(path))


def _visible(section: str):
    return [f for f in fields(getattr(RunConfig(), section)) if (section, f.name) not in _HIDDEN]


def dump_config(cfg: RunConfig) -> str:
    buf = io.StringIO()
    for section in SECTIONS:
        buf.write(f"[{section}]\n")
        for f in _visible(section):
            buf.write(f"{f.name} = {_format(getattr(getattr(cfg, section), f.name))}\n")
        buf.write("\n")
    return buf.getvalue()


def write_config(cfg: RunConfig, path):
    Path(path).write_text(dump_config(cfg))


def describe_keys() -> str:
    """Every key with its default and meaning, for ``--help``."""
    cfg = RunConfig()
    lines = []
    for section in SECTIONS:
        lines.append(f"[{section}]")
        for f in _visible(section):
            help_text = _TRAIN_HELP.get(f.name, "") if section == "train" else f.metadata.get("help", "")
            default = _format(getattr(getattr(cfg, section), f.name))
            lines.append(f"  {f.name} = {default}".ljust(38) + f"  {help_text}")
    return "\n".join(lines)
