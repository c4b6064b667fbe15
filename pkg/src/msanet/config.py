"""``key = value`` run configuration shared by every CLI command."""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Union

from .backbone import BackboneConfig
from .dataset import DatasetConfig
from .model import ModelConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


def opt(default, doc: str, lo=None, hi=None, choices=None):
    return field(default=default, metadata={"doc": doc, "lo": lo, "hi": hi, "choices": choices})


@dataclass
class RunConfig:
    # paths
    data_dir: str = opt("data", "dataset directory (generate writes here unless --out is given)")
    out_dir: str = opt("runs/default", "output directory for checkpoints, logs, reports and images")
    checkpoint: str = opt("", "checkpoint for eval/viz; default <out_dir>/checkpoint.msaw")
    seed: int = opt(0, "master seed for data, weights, sampling and evaluation", lo=0, hi=2**64 - 1)
    # synthetic data
    classes: int = opt(8, "number of synthetic classes", lo=2)
    samples_per_class: int = opt(50, "images per class", lo=2)
    image_size: int = opt(64, "square image side in pixels", lo=16)
    distractor_prob: float = opt(0.5, "probability of a distractor shape of another class", lo=0.0, hi=1.0)
    # backbone
    stem_stride: int = opt(4, "total stem downsampling (power of two)", lo=1)
    stem_channels: int = opt(16, "stem width", lo=1)
    blocks: str = opt("16x2,32x2,64x2", "correlation blocks as <channels>x<bottlenecks>, comma separated")
    backbone_pretrain_steps: int = opt(0, "optional base-class backbone pretraining steps (0 = frozen random)", lo=0)
    # model
    alpha: int = opt(64, "fused correlation channels", lo=1)
    merged_channels: int = opt(64, "width of the merged block-2/3 features", lo=1)
    decoder_channels: int = opt(128, "ASPP / conv block width", lo=4)
    aspp_rates: str = opt("1,2,4", "ASPP dilation rates, comma separated")
    multi_similarity: bool = opt(True, "use the multi-similarity correlation")
    attention: bool = opt(True, "use the attention map")
    prototype: bool = opt(True, "use the prototype vector")
    prior_mask: bool = opt(True, "use the prior mask")
    allow_query_only: bool = opt(False, "permit all four guidance modules off (decoder sees query features only)")
    # training
    fold: int = opt(0, "held-out test fold", lo=0)
    folds: int = opt(4, "number of class folds", lo=2)
    shots: int = opt(1, "support images per episode (K)", lo=1)
    lr: float = opt(5e-2, "SGD learning rate", lo=0.0)
    momentum: float = opt(0.9, "SGD momentum", lo=0.0, hi=0.999)
    weight_decay: float = opt(0.0, "SGD weight decay", lo=0.0)
    batch_size: int = opt(8, "episodes per SGD step", lo=1)
    episodes: int = opt(2000, "training episode budget", lo=0)
    # evaluation
    eval_episodes: int = opt(1000, "test episodes per evaluation run", lo=1)
    eval_runs: int = opt(5, "evaluation runs (seeds seed..seed+runs-1)", lo=1)
    iou_mode: str = opt("pooled", "per-class IoU accumulation", choices=("pooled", "episode"))
    workers: int = opt(1, "evaluation worker threads", lo=1)
    # visualisation
    viz_indices: str = opt("", "manifest indices 'query,support[,support...]' for viz; empty = sample by seed")

    def __post_init__(self):
        for f in dataclasses.fields(self):
            meta = f.metadata
            val = getattr(self, f.name)
            if meta.get("lo") is not None and val < meta["lo"]:
                raise ConfigError(f"{f.name} = {val} is below the minimum {meta['lo']}")
            if meta.get("hi") is not None and val > meta["hi"]:
                raise ConfigError(f"{f.name} = {val} is above the maximum {meta['hi']}")
            if meta.get("choices") and val not in meta["choices"]:
                raise ConfigError(f"{f.name} = {val!r} must be one of {meta['choices']}")
        if self.fold >= self.folds:
            raise ConfigError(f"fold = {self.fold} must be < folds = {self.folds}")
        if self.folds > self.classes:
            raise ConfigError(f"folds = {self.folds} exceeds classes = {self.classes}")
        self.parsed_blocks()
        self.parsed_rates()
        if not (self.multi_similarity or self.attention or self.prototype or self.prior_mask):
            if not self.allow_query_only:
                raise ConfigError(
                    "multi_similarity, attention, prototype and prior_mask are all off; the decoder would only "
                    "see query features (set allow_query_only = true to run this anyway)"
                )
        try:
            self.backbone_config()
            self.model_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    # ------------------------------------------------------------------ parsing

    @classmethod
    def from_mapping(cls, values: Mapping[str, Any]) -> "RunConfig":
        fields = {f.name: f for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            name = key.replace("-", "_")
            if name not in fields:
                raise ConfigError(f"unknown config key {key!r}")
            kwargs[name] = _coerce(name, fields[name].type, raw)
        return cls(**kwargs)

    @classmethod
    def load(cls, path: Union[str, os.PathLike, None] = None, overrides: Mapping[str, Any] = ()) -> "RunConfig":
        values: dict[str, Any] = parse_config_file(path) if path else {}
        values.update(dict(overrides))
        return cls.from_mapping(values)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            val = getattr(self, f.name)
            if isinstance(val, bool):
                val = "true" if val else "false"
            lines.append(f"{f.name} = {val}")
        return "\n".join(lines) + "\n"

    # ----------------------------------------------------------- derived configs

    def parsed_blocks(self) -> tuple[tuple[int, int], ...]:
        try:
            out = []
            for item in self.blocks.split(","):
                c, n = item.strip().lower().split("x")
                out.append((int(c), int(n)))
            return tuple(out)
        except ValueError:
            raise ConfigError(f"blocks = {self.blocks!r}: expected e.g. '16x2,32x2,64x2'") from None

    def parsed_rates(self) -> tuple[int, ...]:
        try:
            return tuple(int(r) for r in self.aspp_rates.split(","))
        except ValueError:
            raise ConfigError(f"aspp_rates = {self.aspp_rates!r}: expected e.g. '1,2,4'") from None

    def dataset_config(self) -> DatasetConfig:
        return DatasetConfig(self.classes, self.samples_per_class, self.image_size, self.seed, self.distractor_prob)

    def backbone_config(self) -> BackboneConfig:
        return BackboneConfig(
            input_size=(self.image_size, self.image_size),
            stem_stride=self.stem_stride,
            stem_channels=self.stem_channels,
            blocks=self.parsed_blocks(),
            seed=self.seed,
        )

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            alpha=self.alpha,
            merged_channels=self.merged_channels,
            decoder_channels=self.decoder_channels,
            aspp_rates=self.parsed_rates(),
            multi_similarity=self.multi_similarity,
            attention=self.attention,
            prototype=self.prototype,
            prior_mask=self.prior_mask,
            seed=self.seed,
        )

    def train_config(self) -> TrainConfig:
        if self.lr <= 0:
            raise ConfigError(f"lr = {self.lr} must be > 0 for training")
        return TrainConfig(
            lr=self.lr,
            batch_size=self.batch_size,
            episodes=self.episodes,
            momentum=self.momentum,
            weight_decay=self.weight_decay,
            seed=self.seed,
            fold_index=self.fold,
            fold_count=self.folds,
            K=self.shots,
        )

    def checkpoint_path(self) -> Path:
        return Path(self.checkpoint) if self.checkpoint else Path(self.out_dir) / "checkpoint.msaw"


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _coerce(name: str, typ, raw):
    typ = typ if isinstance(typ, str) else typ.__name__
    if not isinstance(raw, str):
        if typ == "float" and isinstance(raw, (int, float)) and not isinstance(raw, bool):
            return float(raw)
        if typ == "int" and isinstance(raw, bool):
            raise ConfigError(f"{name}: expected an integer, got {raw!r}")
        return raw
    text = raw.strip()
    try:
        if typ == "bool":
            low = text.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError
        if typ == "int":
            return int(text, 0)
        if typ == "float":
            return float(text)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {typ}") from None
    return text


def parse_config_file(path: Union[str, os.PathLike]) -> dict[str, str]:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"{p}: config file not found")
    values: dict[str, str] = {}
    for lineno, raw in enumerate(p.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{p}:{lineno}: expected 'key = value', got {raw!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{p}:{lineno}: empty key")
        values[key] = val
    return values


def describe_keys() -> str:
    """Markdown table of every key, its default and meaning."""
    rows = ["| key | default | meaning |", "|---|---|---|"]
    for f in dataclasses.fields(RunConfig):
        default = f.default
        if isinstance(default, bool):
            default = "true" if default else "false"
        shown = f"`{default}`" if default != "" else "(empty)"
        rows.append(f"| `{f.name}` | {shown} | {f.metadata['doc']} |")
    return "\n".join(rows)
