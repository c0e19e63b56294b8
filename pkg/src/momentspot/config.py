"""Model and training configuration as plain dataclasses with JSON round-trip."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field


class ConfigError(ValueError):
    pass


@dataclass
class LossWeights:
    l1: float = 10.0
    giou: float = 1.0
    cls: float = 4.0
    saliency: float = 1.0
    rank: float = 1.0
    contrastive: float = 1.0
    hard: float = 10.0
    task_specific: float = 1.0
    task_coupled: float = 1.0
    alignment: float = 0.01
    margin: float = 0.2
    temperature: float = 0.5
    background_weight: float = 0.1


@dataclass
class ModelConfig:
    hidden_dim: int = 256
    heads: int = 8
    fusion_layers: int = 1
    encoder_layers: int = 3
    decoder_layers: int = 3
    num_queries: int = 10
    ffn_dim: int = 1024
    proj_layers: int = 2
    proj_kernel: int = 3
    refine_kernel: int = 3
    max_text_len: int = 32
    max_clips: int = 75
    dropout: float = 0.1
    input_dropout: float = 0.5
    video_parts: tuple = (("clip_v", 512), ("slowfast", 2304), ("blip_v", 768))
    text_parts: tuple = (("clip_t", 512), ("blip_t", 768))
    clip_len: float = 2.0
    use_refinement: bool = True
    fusion_mode: str = "bidirectional"  # or "text_to_video"
    dtype: str = "float32"
    weights: LossWeights = field(default_factory=LossWeights)
    lr: float = 1e-4
    weight_decay: float = 1e-4
    epochs: int = 200
    batch_size: int = 32
    grad_clip: float = 0.1  # global norm; <= 0 disables
    val_fraction: float = 0.1
    eval_every: int = 1  # epochs between validation passes; 0 = final only

    def __post_init__(self):
        self.video_parts = tuple((str(k), int(d)) for k, d in self.video_parts)
        self.text_parts = tuple((str(k), int(d)) for k, d in self.text_parts)
        self.validate()

    def validate(self):
        if self.hidden_dim <= 0 or self.hidden_dim % self.heads != 0:
            raise ConfigError(f"hidden_dim {self.hidden_dim} must be positive and divisible by heads {self.heads}")
        if self.proj_kernel % 2 != 1 or self.refine_kernel % 2 != 1:
            raise ConfigError("conv kernels must be odd for same padding")
        if self.fusion_mode not in ("bidirectional", "text_to_video"):
            raise ConfigError(f"unknown fusion_mode '{self.fusion_mode}'")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got '{self.dtype}'")
        if not self.video_parts or not self.text_parts:
            raise ConfigError("at least one video and one text feature part required")
        if min(self.fusion_layers, self.encoder_layers, self.decoder_layers,
               self.proj_layers, self.num_queries) < 1:
            raise ConfigError("layer and query counts must be >= 1")
        if not (0 <= self.val_fraction < 1):
            raise ConfigError("val_fraction must be in [0, 1)")
        return self

    @property
    def video_dim(self):
        return sum(d for _, d in self.video_parts)

    @property
    def text_dim(self):
        return sum(d for _, d in self.text_parts)

    @classmethod
    def desk(cls, **overrides):
        """Small CPU-friendly preset used by the synthetic experiments."""
        base = dict(
            hidden_dim=32,
            heads=2,
            ffn_dim=128,
            num_queries=8,
            max_text_len=8,
            max_clips=32,
            dropout=0.0,
            input_dropout=0.0,
            video_parts=(("clip_v", 24),),
            text_parts=(("clip_t", 16),),
            dtype="float64",
            lr=1e-3,
            weight_decay=1e-4,
            epochs=300,
            batch_size=4,
            grad_clip=0.0,  # epoch-scaled saliency term grows grad norms; a fixed cap starves late epochs
            val_fraction=0.0,
            eval_every=0,
        )
        base.update(overrides)
        return cls(**base)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["video_parts"] = [list(p) for p in self.video_parts]
        d["text_parts"] = [list(p) for p in self.text_parts]
        return d

    def to_json(self, path=None):
        text = json.dumps(self.to_dict(), indent=2)
        if path is not None:
            with open(path, "w", encoding="utf-8") as fh:
                fh.write(text + "\n")
        return text

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        if "weights" in d and isinstance(d["weights"], dict):
            wknown = {f.name for f in dataclasses.fields(LossWeights)}
            wunknown = set(d["weights"]) - wknown
            if wunknown:
                raise ConfigError(f"unknown loss weight fields: {sorted(wunknown)}")
            d["weights"] = LossWeights(**d["weights"])
        for key in ("video_parts", "text_parts"):
            if key in d:
                d[key] = tuple((k, int(dim)) for k, dim in d[key])
        return cls(**d)

    @classmethod
    def from_json(cls, path):
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))
