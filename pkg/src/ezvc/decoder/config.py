from __future__ import annotations

from dataclasses import dataclass

from ..errors import ConfigError


@dataclass(frozen=True)
class DecoderConfig:
    layers: int = 4
    heads: int = 4
    model_dim: int = 256
    mel_dim: int = 80
    vocab_size: int = 502  # k units + FILLER + PAD
    cond_drop_prob: float = 0.2
    mask_frac_range: tuple[float, float] = (0.7, 1.0)
    dim_head: int | None = None
    ff_mult: int = 2
    text_dim: int = 128
    text_conv_layers: int = 2
    positional: str = "rotary"
    conv_pos_kernel: int = 31
    conv_pos_groups: int = 16
    dropout: float = 0.0

    def __post_init__(self):
        low, high = self.mask_frac_range
        if not 0.0 < low <= high <= 1.0:
            raise ConfigError(f"mask_frac_range must satisfy 0 < low <= high <= 1, got {self.mask_frac_range}")
        if not 0.0 <= self.cond_drop_prob < 1.0:
            raise ConfigError(f"cond_drop_prob must lie in [0, 1), got {self.cond_drop_prob}")
        if self.positional not in ("rotary", "sinusoidal"):
            raise ConfigError(f"positional must be 'rotary' or 'sinusoidal', got {self.positional!r}")
        if self.vocab_size < 3:
            raise ConfigError("vocab_size must leave room for FILLER and PAD")
        if self.model_dim % self.conv_pos_groups:
            raise ConfigError("model_dim must be divisible by conv_pos_groups")
        if self.head_dim % 2:
            raise ConfigError("attention head dim must be even for rotary embeddings")

    @property
    def head_dim(self) -> int:
        return self.dim_head if self.dim_head is not None else self.model_dim // self.heads

    @property
    def k_units(self) -> int:
        return self.vocab_size - 2

    @property
    def filler_id(self) -> int:
        return self.vocab_size - 2

    @property
    def pad_id(self) -> int:
        return self.vocab_size - 1


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    warmup_steps: int = 500
    total_steps: int = 5000
    batch_size: int = 10
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    final_lr_frac: float = 0.01
    # probability of training on two utterances joined end to end with the
    # second one masked, the layout conversion uses at inference time
    concat_prob: float = 0.0
    log_every: int = 50
    ckpt_every: int = 1000

    def __post_init__(self):
        if self.lr <= 0 or self.total_steps < 1 or self.batch_size < 1:
            raise ConfigError("lr, total_steps and batch_size must be positive")
        if self.warmup_steps < 0:
            raise ConfigError("warmup_steps must be >= 0")
        if not 0.0 <= self.concat_prob <= 1.0:
            raise ConfigError("concat_prob must lie in [0, 1]")


PAPER_DECODER = DecoderConfig(
    layers=22, heads=16, model_dim=1024, text_dim=512, text_conv_layers=4, ff_mult=2, conv_pos_groups=16
)
PAPER_TRAIN = TrainConfig(
    lr=5e-5, warmup_steps=100_000, total_steps=1_350_000, batch_size=64, concat_prob=0.0
)
DESK_DECODER = DecoderConfig(layers=4, heads=4, model_dim=256)
# constant peak rate after warmup: decay bought nothing on the overfit runs
DESK_TRAIN = TrainConfig(lr=1e-4, warmup_steps=500, total_steps=5000, batch_size=16, final_lr_frac=1.0)
