"""Diffusion transformer that predicts the flow-matching velocity for mel frames.

Per frame, the noisy mel, the masked conditioning mel and a unit-token
embedding are concatenated on the channel axis and projected to the model
width.  The flow time enters every block through adaptive layer norm.

shapes: b - batch, n - frames, d - width
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn

from ..errors import ContractError
from .config import DecoderConfig


def lengths_to_mask(lengths: torch.Tensor, n: int) -> torch.Tensor:
    return torch.arange(n, device=lengths.device)[None, :] < lengths[:, None]


def sinusoidal_embedding(x: torch.Tensor, dim: int, scale: float = 1000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(torch.arange(half, device=x.device, dtype=x.dtype) * -(math.log(10000.0) / max(half - 1, 1)))
    arg = scale * x[..., None] * freqs
    return torch.cat((arg.sin(), arg.cos()), dim=-1)


def sinusoidal_positions(n: int, dim: int, dtype=torch.float32, device=None) -> torch.Tensor:
    pos = torch.arange(n, device=device, dtype=dtype)
    return sinusoidal_embedding(pos, dim, scale=1.0)


class RotaryEmbedding(nn.Module):
    def __init__(self, dim: int, base: float = 10000.0):
        super().__init__()
        self.register_buffer("inv_freq", 1.0 / (base ** (torch.arange(0, dim, 2).float() / dim)), persistent=False)

    def forward(self, n: int, dtype: torch.dtype) -> tuple[torch.Tensor, torch.Tensor]:
        t = torch.arange(n, device=self.inv_freq.device, dtype=dtype)
        freqs = torch.outer(t, self.inv_freq.to(dtype))
        freqs = torch.repeat_interleave(freqs, 2, dim=-1)  # (n, head_dim)
        return freqs.cos(), freqs.sin()


def _rotate_half(x: torch.Tensor) -> torch.Tensor:
    x = x.unflatten(-1, (-1, 2))
    x1, x2 = x.unbind(-1)
    return torch.stack((-x2, x1), dim=-1).flatten(-2)


def apply_rotary(x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor) -> torch.Tensor:
    return x * cos + _rotate_half(x) * sin


class ConvPositionEmbedding(nn.Module):
    def __init__(self, dim: int, kernel_size: int = 31, groups: int = 16):
        super().__init__()
        if kernel_size % 2 == 0:
            raise ContractError("conv position kernel must be odd")
        self.net = nn.Sequential(
            nn.Conv1d(dim, dim, kernel_size, groups=groups, padding=kernel_size // 2),
            nn.Mish(),
            nn.Conv1d(dim, dim, kernel_size, groups=groups, padding=kernel_size // 2),
            nn.Mish(),
        )

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        keep = None if mask is None else mask[:, None, :]
        h = x.transpose(1, 2)
        for layer in self.net:
            # re-zero padding ahead of each convolution so it cannot bleed inwards
            if keep is not None and isinstance(layer, nn.Conv1d):
                h = h.masked_fill(~keep, 0.0)
            h = layer(h)
        if keep is not None:
            h = h.masked_fill(~keep, 0.0)
        return h.transpose(1, 2)


class GRN(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.gamma = nn.Parameter(torch.zeros(1, 1, dim))
        self.beta = nn.Parameter(torch.zeros(1, 1, dim))

    def forward(self, x, keep: torch.Tensor | None = None):
        if keep is not None:
            x = x.masked_fill(~keep, 0.0)  # padded frames stay out of the norm over time
        gx = torch.norm(x, p=2, dim=1, keepdim=True)
        nx = gx / (gx.mean(dim=-1, keepdim=True) + 1e-6)
        return self.gamma * (x * nx) + self.beta + x


class ConvNeXtBlock(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.dwconv = nn.Conv1d(dim, dim, kernel_size=7, padding=3, groups=dim)
        self.norm = nn.LayerNorm(dim, eps=1e-6)
        self.pw1 = nn.Linear(dim, hidden)
        self.grn = GRN(hidden)
        self.pw2 = nn.Linear(hidden, dim)

    def forward(self, x, keep: torch.Tensor | None = None):
        h = self.dwconv(x.transpose(1, 2)).transpose(1, 2)
        h = self.pw2(self.grn(F.gelu(self.pw1(self.norm(h))), keep))
        return x + h


class TokenEmbedding(nn.Module):
    def __init__(self, vocab_size: int, dim: int, conv_layers: int):
        super().__init__()
        self.dim = dim
        self.embed = nn.Embedding(vocab_size, dim)
        self.blocks = nn.ModuleList(ConvNeXtBlock(dim, dim * 2) for _ in range(conv_layers))

    def forward(self, tokens: torch.Tensor, mask: torch.Tensor | None, dtype: torch.dtype) -> torch.Tensor:
        keep = None if mask is None else mask[..., None]
        x = self.embed(tokens).to(dtype)
        if self.blocks:
            x = x + sinusoidal_positions(tokens.shape[1], self.dim, dtype, tokens.device)
        # padding is zeroed before every block so it neither leaks through the
        # convolutions nor enters the GRN statistics
        for block in self.blocks:
            if keep is not None:
                x = x.masked_fill(~keep, 0.0)
            x = block(x, keep)
        if keep is not None:
            x = x.masked_fill(~keep, 0.0)
        return x


class TimestepEmbedding(nn.Module):
    def __init__(self, dim: int, freq_dim: int = 256):
        super().__init__()
        self.freq_dim = freq_dim
        self.mlp = nn.Sequential(nn.Linear(freq_dim, dim), nn.SiLU(), nn.Linear(dim, dim))

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        return self.mlp(sinusoidal_embedding(t, self.freq_dim))


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int, head_dim: int):
        super().__init__()
        self.heads = heads
        self.head_dim = head_dim
        inner = heads * head_dim
        self.to_qkv = nn.Linear(dim, inner * 3)
        self.to_out = nn.Linear(inner, dim)

    def forward(self, x, mask=None, rope=None):
        b, n, _ = x.shape
        q, k, v = self.to_qkv(x).view(b, n, 3, self.heads, self.head_dim).permute(2, 0, 3, 1, 4)
        if rope is not None:
            cos, sin = rope
            q, k = apply_rotary(q, cos, sin), apply_rotary(k, cos, sin)
        attn_mask = None if mask is None else mask[:, None, None, :]
        out = F.scaled_dot_product_attention(q, k, v, attn_mask=attn_mask)
        out = self.to_out(out.transpose(1, 2).reshape(b, n, -1))
        if mask is not None:
            out = out.masked_fill(~mask[..., None], 0.0)
        return out


class DiTBlock(nn.Module):
    def __init__(self, dim: int, heads: int, head_dim: int, ff_mult: int, dropout: float):
        super().__init__()
        self.modulation = nn.Sequential(nn.SiLU(), nn.Linear(dim, dim * 6))
        self.attn_norm = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        self.attn = Attention(dim, heads, head_dim)
        self.ff_norm = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        self.ff = nn.Sequential(
            nn.Linear(dim, dim * ff_mult), nn.GELU(approximate="tanh"), nn.Dropout(dropout), nn.Linear(dim * ff_mult, dim)
        )

    def forward(self, x, temb, mask=None, rope=None):
        shift_a, scale_a, gate_a, shift_f, scale_f, gate_f = self.modulation(temb)[:, None].chunk(6, dim=-1)
        h = self.attn_norm(x) * (1 + scale_a) + shift_a
        x = x + gate_a * self.attn(h, mask=mask, rope=rope)
        h = self.ff_norm(x) * (1 + scale_f) + shift_f
        return x + gate_f * self.ff(h)


class UnitToMelDiT(nn.Module):
    """Velocity field ``v(x_t, cond_mel, tokens, t)`` over a length-n frame sequence."""

    def __init__(self, config: DecoderConfig):
        super().__init__()
        c = config
        self.config = c
        self.filler_id = c.filler_id
        self.pad_id = c.pad_id
        self.time_embed = TimestepEmbedding(c.model_dim)
        self.token_embed = TokenEmbedding(c.vocab_size, c.text_dim, c.text_conv_layers)
        self.input_proj = nn.Linear(c.mel_dim * 2 + c.text_dim, c.model_dim)
        if c.positional == "rotary":
            self.conv_pos = ConvPositionEmbedding(c.model_dim, c.conv_pos_kernel, c.conv_pos_groups)
            self.rotary = RotaryEmbedding(c.head_dim)
        else:
            self.conv_pos = None
            self.rotary = None
        self.blocks = nn.ModuleList(
            DiTBlock(c.model_dim, c.heads, c.head_dim, c.ff_mult, c.dropout) for _ in range(c.layers)
        )
        self.final_modulation = nn.Sequential(nn.SiLU(), nn.Linear(c.model_dim, c.model_dim * 2))
        self.final_norm = nn.LayerNorm(c.model_dim, elementwise_affine=False, eps=1e-6)
        self.proj_out = nn.Linear(c.model_dim, c.mel_dim)
        nn.init.zeros_(self.proj_out.weight)
        nn.init.zeros_(self.proj_out.bias)

    def forward(
        self,
        xt: torch.Tensor,
        cond_mel: torch.Tensor,
        token_ids: torch.Tensor,
        t: torch.Tensor | float,
        lengths: torch.Tensor | None = None,
    ) -> torch.Tensor:
        if xt.shape != cond_mel.shape:
            raise ContractError(f"xt {tuple(xt.shape)} and cond_mel {tuple(cond_mel.shape)} differ")
        if token_ids.shape != xt.shape[:2]:
            raise ContractError(f"token_ids {tuple(token_ids.shape)} do not match frames {tuple(xt.shape[:2])}")
        if xt.shape[-1] != self.config.mel_dim:
            raise ContractError(f"expected {self.config.mel_dim} mel channels, got {xt.shape[-1]}")
        b, n, _ = xt.shape
        dtype = xt.dtype
        t = torch.as_tensor(t, dtype=dtype, device=xt.device)
        if t.ndim == 0:
            t = t.expand(b)
        mask = None if lengths is None else lengths_to_mask(lengths, n)

        temb = self.time_embed(t)
        tok = self.token_embed(token_ids, mask, dtype)
        x = self.input_proj(torch.cat((xt, cond_mel, tok), dim=-1))
        if self.conv_pos is not None:
            x = x + self.conv_pos(x, mask)
            rope = self.rotary(n, dtype)
        else:
            x = x + sinusoidal_positions(n, x.shape[-1], dtype, x.device)
            rope = None
        for block in self.blocks:
            x = block(x, temb, mask=mask, rope=rope)
        scale, shift = self.final_modulation(temb)[:, None].chunk(2, dim=-1)
        x = self.final_norm(x) * (1 + scale) + shift
        out = self.proj_out(x)
        if mask is not None:
            out = out.masked_fill(~mask[..., None], 0.0)
        return out

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())
