"""Conditional flow matching on the linear (optimal-transport) path.

Training regresses the constant velocity ``x1 - x0`` of the straight line
between noise ``x0`` and data ``x1`` on the masked (infilled) frames.
Sampling integrates the learned field with Euler steps on a swayed time grid,
optionally with classifier-free guidance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from ..errors import ContractError


@dataclass
class FlowPoint:
    x0: torch.Tensor
    x1: torch.Tensor
    t: torch.Tensor
    xt: torch.Tensor
    v_target: torch.Tensor


@dataclass
class TrainingBatch:
    mel: torch.Tensor  # (b, n, 80)
    token_ids: torch.Tensor  # (b, n), FILLER after the units, PAD after the length
    mask: torch.Tensor  # (b, n), True on frames to infill
    lengths: torch.Tensor  # (b,)

    def __post_init__(self):
        b, n = self.mel.shape[:2]
        if self.token_ids.shape != (b, n) or self.mask.shape != (b, n) or self.lengths.shape != (b,):
            raise ContractError("training batch tensors disagree on (batch, frames)")

    @property
    def valid(self) -> torch.Tensor:
        n = self.mel.shape[1]
        return torch.arange(n, device=self.mel.device)[None, :] < self.lengths[:, None]


def ot_path(x0: torch.Tensor, x1: torch.Tensor, t) -> FlowPoint:
    """Point on the straight path from ``x0`` (t=0) to ``x1`` (t=1).

    ``t`` is a scalar or one value per batch item.
    """
    if x0.shape != x1.shape:
        raise ContractError(f"x0 {tuple(x0.shape)} and x1 {tuple(x1.shape)} differ")
    t = torch.as_tensor(t, dtype=x1.dtype, device=x1.device)
    if t.ndim == 0:
        tb = t
    else:
        if t.shape[0] != x1.shape[0]:
            raise ContractError("per-item t must match the batch size")
        tb = t.reshape(-1, *([1] * (x1.ndim - 1)))
    if torch.any((t < 0) | (t > 1)):
        raise ContractError("t must lie in [0, 1]")
    xt = (1 - tb) * x0 + tb * x1
    return FlowPoint(x0, x1, t, xt, x1 - x0)


def sample_mask(n: int, frac_range: tuple[float, float], rng: np.random.Generator) -> np.ndarray:
    """One contiguous span of ``round(f * n)`` frames, ``f ~ U(frac_range)``."""
    if n < 1:
        raise ContractError("cannot mask an empty sequence")
    low, high = frac_range
    frac = low if low == high else rng.uniform(low, high)
    span = min(max(int(math.floor(frac * n + 0.5)), 1), n)
    start = int(rng.integers(0, n - span + 1))
    mask = np.zeros(n, dtype=bool)
    mask[start:start + span] = True
    return mask


def masked_mse(pred: torch.Tensor, target: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean squared error over the frames where ``mask`` is True (all channels)."""
    m = mask[..., None].to(pred.dtype)
    count = m.sum() * pred.shape[-1]
    return (((pred - target) ** 2) * m).sum() / count


def drop_conditioning(cond_mel: torch.Tensor, token_ids: torch.Tensor, drop: torch.Tensor, filler_id: int, pad_id: int | None = None):
    """Zero ``cond_mel`` and FILLER the tokens for items where ``drop`` is True."""
    if not torch.any(drop):
        return cond_mel, token_ids
    cond_mel = torch.where(drop[:, None, None], torch.zeros_like(cond_mel), cond_mel)
    blank = torch.full_like(token_ids, filler_id)
    if pad_id is not None:
        blank = torch.where(token_ids == pad_id, token_ids, blank)
    token_ids = torch.where(drop[:, None], blank, token_ids)
    return cond_mel, token_ids


def flow_matching_loss(
    model,
    batch: TrainingBatch,
    generator: torch.Generator | None = None,
    *,
    x0: torch.Tensor | None = None,
    t: torch.Tensor | None = None,
    drop: torch.Tensor | None = None,
    cond_drop_prob: float | None = None,
) -> torch.Tensor:
    """Infilling CFM loss for one batch; randomness comes from ``generator``.

    ``x0``, ``t`` and ``drop`` may be fixed by the caller (tests do this).
    """
    mask = batch.mask & batch.valid
    if torch.any(mask.sum(dim=1) == 0):
        raise ContractError("every batch item needs at least one masked frame")
    x1 = batch.mel
    b = x1.shape[0]
    if cond_drop_prob is None:
        cond_drop_prob = getattr(getattr(model, "config", None), "cond_drop_prob", 0.0)
    if t is None:
        t = torch.rand(b, generator=generator, dtype=x1.dtype, device=x1.device)
    if x0 is None:
        x0 = torch.randn(x1.shape, generator=generator, dtype=x1.dtype, device=x1.device)
    if drop is None:
        drop = torch.rand(b, generator=generator, device=x1.device) < cond_drop_prob

    point = ot_path(x0, x1, t)
    cond = torch.where(mask[..., None] | ~batch.valid[..., None], torch.zeros_like(x1), x1)
    cond, tokens = drop_conditioning(cond, batch.token_ids, drop, model.filler_id, getattr(model, "pad_id", None))
    pred = model(point.xt, cond, tokens, point.t, batch.lengths)
    return masked_mse(pred, point.v_target, mask)


def training_step(model, batch: TrainingBatch, generator: torch.Generator | None = None, **kwargs) -> float:
    """Compute the loss, backpropagate into ``.grad`` and return the loss value."""
    loss = flow_matching_loss(model, batch, generator, **kwargs)
    if not torch.isfinite(loss):
        raise FloatingPointError(f"non-finite training loss {loss.item()}")
    loss.backward()
    return float(loss.detach())


def sway_schedule(steps: int, sway_s: float, dtype=torch.float64) -> torch.Tensor:
    """``steps + 1`` times ``t + s * (cos(pi t / 2) - 1 + t)`` over a uniform grid."""
    if steps < 1:
        raise ContractError(f"steps must be >= 1, got {steps}")
    t = torch.linspace(0.0, 1.0, steps + 1, dtype=torch.float64)
    if sway_s != 0:
        t = t + sway_s * (torch.cos(torch.pi / 2 * t) - 1 + t)
    return t.to(dtype)


@torch.inference_mode()
def sample(
    model,
    cond_mel: torch.Tensor,
    token_ids: torch.Tensor,
    total_frames: int,
    steps: int = 32,
    guidance_w: float = 2.0,
    sway_s: float = -1.0,
    generator: torch.Generator | None = None,
    *,
    noise: torch.Tensor | None = None,
    dtype: torch.dtype | None = None,
) -> torch.Tensor:
    """Generate ``total_frames`` mel frames.

    ``cond_mel`` holds the prompt: its ``P`` rows occupy frames ``[0, P)`` and
    are written back into the state after every Euler step.  ``token_ids``
    covers all ``total_frames``.
    """
    if steps < 1:
        raise ContractError(f"steps must be >= 1, got {steps}")
    token_ids = torch.as_tensor(token_ids, dtype=torch.long)
    if token_ids.shape != (total_frames,):
        raise ContractError(f"token_ids has shape {tuple(token_ids.shape)}, expected ({total_frames},)")
    if dtype is None:
        params = list(model.parameters()) if hasattr(model, "parameters") else []
        dtype = params[0].dtype if params else torch.float32
    prompt = torch.as_tensor(cond_mel, dtype=dtype)
    n_prompt, channels = prompt.shape
    if n_prompt > total_frames:
        raise ContractError("prompt is longer than the requested total_frames")

    cond = torch.zeros(1, total_frames, channels, dtype=dtype)
    cond[0, :n_prompt] = prompt
    tokens = token_ids[None]
    if noise is None:
        noise = torch.randn(1, total_frames, channels, generator=generator, dtype=dtype)
    else:
        noise = torch.as_tensor(noise, dtype=dtype).reshape(1, total_frames, channels)
    uncond, uncond_tokens = drop_conditioning(cond, tokens, torch.ones(1, dtype=torch.bool), model.filler_id)

    was_training = getattr(model, "training", False)
    if was_training:
        model.eval()
    try:
        times = sway_schedule(steps, sway_s, dtype)
        x = noise.clone()
        for i in range(steps):
            t, dt = times[i], times[i + 1] - times[i]
            v = model(x, cond, tokens, t)
            if guidance_w > 0:
                v_uncond = model(x, uncond, uncond_tokens, t)
                v = v_uncond + guidance_w * (v - v_uncond)
            x = x + dt * v
            x[:, :n_prompt] = cond[:, :n_prompt]
    finally:
        if was_training:
            model.train()
    return x[0]
