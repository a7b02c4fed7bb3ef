"""Batch assembly and the decoder training loop."""

from __future__ import annotations

import json
import logging
import math
import time
from collections.abc import Callable, Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from ..errors import ContractError, DomainError
from .config import DecoderConfig, TrainConfig
from .flow import TrainingBatch, sample_mask, training_step
from .model import UnitToMelDiT

log = logging.getLogger(__name__)


@dataclass
class Utterance:
    utt_id: str
    mel: np.ndarray  # (n, 80) log-mel
    units: np.ndarray  # deduped unit ids
    prompt_frames: int = 0  # leading frames always visible (joined items)

    @property
    def frames(self) -> int:
        return self.mel.shape[0]


def _join(a: Utterance, b: Utterance) -> Utterance:
    """``a`` as a visible prompt followed by ``b``, the conversion layout."""
    return Utterance(
        f"{a.utt_id}+{b.utt_id}", np.concatenate([a.mel, b.mel]), np.concatenate([a.units, b.units]), a.frames
    )


def make_batch(
    items: Sequence[Utterance],
    config: DecoderConfig,
    rng: np.random.Generator,
    dtype: torch.dtype = torch.float32,
) -> TrainingBatch:
    """Pad utterances into a batch and draw one infilling span per item.

    Items with ``prompt_frames`` set mask everything after the prompt instead.
    """
    if not items:
        raise DomainError("empty batch")
    n = max(u.frames for u in items)
    b = len(items)
    mel = np.zeros((b, n, config.mel_dim), dtype=np.float32)
    tokens = np.full((b, n), config.pad_id, dtype=np.int64)
    mask = np.zeros((b, n), dtype=bool)
    lengths = np.zeros(b, dtype=np.int64)
    for i, u in enumerate(items):
        if u.units.shape[0] > u.frames:
            raise ContractError(f"{u.utt_id}: {u.units.shape[0]} units exceed {u.frames} frames")
        mel[i, : u.frames] = u.mel
        tokens[i, : u.frames] = config.filler_id
        tokens[i, : u.units.shape[0]] = u.units
        if 0 < u.prompt_frames < u.frames:
            mask[i, u.prompt_frames : u.frames] = True
        else:
            mask[i, : u.frames] = sample_mask(u.frames, config.mask_frac_range, rng)
        lengths[i] = u.frames
    return TrainingBatch(
        torch.from_numpy(mel).to(dtype),
        torch.from_numpy(tokens),
        torch.from_numpy(mask),
        torch.from_numpy(lengths),
    )


def draw_items(data: Sequence[Utterance], batch_size: int, concat_prob: float, rng: np.random.Generator) -> list[Utterance]:
    if batch_size >= len(data):
        picks = rng.permutation(len(data))
    else:
        picks = rng.choice(len(data), size=batch_size, replace=False)
    items = []
    for i in picks:
        u = data[int(i)]
        if concat_prob > 0 and rng.random() < concat_prob:
            u = _join(data[int(rng.integers(len(data)))], u)
        items.append(u)
    return items


def lr_factor(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to the peak, then linear decay to ``final_lr_frac``."""
    if cfg.warmup_steps and step < cfg.warmup_steps:
        return (step + 1) / cfg.warmup_steps
    span = max(cfg.total_steps - cfg.warmup_steps, 1)
    frac = min(max(step - cfg.warmup_steps, 0) / span, 1.0)
    return 1.0 - (1.0 - cfg.final_lr_frac) * frac


def make_optimizer(model: torch.nn.Module, cfg: TrainConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)


@dataclass
class TrainResult:
    model: UnitToMelDiT
    optimizer: torch.optim.Optimizer
    losses: list[float]
    step: int


def train_decoder(
    data: Sequence[Utterance],
    config: DecoderConfig,
    train_cfg: TrainConfig,
    seed: int,
    *,
    model: UnitToMelDiT | None = None,
    optimizer: torch.optim.Optimizer | None = None,
    start_step: int = 0,
    out_dir: str | Path | None = None,
    max_steps: int | None = None,
    stop: Callable[[int, list[float]], bool] | None = None,
) -> TrainResult:
    """Train (or resume training) a decoder on ``data``.

    With ``out_dir`` set, a JSON-lines loss log and periodic checkpoints are
    written there.  ``stop(step, losses)`` may end training early.
    """
    from .checkpoint import save_checkpoint

    if not data:
        raise DomainError("no training utterances")
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    gen = torch.Generator().manual_seed(seed)
    if model is None:
        model = UnitToMelDiT(config)
    if optimizer is None:
        optimizer = make_optimizer(model, train_cfg)
    sched = torch.optim.lr_scheduler.LambdaLR(optimizer, lambda s: lr_factor(s + start_step, train_cfg))
    end = train_cfg.total_steps if max_steps is None else min(train_cfg.total_steps, start_step + max_steps)

    out = Path(out_dir) if out_dir is not None else None
    log_file = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_file = open(out / "loss.jsonl", "a", encoding="utf-8")

    losses: list[float] = []
    model.train()
    tic = time.perf_counter()
    step = start_step
    try:
        while step < end:
            items = draw_items(data, train_cfg.batch_size, train_cfg.concat_prob, rng)
            batch = make_batch(items, config, rng)
            optimizer.zero_grad(set_to_none=True)
            loss = training_step(model, batch, gen)
            if train_cfg.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(model.parameters(), train_cfg.grad_clip)
            optimizer.step()
            sched.step()
            step += 1
            losses.append(loss)
            if not math.isfinite(loss):
                raise FloatingPointError(f"loss diverged at step {step}")
            if step % train_cfg.log_every == 0:
                recent = float(np.mean(losses[-train_cfg.log_every:]))
                log.info("step %d loss %.4f lr %.2e (%.1fs)", step, recent, sched.get_last_lr()[0], time.perf_counter() - tic)
                if log_file is not None:
                    log_file.write(json.dumps({"step": step, "loss": recent}) + "\n")
                    log_file.flush()
            if out is not None and step % train_cfg.ckpt_every == 0:
                save_checkpoint(out / "model.ezckpt", model, optimizer, step, train_cfg)
            if stop is not None and stop(step, losses):
                break
    finally:
        if log_file is not None:
            log_file.close()
    model.eval()
    if out is not None:
        save_checkpoint(out / "model.ezckpt", model, optimizer, step, train_cfg)
    return TrainResult(model, optimizer, losses, step)


def moving_average(values: Sequence[float], window: int) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if v.size < window:
        return np.array([v.mean()]) if v.size else v
    c = np.cumsum(np.insert(v, 0, 0.0))
    return (c[window:] - c[:-window]) / window
