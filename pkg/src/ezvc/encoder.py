"""Frame-level embeddings at 50 frames/sec.

Two sources feed the same downstream contract: a deterministic surrogate
built from stacked log-mel context, and embeddings computed out of process by
a real SSL encoder and imported from the container format.
"""

from __future__ import annotations

import os
import re
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .audio import DEFAULT_AUDIO, AudioConfig, Waveform, log_mel
from .container import check_version, read_matrix, write_matrix
from .errors import ContractError, DomainError, FormatError

EMB_MAGIC = b"EZVCEMB1\n"
FRAME_RATE_HZ = 50
DECIMATION = 2  # 100 mel frames/sec -> 50 embeddings/sec
CONTEXT = 2  # +-2 frames


@dataclass(frozen=True)
class EncoderSpec:
    kind: str = "surrogate"
    layer_index: int = 14
    dim: int = 512
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("surrogate", "imported"):
            raise ContractError(f"unknown encoder kind {self.kind!r}")

    @property
    def source_tag(self) -> str:
        if self.kind == "surrogate":
            return f"surrogate/seed={self.seed}/dim={self.dim}/layer={self.layer_index}"
        return f"imported/dim={self.dim}/layer={self.layer_index}"

    @classmethod
    def from_tag(cls, tag: str) -> EncoderSpec:
        kind, _, rest = tag.partition("/")
        fields = dict(re.findall(r"(\w+)=(-?\d+)", rest))
        return cls(
            kind=kind,
            layer_index=int(fields.get("layer", 14)),
            dim=int(fields.get("dim", 512)),
            seed=int(fields.get("seed", 0)),
        )


@dataclass
class FrameEmbeddings:
    vectors: np.ndarray  # (T', D)
    frame_rate_hz: float = FRAME_RATE_HZ
    source_tag: str = "unknown"

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float32)
        if self.vectors.ndim != 2:
            raise ContractError(f"embeddings must be 2-D, got shape {self.vectors.shape}")

    @property
    def num_frames(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


@lru_cache(maxsize=16)
def projection_matrix(seed: int, dim: int, in_dim: int) -> np.ndarray:
    """``in_dim x dim`` matrix with orthonormal rows (an isometry), from ``seed``."""
    if dim < in_dim:
        raise ContractError(f"surrogate dim must be >= {in_dim} to stay an isometry, got {dim}")
    rng = np.random.default_rng(seed)
    q, r = np.linalg.qr(rng.standard_normal((dim, in_dim)))
    q = q * np.sign(np.diag(r))  # fix the QR sign ambiguity
    proj = np.ascontiguousarray(q.T)
    proj.setflags(write=False)
    return proj


def embedding_frames(num_mel_frames: int) -> int:
    return num_mel_frames // DECIMATION


def stack_context(frames: np.ndarray, context: int = CONTEXT) -> np.ndarray:
    """Concatenate each frame with its +-context neighbours, replicating edges."""
    t = frames.shape[0]
    idx = np.clip(np.arange(t)[:, None] + np.arange(-context, context + 1)[None, :], 0, t - 1)
    return frames[idx].reshape(t, -1)


def surrogate_embed(w: Waveform, spec: EncoderSpec, audio_cfg: AudioConfig = DEFAULT_AUDIO) -> FrameEmbeddings:
    if spec.kind != "surrogate":
        raise ContractError("surrogate_embed needs an EncoderSpec with kind='surrogate'")
    if len(w) < audio_cfg.win_length:
        raise DomainError(f"waveform of {len(w)} samples is shorter than one analysis window")
    mel = log_mel(w, audio_cfg).frames.astype(np.float64)
    n_out = embedding_frames(mel.shape[0])
    decimated = mel[: n_out * DECIMATION : DECIMATION]
    stacked = stack_context(decimated)
    proj = projection_matrix(spec.seed, spec.dim, stacked.shape[1])
    return FrameEmbeddings((stacked @ proj).astype(np.float32), FRAME_RATE_HZ, spec.source_tag)


def embed(w: Waveform, spec: EncoderSpec, audio_cfg: AudioConfig = DEFAULT_AUDIO) -> FrameEmbeddings:
    if spec.kind == "imported":
        raise ContractError("imported encoders have no waveform path; load their embedding files instead")
    return surrogate_embed(w, spec, audio_cfg)


def export_embeddings(emb: FrameEmbeddings, path: str | os.PathLike) -> None:
    header = {
        "version": 1,
        "frames": emb.num_frames,
        "dim": emb.dim,
        "frame_rate_hz": emb.frame_rate_hz,
        "source_tag": emb.source_tag,
    }
    write_matrix(path, EMB_MAGIC, header, emb.vectors)


def import_embeddings(path: str | os.PathLike, expected_dim: int | None = None) -> FrameEmbeddings:
    header, vectors = read_matrix(path, EMB_MAGIC, "frames", "dim")
    check_version(header, path)
    if expected_dim is not None and vectors.shape[1] != expected_dim:
        raise ContractError(f"{path}: embedding dim {vectors.shape[1]} != expected {expected_dim}")
    rate = header.get("frame_rate_hz")
    if rate != FRAME_RATE_HZ:
        raise ContractError(f"{path}: frame rate {rate!r} Hz, expected {FRAME_RATE_HZ}")
    if vectors.shape[0] == 0:
        raise DomainError(f"{path}: container holds no frames")
    if not np.all(np.isfinite(vectors)):
        raise FormatError(f"{path}: non-finite values in payload")
    return FrameEmbeddings(vectors, float(rate), str(header.get("source_tag", "unknown")))
