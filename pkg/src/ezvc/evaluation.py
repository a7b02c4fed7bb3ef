"""Objective metrics: speaker similarity, unit overlap, mel distance, batch reports."""

from __future__ import annotations

import json
import logging
import os
import shlex
import subprocess
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .audio import MelSpectrogram, Waveform, load_waveform, log_mel, save_waveform, to_model_rate
from .errors import ContractError, DomainError, EzvcError, FormatError
from .pipeline import ConversionRequest, convert, encode_to_units
from .quantizer import UnitSequence

log = logging.getLogger(__name__)

MIN_EMBED_SECONDS = 0.5
PAIR_TAGS = ("same-gender", "cross-gender", "intra-lingual", "cross-lingual")


@dataclass
class SpeakerEmbedding:
    vector: np.ndarray
    extractor_tag: str

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=np.float64).reshape(-1)


def _unit_norm(v: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(v)
    if norm == 0 or not np.isfinite(norm):
        raise DomainError("cannot normalise a zero or non-finite embedding")
    return v / norm


def proxy_speaker_embedding(w: Waveform) -> SpeakerEmbedding:
    """Per-band log-mel mean and standard deviation over time, L2-normalised (160 dims)."""
    w = to_model_rate(w)
    if w.duration < MIN_EMBED_SECONDS:
        raise DomainError(f"need at least {MIN_EMBED_SECONDS} s of audio, got {w.duration:.2f} s")
    mel = log_mel(w).frames.astype(np.float64)
    stats = np.concatenate([mel.mean(axis=0), mel.std(axis=0)])
    return SpeakerEmbedding(_unit_norm(stats), "proxy-logmel-stats")


def external_speaker_embedding(w: Waveform, command: str, tag: str = "external") -> SpeakerEmbedding:
    """Run ``command <wav_path> <out_path>``; the program writes whitespace-separated floats."""
    with tempfile.TemporaryDirectory(prefix="ezvc-spk-") as tmp:
        wav_path, out_path = Path(tmp) / "in.wav", Path(tmp) / "emb.txt"
        save_waveform(to_model_rate(w), wav_path)
        proc = subprocess.run(shlex.split(command) + [str(wav_path), str(out_path)], capture_output=True, text=True)
        if proc.returncode != 0:
            raise EzvcError(f"speaker model exited with {proc.returncode}: {proc.stderr.strip()[:200]}")
        try:
            vec = np.array(out_path.read_text().split(), dtype=np.float64)
        except ValueError:
            raise FormatError("speaker model output is not a list of numbers") from None
    return SpeakerEmbedding(_unit_norm(vec), tag)


def cosine_similarity(a: SpeakerEmbedding, b: SpeakerEmbedding) -> float:
    if a.extractor_tag != b.extractor_tag:
        raise ContractError(f"embeddings come from different extractors ({a.extractor_tag} vs {b.extractor_tag})")
    if a.vector.shape != b.vector.shape:
        raise ContractError(f"embedding dims differ ({a.vector.shape[0]} vs {b.vector.shape[0]})")
    return float(np.clip(np.dot(a.vector, b.vector), -1.0, 1.0))


def edit_distance(a, b) -> int:
    a, b = list(a), list(b)
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i] + [0] * len(b)
        for j, y in enumerate(b, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y))
        prev = cur
    return prev[-1]


def unit_overlap(a: UnitSequence, b: UnitSequence) -> float:
    """``1 - edit_distance / max(len)``; two empty sequences overlap fully."""
    ua = a.units if isinstance(a, UnitSequence) else np.asarray(a)
    ub = b.units if isinstance(b, UnitSequence) else np.asarray(b)
    longest = max(len(ua), len(ub))
    if longest == 0:
        return 1.0
    return 1.0 - edit_distance(ua.tolist(), ub.tolist()) / longest


def mel_l1(a: MelSpectrogram | np.ndarray, b: MelSpectrogram | np.ndarray) -> float:
    fa = np.asarray(getattr(a, "frames", a), dtype=np.float64)
    fb = np.asarray(getattr(b, "frames", b), dtype=np.float64)
    if fa.shape != fb.shape:
        raise ContractError(f"mel shapes differ: {fa.shape} vs {fb.shape}")
    return float(np.abs(fa - fb).mean())


@dataclass
class PairSpec:
    pair_id: str
    source: Path
    target: Path
    tag: str | None = None


def read_pairs(path: str | os.PathLike) -> list[PairSpec]:
    path = Path(path)
    pairs = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                r = json.loads(line)
                src, tgt = Path(r["source"]), Path(r["target"])
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise FormatError(f"{path}:{lineno}: bad pair record ({exc})") from None
            tag = r.get("tag")
            if tag is not None and tag not in PAIR_TAGS:
                raise FormatError(f"{path}:{lineno}: unknown tag {tag!r}")
            pairs.append(PairSpec(
                str(r["pair_id"]),
                src if src.is_absolute() else path.parent / src,
                tgt if tgt.is_absolute() else path.parent / tgt,
                tag,
            ))
    return pairs


@dataclass
class EvalReport:
    rows: list[dict]
    aggregate: dict
    failures: int

    @property
    def exit_status(self) -> int:
        ok = len(self.rows) - self.failures
        if self.failures == 0:
            return 0
        return 1 if ok > 0 else 2


def _fmt(v, width: int) -> str:
    return f"{v:>{width}.4f}" if isinstance(v, float) else f"{'-':>{width}}"


def render_table(rows: list[dict], aggregate: dict) -> str:
    head = f"{'pair':<24} {'tag':<14} {'cosine':>8} {'overlap':>8} {'dur':>7}  status"
    lines = [head, "-" * len(head)]
    for r in rows + [aggregate]:
        if r.get("status") == "error":
            lines.append(f"{r['pair_id']:<24} {str(r.get('tag') or ''):<14} {'-':>8} {'-':>8} {'-':>7}  error: {r['error']}")
        else:
            lines.append(
                f"{r['pair_id']:<24} {str(r.get('tag') or ''):<14} {_fmt(r['cosine'], 8)} {_fmt(r['unit_overlap'], 8)} "
                f"{_fmt(r['duration_ratio'], 7)}  {r.get('status', '')}"
            )
    return "\n".join(lines) + "\n"


def eval_batch(
    pairs: str | os.PathLike | list[PairSpec],
    model,
    cb,
    enc,
    voc,
    report_path: str | os.PathLike,
    *,
    seed: int = 0,
    steps: int = 32,
    guidance_w: float = 2.0,
    sway_s: float = -1.0,
    speaker_embed=proxy_speaker_embedding,
) -> EvalReport:
    """Convert every pair, score it, and write JSON-lines records plus a text table.

    A failing pair becomes an error row; the batch carries on.
    """
    pairs = pairs if isinstance(pairs, list) else read_pairs(pairs)
    rows: list[dict] = []
    failures = 0
    for p in pairs:
        try:
            source = to_model_rate(load_waveform(p.source))
            target = to_model_rate(load_waveform(p.target))
            req = ConversionRequest(source, target, steps=steps, guidance_w=guidance_w, sway_s=sway_s, seed=seed)
            result = convert(req, model, cb, enc, voc)
            out_units = encode_to_units(result.audio, enc, cb)
            rows.append({
                "pair_id": p.pair_id,
                "tag": p.tag,
                "status": "ok",
                "cosine": cosine_similarity(speaker_embed(result.audio), speaker_embed(target)),
                "unit_overlap": unit_overlap(out_units, result.source_units),
                "duration_ratio": result.audio.duration / source.duration,
            })
        except (OSError, EzvcError) as exc:
            failures += 1
            log.warning("pair %s failed: %s", p.pair_id, exc)
            rows.append({"pair_id": p.pair_id, "tag": p.tag, "status": "error", "error": f"{type(exc).__name__}: {exc}"})

    ok = [r for r in rows if r["status"] == "ok"]
    aggregate = {"pair_id": "__aggregate__", "tag": None, "status": f"{len(ok)}/{len(rows)} ok"}
    for key in ("cosine", "unit_overlap", "duration_ratio"):
        aggregate[key] = float(np.mean([r[key] for r in ok])) if ok else None

    report_path = Path(report_path)
    with open(report_path, "w", encoding="utf-8") as f:
        for r in rows + [aggregate]:
            f.write(json.dumps(r, sort_keys=True) + "\n")
    report_path.with_suffix(".txt").write_text(render_table(rows, aggregate), encoding="utf-8")
    return EvalReport(rows, aggregate, failures)
