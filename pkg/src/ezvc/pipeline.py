"""Training-data preparation and the prompt-concatenation conversion recipe.

Conversion: the target's units precede the source's units in the token
stream, the target mel conditions the leading frames, the sampler fills the
remaining ``source frames`` and the target region is cut away before
vocoding.
"""

from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import torch

from .audio import DEFAULT_AUDIO, AudioConfig, MelSpectrogram, Waveform, load_mel, load_waveform, log_mel, save_mel, to_model_rate
from .decoder.flow import sample
from .decoder.train import Utterance
from .encoder import EncoderSpec, FrameEmbeddings, embed, import_embeddings
from .errors import ContractError, DomainError, EzvcError, FormatError
from .quantizer import Codebook, UnitSequence, assign
from .units import UnitVocabulary, concat, dedup, parse_unit_record, to_tokens, unit_record
from .vocoder import VocoderSpec, mel_to_waveform

log = logging.getLogger(__name__)

MIN_PROMPT_SECONDS = 0.5


@dataclass
class ConversionRequest:
    source: Waveform
    target: Waveform
    steps: int = 32
    guidance_w: float = 2.0
    sway_s: float = -1.0
    seed: int = 0


@dataclass
class ConversionResult:
    audio: Waveform
    generated_mel: MelSpectrogram
    source_units: UnitSequence
    target_units: UnitSequence
    prompt_frames: int


@dataclass
class ManifestEntry:
    utt_id: str
    audio_path: Path
    language: str | None = None


@dataclass
class IndexEntry:
    utt_id: str
    mel_path: str
    units_path: str
    frames: int
    unit_count: int

    def to_record(self) -> dict:
        return {
            "id": self.utt_id,
            "mel_path": self.mel_path,
            "units_path": self.units_path,
            "frames": self.frames,
            "unit_count": self.unit_count,
        }


@dataclass
class DatasetIndex:
    root: Path
    entries: list[IndexEntry]
    skipped: list[tuple[str, str]] = field(default_factory=list)


def encode_to_units(
    w: Waveform,
    enc: EncoderSpec,
    cb: Codebook,
    audio_cfg: AudioConfig = DEFAULT_AUDIO,
    *,
    embeddings: FrameEmbeddings | None = None,
) -> UnitSequence:
    """Embed, quantise and collapse runs.  Precomputed embeddings bypass the encoder."""
    if embeddings is None:
        embeddings = embed(to_model_rate(w, audio_cfg), enc, audio_cfg)
    return dedup(assign(cb, embeddings))


def _vocab_for(model, cb: Codebook) -> UnitVocabulary:
    vocab = UnitVocabulary(cb.k)
    if model.filler_id != vocab.filler:
        raise ContractError(f"decoder vocabulary ({model.filler_id} units) does not match codebook k={cb.k}")
    return vocab


def convert(
    req: ConversionRequest,
    model,
    cb: Codebook,
    enc: EncoderSpec,
    voc: VocoderSpec = VocoderSpec(),
    audio_cfg: AudioConfig = DEFAULT_AUDIO,
) -> ConversionResult:
    source = to_model_rate(req.source, audio_cfg)
    target = to_model_rate(req.target, audio_cfg)
    for name, w in (("source", source), ("target", target)):
        if w.duration < MIN_PROMPT_SECONDS:
            raise DomainError(f"{name} audio is {w.duration:.2f} s; at least {MIN_PROMPT_SECONDS} s is required")
    vocab = _vocab_for(model, cb)

    target_mel = log_mel(target, audio_cfg)
    target_units = encode_to_units(target, enc, cb, audio_cfg)
    source_units = encode_to_units(source, enc, cb, audio_cfg)
    n_target = target_mel.num_frames
    n_source = source.samples.shape[0] // audio_cfg.hop_length
    total = n_target + n_source

    tokens = to_tokens(concat(target_units, source_units), vocab, total)
    gen = torch.Generator().manual_seed(req.seed)
    mel = sample(
        model,
        torch.from_numpy(target_mel.frames),
        torch.from_numpy(tokens),
        total,
        steps=req.steps,
        guidance_w=req.guidance_w,
        sway_s=req.sway_s,
        generator=gen,
    )
    generated = MelSpectrogram(mel[n_target:].float().numpy(), audio_cfg.hop_length, audio_cfg.sample_rate)
    audio = mel_to_waveform(generated, voc, audio_cfg)
    return ConversionResult(audio, generated, source_units, target_units, n_target)


def resynthesize(w: Waveform, model, cb: Codebook, enc: EncoderSpec, voc: VocoderSpec = VocoderSpec(), seed: int = 0, **knobs) -> ConversionResult:
    return convert(ConversionRequest(w, w, seed=seed, **knobs), model, cb, enc, voc)


def read_manifest(path: str | os.PathLike) -> list[ManifestEntry]:
    path = Path(path)
    entries = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                audio = Path(rec["audio_path"])
                entries.append(ManifestEntry(str(rec["id"]), audio if audio.is_absolute() else path.parent / audio, rec.get("language")))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise FormatError(f"{path}:{lineno}: bad manifest record ({exc})") from None
    return entries


def write_manifest(entries: list[ManifestEntry], path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for e in entries:
            rec = {"id": e.utt_id, "audio_path": str(e.audio_path)}
            if e.language:
                rec["language"] = e.language
            f.write(json.dumps(rec) + "\n")


def _prepare_one(args):
    entry, enc, cb, out_dir, audio_cfg, emb_dir = args
    try:
        w = to_model_rate(load_waveform(entry.audio_path), audio_cfg)
        mel = log_mel(w, audio_cfg)
        emb = None if emb_dir is None else import_embeddings(Path(emb_dir) / f"{entry.utt_id}.emb", cb.dim)
        units = encode_to_units(w, enc, cb, audio_cfg, embeddings=emb)
    except (OSError, EzvcError) as exc:
        return None, f"{type(exc).__name__}: {exc}"
    mel_rel = f"mels/{entry.utt_id}.mel"
    units_rel = f"units/{entry.utt_id}.units"
    save_mel(mel, out_dir / mel_rel)
    (out_dir / units_rel).write_text(unit_record(entry.utt_id, units) + "\n", encoding="utf-8")
    return IndexEntry(entry.utt_id, mel_rel, units_rel, mel.num_frames, len(units)), None


def prepare_training_set(
    manifest: str | os.PathLike | list[ManifestEntry],
    enc: EncoderSpec,
    cb: Codebook,
    out_dir: str | os.PathLike,
    audio_cfg: AudioConfig = DEFAULT_AUDIO,
    workers: int = 1,
    embeddings_dir: str | os.PathLike | None = None,
) -> DatasetIndex:
    """Write per-utterance mel and unit files plus ``index.jsonl``; unreadable audio is skipped.

    With ``embeddings_dir`` the units come from ``<id>.emb`` files there
    (an imported encoder) rather than from the waveform.
    """
    entries = manifest if isinstance(manifest, list) else read_manifest(manifest)
    if not entries:
        raise DomainError("manifest is empty")
    out = Path(out_dir)
    (out / "mels").mkdir(parents=True, exist_ok=True)
    (out / "units").mkdir(parents=True, exist_ok=True)

    jobs = [(e, enc, cb, out, audio_cfg, embeddings_dir) for e in entries]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_prepare_one, jobs))
    else:
        results = [_prepare_one(j) for j in jobs]

    index = DatasetIndex(out, [])
    for entry, (item, err) in zip(entries, results):
        if item is None:
            log.warning("skipping %s (%s)", entry.utt_id, err)
            index.skipped.append((entry.utt_id, err))
        else:
            index.entries.append(item)
    with open(out / "index.jsonl", "w", encoding="utf-8") as f:
        for item in index.entries:
            f.write(json.dumps(item.to_record(), sort_keys=True) + "\n")
    return index


def read_index(data_dir: str | os.PathLike) -> list[IndexEntry]:
    path = Path(data_dir) / "index.jsonl"
    if not path.is_file():
        raise FileNotFoundError(f"no dataset index at {path}")
    out = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            if line.strip():
                r = json.loads(line)
                out.append(IndexEntry(r["id"], r["mel_path"], r["units_path"], int(r["frames"]), int(r["unit_count"])))
    return out


def load_training_set(data_dir: str | os.PathLike) -> list[Utterance]:
    root = Path(data_dir)
    data = []
    for e in read_index(root):
        mel = load_mel(root / e.mel_path)
        _, units = parse_unit_record((root / e.units_path).read_text(encoding="utf-8").strip())
        data.append(Utterance(e.utt_id, mel.frames, units.units))
    return data


def build_training_set(
    waveforms: dict[str, Waveform], enc: EncoderSpec, cb: Codebook, audio_cfg: AudioConfig = DEFAULT_AUDIO
) -> list[Utterance]:
    """In-memory counterpart of :func:`prepare_training_set`."""
    data = []
    for utt_id, w in waveforms.items():
        w = to_model_rate(w, audio_cfg)
        data.append(Utterance(utt_id, log_mel(w, audio_cfg).frames, encode_to_units(w, enc, cb, audio_cfg).units))
    return data

