"""Command-line entry point (``ezvc``).

Errors end the process with a single JSON line on stderr,
``{"error": {"kind": ..., "message": ...}}``.  Exit codes: 0 success,
1 partial success, 2 usage or artifact error, 3 internal error.  Files and
directories a failing command created are removed.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import shutil
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path


from .audio import load_waveform, save_mel, save_waveform, to_model_rate
from .config import RunConfig, load_config
from .encoder import EncoderSpec, embed, export_embeddings, import_embeddings
from .errors import ArtifactMissingError, ConfigError, DataError, EzvcError
from .pipeline import ConversionRequest, ManifestEntry, convert, encode_to_units, prepare_training_set, read_manifest, write_manifest
from .quantizer import Codebook, load_codebook, save_codebook, train_kmeans
from .units import unit_record
from .vocoder import VocoderSpec

log = logging.getLogger("ezvc")

EXIT_OK, EXIT_PARTIAL, EXIT_USAGE, EXIT_INTERNAL = 0, 1, 2, 3


class UsageError(EzvcError):
    kind = "usage"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


class Outputs:
    """Tracks outputs a command creates so a failure can remove them."""

    def __init__(self):
        self._created: list[Path] = []

    def file(self, path: str | os.PathLike) -> Path:
        path = Path(path)
        if not path.exists():
            self._created.append(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        return path

    def directory(self, path: str | os.PathLike) -> Path:
        path = Path(path)
        if not path.exists():
            self._created.append(path)
        path.mkdir(parents=True, exist_ok=True)
        return path

    def cleanup(self) -> None:
        for path in reversed(self._created):
            if path.is_dir():
                shutil.rmtree(path, ignore_errors=True)
            else:
                path.unlink(missing_ok=True)
            part = path.with_name(path.name + ".part")
            part.unlink(missing_ok=True)


# ---------------------------------------------------------------- helpers


def _config(args) -> RunConfig:
    cfg = load_config(getattr(args, "config", None), getattr(args, "preset", None))
    # explicit flags win over the file; each flag names its config key
    for flag, (section, key) in FLAG_KEYS.items():
        value = getattr(args, flag, None)
        if value is not None:
            parts = {section: dataclasses.replace(getattr(cfg, section), **{key: value})}
            if (section, key) == ("kmeans", "k"):
                parts["decoder"] = dataclasses.replace(cfg.decoder, vocab_size=value + 2)
            cfg = dataclasses.replace(cfg, **parts)
    return cfg


# flag dest -> (section, key)
FLAG_KEYS = {
    "k": ("kmeans", "k"),
    "max_iters": ("kmeans", "max_iters"),
    "rel_tol": ("kmeans", "rel_tol"),
    "max_frames": ("kmeans", "max_frames"),
    "encoder": ("encoder", "kind"),
    "encoder_dim": ("encoder", "dim"),
    "layer_index": ("encoder", "layer_index"),
    "steps": ("sampler", "steps"),
    "guidance_w": ("sampler", "guidance_w"),
    "sway_s": ("sampler", "sway_s"),
    "gl_iters": ("vocoder", "gl_iters"),
    "total_steps": ("train", "total_steps"),
    "batch_size": ("train", "batch_size"),
    "lr": ("train", "lr"),
}


def _vocoder(cfg: RunConfig, args) -> VocoderSpec:
    cmd = getattr(args, "vocoder_cmd", None)
    if cmd:
        return dataclasses.replace(cfg.vocoder, kind="external", external_cmd=cmd)
    return cfg.vocoder


def _encoder_for(cb: Codebook, cfg: RunConfig) -> EncoderSpec:
    tag = cb.meta.get("encoder") if cb.meta else None
    return EncoderSpec.from_tag(tag) if tag else cfg.encoder


def _load_codebook(path) -> Codebook:
    if not Path(path).is_file():
        raise ArtifactMissingError(f"codebook not found: {path}")
    return load_codebook(path)


def _load_model(path):
    from .decoder.checkpoint import load_checkpoint

    return load_checkpoint(path, with_optimizer=False).model


def _workers(n: int):
    return n if n and n > 1 else 1


# ---------------------------------------------------------------- commands


def cmd_prep_manifest(args, out: Outputs) -> int:
    root = Path(args.directory)
    if not root.is_dir():
        raise ArtifactMissingError(f"not a directory: {root}")
    wavs = sorted(p for p in root.rglob("*") if p.suffix.lower() == ".wav")
    if not wavs:
        raise ConfigError(f"no .wav files under {root}")
    manifest = out.file(args.output)
    base = manifest.resolve().parent
    entries, seen = [], set()
    for p in wavs:
        utt_id = "__".join(p.relative_to(root).with_suffix("").parts)
        if utt_id in seen:
            raise ConfigError(f"duplicate utterance id {utt_id}")
        seen.add(utt_id)
        audio = p.resolve()
        # relative to the manifest when the audio lives beneath it
        if audio.is_relative_to(base):
            audio = audio.relative_to(base)
        entries.append(ManifestEntry(utt_id, audio, args.language))
    write_manifest(entries, manifest)
    log.info("wrote %d entries to %s", len(entries), manifest)
    return EXIT_OK


def _extract_one(job):
    entry, spec, audio_cfg, out_dir = job
    try:
        w = to_model_rate(load_waveform(entry.audio_path), audio_cfg)
        export_embeddings(embed(w, spec, audio_cfg), Path(out_dir) / f"{entry.utt_id}.emb")
    except (OSError, EzvcError) as exc:
        return f"{type(exc).__name__}: {exc}"
    return None


def cmd_extract_embeddings(args, out: Outputs) -> int:
    cfg = _config(args)
    spec = dataclasses.replace(cfg.encoder, seed=args.seed)
    if spec.kind != "surrogate":
        raise ConfigError("only the surrogate encoder extracts from audio; imported embeddings are written by the external model")
    entries = read_manifest(args.manifest)
    out_dir = out.directory(args.output)
    jobs = [(e, spec, cfg.audio, out_dir) for e in entries]
    if _workers(args.workers) > 1:
        with ProcessPoolExecutor(args.workers) as pool:
            errors = list(pool.map(_extract_one, jobs))
    else:
        errors = [_extract_one(j) for j in jobs]
    failed = [(e.utt_id, err) for e, err in zip(entries, errors) if err]
    for utt_id, err in failed:
        log.warning("skipping %s (%s)", utt_id, err)
    if len(failed) == len(entries):
        raise DataError("no utterance could be embedded")
    return EXIT_PARTIAL if failed else EXIT_OK


def cmd_train_kmeans(args, out: Outputs) -> int:
    cfg = _config(args)
    files = sorted(Path(args.embeddings).glob("*.emb"))
    if not files:
        raise ArtifactMissingError(f"no .emb files in {args.embeddings}")
    embs = [import_embeddings(f) for f in files]
    tags = {e.source_tag for e in embs}
    if len(tags) != 1:
        raise ConfigError(f"embeddings come from different encoders: {sorted(tags)}")
    km = cfg.kmeans
    cb = train_kmeans(
        [e.vectors for e in embs], k=km.k, seed=args.seed, max_iters=km.max_iters, rel_tol=km.rel_tol,
        max_frames=km.max_frames, trained_on=f"{len(files)} files from {Path(args.embeddings).name}",
    )
    cb.meta = {"encoder": tags.pop()}
    save_codebook(cb, out.file(args.output))
    return EXIT_OK


def cmd_encode_units(args, out: Outputs) -> int:
    cfg = _config(args)
    cb = _load_codebook(args.codebook)
    enc = _encoder_for(cb, cfg)
    entries = read_manifest(args.manifest)
    path = out.file(args.output)
    failures = 0
    with open(path, "w", encoding="utf-8") as f:
        for e in entries:
            try:
                emb = None
                if args.embeddings:
                    emb = import_embeddings(Path(args.embeddings) / f"{e.utt_id}.emb", cb.dim)
                w = None if emb is not None else to_model_rate(load_waveform(e.audio_path), cfg.audio)
                units = encode_to_units(w, enc, cb, cfg.audio, embeddings=emb)
            except (OSError, EzvcError) as exc:
                failures += 1
                log.warning("skipping %s (%s)", e.utt_id, exc)
                continue
            f.write(unit_record(e.utt_id, units) + "\n")
    if failures == len(entries):
        raise DataError("no utterance could be encoded")
    return EXIT_PARTIAL if failures else EXIT_OK


def cmd_prepare_data(args, out: Outputs) -> int:
    cfg = _config(args)
    cb = _load_codebook(args.codebook)
    enc = _encoder_for(cb, cfg)
    out_dir = out.directory(args.output)
    index = prepare_training_set(args.manifest, enc, cb, out_dir, cfg.audio, _workers(args.workers), args.embeddings)
    if not index.entries:
        raise DataError("every manifest entry was skipped")
    log.info("prepared %d utterances (%d skipped)", len(index.entries), len(index.skipped))
    return EXIT_PARTIAL if index.skipped else EXIT_OK


def cmd_train_decoder(args, out: Outputs) -> int:
    from .decoder.checkpoint import load_checkpoint
    from .decoder.train import train_decoder
    from .pipeline import load_training_set

    cfg = _config(args)
    if cfg.preset == "paper" and not args.acknowledge_scale:
        raise UsageError(
            "the paper preset trains a 22-layer decoder for 1.35M updates at batch 64; "
            "pass --acknowledge-scale to proceed, or use --preset desk"
        )
    data = load_training_set(args.data)
    top = max((int(u.units.max()) for u in data if u.units.size), default=-1)
    if top >= cfg.decoder.k_units:
        raise ConfigError(f"data contains unit {top} but the decoder vocabulary has {cfg.decoder.k_units} units")
    ckpt_dir = out.directory(args.output)
    model = optimizer = None
    start = 0
    if args.resume:
        ck = load_checkpoint(args.resume)
        if ck.model.config != cfg.decoder:
            raise ConfigError("resumed checkpoint's decoder config differs from the run config")
        model, optimizer, start = ck.model, ck.optimizer, ck.step
    result = train_decoder(
        data, cfg.decoder, cfg.train, args.seed, model=model, optimizer=optimizer, start_step=start,
        out_dir=ckpt_dir, max_steps=args.max_steps,
    )
    log.info("trained to step %d; checkpoint in %s", result.step, ckpt_dir)
    return EXIT_OK


def _run_conversion(args, out: Outputs, source_path, target_path) -> int:
    cfg = _config(args)
    model = _load_model(args.ckpt)
    cb = _load_codebook(args.codebook)
    enc = _encoder_for(cb, cfg)
    s = cfg.sampler
    req = ConversionRequest(
        load_waveform(source_path), load_waveform(target_path), steps=s.steps, guidance_w=s.guidance_w,
        sway_s=s.sway_s, seed=args.seed,
    )
    result = convert(req, model, cb, enc, _vocoder(cfg, args), cfg.audio)
    save_waveform(result.audio, out.file(args.output))
    if args.dump_mel:
        save_mel(result.generated_mel, out.file(args.dump_mel))
    return EXIT_OK


def cmd_convert(args, out: Outputs) -> int:
    return _run_conversion(args, out, args.source, args.target)


def cmd_resynth(args, out: Outputs) -> int:
    return _run_conversion(args, out, args.audio, args.audio)


def cmd_eval_batch(args, out: Outputs) -> int:
    from functools import partial

    from .evaluation import eval_batch, external_speaker_embedding, proxy_speaker_embedding

    cfg = _config(args)
    model = _load_model(args.ckpt)
    cb = _load_codebook(args.codebook)
    speaker_cmd = args.speaker_cmd or cfg.eval.speaker_cmd
    speaker = proxy_speaker_embedding
    if speaker_cmd:
        speaker = partial(external_speaker_embedding, command=speaker_cmd, tag=cfg.eval.speaker_tag)
    report_path = out.file(args.output)
    out.file(report_path.with_suffix(".txt"))
    s = cfg.sampler
    report = eval_batch(
        args.pairs, model, cb, _encoder_for(cb, cfg), _vocoder(cfg, args), report_path,
        seed=args.seed, steps=s.steps, guidance_w=s.guidance_w, sway_s=s.sway_s, speaker_embed=speaker,
    )
    if report.exit_status == 2:
        raise DataError(f"all {len(report.rows)} pairs failed; see {report_path}")
    return report.exit_status


# ---------------------------------------------------------------- parser


def _add_config(p):
    p.add_argument("--config", help="YAML or JSON run config applied on top of the preset")
    p.add_argument("--preset", choices=("desk", "paper"), help="base preset (default: the config's, else desk)")


def _add_seed(p, what):
    p.add_argument("--seed", type=int, required=True, help=f"seed for {what}")


def _add_workers(p):
    p.add_argument("--workers", type=int, default=1, help="parallel worker processes over files (default 1)")


def _add_sampling(p):
    p.add_argument("--ckpt", required=True, help="decoder checkpoint file or directory holding model.ezckpt")
    p.add_argument("--codebook", required=True, help="k-means codebook (.ezkm)")
    p.add_argument("--steps", type=int, help="ODE steps (sampler.steps)")
    p.add_argument("--guidance-w", type=float, help="classifier-free guidance weight (sampler.guidance_w)")
    p.add_argument("--sway-s", type=float, help="sway coefficient of the time schedule (sampler.sway_s)")
    p.add_argument("--gl-iters", type=int, help="Griffin-Lim iterations (vocoder.gl_iters)")
    p.add_argument("--vocoder-cmd", help="external vocoder command, called as CMD in.mel out.wav")
    _add_seed(p, "the sampler's initial noise")
    _add_config(p)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ezvc", description="Unit-based zero-shot voice conversion toolkit.")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("prep-manifest", help="scan a directory for WAV files and write a manifest")
    p.add_argument("directory")
    p.add_argument("-o", "--output", required=True, help="manifest path (JSON lines)")
    p.add_argument("--language", help="language tag stored on every entry")
    p.set_defaults(func=cmd_prep_manifest)

    p = sub.add_parser("extract-embeddings", help="write per-utterance frame embeddings")
    p.add_argument("manifest")
    p.add_argument("--encoder", choices=("surrogate",), help="encoder kind (encoder.kind)")
    p.add_argument("--encoder-dim", type=int, help="embedding dimension (encoder.dim)")
    p.add_argument("--layer-index", type=int, help="recorded encoder layer (encoder.layer_index)")
    p.add_argument("-o", "--output", required=True, help="output directory of <id>.emb files")
    _add_seed(p, "the surrogate projection (encoder.seed)")
    _add_workers(p)
    _add_config(p)
    p.set_defaults(func=cmd_extract_embeddings)

    p = sub.add_parser("train-kmeans", help="cluster embeddings into a codebook")
    p.add_argument("embeddings", help="directory of .emb files")
    p.add_argument("-k", type=int, help="number of clusters (kmeans.k)")
    p.add_argument("--max-iters", type=int, help="Lloyd iteration cap (kmeans.max_iters)")
    p.add_argument("--rel-tol", type=float, help="relative inertia improvement to stop at (kmeans.rel_tol)")
    p.add_argument("--max-frames", type=int, help="subsample this many frames before clustering (kmeans.max_frames)")
    p.add_argument("-o", "--output", required=True, help="codebook path")
    _add_seed(p, "k-means++ seeding and frame subsampling")
    _add_config(p)
    p.set_defaults(func=cmd_train_kmeans)

    p = sub.add_parser("encode-units", help="quantise and deduplicate every manifest entry")
    p.add_argument("manifest")
    p.add_argument("--codebook", required=True)
    p.add_argument("--embeddings", help="directory of precomputed <id>.emb files (imported encoder)")
    p.add_argument("-o", "--output", required=True, help="units file (JSON lines)")
    _add_workers(p)
    _add_config(p)
    p.set_defaults(func=cmd_encode_units)

    p = sub.add_parser("prepare-data", help="write mels, units and an index for decoder training")
    p.add_argument("manifest")
    p.add_argument("--codebook", required=True)
    p.add_argument("--embeddings", help="directory of precomputed <id>.emb files (imported encoder)")
    p.add_argument("-o", "--output", required=True, help="dataset directory")
    _add_workers(p)
    _add_config(p)
    p.set_defaults(func=cmd_prepare_data)

    p = sub.add_parser("train-decoder", help="train the units-to-mel decoder")
    p.add_argument("data", help="dataset directory written by prepare-data")
    p.add_argument("-o", "--output", required=True, help="checkpoint directory")
    p.add_argument("--total-steps", type=int, help="schedule length in updates (train.total_steps)")
    p.add_argument("--batch-size", type=int, help="utterances per update (train.batch_size)")
    p.add_argument("--lr", type=float, help="peak learning rate (train.lr)")
    p.add_argument("--max-steps", type=int, help="stop after this many updates in this run")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--acknowledge-scale", action="store_true", help="allow the paper-scale preset to start")
    _add_seed(p, "initialisation, batching, masks and noise")
    _add_config(p)
    p.set_defaults(func=cmd_train_decoder)

    p = sub.add_parser("convert", help="convert source speech to the target voice")
    p.add_argument("--source", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("-o", "--output", required=True, help="output WAV")
    p.add_argument("--dump-mel", help="also write the generated mel")
    _add_sampling(p)
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("resynth", help="self-conversion: source and target are the same audio")
    p.add_argument("--audio", required=True)
    p.add_argument("-o", "--output", required=True, help="output WAV")
    p.add_argument("--dump-mel", help="also write the generated mel")
    _add_sampling(p)
    p.set_defaults(func=cmd_resynth)

    p = sub.add_parser("eval-batch", help="convert and score every pair of a pairs manifest")
    p.add_argument("pairs")
    p.add_argument("-o", "--output", required=True, help="report path (JSON lines; a .txt table is written beside it)")
    p.add_argument("--speaker-cmd", help="external speaker model, called as CMD in.wav out.txt (eval.speaker_cmd)")
    _add_sampling(p)
    p.set_defaults(func=cmd_eval_batch)
    return parser


def _error_record(kind: str, message: str) -> str:
    return json.dumps({"error": {"kind": kind, "message": message}})


def main(argv: list[str] | None = None) -> int:
    out = Outputs()
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(
            level=logging.WARNING - 10 * min(args.verbose + 1, 2), format="%(levelname)s %(name)s: %(message)s"
        )
        code = args.func(args, out)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except KeyboardInterrupt:
        out.cleanup()
        print(_error_record("interrupted", "interrupted"), file=sys.stderr)
        return EXIT_INTERNAL
    except (EzvcError, FileNotFoundError) as exc:
        out.cleanup()
        kind = getattr(exc, "kind", "artifact-missing")
        code = EXIT_INTERNAL if kind == "internal" else EXIT_USAGE
        print(_error_record(kind, str(exc)), file=sys.stderr)
        return code
    except Exception as exc:  # noqa: BLE001
        out.cleanup()
        print(_error_record("internal", f"{type(exc).__name__}: {exc}"), file=sys.stderr)
        return EXIT_INTERNAL
    return code


def main_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
