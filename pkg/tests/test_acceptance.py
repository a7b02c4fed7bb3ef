"""Acceptance suite: one test per criterion, each reporting PASS or FAIL.

The decoder-training criteria (5, 6, 7) share one desk-preset model trained
on the bundled corpus.  Training takes on the order of an hour or two on a
single CPU core.  Set ``EZVC_ACCEPTANCE_CACHE`` to a directory to keep the
trained model and its training record between runs.
"""

from __future__ import annotations

import json
import os
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from ezvc.audio import Waveform, load_mel, log_mel, save_mel, save_waveform
from ezvc.config import DESK_PRESET
from ezvc.decoder import TrainingBatch, UnitToMelDiT, DecoderConfig
from ezvc.decoder.checkpoint import load_checkpoint, save_checkpoint
from ezvc.decoder.flow import flow_matching_loss, ot_path, sample, sway_schedule
from ezvc.decoder.train import moving_average, train_decoder
from ezvc.encoder import embed, export_embeddings, import_embeddings
from ezvc.errors import FormatError
from ezvc.evaluation import cosine_similarity, mel_l1, proxy_speaker_embedding, unit_overlap
from ezvc.pipeline import ConversionRequest, build_training_set, convert, encode_to_units, resynthesize
from ezvc.quantizer import load_codebook, nearest, save_codebook, train_kmeans
from ezvc.synthetic import bundled_speakers
from ezvc.units import dedup

EVAL_EVERY = 500
MA_WINDOW = 100
CPU_BUDGET_S = 4 * 3600


def record(log: dict, n: int, ok: bool, detail: str) -> None:
    log[n] = (bool(ok), detail)
    print(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


# ---------------------------------------------------------------- 1


def test_criterion_1_unit_pipeline(acceptance_log):
    rng = np.random.default_rng(2024)
    tic = time.perf_counter()
    failures = 0
    for _ in range(1000):
        n = int(rng.integers(0, 60))
        seq = rng.integers(0, int(rng.integers(1, 8)), size=n)
        once = dedup(seq)
        twice = dedup(once)
        u = once.units
        ok = np.array_equal(twice.units, u)
        ok &= bool(np.all(u[1:] != u[:-1]))
        # the collapsed sequence is exactly the run heads, in order
        heads = seq[np.r_[True, seq[1:] != seq[:-1]]] if n else seq
        ok &= np.array_equal(u, heads)
        it = iter(seq.tolist())
        ok &= all(x in it for x in u.tolist())
        failures += not ok
    elapsed = time.perf_counter() - tic
    record(acceptance_log, 1, failures == 0 and elapsed < 5, f"{1000 - failures}/1000 sequences, {elapsed:.2f}s")


# ---------------------------------------------------------------- 2


def test_criterion_2_kmeans(acceptance_log):
    tic = time.perf_counter()
    x = np.random.default_rng(7).normal(size=(1000, 16))
    cb = train_kmeans(x, k=8, seed=0, max_iters=50, rel_tol=0.0)
    hist = np.array(cb.history)
    monotone = bool(np.all(np.diff(hist) <= 1e-12 * hist[:-1]))
    c = cb.centroids.astype(np.float64)
    oracle = np.array([int(np.argmin([float(np.sum((p - q) ** 2)) for q in c])) for p in x])
    labels, _ = nearest(x, c)
    matches = bool(np.array_equal(labels, oracle))

    one = train_kmeans(np.array([[0.0], [1.0], [10.0], [11.0]]), k=2, seed=0)
    cents = sorted(one.centroids[:, 0].tolist())
    tiny = cents == [0.5, 10.5] and one.inertia == 0.25
    elapsed = time.perf_counter() - tic
    ok = monotone and matches and tiny and elapsed < 30
    record(acceptance_log, 2, ok, f"monotone={monotone} oracle_match={matches} 1-D={cents} inertia={one.inertia} {elapsed:.1f}s")


# ---------------------------------------------------------------- 3


def _fd_model() -> UnitToMelDiT:
    cfg = DecoderConfig(layers=2, heads=2, model_dim=16, text_dim=8, vocab_size=10, conv_pos_groups=4, conv_pos_kernel=5)
    torch.manual_seed(5)
    model = UnitToMelDiT(cfg).to(torch.float64)
    g = torch.Generator().manual_seed(6)
    with torch.no_grad():
        for p in model.parameters():
            p.copy_(torch.randn(p.shape, generator=g, dtype=torch.float64) * 0.2)
    return model.eval()


def test_criterion_3_flow_math(acceptance_log):
    tic = time.perf_counter()
    g = torch.Generator().manual_seed(0)
    x0 = torch.randn(3, 8, 80, generator=g, dtype=torch.float64)
    x1 = torch.randn(3, 8, 80, generator=g, dtype=torch.float64)
    endpoints = torch.equal(ot_path(x0, x1, 0.0).xt, x0) and torch.equal(ot_path(x0, x1, 1.0).xt, x1)

    model = _fd_model()
    mel = torch.randn(2, 8, 80, generator=g, dtype=torch.float64)
    tokens = torch.tensor([[1, 2, 3, 4, 8, 8, 8, 8], [5, 6, 7, 8, 8, 8, 9, 9]])
    mask = torch.zeros(2, 8, dtype=torch.bool)
    mask[0, 2:7] = True
    mask[1, 1:5] = True
    batch = TrainingBatch(mel, tokens, mask, torch.tensor([8, 6]))
    fixed = dict(
        x0=torch.randn(2, 8, 80, generator=g, dtype=torch.float64),
        t=torch.tensor([0.3, 0.8], dtype=torch.float64),
        drop=torch.tensor([False, True]),
    )
    model.zero_grad()
    flow_matching_loss(model, batch, **fixed).backward()
    eps, worst, worst_name = 1e-6, 0.0, ""
    with torch.no_grad():
        for name, p in model.named_parameters():
            numeric = torch.zeros_like(p)
            flat, nflat = p.view(-1), numeric.view(-1)
            for i in range(flat.numel()):
                keep = flat[i].item()
                flat[i] = keep + eps
                up = flow_matching_loss(model, batch, **fixed).item()
                flat[i] = keep - eps
                down = flow_matching_loss(model, batch, **fixed).item()
                flat[i] = keep
                nflat[i] = (up - down) / (2 * eps)
            rel = (p.grad - numeric).norm().item() / max(numeric.norm().item(), 1e-8)
            if rel > worst:
                worst, worst_name = rel, name
    elapsed = time.perf_counter() - tic
    ok = endpoints and worst <= 1e-3 and elapsed < 300
    record(acceptance_log, 3, ok, f"endpoints exact={endpoints} worst rel grad err {worst:.2e} ({worst_name}) {elapsed:.0f}s")


# ---------------------------------------------------------------- 4


class _ConstantVelocity(torch.nn.Module):
    filler_id, pad_id = 8, 9

    def __init__(self, value: float):
        super().__init__()
        self.value = value
        self.anchor = torch.nn.Parameter(torch.zeros((), dtype=torch.float64))

    def forward(self, xt, cond, tokens, t, lengths=None):
        return torch.full_like(xt, self.value)


def test_criterion_4_sampler(acceptance_log):
    tic = time.perf_counter()
    tokens = torch.tensor([1, 2, 3, 8, 8, 8])
    # dyadic values make every Euler update exact in binary floating point
    noise = torch.randint(-64, 64, (1, 6, 80), generator=torch.Generator().manual_seed(1)).double() / 32
    empty = torch.zeros(0, 80, dtype=torch.float64)
    zero = sample(_ConstantVelocity(0.0), empty, tokens, 6, steps=32, guidance_w=2.0, sway_s=-1.0, noise=noise)
    zero_ok = torch.equal(zero, noise[0])
    const = sample(_ConstantVelocity(0.75), empty, tokens, 6, steps=32, guidance_w=2.0, sway_s=0.0, noise=noise)
    const_ok = torch.equal(const, noise[0] + 0.75)
    t = sway_schedule(32, -1.0)
    sched_ok = abs(t[0].item()) <= 1e-12 and abs(t[-1].item() - 1) <= 1e-12 and bool(torch.all(torch.diff(t) > 0))
    elapsed = time.perf_counter() - tic
    ok = zero_ok and const_ok and sched_ok and elapsed < 60
    record(acceptance_log, 4, ok, f"zero-velocity bitwise={zero_ok} constant exact={const_ok} schedule={sched_ok} {elapsed:.2f}s")


# ---------------------------------------------------------------- 5-7: shared trained model


def _resynth_all(model, waves, cb, enc, cfg):
    s = cfg.sampler
    out = {}
    for name, w in waves.items():
        out[name] = resynthesize(w, model, cb, enc, cfg.vocoder, seed=0, steps=s.steps, guidance_w=s.guidance_w, sway_s=s.sway_s)
    return out


def _mean_l1(results, waves) -> float:
    return float(np.mean([mel_l1(results[n].generated_mel, log_mel(waves[n])) for n in waves]))


@pytest.fixture(scope="module")
def trained(waves, enc, codebook):
    """Train the desk decoder until criterion 5 holds or the step budget runs out."""
    cfg = DESK_PRESET
    assert codebook.k == cfg.kmeans.k
    cache = os.environ.get("EZVC_ACCEPTANCE_CACHE")
    cache = Path(cache) if cache else None
    if cache is not None and (cache / "model.ezckpt").is_file() and (cache / "record.json").is_file():
        model = load_checkpoint(cache / "model.ezckpt", with_optimizer=False).model.eval()
        rec = json.loads((cache / "record.json").read_text())
        return model, rec, _resynth_all(model, waves, codebook, enc, cfg)

    data = build_training_set(waves, enc, codebook)
    torch.manual_seed(0)
    model = UnitToMelDiT(cfg.decoder)
    evals: list[dict] = []

    def stop(step: int, losses: list[float]) -> bool:
        if step % EVAL_EVERY and step != cfg.train.total_steps:
            return False
        ma = moving_average(losses, MA_WINDOW)
        l1 = _mean_l1(_resynth_all(model, waves, codebook, enc, cfg), waves)
        model.train()
        evals.append({"step": step, "ma_first": float(ma[0]), "ma_last": float(ma[-1]), "resynth_l1": l1})
        print("eval", json.dumps(evals[-1]), flush=True)
        return ma[-1] < 0.5 * ma[0] and l1 < 1.0

    tic = time.perf_counter()
    result = train_decoder(data, cfg.decoder, cfg.train, seed=0, model=model, stop=stop)
    elapsed = time.perf_counter() - tic
    model = result.model.eval()
    rec = {"steps": result.step, "train_seconds": elapsed, "evals": evals, "losses": result.losses}
    if cache is not None:
        cache.mkdir(parents=True, exist_ok=True)
        save_checkpoint(cache / "model.ezckpt", model, None, result.step)
        (cache / "record.json").write_text(json.dumps(rec))
    return model, rec, _resynth_all(model, waves, codebook, enc, cfg)


def test_criterion_5_overfit(acceptance_log, trained, waves):
    model, rec, results = trained
    ma = moving_average(rec["losses"], MA_WINDOW)
    ratio = float(ma[-1] / ma[0])
    l1 = _mean_l1(results, waves)
    ok = rec["steps"] <= 5000 and ratio < 0.5 and l1 < 1.0 and rec["train_seconds"] < CPU_BUDGET_S
    record(
        acceptance_log, 5, ok,
        f"steps={rec['steps']} loss MA ratio={ratio:.3f} resynth L1={l1:.3f} train {rec['train_seconds'] / 60:.0f} min",
    )


PAIRS = [("spk0_utt0", "spk1_utt1"), ("spk3_utt0", "spk4_utt1"), ("spk2_utt1", "spk0_utt1")]


def test_criterion_6_conversion_recipe(acceptance_log, trained, waves, enc, codebook, tmp_path):
    model, _, _ = trained
    problems = []
    worst = 0.0
    for src, tgt in PAIRS:
        tic = time.perf_counter()
        req = ConversionRequest(waves[src], waves[tgt], seed=11)
        a = convert(req, model, codebook, enc)
        b = convert(req, model, codebook, enc)
        worst = max(worst, time.perf_counter() - tic)
        if a.generated_mel.num_frames != log_mel(waves[src]).num_frames:
            problems.append(f"{src}: {a.generated_mel.num_frames} frames vs {log_mel(waves[src]).num_frames}")
        ratio = a.audio.duration / waves[src].duration
        if abs(ratio - 1) > 0.05:
            problems.append(f"{src}: duration ratio {ratio:.3f}")
        for r, tag in ((a, "a"), (b, "b")):
            save_waveform(r.audio, tmp_path / f"{src}_{tag}.wav")
        if (tmp_path / f"{src}_a.wav").read_bytes() != (tmp_path / f"{src}_b.wav").read_bytes():
            problems.append(f"{src}: reruns differ")
        if a.generated_mel.frames.tobytes() != b.generated_mel.frames.tobytes():
            problems.append(f"{src}: mels differ")
    ok = not problems and worst < 60
    record(acceptance_log, 6, ok, f"{len(PAIRS)} pairs, slowest {worst:.1f}s for two runs" + (f"; {problems}" if problems else ""))


def test_criterion_7_speaker_ordering(acceptance_log, trained, waves):
    _, _, results = trained
    tic = time.perf_counter()
    speakers = bundled_speakers()
    names = sorted(waves)
    own, other = [], []
    for n in names:
        out = proxy_speaker_embedding(results[n].audio)
        # an utterance of a different speaker with the same index
        spk = int(speakers[n][3:])
        unrelated = f"spk{(spk + 2) % 5}_{n.split('_')[1]}"
        own.append(cosine_similarity(out, proxy_speaker_embedding(waves[n])))
        other.append(cosine_similarity(out, proxy_speaker_embedding(waves[unrelated])))
    elapsed = time.perf_counter() - tic
    ok = np.mean(own) > np.mean(other) and elapsed < 600
    record(acceptance_log, 7, ok, f"mean cosine to target {np.mean(own):.4f} vs unrelated {np.mean(other):.4f}")


def test_resynthesis_self_consistency(trained, waves, enc, codebook):
    """Re-encoded resynthesis overlaps its own units more than another utterance's."""
    _, _, results = trained
    names = sorted(waves)
    own, cross = [], []
    for i, n in enumerate(names):
        units = encode_to_units(results[n].audio, enc, codebook)
        own.append(unit_overlap(units, results[n].source_units))
        other = names[(i + 1) % len(names)]
        cross.append(unit_overlap(units, results[other].source_units))
    print(f"unit overlap own {np.mean(own):.3f} vs cross {np.mean(cross):.3f}")
    assert np.mean(own) > np.mean(cross)


# ---------------------------------------------------------------- 8


def _rejects(path: Path, loader) -> bool:
    raw = path.read_bytes()
    bad_magic = path.with_name("magic_" + path.name)
    bad_magic.write_bytes(b"XXXX" + raw[4:])
    short = path.with_name("short_" + path.name)
    short.write_bytes(raw[: len(raw) - 7])
    ok = True
    for p in (bad_magic, short):
        try:
            loader(p)
            ok = False
        except FormatError:
            pass
    return ok


def test_criterion_8_serialization(acceptance_log, waves, enc, tmp_path):
    tic = time.perf_counter()
    w = waves["spk1_utt0"]
    checks = {}

    cb = train_kmeans(np.random.default_rng(0).normal(size=(300, 8)), k=5, seed=0)
    save_codebook(cb, tmp_path / "a.ezkm")
    cb2 = load_codebook(tmp_path / "a.ezkm")
    save_codebook(cb2, tmp_path / "b.ezkm")
    checks["codebook"] = (
        cb2.centroids.tobytes() == cb.centroids.tobytes()
        and (tmp_path / "a.ezkm").read_bytes() == (tmp_path / "b.ezkm").read_bytes()
        and _rejects(tmp_path / "a.ezkm", load_codebook)
    )

    emb = embed(w, enc)
    export_embeddings(emb, tmp_path / "a.emb")
    emb2 = import_embeddings(tmp_path / "a.emb")
    checks["embedding"] = emb2.vectors.tobytes() == emb.vectors.tobytes() and _rejects(tmp_path / "a.emb", import_embeddings)

    mel = log_mel(w)
    save_mel(mel, tmp_path / "a.mel")
    mel2 = load_mel(tmp_path / "a.mel")
    checks["mel"] = mel2.frames.tobytes() == mel.frames.tobytes() and _rejects(tmp_path / "a.mel", load_mel)

    torch.manual_seed(0)
    cfg = DecoderConfig(layers=1, heads=2, model_dim=32, text_dim=16, vocab_size=66, conv_pos_groups=4)
    model = UnitToMelDiT(cfg)
    opt = torch.optim.AdamW(model.parameters(), lr=1e-3)
    model(torch.randn(1, 5, 80), torch.zeros(1, 5, 80), torch.zeros(1, 5, dtype=torch.long), torch.rand(1)).sum().backward()
    opt.step()
    save_checkpoint(tmp_path / "a.ezckpt", model, opt, 1)
    ck = load_checkpoint(tmp_path / "a.ezckpt")
    same = all(torch.equal(a, b) for a, b in zip(model.state_dict().values(), ck.model.state_dict().values()))
    st1, st2 = opt.state_dict()["state"], ck.optimizer.state_dict()["state"]
    same &= all(torch.equal(st1[i][k], st2[i][k]) for i in st1 for k in st1[i])
    checks["checkpoint"] = same and _rejects(tmp_path / "a.ezckpt", load_checkpoint)

    elapsed = time.perf_counter() - tic
    ok = all(checks.values()) and elapsed < 10
    record(acceptance_log, 8, ok, " ".join(f"{k}={v}" for k, v in checks.items()) + f" {elapsed:.2f}s")


# ---------------------------------------------------------------- 9


def test_criterion_9_frame_rates(acceptance_log, enc):
    tic = time.perf_counter()
    w = Waveform(np.random.default_rng(0).normal(scale=0.1, size=16000), 16000)
    n_mel = log_mel(w).num_frames
    n_emb = embed(w, enc).num_frames
    elapsed = time.perf_counter() - tic
    ok = abs(n_mel - 100) <= 1 and abs(n_emb - 50) <= 1 and elapsed < 5
    record(acceptance_log, 9, ok, f"1 s audio: {n_mel} mel frames, {n_emb} embedding frames")
