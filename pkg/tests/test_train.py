from __future__ import annotations

import numpy as np
import pytest

from ezvc.decoder import DecoderConfig, TrainConfig
from ezvc.decoder.train import Utterance, draw_items, lr_factor, make_batch, moving_average
from ezvc.errors import ConfigError, ContractError, DomainError

CFG = DecoderConfig(vocab_size=12)


def utt(name, frames, units):
    return Utterance(name, np.full((frames, 80), float(frames), np.float32), np.asarray(units))


def test_make_batch_layout():
    rng = np.random.default_rng(0)
    batch = make_batch([utt("a", 10, [1, 2, 3]), utt("b", 6, [4, 5])], CFG, rng)
    assert batch.mel.shape == (2, 10, 80)
    assert batch.token_ids[0].tolist() == [1, 2, 3] + [CFG.filler_id] * 7
    assert batch.token_ids[1].tolist() == [4, 5] + [CFG.filler_id] * 4 + [CFG.pad_id] * 4
    assert batch.lengths.tolist() == [10, 6]
    assert not batch.mask[1, 6:].any()
    for row, n in zip(batch.mask.numpy(), (10, 6)):
        idx = np.flatnonzero(row)
        assert idx[-1] - idx[0] + 1 == len(idx)
        assert 0.7 * n - 1 <= len(idx) <= n
    assert np.all(batch.mel[1, 6:].numpy() == 0)


def test_make_batch_guards():
    rng = np.random.default_rng(0)
    with pytest.raises(ContractError):
        make_batch([utt("a", 2, [1, 2, 3])], CFG, rng)
    with pytest.raises(DomainError):
        make_batch([], CFG, rng)


def test_draw_items_concat():
    data = [utt(f"u{i}", 5 + i, [i]) for i in range(4)]
    rng = np.random.default_rng(0)
    plain = draw_items(data, 3, 0.0, rng)
    assert len(plain) == 3 and all("+" not in u.utt_id for u in plain)
    joined = draw_items(data, 4, 1.0, rng)
    assert all("+" in u.utt_id for u in joined)
    for u in joined:
        a, b = u.utt_id.split("+")
        assert u.frames == data[int(a[1:])].frames + data[int(b[1:])].frames
        assert u.units.tolist() == [int(a[1:]), int(b[1:])]
        assert u.prompt_frames == data[int(a[1:])].frames


def test_joined_items_mask_after_prompt():
    a, b = utt("a", 7, [1, 2]), utt("b", 5, [3])
    joined = draw_items([a, b], 2, 1.0, np.random.default_rng(3))
    batch = make_batch(joined, CFG, np.random.default_rng(0))
    for row, u in zip(batch.mask.numpy(), joined):
        assert not row[: u.prompt_frames].any()
        assert row[u.prompt_frames : u.frames].all()
        assert not row[u.frames :].any()


def test_lr_schedule():
    tc = TrainConfig(warmup_steps=10, total_steps=110, final_lr_frac=0.01)
    assert lr_factor(0, tc) == pytest.approx(0.1)
    assert lr_factor(9, tc) == pytest.approx(1.0)
    assert lr_factor(10, tc) == pytest.approx(1.0)
    assert lr_factor(60, tc) == pytest.approx(0.505)
    assert lr_factor(110, tc) == pytest.approx(0.01)
    assert lr_factor(500, tc) == pytest.approx(0.01)


def test_train_config_guards():
    with pytest.raises(ConfigError):
        TrainConfig(lr=0)
    with pytest.raises(ConfigError):
        TrainConfig(concat_prob=1.5)


def test_moving_average():
    np.testing.assert_allclose(moving_average([1, 2, 3, 4], 2), [1.5, 2.5, 3.5])
    np.testing.assert_allclose(moving_average([1, 3], 5), [2.0])
