"""Discrete-unit post-processing: run collapsing, token vocabulary, unit files."""

from __future__ import annotations

import json
import os
from collections.abc import Iterable, Iterator
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, FormatError
from .quantizer import UnitSequence


@dataclass(frozen=True)
class UnitVocabulary:
    """Unit ``u`` is token ``u``; FILLER and PAD follow the unit range."""

    k_units: int = 500
    specials: tuple[str, ...] = ("FILLER", "PAD")

    @property
    def total_size(self) -> int:
        return self.k_units + len(self.specials)

    @property
    def filler(self) -> int:
        return self.k_units + self.specials.index("FILLER")

    @property
    def pad(self) -> int:
        return self.k_units + self.specials.index("PAD")


def dedup(seq: UnitSequence | Iterable[int]) -> UnitSequence:
    if isinstance(seq, UnitSequence):
        units = seq.units
    else:
        units = np.asarray(list(seq), dtype=np.int64).reshape(-1)
    if units.size == 0:
        return UnitSequence(units, deduped=True)
    keep = np.ones(units.shape[0], dtype=bool)
    keep[1:] = units[1:] != units[:-1]
    return UnitSequence(units[keep], deduped=True)


def to_tokens(seq: UnitSequence, vocab: UnitVocabulary, target_len: int) -> np.ndarray:
    """Unit ids followed by FILLER up to ``target_len``."""
    units = seq.units
    if target_len < units.shape[0]:
        raise ContractError(f"target_len {target_len} is shorter than the {units.shape[0]} units")
    if units.size and (units.min() < 0 or units.max() >= vocab.k_units):
        raise ContractError(f"unit ids must lie in [0, {vocab.k_units})")
    out = np.full(target_len, vocab.filler, dtype=np.int64)
    out[: units.shape[0]] = units
    return out


def concat(*seqs: UnitSequence) -> UnitSequence:
    """Join sequences end to end without collapsing across the seams.

    The result keeps the deduped flag only if every part had it and no seam
    joins two equal units.
    """
    parts = [s.units for s in seqs if len(s)]
    joined = np.concatenate(parts) if parts else np.zeros(0, np.int64)
    seams_clean = all(a[-1] != b[0] for a, b in zip(parts, parts[1:]))
    return UnitSequence(joined, deduped=all(s.deduped for s in seqs) and seams_clean)


def unit_record(utt_id: str, seq: UnitSequence) -> str:
    return json.dumps({"id": utt_id, "deduped": bool(seq.deduped), "units": seq.tolist()}, separators=(",", ":"))


def parse_unit_record(line: str) -> tuple[str, UnitSequence]:
    try:
        rec = json.loads(line)
        return str(rec["id"]), UnitSequence(rec["units"], deduped=bool(rec["deduped"]))
    except (json.JSONDecodeError, KeyError, TypeError, ContractError) as exc:
        raise FormatError(f"bad unit record: {exc}") from None


def write_unit_file(path: str | os.PathLike, records: Iterable[tuple[str, UnitSequence]]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for utt_id, seq in records:
            f.write(unit_record(utt_id, seq) + "\n")


def read_unit_file(path: str | os.PathLike) -> Iterator[tuple[str, UnitSequence]]:
    with open(path, encoding="utf-8") as f:
        for line in f:
            if line.strip():
                yield parse_unit_record(line)
