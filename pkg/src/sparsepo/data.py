"""Synthetic preference data with known cue tokens.

Preference is carried entirely by a few "cue" tokens: chosen responses hold
positive cues, rejected ones negative cues, both padded out with filler. A
bag-of-cues rule gives an exact ground-truth reward.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

DATASET_FORMAT = "sparsepo-pairs"
SFT_FORMAT = "sparsepo-sft"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class VocabSpec:
    vocab_size: int = 64
    positive_cues: tuple = tuple(range(3, 11))
    negative_cues: tuple = tuple(range(11, 19))
    bos: int = 1
    eos: int = 2
    pad: int = 0

    def __post_init__(self):
        object.__setattr__(self, "positive_cues", tuple(int(t) for t in self.positive_cues))
        object.__setattr__(self, "negative_cues", tuple(int(t) for t in self.negative_cues))
        if not self.positive_cues or not self.negative_cues:
            raise ValueError("cue sets must be non-empty")
        pos, neg, special = set(self.positive_cues), set(self.negative_cues), set(self.special)
        if len(special) != 3:
            raise ValueError("bos, eos and pad must be distinct")
        if pos & neg:
            raise ValueError(f"positive and negative cues overlap: {sorted(pos & neg)}")
        if (pos | neg) & special:
            raise ValueError(f"cue ids collide with special ids: {sorted((pos | neg) & special)}")
        ids = pos | neg | special
        if min(ids) < 0 or max(ids) >= self.vocab_size:
            raise ValueError(f"token ids must lie in [0, {self.vocab_size})")
        if not self.filler:
            raise ValueError("no filler ids left in the vocabulary")

    @property
    def special(self) -> tuple:
        return (self.bos, self.eos, self.pad)

    @property
    def filler(self) -> tuple:
        used = set(self.positive_cues) | set(self.negative_cues) | set(self.special)
        return tuple(t for t in range(self.vocab_size) if t not in used)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "VocabSpec":
        return cls(**d)


@dataclass
class PreferencePair:
    prompt: list
    chosen: list
    rejected: list
    chosen_score: float
    rejected_score: float

    def to_record(self) -> dict:
        return {"prompt": list(map(int, self.prompt)), "chosen": list(map(int, self.chosen)),
                "rejected": list(map(int, self.rejected)),
                "chosen_score": float(self.chosen_score),
                "rejected_score": float(self.rejected_score)}


def ground_truth_reward(y: Sequence[int], spec: VocabSpec) -> float:
    """(1 + (n_pos - n_neg) / len) / 2 over the non-special tokens of ``y``."""
    special = set(spec.special)
    toks = [int(t) for t in y if int(t) not in special]
    if not toks:
        raise ValueError("ground_truth_reward: empty sequence")
    pos, neg = set(spec.positive_cues), set(spec.negative_cues)
    n_pos = sum(t in pos for t in toks)
    n_neg = sum(t in neg for t in toks)
    return (1.0 + (n_pos - n_neg) / len(toks)) / 2.0


def _response(rng: np.random.Generator, cues: tuple, filler: tuple, length: int,
              cue_density: float, eos: int | None) -> list:
    n_cue = min(length, max(1, int(round(cue_density * length))))
    toks = rng.choice(filler, size=length)
    where = rng.choice(length, size=n_cue, replace=False)
    toks[where] = rng.choice(cues, size=n_cue)
    out = toks.tolist()
    if eos is not None:
        out.append(eos)
    return out


def _check_sizes(prompt_len, resp_len, cue_density):
    if prompt_len < 1 or resp_len < 1:
        raise ValueError("prompt_len and resp_len must be >= 1")
    if not 0 < cue_density <= 1:
        raise ValueError(f"cue_density must lie in (0, 1], got {cue_density}")


def generate_pairs(spec: VocabSpec, n_pairs: int, prompt_len: int = 8, resp_len: int = 12,
                   cue_density: float = 0.25, seed: int = 0, append_eos: bool = True,
                   shared_filler: bool = True) -> list:
    """Build ``n_pairs`` pairs; record ``i`` uses its own seed derived from ``seed``.

    With ``shared_filler`` the rejected response is the chosen one with each
    positive cue swapped for a negative cue, so the pair differs only at the
    cue slots. Otherwise both responses are drawn independently.
    """
    _check_sizes(prompt_len, resp_len, cue_density)
    filler = spec.filler
    eos = spec.eos if append_eos else None
    n_cue = min(resp_len, max(1, int(round(cue_density * resp_len))))
    pairs = []
    for child in np.random.SeedSequence(seed).spawn(n_pairs):
        rng = np.random.default_rng(child)
        prompt = [spec.bos] + rng.choice(filler, size=prompt_len - 1).tolist()
        if shared_filler:
            skeleton = rng.choice(filler, size=resp_len)
            where = rng.choice(resp_len, size=n_cue, replace=False)
            chosen, rejected = skeleton.copy(), skeleton.copy()
            chosen[where] = rng.choice(spec.positive_cues, size=n_cue)
            rejected[where] = rng.choice(spec.negative_cues, size=n_cue)
            tail = [eos] if eos is not None else []
            chosen, rejected = chosen.tolist() + tail, rejected.tolist() + tail
        else:
            chosen = _response(rng, spec.positive_cues, filler, resp_len, cue_density, eos)
            rejected = _response(rng, spec.negative_cues, filler, resp_len, cue_density, eos)
        pairs.append(PreferencePair(prompt, chosen, rejected,
                                    ground_truth_reward(chosen, spec),
                                    ground_truth_reward(rejected, spec)))
    return pairs


def make_sft_records(spec: VocabSpec, n_seqs: int, prompt_len: int = 8, resp_len: int = 12,
                     cue_density: float = 0.25, seed: int = 0, append_eos: bool = True) -> list:
    """Positive-cue sequences for next-token fine-tuning."""
    _check_sizes(prompt_len, resp_len, cue_density)
    filler = spec.filler
    eos = spec.eos if append_eos else None
    out = []
    for child in np.random.SeedSequence([seed, 1]).spawn(n_seqs):
        rng = np.random.default_rng(child)
        prompt = [spec.bos] + rng.choice(filler, size=prompt_len - 1).tolist()
        resp = _response(rng, spec.positive_cues, filler, resp_len, cue_density, eos)
        out.append({"prompt": prompt, "response": resp,
                    "score": ground_truth_reward(resp, spec)})
    return out


# ---- line-delimited JSON files --------------------------------------------
def _header(fmt: str, spec: VocabSpec, **extra) -> dict:
    return {"format": fmt, "version": FORMAT_VERSION, "vocab": spec.to_dict(), **extra}


def write_jsonl(path, header: dict, records: Iterable[dict]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return path


def read_jsonl(path) -> tuple[dict, list]:
    with open(path) as fh:
        lines = [ln for ln in fh.read().splitlines() if ln.strip()]
    if not lines:
        raise ValueError(f"{path}: empty file")
    header = json.loads(lines[0])
    if "format" not in header:
        raise ValueError(f"{path}: missing header line")
    return header, [json.loads(ln) for ln in lines[1:]]


def generate_dataset(spec: VocabSpec, n_pairs: int, prompt_len: int = 8, resp_len: int = 12,
                     cue_density: float = 0.25, seed: int = 0, out=None, append_eos: bool = True):
    pairs = generate_pairs(spec, n_pairs, prompt_len, resp_len, cue_density, seed, append_eos)
    if out is not None:
        header = _header(DATASET_FORMAT, spec, n_pairs=n_pairs, prompt_len=prompt_len,
                         resp_len=resp_len, cue_density=cue_density, seed=seed)
        write_jsonl(out, header, (p.to_record() for p in pairs))
    return pairs


def make_sft_corpus(spec: VocabSpec, n_seqs: int, prompt_len: int = 8, resp_len: int = 12,
                    cue_density: float = 0.25, seed: int = 0, out=None, append_eos: bool = True):
    recs = make_sft_records(spec, n_seqs, prompt_len, resp_len, cue_density, seed, append_eos)
    if out is not None:
        header = _header(SFT_FORMAT, spec, n_seqs=n_seqs, prompt_len=prompt_len,
                         resp_len=resp_len, cue_density=cue_density, seed=seed)
        write_jsonl(out, header, recs)
    return recs


def load_pairs(path) -> tuple[VocabSpec, list]:
    header, recs = read_jsonl(path)
    if header.get("format") != DATASET_FORMAT:
        raise ValueError(f"{path}: expected format {DATASET_FORMAT!r}, got {header.get('format')!r}")
    if header.get("version") != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported version {header.get('version')}")
    spec = VocabSpec.from_dict(header["vocab"])
    pairs = []
    for i, r in enumerate(recs):
        try:
            pair = PreferencePair(r["prompt"], r["chosen"], r["rejected"],
                                  r["chosen_score"], r["rejected_score"])
        except KeyError as exc:
            raise ValueError(f"{path}: record {i} lacks field {exc}") from None
        validate_pair(pair, spec, where=f"{path}: record {i}")
        pairs.append(pair)
    return spec, pairs


def load_sft(path) -> tuple[VocabSpec, list]:
    header, recs = read_jsonl(path)
    if header.get("format") != SFT_FORMAT:
        raise ValueError(f"{path}: expected format {SFT_FORMAT!r}, got {header.get('format')!r}")
    spec = VocabSpec.from_dict(header["vocab"])
    for i, r in enumerate(recs):
        toks = list(r["prompt"]) + list(r["response"])
        if not r["prompt"] or not r["response"]:
            raise ValueError(f"{path}: record {i} has an empty prompt or response")
        if min(toks) < 0 or max(toks) >= spec.vocab_size:
            raise ValueError(f"{path}: record {i} has token ids outside the vocabulary")
    return spec, recs


def validate_pair(pair: PreferencePair, spec: VocabSpec, where: str = "pair") -> None:
    for name in ("prompt", "chosen", "rejected"):
        seq = getattr(pair, name)
        if len(seq) < 1:
            raise ValueError(f"{where}: empty {name}")
        if min(seq) < 0 or max(seq) >= spec.vocab_size:
            raise ValueError(f"{where}: {name} has token ids outside [0, {spec.vocab_size})")
    if not pair.chosen_score > pair.rejected_score:
        raise ValueError(f"{where}: chosen_score {pair.chosen_score} <= rejected_score "
                         f"{pair.rejected_score}")
