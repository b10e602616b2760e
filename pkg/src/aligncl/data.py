"""Synthetic datasets, TSV ingestion, vocabulary and batching.

Labels are 0-based class indices in memory and 1-based integers in TSV files.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .model import CLS_ID, PAD_ID, UNK_ID

RESERVED = ("[CLS]", "[PAD]", "[UNK]")
SEP = "[SEP]"


class TsvFormatError(ValueError):
    pass


@dataclass(frozen=True)
class LabeledText:
    text: str
    label: int
    line: int | None = field(default=None, compare=False)

    def __post_init__(self):
        if not self.text.strip():
            raise ValueError("empty text")
        if self.label < 0:
            raise ValueError("label must be a non-negative class index")


class Vocab:
    """Whitespace-token vocabulary. Ids 0-2 are [CLS], [PAD], [UNK]; the rest
    are sorted so rebuilding from the same corpus gives the same ids."""

    def __init__(self, tokens: Sequence[str]):
        self.tokens = list(tokens)
        if tuple(self.tokens[:3]) != RESERVED:
            raise ValueError("vocabulary must start with the reserved tokens")
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")

    @classmethod
    def build(cls, texts) -> "Vocab":
        seen = set()
        for t in texts:
            seen.update((t.text if isinstance(t, LabeledText) else t).split())
        seen.difference_update(RESERVED)
        return cls(list(RESERVED) + sorted(seen))

    def __len__(self):
        return len(self.tokens)

    def encode(self, text: str, max_tokens: int | None = None) -> np.ndarray:
        ids = [self.index.get(tok, UNK_ID) for tok in text.split()]
        if max_tokens is not None:
            ids = ids[:max_tokens]
        return np.array([CLS_ID] + ids, dtype=np.int64)


# --- synthetic generation -------------------------------------------------------------


@dataclass
class SynthSpec:
    """Bag-of-tokens classification task.

    Each class owns ``signal_tokens`` tokens. ``separable`` samples only carry
    their own class's signal tokens (at least one). ``overlapping`` samples draw
    from the pooled signal tokens with the own-class ones ``home_weight`` times
    more likely. Every position is a noise token with probability ``noise_rate``.
    """

    name: str = "synth"
    n_classes: int = 3
    n_train: int = 2000
    n_eval: int = 500
    vocab_size: int = 48
    signal_tokens: int = 4
    seq_len: int = 12
    noise_rate: float = 0.5
    difficulty: str = "separable"
    home_weight: float = 2.0
    seed: int = 0

    def validate(self) -> "SynthSpec":
        if self.n_classes < 2:
            raise ValueError("n_classes must be at least 2")
        if self.n_train < 1 or self.n_eval < 0:
            raise ValueError("n_train must be positive and n_eval non-negative")
        if not 0.0 <= self.noise_rate < 1.0:
            raise ValueError("noise_rate must lie in [0, 1)")
        if self.difficulty not in ("separable", "overlapping"):
            raise ValueError(f"unknown difficulty {self.difficulty!r}")
        if self.signal_tokens < 1 or self.seq_len < 1:
            raise ValueError("signal_tokens and seq_len must be positive")
        n_signal = self.n_classes * self.signal_tokens
        if self.vocab_size < n_signal + (1 if self.noise_rate > 0 else 0):
            raise ValueError("vocab_size too small for the signal and noise tokens")
        if self.home_weight <= 0:
            raise ValueError("home_weight must be positive")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        known = {f.name for f in dataclasses.fields(cls)}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown synth spec keys: {sorted(extra)}")
        return cls(**d).validate()


def _sample(spec: SynthSpec, label: int, signal: np.ndarray, noise: list[str],
            rng: np.random.Generator) -> str:
    k, s = spec.n_classes, spec.signal_tokens
    if spec.difficulty == "separable":
        pool = signal[label]
        probs = None
    else:
        pool = signal.reshape(-1)
        w = np.ones(k * s)
        w[label * s:(label + 1) * s] = spec.home_weight
        probs = w / w.sum()
    is_noise = rng.random(spec.seq_len) < spec.noise_rate
    if is_noise.all():
        is_noise[rng.integers(spec.seq_len)] = False
    toks = []
    for noisy in is_noise:
        if noisy:
            toks.append(noise[rng.integers(len(noise))])
        else:
            toks.append(pool[rng.choice(len(pool), p=probs)])
    return " ".join(toks)


def generate_synthetic(spec: SynthSpec) -> tuple[list[LabeledText], list[LabeledText]]:
    """Balanced train/eval splits, deterministic in ``spec.seed``."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    names = [f"w{i:03d}" for i in range(spec.vocab_size)]
    order = rng.permutation(spec.vocab_size)
    n_signal = spec.n_classes * spec.signal_tokens
    signal = np.array([names[i] for i in order[:n_signal]]).reshape(spec.n_classes, -1)
    noise = [names[i] for i in order[n_signal:]]

    def split(n):
        labels = rng.permutation(np.arange(n) % spec.n_classes)
        return [LabeledText(_sample(spec, int(y), signal, noise, rng), int(y)) for y in labels]

    return split(spec.n_train), split(spec.n_eval)


# --- files -------------------------------------------------------------------------


def write_tsv(records: Sequence[LabeledText], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            fh.write(f"{r.label + 1}\t{r.text}\n")


def load_tsv(path, label_map: dict[str, int] | None = None) -> list[LabeledText]:
    """Read ``label<TAB>text`` or ``label<TAB>text1<TAB>text2`` lines.

    Without ``label_map`` labels must be integers 1..K. Pair texts are joined
    with a [SEP] token.
    """
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            fields = line.split("\t")
            if len(fields) not in (2, 3) or not all(f.strip() for f in fields[1:]):
                raise TsvFormatError(f"{path}:{lineno}: expected label<TAB>text[<TAB>text]")
            key = fields[0].strip()
            if label_map is not None:
                if key not in label_map:
                    raise TsvFormatError(f"{path}:{lineno}: unknown label {key!r}")
                label = label_map[key]
            else:
                try:
                    label = int(key) - 1
                except ValueError:
                    raise TsvFormatError(f"{path}:{lineno}: unknown label {key!r}") from None
                if label < 0:
                    raise TsvFormatError(f"{path}:{lineno}: labels start at 1, got {key!r}")
            text = fields[1].strip() if len(fields) == 2 else f"{fields[1].strip()} {SEP} {fields[2].strip()}"
            out.append(LabeledText(text, label, lineno))
    return out


def write_manifest(path, spec: SynthSpec, vocab_size: int) -> None:
    manifest = {"name": spec.name, "K": spec.n_classes, "n_train": spec.n_train,
                "n_eval": spec.n_eval, "vocab_size": vocab_size, "seed": spec.seed}
    Path(path).write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8")


# --- batching ----------------------------------------------------------------------


@dataclass
class EncodedData:
    """Token-id sequences ([CLS] first, untruncated beyond ``max_len``) and labels."""

    seqs: list[np.ndarray]
    labels: np.ndarray

    def __len__(self):
        return len(self.seqs)

    @classmethod
    def from_records(cls, records: Sequence[LabeledText], vocab: Vocab, max_len: int) -> "EncodedData":
        if max_len < 1:
            raise ValueError("max_len must be positive")
        seqs = [vocab.encode(r.text, max_tokens=max_len - 1) for r in records]
        return cls(seqs, np.array([r.label for r in records], dtype=np.int64))

    def subset(self, index) -> "EncodedData":
        return EncodedData([self.seqs[i] for i in index], self.labels[np.asarray(index)])

    def pad(self, index) -> np.ndarray:
        index = np.asarray(index)
        width = max(len(self.seqs[i]) for i in index)
        ids = np.full((index.size, width), PAD_ID, dtype=np.int64)
        for row, i in enumerate(index):
            ids[row, :len(self.seqs[i])] = self.seqs[i]
        return ids


@dataclass
class Batch:
    ids: np.ndarray
    labels: np.ndarray
    index: np.ndarray

    def __len__(self):
        return int(self.labels.size)


def make_batches(data: EncodedData, batch_size: int, seed: int = 0, shuffle: bool = True,
                 epoch: int = 0) -> Iterator[Batch]:
    """Yield padded batches covering every sample once; shuffling depends on (seed, epoch)."""
    n = len(data)
    if n == 0:
        raise ValueError("empty dataset")
    if batch_size < 1:
        raise ValueError("batch_size must be positive")
    order = np.random.default_rng([seed, epoch]).permutation(n) if shuffle else np.arange(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        yield Batch(data.pad(idx), data.labels[idx], idx)
