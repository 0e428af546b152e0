"""Character vocabulary, corpus helpers and minibatch construction."""

from __future__ import annotations

import hashlib
import json
import math
import random
from collections import Counter
from collections.abc import Iterator
from pathlib import Path

import numpy as np

PAD, UNK = "<pad>", "<unk>"
SPECIALS = (PAD, UNK)


class VocabError(ValueError):
    pass


class Vocab:
    """Bijective symbol <-> id map: specials first, then sorted corpus characters."""

    def __init__(self, symbols: list[str]):
        if list(symbols[: len(SPECIALS)]) != list(SPECIALS):
            raise VocabError("vocabulary must start with the pad/unk specials")
        if len(set(symbols)) != len(symbols):
            raise VocabError("duplicate symbols in vocabulary")
        self.symbols = list(symbols)
        self.index = {s: i for i, s in enumerate(self.symbols)}

    @classmethod
    def from_text(cls, text: str) -> Vocab:
        return cls([*SPECIALS, *sorted(set(text))])

    @property
    def pad_id(self) -> int:
        return self.index[PAD]

    @property
    def unk_id(self) -> int:
        return self.index[UNK]

    def __len__(self) -> int:
        return len(self.symbols)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.symbols == other.symbols

    def unknown_chars(self, text: str) -> list[str]:
        return sorted({c for c in text if c not in self.index})

    def encode(self, text: str, strict: bool = False) -> np.ndarray:
        if strict:
            missing = self.unknown_chars(text)
            if missing:
                raise VocabError(f"characters not in vocabulary: {missing!r}")
        unk = self.unk_id
        return np.array([self.index.get(c, unk) for c in text], dtype=np.int64)

    def decode(self, ids) -> str:
        out = []
        for i in ids:
            s = self.symbols[int(i)]
            if s not in SPECIALS:
                out.append(s)
        return "".join(out)

    def dumps(self) -> str:
        return json.dumps(self.symbols, ensure_ascii=True)

    @classmethod
    def loads(cls, text: str) -> Vocab:
        try:
            symbols = json.loads(text)
        except json.JSONDecodeError as exc:
            raise VocabError(f"bad vocabulary encoding: {exc}") from None
        if not isinstance(symbols, list) or not all(isinstance(s, str) for s in symbols):
            raise VocabError("vocabulary must be a list of strings")
        return cls(symbols)


def read_corpus(path) -> str:
    return Path(path).read_text(encoding="utf-8")


def corpus_hash(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def split_stream(ids: np.ndarray, val_fraction: float) -> tuple[np.ndarray, np.ndarray]:
    """Contiguous train/validation split; validation is the tail."""
    n_val = max(2, int(round(len(ids) * val_fraction)))
    if len(ids) - n_val < 2:
        raise ValueError("corpus too short to split")
    return ids[:-n_val], ids[-n_val:]


def window_starts(n: int, seq_len: int) -> np.ndarray:
    if n <= seq_len:
        raise ValueError(f"token stream of length {n} is too short for seq_len={seq_len}")
    count = (n - 1) // seq_len
    return np.arange(count, dtype=np.int64) * seq_len


def steps_per_epoch(n: int, batch_size: int, seq_len: int) -> int:
    return math.ceil(len(window_starts(n, seq_len)) / batch_size)


def make_batches(stream, batch_size: int, seq_len: int, seed: int,
                 epoch: int = 0) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield (input, target) int arrays of shape (b, seq_len).

    Windows are contiguous and non-overlapping; targets are inputs shifted
    left by one. Window order is shuffled with a generator seeded by
    (seed, epoch). The last batch may be short.
    """
    stream = np.asarray(stream, dtype=np.int64)
    starts = window_starts(len(stream), seq_len)
    order = np.random.default_rng([seed, epoch]).permutation(len(starts))
    offs = np.arange(seq_len + 1)
    for i in range(0, len(order), batch_size):
        chunk = stream[starts[order[i:i + batch_size]][:, None] + offs]
        yield chunk[:, :-1], chunk[:, 1:]


def unigram_perplexity(train_text: str, eval_text: str | None = None) -> float:
    """Perplexity of a character-unigram model fitted by counting.

    Without ``eval_text`` this is exp(entropy) of the character distribution.
    Otherwise the counted (add-one smoothed) model is scored on ``eval_text``.
    """
    counts = Counter(train_text)
    if eval_text is None:
        n = sum(counts.values())
        h = -sum(c / n * math.log(c / n) for c in counts.values())
        return math.exp(h)
    alphabet = set(counts) | set(eval_text)
    n = sum(counts.values()) + len(alphabet)
    nll = -sum(math.log((counts[c] + 1) / n) for c in eval_text)
    return math.exp(nll / len(eval_text))


# -- synthetic corpus -------------------------------------------------------

_NAMES = ["Lily", "Max", "Tom", "Mia", "Ben", "Sue", "Sam", "Anna", "Tim", "Lucy", "Jack", "Zoe"]
_ANIMALS = ["dog", "cat", "bird", "frog", "bunny", "duck", "fox", "bear"]
_THINGS = ["ball", "flower", "box", "kite", "hat", "cake", "boat", "book", "tree", "stone"]
_PLACES = ["garden", "park", "house", "forest", "river", "school", "shop", "beach"]
_ADJ = ["big", "small", "red", "happy", "sad", "shiny", "soft", "old", "little", "pretty"]
_FEEL = ["happy", "sad", "scared", "excited", "tired", "proud", "angry", "calm"]
_VERBS = ["found", "saw", "liked", "wanted", "lost", "made", "took", "shared"]
_RELATIVES = ["mom", "dad", "friend", "sister", "brother", "grandma"]


def _sentence(r: random.Random, hero: str, pet: str) -> str:
    thing = r.choice(_THINGS)
    place = r.choice(_PLACES)
    adj = r.choice(_ADJ)
    kind = r.randrange(9)
    if kind == 0:
        return f"{hero} liked to play in the {place} with the {pet}."
    if kind == 1:
        return f"One day, {hero} {r.choice(_VERBS)} a {adj} {thing}."
    if kind == 2:
        return f"{hero} showed the {thing} to {r.choice(['her', 'his'])} {r.choice(_RELATIVES)}."
    if kind == 3:
        return f"The {pet} was very {r.choice(_FEEL)}."
    if kind == 4:
        return f"\"Look at the {adj} {thing}!\" said {hero}."
    if kind == 5:
        return f"They went to the {place} and {r.choice(_VERBS)} a {thing}."
    if kind == 6:
        return f"{hero} felt {r.choice(_FEEL)} because the {thing} was {adj}."
    if kind == 7:
        return f"The {adj} {pet} ran to the {place}."
    return f"{hero} and the {pet} {r.choice(_VERBS)} the {thing} together."


def synthetic_corpus(n_chars: int, seed: int = 0) -> str:
    """Deterministic children's-story style text of exactly ``n_chars`` characters."""
    r = random.Random(seed)
    parts: list[str] = []
    total = 0
    while total < n_chars:
        hero = r.choice(_NAMES)
        pet = r.choice(_ANIMALS)
        story = [f"Once upon a time, there was a {r.choice(_ADJ)} {pet} and a child named {hero}."]
        story += [_sentence(r, hero, pet) for _ in range(r.randint(3, 7))]
        story.append(f"In the end, {hero} was {r.choice(_FEEL)}.")
        text = " ".join(story) + "\n\n"
        parts.append(text)
        total += len(text)
    return "".join(parts)[:n_chars]


_POSITIVE = ["happy", "excited", "proud", "calm"]
_NEGATIVE = ["sad", "scared", "tired", "angry"]


def sentiment_task(n: int, seed: int = 0) -> list[tuple[str, int]]:
    """Toy binary classification pairs: label 1 if the sentence's feeling word is positive."""
    r = random.Random(seed)
    out = []
    for _ in range(n):
        label = r.randrange(2)
        feel = r.choice(_POSITIVE if label else _NEGATIVE)
        hero, pet = r.choice(_NAMES), r.choice(_ANIMALS)
        template = r.randrange(3)
        if template == 0:
            text = f"{hero} felt {feel} in the {r.choice(_PLACES)}."
        elif template == 1:
            text = f"The {pet} was very {feel}."
        else:
            text = f"{hero} and the {pet} were {feel} after the {r.choice(_THINGS)} game."
        out.append((text, label))
    return out


def read_labeled(path) -> list[tuple[str, int]]:
    """Read ``label<TAB>text`` lines; blank lines are skipped."""
    out = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        label, sep, text = line.partition("\t")
        if not sep:
            raise ValueError(f"{path}:{lineno}: expected label<TAB>text")
        try:
            out.append((text, int(label)))
        except ValueError:
            raise ValueError(f"{path}:{lineno}: label {label!r} is not an integer") from None
    return out
