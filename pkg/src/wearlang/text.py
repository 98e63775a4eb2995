"""Word-level tokenizer, vocabulary and zero-shot prompt sets."""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

PAD, START, END, UNK = 0, 1, 2, 3
SPECIALS = ("<pad>", "<start>", "<end>", "<unk>")

_TOKEN_RE = re.compile(r"(?<![^\s(])-\d+(?:\.\d+)?|\d+(?:\.\d+)?|[^\W\d_]+|[^\w\s]|_")
_NO_SPACE_BEFORE = {".", ",", ";", ":", "!", "?", ")", "-"}
_NO_SPACE_AFTER = {"(", "-"}


def split_words(text: str) -> list[str]:
    """Lowercase; numbers stay whole, punctuation becomes its own token."""
    return _TOKEN_RE.findall(text.lower())


def join_words(words: Sequence[str]) -> str:
    out = []
    prev = None
    for w in words:
        if out and w not in _NO_SPACE_BEFORE and prev not in _NO_SPACE_AFTER:
            out.append(" ")
        out.append(w)
        prev = w
    return "".join(out)


def normalize_text(text: str) -> str:
    return join_words(split_words(text))


@dataclass(frozen=True)
class Vocabulary:
    itos: tuple[str, ...]  # includes the four specials at ids 0..3

    def __post_init__(self) -> None:
        if self.itos[:4] != SPECIALS:
            raise ValueError("vocabulary must start with the four special tokens")
        if len(set(self.itos)) != len(self.itos):
            raise ValueError("duplicate tokens in vocabulary")
        object.__setattr__(self, "_stoi", {t: i for i, t in enumerate(self.itos)})

    def __len__(self) -> int:
        return len(self.itos)

    def id(self, token: str) -> int:
        return self._stoi.get(token, UNK)

    def tokenize(self, text: str) -> list[int]:
        return [self.id(w) for w in split_words(text)]

    def detokenize(self, ids: Iterable[int]) -> str:
        words = []
        for i in ids:
            i = int(i)
            if i == END:
                break
            if i in (PAD, START):
                continue
            words.append(self.itos[i])
        return join_words(words)

    def save(self, path: str | Path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.itos[4:]), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        return cls(SPECIALS + tuple(lines))


def build_vocab(corpus: Iterable[str], min_freq: int = 1) -> Vocabulary:
    counts: Counter[str] = Counter()
    n = 0
    for text in corpus:
        counts.update(split_words(text))
        n += 1
    if n == 0:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    kept = sorted((t for t, c in counts.items() if c >= min_freq and t not in SPECIALS),
                  key=lambda t: (-counts[t], t))
    return Vocabulary(SPECIALS + tuple(kept))


def encoder_ids(vocab: Vocabulary, text: str, length: int) -> list[int]:
    """``[START] tokens [END]`` padded to ``length``; END is kept when truncating."""
    body = vocab.tokenize(text)[: max(length - 2, 0)]
    ids = [START, *body, END]
    return ids + [PAD] * (length - len(ids))


def decoder_pair(vocab: Vocabulary, text: str, length: int) -> tuple[list[int], list[int]]:
    """Teacher-forcing input ``[START] tokens`` and target ``tokens [END]``, both padded."""
    body = vocab.tokenize(text)[: max(length - 1, 0)]
    inp = [START, *body]
    tgt = [*body, END]
    pad = [PAD] * (length - len(inp))
    return inp + pad, tgt + pad


# --- zero-shot prompts -------------------------------------------------------

PROMPT_TEMPLATES = (
    "A period of {label} was observed during the session.",
    "Detected a phase of {label}.",
    "Data shows {label} took place",
    "The main action was {label}",
    "{label} was detected during the observed period.",
    "The user performed {label}.",
    "{label} was recorded during the day.",
    "Observed {label} activity.",
    "A session of {label} took place.",
    "Identified {label} during the recording.",
    "The user had a period of {label}.",
    "{label} episode occurred.",
    "{label} was observed.",
    "An episode of {label} was recorded.",
    "The data indicates a period of {label}.",
    "The person was doing {label}.",
    "Activity recorded: {label}.",
    "The user engaged in {label}.",
    "A phase of {label} was identified.",
    "{label} took place during the session.",
    "The recording contains a period of {label}.",
    "The sensor data reflects {label}.",
    "The user spent time on {label}.",
    "A bout of {label} was detected.",
    "{label} was the main activity.",
    "The session included {label}.",
    "The person performed {label} activity.",
    "Recorded a period of {label}.",
    "Evidence of {label} was found in the data.",
    "The user was observed during {label}.",
)
N_PROMPTS = 30


@dataclass(frozen=True)
class PromptSet:
    class_label: str
    prompts: tuple[str, ...]

    def __post_init__(self) -> None:
        if len(self.prompts) != N_PROMPTS:
            raise ValueError(f"prompt set needs {N_PROMPTS} prompts, got {len(self.prompts)}")


def make_prompt_set(class_label: str) -> PromptSet:
    return PromptSet(class_label, tuple(t.format(label=class_label) for t in PROMPT_TEMPLATES))
