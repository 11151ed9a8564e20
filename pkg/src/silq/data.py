"""Byte-level corpora, synthetic generators and mixture batch sampling."""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

DOC_SEP = b"\n\n"
GENERATORS = ("markov-chain", "arithmetic-patterns", "template-dialogue")
PRETRAIN_ROLE = "markov-chain"
SFT_ROLE = "template-dialogue"


def encode(text: str | bytes) -> np.ndarray:
    b = text.encode("utf-8") if isinstance(text, str) else text
    return np.frombuffer(b, dtype=np.uint8).astype(np.int64)


def decode(tokens) -> bytes:
    return bytes(np.asarray(tokens, dtype=np.uint8).tolist())


@dataclass
class Corpus:
    """A list of byte-token documents; batches never cross document boundaries."""

    docs: list[np.ndarray]
    name: str = ""

    def __post_init__(self):
        self.docs = [d for d in self.docs if len(d) >= 2]
        if not self.docs:
            raise ValueError(f"corpus {self.name!r} has no usable documents")

    @property
    def n_tokens(self) -> int:
        return sum(len(d) for d in self.docs)

    def to_bytes(self) -> bytes:
        return DOC_SEP.join(decode(d) for d in self.docs)

    @classmethod
    def from_bytes(cls, raw: bytes, name: str = "") -> "Corpus":
        return cls([encode(p) for p in raw.split(DOC_SEP) if p], name)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "Corpus":
        with open(path, "rb") as f:
            return cls.from_bytes(f.read(), str(path))


# ---------------------------------------------------------------------------
# synthetic generators
# ---------------------------------------------------------------------------

_ALPHABET = "etaoinshrdlucmwfgypb "


def _arithmetic_docs(rng: np.random.Generator, size: int) -> list[str]:
    docs, total = [], 0
    while total < size:
        lines = []
        for _ in range(int(rng.integers(4, 12))):
            a, b = int(rng.integers(0, 50)), int(rng.integers(0, 50))
            op = rng.choice(["+", "-"])
            lines.append(f"{a}{op}{b}={a + b if op == '+' else a - b};")
        doc = " ".join(lines)
        docs.append(doc)
        total += len(doc)
    return docs


_OBJECTS = ["apple", "sky", "grass", "coal", "snow", "sun", "rose", "sea", "lime", "plum", "ash", "gold"]
_COLORS = ["red", "blue", "green", "black", "white", "yellow", "pink", "gray", "purple", "brown"]
_NAMES = ["ana", "bo", "cy", "dee", "eli", "fay", "gus", "hal"]
_PLACES = ["oslo", "lima", "rome", "kiev", "doha", "suva", "bern", "baku"]


def make_synthetic_corpus(generator: str, seed: int, size: int, structure_seed: int = 1234) -> Corpus:
    """Deterministic corpus of roughly ``size`` bytes.

    ``structure_seed`` fixes the generator's hidden rules (transition table,
    fact tables) so held-out corpora drawn with another ``seed`` share them.
    """
    if generator not in GENERATORS:
        raise ValueError(f"unknown generator {generator!r}; choose from {GENERATORS}")
    rules = np.random.default_rng(structure_seed)
    draws = np.random.default_rng(seed)
    if generator == "markov-chain":
        docs = _markov_docs(rules, draws, size)
    elif generator == "template-dialogue":
        docs = _dialogue_docs(rules, draws, size)
    else:
        docs = _arithmetic_docs(draws, size)
    return Corpus([encode(d) for d in docs], generator)


def _markov_docs(rules, draws, size):
    chars = list(_ALPHABET)
    n = len(chars)
    succ = np.stack([rules.choice(n, 3, replace=False) for _ in range(n * n)])
    probs = rules.dirichlet(np.full(3, 0.7), size=n * n)
    cum = np.cumsum(probs, axis=1)
    docs, total = [], 0
    while total < size:
        length = int(draws.integers(96, 384))
        a, b = int(draws.integers(n)), int(draws.integers(n))
        out = [a, b]
        u = draws.random(length)
        for j in range(length - 2):
            ctx = a * n + b
            c = int(succ[ctx][min(int(np.searchsorted(cum[ctx], u[j])), 2)])
            out.append(c)
            a, b = b, c
        docs.append("".join(chars[i] for i in out).strip() + ".")
        total += length
    return docs


def _dialogue_docs(rules, draws, size):
    color = {o: _COLORS[int(rules.integers(len(_COLORS)))] for o in _OBJECTS}
    home = {n: _PLACES[int(rules.integers(len(_PLACES)))] for n in _NAMES}
    docs, total = [], 0
    while total < size:
        turns = []
        for _ in range(int(draws.integers(2, 5))):
            if draws.random() < 0.5:
                o = _OBJECTS[int(draws.integers(len(_OBJECTS)))]
                turns.append(f"user: what color is the {o}?\nbot: the {o} is {color[o]}.")
            else:
                nm = _NAMES[int(draws.integers(len(_NAMES)))]
                turns.append(f"user: where does {nm} live?\nbot: {nm} lives in {home[nm]}.")
        doc = "\n".join(turns)
        docs.append(doc)
        total += len(doc)
    return docs


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------

@dataclass
class CorpusSpec:
    source: str
    weight: float = 1.0
    size: int = 200_000
    seed: int = 0
    tokenizer: str = "byte"

    def load(self) -> Corpus:
        if self.tokenizer != "byte":
            raise ValueError("only the byte-level tokenizer is supported")
        if self.source.startswith("synthetic:"):
            return make_synthetic_corpus(self.source.split(":", 1)[1], self.seed, self.size)
        return Corpus.load(self.source)


def check_mixture(specs: list[CorpusSpec], tol: float = 1e-9) -> None:
    total = sum(s.weight for s in specs)
    if abs(total - 1.0) > tol:
        raise ValueError(f"corpus mixture weights sum to {total}, not 1")


def window(doc: np.ndarray, length: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Random ``length``-token window from one document, right-padded with 0.

    The mask marks target positions (``length - 1`` of them) that hold real tokens.
    """
    tokens = np.zeros(length, dtype=np.int64)
    mask = np.zeros(length - 1, dtype=bool)
    if len(doc) > length:
        start = int(rng.integers(0, len(doc) - length + 1))
        piece = doc[start:start + length]
    else:
        piece = doc
    tokens[:len(piece)] = piece
    mask[:len(piece) - 1] = True
    return tokens, mask


@dataclass
class MixtureSampler:
    """Draws each sequence from ``pretrain`` with probability ``ratio``, else ``sft``."""

    pretrain: Corpus | None
    sft: Corpus | None
    ratio: float
    seed: int = 0
    counts: dict = field(default_factory=lambda: {"pretrain": 0, "sft": 0})

    def __post_init__(self):
        if not 0.0 <= self.ratio <= 1.0:
            raise ValueError("mixture ratio must lie in [0, 1]")
        if (self.ratio > 0 and self.pretrain is None) or (self.ratio < 1 and self.sft is None):
            raise ValueError("mixture needs a corpus for every role with non-zero weight")
        self.rng = np.random.default_rng(self.seed)

    def pick(self) -> str:
        return "pretrain" if self.rng.random() < self.ratio else "sft"

    def sample(self, batch_size: int, length: int) -> tuple[np.ndarray, np.ndarray]:
        toks = np.zeros((batch_size, length), dtype=np.int64)
        mask = np.zeros((batch_size, length - 1), dtype=bool)
        for i in range(batch_size):
            role = self.pick()
            self.counts[role] += 1
            corpus = self.pretrain if role == "pretrain" else self.sft
            doc = corpus.docs[int(self.rng.integers(len(corpus.docs)))]
            toks[i], mask[i] = window(doc, length, self.rng)
        return toks, mask

    def batches(self, n: int, batch_size: int, length: int) -> list[tuple[np.ndarray, np.ndarray]]:
        return [self.sample(batch_size, length) for _ in range(n)]
