"""Toy vocabulary and synthetic task generators.

Every generator is a pure function of the ``numpy.random.Generator`` it is
handed. Sequence lengths are fixed per task so batches are rectangular.
"""
from __future__ import annotations

import functools
import json
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

DIGITS = [str(i) for i in range(10)]
SYMBOLS = ["+", "=", "?", ",", "."]
LETTERS = [chr(ord("A") + i) for i in range(26)]
NAMES = ["John", "Mary", "Tom", "Anna", "Paul", "Kate", "Mark", "Lucy"]
WORDS = ["and", "went", "to", "the", "park", "gave", "a", "ball", "from"]
NUMBERS = [f"{i:02d}" for i in range(100)]
PAD = "<pad>"


class ToyVocab:
    """Fixed string<->id table built from disjoint, hard-coded blocks.

    The first 13 ids are the ten digits and ``+ = ?``, so the addition task
    runs on a 13-token model that is a prefix of the full table.
    """

    blocks = {
        "digits": DIGITS,
        "symbols": SYMBOLS,
        "letters": LETTERS,
        "names": NAMES,
        "words": WORDS,
        "numbers": NUMBERS,
        "pad": [PAD],
    }

    def __init__(self):
        self.tokens: list[str] = [t for block in self.blocks.values() for t in block]
        self.index = {t: i for i, t in enumerate(self.tokens)}
        assert len(self.index) == len(self.tokens)

    def __len__(self) -> int:
        return len(self.tokens)

    def encode(self, toks: Iterable[str]) -> list[int]:
        return [self.index[t] for t in toks]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.tokens[int(i)] for i in ids]

    def ids(self, block: str) -> list[int]:
        return self.encode(self.blocks[block])

    @property
    def pad_id(self) -> int:
        return self.index[PAD]


VOCAB = ToyVocab()
ADDITION_VOCAB_SIZE = 13


@dataclass
class PatchPair:
    """A clean/corrupt prompt pair with disjoint answer sets (token ids)."""

    clean: list[int]
    corrupt: list[int]
    answers: list[int]
    wrong_answers: list[int]
    answer_position: int = -1

    def __post_init__(self):
        if self.answer_position < 0:
            self.answer_position += len(self.clean)
        self.validate()

    def validate(self) -> None:
        if len(self.clean) != len(self.corrupt):
            raise ValueError("clean and corrupt prompts differ in length")
        if not self.answers or not self.wrong_answers:
            raise ValueError("answer sets must be nonempty")
        if set(self.answers) & set(self.wrong_answers):
            raise ValueError("answers and wrong_answers overlap")
        if list(self.clean) == list(self.corrupt):
            raise ValueError("clean and corrupt prompts are identical")
        if not 0 <= self.answer_position < len(self.clean):
            raise ValueError("answer_position out of range")

    def to_json(self, vocab: ToyVocab = VOCAB) -> str:
        return json.dumps({
            "clean": vocab.decode(self.clean),
            "corrupt": vocab.decode(self.corrupt),
            "answers": vocab.decode(self.answers),
            "wrong_answers": vocab.decode(self.wrong_answers),
            "answer_position": self.answer_position,
        })

    @classmethod
    def from_json(cls, line: str, vocab: ToyVocab = VOCAB) -> "PatchPair":
        d = json.loads(line)
        return cls(vocab.encode(d["clean"]), vocab.encode(d["corrupt"]),
                   vocab.encode(d["answers"]), vocab.encode(d["wrong_answers"]),
                   d.get("answer_position", -1))


def save_pairs(pairs: Iterable[PatchPair], path) -> None:
    with open(path, "w") as fh:
        for p in pairs:
            fh.write(p.to_json() + "\n")


def load_pairs(path) -> list[PatchPair]:
    with open(path) as fh:
        return [PatchPair.from_json(line) for line in fh if line.strip()]


# -- addition ------------------------------------------------------------------
ADDITION_LEN = 10  # a1 a2 + b1 b2 = ? c1 c2 c3


def encode_addition(a: int, b: int) -> list[int]:
    s = f"{a:02d}+{b:02d}=?{a + b:03d}"
    return VOCAB.encode(list(s))


def addition_loss_mask() -> np.ndarray:
    """Mask over next-token targets (length ADDITION_LEN - 1): the three sum digits."""
    m = np.zeros(ADDITION_LEN - 1, dtype=bool)
    m[-3:] = True
    return m


def gen_addition(rng: np.random.Generator) -> tuple[list[int], np.ndarray]:
    a, b = rng.integers(0, 100, size=2)
    return encode_addition(int(a), int(b)), addition_loss_mask()


# -- copy ----------------------------------------------------------------------
def gen_copy(rng: np.random.Generator, length: int = 8) -> PatchPair:
    """``L1..Ln , L1..L(n-1)`` -> ``Ln``; the corrupt prompt swaps ``Ln`` for an unused letter."""
    if length < 3:
        raise ValueError("copy length must be >= 3")
    if length + 1 > len(LETTERS):
        raise ValueError(f"copy length {length} exceeds the letter alphabet")
    letters = VOCAB.ids("letters")
    pick = rng.choice(len(letters), size=length + 1, replace=False)
    seq = [letters[i] for i in pick[:length]]
    repl = letters[pick[length]]
    sep = VOCAB.index[","]
    clean = seq + [sep] + seq[:-1]
    corrupt = seq[:-1] + [repl] + [sep] + seq[:-1]
    return PatchPair(clean, corrupt, [seq[-1]], [repl])


def copy_sequence(rng: np.random.Generator, length: int = 8) -> list[int]:
    """Full training sequence: prompt plus the answer letter."""
    pair = gen_copy(rng, length)
    return pair.clean + pair.answers


# -- indirect object identification --------------------------------------------
IOI_TEMPLATE = "{A} and {B} went to the park . {S} gave a ball to"


def ioi_tokens(a: str, b: str, s: str) -> list[int]:
    return VOCAB.encode(IOI_TEMPLATE.format(A=a, B=b, S=s).split())


def gen_ioi(rng: np.random.Generator) -> PatchPair:
    i, j = rng.choice(len(NAMES), size=2, replace=False)
    a, b = NAMES[i], NAMES[j]
    s_is_b = bool(rng.integers(2))
    s, other = (b, a) if s_is_b else (a, b)
    clean = ioi_tokens(a, b, s)
    corrupt = ioi_tokens(a, b, other)
    return PatchPair(clean, corrupt, VOCAB.encode([other]), VOCAB.encode([s]))


def ioi_sequence(rng: np.random.Generator) -> list[int]:
    pair = gen_ioi(rng)
    return pair.clean + pair.answers


# -- greater-than --------------------------------------------------------------
def greater_than_tokens(start: int) -> list[int]:
    return VOCAB.encode(["from", *f"{start:02d}", "to"])


def greater_than_sets(start: int) -> tuple[list[int], list[int]]:
    ans = [VOCAB.index[f"{y:02d}"] for y in range(start + 1, 100)]
    wrong = [VOCAB.index[f"{y:02d}"] for y in range(0, start + 1)]
    return ans, wrong


def gen_greater_than(rng: np.random.Generator) -> PatchPair:
    start = int(rng.integers(0, 100))
    while start > 98:
        start = int(rng.integers(0, 100))
    corrupt_start = int(rng.integers(0, 99))
    while corrupt_start == start:
        corrupt_start = int(rng.integers(0, 99))
    ans, wrong = greater_than_sets(start)
    return PatchPair(greater_than_tokens(start), greater_than_tokens(corrupt_start), ans, wrong)


def greater_than_sequence(rng: np.random.Generator) -> list[int]:
    pair = gen_greater_than(rng)
    return pair.clean + [int(rng.choice(pair.answers))]


# -- task registry ---------------------------------------------------------------
@dataclass
class Task:
    """A training stream plus evaluation helpers for one synthetic task.

    ``sample_batch`` returns ``(inputs, targets)`` with targets set to
    ``IGNORE`` outside the loss mask.
    """

    name: str
    vocab_size: int
    seq_len: int  # model input length
    has_pairs: bool = True
    params: dict = field(default_factory=dict)

    def sequence(self, rng: np.random.Generator) -> tuple[list[int], np.ndarray]:
        if self.name == "addition":
            return gen_addition(rng)
        if self.name == "copy":
            seq = copy_sequence(rng, self.params.get("length", 8))
            n = self.params.get("length", 8)
            mask = np.zeros(len(seq) - 1, dtype=bool)
            mask[n:] = True  # predictions of the copied segment
            return seq, mask
        if self.name == "ioi":
            seq = ioi_sequence(rng)
        elif self.name == "greater_than":
            seq = greater_than_sequence(rng)
        else:
            raise KeyError(self.name)
        mask = np.zeros(len(seq) - 1, dtype=bool)
        mask[-1] = True
        return seq, mask

    def sample_batch(self, rng: np.random.Generator, batch_size: int) -> tuple[np.ndarray, np.ndarray]:
        if self.name == "addition":
            train, _ = addition_split()
            return addition_batch(train[rng.integers(0, len(train), size=batch_size)])
        seqs, masks = zip(*(self.sequence(rng) for _ in range(batch_size)))
        return to_batch(np.array(seqs), np.array(masks))

    def eval_batch(self, n: int = 1000, seed: int = 12345) -> tuple[np.ndarray, np.ndarray]:
        """Held-out evaluation set: unseen addition problems, or a fixed-seed draw."""
        if self.name == "addition":
            _, held = addition_split()
            return addition_batch(held[:n])
        return self.sample_batch(np.random.default_rng(seed), n)

    def pair(self, rng: np.random.Generator) -> PatchPair:
        if self.name == "copy":
            return gen_copy(rng, self.params.get("length", 8))
        if self.name == "ioi":
            return gen_ioi(rng)
        if self.name == "greater_than":
            return gen_greater_than(rng)
        raise ValueError(f"task {self.name!r} has no clean/corrupt pairs")


IGNORE = -100


def to_batch(seqs: np.ndarray, masks: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    inputs = seqs[:, :-1]
    targets = np.where(masks, seqs[:, 1:], IGNORE)
    return inputs, targets


def get_task(name: str, **params) -> Task:
    if name == "addition":
        return Task("addition", ADDITION_VOCAB_SIZE, ADDITION_LEN - 1, has_pairs=False)
    if name == "copy":
        n = params.get("length", 8)
        return Task("copy", len(VOCAB), 2 * n, params={"length": n})
    if name == "ioi":
        return Task("ioi", len(VOCAB), len(ioi_tokens("John", "Mary", "John")))
    if name == "greater_than":
        return Task("greater_than", len(VOCAB), 4)
    raise KeyError(f"unknown task {name!r}")


TASK_NAMES = ("addition", "copy", "ioi", "greater_than")


# -- addition train / held-out split -------------------------------------------
@functools.lru_cache(maxsize=None)
def addition_split(holdout: int = 1000, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic partition of all 10,000 (a, b) problems into train / held-out."""
    perm = np.random.default_rng(seed).permutation(10000)
    problems = np.stack([perm // 100, perm % 100], axis=1)
    problems.flags.writeable = False
    return problems[holdout:], problems[:holdout]


def addition_batch(problems: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    seqs = np.array([encode_addition(int(a), int(b)) for a, b in problems])
    masks = np.broadcast_to(addition_loss_mask(), (len(problems), ADDITION_LEN - 1))
    return to_batch(seqs, masks)


def carries(a: int, b: int) -> int:
    """Number of carries performed when adding two two-digit numbers."""
    units = (a % 10 + b % 10) >= 10
    tens = (a // 10 + b // 10 + units) >= 10
    return int(units) + int(tens)
