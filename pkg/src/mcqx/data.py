"""Dataset schema, ingestion, de-bias shuffling, tokenization, and truncation.

Records live in line-delimited JSON (one question per line). Answers are
stored 0-based internally; letters A-D are accepted on ingestion.
"""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

SUBJECTS = ("Literature", "History", "Geography", "CivicEducation")
GRADES = (10, 11, 12)
NUM_OPTIONS = 4

PAD_ID = 0
BOS_ID = 1
EOS_ID = 2
UNK_ID = 3
RESERVED_TOKENS = ("<pad>", "<bos>", "<eos>", "<unk>")

_LETTERS = "ABCD"
_TOKEN_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)


class DatasetError(ValueError):
    """Raised when a dataset file contains malformed records.

    Carries one (line_number, item_id, reason) triple per violation.
    """

    def __init__(self, violations: list[tuple[int, str, str]]):
        self.violations = violations
        lines = "; ".join(f"line {ln} (id={iid}): {why}" for ln, iid, why in violations)
        super().__init__(f"{len(violations)} invalid record(s): {lines}")


@dataclass
class McqItem:
    """One multiple-choice question with exactly four options."""

    id: str
    subject: str
    grade: int
    question: str
    options: list[str]
    answer: int
    explanation: str | None = None
    context: str | None = None

    def validate(self) -> list[str]:
        """Return a list of invariant violations (empty when valid)."""
        problems = []
        if not self.id:
            problems.append("missing id")
        if self.subject not in SUBJECTS:
            problems.append(f"unknown subject {self.subject!r}")
        if self.grade not in GRADES:
            problems.append(f"grade must be one of {GRADES}, got {self.grade!r}")
        if not isinstance(self.options, list) or len(self.options) != NUM_OPTIONS:
            problems.append(f"expected exactly {NUM_OPTIONS} options, got "
                            f"{len(self.options) if isinstance(self.options, list) else type(self.options).__name__}")
        elif any(not opt for opt in self.options):
            problems.append("empty option text")
        if not isinstance(self.answer, int) or not 0 <= self.answer < NUM_OPTIONS:
            problems.append("answer out of range")
        if not self.question:
            problems.append("empty question")
        return problems

    @property
    def answer_letter(self) -> str:
        return _LETTERS[self.answer]


def parse_answer(raw) -> int:
    """Map an ingested answer (0-3 int or A-D letter) to a 0-based index."""
    if isinstance(raw, bool):
        raise ValueError(f"answer must be 0-3 or A-D, got {raw!r}")
    if isinstance(raw, int):
        if 0 <= raw < NUM_OPTIONS:
            return raw
        raise ValueError("answer out of range")
    if isinstance(raw, str):
        letter = raw.strip().upper()
        if letter in _LETTERS:
            return _LETTERS.index(letter)
        if letter.isdigit() and 0 <= int(letter) < NUM_OPTIONS:
            return int(letter)
        raise ValueError("answer out of range")
    raise ValueError(f"answer must be 0-3 or A-D, got {raw!r}")


def item_from_record(record: dict) -> McqItem:
    """Build and validate an McqItem from a parsed JSON record."""
    missing = [k for k in ("id", "subject", "grade", "question", "options", "answer")
               if k not in record]
    if missing:
        raise ValueError(f"missing field(s): {', '.join(missing)}")
    item = McqItem(
        id=str(record["id"]),
        subject=record["subject"],
        grade=int(record["grade"]) if str(record["grade"]).isdigit() else record["grade"],
        question=record["question"],
        options=record["options"] if isinstance(record["options"], list) else record["options"],
        answer=parse_answer(record["answer"]),
        explanation=record.get("explanation"),
        context=record.get("context"),
    )
    problems = item.validate()
    if problems:
        raise ValueError("; ".join(problems))
    return item


def load_dataset(path: str | Path) -> list[McqItem]:
    """Load and validate a line-delimited dataset file.

    Raises FileNotFoundError for a missing file and DatasetError listing
    every malformed record with its line number, id, and reason. Duplicate
    ids are a violation.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset file not found: {path}")
    items: list[McqItem] = []
    violations: list[tuple[int, str, str]] = []
    seen_ids: set[str] = set()
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                violations.append((lineno, "?", f"invalid JSON: {exc.msg}"))
                continue
            item_id = str(record.get("id", "?"))
            try:
                item = item_from_record(record)
            except ValueError as exc:
                violations.append((lineno, item_id, str(exc)))
                continue
            if item.id in seen_ids:
                violations.append((lineno, item.id, "duplicate id"))
                continue
            seen_ids.add(item.id)
            items.append(item)
    if violations:
        raise DatasetError(violations)
    return items


def save_dataset(items: Iterable[McqItem], path: str | Path) -> None:
    """Write items as line-delimited JSON; inverse of load_dataset."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for item in items:
            record = {
                "id": item.id,
                "subject": item.subject,
                "grade": item.grade,
                "question": item.question,
                "options": item.options,
                "answer": item.answer,
            }
            if item.explanation is not None:
                record["explanation"] = item.explanation
            if item.context is not None:
                record["context"] = item.context
            fh.write(json.dumps(record, ensure_ascii=False) + "\n")


def shuffle_permutations(seed: int, count: int) -> list[np.ndarray]:
    """The per-item option permutations debias_shuffle draws for a seed.

    Exposed so the shuffle can be audited or inverted; permutation p maps
    new position j to old position p[j].
    """
    rng = np.random.default_rng(seed)
    return [rng.permutation(NUM_OPTIONS) for _ in range(count)]


def apply_permutation(item: McqItem, perm: Sequence[int]) -> McqItem:
    """Reorder options by perm (new[j] = old[perm[j]]) and remap the answer."""
    new_options = [item.options[int(p)] for p in perm]
    new_answer = int(np.argwhere(np.asarray(perm) == item.answer)[0, 0])
    return replace(item, options=new_options, answer=new_answer)


def debias_shuffle(items: Sequence[McqItem], seed: int) -> list[McqItem]:
    """Permute each item's options with a seed-derived uniform permutation.

    The gold option's text is preserved; only its position (and the answer
    index) changes. Deterministic given the seed.
    """
    perms = shuffle_permutations(seed, len(items))
    return [apply_permutation(item, perm) for item, perm in zip(items, perms)]


def option_distribution(items: Iterable[McqItem]) -> tuple[int, int, int, int]:
    """Counts of gold answers per position (A, B, C, D)."""
    counts = Counter(item.answer for item in items)
    return tuple(counts.get(k, 0) for k in range(NUM_OPTIONS))


def tokenize_text(text: str) -> list[str]:
    """Lowercase and split into word / punctuation tokens."""
    return _TOKEN_RE.findall(text.lower())


def normalize_text(text: str) -> str:
    """Canonical surface form: the space-joined token stream."""
    return " ".join(tokenize_text(text))


@dataclass
class TokenSequence:
    """Parallel token ids and surface tokens for one piece of text."""

    ids: list[int]
    tokens: list[str]

    def __len__(self) -> int:
        return len(self.ids)

    def __post_init__(self):
        if len(self.ids) != len(self.tokens):
            raise ValueError("ids and tokens must have equal length")


class Vocabulary:
    """Token-to-id map with fixed reserved ids 0-3 (PAD, BOS, EOS, UNK)."""

    def __init__(self, tokens: Sequence[str] = ()):
        self._token_to_id: dict[str, int] = {t: i for i, t in enumerate(RESERVED_TOKENS)}
        self._id_to_token: list[str] = list(RESERVED_TOKENS)
        for tok in tokens:
            self.add(tok)

    def add(self, token: str) -> int:
        if token in self._token_to_id:
            return self._token_to_id[token]
        idx = len(self._id_to_token)
        self._token_to_id[token] = idx
        self._id_to_token.append(token)
        return idx

    def __len__(self) -> int:
        return len(self._id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self._token_to_id

    def id_of(self, token: str) -> int:
        return self._token_to_id.get(token, UNK_ID)

    def token_of(self, idx: int) -> str:
        return self._id_to_token[idx]

    @classmethod
    def build(cls, texts: Iterable[str], min_count: int = 1) -> "Vocabulary":
        """Build from raw texts; tokens ordered by (count desc, token asc)."""
        counts = Counter()
        for text in texts:
            counts.update(tokenize_text(text))
        ordered = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        return cls([tok for tok, n in ordered if n >= min_count])

    def encode(self, text: str) -> TokenSequence:
        """Tokenize text; unknown tokens map to UNK."""
        tokens = tokenize_text(text)
        return TokenSequence(ids=[self.id_of(t) for t in tokens], tokens=tokens)

    def decode(self, ids: Iterable[int], skip_reserved: bool = True) -> str:
        parts = []
        for idx in ids:
            if skip_reserved and idx in (PAD_ID, BOS_ID, EOS_ID):
                continue
            parts.append(self._id_to_token[idx])
        return " ".join(parts)

    def to_dict(self) -> dict:
        return {"tokens": self._id_to_token[len(RESERVED_TOKENS):]}

    @classmethod
    def from_dict(cls, payload: dict) -> "Vocabulary":
        return cls(payload["tokens"])

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), ensure_ascii=False), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass(frozen=True)
class TruncationCaps:
    """Token caps applied to context, question, and each option."""

    context: int = 400
    question: int = 80
    option: int = 20

    def __post_init__(self):
        if min(self.context, self.question, self.option) < 1:
            raise ValueError("truncation caps must be positive")


@dataclass
class EncodedItem:
    """An McqItem with all text fields tokenized."""

    id: str
    subject: str
    grade: int
    question: TokenSequence
    options: list[TokenSequence]
    answer: int
    explanation: TokenSequence | None = None
    context: TokenSequence = field(default_factory=lambda: TokenSequence([], []))


def encode_item(item: McqItem, vocab: Vocabulary) -> EncodedItem:
    """Tokenize every text field of an item with the given vocabulary."""
    return EncodedItem(
        id=item.id,
        subject=item.subject,
        grade=item.grade,
        question=vocab.encode(item.question),
        options=[vocab.encode(opt) for opt in item.options],
        answer=item.answer,
        explanation=vocab.encode(item.explanation) if item.explanation else None,
        context=vocab.encode(item.context or ""),
    )


def _truncate_seq(seq: TokenSequence, cap: int) -> TokenSequence:
    if len(seq) <= cap:
        return seq
    return TokenSequence(ids=seq.ids[:cap], tokens=seq.tokens[:cap])


def truncate_item(item: EncodedItem, caps: TruncationCaps = TruncationCaps()) -> EncodedItem:
    """Cap field lengths, keeping prefixes. Idempotent."""
    return EncodedItem(
        id=item.id,
        subject=item.subject,
        grade=item.grade,
        question=_truncate_seq(item.question, caps.question),
        options=[_truncate_seq(opt, caps.option) for opt in item.options],
        answer=item.answer,
        explanation=item.explanation,
        context=_truncate_seq(item.context, caps.context),
    )
