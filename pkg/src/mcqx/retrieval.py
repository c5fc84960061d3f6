"""Sentence-level corpus indexing, sparse/dense/fused retrieval, and evaluation.

Sparse scoring is Okapi BM25 (k1=1.2, b=0.75) over per-subject partitions;
dense scoring is cosine similarity against a pluggable embedder; fusion is
reciprocal-rank with k=60. Ties always break toward the lower unit id.
"""

from __future__ import annotations

import hashlib
import json
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .data import tokenize_text

DEFAULT_K1 = 1.2
DEFAULT_B = 0.75
DEFAULT_RRF_K = 60
DEFAULT_CONTEXT_K = 15
DEFAULT_CONTEXT_CAP = 400

_SENTENCE_RE = re.compile(r"[^.!?…]+[.!?…]*", re.UNICODE)


@dataclass
class SentenceUnit:
    """One retrievable sentence with its subject tag."""

    unit_id: int
    subject: str
    text: str

    def __post_init__(self):
        if not self.text.strip():
            raise ValueError(f"unit {self.unit_id}: empty text")


@dataclass
class RankedList:
    """Retrieval results as (unit_id, score) pairs, scores non-increasing."""

    entries: list[tuple[int, float]]

    def __post_init__(self):
        ids = [uid for uid, _ in self.entries]
        if len(ids) != len(set(ids)):
            raise ValueError("duplicate unit ids in ranked list")
        scores = [s for _, s in self.entries]
        if any(a < b for a, b in zip(scores, scores[1:])):
            raise ValueError("scores must be non-increasing")

    def __len__(self) -> int:
        return len(self.entries)

    def ids(self) -> list[int]:
        return [uid for uid, _ in self.entries]


@dataclass
class RetrievalJudgment:
    """Relevant unit ids for one query (the question's target lesson)."""

    query_id: str
    relevant: set[int]


def segment_corpus(document: str, subject: str, start_id: int = 0) -> list[SentenceUnit]:
    """Split a document into sentence-level units tagged with the subject.

    Splits on sentence terminators (. ! ? and the ellipsis); a trailing
    fragment without a terminator becomes its own unit.
    """
    units = []
    uid = start_id
    for match in _SENTENCE_RE.finditer(document):
        text = match.group().strip()
        if text:
            units.append(SentenceUnit(unit_id=uid, subject=subject, text=text))
            uid += 1
    return units


class SparseIndex:
    """Okapi BM25 inverted index over one subject partition."""

    def __init__(self, units: Sequence[SentenceUnit], k1: float = DEFAULT_K1, b: float = DEFAULT_B):
        self.k1 = k1
        self.b = b
        self.unit_ids = [u.unit_id for u in units]
        self._tf: dict[int, Counter] = {}
        self._len: dict[int, int] = {}
        self.df: Counter = Counter()
        for unit in units:
            tokens = tokenize_text(unit.text)
            tf = Counter(tokens)
            self._tf[unit.unit_id] = tf
            self._len[unit.unit_id] = len(tokens)
            self.df.update(tf.keys())
        self.n_units = len(units)
        self.avgdl = (sum(self._len.values()) / self.n_units) if units else 0.0

    def idf(self, term: str) -> float:
        df = self.df.get(term, 0)
        return math.log(1.0 + (self.n_units - df + 0.5) / (df + 0.5))

    def score(self, query_tokens: Sequence[str], unit_id: int) -> float:
        """BM25 score of one unit; additive over the query token list."""
        if unit_id not in self._tf:
            raise KeyError(f"unknown unit id {unit_id}")
        tf = self._tf[unit_id]
        length = self._len[unit_id]
        norm = self.k1 * (1.0 - self.b + self.b * length / self.avgdl)
        total = 0.0
        for term in query_tokens:
            freq = tf.get(term, 0)
            if freq == 0:
                continue
            total += self.idf(term) * (freq * (self.k1 + 1.0)) / (freq + norm)
        return total

    def rank(self, query_tokens: Sequence[str], k: int) -> RankedList:
        scored = [(uid, self.score(query_tokens, uid)) for uid in self.unit_ids]
        scored.sort(key=lambda pair: (-pair[1], pair[0]))
        return RankedList(scored[:k])


def bm25_score(index: SparseIndex, query_tokens: Sequence[str], unit_id: int) -> float:
    return index.score(query_tokens, unit_id)


class HashEmbedder:
    """Deterministic toy embedder: bag of hash-seeded token vectors.

    Texts sharing tokens share vector components, so cosine similarity
    tracks lexical overlap. Stands in for pretrained sentence encoders.
    """

    def __init__(self, dim: int = 64):
        self.dim = dim
        self._cache: dict[str, np.ndarray] = {}

    def _token_vector(self, token: str) -> np.ndarray:
        vec = self._cache.get(token)
        if vec is None:
            digest = hashlib.sha256(token.encode("utf-8")).digest()
            seed = int.from_bytes(digest[:8], "little")
            vec = np.random.default_rng(seed).standard_normal(self.dim)
            self._cache[token] = vec
        return vec

    def __call__(self, text: str) -> np.ndarray:
        tokens = tokenize_text(text)
        if not tokens:
            return np.zeros(self.dim)
        return np.mean([self._token_vector(t) for t in tokens], axis=0)


class FileEmbedder:
    """Embeddings read from a precomputed text -> vector file (JSONL)."""

    def __init__(self, path: str | Path):
        self._vectors: dict[str, np.ndarray] = {}
        dim = None
        with Path(path).open(encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                record = json.loads(line)
                vec = np.asarray(record["vector"], dtype=float)
                if dim is None:
                    dim = vec.shape[0]
                elif vec.shape[0] != dim:
                    raise ValueError("inconsistent vector dimensions in embedding file")
                self._vectors[record["text"]] = vec
        if dim is None:
            raise ValueError("empty embedding file")
        self.dim = dim

    def __call__(self, text: str) -> np.ndarray:
        try:
            return self._vectors[text]
        except KeyError:
            raise KeyError(f"no precomputed embedding for text: {text[:60]!r}") from None


def dense_query_vector(question: str, options: Sequence[str],
                       embedder: Callable[[str], np.ndarray]) -> np.ndarray:
    """Mean of the question embedding and the four option embeddings."""
    if len(options) != 4:
        raise ValueError("expected exactly four options")
    vectors = [np.asarray(embedder(question), dtype=float)]
    vectors += [np.asarray(embedder(opt), dtype=float) for opt in options]
    return np.mean(vectors, axis=0)


class DenseIndex:
    """Unit vectors for one subject partition, scored by cosine similarity."""

    def __init__(self, units: Sequence[SentenceUnit],
                 embedder: Callable[[str], np.ndarray] | None = None,
                 vectors: dict[int, np.ndarray] | None = None):
        self.unit_ids = [u.unit_id for u in units]
        if vectors is not None:
            mat = [np.asarray(vectors[u.unit_id], dtype=float) for u in units]
        elif embedder is not None:
            mat = [np.asarray(embedder(u.text), dtype=float) for u in units]
        else:
            raise ValueError("need an embedder or precomputed vectors")
        self._matrix = np.stack(mat) if mat else np.zeros((0, 0))

    def rank(self, query_vector: np.ndarray, k: int) -> RankedList:
        if not self.unit_ids:
            return RankedList([])
        q = np.asarray(query_vector, dtype=float)
        qnorm = np.linalg.norm(q)
        unorms = np.linalg.norm(self._matrix, axis=1)
        denom = qnorm * unorms
        with np.errstate(invalid="ignore", divide="ignore"):
            sims = np.where(denom > 0, self._matrix @ q / np.where(denom > 0, denom, 1.0), 0.0)
        order = sorted(range(len(self.unit_ids)), key=lambda i: (-sims[i], self.unit_ids[i]))
        return RankedList([(self.unit_ids[i], float(sims[i])) for i in order[:k]])


def load_unit_vectors(path: str | Path) -> dict[int, np.ndarray]:
    """Read a precomputed unit_id -> vector file (JSONL)."""
    out: dict[int, np.ndarray] = {}
    with Path(path).open(encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            record = json.loads(line)
            out[int(record["unit_id"])] = np.asarray(record["vector"], dtype=float)
    return out


@dataclass
class Retriever:
    """Per-subject sparse and dense indexes over a sentence corpus."""

    units: list[SentenceUnit]
    embedder: Callable[[str], np.ndarray] | None = None
    unit_vectors: dict[int, np.ndarray] | None = None
    k1: float = DEFAULT_K1
    b: float = DEFAULT_B
    _sparse: dict[str, SparseIndex] = field(default_factory=dict, repr=False)
    _dense: dict[str, DenseIndex] = field(default_factory=dict, repr=False)
    _by_id: dict[int, SentenceUnit] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.embedder is None and self.unit_vectors is None:
            self.embedder = HashEmbedder()
        subjects = sorted({u.subject for u in self.units})
        for subject in subjects:
            part = [u for u in self.units if u.subject == subject]
            self._sparse[subject] = SparseIndex(part, self.k1, self.b)
            self._dense[subject] = DenseIndex(part, embedder=self.embedder,
                                              vectors=self.unit_vectors)
        self._by_id = {u.unit_id: u for u in self.units}

    def unit(self, unit_id: int) -> SentenceUnit:
        return self._by_id[unit_id]

    def sparse_index(self, subject: str) -> SparseIndex:
        return self._sparse[subject]

    def query(self, question: str, options: Sequence[str], subject: str,
              k: int, mode: str = "sparse", rrf_k: int = DEFAULT_RRF_K) -> RankedList:
        """Rank units of the subject partition for one question."""
        if k < 1:
            raise ValueError("k must be >= 1")
        if subject not in self._sparse:
            return RankedList([])
        if mode == "sparse":
            query_tokens = tokenize_text(" ".join([question, *options]))
            return self._sparse[subject].rank(query_tokens, k)
        if mode == "dense":
            if self.embedder is None:
                raise ValueError("dense mode needs an embedder for query texts")
            qvec = dense_query_vector(question, options, self.embedder)
            return self._dense[subject].rank(qvec, k)
        if mode == "rrf":
            sparse = self.query(question, options, subject, k, "sparse")
            dense = self.query(question, options, subject, k, "dense")
            fused = rrf_fuse([sparse, dense], rrf_k)
            return RankedList(fused.entries[:k])
        raise ValueError(f"unknown retrieval mode {mode!r}")


def retrieve_topk(index: SparseIndex | DenseIndex, query, k: int) -> RankedList:
    """Rank a partition index: tokenized query for sparse, vector for dense."""
    if k < 1:
        raise ValueError("k must be >= 1")
    return index.rank(query, k)


def rrf_fuse(lists: Sequence[RankedList], k_rrf: int = DEFAULT_RRF_K) -> RankedList:
    """Reciprocal-rank fusion: score(u) = sum over lists of 1/(k + rank(u))."""
    if len(lists) < 2:
        raise ValueError("rrf_fuse needs at least 2 ranked lists")
    if k_rrf < 1:
        raise ValueError("k_rrf must be >= 1")
    scores: dict[int, float] = {}
    for ranked in lists:
        for rank, (uid, _) in enumerate(ranked.entries, start=1):
            scores[uid] = scores.get(uid, 0.0) + 1.0 / (k_rrf + rank)
    ordered = sorted(scores.items(), key=lambda kv: (-kv[1], kv[0]))
    return RankedList(ordered)


def retrieval_metrics(results: RankedList, judgment: RetrievalJudgment,
                      k: int) -> tuple[float, float]:
    """(Precision@K, Recall@K) of a ranked list against relevant unit ids."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if not judgment.relevant:
        raise ValueError(f"query {judgment.query_id}: empty relevant set")
    hits = len(set(results.ids()[:k]) & judgment.relevant)
    return hits / k, hits / len(judgment.relevant)


def build_context(results: RankedList, units: dict[int, SentenceUnit] | Retriever,
                  k: int = DEFAULT_CONTEXT_K, cap: int = DEFAULT_CONTEXT_CAP) -> str:
    """Concatenate the top-K unit texts in rank order, capped at `cap` tokens."""
    if k < 1:
        raise ValueError("k must be >= 1")
    lookup = units.unit if isinstance(units, Retriever) else units.__getitem__
    texts = [lookup(uid).text for uid in results.ids()[:k]]
    tokens = tokenize_text(" ".join(texts))
    return " ".join(tokens[:cap])


def load_corpus(path: str | Path) -> list[SentenceUnit]:
    """Read a line-delimited {unit_id, subject, text} corpus file."""
    units = []
    with Path(path).open(encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            record = json.loads(line)
            units.append(SentenceUnit(unit_id=int(record["unit_id"]),
                                      subject=record["subject"],
                                      text=record["text"]))
    return units


def save_corpus(units: Iterable[SentenceUnit], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for unit in units:
            fh.write(json.dumps({"unit_id": unit.unit_id, "subject": unit.subject,
                                 "text": unit.text}, ensure_ascii=False) + "\n")


def load_judgments(path: str | Path) -> list[RetrievalJudgment]:
    """Read a line-delimited {query_id, relevant: [unit ids]} file."""
    out = []
    with Path(path).open(encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            record = json.loads(line)
            out.append(RetrievalJudgment(query_id=str(record["query_id"]),
                                         relevant={int(u) for u in record["relevant"]}))
    return out
