"""Bag-of-words documents as measures over word embeddings.

A document is a token-count record; its measure is the normalized count vector
over a fixed vocabulary, whose embedding vectors form the shared support.
"""

from __future__ import annotations

import csv
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import DiscreteMeasure, GeoSparseError, SupportModel, build_support, seeded_rng

log = logging.getLogger(__name__)


class DocumentError(GeoSparseError, ValueError):
    pass


@dataclass(frozen=True)
class Document:
    doc_id: str
    counts: Counter

    @classmethod
    def from_tokens(cls, doc_id, tokens) -> "Document":
        return cls(str(doc_id), Counter(tokens))


@dataclass
class IngestResult:
    support: SupportModel
    vocabulary: tuple
    measures: list
    doc_ids: list
    dropped: dict = field(default_factory=dict)  # doc id -> number of OOV tokens dropped


def _as_document(doc) -> Document:
    if isinstance(doc, Document):
        return doc
    doc_id, counts = doc
    if isinstance(counts, (list, tuple)):
        counts = Counter(counts)
    return Document(str(doc_id), Counter(counts))


def build_vocabulary(documents) -> tuple:
    """Sorted union of tokens with positive count."""
    vocab = set()
    for d in map(_as_document, documents):
        vocab.update(t for t, c in d.counts.items() if c > 0)
    return tuple(sorted(vocab))


def document_weights(doc, index: dict) -> tuple[np.ndarray, int]:
    """Normalized in-vocabulary counts and the number of dropped tokens."""
    d = _as_document(doc)
    w = np.zeros(len(index))
    dropped = 0
    for tok, c in d.counts.items():
        if c < 0:
            raise DocumentError(f"document {d.doc_id!r} has a negative count for {tok!r}")
        j = index.get(tok)
        if j is None:
            dropped += c
        else:
            w[j] += c
    total = w.sum()
    if total <= 0:
        raise DocumentError(f"document {d.doc_id!r} has no in-vocabulary tokens")
    return w / total, dropped


def ingest_documents(documents, embeddings: dict, vocabulary=None, epsilon: float | None = None,
                     support: SupportModel | None = None) -> IngestResult:
    """Turn token-count records into measures on the embedding support.

    With ``vocabulary=None`` the vocabulary is the union of the given documents
    (the training set); pass the training vocabulary and support to ingest test
    documents, whose out-of-vocabulary tokens are dropped and counted.
    """
    docs = [_as_document(d) for d in documents]
    if vocabulary is None:
        vocabulary = build_vocabulary(docs)
    vocabulary = tuple(vocabulary)
    if not vocabulary:
        raise DocumentError("empty vocabulary")
    if support is None:
        missing = [t for t in vocabulary if t not in embeddings]
        if missing:
            raise DocumentError(f"no embedding for vocabulary tokens {missing[:5]}")
        support = build_support(np.stack([np.asarray(embeddings[t], dtype=np.float64) for t in vocabulary]),
                                epsilon)
    elif support.size != len(vocabulary):
        raise DocumentError("support size does not match the vocabulary")
    index = {t: j for j, t in enumerate(vocabulary)}
    measures, dropped = [], {}
    for d in docs:
        w, n_drop = document_weights(d, index)
        measures.append(DiscreteMeasure(w, support))
        if n_drop:
            dropped[d.doc_id] = n_drop
    if dropped:
        log.info("dropped %d out-of-vocabulary tokens across %d documents",
                 sum(dropped.values()), len(dropped))
    return IngestResult(support, vocabulary, measures, [d.doc_id for d in docs], dropped)


# embedding tables -------------------------------------------------------------


def read_embeddings(path) -> dict:
    """CSV with the token in column 1 and coordinates after it; no header."""
    table = {}
    with Path(path).open(newline="") as fh:
        for row in csv.reader(fh):
            if not row:
                continue
            table[row[0]] = np.array([float(v) for v in row[1:]], dtype=np.float64)
    dims = {v.shape[0] for v in table.values()}
    if len(dims) > 1:
        raise DocumentError(f"embedding rows have different dimensions {sorted(dims)}")
    return table


def write_embeddings(path, table: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for tok in sorted(table):
            w.writerow([tok] + [repr(float(v)) for v in table[tok]])
    return path


def read_documents(path) -> tuple[list[Document], list[str]]:
    """CSV with columns doc_id, label, text (whitespace-separated tokens)."""
    docs, labels = [], []
    with Path(path).open(newline="") as fh:
        for row in csv.DictReader(fh):
            docs.append(Document.from_tokens(row["doc_id"], row["text"].split()))
            labels.append(row["label"])
    return docs, labels


def write_documents(path, documents, labels) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["doc_id", "label", "text"])
        for d, lab in zip(documents, labels):
            d = _as_document(d)
            tokens = [t for t in sorted(d.counts) for _ in range(d.counts[t])]
            w.writerow([d.doc_id, lab, " ".join(tokens)])
    return path


# bundled synthetic corpus -----------------------------------------------------


@dataclass(frozen=True)
class CorpusSpec:
    n_classes: int = 5
    docs_per_class: int = 20
    words_per_class: int = 8
    shared_words: int = 8
    dim: int = 2
    doc_length: int = 20
    topic_share: float = 0.4
    class_spread: float = 1.5
    word_spread: float = 1.0
    seed: int = 0


def synthetic_corpus(spec: CorpusSpec = CorpusSpec()):
    """Documents drawn from Gaussian-cluster vocabularies.

    Each class owns a cluster of word embeddings around its own center; a shared
    cluster at the origin supplies filler words. A document mixes its class's
    words (fraction ``topic_share``) with shared words, and each document also
    draws a random sub-vocabulary so documents of one class differ.

    Returns (documents, labels, embeddings).
    """
    rng = seeded_rng(spec.seed)
    angles = 2 * np.pi * np.arange(spec.n_classes) / spec.n_classes
    centers = np.zeros((spec.n_classes, spec.dim))
    centers[:, 0] = spec.class_spread * np.cos(angles)
    if spec.dim > 1:
        centers[:, 1] = spec.class_spread * np.sin(angles)
    embeddings = {}
    class_words = []
    for k in range(spec.n_classes):
        words = [f"c{k}w{j}" for j in range(spec.words_per_class)]
        for w in words:
            embeddings[w] = centers[k] + spec.word_spread * rng.normal(size=spec.dim)
        class_words.append(words)
    shared = [f"s{j}" for j in range(spec.shared_words)]
    for w in shared:
        embeddings[w] = spec.word_spread * rng.normal(size=spec.dim)
    docs, labels = [], []
    for k in range(spec.n_classes):
        for i in range(spec.docs_per_class):
            # per-document word preferences
            p_topic = rng.dirichlet(np.ones(spec.words_per_class))
            p_shared = rng.dirichlet(np.ones(max(spec.shared_words, 1)))
            n_topic = rng.binomial(spec.doc_length, spec.topic_share)
            tokens = list(rng.choice(class_words[k], size=n_topic, p=p_topic))
            if spec.shared_words:
                tokens += list(rng.choice(shared, size=spec.doc_length - n_topic, p=p_shared))
            if not tokens:
                tokens = [class_words[k][0]]
            docs.append(Document.from_tokens(f"d{k}_{i}", [str(t) for t in tokens]))
            labels.append(k)
    return docs, labels, embeddings
