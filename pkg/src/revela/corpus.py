"""Byte-level tokenization, sentence-complete chunking, and batch construction.

Documents are split into sentences, greedily packed into chunks of at most
120 whitespace words, interleaved round-robin by chunk index across the
corpus, and grouped sequentially into fixed-size training batches. The
``-random`` ablation reshuffles all chunks globally; ``merge_batch_files``
mixes batch files across domains.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

PAD_ID = 256
EOS_ID = 257
VOCAB_SIZE = 258

_SENTENCE_END = re.compile(r"[.!?](?=\s|$)")


# ---------------------------------------------------------------------------
# tokenizer


def tokenize(text: str) -> list[int]:
    """UTF-8 bytes of ``text`` as ids in [0, 256); never emits special ids."""
    return list(text.encode("utf-8"))


def detokenize(ids: Sequence[int]) -> str:
    if any(i >= 256 or i < 0 for i in ids):
        raise ValueError("detokenize: special or out-of-range ids are not text")
    return bytes(ids).decode("utf-8")


# ---------------------------------------------------------------------------
# documents and chunks


@dataclass
class Document:
    id: str
    text: str


@dataclass
class Chunk:
    doc_id: str
    chunk_index: int
    text: str


@dataclass
class TrainingBatch:
    chunks: list[Chunk]

    def __len__(self) -> int:
        return len(self.chunks)

    def texts(self) -> list[str]:
        return [c.text for c in self.chunks]


def split_sentences(text: str) -> list[str]:
    """Split after '.', '!' or '?' followed by whitespace or end of text.

    Whitespace is trimmed and empty pieces dropped; punctuation-free text is
    one sentence. Abbreviation mis-splits ("Dr. Smith") are accepted by rule.
    """
    parts: list[str] = []
    start = 0
    for m in _SENTENCE_END.finditer(text):
        piece = text[start:m.end()].strip()
        if piece:
            parts.append(piece)
        start = m.end()
    tail = text[start:].strip()
    if tail:
        parts.append(tail)
    return parts


def _word_count(sentence: str) -> int:
    return len(sentence.split())


def chunk_document(doc: Document, max_words: int = 120) -> list[Chunk]:
    """Greedily pack whole sentences into chunks of at most ``max_words`` words.

    A single sentence longer than ``max_words`` is hard-split at word
    boundaries into ``max_words``-sized pieces, each emitted as its own chunk.
    """
    if max_words < 1:
        raise ValueError("max_words must be positive")
    chunks: list[str] = []
    buffer: list[str] = []
    buffered_words = 0

    def flush():
        nonlocal buffered_words
        if buffer:
            chunks.append(" ".join(buffer))
            buffer.clear()
            buffered_words = 0

    for sentence in split_sentences(doc.text):
        words = sentence.split()
        if len(words) > max_words:
            flush()
            for i in range(0, len(words), max_words):
                chunks.append(" ".join(words[i:i + max_words]))
            continue
        if buffered_words + len(words) > max_words:
            flush()
        buffer.append(sentence)
        buffered_words += len(words)
    flush()
    return [Chunk(doc.id, i, text) for i, text in enumerate(chunks)]


def interleave(chunked_docs: Sequence[Sequence[Chunk]]) -> list[Chunk]:
    """Round-robin by chunk index: every doc's chunk 0 in corpus order, then chunk 1, ..."""
    out: list[Chunk] = []
    depth = max((len(c) for c in chunked_docs), default=0)
    for level in range(depth):
        for chunks in chunked_docs:
            if level < len(chunks):
                out.append(chunks[level])
    return out


def build_batches(chunks: Sequence[Chunk], batch_size: int = 16) -> list[TrainingBatch]:
    """Group sequentially into batches of exactly ``batch_size``; drop the tail."""
    if batch_size < 1:
        raise ValueError("batch_size must be positive")
    full = len(chunks) // batch_size
    return [TrainingBatch(list(chunks[i * batch_size:(i + 1) * batch_size]))
            for i in range(full)]


def shuffle_chunks_global(batches: Sequence[TrainingBatch], seed: int) -> list[TrainingBatch]:
    """Flatten all chunks, shuffle with a seeded generator, regroup (the random ablation)."""
    if not batches:
        return []
    size = len(batches[0].chunks)
    flat = [c for b in batches for c in b.chunks]
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(flat))
    shuffled = [flat[i] for i in order]
    return build_batches(shuffled, size)


def merge_batch_files(paths: Sequence[str], seed: int) -> list[TrainingBatch]:
    """Concatenate batch files and shuffle the batch order with a seeded generator."""
    merged: list[TrainingBatch] = []
    for path in paths:
        merged.extend(load_batches(path))
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(merged))
    return [merged[i] for i in order]


# ---------------------------------------------------------------------------
# file formats (JSONL, UTF-8, LF-terminated)


def load_corpus(path: str) -> list[Document]:
    docs: list[Document] = []
    seen: set[str] = set()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            doc_id = rec.get("id")
            text = rec.get("text")
            if not doc_id or not isinstance(doc_id, str) or text is None:
                raise ValueError(f"{path}:{lineno}: corpus record needs 'id' and 'text'")
            if doc_id in seen:
                raise ValueError(f"{path}:{lineno}: duplicate document id {doc_id!r}")
            seen.add(doc_id)
            title = rec.get("title")
            if title:
                text = f"{title}. {text}"
            docs.append(Document(doc_id, text))
    return docs


def save_corpus(docs: Iterable[Document], path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for doc in docs:
            fh.write(json.dumps({"id": doc.id, "text": doc.text}, ensure_ascii=False))
            fh.write("\n")


def save_batches(batches: Iterable[TrainingBatch], path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for batch in batches:
            rec = {"chunks": [{"doc_id": c.doc_id, "chunk_index": c.chunk_index,
                               "text": c.text} for c in batch.chunks]}
            fh.write(json.dumps(rec, ensure_ascii=False))
            fh.write("\n")


def load_batches(path: str) -> list[TrainingBatch]:
    batches: list[TrainingBatch] = []
    size: int | None = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            chunks = [Chunk(c["doc_id"], int(c["chunk_index"]), c["text"])
                      for c in rec["chunks"]]
            if any(not c.text for c in chunks):
                raise ValueError(f"{path}:{lineno}: empty chunk text")
            if size is None:
                size = len(chunks)
            elif len(chunks) != size:
                raise ValueError(f"{path}:{lineno}: batch size {len(chunks)} != {size}")
            batches.append(TrainingBatch(chunks))
    return batches
