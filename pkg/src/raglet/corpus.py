"""Corpus ingestion: byte-level tokens, fixed-length segments, provenance.

Documents are tokenized one byte per token (ids 0..255; BOS=256, EOS=257,
PAD=258 reserved) and cut into consecutive non-overlapping windows of exactly
N tokens. A trailing partial window is dropped, not padded, so every segment
has the same length.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import IngestError, UsageError

BOS = 256
EOS = 257
PAD = 258
VOCAB = 259


def tokenize(data: bytes) -> list[int]:
    """One token id per byte; no BOS/EOS added."""
    return list(data)


def detokenize(tokens) -> bytes:
    """Inverse of tokenize; rejects ids outside the byte range."""
    toks = [int(t) for t in tokens]
    if any(t < 0 or t > 255 for t in toks):
        raise UsageError("detokenize only accepts byte-valued ids (0..255)")
    return bytes(toks)


@dataclass(frozen=True)
class Segment:
    """N consecutive tokens plus where they came from."""
    sample_id: int
    seg_index: int
    tokens: np.ndarray  # shape (N,), int

    @property
    def ref(self) -> tuple[int, int]:
        return (self.sample_id, self.seg_index)


@dataclass
class DocumentRecord:
    """Provenance of one ingested document (for the manifest)."""
    sample_id: int
    source: str
    offset: int
    length: int
    n_segments: int
    dropped_tail: int


@dataclass
class Corpus:
    segments: list[Segment]
    documents: list[DocumentRecord]
    segment_len: int
    doc_count: int = 0
    skipped_docs: int = 0
    dropped_tail_tokens: int = 0
    corpus_id: str = ""

    @property
    def n_segments(self) -> int:
        return len(self.segments)

    def refs(self) -> list[tuple[int, int]]:
        return [s.ref for s in self.segments]

    def by_ref(self) -> dict[tuple[int, int], Segment]:
        return {s.ref: s for s in self.segments}


def segment_document(tokens, n: int, n_min: int | None = None,
                     sample_id: int = 0) -> tuple[list[Segment], int]:
    """Cut a token sequence into windows of exactly n; return (segments, dropped).

    n_min documents the drop rule (a final window shorter than n is dropped);
    it must not exceed n and defaults to n.
    """
    if n <= 0:
        raise UsageError(f"segment length must be positive, got {n}")
    n_min = n if n_min is None else n_min
    if n_min > n:
        raise UsageError(f"n_min ({n_min}) must not exceed n ({n})")
    toks = np.asarray(tokens, dtype=np.int64)
    n_full = len(toks) // n
    segs = [Segment(sample_id, i, toks[i * n:(i + 1) * n].copy()) for i in range(n_full)]
    return segs, len(toks) - n_full * n


def _digest(chunks: list[bytes], n: int) -> str:
    h = hashlib.sha256()
    h.update(f"N={n};docs={len(chunks)};".encode())
    for c in chunks:
        h.update(len(c).to_bytes(8, "little"))
        h.update(c)
    return h.hexdigest()[:16]


def from_documents(docs: list[bytes], n: int, sources: list[tuple[str, int]] | None = None,
                   corpus_id: str | None = None) -> Corpus:
    """Build a Corpus from in-memory documents, in the order given.

    sources: optional (origin, byte offset) per document for the manifest.
    Documents too short to yield a segment are skipped and counted; sample ids
    are assigned contiguously over the kept documents.
    """
    corpus = Corpus(segments=[], documents=[], segment_len=n,
                    corpus_id=corpus_id if corpus_id is not None else _digest(docs, n))
    sid = 0
    for i, doc in enumerate(docs):
        corpus.doc_count += 1
        segs, dropped = segment_document(tokenize(doc), n, sample_id=sid)
        if not segs:
            corpus.skipped_docs += 1
            continue
        corpus.dropped_tail_tokens += dropped
        corpus.segments.extend(segs)
        origin, offset = sources[i] if sources else ("<memory>", 0)
        corpus.documents.append(DocumentRecord(sid, origin, offset, len(doc), len(segs), dropped))
        sid += 1
    return corpus


def load_corpus(path: str | Path, n: int, corpus_id: str | None = None) -> Corpus:
    """Load a newline-delimited document file, or a directory of one-doc files.

    File mode: one document per line (bytes, split on 0x0A; a trailing final
    newline does not create an empty last document). Directory mode: one
    document per file, lexicographic order.
    """
    p = Path(path)
    docs: list[bytes] = []
    sources: list[tuple[str, int]] = []
    if p.is_dir():
        for f in sorted(p.iterdir()):
            if not f.is_file():
                continue
            try:
                docs.append(f.read_bytes())
            except OSError as e:
                raise IngestError(f"cannot read {f}: {e}") from e
            sources.append((str(f), 0))
    else:
        try:
            data = p.read_bytes()
        except OSError as e:
            raise IngestError(f"cannot read {p}: {e}") from e
        offset = 0
        for lineno, line in enumerate(data.split(b"\n"), start=1):
            if offset >= len(data) and line == b"":
                break  # trailing newline, not a document
            docs.append(line)
            sources.append((f"{p}:{lineno}", offset))
            offset += len(line) + 1
    return from_documents(docs, n, sources=sources, corpus_id=corpus_id)


def write_manifest(corpus: Corpus, path: str | Path) -> None:
    """Text manifest: sample_id -> source/offset/length plus drop counters."""
    lines = [
        f"corpus_id {corpus.corpus_id}",
        f"segment_len {corpus.segment_len}",
        f"doc_count {corpus.doc_count}",
        f"skipped_docs {corpus.skipped_docs}",
        f"dropped_tail_tokens {corpus.dropped_tail_tokens}",
        f"n_segments {corpus.n_segments}",
        "sample_id\tsource\toffset\tlength\tsegments\tdropped",
    ]
    for d in corpus.documents:
        lines.append(f"{d.sample_id}\t{d.source}\t{d.offset}\t{d.length}\t{d.n_segments}\t{d.dropped_tail}")
    Path(path).write_text("\n".join(lines) + "\n")
