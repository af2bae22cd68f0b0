"""Exact maximum-inner-product retrieval over a small knowledge base."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

Embedder = Callable[[str], np.ndarray]

INDEX_FORMAT = "rlvlm-index"


class IndexBuildError(ValueError):
    pass


@dataclass(frozen=True)
class VectorIndex:
    """Immutable store of unit-norm document embeddings, in insertion order."""

    ids: tuple[str, ...]
    texts: tuple[str, ...]
    matrix: np.ndarray  # (n_docs, d), read-only

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def __len__(self) -> int:
        return len(self.ids)

    def embedding(self, doc_id: str) -> np.ndarray:
        return self.matrix[self.ids.index(doc_id)]


def _freeze(ids, texts, vectors) -> VectorIndex:
    matrix = np.array(vectors, dtype=float)
    if matrix.ndim != 2:
        raise IndexBuildError("document embeddings must form a 2-D matrix")
    matrix.setflags(write=False)
    return VectorIndex(tuple(ids), tuple(texts), matrix)


def build_index(docs: Iterable[tuple[str, str]], embedder: Embedder) -> VectorIndex:
    docs = list(docs)
    if not docs:
        raise IndexBuildError("empty knowledge base")
    seen = set()
    for doc_id, _ in docs:
        if doc_id in seen:
            raise IndexBuildError(f"duplicate document id {doc_id!r}")
        seen.add(doc_id)
    vectors = []
    for _, text in docs:
        v = np.asarray(embedder(text), dtype=float)
        vectors.append(v / np.linalg.norm(v))
    return _freeze([d[0] for d in docs], [d[1] for d in docs], vectors)


def index_from_vectors(ids, vectors, texts=None) -> VectorIndex:
    """Index pre-computed vectors (normalized here)."""
    ids = list(ids)
    if not ids:
        raise IndexBuildError("empty knowledge base")
    if len(set(ids)) != len(ids):
        raise IndexBuildError("duplicate document id")
    m = np.array(vectors, dtype=float)
    m = m / np.linalg.norm(m, axis=1, keepdims=True)
    return _freeze(ids, texts if texts is not None else [""] * len(ids), m)


def mips_retrieve(q: np.ndarray, index: VectorIndex) -> tuple[str, float]:
    """Exhaustive argmax of <q, D_i>; the earliest document wins ties."""
    q = np.asarray(q, dtype=float)
    if q.shape != (index.dim,):
        raise ValueError(f"query shape {q.shape} does not match index dimension {index.dim}")
    scores = index.matrix @ q
    best = int(np.argmax(scores))
    return index.ids[best], float(scores[best])


def feedback_score(generated_text: str, index: VectorIndex, embedder: Embedder) -> float:
    """Cosine between the text and its best-matching document, clamped to [-1, 1]."""
    if not generated_text or not generated_text.strip():
        raise ValueError("generated text is empty")
    q = np.asarray(embedder(generated_text), dtype=float)
    _, score = mips_retrieve(q / np.linalg.norm(q), index)
    return float(np.clip(score, -1.0, 1.0))


def load_knowledge_base(path: str | Path) -> list[tuple[str, str]]:
    """Read ``{"id", "text"}`` JSONL records."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"knowledge base not found: {path}")
    docs = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                docs.append((str(obj["id"]), str(obj["text"])))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise IndexBuildError(f"{path}:{lineno}: malformed knowledge line ({exc})") from exc
    return docs


def save_index(path: str | Path, index: VectorIndex) -> None:
    doc = {
        "format": INDEX_FORMAT,
        "version": 1,
        "docs": [
            {"id": i, "text": t, "vector": [float(x) for x in v]}
            for i, t, v in zip(index.ids, index.texts, index.matrix)
        ],
    }
    Path(path).write_text(json.dumps(doc), encoding="utf-8")


def load_index(path: str | Path) -> VectorIndex:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format") != INDEX_FORMAT:
        raise IndexBuildError(f"{path} is not a saved index")
    docs = doc["docs"]
    if not docs:
        raise IndexBuildError("empty knowledge base")
    return _freeze([d["id"] for d in docs], [d["text"] for d in docs], [d["vector"] for d in docs])
