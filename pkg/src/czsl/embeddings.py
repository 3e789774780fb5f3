"""Semantic class-label vectors and cosine similarity."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np


class EmbeddingFormatError(ValueError):
    pass


def cosine(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine of a zero-norm vector is undefined")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


@dataclass
class EmbeddingTable:
    """Label -> d-vector lookup with a cached L2-normalized copy."""

    dim: int
    vectors: dict[str, np.ndarray]
    _normalized: dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        for label, vec in self.vectors.items():
            vec = np.asarray(vec, dtype=np.float64)
            if vec.shape != (self.dim,):
                raise EmbeddingFormatError(
                    f"{label!r}: expected dimension {self.dim}, got {vec.shape}"
                )
            if not np.linalg.norm(vec) > 0:
                raise EmbeddingFormatError(f"{label!r}: zero-norm vector")
            self.vectors[label] = vec

    def __len__(self):
        return len(self.vectors)

    def __contains__(self, label):
        return label in self.vectors

    def __getitem__(self, label) -> np.ndarray:
        return self.vectors[label]

    def normalized(self, label) -> np.ndarray:
        if label not in self._normalized:
            v = self.vectors[label]
            self._normalized[label] = v / np.linalg.norm(v)
        return self._normalized[label]

    def matrix(self, labels: Iterable[str]) -> np.ndarray:
        """Stack vectors for ``labels``; every label must be present."""
        labels = list(labels)
        missing = [lab for lab in labels if lab not in self.vectors]
        if missing:
            raise KeyError(f"no embedding for {len(missing)} label(s): {missing[:5]}")
        if not labels:
            return np.zeros((0, self.dim))
        return np.stack([self.vectors[lab] for lab in labels])

    @classmethod
    def from_mapping(cls, vectors: Mapping[str, np.ndarray]) -> "EmbeddingTable":
        vectors = dict(vectors)
        if not vectors:
            raise EmbeddingFormatError("empty embedding table")
        dim = len(next(iter(vectors.values())))
        return cls(dim, vectors)


def load_embeddings(path) -> EmbeddingTable:
    """Read the text format: header ``N d`` then ``token v1 ... vd`` per line."""
    path = Path(path)
    with path.open(encoding="utf-8") as fh:
        header = fh.readline().split()
        if len(header) != 2:
            raise EmbeddingFormatError(f"{path}:1: expected header 'N d'")
        try:
            n, dim = int(header[0]), int(header[1])
        except ValueError as exc:
            raise EmbeddingFormatError(f"{path}:1: bad header {header}") from exc
        vectors: dict[str, np.ndarray] = {}
        for lineno, line in enumerate(fh, start=2):
            parts = line.split()
            if not parts:
                continue
            token, values = parts[0], parts[1:]
            if len(values) != dim:
                raise EmbeddingFormatError(
                    f"{path}:{lineno}: expected {dim} values for {token!r}, got {len(values)}"
                )
            if token in vectors:
                raise EmbeddingFormatError(f"{path}:{lineno}: duplicate token {token!r}")
            try:
                vectors[token] = np.array([float(v) for v in values])
            except ValueError as exc:
                raise EmbeddingFormatError(f"{path}:{lineno}: {exc}") from exc
    if len(vectors) != n:
        raise EmbeddingFormatError(f"{path}: header declares {n} entries, found {len(vectors)}")
    return EmbeddingTable(dim, vectors)


def save_embeddings(table: EmbeddingTable, path) -> None:
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"{len(table)} {table.dim}\n")
        for label, vec in table.vectors.items():
            fh.write(label + " " + " ".join(f"{v:.9g}" for v in vec) + "\n")
