"""Vector memory: hashed embeddings, cosine k-NN and a short ring window.

The store is an exhaustive-scan vector database. Embeddings are produced by a
deterministic feature-hashing embedder (256 buckets) so retrieval is
reproducible without a learned model.
"""

from __future__ import annotations

import hashlib
import json
import re
import threading
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable

import numpy as np

DIM = 256
KINDS = ("experience", "observation", "knowledge", "sim_outcome")
_TOKEN_SPLIT = re.compile(r"[\W_]+")


def tokenize(text: str) -> list[str]:
    return [t for t in _TOKEN_SPLIT.split(text.lower()) if t]


def bucket(token: str) -> int:
    h = hashlib.blake2b(token.encode(), digest_size=8).digest()
    return int.from_bytes(h, "little") % DIM


def embed(source: str | Iterable[Any]) -> np.ndarray:
    """Embed text, or a list of features, into a unit vector of length 256."""
    if isinstance(source, str):
        tokens = tokenize(source)
    else:
        tokens = [t for item in source for t in tokenize(str(item))]
    if not tokens:
        raise ValueError("cannot embed empty input")
    vec = np.zeros(DIM)
    for tok in tokens:
        vec[bucket(tok)] += 1.0
    return vec / np.linalg.norm(vec)


@dataclass
class MemoryRecord:
    id: str
    vector: np.ndarray
    payload: Any
    kind: str = "experience"
    stamp: float = 0.0

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=float)
        if self.vector.shape != (DIM,):
            raise ValueError(f"vector must have shape ({DIM},)")
        if abs(np.linalg.norm(self.vector) - 1.0) > 1e-9:
            raise ValueError("vector is not unit norm")
        if self.kind not in KINDS:
            raise ValueError(f"unknown record kind {self.kind!r}")

    def text(self) -> str:
        if isinstance(self.payload, dict) and isinstance(self.payload.get("text"), str):
            return self.payload["text"]
        if isinstance(self.payload, str):
            return self.payload
        return json.dumps(self.payload, sort_keys=True)

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "kind": self.kind,
            "stamp": self.stamp,
            "vector": self.vector.tolist(),
            "payload": self.payload,
        }


@dataclass(frozen=True)
class Hit:
    record: MemoryRecord
    similarity: float


class MemoryStore:
    """One writer, many readers; ``knn`` works on a snapshot of the rows."""

    def __init__(self):
        self._rows: dict[str, MemoryRecord] = {}
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self._rows)

    def upsert(self, record: MemoryRecord) -> int:
        with self._lock:
            self._rows[record.id] = record
            return len(self._rows)

    def get(self, record_id: str) -> MemoryRecord:
        return self._rows[record_id]

    def knn(self, query: np.ndarray, k: int) -> list[Hit]:
        if k < 1:
            raise ValueError("k must be >= 1")
        with self._lock:
            rows = list(self._rows.values())
        if not rows:
            return []
        mat = np.stack([r.vector for r in rows])
        sims = mat @ np.asarray(query, dtype=float)
        order = sorted(range(len(rows)), key=lambda i: (-sims[i], -rows[i].stamp, rows[i].id))
        return [Hit(rows[i], float(sims[i])) for i in order[:k]]

    def assemble_context(self, query: np.ndarray, k: int, token_budget: int) -> list[str]:
        """Top-k record texts in rank order, cut at whole items to fit the budget."""
        if token_budget <= 0:
            raise ValueError("token budget must be positive")
        items: list[str] = []
        used = 0
        for hit in self.knn(query, k):
            text = hit.record.text()
            cost = len(text.split())
            if used + cost > token_budget:
                break
            items.append(text)
            used += cost
        return items

    def save(self, path: str | Path) -> None:
        with self._lock:
            rows = list(self._rows.values())
        with open(path, "w") as fh:
            for r in rows:
                fh.write(json.dumps(r.to_json(), sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "MemoryStore":
        store = cls()
        for line in Path(path).read_text().splitlines():
            if not line.strip():
                continue
            row = json.loads(line)
            store.upsert(MemoryRecord(row["id"], np.array(row["vector"]), row["payload"], row["kind"], row["stamp"]))
        return store


@dataclass
class RingWindow:
    capacity: int = 10
    entries: deque = field(default_factory=deque)

    def __post_init__(self):
        if self.capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.entries = deque(self.entries, maxlen=self.capacity)

    def push(self, stamp: float, lateral_error: float) -> None:
        if self.entries and stamp <= self.entries[-1][0]:
            raise ValueError("ring window stamps must strictly increase")
        self.entries.append((float(stamp), float(lateral_error)))

    def clear(self) -> None:
        self.entries.clear()

    def __len__(self) -> int:
        return len(self.entries)

    def full(self) -> bool:
        return len(self.entries) == self.capacity


def window_slope(window: RingWindow) -> float | None:
    """Least-squares slope of error against time; ``None`` with fewer than two samples."""
    if len(window) < 2:
        return None
    t = np.array([e[0] for e in window.entries])
    y = np.array([e[1] for e in window.entries])
    tc = t - t.mean()
    return float(np.dot(tc, y - y.mean()) / np.dot(tc, tc))
