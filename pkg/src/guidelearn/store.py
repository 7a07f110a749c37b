"""The guideline set: retrieval, usage statistics, epoch-buffered insertion, forgetting, persistence."""

from __future__ import annotations

import json
import os
import tempfile
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from guidelearn import _kernels

FORMAT_VERSION = 1


class StoreFormatError(ValueError):
    pass


class CorruptedStoreError(StoreFormatError):
    pass


def canonical_vector(vec: np.ndarray) -> np.ndarray:
    """Round to the 9-significant-digit values the store file holds, so save/load is exact."""
    arr = np.asarray(vec, dtype=np.float64).ravel()
    return np.array([float(f"{x:.9g}") for x in arr], dtype=np.float64)


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    """Dot product of two unit vectors."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    return float(np.dot(a, b))


@dataclass
class Guideline:
    id: int
    text: str
    embedding: np.ndarray
    n_retrieve: int = 0
    n_hit: int = 0
    n_wrong: int = 0
    created_epoch: int = 0

    @property
    def score(self) -> float:
        return score(self)

    def stats(self) -> tuple[int, int, int]:
        return (self.n_retrieve, self.n_hit, self.n_wrong)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Guideline):
            return NotImplemented
        return (self.id, self.text, self.stats(), self.created_epoch) == (
            other.id, other.text, other.stats(), other.created_epoch
        ) and np.array_equal(self.embedding, other.embedding)


def score(g: Guideline) -> float:
    """Prior helpfulness ``(n_hit - n_wrong) / n_retrieve``; 0 for a rule never retrieved."""
    if g.n_retrieve == 0:
        return 0.0
    return (g.n_hit - g.n_wrong) / g.n_retrieve


@dataclass
class FlushReport:
    inserted: list[int] = field(default_factory=list)
    merged: list[tuple[str, int]] = field(default_factory=list)


class GuidelineStore:
    def __init__(self, dimension: int, task_id: str = ""):
        self.dimension = dimension
        self.task_id = task_id
        self.entries: dict[int, Guideline] = {}
        self.pending: list[str] = []
        self.next_id = 1
        self._lock = threading.RLock()
        self._matrix: np.ndarray | None = None
        self._ids: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries.values())

    def __getitem__(self, gid: int) -> Guideline:
        return self.entries[gid]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, GuidelineStore):
            return NotImplemented
        return (self.dimension, self.task_id, self.next_id, self.pending, list(self.entries.items())) == (
            other.dimension, other.task_id, other.next_id, other.pending, list(other.entries.items())
        )

    # -- retrieval ---------------------------------------------------------

    def _index(self) -> tuple[np.ndarray, np.ndarray]:
        if self._matrix is None:
            rows = list(self.entries.values())
            self._ids = np.array([g.id for g in rows], dtype=np.int64)
            if rows:
                self._matrix = np.ascontiguousarray(np.stack([g.embedding for g in rows]))
            else:
                self._matrix = np.empty((0, self.dimension), dtype=np.float64)
        return self._matrix, self._ids

    def _invalidate(self) -> None:
        self._matrix = None
        self._ids = None

    def retrieve(self, query: np.ndarray, top_k: int, threshold: float) -> list[tuple[Guideline, float]]:
        """Up to ``top_k`` flushed rules with similarity >= threshold, best first, ties by id."""
        query = np.asarray(query, dtype=np.float64)
        if query.shape != (self.dimension,):
            raise ValueError(f"query dimension {query.shape} does not match store dimension {self.dimension}")
        matrix, ids = self._index()
        if len(ids) == 0:
            return []
        sims = _kernels.similarities(matrix, query)
        picked = _kernels.top_k(sims, ids, top_k, threshold)
        return [(self.entries[int(ids[i])], float(sims[i])) for i in picked]

    # -- statistics --------------------------------------------------------

    def _require(self, ids: Iterable[int]) -> list[int]:
        ids = list(dict.fromkeys(ids))
        unknown = [i for i in ids if i not in self.entries]
        if unknown:
            raise KeyError(f"unknown guideline ids: {unknown}")
        return ids

    def record_retrieval(self, ids: Iterable[int]) -> None:
        """Count one retrieval per listed rule (call once per instance)."""
        with self._lock:
            for gid in self._require(ids):
                self.entries[gid].n_retrieve += 1

    def record_outcome(self, referred: Iterable[int], correct: bool, retrieved: Iterable[int] | None = None) -> None:
        with self._lock:
            referred = self._require(referred)
            if retrieved is not None:
                outside = sorted(set(referred) - set(retrieved))
                if outside:
                    raise ValueError(f"referred rules {outside} were not retrieved for this instance")
            for gid in referred:
                g = self.entries[gid]
                if g.n_hit + g.n_wrong >= g.n_retrieve:
                    raise ValueError(f"rule {gid} referred more often than retrieved")
            for gid in referred:
                if correct:
                    self.entries[gid].n_hit += 1
                else:
                    self.entries[gid].n_wrong += 1

    # -- lifecycle ---------------------------------------------------------

    def add_pending(self, rule_text: str) -> None:
        if not rule_text or not rule_text.strip():
            raise ValueError("rule text must be non-empty")
        with self._lock:
            self.pending.append(rule_text)

    def insert(self, text: str, embedding: np.ndarray, created_epoch: int = 0,
               stats: tuple[int, int, int] = (0, 0, 0)) -> Guideline:
        vec = canonical_vector(embedding)
        if vec.shape != (self.dimension,):
            raise ValueError(f"embedding dimension {vec.size} does not match store dimension {self.dimension}")
        if abs(np.linalg.norm(vec) - 1.0) > 1e-6:
            raise ValueError("embedding must be unit-norm")
        n_retrieve, n_hit, n_wrong = stats
        if min(stats) < 0 or n_hit + n_wrong > n_retrieve:
            raise ValueError(f"inconsistent statistics {stats}")
        with self._lock:
            g = Guideline(self.next_id, text, vec, n_retrieve, n_hit, n_wrong, created_epoch)
            self.entries[g.id] = g
            self.next_id += 1
            self._invalidate()
            return g

    def flush_pending(self, embed: Callable[[str], np.ndarray], dup_threshold: float = 0.98,
                      epoch: int = 0) -> FlushReport:
        """Move cached rules into the store in cache order.

        A rule whose best similarity to a stored rule (including ones inserted
        earlier in this flush) reaches ``dup_threshold`` is dropped and
        reported as merged into that rule. If any embedding call fails
        nothing changes and the cache is kept.
        """
        with self._lock:
            vectors = [canonical_vector(embed(t)) for t in self.pending]
            for v in vectors:
                if v.shape != (self.dimension,):
                    raise ValueError(f"embedding dimension {v.size} does not match store dimension {self.dimension}")

            report = FlushReport()
            for text, vec in zip(self.pending, vectors):
                matrix, ids = self._index()
                if len(ids):
                    sims = _kernels.similarities(matrix, vec)
                    best = _kernels.top_k(sims, ids, 1, dup_threshold)
                    if len(best):
                        report.merged.append((text, int(ids[best[0]])))
                        continue
                report.inserted.append(self.insert(text, vec, created_epoch=epoch).id)
            self.pending = []
            return report

    def prune(self, discard_threshold: float = 0.0, min_evidence: int = 1) -> list[int]:
        """Forget rules with enough evidence whose score is strictly below the threshold."""
        with self._lock:
            removed = [g.id for g in self.entries.values()
                       if g.n_retrieve >= min_evidence and score(g) < discard_threshold]
            for gid in removed:
                del self.entries[gid]
            if removed:
                self._invalidate()
            return removed

    def snapshot(self) -> list[dict]:
        return [
            {"id": g.id, "text": g.text, "score": score(g), "n_retrieve": g.n_retrieve,
             "n_hit": g.n_hit, "n_wrong": g.n_wrong, "created_epoch": g.created_epoch}
            for g in self.entries.values()
        ]

    # -- persistence -------------------------------------------------------

    def save(self, path: str | Path) -> None:
        save(self, path)

    @classmethod
    def load(cls, path: str | Path) -> "GuidelineStore":
        return load(path)


def _dumps(rec: dict) -> str:
    return json.dumps(rec, ensure_ascii=False, separators=(",", ":"))


def save(store: GuidelineStore, path: str | Path) -> None:
    """Write the store as JSON lines: header, one line per rule, one per pending text.

    Written to a temporary file in the target directory and renamed into place.
    """
    path = Path(path)
    lines = [_dumps({
        "type": "header", "version": FORMAT_VERSION, "task_id": store.task_id,
        "next_id": store.next_id, "dimension": store.dimension,
        "n_entries": len(store.entries), "n_pending": len(store.pending),
    })]
    for g in store.entries.values():
        emb = ",".join(f"{x:.9g}" for x in g.embedding)
        lines.append(
            '{"type":"rule","id":%d,"text":%s,"embedding":[%s],"n_retrieve":%d,"n_hit":%d,"n_wrong":%d,"created_epoch":%d}'
            % (g.id, json.dumps(g.text, ensure_ascii=False), emb, g.n_retrieve, g.n_hit, g.n_wrong, g.created_epoch)
        )
    for text in store.pending:
        lines.append(_dumps({"type": "pending", "text": text}))
    data = "\n".join(lines) + "\n"

    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load(path: str | Path) -> GuidelineStore:
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        raw = fh.read()
    if not raw.endswith("\n"):
        raise CorruptedStoreError(f"{path}: truncated (no trailing newline)")
    lines = raw.splitlines()
    if not lines:
        raise CorruptedStoreError(f"{path}: empty file")
    try:
        records = [json.loads(line) for line in lines]
    except json.JSONDecodeError as exc:
        raise CorruptedStoreError(f"{path}: undecodable record ({exc})") from exc

    header = records[0]
    if not isinstance(header, dict) or header.get("type") != "header":
        raise CorruptedStoreError(f"{path}: missing header record")
    if header.get("version") != FORMAT_VERSION:
        raise StoreFormatError(f"{path}: store version {header.get('version')!r}, expected {FORMAT_VERSION}")

    try:
        store = GuidelineStore(int(header["dimension"]), str(header.get("task_id", "")))
        rules = [r for r in records[1:] if r.get("type") == "rule"]
        pending = [r["text"] for r in records[1:] if r.get("type") == "pending"]
        if len(rules) != header["n_entries"] or len(pending) != header["n_pending"] \
                or len(rules) + len(pending) != len(records) - 1:
            raise CorruptedStoreError(f"{path}: record count does not match header")
        for r in rules:
            emb = np.array(r["embedding"], dtype=np.float64)
            if emb.shape != (store.dimension,):
                raise CorruptedStoreError(f"{path}: rule {r['id']} has embedding of size {emb.size}")
            g = Guideline(int(r["id"]), r["text"], emb, int(r["n_retrieve"]), int(r["n_hit"]),
                          int(r["n_wrong"]), int(r["created_epoch"]))
            if g.id in store.entries or g.id >= int(header["next_id"]):
                raise CorruptedStoreError(f"{path}: bad rule id {g.id}")
            store.entries[g.id] = g
        store.pending = pending
        store.next_id = int(header["next_id"])
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, StoreFormatError):
            raise
        raise CorruptedStoreError(f"{path}: malformed record ({exc})") from exc
    return store
