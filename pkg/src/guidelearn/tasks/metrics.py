"""Micro precision/recall/F1 and role-level event evaluation."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Hashable, Iterable, Mapping, Sequence


@dataclass(frozen=True)
class PRF:
    precision: float
    recall: float
    f1: float
    tp: int = 0
    fp: int = 0
    fn: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def prf_from_counts(tp: int, fp: int, fn: int) -> PRF:
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    return PRF(p, r, f, tp, fp, fn)


def micro_prf(gold: Iterable[Hashable], pred: Iterable[Hashable]) -> PRF:
    gold, pred = set(gold), set(pred)
    tp = len(gold & pred)
    return prf_from_counts(tp, len(pred) - tp, len(gold) - tp)


Record = tuple[str, Mapping[str, str]]  # (event_type, role -> value)


def _pairs(roles: Mapping[str, str | None]) -> set[tuple[str, str]]:
    return {(k, v) for k, v in roles.items() if v not in (None, "")}


def align_records(gold: Sequence[Mapping[str, str]], pred: Sequence[Mapping[str, str]]) -> list[tuple[int, int]]:
    """Greedy one-to-one matching of predicted to gold records by shared (role, value) pairs.

    The pair with the largest overlap is fixed first; ties go to the lower
    gold index, then the lower predicted index.
    """
    gsets = [_pairs(g) for g in gold]
    psets = [_pairs(p) for p in pred]
    candidates = sorted(
        ((len(gs & ps), gi, pi) for gi, gs in enumerate(gsets) for pi, ps in enumerate(psets)),
        key=lambda c: (-c[0], c[1], c[2]),
    )
    used_g, used_p, pairs = set(), set(), []
    for _, gi, pi in candidates:
        if gi in used_g or pi in used_p:
            continue
        used_g.add(gi)
        used_p.add(pi)
        pairs.append((gi, pi))
    return sorted(pairs)


def record_counts(gold: Sequence[Mapping[str, str]], pred: Sequence[Mapping[str, str]]) -> tuple[int, int, int]:
    tp = fp = fn = 0
    pairs = align_records(gold, pred)
    seen_g = {g for g, _ in pairs}
    seen_p = {p for _, p in pairs}
    for gi, pi in pairs:
        gs, ps = _pairs(gold[gi]), _pairs(pred[pi])
        shared = len(gs & ps)
        tp += shared
        fp += len(ps) - shared
        fn += len(gs) - shared
    fn += sum(len(_pairs(g)) for i, g in enumerate(gold) if i not in seen_g)
    fp += sum(len(_pairs(p)) for i, p in enumerate(pred) if i not in seen_p)
    return tp, fp, fn


def role_level_eval(
    gold_docs: Mapping[str, Sequence[Record]],
    pred_docs: Mapping[str, Sequence[Record]],
) -> dict:
    """Role-level micro P/R/F1 per event type and overall, split single vs multi record.

    A (document, event type) unit is "multi" when the gold side holds more
    than one record of that type, otherwise "single".
    """
    extra = sorted(set(pred_docs) - set(gold_docs))
    if extra:
        raise KeyError(f"predictions for unknown documents: {extra[:5]}")
    buckets: dict[tuple[str, str], list[int]] = {}

    def add(key, counts):
        acc = buckets.setdefault(key, [0, 0, 0])
        for i in range(3):
            acc[i] += counts[i]

    for doc_id, gold in gold_docs.items():
        pred = pred_docs.get(doc_id, [])
        types = sorted({t for t, _ in gold} | {t for t, _ in pred})
        for etype in types:
            g = [roles for t, roles in gold if t == etype]
            p = [roles for t, roles in pred if t == etype]
            counts = record_counts(g, p)
            split = "multi" if len(g) > 1 else "single"
            for key in ((etype, "all"), (etype, split), ("overall", "all"), ("overall", split)):
                add(key, counts)

    report: dict = {"per_type": {}, "overall": {}}
    for (etype, split), (tp, fp, fn) in sorted(buckets.items()):
        target = report["overall"] if etype == "overall" else report["per_type"].setdefault(etype, {})
        target[split] = prf_from_counts(tp, fp, fn).to_dict()
    for section in [report["overall"], *report["per_type"].values()]:
        for split in ("all", "single", "multi"):
            section.setdefault(split, prf_from_counts(0, 0, 0).to_dict())
    return report


def classification_prf(
    gold: Mapping[str, str],
    pred: Mapping[str, str | None],
    negative: str | None = None,
    classes: Sequence[str] | None = None,
) -> dict:
    """Micro and per-class P/R/F1 over labeled instances; ``negative`` earns no positive credit."""
    gold_items = {(i, y) for i, y in gold.items() if y != negative}
    pred_items = {(i, y) for i, y in pred.items() if y is not None and y != negative}
    labels = list(classes) if classes else sorted({y for _, y in gold_items | pred_items})
    per_class = {}
    for c in labels:
        if c == negative:
            continue
        per_class[c] = micro_prf({x for x in gold_items if x[1] == c}, {x for x in pred_items if x[1] == c}).to_dict()
    correct = sum(1 for i, y in gold.items() if pred.get(i) == y)
    return {
        "micro": micro_prf(gold_items, pred_items).to_dict(),
        "per_class": per_class,
        "accuracy": correct / len(gold) if gold else 0.0,
        "n": len(gold),
    }
