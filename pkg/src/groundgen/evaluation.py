"""Accuracy per (subset, split) cell, harmonic means, and retrieval recall."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from groundgen.errors import EvalDomainError, MissingPredictionWarning
from groundgen.kb import SPLIT_TAGS, SUBSET_TAGS, KnowledgeBase, QueryRecord

DEFAULT_KS = (1, 5, 10, 20, 50)


def accuracy(preds: Mapping[str, str], golds: Mapping[str, str]) -> float:
    """Fraction of gold query ids whose predicted identifier matches exactly."""
    if not golds:
        raise EvalDomainError("accuracy over zero queries is undefined")
    missing = [qid for qid in golds if qid not in preds]
    if missing:
        warnings.warn(f"{len(missing)} queries have no prediction; counted incorrect", MissingPredictionWarning, stacklevel=2)
    correct = sum(1 for qid, gold in golds.items() if preds.get(qid) == gold)
    return correct / len(golds)


def harmonic_mean(a: float, b: float) -> float:
    if a < 0 or b < 0:
        raise EvalDomainError(f"harmonic mean needs non-negative inputs, got {a}, {b}")
    if a == 0 or b == 0:
        return 0.0
    return 2.0 * a * b / (a + b)


def _hm_or_none(a: float | None, b: float | None) -> float | None:
    if a is None or b is None:
        return None
    return harmonic_mean(a, b)


def recall_at_k(
    retrievals: Mapping[str, Sequence[str]], golds: Mapping[str, str], ks: Iterable[int]
) -> dict[int, float]:
    """Per k, fraction of queries whose gold id is among the first k retrieved."""
    qids = list(golds)
    if not qids:
        return {}
    ranks = {}
    for qid in qids:
        ranked = list(retrievals.get(qid, ()))
        ranks[qid] = ranked.index(golds[qid]) if golds[qid] in ranked else None
    return {
        k: sum(1 for r in ranks.values() if r is not None and r < k) / len(qids)
        for k in sorted(set(ks))
    }


def cell_key(subset: str, split: str) -> str:
    return f"{subset}/{split}"


@dataclass
class EvalReport:
    acc: dict[str, float | None]
    counts: dict[str, int]
    hm_entity: float | None
    hm_query: float | None
    hm_overall: float | None
    recall_at_k: dict[int, float] = field(default_factory=dict)
    split_acc: dict[str, float | None] = field(default_factory=dict)
    n_queries: int = 0
    n_missing: int = 0

    def to_json(self) -> dict:
        return {
            "acc": self.acc,
            "counts": self.counts,
            "hm_entity": self.hm_entity,
            "hm_query": self.hm_query,
            "hm_overall": self.hm_overall,
            "split_acc": self.split_acc,
            "recall_at_k": {str(k): v for k, v in sorted(self.recall_at_k.items())},
            "n_queries": self.n_queries,
            "n_missing": self.n_missing,
        }

    def write(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def report(
    preds: Mapping[str, str],
    queries: Sequence[QueryRecord],
    gold_identifiers: Mapping[str, str],
    retrievals: Mapping[str, Sequence[str]] | None = None,
    ks: Iterable[int] = DEFAULT_KS,
) -> EvalReport:
    """Score predicted identifiers against gold identifiers, keyed by query_id.

    ``gold_identifiers`` maps query_id to the gold entity's identifier text.
    Cells without queries are reported as None, and so is any harmonic mean
    that involves such a cell.
    """
    missing = sum(1 for q in queries if q.query_id not in preds)
    if missing:
        warnings.warn(f"{missing} queries have no prediction; counted incorrect", MissingPredictionWarning, stacklevel=2)
    acc: dict[str, float | None] = {}
    counts: dict[str, int] = {}
    split_acc: dict[str, float | None] = {}
    for subset in SUBSET_TAGS:
        for split in SPLIT_TAGS:
            cell = [q for q in queries if q.subset_tag == subset and q.split_tag == split]
            key = cell_key(subset, split)
            counts[key] = len(cell)
            acc[key] = _cell_accuracy(cell, preds, gold_identifiers)
    for split in SPLIT_TAGS:
        split_acc[split] = _cell_accuracy([q for q in queries if q.split_tag == split], preds, gold_identifiers)
    hm_entity = _hm_or_none(acc["entity/seen"], acc["entity/unseen"])
    hm_query = _hm_or_none(acc["query/seen"], acc["query/unseen"])
    rec = {}
    if retrievals is not None:
        rec = recall_at_k(retrievals, {q.query_id: q.gold_entity_id for q in queries}, ks)
    return EvalReport(
        acc=acc,
        counts=counts,
        hm_entity=hm_entity,
        hm_query=hm_query,
        hm_overall=_hm_or_none(hm_entity, hm_query),
        recall_at_k=rec,
        split_acc=split_acc,
        n_queries=len(queries),
        n_missing=missing,
    )


def _cell_accuracy(cell, preds, gold_identifiers) -> float | None:
    if not cell:
        return None
    return sum(1 for q in cell if preds.get(q.query_id) == gold_identifiers.get(q.query_id)) / len(cell)


def gold_identifiers(queries: Sequence[QueryRecord], kb: KnowledgeBase) -> dict[str, str]:
    return {q.query_id: kb.identifier(q.gold_entity_id) for q in queries if q.gold_entity_id in kb}
